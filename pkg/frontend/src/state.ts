import type { SessionState } from './types.js';

/** UI mode and overlay toggles; exactly one click mode is active. */
export interface ViewState {
  mode: 'pos' | 'neg';
  activeClass: number;
  showDetections: boolean;
  showGt: boolean;
  showHeatmap: boolean;
  heatmapChannel: number;
  session: SessionState | null;
  pending: boolean;
  error: string | null;
}

export function initialState(): ViewState {
  return {
    mode: 'pos',
    activeClass: 1,
    showDetections: true,
    showGt: false,
    showHeatmap: false,
    heatmapChannel: 0,
    session: null,
    pending: false,
    error: null,
  };
}

export type Action =
  | { type: 'set-mode'; mode: 'pos' | 'neg' }
  | { type: 'set-class'; classId: number }
  | { type: 'toggle-detections' }
  | { type: 'toggle-gt' }
  | { type: 'toggle-heatmap' }
  | { type: 'set-heatmap-channel'; channel: number }
  | { type: 'request-started' }
  | { type: 'session-updated'; session: SessionState }
  | { type: 'request-failed'; message: string }
  | { type: 'clear-error' };

/** Pure state transition: the view is a function of server state + toggles. */
export function reduce(state: ViewState, action: Action): ViewState {
  switch (action.type) {
    case 'set-mode':
      return { ...state, mode: action.mode };
    case 'set-class':
      if (!Number.isInteger(action.classId) || action.classId < 1) return state;
      return { ...state, activeClass: action.classId };
    case 'toggle-detections':
      return { ...state, showDetections: !state.showDetections };
    case 'toggle-gt':
      return { ...state, showGt: !state.showGt };
    case 'toggle-heatmap':
      return { ...state, showHeatmap: !state.showHeatmap };
    case 'set-heatmap-channel':
      return { ...state, heatmapChannel: Math.max(0, action.channel) };
    case 'request-started':
      return { ...state, pending: true, error: null };
    case 'session-updated':
      return { ...state, pending: false, session: action.session };
    case 'request-failed':
      return { ...state, pending: false, error: action.message };
    case 'clear-error':
      return { ...state, error: null };
  }
}
