import { AnnotationClient, ApiError } from './api.js';
import { EMPTY_OVERLAYS, renderScene } from './render.js';
import type { Canvas2D, Overlays, SceneGeometry } from './render.js';
import { initialState, reduce } from './state.js';
import type { Action, ViewState } from './state.js';
import type { HeatmapPayload, ScenePoints, WireClick } from './types.js';
import { ViewTransform } from './view.js';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export class App {
  private client: AnnotationClient;
  private state: ViewState = initialState();
  private view: ViewTransform;
  private scene: ScenePoints | null = null;
  private geometry: SceneGeometry | null = null;
  private heatmap: HeatmapPayload | null = null;
  private canvas: HTMLCanvasElement;
  private ctx: Canvas2D;
  private dragging = false;
  private dragMoved = false;
  private lastMouse: [number, number] = [0, 0];

  constructor(baseUrl: string) {
    this.client = new AnnotationClient(baseUrl);
    this.canvas = el<HTMLCanvasElement>('bev');
    const ctx = this.canvas.getContext('2d');
    if (!ctx) throw new Error('canvas 2d context unavailable');
    this.ctx = ctx as unknown as Canvas2D;
    this.view = new ViewTransform(this.canvas.width, this.canvas.height);
    this.bindControls();
  }

  private dispatch(action: Action): void {
    this.state = reduce(this.state, action);
    this.syncControls();
    this.paint();
  }

  private bindControls(): void {
    el<HTMLButtonElement>('mode-pos').onclick = () => this.dispatch({ type: 'set-mode', mode: 'pos' });
    el<HTMLButtonElement>('mode-neg').onclick = () => this.dispatch({ type: 'set-mode', mode: 'neg' });
    el<HTMLSelectElement>('class-select').onchange = (ev) => {
      const value = parseInt((ev.target as HTMLSelectElement).value, 10);
      this.dispatch({ type: 'set-class', classId: value });
    };
    el<HTMLInputElement>('toggle-dets').onchange = () => this.dispatch({ type: 'toggle-detections' });
    el<HTMLInputElement>('toggle-gt').onchange = () => this.dispatch({ type: 'toggle-gt' });
    el<HTMLInputElement>('toggle-heat').onchange = () => {
      this.dispatch({ type: 'toggle-heatmap' });
      void this.refreshHeatmap();
    };
    el<HTMLSelectElement>('heat-channel').onchange = (ev) => {
      const value = parseInt((ev.target as HTMLSelectElement).value, 10);
      this.dispatch({ type: 'set-heatmap-channel', channel: value });
      void this.refreshHeatmap();
    };
    el<HTMLButtonElement>('undo').onclick = () => void this.undo();
    el<HTMLButtonElement>('session-start').onclick = () => void this.startSession();
    el<HTMLButtonElement>('export').onclick = () => void this.exportBoxes();

    this.canvas.addEventListener('mousedown', (ev) => {
      this.dragging = true;
      this.dragMoved = false;
      this.lastMouse = [ev.offsetX, ev.offsetY];
    });
    this.canvas.addEventListener('mousemove', (ev) => {
      if (!this.dragging) return;
      const dx = ev.offsetX - this.lastMouse[0];
      const dy = ev.offsetY - this.lastMouse[1];
      if (Math.abs(dx) + Math.abs(dy) > 2) this.dragMoved = true;
      if (this.dragMoved) {
        this.view.panPixels(dx, dy);
        this.lastMouse = [ev.offsetX, ev.offsetY];
        this.paint();
      }
    });
    this.canvas.addEventListener('mouseup', (ev) => {
      const wasDrag = this.dragMoved;
      this.dragging = false;
      this.dragMoved = false;
      if (!wasDrag) void this.onCanvasClick(ev.offsetX, ev.offsetY);
    });
    this.canvas.addEventListener('wheel', (ev) => {
      ev.preventDefault();
      this.view.zoomAt(ev.offsetX, ev.offsetY, ev.deltaY < 0 ? 1.15 : 1 / 1.15);
      this.paint();
    });
  }

  async boot(): Promise<void> {
    try {
      const [scenes, models] = await Promise.all([this.client.listScenes(), this.client.listModels()]);
      const sceneSelect = el<HTMLSelectElement>('scene-select');
      sceneSelect.innerHTML = scenes
        .map((s) => `<option value="${s.id}">${s.id} (${s.n_points} pts)</option>`)
        .join('');
      const modelSelect = el<HTMLSelectElement>('model-select');
      modelSelect.innerHTML = models.map((m) => `<option value="${m.id}">${m.id}</option>`).join('');
    } catch (err) {
      this.toast(err instanceof Error ? err.message : String(err));
    }
  }

  async startSession(): Promise<void> {
    if (this.state.pending) return;
    const sceneId = el<HTMLSelectElement>('scene-select').value;
    const modelId = el<HTMLSelectElement>('model-select').value;
    this.dispatch({ type: 'request-started' });
    try {
      const [session, points] = [
        await this.client.createSession(sceneId, modelId),
        await this.client.scenePoints(sceneId),
      ];
      this.scene = points;
      this.geometry = { xyz: points.xyz, nPoints: points.n_points };
      this.heatmap = null;
      const xs: number[] = [];
      const ys: number[] = [];
      for (let i = 0; i < points.n_points; i++) {
        xs.push(points.xyz[3 * i] as number);
        ys.push(points.xyz[3 * i + 1] as number);
      }
      this.view.fitBounds(Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys));
      const channels = points.class_count + 1;
      el<HTMLSelectElement>('heat-channel').innerHTML = Array.from({ length: channels })
        .map((_, c) => {
          const label = c < points.class_count ? `class ${c + 1}` : 'negative';
          return `<option value="${c}">${label}</option>`;
        })
        .join('');
      this.dispatch({ type: 'session-updated', session });
    } catch (err) {
      this.fail(err);
    }
  }

  /** Convert a canvas click to world meters and send it; roll back the
   * optimistic marker if the server rejects it. */
  async onCanvasClick(sx: number, sy: number): Promise<void> {
    if (!this.state.session || this.state.pending) return;
    const [wx, wy] = this.view.screenToWorld(sx, sy);
    const click: WireClick =
      this.state.mode === 'pos'
        ? { kind: 'pos', class: this.state.activeClass, x: wx, y: wy }
        : { kind: 'neg', x: wx, y: wy };
    const optimistic = { ...this.state.session, clicks: [...this.state.session.clicks, click] };
    const before = this.state.session;
    this.dispatch({ type: 'session-updated', session: optimistic });
    this.dispatch({ type: 'request-started' });
    try {
      const session = await this.client.addClick(before.session_id, click);
      this.dispatch({ type: 'session-updated', session });
      await this.refreshHeatmap();
    } catch (err) {
      // roll the optimistic marker back; server state is unchanged
      this.dispatch({ type: 'session-updated', session: before });
      this.fail(err);
    }
  }

  async undo(): Promise<void> {
    if (!this.state.session || this.state.pending) return;
    if (this.state.session.clicks.length === 0) return;
    this.dispatch({ type: 'request-started' });
    try {
      const session = await this.client.undoClick(this.state.session.session_id);
      this.dispatch({ type: 'session-updated', session });
      await this.refreshHeatmap();
    } catch (err) {
      this.fail(err);
    }
  }

  async refreshHeatmap(): Promise<void> {
    if (!this.state.session || !this.state.showHeatmap) {
      this.heatmap = null;
      this.paint();
      return;
    }
    try {
      this.heatmap = await this.client.heatmap(this.state.session.session_id, this.state.heatmapChannel);
    } catch (err) {
      this.heatmap = null;
      this.fail(err);
    }
    this.paint();
  }

  async exportBoxes(): Promise<void> {
    if (!this.state.session) return;
    const url = `${el<HTMLInputElement>('api-base').value.replace(/\/$/, '')}/sessions/${this.state.session.session_id}/export`;
    window.open(url, '_blank');
  }

  private fail(err: unknown): void {
    const message =
      err instanceof ApiError ? `${err.status}: ${err.detail}` : err instanceof Error ? err.message : String(err);
    this.dispatch({ type: 'request-failed', message });
    this.toast(message);
  }

  private toast(message: string): void {
    const node = el<HTMLDivElement>('toast');
    node.textContent = message;
    node.classList.add('visible');
    setTimeout(() => node.classList.remove('visible'), 4000);
  }

  private syncControls(): void {
    el<HTMLButtonElement>('mode-pos').classList.toggle('active', this.state.mode === 'pos');
    el<HTMLButtonElement>('mode-neg').classList.toggle('active', this.state.mode === 'neg');
    el<HTMLButtonElement>('undo').disabled =
      this.state.pending || !this.state.session || this.state.session.clicks.length === 0;
    const history = el<HTMLUListElement>('history');
    const clicks = this.state.session?.clicks ?? [];
    history.innerHTML = clicks
      .map((c, i) => {
        const tag = c.kind === 'pos' ? `+ class ${c.class}` : '- negative';
        return `<li>#${i + 1} ${tag} @ (${c.x.toFixed(2)}, ${c.y.toFixed(2)})</li>`;
      })
      .join('');
    el<HTMLSpanElement>('det-count').textContent = String(this.state.session?.detections.length ?? 0);
  }

  paint(): void {
    const overlays: Overlays = {
      ...EMPTY_OVERLAYS,
      detections: this.state.session?.detections ?? [],
      gtBoxes: this.scene?.boxes ?? [],
      clicks: this.state.session?.clicks ?? [],
      heatmap: this.heatmap,
      showDetections: this.state.showDetections,
      showGt: this.state.showGt,
      showHeatmap: this.state.showHeatmap,
    };
    renderScene(this.ctx, this.view, this.geometry, overlays);
  }
}

export function start(): void {
  const base = el<HTMLInputElement>('api-base');
  const boot = () => {
    const app = new App(base.value);
    void app.boot();
    (window as unknown as { clickdetApp: App }).clickdetApp = app;
  };
  el<HTMLButtonElement>('connect').onclick = boot;
  boot();
}
