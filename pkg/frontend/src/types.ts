/** Wire types for the annotation service (all payloads carry `v`). */

export interface WireClick {
  k?: number;
  kind: 'pos' | 'neg';
  class?: number;
  x: number;
  y: number;
}

export interface WireBox {
  cx: number;
  cy: number;
  cz: number;
  l: number;
  w: number;
  h: number;
  yaw: number;
  class: number;
  score?: number;
}

export interface ScenePoints {
  v: number;
  id: string;
  n_points: number;
  extra_dim: number;
  class_count: number;
  xyz: number[];
  extra: number[];
  boxes: WireBox[];
}

export interface SceneSummary {
  id: string;
  n_points: number;
  class_count: number;
  n_boxes: number;
}

export interface ModelSummary {
  id: string;
  classes: number;
  feature_dim: number;
  tau: number;
}

export interface ChannelSummary {
  channel: number;
  min: number;
  max: number;
  mean: number;
}

export interface SessionState {
  v: number;
  session_id: string;
  scene_id: string;
  model_id: string;
  clicks: WireClick[];
  detections: WireBox[];
  correlation_summary: ChannelSummary[];
  created: number;
  updated: number;
}

export interface HeatmapPayload {
  v: number;
  channel: number;
  n_points: number;
  values: number[];
  xy: number[];
}
