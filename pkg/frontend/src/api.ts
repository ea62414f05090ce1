import type {
  HeatmapPayload,
  ModelSummary,
  ScenePoints,
  SceneSummary,
  SessionState,
  WireClick,
} from './types.js';

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function ensureOk(res: Response): Promise<Response> {
  if (!res.ok) {
    let detail = res.statusText;
    try {
      const body = (await res.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(res.status, detail);
  }
  return res;
}

/** Thin typed client over the annotation service endpoints. */
export class AnnotationClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, '') + path;
  }

  async listScenes(): Promise<SceneSummary[]> {
    const res = await ensureOk(await this.fetchImpl(this.url('/scenes')));
    const body = (await res.json()) as { scenes: SceneSummary[] };
    return body.scenes;
  }

  async listModels(): Promise<ModelSummary[]> {
    const res = await ensureOk(await this.fetchImpl(this.url('/models')));
    const body = (await res.json()) as { models: ModelSummary[] };
    return body.models;
  }

  async scenePoints(sceneId: string): Promise<ScenePoints> {
    const res = await ensureOk(
      await this.fetchImpl(this.url(`/scenes/${encodeURIComponent(sceneId)}/points`)),
    );
    return (await res.json()) as ScenePoints;
  }

  async createSession(sceneId: string, modelId: string): Promise<SessionState> {
    const res = await ensureOk(
      await this.fetchImpl(this.url('/sessions'), {
        method: 'POST',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify({ scene_id: sceneId, model_id: modelId }),
      }),
    );
    return (await res.json()) as SessionState;
  }

  async getState(sessionId: string): Promise<SessionState> {
    const res = await ensureOk(await this.fetchImpl(this.url(`/sessions/${sessionId}`)));
    return (await res.json()) as SessionState;
  }

  async addClick(sessionId: string, click: WireClick): Promise<SessionState> {
    const res = await ensureOk(
      await this.fetchImpl(this.url(`/sessions/${sessionId}/clicks`), {
        method: 'POST',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify(click),
      }),
    );
    return (await res.json()) as SessionState;
  }

  async undoClick(sessionId: string): Promise<SessionState> {
    const res = await ensureOk(
      await this.fetchImpl(this.url(`/sessions/${sessionId}/clicks/last`), { method: 'DELETE' }),
    );
    return (await res.json()) as SessionState;
  }

  async heatmap(sessionId: string, channel: number): Promise<HeatmapPayload> {
    const res = await ensureOk(
      await this.fetchImpl(this.url(`/sessions/${sessionId}/heatmap/${channel}`)),
    );
    return (await res.json()) as HeatmapPayload;
  }
}
