// Thin typed client over the editing service HTTP API.

export interface Info {
  resolutions: number[];
  r: number;
  n: number;
  w_dim: number;
  config_id: string;
}

export interface GenerateResponse {
  png_base64: string;
  w1_id: string;
}

export interface EditRequest {
  seed1: number;
  seed2: number;
  dir_seed: number;
  alpha: number;
}

export interface EditResponse {
  png_base64: string;
  delta_norm: number;
}

export interface DirectionsResponse {
  dir_seeds: number[];
}

export interface TextureResponse {
  levels: Record<string, string>;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  status: number;
  constructor(status: number, message: string) {
    super(message);
    this.status = status;
  }
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let message = `HTTP ${resp.status}`;
    try {
      const body = (await resp.json()) as { error?: string };
      if (body.error) message = body.error;
    } catch {
      // non-JSON error body, keep the status line
    }
    throw new ApiError(resp.status, message);
  }
  return (await resp.json()) as T;
}

export class Client {
  base: string;
  fetchFn: FetchLike;

  constructor(base = "", fetchFn: FetchLike = (u, i) => fetch(u, i)) {
    this.base = base.replace(/\/$/, "");
    this.fetchFn = fetchFn;
  }

  private post(path: string, body: unknown): Promise<Response> {
    return this.fetchFn(this.base + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  async info(): Promise<Info> {
    return asJson(await this.fetchFn(this.base + "/api/info"));
  }

  async generate(seed1: number, seed2: number): Promise<GenerateResponse> {
    return asJson(await this.post("/api/generate", { seed1, seed2 }));
  }

  async edit(req: EditRequest): Promise<EditResponse> {
    return asJson(await this.post("/api/edit", req));
  }

  async directions(seed1: number, count: number): Promise<DirectionsResponse> {
    return asJson(
      await this.fetchFn(
        `${this.base}/api/directions?seed1=${seed1}&count=${count}`,
      ),
    );
  }

  async texture(seed1: number): Promise<TextureResponse> {
    return asJson(await this.fetchFn(`${this.base}/api/texture?seed1=${seed1}`));
  }
}
