/** Types and transport for the studio's JSON API. */

export interface GainVector {
  h: number;
  m: number;
  r: number;
}

export interface RoiRect {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface ChannelFitSummary {
  n: number;
  rms: number;
  converged: boolean;
  iterations: number;
}

export interface FitSummary {
  sigma: number;
  cached: boolean;
  channels: Record<string, ChannelFitSummary>;
}

/**
 * The studio talks to the server only through this interface; tests swap in
 * a mock with scripted latency and canned pixels.
 */
export interface StudioTransport {
  createSession(png: Uint8Array): Promise<string>;
  fitRoi(sessionId: string, roi: RoiRect, sigma?: number): Promise<FitSummary>;
  preview(sessionId: string, roi: RoiRect, alpha: GainVector, sigma?: number): Promise<Uint8Array>;
  exportSchedule(
    sessionId: string,
    roi: RoiRect,
    schedule: GainVector[],
    sigma?: number,
  ): Promise<Uint8Array>;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

async function raiseFor(resp: Response): Promise<void> {
  if (resp.ok) return;
  let message = resp.statusText;
  try {
    const body = (await resp.json()) as { error?: { message?: string } };
    if (body.error?.message) message = body.error.message;
  } catch {
    /* non-JSON error body */
  }
  throw new ApiError(resp.status, message);
}

function roiBody(roi: RoiRect): number[] {
  return [roi.x, roi.y, roi.w, roi.h];
}

export class HttpTransport implements StudioTransport {
  constructor(private readonly baseUrl: string = "") {}

  async createSession(png: Uint8Array): Promise<string> {
    const resp = await fetch(`${this.baseUrl}/session`, {
      method: "POST",
      headers: { "Content-Type": "image/png" },
      body: png as unknown as BodyInit,
    });
    await raiseFor(resp);
    return ((await resp.json()) as { id: string }).id;
  }

  async fitRoi(sessionId: string, roi: RoiRect, sigma?: number): Promise<FitSummary> {
    const resp = await fetch(`${this.baseUrl}/session/${sessionId}/fit`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ roi: roiBody(roi), sigma }),
    });
    await raiseFor(resp);
    return (await resp.json()) as FitSummary;
  }

  async preview(
    sessionId: string,
    roi: RoiRect,
    alpha: GainVector,
    sigma?: number,
  ): Promise<Uint8Array> {
    const resp = await fetch(`${this.baseUrl}/session/${sessionId}/preview`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ roi: roiBody(roi), alpha, sigma }),
    });
    await raiseFor(resp);
    return new Uint8Array(await resp.arrayBuffer());
  }

  async exportSchedule(
    sessionId: string,
    roi: RoiRect,
    schedule: GainVector[],
    sigma?: number,
  ): Promise<Uint8Array> {
    const resp = await fetch(`${this.baseUrl}/session/${sessionId}/export`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ roi: roiBody(roi), schedule, sigma }),
    });
    await raiseFor(resp);
    return new Uint8Array(await resp.arrayBuffer());
  }
}
