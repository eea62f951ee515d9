/**
 * Studio state machine.
 *
 * Guarantees the UI's two ordering invariants:
 *  - previews are requested only while a fit for the current region exists
 *    ('ready' state), never before or while fitting;
 *  - slider scrubbing keeps at most one preview request in flight, trailing
 *    requests collapse to the latest slider values, and stale responses are
 *    discarded by sequence number, so the displayed preview always matches
 *    the latest slider state once the network is idle.
 */

import type { FitSummary, GainVector, RoiRect, StudioTransport } from "./api.js";

export type FitStatus = "none" | "pending" | "ready" | "error";

export interface ScheduleEntry extends GainVector {
  label: string;
}

export interface UiState {
  sessionId: string | null;
  roi: RoiRect | null;
  fitStatus: FitStatus;
  fit: FitSummary | null;
  sliders: GainVector;
  preview: Uint8Array | null;
  previewPending: boolean;
  schedule: ScheduleEntry[];
  error: string | null;
}

export interface StoreOptions {
  debounceMs?: number;
  sigma?: number;
  setTimeoutFn?: typeof setTimeout;
  clearTimeoutFn?: typeof clearTimeout;
}

export const SLIDER_MIN = -1;
export const SLIDER_MAX = 1;
export const SLIDER_STEP = 0.05;
const DEFAULT_DEBOUNCE_MS = 60;

export function clampGain(value: number): number {
  if (Number.isNaN(value)) return 0;
  const snapped = Math.round(value / SLIDER_STEP) * SLIDER_STEP;
  return Math.min(SLIDER_MAX, Math.max(SLIDER_MIN, Number(snapped.toFixed(2))));
}

type Listener = (state: UiState) => void;

export class StudioStore {
  private state: UiState = {
    sessionId: null,
    roi: null,
    fitStatus: "none",
    fit: null,
    sliders: { h: 0, m: 0, r: 0 },
    preview: null,
    previewPending: false,
    schedule: [],
    error: null,
  };

  private listeners: Listener[] = [];
  private debounceHandle: ReturnType<typeof setTimeout> | null = null;
  private previewSeq = 0; // last issued
  private appliedSeq = 0; // last applied to state
  private inFlight = false;
  private trailing = false; // sliders moved while a request was in flight
  private fitGeneration = 0; // invalidates fits when the roi changes

  private readonly debounceMs: number;
  private readonly sigma: number | undefined;
  private readonly setTimeoutFn: typeof setTimeout;
  private readonly clearTimeoutFn: typeof clearTimeout;

  constructor(
    private readonly transport: StudioTransport,
    options: StoreOptions = {},
  ) {
    this.debounceMs = options.debounceMs ?? DEFAULT_DEBOUNCE_MS;
    this.sigma = options.sigma;
    this.setTimeoutFn = options.setTimeoutFn ?? setTimeout;
    this.clearTimeoutFn = options.clearTimeoutFn ?? clearTimeout;
  }

  getState(): UiState {
    return this.state;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private patch(changes: Partial<UiState>): void {
    this.state = { ...this.state, ...changes };
    for (const listener of this.listeners) listener(this.state);
  }

  async loadImage(png: Uint8Array): Promise<void> {
    this.cancelPreviews();
    this.patch({
      sessionId: null,
      roi: null,
      fitStatus: "none",
      fit: null,
      preview: null,
      schedule: [],
      error: null,
    });
    try {
      const id = await this.transport.createSession(png);
      this.patch({ sessionId: id });
    } catch (err) {
      this.patch({ error: describe(err) });
    }
  }

  /** A fresh rectangle invalidates the previous fit and requests a new one. */
  async setRoi(roi: RoiRect): Promise<void> {
    if (!this.state.sessionId) return;
    const generation = ++this.fitGeneration;
    this.cancelPreviews();
    this.patch({ roi, fitStatus: "pending", fit: null, preview: null, error: null });
    try {
      const fit = await this.transport.fitRoi(this.state.sessionId, roi, this.sigma);
      if (generation !== this.fitGeneration) return; // roi changed again meanwhile
      this.patch({ fitStatus: "ready", fit });
      this.schedulePreview(0); // show the current slider state right away
    } catch (err) {
      if (generation !== this.fitGeneration) return;
      this.patch({ fitStatus: "error", error: describe(err) });
    }
  }

  setSliders(values: Partial<GainVector>): void {
    const sliders = {
      h: clampGain(values.h ?? this.state.sliders.h),
      m: clampGain(values.m ?? this.state.sliders.m),
      r: clampGain(values.r ?? this.state.sliders.r),
    };
    this.patch({ sliders });
    if (this.state.fitStatus === "ready") {
      this.schedulePreview(this.debounceMs);
    }
  }

  addScheduleEntry(label: string): void {
    const { h, m, r } = this.state.sliders;
    this.patch({ schedule: [...this.state.schedule, { h, m, r, label }] });
  }

  removeScheduleEntry(index: number): void {
    this.patch({ schedule: this.state.schedule.filter((_, i) => i !== index) });
  }

  get canExport(): boolean {
    return this.state.schedule.length > 0 && this.state.fitStatus === "ready";
  }

  async exportSchedule(): Promise<Uint8Array | null> {
    if (!this.canExport || !this.state.sessionId || !this.state.roi) return null;
    try {
      return await this.transport.exportSchedule(
        this.state.sessionId,
        this.state.roi,
        this.state.schedule.map(({ h, m, r }) => ({ h, m, r })),
        this.sigma,
      );
    } catch (err) {
      this.patch({ error: describe(err) });
      return null;
    }
  }

  private cancelPreviews(): void {
    if (this.debounceHandle !== null) {
      this.clearTimeoutFn(this.debounceHandle);
      this.debounceHandle = null;
    }
    this.previewSeq += 1; // outstanding responses become stale
    this.appliedSeq = this.previewSeq;
    this.trailing = false;
    this.inFlight = false;
  }

  private schedulePreview(delayMs: number): void {
    if (this.debounceHandle !== null) this.clearTimeoutFn(this.debounceHandle);
    this.debounceHandle = this.setTimeoutFn(() => {
      this.debounceHandle = null;
      this.requestPreview();
    }, delayMs);
    this.patch({ previewPending: true });
  }

  private requestPreview(): void {
    if (this.state.fitStatus !== "ready" || !this.state.sessionId || !this.state.roi) return;
    if (this.inFlight) {
      this.trailing = true; // collapse into one trailing request
      return;
    }
    const seq = ++this.previewSeq;
    const generation = this.fitGeneration;
    const alpha = { ...this.state.sliders };
    this.inFlight = true;
    this.transport
      .preview(this.state.sessionId, this.state.roi, alpha, this.sigma)
      .then((bytes) => {
        this.inFlight = false;
        if (generation !== this.fitGeneration || seq <= this.appliedSeq) return;
        this.appliedSeq = seq;
        this.patch({ preview: bytes, previewPending: this.trailing });
        this.flushTrailing();
      })
      .catch((err) => {
        this.inFlight = false;
        if (generation !== this.fitGeneration) return;
        this.patch({ error: describe(err), previewPending: this.trailing });
        this.flushTrailing();
      });
  }

  private flushTrailing(): void {
    if (!this.trailing) return;
    this.trailing = false;
    this.requestPreview();
  }
}

function describe(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}
