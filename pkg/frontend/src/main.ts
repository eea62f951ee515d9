/** DOM wiring for the studio page. */

import { HttpTransport, type RoiRect } from "./api.js";
import { MIN_ROI_SIDE, snapRoi } from "./roi.js";
import { SLIDER_MAX, SLIDER_MIN, SLIDER_STEP, StudioStore } from "./state.js";

const PREVIEW_CONTEXT_PX = 16; // must match the server's preview crop

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

function previewRect(roi: RoiRect, imgW: number, imgH: number): RoiRect {
  const x = Math.max(0, roi.x - PREVIEW_CONTEXT_PX);
  const y = Math.max(0, roi.y - PREVIEW_CONTEXT_PX);
  const x2 = Math.min(imgW, roi.x + roi.w + PREVIEW_CONTEXT_PX);
  const y2 = Math.min(imgH, roi.y + roi.h + PREVIEW_CONTEXT_PX);
  return { x, y, w: x2 - x, h: y2 - y };
}

function main(): void {
  const store = new StudioStore(new HttpTransport(""));

  const fileInput = byId<HTMLInputElement>("file");
  const stage = byId<HTMLCanvasElement>("stage");
  const stageCtx = stage.getContext("2d")!;
  const statusEl = byId<HTMLSpanElement>("status");
  const compare = byId<HTMLDivElement>("compare");
  const beforeCanvas = byId<HTMLCanvasElement>("before");
  const afterCanvas = byId<HTMLCanvasElement>("after");
  const divider = byId<HTMLInputElement>("divider");
  const advancedToggle = byId<HTMLInputElement>("advanced");
  const rowR = byId<HTMLDivElement>("row-r");
  const addEntry = byId<HTMLButtonElement>("add-entry");
  const exportBtn = byId<HTMLButtonElement>("export");
  const scheduleList = byId<HTMLUListElement>("schedule");

  let image: HTMLImageElement | null = null;
  let drag: { x0: number; y0: number; x1: number; y1: number } | null = null;
  let previewUrl: string | null = null;

  const sliders = {
    h: byId<HTMLInputElement>("slider-h"),
    m: byId<HTMLInputElement>("slider-m"),
    r: byId<HTMLInputElement>("slider-r"),
  };
  for (const el of Object.values(sliders)) {
    el.min = String(SLIDER_MIN);
    el.max = String(SLIDER_MAX);
    el.step = String(SLIDER_STEP);
    el.value = "0";
  }

  function drawStage(): void {
    if (!image) return;
    stage.width = image.naturalWidth;
    stage.height = image.naturalHeight;
    stageCtx.drawImage(image, 0, 0);
    const state = store.getState();
    const box = drag
      ? { x: Math.min(drag.x0, drag.x1), y: Math.min(drag.y0, drag.y1), w: Math.abs(drag.x1 - drag.x0), h: Math.abs(drag.y1 - drag.y0) }
      : state.roi;
    if (box) {
      stageCtx.strokeStyle = "#ff5050";
      stageCtx.lineWidth = 2;
      stageCtx.setLineDash(drag ? [6, 4] : []);
      stageCtx.strokeRect(box.x + 0.5, box.y + 0.5, box.w, box.h);
      stageCtx.setLineDash([]);
    }
  }

  function canvasPoint(ev: MouseEvent): { x: number; y: number } {
    const rect = stage.getBoundingClientRect();
    return {
      x: ((ev.clientX - rect.left) / rect.width) * stage.width,
      y: ((ev.clientY - rect.top) / rect.height) * stage.height,
    };
  }

  stage.addEventListener("mousedown", (ev) => {
    if (!image) return;
    const p = canvasPoint(ev);
    drag = { x0: p.x, y0: p.y, x1: p.x, y1: p.y };
  });
  stage.addEventListener("mousemove", (ev) => {
    if (!drag) return;
    const p = canvasPoint(ev);
    drag.x1 = p.x;
    drag.y1 = p.y;
    drawStage();
  });
  window.addEventListener("mouseup", () => {
    if (!drag || !image) return;
    const result = snapRoi(drag, image.naturalWidth, image.naturalHeight);
    drag = null;
    if (!result.ok) {
      statusEl.textContent = result.hint;
      drawStage();
      return;
    }
    void store.setRoi(result.roi);
    drawStage();
  });

  fileInput.addEventListener("change", async () => {
    const file = fileInput.files?.[0];
    if (!file) return;
    const bytes = new Uint8Array(await file.arrayBuffer());
    image = new Image();
    image.src = URL.createObjectURL(new Blob([bytes], { type: "image/png" }));
    await image.decode();
    drawStage();
    await store.loadImage(bytes);
  });

  for (const [key, el] of Object.entries(sliders)) {
    el.addEventListener("input", () => {
      store.setSliders({ [key]: Number(el.value) });
    });
  }

  advancedToggle.addEventListener("change", () => {
    rowR.hidden = !advancedToggle.checked;
  });
  rowR.hidden = true;

  addEntry.addEventListener("click", () => {
    store.addScheduleEntry(`step ${store.getState().schedule.length}`);
  });

  exportBtn.addEventListener("click", async () => {
    const zip = await store.exportSchedule();
    if (!zip) return;
    const url = URL.createObjectURL(new Blob([zip as BlobPart], { type: "application/zip" }));
    const a = document.createElement("a");
    a.href = url;
    a.download = "fading.zip";
    a.click();
    URL.revokeObjectURL(url);
  });

  divider.addEventListener("input", () => {
    afterCanvas.style.clipPath = `inset(0 0 0 ${divider.value}%)`;
  });

  store.subscribe((state) => {
    statusEl.textContent = state.error
      ? `error: ${state.error}`
      : state.fitStatus === "pending"
        ? "fitting…"
        : state.previewPending
          ? "rendering…"
          : state.fitStatus === "ready"
            ? "ready"
            : `draw a box (min ${MIN_ROI_SIDE}×${MIN_ROI_SIDE}) around a blemish`;
    exportBtn.disabled = !store.canExport;

    scheduleList.replaceChildren(
      ...state.schedule.map((entry, i) => {
        const li = document.createElement("li");
        li.textContent = `${entry.label}: h=${entry.h.toFixed(2)} m=${entry.m.toFixed(2)} r=${entry.r.toFixed(2)}`;
        const remove = document.createElement("button");
        remove.textContent = "×";
        remove.addEventListener("click", () => store.removeScheduleEntry(i));
        li.append(" ", remove);
        return li;
      }),
    );

    if (state.preview && state.roi && image) {
      const rect = previewRect(state.roi, image.naturalWidth, image.naturalHeight);
      beforeCanvas.width = afterCanvas.width = rect.w;
      beforeCanvas.height = afterCanvas.height = rect.h;
      beforeCanvas.getContext("2d")!.drawImage(image, rect.x, rect.y, rect.w, rect.h, 0, 0, rect.w, rect.h);
      if (previewUrl) URL.revokeObjectURL(previewUrl);
      previewUrl = URL.createObjectURL(new Blob([state.preview as BlobPart], { type: "image/png" }));
      const after = new Image();
      after.src = previewUrl;
      void after.decode().then(() => {
        afterCanvas.getContext("2d")!.drawImage(after, 0, 0);
      });
      compare.hidden = false;
    }
    drawStage();
  });
}

main();
