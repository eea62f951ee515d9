/** Drag-to-rectangle helpers: integer snapping, minimum size, clamping. */

import type { RoiRect } from "./api.js";

export const MIN_ROI_SIDE = 8;

export interface DragBox {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export type RoiResult = { ok: true; roi: RoiRect } | { ok: false; hint: string };

/**
 * Snap a drag gesture to whole pixels inside the image.  Rectangles under
 * 8x8 are rejected with a hint rather than silently grown.
 */
export function snapRoi(drag: DragBox, imageWidth: number, imageHeight: number): RoiResult {
  let x = Math.round(Math.min(drag.x0, drag.x1));
  let y = Math.round(Math.min(drag.y0, drag.y1));
  let x2 = Math.round(Math.max(drag.x0, drag.x1));
  let y2 = Math.round(Math.max(drag.y0, drag.y1));
  x = Math.max(0, x);
  y = Math.max(0, y);
  x2 = Math.min(imageWidth, x2);
  y2 = Math.min(imageHeight, y2);
  const w = x2 - x;
  const h = y2 - y;
  if (w < MIN_ROI_SIDE || h < MIN_ROI_SIDE) {
    return { ok: false, hint: `select at least ${MIN_ROI_SIDE}×${MIN_ROI_SIDE} pixels` };
  }
  return { ok: true, roi: { x, y, w, h } };
}
