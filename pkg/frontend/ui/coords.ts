/**
 * Canvas <-> image coordinate mapping.
 *
 * Clicks are stored in original-image space, never canvas space. The canvas
 * displays the image at a uniform scale factor; mapping back divides by the
 * exact scale and floors to a pixel index, clamped into bounds so a click on
 * the last half-pixel row still lands inside the image.
 */

export interface ImageSize {
  width: number;
  height: number;
}

export interface Pixel {
  x: number;
  y: number;
}

/** Uniform scale at which an image of `size` is displayed on a canvas. */
export function displayScale(size: ImageSize, canvasWidth: number): number {
  return canvasWidth / size.width;
}

/** Canvas-space position -> original image pixel (floor semantics). */
export function canvasToImage(canvasX: number, canvasY: number, scale: number,
                              size: ImageSize): Pixel {
  const x = Math.min(Math.max(Math.floor(canvasX / scale), 0), size.width - 1);
  const y = Math.min(Math.max(Math.floor(canvasY / scale), 0), size.height - 1);
  return { x, y };
}

/** Center of an image pixel in canvas space (for drawing click markers). */
export function imageToCanvas(p: Pixel, scale: number): { cx: number; cy: number } {
  return { cx: (p.x + 0.5) * scale, cy: (p.y + 0.5) * scale };
}

/** Round-trip check helper: a canvas click maps into the displayed pixel. */
export function sameDisplayedPixel(canvasX: number, canvasY: number, scale: number,
                                   size: ImageSize): boolean {
  const p = canvasToImage(canvasX, canvasY, scale, size);
  const { cx, cy } = imageToCanvas(p, scale);
  return Math.abs(cx - canvasX) <= scale && Math.abs(cy - canvasY) <= scale;
}
