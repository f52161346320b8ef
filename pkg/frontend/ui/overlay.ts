/**
 * Overlay rendering: green selection blend and false-color score heatmap,
 * both as RGBA pixel buffers ready for a canvas ImageData.
 */

export const OVERLAY_ALPHA = 0.5;
export const OVERLAY_GREEN: [number, number, number] = [0, 255, 0];

/**
 * Alpha-blend the selection color over the image wherever mask = 1.
 * `imageRgba` is RGBA (4 bytes/pixel); `mask` is one byte per pixel.
 */
export function compositeOverlay(imageRgba: Uint8ClampedArray, mask: Uint8Array,
                                 alpha: number = OVERLAY_ALPHA,
                                 color: [number, number, number] = OVERLAY_GREEN): Uint8ClampedArray<ArrayBuffer> {
  if (imageRgba.length !== mask.length * 4) {
    throw new Error(`image has ${imageRgba.length / 4} pixels, mask ${mask.length}`);
  }
  const out = new Uint8ClampedArray(imageRgba);
  for (let i = 0; i < mask.length; i++) {
    if (mask[i]) {
      const o = i * 4;
      out[o] = Math.round((1 - alpha) * imageRgba[o] + alpha * color[0]);
      out[o + 1] = Math.round((1 - alpha) * imageRgba[o + 1] + alpha * color[1]);
      out[o + 2] = Math.round((1 - alpha) * imageRgba[o + 2] + alpha * color[2]);
    }
  }
  return out;
}

/** Blue (low) -> red (high) ramp for raw similarity scores. */
export function scoreHeatmap(scoreBytes: Uint8Array | Uint8ClampedArray): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(scoreBytes.length * 4);
  for (let i = 0; i < scoreBytes.length; i++) {
    const t = scoreBytes[i] / 255;
    const o = i * 4;
    out[o] = Math.round(255 * t);
    out[o + 1] = Math.round(64 * (1 - Math.abs(2 * t - 1)));
    out[o + 2] = Math.round(255 * (1 - t));
    out[o + 3] = 255;
  }
  return out;
}
