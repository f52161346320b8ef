/**
 * Client-side re-thresholding of the server's 8-bit quantized score map.
 *
 * The server binarizes full-precision scores with an inclusive `score >= t`
 * rule. On the quantized domain, `byte / 255 >= t` is equivalent to
 * `byte >= ceil(255 * t)`, and at the default t = 0.5 this reproduces the
 * server's mask bit-for-bit (0.5 quantizes to byte 128 = ceil(127.5)).
 */

/** Smallest score byte that passes threshold t under the inclusive rule. */
export function thresholdByte(t: number): number {
  if (!(t > 0 && t < 1)) {
    throw new Error(`threshold must lie in (0, 1), got ${t}`);
  }
  return Math.ceil(255 * t - 1e-9);
}

/** Binarize quantized scores (one byte per pixel) at threshold t. */
export function rethreshold(scoreBytes: Uint8Array | Uint8ClampedArray,
                            t: number): Uint8Array {
  const cut = thresholdByte(t);
  const mask = new Uint8Array(scoreBytes.length);
  for (let i = 0; i < scoreBytes.length; i++) {
    mask[i] = scoreBytes[i] >= cut ? 1 : 0;
  }
  return mask;
}

/** Selected-pixel count; monotonically non-increasing in t. */
export function maskArea(mask: Uint8Array): number {
  let area = 0;
  for (let i = 0; i < mask.length; i++) {
    area += mask[i];
  }
  return area;
}
