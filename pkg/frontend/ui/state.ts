/**
 * Session state for the selection studio.
 *
 * Invariants: click history is stored in original-image coordinates; the
 * overlay always reflects the most recent *completed* query (stale responses
 * are discarded by a monotonically increasing request id); the threshold
 * slider re-binarizes the cached score map locally without a round-trip.
 */

import { canvasToImage, ImageSize, Pixel } from "./coords.js";
import { rethreshold } from "./threshold.js";

export type Level = "subtexture" | "texture";

export interface QueryResult {
  x: number;
  y: number;
  level: Level;
  /** quantized score bytes per level, image-sized, row-major */
  scores: Partial<Record<Level, Uint8Array>>;
  serverMask: Uint8Array;
  threshold: number;
}

export interface SessionState {
  imageId: string | null;
  size: ImageSize | null;
  scale: number;
  clicks: Pixel[];
  activeLevel: Level;
  threshold: number;
  lastResult: QueryResult | null;
  pendingRequest: number;
  completedRequest: number;
}

export function initialState(): SessionState {
  return {
    imageId: null,
    size: null,
    scale: 1,
    clicks: [],
    activeLevel: "texture",
    threshold: 0.5,
    lastResult: null,
    pendingRequest: 0,
    completedRequest: 0,
  };
}

export function setImage(state: SessionState, imageId: string, size: ImageSize,
                         canvasWidth: number): SessionState {
  return {
    ...initialState(),
    imageId,
    size,
    scale: canvasWidth / size.width,
  };
}

/** Map a canvas click to image space, record it, and claim a request id. */
export function beginClick(state: SessionState, canvasX: number,
                           canvasY: number): { state: SessionState; pixel: Pixel; requestId: number } {
  if (!state.size) {
    throw new Error("no image uploaded");
  }
  const pixel = canvasToImage(canvasX, canvasY, state.scale, state.size);
  const requestId = state.pendingRequest + 1;
  return {
    state: { ...state, clicks: [...state.clicks, pixel], pendingRequest: requestId },
    pixel,
    requestId,
  };
}

/** Install a completed query unless a newer request has been issued. */
export function completeQuery(state: SessionState, requestId: number,
                              result: QueryResult): SessionState {
  if (requestId < state.pendingRequest || requestId <= state.completedRequest) {
    return state; // stale response: a newer click is in flight or done
  }
  return { ...state, lastResult: result, completedRequest: requestId,
           threshold: result.threshold };
}

export function setThreshold(state: SessionState, t: number): SessionState {
  return { ...state, threshold: t };
}

export function toggleLevel(state: SessionState, level: Level): SessionState {
  return { ...state, activeLevel: level };
}

/** The displayed mask: server mask at the default threshold, client-side
 * re-binarization of the cached scores otherwise. */
export function currentMask(state: SessionState): Uint8Array | null {
  const result = state.lastResult;
  if (!result) {
    return null;
  }
  const scores = result.scores[state.activeLevel];
  if (!scores) {
    return null;
  }
  if (state.threshold === result.threshold && state.activeLevel === result.level) {
    return result.serverMask;
  }
  return rethreshold(scores, state.threshold);
}

export function canExport(state: SessionState): boolean {
  return currentMask(state) !== null;
}

export function sliderEnabled(state: SessionState): boolean {
  return state.lastResult !== null;
}
