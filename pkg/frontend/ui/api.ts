/** Thin typed client for the selection service HTTP API. */

import { Level } from "./state.js";

export interface UploadResponse {
  image_id: string;
  width: number;
  height: number;
  levels: Level[];
}

export interface QueryResponse {
  image_id: string;
  x: number;
  y: number;
  level: Level;
  threshold: number;
  mask_png: string; // base64
  scores_subtexture_png?: string;
  scores_texture_png?: string;
  stats: { mask_area_fraction: number; mean_score: number };
}

export class ServiceError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function check(resp: Response): Promise<any> {
  const body = await resp.json().catch(() => ({}));
  if (!resp.ok) {
    throw new ServiceError(resp.status, body.error ?? resp.statusText);
  }
  return body;
}

export async function uploadImage(baseUrl: string, png: Blob): Promise<UploadResponse> {
  const resp = await fetch(`${baseUrl}/images`, { method: "POST", body: png });
  return check(resp);
}

export async function queryPixel(baseUrl: string, imageId: string, x: number, y: number,
                                 level: Level): Promise<QueryResponse> {
  const resp = await fetch(`${baseUrl}/images/${imageId}/query`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ x, y, level }),
  });
  return check(resp);
}

export function maskDownloadUrl(baseUrl: string, imageId: string, x: number, y: number,
                                level: Level, threshold: number): string {
  return `${baseUrl}/images/${imageId}/mask?x=${x}&y=${y}&level=${level}&threshold=${threshold}`;
}
