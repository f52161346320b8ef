/**
 * Selection studio: upload an image, click to select a material, inspect
 * both granularity levels as live overlays, tune the threshold locally, and
 * export the current mask.
 */

import { queryPixel, ServiceError, uploadImage } from "./api.js";
import { compositeOverlay, scoreHeatmap } from "./overlay.js";
import { beginClick, canExport, completeQuery, currentMask, initialState, Level,
         QueryResult, SessionState, setImage, setThreshold, sliderEnabled,
         toggleLevel } from "./state.js";

const CANVAS_WIDTH = 560;
const BASE_URL = "";

let state: SessionState = initialState();
let imagePixels: ImageData | null = null; // original-resolution RGBA

const el = {
  file: document.querySelector<HTMLInputElement>("#file")!,
  canvas: document.querySelector<HTMLCanvasElement>("#view")!,
  slider: document.querySelector<HTMLInputElement>("#threshold")!,
  sliderValue: document.querySelector<HTMLSpanElement>("#threshold-value")!,
  levelButtons: Array.from(document.querySelectorAll<HTMLButtonElement>("button[data-level]")),
  exportButton: document.querySelector<HTMLButtonElement>("#export")!,
  status: document.querySelector<HTMLDivElement>("#status")!,
  stats: document.querySelector<HTMLDivElement>("#stats")!,
  heatmaps: {
    subtexture: document.querySelector<HTMLCanvasElement>("#heat-subtexture")!,
    texture: document.querySelector<HTMLCanvasElement>("#heat-texture")!,
  },
};

function toast(message: string, isError = false): void {
  el.status.textContent = message;
  el.status.className = isError ? "status error" : "status";
}

async function decodeGray(base64Png: string, width: number, height: number): Promise<Uint8Array> {
  const img = new Image();
  img.src = `data:image/png;base64,${base64Png}`;
  await img.decode();
  const off = document.createElement("canvas");
  off.width = width;
  off.height = height;
  const ctx = off.getContext("2d")!;
  ctx.drawImage(img, 0, 0);
  const rgba = ctx.getImageData(0, 0, width, height).data;
  const gray = new Uint8Array(width * height);
  for (let i = 0; i < gray.length; i++) {
    gray[i] = rgba[i * 4];
  }
  return gray;
}

function render(): void {
  if (!imagePixels || !state.size) {
    return;
  }
  const { width, height } = state.size;
  const mask = currentMask(state);
  const pixels = mask
    ? compositeOverlay(imagePixels.data, mask)
    : new Uint8ClampedArray(imagePixels.data);
  const off = document.createElement("canvas");
  off.width = width;
  off.height = height;
  off.getContext("2d")!.putImageData(new ImageData(pixels, width, height), 0, 0);

  const ctx = el.canvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, el.canvas.width, el.canvas.height);
  ctx.drawImage(off, 0, 0, width * state.scale, height * state.scale);
  for (const click of state.clicks.slice(-1)) {
    ctx.strokeStyle = "#fff";
    ctx.beginPath();
    ctx.arc((click.x + 0.5) * state.scale, (click.y + 0.5) * state.scale, 5, 0, 2 * Math.PI);
    ctx.stroke();
  }

  el.slider.disabled = !sliderEnabled(state);
  el.exportButton.disabled = !canExport(state);
  el.sliderValue.textContent = state.threshold.toFixed(2);
  for (const button of el.levelButtons) {
    button.classList.toggle("active", button.dataset.level === state.activeLevel);
  }
  if (mask) {
    let area = 0;
    for (let i = 0; i < mask.length; i++) {
      area += mask[i];
    }
    el.stats.textContent = `selected ${(100 * area / mask.length).toFixed(1)}% of pixels`;
  }
  renderHeatmaps();
}

function renderHeatmaps(): void {
  const result = state.lastResult;
  if (!result || !state.size) {
    return;
  }
  for (const level of ["subtexture", "texture"] as Level[]) {
    const scores = result.scores[level];
    const target = el.heatmaps[level];
    if (!scores) {
      continue;
    }
    const { width, height } = state.size;
    const off = document.createElement("canvas");
    off.width = width;
    off.height = height;
    off.getContext("2d")!.putImageData(
      new ImageData(scoreHeatmap(scores), width, height), 0, 0);
    const ctx = target.getContext("2d")!;
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, target.width, target.height);
    ctx.drawImage(off, 0, 0, target.width, target.height);
  }
}

el.file.addEventListener("change", async () => {
  const file = el.file.files?.[0];
  if (!file) {
    return;
  }
  try {
    toast("uploading and encoding features…");
    const info = await uploadImage(BASE_URL, file);
    const bitmap = await createImageBitmap(file);
    const off = document.createElement("canvas");
    off.width = info.width;
    off.height = info.height;
    const ctx = off.getContext("2d")!;
    ctx.drawImage(bitmap, 0, 0);
    imagePixels = ctx.getImageData(0, 0, info.width, info.height);
    state = setImage(state, info.image_id, { width: info.width, height: info.height },
                     CANVAS_WIDTH);
    el.canvas.width = CANVAS_WIDTH;
    el.canvas.height = Math.round(info.height * state.scale);
    toast(`ready: ${info.width}x${info.height}, click a pixel to select`);
    render();
  } catch (err) {
    toast(`upload failed: ${err instanceof ServiceError ? err.message : err}`, true);
  }
});

el.canvas.addEventListener("click", async (ev) => {
  if (!state.imageId || !state.size) {
    return;
  }
  const imageId = state.imageId;
  const { width, height } = state.size;
  const rect = el.canvas.getBoundingClientRect();
  const begun = beginClick(state, ev.clientX - rect.left, ev.clientY - rect.top);
  state = begun.state;
  try {
    toast(`querying (${begun.pixel.x}, ${begun.pixel.y})…`);
    const resp = await queryPixel(BASE_URL, imageId, begun.pixel.x, begun.pixel.y,
                                  state.activeLevel);
    const result: QueryResult = {
      x: resp.x,
      y: resp.y,
      level: resp.level,
      threshold: resp.threshold,
      serverMask: await decodeGray(resp.mask_png, width, height),
      scores: {
        subtexture: resp.scores_subtexture_png
          ? await decodeGray(resp.scores_subtexture_png, width, height) : undefined,
        texture: resp.scores_texture_png
          ? await decodeGray(resp.scores_texture_png, width, height) : undefined,
      },
    };
    // masks arrive as {0, 255}; normalize to {0, 1}
    const normalized = new Uint8Array(result.serverMask.length);
    for (let i = 0; i < normalized.length; i++) {
      normalized[i] = result.serverMask[i] >= 128 ? 1 : 0;
    }
    result.serverMask = normalized;
    state = completeQuery(state, begun.requestId, result);
    toast(`mask area ${(100 * resp.stats.mask_area_fraction).toFixed(1)}%`);
    render();
  } catch (err) {
    toast(`query failed: ${err instanceof ServiceError ? err.message : err}`, true);
  }
});

el.slider.addEventListener("input", () => {
  state = setThreshold(state, Number(el.slider.value));
  render();
});

for (const button of el.levelButtons) {
  button.addEventListener("click", () => {
    state = toggleLevel(state, button.dataset.level as Level);
    render();
  });
}

el.exportButton.addEventListener("click", () => {
  const mask = currentMask(state);
  if (!mask || !state.size) {
    return;
  }
  const { width, height } = state.size;
  const off = document.createElement("canvas");
  off.width = width;
  off.height = height;
  const data = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < mask.length; i++) {
    const v = mask[i] ? 255 : 0;
    data.set([v, v, v, 255], i * 4);
  }
  off.getContext("2d")!.putImageData(new ImageData(data, width, height), 0, 0);
  const link = document.createElement("a");
  link.download = `mask_${state.activeLevel}.png`;
  link.href = off.toDataURL("image/png");
  link.click();
});

toast("upload an image to begin");
