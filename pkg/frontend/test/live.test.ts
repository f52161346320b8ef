/**
 * End-to-end coordinate/overlay fidelity against a real service response.
 *
 * The fixture (path in MATSELECT_FIXTURE) is produced by the backend test
 * harness: it uploads a 4-pixel (2x2) test image, issues the query this
 * scripted click should produce, and stores the raw JSON response plus the
 * image's RGBA bytes. Skipped when no fixture is provided.
 */

import assert from "node:assert/strict";
import { readFileSync } from "node:fs";
import { test } from "node:test";

import { beginClick, completeQuery, currentMask, QueryResult, setImage,
         setThreshold, initialState } from "../ui/state.js";
import { compositeOverlay } from "../ui/overlay.js";
import { rethreshold } from "../ui/threshold.js";
import { decodePng, grayChannel } from "./png.js";

const fixturePath = process.env.MATSELECT_FIXTURE;

function b64bytes(s: string): Uint8Array {
  return new Uint8Array(Buffer.from(s, "base64"));
}

test("scripted click round-trips through service data", { skip: !fixturePath }, () => {
  const fixture = JSON.parse(readFileSync(fixturePath!, "utf-8"));
  const resp = fixture.query_response;
  const width = fixture.width as number;
  const height = fixture.height as number;

  // canvas shows the 2x2 image at 50x scale; the scripted click at canvas
  // (75, 30) must hit original-space pixel (1, 0) - what the backend queried
  let state = setImage(initialState(), fixture.image_id, { width, height }, 50 * width);
  const begun = beginClick(state, 75, 30);
  assert.equal(begun.pixel.x, resp.x);
  assert.equal(begun.pixel.y, resp.y);

  const serverMaskPng = decodePng(b64bytes(resp.mask_png));
  const serverMask = grayChannel(serverMaskPng).map((v) => (v >= 128 ? 1 : 0)) as Uint8Array;
  const scores: QueryResult["scores"] = {
    texture: grayChannel(decodePng(b64bytes(resp.scores_texture_png))),
    subtexture: grayChannel(decodePng(b64bytes(resp.scores_subtexture_png))),
  };
  state = completeQuery(begun.state, begun.requestId, {
    x: resp.x, y: resp.y, level: resp.level, threshold: resp.threshold,
    serverMask, scores,
  });

  // client-side re-threshold at 0.5 equals the server's default mask
  const clientMask = rethreshold(scores[resp.level as "texture"]!, 0.5);
  assert.deepEqual(Array.from(clientMask), Array.from(serverMask));

  // rendered overlay is green exactly where the returned mask is set
  const imageRgba = new Uint8ClampedArray(b64bytes(fixture.image_rgba_b64));
  const overlay = compositeOverlay(imageRgba, currentMask(state)!);
  for (let i = 0; i < serverMask.length; i++) {
    const o = i * 4;
    if (serverMask[i]) {
      assert.equal(overlay[o + 1], Math.round(0.5 * imageRgba[o + 1] + 0.5 * 255));
    } else {
      assert.equal(overlay[o], imageRgba[o]);
      assert.equal(overlay[o + 1], imageRgba[o + 1]);
    }
  }

  // threshold slider stays on the quantized domain: t=0.99 never selects
  // more than t=0.01
  const loose = rethreshold(scores.texture!, 0.01);
  const tight = rethreshold(scores.texture!, 0.99);
  let looseArea = 0;
  let tightArea = 0;
  for (let i = 0; i < loose.length; i++) {
    looseArea += loose[i];
    tightArea += tight[i];
  }
  assert.ok(tightArea <= looseArea);

  void setThreshold; // exercised in state.test.ts
});
