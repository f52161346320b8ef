import assert from "node:assert/strict";
import { test } from "node:test";

import { maskArea, rethreshold, thresholdByte } from "../ui/threshold.js";

test("default threshold cuts at byte 128", () => {
  assert.equal(thresholdByte(0.5), 128);
});

test("inclusive rule on the quantized domain", () => {
  const scores = new Uint8Array([127, 128, 129]);
  assert.deepEqual(Array.from(rethreshold(scores, 0.5)), [0, 1, 1]);
});

test("mask area is monotonically non-increasing in t", () => {
  const scores = new Uint8Array(256);
  for (let i = 0; i < 256; i++) {
    scores[i] = i;
  }
  let previous = Infinity;
  for (let t = 0.01; t < 1; t += 0.05) {
    const area = maskArea(rethreshold(scores, t));
    assert.ok(area <= previous);
    previous = area;
  }
  assert.ok(maskArea(rethreshold(scores, 0.01)) >= maskArea(rethreshold(scores, 0.99)));
});

test("thresholds outside (0,1) are rejected", () => {
  assert.throws(() => thresholdByte(0));
  assert.throws(() => thresholdByte(1));
});
