import assert from "node:assert/strict";
import { test } from "node:test";

import { beginClick, canExport, completeQuery, currentMask, initialState,
         QueryResult, setImage, setThreshold, sliderEnabled, toggleLevel } from "../ui/state.js";

function makeResult(threshold = 0.5): QueryResult {
  return {
    x: 1, y: 0, level: "texture", threshold,
    serverMask: new Uint8Array([1, 0, 0, 1]),
    scores: {
      texture: new Uint8Array([200, 20, 100, 220]),
      subtexture: new Uint8Array([10, 220, 130, 90]),
    },
  };
}

function uploaded() {
  return setImage(initialState(), "abc", { width: 2, height: 2 }, 100); // scale 50
}

test("clicks are stored in original-image space", () => {
  const { state, pixel } = beginClick(uploaded(), 75, 30);
  assert.deepEqual(pixel, { x: 1, y: 0 });
  assert.deepEqual(state.clicks, [{ x: 1, y: 0 }]);
});

test("stale responses are discarded", () => {
  let state = uploaded();
  const first = beginClick(state, 10, 10);
  const second = beginClick(first.state, 80, 80);
  state = second.state;
  state = completeQuery(state, second.requestId, makeResult());
  const settled = currentMask(state);
  state = completeQuery(state, first.requestId, { ...makeResult(), serverMask: new Uint8Array([0, 0, 0, 0]) });
  assert.deepEqual(currentMask(state), settled);
});

test("server mask is reused at the returned threshold", () => {
  let state = uploaded();
  const { state: s1, requestId } = beginClick(state, 75, 30);
  state = completeQuery(s1, requestId, makeResult());
  assert.equal(currentMask(state), state.lastResult!.serverMask);
});

test("moving the slider rebinarizes locally", () => {
  let state = uploaded();
  const { state: s1, requestId } = beginClick(state, 75, 30);
  state = completeQuery(s1, requestId, makeResult());
  state = setThreshold(state, 0.3); // byte cut 77: scores 200,20,100,220
  assert.deepEqual(Array.from(currentMask(state)!), [1, 0, 1, 1]);
});

test("toggling level twice restores the original view", () => {
  let state = uploaded();
  const { state: s1, requestId } = beginClick(state, 75, 30);
  state = completeQuery(s1, requestId, makeResult());
  const before = Array.from(currentMask(state)!);
  state = toggleLevel(state, "subtexture");
  state = toggleLevel(state, "texture");
  assert.deepEqual(Array.from(currentMask(state)!), before);
});

test("slider and export are disabled before the first query", () => {
  const state = uploaded();
  assert.equal(sliderEnabled(state), false);
  assert.equal(canExport(state), false);
  assert.throws(() => beginClick(initialState(), 0, 0)); // no image at all
});
