#!/usr/bin/env python3
"""Boot the inference service in-process, upload an image, and click twice.

The first request on an image pays the pyramid/encoder cost; every click
after that only runs the head against the cached features.
"""

import base64
import io
import threading
import time

import numpy as np
from PIL import Image

from matselect import core, datagen as dg, head as hd, service as sv
from matselect.core import make_rng

ckpt = "out/demo_model.msck"
try:
    model = hd.load_checkpoint(ckpt)
    print(f"serving trained checkpoint {ckpt}")
except FileNotFoundError:
    model = hd.create_model(rng=make_rng(0))
    hd.save_checkpoint(ckpt, model)
    print("no trained model found; serving a fresh (untrained) one")

service = sv.SelectionService.from_config(sv.ServiceConfig(checkpoint=ckpt, port=0))
server = sv.make_server(service)
threading.Thread(target=server.serve_forever, daemon=True).start()
port = server.server_address[1]
print(f"listening on 127.0.0.1:{port}")

bank = dg.build_bank(3, size=112)
image, _ = dg.render_scene(dg.make_scene_spec(3, 0, 0, 0, bank, 112, thin=False))
buf = io.BytesIO()
Image.fromarray(np.round(core.srgb_encode(image) * 255).astype(np.uint8)).save(buf, "PNG")

import requests

t0 = time.time()
image_id = requests.post(f"http://127.0.0.1:{port}/images", data=buf.getvalue()).json()["image_id"]
print(f"upload + feature encoding: {(time.time() - t0) * 1000:.0f} ms -> {image_id[:12]}…")

for x, y in ((30, 40), (80, 90)):
    t0 = time.time()
    resp = requests.post(f"http://127.0.0.1:{port}/images/{image_id}/query",
                         json={"x": x, "y": y, "level": "texture"}).json()
    mask = core.decode_mask_bytes(base64.b64decode(resp["mask_png"]))
    print(f"click ({x:3d}, {y:3d}): {(time.time() - t0) * 1000:5.0f} ms, "
          f"mask area {mask.mean():.1%}, mean score {resp['stats']['mean_score']:.3f}")

print(requests.get(f"http://127.0.0.1:{port}/healthz").json())
server.shutdown()
