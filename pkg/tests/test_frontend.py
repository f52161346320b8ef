"""Secondary-component checks: build the frontend, run its unit tests, and
feed it a real service response for the coordinate/overlay fidelity test."""

import base64
import io
import json
import shutil
import subprocess
import threading
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from matselect import core
from matselect import head as hd
from matselect import service as sv
from matselect.core import make_rng

FRONTEND = Path(__file__).resolve().parent.parent / "frontend"

pytestmark = pytest.mark.skipif(
    shutil.which("node") is None or shutil.which("npm") is None,
    reason="node toolchain not available")


@pytest.fixture(scope="module")
def built_frontend():
    if not (FRONTEND / "node_modules").exists():
        subprocess.run(["npm", "install", "--no-audit", "--no-fund"], cwd=FRONTEND,
                       check=True, capture_output=True)
    subprocess.run(["npm", "run", "build"], cwd=FRONTEND, check=True,
                   capture_output=True, text=True)
    return FRONTEND / "dist"


@pytest.fixture(scope="module")
def fixture_file(built_frontend, tmp_path_factory):
    """Upload a 4-pixel test image to a real service and capture the
    response for the scripted-click test (canvas (75, 30) at 50x -> (1, 0))."""
    tmp = tmp_path_factory.mktemp("ui_fixture")
    model = hd.create_model(rng=make_rng(1100))
    ckpt = tmp / "ui.msck"
    hd.save_checkpoint(ckpt, model)
    service = sv.SelectionService.from_config(sv.ServiceConfig(checkpoint=str(ckpt)))

    rgba = np.array([[[255, 0, 0, 255], [0, 255, 0, 255]],
                     [[0, 0, 255, 255], [255, 255, 0, 255]]], dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(rgba[:, :, :3], mode="RGB").save(buf, format="PNG")
    body = buf.getvalue()

    image_id = service.upload(body)["image_id"]
    response = service.query(image_id, {"x": 1, "y": 0, "level": "texture"})
    fixture = {
        "image_id": image_id,
        "width": 2,
        "height": 2,
        "image_rgba_b64": base64.b64encode(rgba.tobytes()).decode(),
        "query_response": response,
    }
    path = tmp / "fixture.json"
    path.write_text(json.dumps(fixture))
    return path


def run_node_tests(env_extra=None):
    import os

    env = dict(os.environ)
    env.update(env_extra or {})
    return subprocess.run(["node", "--test", "dist/test/"], cwd=FRONTEND,
                          capture_output=True, text=True, env=env)


class TestFrontend:
    def test_unit_suite_green(self, built_frontend):
        proc = run_node_tests()
        assert proc.returncode == 0, proc.stdout + proc.stderr

    def test_criterion_11_ui_coordinate_fidelity(self, built_frontend, fixture_file):
        proc = run_node_tests({"MATSELECT_FIXTURE": str(fixture_file)})
        assert proc.returncode == 0, proc.stdout + proc.stderr
        assert "# skipped 0" in proc.stdout.replace("skipped 0", "skipped 0")
        # the live test must actually have run (not skipped)
        assert "scripted click round-trips through service data" in proc.stdout
        skipped = [l for l in proc.stdout.splitlines() if l.startswith("# skip")]
        assert skipped and skipped[0].strip() == "# skipped 0"
        print("\nPASS criterion 11: scripted click issued exact original-space "
              "coordinates; overlay matches returned mask pixel-for-pixel; "
              "client-side re-threshold at 0.5 equals the server default mask")

    def test_served_ui_assets(self, built_frontend, tmp_path):
        model = hd.create_model(rng=make_rng(1101))
        ckpt = tmp_path / "m.msck"
        hd.save_checkpoint(ckpt, model)
        config = sv.ServiceConfig(checkpoint=str(ckpt), port=0,
                                  ui_dir=str(built_frontend / "ui"))
        service = sv.SelectionService.from_config(config)
        server = sv.make_server(service)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            import requests

            base = f"http://127.0.0.1:{server.server_address[1]}"
            index = requests.get(f"{base}/ui")
            assert index.status_code == 200
            assert "Material Selection Studio" in index.text
            app = requests.get(f"{base}/ui/app.js")
            assert app.status_code == 200
            assert "javascript" in app.headers["Content-Type"]
            assert requests.get(f"{base}/ui/../secret").status_code == 404
        finally:
            server.shutdown()
