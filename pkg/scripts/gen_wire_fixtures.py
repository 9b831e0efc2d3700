"""Regenerate the golden wire-protocol fixtures.

Requests are built by the primary client's serializers; responses are
captured from a live guidance-service. Run from the repo root with the
service built (cd guidance-service && npm run build):

    python3 scripts/gen_wire_fixtures.py
"""

import io
import json
import os
import subprocess
import sys
import time
import urllib.request

import numpy as np
from PIL import Image

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from meshfield.guidance import build_attention_request, build_sds_request  # noqa: E402

PORT = 8771
ROOT = os.path.join(os.path.dirname(__file__), "..")
OUT = os.path.join(ROOT, "fixtures", "wire")


def post(path, payload):
    req = urllib.request.Request(
        f"http://127.0.0.1:{PORT}{path}",
        data=json.dumps(payload).encode(),
        headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=30) as resp:
        return json.loads(resp.read().decode())


def main():
    os.makedirs(OUT, exist_ok=True)
    env = dict(os.environ, PORT=str(PORT))
    proc = subprocess.Popen(
        ["node", "dist/src/main.js"],
        cwd=os.path.join(ROOT, "guidance-service"), env=env,
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        for _ in range(50):
            try:
                urllib.request.urlopen(f"http://127.0.0.1:{PORT}/healthz",
                                       timeout=1)
                break
            except OSError:
                time.sleep(0.2)
        rng = np.random.default_rng(12345)
        image = rng.random((48, 48, 3))

        fixtures = []
        req = build_sds_request(image, "a small red cube", t_range=(0.1, 0.9),
                                guidance_scale=5.0, seed=77)
        fixtures.append({"name": "sds_grad_basic", "endpoint": "/v1/sds_grad",
                         "request": req, "response": post("/v1/sds_grad", req)})

        req = build_attention_request(image, "a small red cube on a desk",
                                      "cube", steps=2)
        fixtures.append({"name": "attention_basic", "endpoint": "/v1/attention",
                         "request": req, "response": post("/v1/attention", req)})

        buf = io.BytesIO()
        Image.fromarray((image * 255).astype(np.uint8)).save(buf, format="PNG")
        import base64
        req = {"version": "v1",
               "images": [base64.b64encode(buf.getvalue()).decode("ascii")],
               "subject_token": "*", "iterations": 0}
        fixtures.append({"name": "finetune_noop", "endpoint": "/v1/finetune",
                         "request": req, "response": post("/v1/finetune", req)})

        for fx in fixtures:
            path = os.path.join(OUT, fx["name"] + ".json")
            with open(path, "w") as fh:
                json.dump(fx, fh, indent=1, sort_keys=True)
            print("wrote", path)
    finally:
        proc.terminate()
        proc.wait()


if __name__ == "__main__":
    main()
