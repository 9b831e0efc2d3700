"""Guidance oracles: the abstraction the editing loop talks to for SDS pixel
gradients and cross-attention stacks, with deterministic mocks for testing
and an HTTP client for the diffusion service.

The mock target oracle returns (image - target), which turns SDS descent
into plain gradient descent on 0.5 * ||render - target||^2: an end-to-end
checkable stand-in with the exact same plumbing.
"""

from __future__ import annotations

import base64
import json
import threading
import time
import urllib.error
import urllib.request

import numpy as np

from .errors import OracleError
from .geometry import camera_hit_buffer
from .locate import AttentionEntry, AttentionStack

PROTOCOL_VERSION = "v1"

__all__ = [
    "GuidanceOracle",
    "MockTargetOracle",
    "MockAttentionOracle",
    "RemoteOracle",
    "remote_oracle",
    "mock_sds_grad",
    "encode_f32",
    "decode_f32",
]


def encode_f32(arr):
    """Base64 of little-endian float32, C order. Lossless for f32 data."""
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(data, shape=None):
    raw = base64.b64decode(data)
    arr = np.frombuffer(raw, dtype="<f4")
    if shape is not None:
        arr = arr.reshape(shape)
    return arr.astype(np.float64)


def build_sds_request(image, prompt, t_range=(0.02, 0.98), guidance_scale=7.5,
                      seed=0):
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    return {
        "version": PROTOCOL_VERSION,
        "image": encode_f32(image),
        "width": w,
        "height": h,
        "prompt": prompt,
        "t_min": float(t_range[0]),
        "t_max": float(t_range[1]),
        "guidance_scale": float(guidance_scale),
        "seed": int(seed),
    }


def build_attention_request(image, prompt, keyword, steps):
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    return {
        "version": PROTOCOL_VERSION,
        "image": encode_f32(image),
        "width": w,
        "height": h,
        "prompt": prompt,
        "keyword": keyword,
        "steps": int(steps),
    }


def parse_attention_response(out, keyword=None, view_id=None):
    entries = [
        AttentionEntry(t=int(e["t"]), l=int(e["l"]), h=int(e["h"]),
                       map=decode_f32(e["data"], (int(e["height"]),
                                                  int(e["width"]))))
        for e in out["entries"]
    ]
    if not entries:
        raise OracleError("service returned an empty attention stack")
    return AttentionStack(entries=entries, keyword=keyword, view_id=view_id)


class GuidanceOracle:
    """Interface consumed by locate and edit.

    sds_pixel_grad returns an array with the image's shape: the loss
    gradient in pixel space. attention returns the keyword's AttentionStack
    for one view. camera/view_id are side-channel context that mocks use
    and the remote client ignores.
    """

    def sds_pixel_grad(self, image, prompt, *, t_range=(0.02, 0.98),
                       guidance_scale=7.5, seed=0, camera=None, view_id=None):
        raise NotImplementedError

    def attention(self, image, prompt, keyword, steps=3, *, camera=None,
                  view_id=None):
        raise NotImplementedError


class MockTargetOracle(GuidanceOracle):
    """Gradient of 0.5 * ||image - target||^2 per registered view. Targets
    may be registered eagerly or produced by a provider(camera, view_id)
    and cached."""

    def __init__(self, targets=None, provider=None):
        self.targets = dict(targets or {})
        self.provider = provider

    def register_target(self, view_id, image):
        self.targets[view_id] = np.asarray(image, dtype=np.float64)

    def target_for(self, view_id, camera=None, shape=None):
        if view_id in self.targets:
            return self.targets[view_id]
        key = (view_id,) + tuple(shape or ())
        if key not in self.targets:
            if self.provider is None:
                raise OracleError(f"no target registered for view {view_id!r}")
            self.targets[key] = np.asarray(
                self.provider(camera, view_id), dtype=np.float64)
        return self.targets[key]

    def sds_pixel_grad(self, image, prompt, *, t_range=(0.02, 0.98),
                       guidance_scale=7.5, seed=0, camera=None, view_id=None):
        image = np.asarray(image, dtype=np.float64)
        target = self.target_for(view_id, camera, shape=image.shape)
        if target.shape != image.shape:
            raise OracleError(
                f"target shape {target.shape} != image shape {image.shape}")
        return image - target


def mock_sds_grad(oracle, image, view_id):
    """Spec-shaped helper over MockTargetOracle."""
    return oracle.sds_pixel_grad(image, prompt="", view_id=view_id)


class MockAttentionOracle(GuidanceOracle):
    """Paints registered ground-truth faces: three maps at distinct
    resolutions with value 1.0 on the rasterized faces, 0.1 elsewhere, plus
    seeded noise below 0.05."""

    def __init__(self, mesh, gt_faces, resolutions=(48, 64, 96), base=0.1,
                 noise=0.05, seed=0):
        self.mesh = mesh
        self.gt = np.zeros(mesh.n_faces, dtype=bool)
        self.gt[np.asarray(sorted(gt_faces), dtype=np.int64)] = True
        self.resolutions = tuple(resolutions)
        self.base = base
        self.noise = noise
        self.seed = seed

    def attention(self, image, prompt, keyword, steps=1, *, camera=None,
                  view_id=None):
        if camera is None:
            raise OracleError("mock attention oracle needs the camera")
        entries = []
        for li, res in enumerate(self.resolutions):
            face, _, _, _ = camera_hit_buffer(self.mesh, camera, res, res)
            painted = np.where((face >= 0) & self.gt[np.clip(face, 0, None)],
                               1.0, self.base)
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, int(view_id or 0), li]))
            painted = painted + self.noise * rng.random(painted.shape)
            entries.append(AttentionEntry(t=0, l=li, h=0, map=painted))
        return AttentionStack(entries=entries, keyword=keyword, view_id=view_id)


# ---------------------------------------------------------------------------
# remote client


class RemoteOracle(GuidanceOracle):
    """HTTP client for the diffusion guidance service (JSON bodies, base64
    little-endian f32 arrays, protocol version v1). Idempotent requests
    (attention, sds_grad: deterministic per seed) retry up to 3 times;
    finetune never retries."""

    def __init__(self, endpoint, timeout=60.0, max_inflight=4):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self._slots = threading.Semaphore(max_inflight)

    def _post(self, path, payload, retries=3):
        body = json.dumps(payload).encode("utf-8")
        last_err = None
        for attempt in range(retries):
            try:
                with self._slots:
                    req = urllib.request.Request(
                        f"{self.endpoint}{path}", data=body,
                        headers={"Content-Type": "application/json"})
                    with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                        out = json.loads(resp.read().decode("utf-8"))
                if out.get("version") != PROTOCOL_VERSION:
                    raise OracleError(
                        f"protocol version mismatch: {out.get('version')!r}")
                return out
            except urllib.error.HTTPError as err:
                detail = err.read().decode("utf-8", "replace")
                raise OracleError(
                    f"{path} failed with HTTP {err.code}: {detail}") from err
            except (urllib.error.URLError, TimeoutError, ConnectionError) as err:
                last_err = err
                if attempt + 1 < retries:
                    time.sleep(0.2 * (attempt + 1))
        raise OracleError(f"{path} unreachable after {retries} attempts: {last_err}")

    def healthz(self):
        try:
            with urllib.request.urlopen(f"{self.endpoint}/healthz",
                                        timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, ConnectionError) as err:
            raise OracleError(f"service unreachable: {err}") from err

    def sds_pixel_grad(self, image, prompt, *, t_range=(0.02, 0.98),
                       guidance_scale=7.5, seed=0, camera=None, view_id=None):
        image = np.asarray(image, dtype=np.float64)
        h, w, _ = image.shape
        out = self._post("/v1/sds_grad",
                         build_sds_request(image, prompt, t_range,
                                           guidance_scale, seed))
        grad = decode_f32(out["grad"], (h, w, 3))
        if not np.all(np.isfinite(grad)):
            raise OracleError("service returned non-finite gradient")
        return grad

    def attention(self, image, prompt, keyword, steps=3, *, camera=None,
                  view_id=None):
        out = self._post("/v1/attention",
                         build_attention_request(image, prompt, keyword, steps))
        return parse_attention_response(out, keyword=keyword, view_id=view_id)

    def finetune(self, images_png, subject_token, iterations=500):
        """images_png: list of raw PNG bytes. Not idempotent: no retry."""
        payload = {
            "version": PROTOCOL_VERSION,
            "images": [base64.b64encode(b).decode("ascii") for b in images_png],
            "subject_token": subject_token,
            "iterations": int(iterations),
        }
        return self._post("/v1/finetune", payload, retries=1)


def remote_oracle(endpoint, timeout=60.0):
    """Factory per the module contract."""
    return RemoteOracle(endpoint, timeout=timeout)
