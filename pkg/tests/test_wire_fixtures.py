"""The checked-in wire fixtures pin the protocol: the client must reproduce
the fixture requests byte-for-byte (canonical JSON) and parse the fixture
responses. The service side replays the same files in its own test suite."""

import base64
import json
import os

import numpy as np
import pytest

from meshfield.guidance import (
    build_attention_request,
    build_sds_request,
    decode_f32,
    parse_attention_response,
)

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "..", "fixtures", "wire")


def canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def load_fixture(name):
    with open(os.path.join(FIXTURE_DIR, name + ".json")) as fh:
        return json.load(fh)


def fixture_image():
    rng = np.random.default_rng(12345)
    return rng.random((48, 48, 3))


def test_sds_request_matches_fixture_bytes():
    fx = load_fixture("sds_grad_basic")
    req = build_sds_request(fixture_image(), "a small red cube",
                            t_range=(0.1, 0.9), guidance_scale=5.0, seed=77)
    assert canonical(req) == canonical(fx["request"])


def test_attention_request_matches_fixture_bytes():
    fx = load_fixture("attention_basic")
    req = build_attention_request(fixture_image(),
                                  "a small red cube on a desk", "cube", 2)
    assert canonical(req) == canonical(fx["request"])


def test_sds_response_decodes_to_finite_image_shape():
    fx = load_fixture("sds_grad_basic")
    grad = decode_f32(fx["response"]["grad"], (48, 48, 3))
    assert np.all(np.isfinite(grad))
    assert float(np.abs(grad).max()) > 0


def test_attention_response_parses_with_expected_counts():
    fx = load_fixture("attention_basic")
    stack = parse_attention_response(fx["response"], keyword="cube")
    # steps x L x H with the service's L=3 blocks, H=2 heads
    assert len(stack.entries) == 2 * 3 * 2
    for e in stack.entries:
        assert e.map.min() >= 0
    resolutions = {e.map.shape for e in stack.entries}
    assert len(resolutions) == 3


def test_finetune_fixture_is_noop_acknowledged():
    fx = load_fixture("finetune_noop")
    assert fx["request"]["iterations"] == 0
    assert fx["response"]["status"] == "ok"
    assert fx["response"]["finetuned"] is False
    # the PNG payload is intact base64
    raw = base64.b64decode(fx["request"]["images"][0])
    assert raw[:8] == b"\x89PNG\r\n\x1a\n"


def test_all_fixture_payloads_version_tagged():
    for name in ("sds_grad_basic", "attention_basic", "finetune_noop"):
        fx = load_fixture(name)
        assert fx["request"]["version"] == "v1"
        assert fx["response"]["version"] == "v1"
