"""Optional integration against the real guidance service. Runs only when
the TypeScript build exists (guidance-service/dist); everything the primary
acceptance needs is covered by mocks elsewhere."""

import os
import subprocess
import time
import urllib.request

import numpy as np
import pytest

from meshfield.guidance import remote_oracle

SERVICE_DIR = os.path.join(os.path.dirname(__file__), "..", "guidance-service")
ENTRY = os.path.join(SERVICE_DIR, "dist", "src", "main.js")

pytestmark = pytest.mark.skipif(
    not os.path.exists(ENTRY), reason="guidance-service not built")


@pytest.fixture(scope="module")
def live_service():
    port = 8765
    proc = subprocess.Popen(["node", ENTRY],
                            env=dict(os.environ, PORT=str(port)),
                            stdout=subprocess.DEVNULL,
                            stderr=subprocess.DEVNULL)
    url = f"http://127.0.0.1:{port}"
    try:
        for _ in range(50):
            try:
                urllib.request.urlopen(url + "/healthz", timeout=1)
                break
            except OSError:
                time.sleep(0.2)
        else:
            pytest.skip("service did not come up")
        yield url
    finally:
        proc.terminate()
        proc.wait()


def test_live_service_determinism_and_counts(live_service):
    oracle = remote_oracle(live_service, timeout=30)
    health = oracle.healthz()
    assert health["version"] == "v1"
    rng = np.random.default_rng(1)
    img = rng.random((48, 48, 3))
    g1 = oracle.sds_pixel_grad(img, "a stone archway", seed=9)
    g2 = oracle.sds_pixel_grad(img, "a stone archway", seed=9)
    np.testing.assert_array_equal(g1, g2)
    assert g1.shape == (48, 48, 3)
    stack = oracle.attention(img, "a stone archway in a field", "archway",
                             steps=2)
    assert len(stack.entries) == 2 * 3 * 2
    for e in stack.entries:
        assert e.map.min() >= 0
