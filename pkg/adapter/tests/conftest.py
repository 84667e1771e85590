import json
import urllib.request

import pytest

from encoder_adapter import AdapterConfig, BridgeServer


def post_encode(port: int, payload: dict) -> dict:
    req = urllib.request.Request(
        f"http://127.0.0.1:{port}/encode",
        data=json.dumps(payload).encode("utf-8"),
        headers={"Content-Type": "application/json"},
    )
    with urllib.request.urlopen(req, timeout=10) as resp:
        return json.loads(resp.read())


def get_health(port: int) -> dict:
    with urllib.request.urlopen(f"http://127.0.0.1:{port}/health", timeout=10) as resp:
        return json.loads(resp.read())


@pytest.fixture(scope="module")
def http_server():
    """Default server: hash backend, dim 32, mean pooling, normalized."""
    with BridgeServer(AdapterConfig(model="hash:32"), coalesce_max=4) as srv:
        _, port = srv.start_http("127.0.0.1", 0)
        yield srv, port
