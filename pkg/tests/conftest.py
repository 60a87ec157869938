from __future__ import annotations

import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
import torch

from neused.config import ModelConfig, RenderConfig
from neused.diffusion import build_schedule
from neused.fields import build_bundle
from neused.logging_utils import debug_flags


TINY_MODEL = dict(
    levels=2,
    features_per_level=2,
    log2_table_size=8,
    base_resolution=4,
    growth_factor=2.0,
    init_levels=1,
    hidden_width=8,
    hidden_layers=1,
    feature_dim=4,
    color_hidden_width=8,
)


@pytest.fixture(autouse=True)
def _reset_debug_flags():
    debug_flags.reset()
    yield
    debug_flags.reset()


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_bundle(tiny_model_cfg):
    return build_bundle(tiny_model_cfg, seed=0)


@pytest.fixture
def fast_render_cfg() -> RenderConfig:
    return RenderConfig(n_samples=16, n_background=4, chunk=256)


@pytest.fixture
def schedule():
    return build_schedule(1000)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)


class _DenoiseHandler(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802
        server = self.server
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        server.requests.append(body)
        if server.mode == "reject" or (server.mode == "flaky" and server.failures > 0):
            status = 400 if server.mode == "reject" else 500
            server.failures -= 1
            self.send_response(status)
            self.send_header("Content-Length", "0")
            self.end_headers()
            return
        if server.mode == "malformed":
            payload = {"nope": 1}
        elif server.mode == "wrong_shape":
            payload = {"epsilon": body["x_t"][:-1], "shape": body["shape"][:-1] + [body["shape"][-1] - 1]}
        else:
            payload = {"epsilon": [server.scale * v for v in body["x_t"]], "shape": body["shape"]}
        data = json.dumps(payload).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def loopback_server():
    """Denoiser endpoint answering eps = scale * x_t; ``mode`` switches to faulty replies.

    In ``flaky`` mode the first ``failures`` requests get HTTP 500; ``reject`` always answers 400.
    """
    server = ThreadingHTTPServer(("127.0.0.1", 0), _DenoiseHandler)
    server.requests = []
    server.mode = "ok"
    server.scale = 0.1
    server.failures = 0
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    server.url = f"http://127.0.0.1:{server.server_address[1]}"
    yield server
    server.shutdown()
    server.server_close()


@pytest.fixture
def closed_port_url():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return f"http://127.0.0.1:{port}"
