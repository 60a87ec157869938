"""HTTP client for a denoiser served out of process.

Wire protocol: POST {endpoint}/v1/denoise with
{"shape": [...], "x_t": [row-major floats], "t": int, "prompt": str|null, "embedding": [floats]|null}
answered by {"epsilon": [row-major floats], "shape": [...]}.
"""

from __future__ import annotations

import contextlib
import logging
import threading
import time
from typing import Any, Dict, Optional

import requests
import torch

from ..diffusion import Conditioning
from ..errors import DenoiserShapeError, DenoiserTransportError, MalformedResponseError


logger = logging.getLogger(__name__)

DENOISE_ROUTE = "/v1/denoise"


def encode_request(x_t: torch.Tensor, t: int, cond: Conditioning) -> Dict[str, Any]:
    flat = x_t.detach().to("cpu", torch.float64).reshape(-1)
    return {
        "shape": list(x_t.shape),
        "x_t": flat.tolist(),
        "t": int(t),
        "prompt": None if cond.null_flag else cond.prompt,
        "embedding": cond.embedding.to(torch.float64).tolist() if bool(cond.embedding.any()) else None,
    }


def decode_response(payload: Any, like: torch.Tensor) -> torch.Tensor:
    if not isinstance(payload, dict) or "epsilon" not in payload or "shape" not in payload:
        raise MalformedResponseError("response must be an object with 'epsilon' and 'shape'")
    shape, values = payload["shape"], payload["epsilon"]
    if not isinstance(shape, list) or not all(isinstance(s, int) for s in shape):
        raise MalformedResponseError(f"bad shape field: {shape!r}")
    if not isinstance(values, list):
        raise MalformedResponseError("epsilon must be a flat list of numbers")
    if list(shape) != list(like.shape):
        raise DenoiserShapeError(f"server answered shape {shape} for request {list(like.shape)}")
    try:
        eps = torch.tensor(values, dtype=torch.float64)
    except (TypeError, ValueError) as e:
        raise MalformedResponseError(f"epsilon is not numeric: {e}") from e
    if eps.ndim != 1 or eps.numel() != like.numel():
        raise DenoiserShapeError(f"server sent {eps.numel()} values for shape {shape}")
    return eps.reshape(like.shape).to(device=like.device, dtype=like.dtype)


class RemoteDenoiser:
    """Denoiser backed by an HTTP endpoint.

    Requests on one client are serialised through a lock (one connection per
    session). Connection failures, timeouts and HTTP 5xx answers are retried
    ``retries`` times with linear backoff; 4xx answers fail at once.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        session: Optional[requests.Session] = None,
    ):
        self.url = endpoint.rstrip("/") + DENOISE_ROUTE
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._session = session or requests.Session()
        self._lock = threading.Lock()

    def close(self) -> None:
        with contextlib.suppress(Exception):
            self._session.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

    def _post(self, body: Dict[str, Any]) -> Any:
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            try:
                with self._lock:
                    resp = self._session.post(self.url, json=body, timeout=self.timeout)
                resp.raise_for_status()
            except (requests.ConnectionError, requests.Timeout) as e:
                last = e
                logger.warning("denoiser %s unreachable (attempt %d/%d): %s", self.url, attempt + 1, self.retries + 1, e)
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
                continue
            except requests.HTTPError as e:
                status = e.response.status_code
                if status < 500:
                    raise DenoiserTransportError(f"{self.url}: HTTP {status}") from e
                last = e
                logger.warning("denoiser %s answered HTTP %d (attempt %d/%d)", self.url, status, attempt + 1, self.retries + 1)
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
                continue
            try:
                return resp.json()
            except ValueError as e:
                raise MalformedResponseError(f"{self.url}: response is not JSON") from e
        raise DenoiserTransportError(f"{self.url}: failed after {self.retries + 1} attempts: {last}")

    def __call__(self, x_t: torch.Tensor, t: int, cond: Conditioning) -> torch.Tensor:
        return decode_response(self._post(encode_request(x_t, t, cond)), x_t)


def remote_denoiser(endpoint: str, **kwargs) -> RemoteDenoiser:
    return RemoteDenoiser(endpoint, **kwargs)
