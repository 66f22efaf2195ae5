"""Score-distillation guidance: the pixel-gradient contract and its providers.

A provider maps (rendered image, prompt, timestep, guidance scale, seed) to a
per-pixel color-space gradient, conceptually the denoiser residual. The
editing loop draws a timestep and noise seed, queries the provider with the
clean render (providers do their own noising, reproducible from the seed),
scales the residual by the schedule weight ``w(t) = 1 - alpha_bar_t`` and
chains the result through the renderer's backward pass.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
from dataclasses import dataclass, field as dc_field
from typing import Protocol

import numpy as np

from sketchfield.errors import (
    HandshakeVersionError,
    ProviderTimeout,
    ShapeMismatch,
    SketchfieldError,
)
from sketchfield.errors import NonFiniteGradient

WIRE_MAGIC = b"SKG1"
WIRE_VERSION = 1


def cosine_alpha_bar(steps: int = 1000, s: float = 0.008) -> np.ndarray:
    """Monotone-decreasing cumulative noise schedule (cosine shape)."""
    t = np.arange(steps + 1, dtype=np.float64) / steps
    f = np.cos((t + s) / (1.0 + s) * np.pi / 2.0) ** 2
    ab = f[1:] / f[0]
    return np.clip(ab, 1e-5, 1.0)


@dataclass
class GuidanceConfig:
    prompt: str = ""
    guidance_scale: float = 100.0
    t_range: tuple[int, int] = (20, 980)
    schedule: np.ndarray = dc_field(default_factory=cosine_alpha_bar)
    directional_prompts: bool = True

    def __post_init__(self):
        self.schedule = np.asarray(self.schedule, dtype=np.float64)
        t0, t1 = self.t_range
        if not (0 <= t0 < t1 < len(self.schedule)):
            raise ValueError(f"t_range {self.t_range} incompatible with schedule length "
                             f"{len(self.schedule)}")
        if self.guidance_scale <= 0:
            raise ValueError("guidance_scale must be positive")
        if np.any(np.diff(self.schedule) > 1e-12):
            raise ValueError("schedule alpha_bar must be monotone decreasing")

    def to_json(self) -> dict:
        return {
            "prompt": self.prompt,
            "guidance_scale": self.guidance_scale,
            "t_range": list(self.t_range),
            "directional_prompts": self.directional_prompts,
        }

    @staticmethod
    def from_json(d: dict) -> "GuidanceConfig":
        cfg = GuidanceConfig()
        return GuidanceConfig(
            prompt=d.get("prompt", ""),
            guidance_scale=float(d.get("guidance_scale", 100.0)),
            t_range=tuple(d.get("t_range", (20, 980))),
            directional_prompts=bool(d.get("directional_prompts", True)),
        )


@dataclass
class ScoreRequest:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    prompt: str
    timestep: int
    guidance_scale: float
    seed: int
    camera_json: dict | None = None  # used by analytic providers for per-view targets


@dataclass
class ScoreResponse:
    pixel_gradient: np.ndarray  # (H, W, 3) float32
    provider_info: str = ""


class GuidanceProvider(Protocol):
    def score(self, request: ScoreRequest) -> ScoreResponse: ...


class EchoProvider:
    """Returns a zero residual (the denoiser echoes the noise back)."""

    def score(self, request: ScoreRequest) -> ScoreResponse:
        return ScoreResponse(
            pixel_gradient=np.zeros_like(request.image, dtype=np.float32),
            provider_info="echo",
        )


class AnalyticTargetProvider:
    """Desk-scale oracle: residual ``k * (image - target_for_this_view)``.

    The target is an analytic scene (a field rendered on demand per request
    camera, cached per pose) or an explicit image. The residual is exactly
    zero when the rendered image matches the target, and the expected update
    direction always points from the image toward the target.
    """

    def __init__(
        self,
        target_field=None,
        k: float = 0.5,
        step: float | None = None,
        background: tuple = (1.0, 1.0, 1.0),
        target_image: np.ndarray | None = None,
    ):
        if not (0.0 < k <= 1.0):
            raise ValueError(f"k must be in (0, 1], got {k}")
        if target_field is None and target_image is None:
            raise ValueError("need a target field or a target image")
        self.target_field = target_field
        self.target_image = target_image
        self.k = float(k)
        self.step = step
        self.background = background
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def target_for(self, request: ScoreRequest) -> np.ndarray:
        if self.target_field is None or request.camera_json is None:
            if self.target_image is None:
                raise SketchfieldError("request carries no camera and provider has no image")
            return self.target_image
        key = json.dumps(request.camera_json, sort_keys=True)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        from sketchfield.render import Camera, render_view

        cam = Camera.from_json(request.camera_json)
        img = render_view(self.target_field, cam, self.step, self.background).rgb
        with self._lock:
            self._cache[key] = img
        return img

    def score(self, request: ScoreRequest) -> ScoreResponse:
        target = self.target_for(request)
        if target.shape != request.image.shape:
            raise ShapeMismatch(
                f"target shape {target.shape} != image shape {request.image.shape}"
            )
        residual = self.k * (request.image.astype(np.float32) - target.astype(np.float32))
        return ScoreResponse(pixel_gradient=residual, provider_info=f"analytic(k={self.k})")


def sds_pixel_gradient(
    image: np.ndarray,
    config: GuidanceConfig,
    provider: GuidanceProvider,
    rng: np.random.Generator,
    camera_json: dict | None = None,
    prompt_override: str | None = None,
) -> tuple[np.ndarray, int]:
    """One score-distillation draw: returns (w(t) * residual, t).

    Draws the timestep uniformly from ``t_range`` and a noise seed from
    ``rng``; the provider reproduces the Gaussian noise from the seed when it
    actually denoises (analytic providers shortcut it). The caller chains the
    returned per-pixel gradient through the renderer.
    """
    image = np.asarray(image, dtype=np.float32)
    t0, t1 = config.t_range
    t = int(rng.integers(t0, t1 + 1))
    seed = int(rng.integers(0, 2**63 - 1))
    request = ScoreRequest(
        image=image,
        prompt=prompt_override if prompt_override is not None else config.prompt,
        timestep=t,
        guidance_scale=config.guidance_scale,
        seed=seed,
        camera_json=camera_json,
    )
    response = provider.score(request)
    grad = np.asarray(response.pixel_gradient, dtype=np.float32)
    if grad.shape != image.shape:
        raise ShapeMismatch(f"provider returned {grad.shape}, expected {image.shape}")
    if not np.isfinite(grad).all():
        raise NonFiniteGradient("provider returned non-finite gradient")
    w = 1.0 - float(config.schedule[t])
    return (w * grad).astype(np.float32), t


# --- directional prompts ----------------------------------------------------------


def directional_prompt(prompt: str, camera) -> str:
    """Append a view-direction suffix based on the camera's orbit angles.

    Bins: elevation above +60 deg -> overhead, below -30 deg -> bottom;
    otherwise azimuth within +/-45 deg of front -> front, the two flanking
    quadrants -> side, the rest -> back.
    """
    pos = camera.position if hasattr(camera, "position") else np.asarray(camera)
    x, y, z = float(pos[0]), float(pos[1]), float(pos[2])
    r_xy = float(np.hypot(x, y))
    elevation = float(np.degrees(np.arctan2(z, r_xy)))
    azimuth = float(np.degrees(np.arctan2(y, x)))
    if elevation > 60.0:
        suffix = "overhead view"
    elif elevation < -30.0:
        suffix = "bottom view"
    else:
        a = abs((azimuth + 180.0) % 360.0 - 180.0)
        if a <= 45.0:
            suffix = "front view"
        elif a <= 135.0:
            suffix = "side view"
        else:
            suffix = "back view"
    return f"{prompt}, {suffix}"


# --- wire protocol -----------------------------------------------------------------


def _encode_frame(header: dict, payload: bytes = b"") -> bytes:
    blob = json.dumps(header).encode("utf-8")
    return struct.pack("<I", len(blob)) + blob + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(min(65536, n - got))
        if not part:
            raise ConnectionError("peer closed the connection mid-frame")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def _read_frame(sock: socket.socket) -> tuple[dict, bytes]:
    (hlen,) = struct.unpack("<I", _recv_exact(sock, 4))
    header = json.loads(_recv_exact(sock, hlen).decode("utf-8"))
    payload = b""
    if header.get("type") in ("score_request", "score_response"):
        h, w = int(header["h"]), int(header["w"])
        payload = _recv_exact(sock, h * w * 3 * 4)
    return header, payload


class ExternalProvider:
    """Client for a guidance server speaking the SKG1 stream protocol."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        sock.settimeout(self.timeout)
        sock.sendall(WIRE_MAGIC)
        sock.sendall(_encode_frame({"type": "hello", "version": WIRE_VERSION}))
        header, _ = _read_frame(sock)
        if header.get("type") != "hello" or header.get("version") != WIRE_VERSION:
            sock.close()
            raise HandshakeVersionError(f"server answered {header}")
        self._sock = sock

    def _close_unlocked(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def close(self) -> None:
        with self._lock:
            self._close_unlocked()

    def _roundtrip(self, request: ScoreRequest) -> ScoreResponse:
        if self._sock is None:
            self._connect()
        h, w = request.image.shape[:2]
        header = {
            "type": "score_request",
            "h": h,
            "w": w,
            "timestep": request.timestep,
            "guidance_scale": request.guidance_scale,
            "prompt": request.prompt,
            "seed": request.seed,
        }
        if request.camera_json is not None:
            header["camera"] = request.camera_json
        payload = np.ascontiguousarray(request.image, dtype="<f4").tobytes()
        self._sock.sendall(_encode_frame(header, payload))
        resp_header, resp_payload = _read_frame(self._sock)
        if resp_header.get("type") != "score_response":
            raise SketchfieldError(f"unexpected frame {resp_header}")
        rh, rw = int(resp_header["h"]), int(resp_header["w"])
        if (rh, rw) != (h, w):
            raise ShapeMismatch(f"server returned {rh}x{rw}, expected {h}x{w}")
        grad = np.frombuffer(resp_payload, dtype="<f4").reshape(rh, rw, 3).copy()
        return ScoreResponse(
            pixel_gradient=grad, provider_info=str(resp_header.get("provider_info", ""))
        )

    def score(self, request: ScoreRequest) -> ScoreResponse:
        with self._lock:
            last_err: Exception | None = None
            for attempt in range(2):
                try:
                    return self._roundtrip(request)
                except ShapeMismatch:
                    raise
                except HandshakeVersionError:
                    raise
                except (socket.timeout, TimeoutError, ConnectionError, OSError) as err:
                    last_err = err
                    self._close_unlocked()
            raise ProviderTimeout(f"no response after 2 attempts: {last_err}")


def serve_provider(
    provider: GuidanceProvider,
    host: str = "127.0.0.1",
    port: int = 0,
    ready: threading.Event | None = None,
    stop: threading.Event | None = None,
) -> tuple[threading.Thread, int]:
    """Serve a provider over the SKG1 protocol in a daemon thread.

    Returns the thread and the bound port. Intended for tests and for
    bridging a local provider to out-of-process editors.
    """
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host, port))
    server.listen(4)
    bound_port = server.getsockname()[1]
    server.settimeout(0.2)

    def handle(conn: socket.socket) -> None:
        try:
            conn.settimeout(30.0)
            magic = _recv_exact(conn, 4)
            if magic != WIRE_MAGIC:
                conn.close()
                return
            header, _ = _read_frame(conn)
            if header.get("type") != "hello":
                conn.close()
                return
            conn.sendall(_encode_frame({"type": "hello", "version": WIRE_VERSION}))
            while True:
                header, payload = _read_frame(conn)
                if header.get("type") != "score_request":
                    break
                h, w = int(header["h"]), int(header["w"])
                image = np.frombuffer(payload, dtype="<f4").reshape(h, w, 3).copy()
                request = ScoreRequest(
                    image=image,
                    prompt=str(header.get("prompt", "")),
                    timestep=int(header.get("timestep", 0)),
                    guidance_scale=float(header.get("guidance_scale", 1.0)),
                    seed=int(header.get("seed", 0)),
                    camera_json=header.get("camera"),
                )
                response = provider.score(request)
                out_header = {
                    "type": "score_response",
                    "h": h,
                    "w": w,
                    "provider_info": response.provider_info,
                }
                conn.sendall(
                    _encode_frame(
                        out_header,
                        np.ascontiguousarray(response.pixel_gradient, dtype="<f4").tobytes(),
                    )
                )
        except (ConnectionError, OSError, socket.timeout):
            pass
        finally:
            conn.close()

    def loop() -> None:
        try:
            while stop is None or not stop.is_set():
                try:
                    conn, _ = server.accept()
                except socket.timeout:
                    continue
                threading.Thread(target=handle, args=(conn,), daemon=True).start()
        finally:
            server.close()

    thread = threading.Thread(target=loop, daemon=True)
    thread.start()
    if ready is not None:
        ready.set()
    return thread, bound_port
