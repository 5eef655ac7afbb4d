"""Client side of the diffusion-backend wire protocol.

Requests are JSON-over-HTTP with base64 PNG payloads (POST {endpoint}/v1/infer,
error body {"code", "message"}, metrics at GET {endpoint}/v1/metrics).
Admission control uses declared static VRAM budgets, never live telemetry,
so verdicts are a pure function of the backend snapshot. Endpoints with the
``mock://`` scheme run the deterministic in-process mock instead of HTTP;
end-to-end reproducibility rests on that mock.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import httpx
import numpy as np
from scipy import ndimage

from .errors import ConfigError, NotFoundError, ProtocolError, RequestError, TransportError
from .imaging import ImageBuffer, ResampleSpec, load_image, resize, save_png

logger = logging.getLogger(__name__)

REQUEST_KINDS = ("img2img", "controlnet")

CAPABILITIES = ("img2img", "controlnet", "lora")

HEALTH_STATES = ("up", "degraded", "down")

DEGRADED_AFTER_FAILURES = 3


@dataclass
class VramModel:
    """Static VRAM budgets: 24 GB to run img2img, 30 GB for the ControlNet stage."""

    base_img2img_gb: float = 24.0
    controlnet_overhead_gb: float = 4.0
    stage2_total_gb: float = 30.0

    def __post_init__(self):
        if self.base_img2img_gb <= 0 or self.stage2_total_gb <= 0:
            raise ConfigError("VRAM budgets must be positive")
        if self.stage2_total_gb < self.base_img2img_gb:
            raise ConfigError(
                f"stage2_total_gb {self.stage2_total_gb} below base_img2img_gb {self.base_img2img_gb}"
            )

    def required_gb(self, kind: str) -> float:
        return self.base_img2img_gb if kind == "img2img" else self.stage2_total_gb


@dataclass
class BackendDescriptor:
    id: str
    endpoint: str
    declared_vram_gb: float
    capabilities: tuple[str, ...] = CAPABILITIES
    max_in_flight: int = 2
    health: str = "up"

    def __post_init__(self):
        if self.declared_vram_gb <= 0:
            raise ConfigError(f"declared_vram_gb must be > 0, got {self.declared_vram_gb}")
        if self.max_in_flight < 1:
            raise ConfigError(f"max_in_flight must be >= 1, got {self.max_in_flight}")
        unknown = set(self.capabilities) - set(CAPABILITIES)
        if unknown:
            raise ConfigError(f"unknown capabilities {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "endpoint": self.endpoint,
            "declared_vram_gb": self.declared_vram_gb,
            "capabilities": list(self.capabilities),
            "max_in_flight": self.max_in_flight,
            "health": self.health,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackendDescriptor":
        return cls(
            id=str(d["id"]),
            endpoint=str(d["endpoint"]),
            declared_vram_gb=float(d["declared_vram_gb"]),
            capabilities=tuple(d.get("capabilities", CAPABILITIES)),
            max_in_flight=int(d.get("max_in_flight", 2)),
            health=str(d.get("health", "up")),
        )


@dataclass
class InferenceRequest:
    """One generation call; field names are the wire schema, verbatim."""

    kind: str
    model_id: str
    prompt: str
    num_inference_steps: int
    guidance_scale: float
    seed: int
    num_images: int
    width: int
    height: int
    init_image: Optional[str] = None  # base64 PNG
    control_image: Optional[str] = None  # base64 PNG
    strength: Optional[float] = None
    conditioning_scale: Optional[float] = None
    lora: Optional[dict] = None  # {"name": str, "scale": float}

    def validate(self) -> None:
        if self.kind not in REQUEST_KINDS:
            raise ValueError(f"unknown request kind {self.kind!r}")
        if self.kind == "img2img":
            if self.strength is None or self.conditioning_scale is not None or not self.init_image:
                raise ValueError("img2img requests carry init_image and strength, never conditioning_scale")
            if not 0.0 <= self.strength <= 1.0:
                raise ValueError(f"strength must be in [0, 1], got {self.strength}")
        else:
            if self.conditioning_scale is None or self.strength is not None or not self.control_image:
                raise ValueError("controlnet requests carry control_image and conditioning_scale, never strength")
            if not 0.0 <= self.conditioning_scale <= 1.0:
                raise ValueError(f"conditioning_scale must be in [0, 1], got {self.conditioning_scale}")
        if self.num_inference_steps < 1 or self.num_images < 1:
            raise ValueError("num_inference_steps and num_images must be >= 1")
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative 64-bit integer")
        if self.lora is not None:
            if set(self.lora) != {"name", "scale"}:
                raise ValueError('lora must be {"name", "scale"}')
            if not 0.0 <= float(self.lora["scale"]) <= 1.0:
                raise ValueError(f"lora scale must be in [0, 1], got {self.lora['scale']}")

    def to_payload(self) -> dict:
        payload = {
            "kind": self.kind,
            "model_id": self.model_id,
            "prompt": self.prompt,
            "num_inference_steps": self.num_inference_steps,
            "guidance_scale": self.guidance_scale,
            "seed": self.seed,
            "num_images": self.num_images,
            "width": self.width,
            "height": self.height,
        }
        for name in ("init_image", "control_image", "strength", "conditioning_scale", "lora"):
            value = getattr(self, name)
            if value is not None:
                payload[name] = value
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> "InferenceRequest":
        try:
            req = cls(
                kind=str(payload["kind"]),
                model_id=str(payload["model_id"]),
                prompt=str(payload["prompt"]),
                num_inference_steps=int(payload["num_inference_steps"]),
                guidance_scale=float(payload["guidance_scale"]),
                seed=int(payload["seed"]),
                num_images=int(payload["num_images"]),
                width=int(payload["width"]),
                height=int(payload["height"]),
                init_image=payload.get("init_image"),
                control_image=payload.get("control_image"),
                strength=None if payload.get("strength") is None else float(payload["strength"]),
                conditioning_scale=(
                    None if payload.get("conditioning_scale") is None else float(payload["conditioning_scale"])
                ),
                lora=payload.get("lora"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed inference payload: {exc}") from exc
        req.validate()
        return req

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_payload(), sort_keys=True, separators=(",", ":")).encode()


@dataclass
class InferenceResult:
    images: list[bytes]  # PNG bytes
    seed_used: int
    latency_s: float


@dataclass
class GpuSample:
    timestamp: float
    memory_used_gb: float
    temperature_c: float
    power_w: float

    def __post_init__(self):
        if min(self.timestamp, self.memory_used_gb, self.temperature_c, self.power_w) < 0:
            raise ValueError("GPU sample values must be non-negative")

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "memory_used_gb": self.memory_used_gb,
            "temperature_c": self.temperature_c,
            "power_w": self.power_w,
        }


@dataclass(frozen=True)
class AdmissionDecision:
    verdict: str  # admit | queue | reject
    reason: str = ""


def admission_check(
    kind: str,
    backend: BackendDescriptor,
    vram_model: VramModel,
    in_flight: int = 0,
    needs_lora: bool = False,
) -> AdmissionDecision:
    """Pure admission verdict from a backend snapshot.

    Rejects are structural (missing capability, budget above declared VRAM);
    queueing only ever means the in-flight slots are taken.
    """
    if kind not in REQUEST_KINDS:
        raise ValueError(f"unknown request kind {kind!r}")
    if kind not in backend.capabilities:
        return AdmissionDecision("reject", f"backend {backend.id} lacks the {kind} capability")
    if needs_lora and "lora" not in backend.capabilities:
        return AdmissionDecision("reject", f"backend {backend.id} lacks the lora capability")
    required = vram_model.required_gb(kind)
    if required > backend.declared_vram_gb:
        return AdmissionDecision(
            "reject",
            f"{kind} needs {required:g} GB but backend {backend.id} declares {backend.declared_vram_gb:g} GB",
        )
    if in_flight >= backend.max_in_flight:
        return AdmissionDecision("queue", f"backend {backend.id} at max_in_flight={backend.max_in_flight}")
    return AdmissionDecision("admit")


def _mild_sharpen(arr: np.ndarray) -> np.ndarray:
    blurred = ndimage.uniform_filter(arr, size=(3, 3, 1), mode="nearest")
    return arr + 0.3 * (arr - blurred)


def mock_infer(request: InferenceRequest) -> list[ImageBuffer]:
    """Deterministic stand-in for a diffusion backend.

    Blends the conditioning image with request-keyed pseudo-noise (weight =
    strength or conditioning_scale) and applies a mild sharpen; identical
    request bytes always produce identical images, and weight 0 returns the
    conditioning image untouched.
    """
    request.validate()
    source_b64 = request.init_image if request.kind == "img2img" else request.control_image
    base = load_image(base64.b64decode(source_b64))
    if (base.width, base.height) != (request.width, request.height):
        base = resize(base, ResampleSpec(request.width, request.height))
    weight = request.strength if request.kind == "img2img" else request.conditioning_scale
    digest = request.canonical_bytes()
    images = []
    for i in range(request.num_images):
        if weight == 0.0:
            images.append(base.copy())
            continue
        key = int.from_bytes(hashlib.sha256(digest + i.to_bytes(4, "big")).digest()[:8], "big")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([request.seed, i, key])))
        noise = rng.random(base.pixels.shape)
        blended = (1.0 - weight) * base.pixels + weight * noise
        images.append(ImageBuffer.from_clamped(_mild_sharpen(blended)))
    return images


def mock_transport(backend: BackendDescriptor, payload: dict) -> dict:
    request = InferenceRequest.from_payload(payload)
    images = mock_infer(request)
    return {
        "images": [base64.b64encode(save_png(img)).decode("ascii") for img in images],
        "seed_used": request.seed,
    }


def _http_transport_factory(timeout: float) -> Callable[[BackendDescriptor, dict], dict]:
    def transport(backend: BackendDescriptor, payload: dict) -> dict:
        try:
            response = httpx.post(f"{backend.endpoint}/v1/infer", json=payload, timeout=timeout)
        except httpx.HTTPError as exc:
            raise TransportError(f"backend {backend.id} unreachable: {exc}") from exc
        if 400 <= response.status_code < 500:
            raise RequestError(f"backend {backend.id} rejected the request: {response.text}")
        if response.status_code != 200:
            raise TransportError(f"backend {backend.id} returned HTTP {response.status_code}")
        return response.json()

    return transport


def synthetic_gpu_sample(backend: BackendDescriptor, tick: int, now: Optional[float] = None) -> GpuSample:
    """Deterministic telemetry for mock backends, inside plausible ranges."""
    vram = backend.declared_vram_gb
    return GpuSample(
        timestamp=time.time() if now is None else now,
        memory_used_gb=vram * (0.55 + 0.35 * math.sin(tick / 5.0)),
        temperature_c=60.0 + 15.0 * math.sin(tick / 7.0),
        power_w=220.0 + 120.0 * math.sin(tick / 3.0),
    )


class InferenceGateway:
    """Admission gate, transport, retries and telemetry for registered backends."""

    def __init__(
        self,
        vram_model: Optional[VramModel] = None,
        transport: Optional[Callable[[BackendDescriptor, dict], dict]] = None,
        timeout_s: float = 30.0,
        retries: int = 2,
        backoff_s: float = 0.05,
        telemetry_capacity: int = 1000,
        queue_timeout_s: float = 60.0,
    ):
        self.vram_model = vram_model or VramModel()
        self._http = transport or _http_transport_factory(timeout_s)
        self.retries = retries
        self.backoff_s = backoff_s
        self.queue_timeout_s = queue_timeout_s
        self._backends: dict[str, BackendDescriptor] = {}
        self._in_flight: dict[str, int] = {}
        self._cond = threading.Condition()
        self._telemetry: dict[str, deque] = {}
        self._telemetry_failures: dict[str, int] = {}
        self._telemetry_ticks: dict[str, int] = {}
        self._telemetry_capacity = telemetry_capacity
        self._pollers: list[threading.Thread] = []
        self._stop = threading.Event()

    # -- registry ----------------------------------------------------------

    def register(self, backend: BackendDescriptor) -> None:
        with self._cond:
            self._backends[backend.id] = backend
            self._in_flight.setdefault(backend.id, 0)
            self._telemetry.setdefault(backend.id, deque(maxlen=self._telemetry_capacity))
            self._telemetry_failures.setdefault(backend.id, 0)
            self._telemetry_ticks.setdefault(backend.id, 0)

    def backend(self, backend_id: str) -> BackendDescriptor:
        try:
            return self._backends[backend_id]
        except KeyError:
            raise NotFoundError(f"unknown backend {backend_id!r}") from None

    def backends(self) -> list[BackendDescriptor]:
        return list(self._backends.values())

    def in_flight(self, backend_id: str) -> int:
        self.backend(backend_id)
        return self._in_flight[backend_id]

    # -- admission + submission --------------------------------------------

    def check(self, request: InferenceRequest, backend_id: str) -> AdmissionDecision:
        backend = self.backend(backend_id)
        with self._cond:
            in_flight = self._in_flight[backend_id]
        return admission_check(
            request.kind, backend, self.vram_model, in_flight=in_flight, needs_lora=request.lora is not None
        )

    def run(self, request: InferenceRequest, backend_id: str) -> InferenceResult:
        """Admission loop then submit; blocks while the verdict is queue."""
        request.validate()
        backend = self.backend(backend_id)
        deadline = time.monotonic() + self.queue_timeout_s
        with self._cond:
            while True:
                decision = admission_check(
                    request.kind,
                    backend,
                    self.vram_model,
                    in_flight=self._in_flight[backend_id],
                    needs_lora=request.lora is not None,
                )
                if decision.verdict == "reject":
                    raise RequestError(f"admission rejected: {decision.reason}")
                if decision.verdict == "admit":
                    self._in_flight[backend_id] += 1
                    break
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not self._cond.wait(timeout=remaining):
                    raise TransportError(f"queued past {self.queue_timeout_s}s on backend {backend_id}")
        try:
            return self._submit(request, backend)
        finally:
            with self._cond:
                self._in_flight[backend_id] -= 1
                self._cond.notify_all()

    def _transport_for(self, backend: BackendDescriptor) -> Callable[[BackendDescriptor, dict], dict]:
        if backend.endpoint.startswith("mock://"):
            return mock_transport
        return self._http

    def _submit(self, request: InferenceRequest, backend: BackendDescriptor) -> InferenceResult:
        payload = request.to_payload()
        transport = self._transport_for(backend)
        started = time.monotonic()
        attempt = 0
        while True:
            try:
                body = transport(backend, payload)
                break
            except TransportError:
                attempt += 1
                if attempt > self.retries:
                    backend.health = "degraded"
                    raise
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))
        images = [base64.b64decode(b64) for b64 in body.get("images", [])]
        if len(images) != request.num_images:
            raise ProtocolError(
                f"backend {backend.id} returned {len(images)} images for num_images={request.num_images}"
            )
        if backend.health == "degraded":
            backend.health = "up"
        return InferenceResult(
            images=images,
            seed_used=int(body.get("seed_used", request.seed)),
            latency_s=time.monotonic() - started,
        )

    # -- telemetry -----------------------------------------------------------

    def poll_once(self, backend_id: str) -> Optional[GpuSample]:
        """One telemetry poll; records a gap and degrades health on repeated failure."""
        backend = self.backend(backend_id)
        tick = self._telemetry_ticks[backend_id]
        self._telemetry_ticks[backend_id] = tick + 1
        try:
            if backend.endpoint.startswith("mock://"):
                sample = synthetic_gpu_sample(backend, tick)
            else:
                response = httpx.get(f"{backend.endpoint}/v1/metrics", timeout=5.0)
                response.raise_for_status()
                doc = response.json()
                sample = GpuSample(
                    timestamp=time.time(),
                    memory_used_gb=float(doc["memory_used_gb"]),
                    temperature_c=float(doc["temperature_c"]),
                    power_w=float(doc["power_w"]),
                )
        except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
            failures = self._telemetry_failures[backend_id] + 1
            self._telemetry_failures[backend_id] = failures
            logger.warning("telemetry poll failed for %s (%d consecutive): %s", backend_id, failures, exc)
            if failures >= DEGRADED_AFTER_FAILURES:
                backend.health = "degraded"
            return None
        self._telemetry_failures[backend_id] = 0
        self._telemetry[backend_id].append(sample)
        return sample

    def telemetry(self, backend_id: str) -> list[GpuSample]:
        self.backend(backend_id)
        return list(self._telemetry[backend_id])

    def start_polling(self, period_s: float = 1.0) -> None:
        def loop(backend_id: str) -> None:
            while not self._stop.wait(period_s):
                self.poll_once(backend_id)

        for backend_id in self._backends:
            t = threading.Thread(target=loop, args=(backend_id,), daemon=True)
            t.start()
            self._pollers.append(t)

    def stop_polling(self) -> None:
        self._stop.set()
        for t in self._pollers:
            t.join(timeout=2.0)
        self._pollers.clear()
        self._stop.clear()


def default_mock_backend(backend_id: str = "mock-local", vram_gb: float = 48.0) -> BackendDescriptor:
    return BackendDescriptor(
        id=backend_id,
        endpoint=f"mock://{backend_id}",
        declared_vram_gb=vram_gb,
        capabilities=CAPABILITIES,
        max_in_flight=4,
    )
