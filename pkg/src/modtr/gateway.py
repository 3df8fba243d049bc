"""One frozen detector served over HTTP, with one translator route per input modality.

Queries carry a modality tag. ``rgb`` goes straight to the detector; every
other modality is first adapted by its registered ModTr translator. Routes
can be added while the service runs and never touch the detector weights.
"""

from __future__ import annotations

import base64
import binascii
import io
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import MappingProxyType

import torch
from PIL import Image, UnidentifiedImageError

from .core import ModTrModel, load_model
from .data import decode_image
from .detector import DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD, DetectorHandle, load_detector
from .fusion import FusionKind

log = logging.getLogger(__name__)

IDENTITY = "identity"


@dataclass(frozen=True)
class ModalityRoute:
    modality_id: str
    translator_checkpoint: str = IDENTITY
    fusion: FusionKind = FusionKind.HADAMARD

    def __post_init__(self):
        if not self.modality_id:
            raise ValueError("modality_id must be non-empty")
        object.__setattr__(self, "fusion", FusionKind.parse(self.fusion))
        object.__setattr__(self, "translator_checkpoint", str(self.translator_checkpoint))

    @property
    def identity(self) -> bool:
        return self.translator_checkpoint == IDENTITY

    def to_dict(self) -> dict:
        return {"modality_id": self.modality_id, "translator_checkpoint": self.translator_checkpoint,
                "fusion": self.fusion.value}


@dataclass
class GatewayConfig:
    detector_source: str
    detector_architecture: str = "TinyAnchorFree"
    class_map: dict[int, str] | None = None
    routes: list[ModalityRoute] = field(default_factory=lambda: [ModalityRoute("rgb")])
    bind_address: str = "127.0.0.1:8000"
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    nms_iou: float = DEFAULT_NMS_IOU
    max_image_pixels: int = 4096 * 4096
    workers: int = 2

    def __post_init__(self):
        self.routes = [r if isinstance(r, ModalityRoute) else ModalityRoute(**r) for r in self.routes]
        if not self.routes:
            raise ValueError("a gateway needs at least one route")
        host, sep, port = self.bind_address.rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ValueError(f"bind_address must look like HOST:PORT, got {self.bind_address!r}")
        if self.workers < 1 or self.max_image_pixels < 1:
            raise ValueError("workers and max_image_pixels must be >= 1")

    @property
    def host(self) -> str:
        return self.bind_address.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.bind_address.rpartition(":")[2])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["routes"] = [r.to_dict() for r in self.routes]
        return d


class GatewayError(Exception):
    """An error with an HTTP status and a machine-readable code."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message

    def to_dict(self) -> dict:
        return {"error": {"code": self.code, "message": self.message}}


@dataclass(frozen=True)
class _LiveRoute:
    route: ModalityRoute
    model: ModTrModel | None  # None for the identity route

    @property
    def in_channels(self) -> int:
        return 3 if self.model is None else self.model.in_channels


class Gateway:
    """Registry of modality routes in front of a single frozen detector.

    The registry is an immutable mapping swapped under a lock on every
    change, so a reader always sees either the old or the new set of routes,
    never a half-registered one.
    """

    def __init__(self, detector: DetectorHandle, score_threshold: float = DEFAULT_SCORE_THRESHOLD,
                 nms_iou: float = DEFAULT_NMS_IOU, max_image_pixels: int = 4096 * 4096, workers: int = 2,
                 identity_rgb: bool = True):
        self.detector = detector.freeze()
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.max_image_pixels = max_image_pixels
        self._write_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(workers)
        self._routes: MappingProxyType = MappingProxyType({})
        self.startup_fingerprint = self.detector.fingerprint()
        if identity_rgb:
            self.register_translator(ModalityRoute("rgb"))

    @classmethod
    def from_config(cls, config: GatewayConfig) -> "Gateway":
        detector = load_detector(config.detector_architecture, config.detector_source, config.class_map)
        gw = cls(detector, config.score_threshold, config.nms_iou, config.max_image_pixels, config.workers,
                 identity_rgb=False)
        routes = list(config.routes)
        if not any(r.modality_id == "rgb" for r in routes):
            routes.insert(0, ModalityRoute("rgb"))
        for r in routes:
            gw.register_translator(r)
        return gw

    # -- registry ---------------------------------------------------------

    def register_translator(self, route: ModalityRoute, model: ModTrModel | None = None) -> "Gateway":
        """Make ``route`` live. ``model`` lets callers hand over an in-memory ModTr model."""
        if model is None and not route.identity:
            path = Path(route.translator_checkpoint)
            try:
                model = load_model(path, self.detector, route.fusion, route.modality_id)
            except (FileNotFoundError, ValueError) as exc:
                raise ValueError(f"cannot load translator for {route.modality_id!r}: {exc}") from exc
        if model is not None:
            if model.detector is not self.detector and model.detector.fingerprint() != self.startup_fingerprint:
                raise ValueError(f"translator for {route.modality_id!r} was built for a different detector")
            model.detector = self.detector
            model.eval()
            expected = 3 if route.modality_id == "rgb" else None
            if expected is not None and model.in_channels != expected:
                raise ValueError(f"route 'rgb' needs a 3-channel translator, got {model.in_channels}")
        with self._write_lock:
            if route.modality_id in self._routes:
                raise ValueError(f"modality {route.modality_id!r} is already registered")
            updated = dict(self._routes)
            updated[route.modality_id] = _LiveRoute(route, model)
            self._routes = MappingProxyType(updated)
        log.info("route %s registered (%s)", route.modality_id,
                 "identity" if model is None else route.fusion.value)
        return self

    def unregister(self, modality_id: str) -> None:
        with self._write_lock:
            if modality_id not in self._routes:
                raise KeyError(modality_id)
            updated = dict(self._routes)
            del updated[modality_id]
            self._routes = MappingProxyType(updated)

    def modalities(self) -> list[dict]:
        routes = self._routes
        return [
            {"id": mid, "fusion": live.route.fusion.value if live.model is not None else IDENTITY,
             "identity": live.model is None}
            for mid, live in sorted(routes.items())
        ]

    def fingerprint(self) -> str:
        return self.detector.fingerprint()

    # -- inference --------------------------------------------------------

    def _route(self, modality_id: str) -> _LiveRoute:
        routes = self._routes
        if modality_id not in routes:
            known = ", ".join(sorted(routes))
            raise GatewayError(404, "unknown_modality", f"unknown modality {modality_id!r}; known modalities: {known}")
        return routes[modality_id]

    def decode(self, image_b64: str, channels: int) -> torch.Tensor:
        try:
            raw = base64.b64decode(image_b64, validate=True)
        except (binascii.Error, ValueError, TypeError) as exc:
            raise GatewayError(400, "bad_image", f"image_b64 is not valid base64: {exc}") from None
        try:
            with Image.open(io.BytesIO(raw)) as img:
                w, h = img.size
                if w * h > self.max_image_pixels:
                    raise GatewayError(400, "image_too_large",
                                       f"image has {w * h} pixels, limit is {self.max_image_pixels}")
                if img.format not in ("PNG", "JPEG"):
                    raise GatewayError(400, "bad_image", f"unsupported image format {img.format}")
                img.load()
                return decode_image(img, channels)
        except (UnidentifiedImageError, OSError, Image.DecompressionBombError) as exc:
            raise GatewayError(400, "bad_image", f"cannot decode image: {exc}") from None

    def detect(self, modality_id: str, image: torch.Tensor, score_threshold: float | None = None,
               nms_iou: float | None = None):
        """Run one tagged query in process. Returns ``(DetectionSet, timing_ms)``."""
        live = self._route(modality_id)
        thr = self.score_threshold if score_threshold is None else score_threshold
        nms = self.nms_iou if nms_iou is None else nms_iou
        if image.dim() != 3 or image.shape[0] != live.in_channels:
            raise GatewayError(400, "bad_image",
                               f"modality {modality_id!r} expects {live.in_channels}-channel images, "
                               f"got shape {tuple(image.shape)}")
        with self._slots:
            try:
                t0 = time.perf_counter()
                if live.model is None:
                    x = image
                else:
                    with torch.no_grad():
                        x = live.model.intermediate_representation(image)
                t1 = time.perf_counter()
                dets = self.detector.predict(x, thr, nms)
                t2 = time.perf_counter()
            except GatewayError:
                raise
            except Exception as exc:  # isolate a broken route from the others
                log.exception("route %s failed", modality_id)
                raise GatewayError(500, "route_failed", f"route {modality_id!r} failed: {exc}") from exc
        return dets, {"translate": (t1 - t0) * 1000.0, "detect": (t2 - t1) * 1000.0}

    def handle_query(self, request: dict) -> dict:
        if not isinstance(request, dict):
            raise GatewayError(400, "bad_request", "request body must be a JSON object")
        modality = request.get("modality")
        image_b64 = request.get("image_b64")
        if not isinstance(modality, str) or not isinstance(image_b64, str):
            raise GatewayError(400, "bad_request", "'modality' and 'image_b64' must be strings")
        thr = request.get("score_threshold")
        nms = request.get("nms_iou")
        for name, value in (("score_threshold", thr), ("nms_iou", nms)):
            if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))
                                      or not 0.0 <= value <= 1.0):
                raise GatewayError(400, "bad_request", f"{name} must be a number in [0, 1]")
        live = self._route(modality)
        image = self.decode(image_b64, live.in_channels)
        dets, timing = self.detect(modality, image, thr, nms)
        return {"detections": dets.to_json(self.detector.class_map), "modality": modality, "timing_ms": timing}


def encode_image(image: torch.Tensor, fmt: str = "PNG") -> str:
    """Base64 of an 8-bit PNG/JPEG rendering of a ``(C, H, W)`` unit-range tensor."""
    from .data import to_pil

    buf = io.BytesIO()
    to_pil(image).save(buf, format=fmt)
    return base64.b64encode(buf.getvalue()).decode("ascii")


# ---------------------------------------------------------------------------
# HTTP


def create_app(gateway: Gateway):
    from fastapi import Body, FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse

    app = FastAPI(title="modtr gateway")

    @app.exception_handler(GatewayError)
    async def _gateway_error(_request, exc: GatewayError):
        return JSONResponse(exc.to_dict(), status_code=exc.status)

    @app.post("/v1/detect")
    def detect(body: dict = Body(...)):
        return gateway.handle_query(body)

    @app.get("/v1/modalities")
    def modalities():
        return {"modalities": gateway.modalities()}

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "detector_fingerprint": gateway.fingerprint()}

    @app.exception_handler(Exception)
    async def _unexpected(_request: Request, exc: Exception):
        log.exception("unhandled error")
        return JSONResponse(GatewayError(500, "internal", str(exc)).to_dict(), status_code=500)

    @app.exception_handler(RequestValidationError)
    async def _invalid(_request, _exc: RequestValidationError):
        return JSONResponse(GatewayError(400, "bad_request", "request body must be a JSON object").to_dict(),
                            status_code=400)

    return app


def serve(config: GatewayConfig) -> None:
    """Run the HTTP service until interrupted. Uvicorn drains in-flight requests on shutdown."""
    import uvicorn

    gateway = Gateway.from_config(config)
    log.info("detector %s fingerprint %s", config.detector_architecture, gateway.startup_fingerprint)
    app = create_app(gateway)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
    final = gateway.fingerprint()
    log.info("shutdown; detector fingerprint %s (%s)", final,
             "unchanged" if final == gateway.startup_fingerprint else "CHANGED")
