"""HTTP retrieval service.

Endpoints:

* ``POST /search``  composed query. JSON body with ``reference_id``, or
  multipart form with an ``image_upload`` file; exactly one of the two.
  ``modification`` is required and non-empty, ``top_k`` defaults to 20.
  Responds with ranked results (id, score, image_url), an echo of the parsed
  query, and the handler time in milliseconds. The id ordering is the same
  as the CLI search verb produces for the same index and checkpoint.
* ``GET /images/{image_id}``  serves corpus images by id.
* ``GET /health``  index size, backbone name, and a config fingerprint; 503
  until the service state is loaded.

Uploaded references are encoded on the fly and never added to the index.
"""

from __future__ import annotations

import hashlib
import io
import mimetypes
import time
from dataclasses import dataclass

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse
from PIL import Image

from . import config as configmod
from . import retrieval
from .backbone import Backbone
from .errors import DataError, FticirError, InputError
from .inversion import FilterConfig, InversionNetwork
from .training import TrainConfig, load_inversion_runtime

DEFAULT_TOP_K = 20


def config_fingerprint(cfg: dict[str, str]) -> str:
    digest = hashlib.sha256()
    for key in sorted(cfg):
        digest.update(f"{key}={cfg[key]}\n".encode("utf-8"))
    return digest.hexdigest()[:16]


@dataclass
class ServiceState:
    """Everything a request handler needs, loaded once at startup."""

    index: retrieval.RetrievalIndex
    images: retrieval.ImageStore
    backbone: Backbone
    network: InversionNetwork
    filter_cfg: FilterConfig
    ablations: frozenset[str]
    max_upload_bytes: int
    config_hash: str
    cors_origins: list[str]

    @classmethod
    def load(
        cls,
        cfg: dict[str, str],
        index_path: str,
        image_dir: str,
        backbone: Backbone | None = None,
        network: InversionNetwork | None = None,
        checkpoint_path: str | None = None,
    ) -> "ServiceState":
        if backbone is None or network is None:
            if checkpoint_path is None:
                raise InputError("ServiceState.load needs a checkpoint or runtime")
            backbone, network, payload = load_inversion_runtime(checkpoint_path)
            # The checkpoint remembers how it was trained; explicit service
            # config still wins key by key.
            merged = dict(payload.flat_config)
            merged.update(cfg)
            cfg = merged
        train_cfg = TrainConfig.from_flat(cfg)
        filter_cfg = train_cfg.effective_filter(network.config.n_attrs)
        origins = configmod.get_str_list(cfg, "service.cors_origins") or ["*"]
        return cls(
            index=retrieval.RetrievalIndex.load(index_path),
            images=retrieval.ImageStore(image_dir),
            backbone=backbone,
            network=network,
            filter_cfg=filter_cfg,
            ablations=train_cfg.ablations,
            max_upload_bytes=configmod.get_int(cfg, "service.max_upload_mb") * 1024 * 1024,
            config_hash=config_fingerprint(cfg),
            cors_origins=origins,
        )


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


async def _parse_search_request(request: Request, state: ServiceState):
    """Extract (reference_path_or_image, reference_id, modification, top_k)."""
    content_type = request.headers.get("content-type", "")
    reference_id = None
    upload_bytes = None
    if content_type.startswith("application/json"):
        try:
            body = await request.json()
        except Exception as exc:
            raise _SearchError(400, f"malformed JSON body: {exc}") from exc
        if not isinstance(body, dict):
            raise _SearchError(400, "request body must be a JSON object")
        reference_id = body.get("reference_id")
        modification = body.get("modification", "")
        top_k = body.get("top_k", DEFAULT_TOP_K)
    elif content_type.startswith("multipart/form-data"):
        form = await request.form()
        upload = form.get("image_upload")
        if upload is not None and hasattr(upload, "read"):
            upload_bytes = await upload.read()
        reference_id = form.get("reference_id")
        modification = form.get("modification", "")
        top_k = form.get("top_k", DEFAULT_TOP_K)
    else:
        raise _SearchError(
            400, "send application/json or multipart/form-data"
        )
    if isinstance(reference_id, str) and not reference_id.strip():
        reference_id = None
    if reference_id is not None and upload_bytes is not None:
        raise _SearchError(
            400, "give exactly one of reference_id and image_upload, not both"
        )
    if reference_id is None and upload_bytes is None:
        raise _SearchError(400, "one of reference_id or image_upload is required")
    if not isinstance(modification, str) or not modification.strip():
        raise _SearchError(400, "modification must be a non-empty string")
    try:
        top_k = int(top_k)
    except (TypeError, ValueError):
        raise _SearchError(400, f"top_k must be an integer, got {top_k!r}")
    if top_k < 1:
        raise _SearchError(400, "top_k must be >= 1")

    if upload_bytes is not None:
        if len(upload_bytes) > state.max_upload_bytes:
            raise _SearchError(
                413,
                f"upload of {len(upload_bytes)} bytes exceeds the "
                f"{state.max_upload_bytes} byte limit",
            )
        try:
            reference = Image.open(io.BytesIO(upload_bytes))
            reference.load()
        except Exception as exc:
            raise _SearchError(400, f"cannot decode uploaded image: {exc}") from exc
    else:
        reference_id = str(reference_id)
        if reference_id not in state.images:
            raise _SearchError(404, f"reference id {reference_id!r} not found")
        reference = state.images.path(reference_id)
    return reference, reference_id, modification, top_k


class _SearchError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


def create_app(state: ServiceState | None) -> FastAPI:
    """Build the FastAPI app; a None state serves 503 until replaced."""
    app = FastAPI(title="fticir retrieval service")
    app.state.service = state
    origins = state.cors_origins if state is not None else ["*"]
    app.add_middleware(
        CORSMiddleware, allow_origins=origins, allow_methods=["*"],
        allow_headers=["*"],
    )

    def current_state() -> ServiceState | None:
        return app.state.service

    @app.get("/health")
    async def health():
        st = current_state()
        if st is None:
            return _error(503, "service is initializing")
        return {
            "status": "ok",
            "index_size": len(st.index),
            "backbone": st.index.backbone_name,
            "config_hash": st.config_hash,
        }

    @app.get("/images/{image_id}")
    async def get_image(image_id: str):
        st = current_state()
        if st is None:
            return _error(503, "service is initializing")
        if image_id not in st.images:
            return _error(404, f"image id {image_id!r} not found")
        path = st.images.path(image_id)
        media_type = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        return FileResponse(path, media_type=media_type)

    @app.post("/search")
    async def post_search(request: Request):
        st = current_state()
        if st is None:
            return _error(503, "service is initializing")
        started = time.perf_counter()
        try:
            reference, reference_id, modification, top_k = (
                await _parse_search_request(request, st)
            )
        except _SearchError as exc:
            return _error(exc.status, exc.message)
        try:
            results = retrieval.search(
                st.index, st.network, st.backbone, reference, modification,
                st.filter_cfg, top_k=top_k, ablations=st.ablations,
            )
        except (InputError, DataError) as exc:
            return _error(400, str(exc))
        except FticirError as exc:
            return _error(500, str(exc))
        timing_ms = (time.perf_counter() - started) * 1000.0
        return {
            "results": [
                {
                    "id": r.image_id,
                    "score": round(r.score, 6),
                    "image_url": f"/images/{r.image_id}",
                }
                for r in results
            ],
            "query_echo": {
                "reference_id": reference_id,
                "modification": modification,
                "top_k": top_k,
                "uploaded": reference_id is None,
            },
            "timing_ms": round(timing_ms, 3),
        }

    return app
