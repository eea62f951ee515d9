"""Session-oriented HTTP JSON API for the browser studio.

Endpoints
---------
POST /session                    PNG body -> {"id": ...}           (201)
POST /session/{id}/fit           {"roi":[x,y,w,h],"sigma":5.0}     (200)
POST /session/{id}/preview       {"roi":[...],"alpha":{...}}      -> PNG
POST /session/{id}/export        {"roi":[...],"schedule":[...]}   -> zip
GET  /healthz

Sessions are in-memory with TTL eviction; the uploaded image is immutable
for the session lifetime and fits are cached per (roi, sigma), so slider
previews replay only gain application and recomposition.  All rendering
goes through the same core as the CLI, so responses are byte-identical to
CLI artifacts for the same inputs.  Errors use
``{"error": {"code", "message"}}``.
"""

from __future__ import annotations

import io
import threading
import time
import uuid
import zipfile
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

from . import jsonutil
from .errors import PipelineError, RoiBoundsError
from .pixelcore import RgbImage8, Roi, decode_png, encode_png
from .retouch import (
    FitCache,
    GainSchedule,
    GainVector,
    PipelineConfig,
    apply_to_image,
    cache_key,
    prepare_roi,
    simulate_fading,
)

MAX_UPLOAD_BYTES = 32 * 1024 * 1024
SESSION_TTL_SECONDS = 30 * 60
PREVIEW_CONTEXT_PX = 16


@dataclass
class RetouchSession:
    id: str
    image: RgbImage8
    cache: FitCache = dataclass_field(default_factory=FitCache)
    fitted_keys: set = dataclass_field(default_factory=set)
    last_access: float = dataclass_field(default_factory=time.monotonic)


class SessionStore:
    def __init__(self, ttl_seconds: float = SESSION_TTL_SECONDS):
        self._ttl = ttl_seconds
        self._lock = threading.Lock()
        self._sessions: dict[str, RetouchSession] = {}

    def create(self, image: RgbImage8) -> RetouchSession:
        session = RetouchSession(id=uuid.uuid4().hex, image=image)
        with self._lock:
            self._evict_locked()
            self._sessions[session.id] = session
        return session

    def get(self, session_id: str) -> RetouchSession:
        with self._lock:
            self._evict_locked()
            session = self._sessions.get(session_id)
            if session is None:
                raise HTTPException(status_code=404, detail="unknown session")
            session.last_access = time.monotonic()
            return session

    def _evict_locked(self) -> None:
        cutoff = time.monotonic() - self._ttl
        for sid in [s for s, sess in self._sessions.items() if sess.last_access < cutoff]:
            del self._sessions[sid]


class FitBody(BaseModel):
    roi: list[int] = Field(min_length=4, max_length=4)
    sigma: float | None = None


class AlphaBody(BaseModel):
    h: float = 0.0
    m: float = 0.0
    r: float = 0.0


class PreviewBody(BaseModel):
    roi: list[int] = Field(min_length=4, max_length=4)
    alpha: AlphaBody = AlphaBody()
    sigma: float | None = None


class ExportBody(BaseModel):
    roi: list[int] = Field(min_length=4, max_length=4)
    schedule: list[AlphaBody]
    sigma: float | None = None


def create_app(
    config: PipelineConfig | None = None,
    ttl_seconds: float = SESSION_TTL_SECONDS,
    static_dir: str | Path | None = None,
) -> FastAPI:
    base_config = config or PipelineConfig()
    store = SessionStore(ttl_seconds)
    app = FastAPI(title="skinchroma studio")

    @app.exception_handler(HTTPException)
    async def http_error(_req: Request, exc: HTTPException):
        return JSONResponse(
            status_code=exc.status_code,
            content={"error": {"code": str(exc.status_code), "message": str(exc.detail)}},
        )

    @app.exception_handler(RequestValidationError)
    async def validation_error(_req: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=422,
            content={"error": {"code": "422", "message": str(exc.errors())}},
        )

    def session_config(body) -> PipelineConfig:
        if getattr(body, "sigma", None) is not None:
            if body.sigma <= 0:
                raise HTTPException(status_code=422, detail="sigma must be positive")
            from dataclasses import replace

            return replace(base_config, sigma=body.sigma)
        return base_config

    def parse_roi(values: list[int], image: RgbImage8) -> Roi:
        try:
            roi = Roi(*[int(v) for v in values])
            roi.validate_in(image.width, image.height)
        except (RoiBoundsError, ValueError) as err:
            raise HTTPException(status_code=422, detail=f"invalid roi: {err}") from err
        return roi

    @app.post("/session", status_code=201)
    async def create_session(request: Request):
        body = await request.body()
        if len(body) > MAX_UPLOAD_BYTES:
            raise HTTPException(status_code=413, detail=f"image exceeds {MAX_UPLOAD_BYTES} bytes")
        try:
            image = decode_png(body)
        except Exception as err:
            raise HTTPException(status_code=400, detail=f"not a decodable image: {err}") from err
        session = store.create(image)
        return {"id": session.id}

    @app.post("/session/{session_id}/fit")
    async def fit_roi(session_id: str, body: FitBody):
        session = store.get(session_id)
        cfg = session_config(body)
        roi = parse_roi(body.roi, session.image)
        key = cache_key(session.image, roi, cfg)
        was_known = key in session.fitted_keys
        try:
            prepared, from_cache = prepare_roi(session.image, roi, cfg, session.cache)
        except PipelineError as err:
            raise HTTPException(status_code=422, detail=str(err)) from err
        session.fitted_keys.add(key)
        return {
            "sigma": prepared.sigma,
            "cached": bool(was_known and from_cache),
            "channels": {
                k: {"n": ch.n, "rms": ch.rms, "converged": ch.converged, "iterations": ch.iterations}
                for k, ch in prepared.fit.channels.items()
            },
        }

    @app.post("/session/{session_id}/preview")
    async def preview(session_id: str, body: PreviewBody):
        session = store.get(session_id)
        cfg = session_config(body)
        roi = parse_roi(body.roi, session.image)
        key = cache_key(session.image, roi, cfg)
        if key not in session.fitted_keys:
            raise HTTPException(status_code=409, detail="roi not fitted yet; call fit first")
        prepared, _ = prepare_roi(session.image, roi, cfg, session.cache)
        gains = GainVector(alpha_h=body.alpha.h, alpha_m=body.alpha.m, alpha_r=body.alpha.r)
        out, _clamps = apply_to_image(session.image, prepared, gains, cfg.feather)
        context = roi.expanded(PREVIEW_CONTEXT_PX, session.image.width, session.image.height)
        return Response(content=encode_png(out.crop(context)), media_type="image/png")

    @app.post("/session/{session_id}/export")
    async def export(session_id: str, body: ExportBody):
        session = store.get(session_id)
        cfg = session_config(body)
        roi = parse_roi(body.roi, session.image)
        if not body.schedule:
            raise HTTPException(status_code=422, detail="schedule must be non-empty")
        if cache_key(session.image, roi, cfg) not in session.fitted_keys:
            raise HTTPException(status_code=409, detail="roi not fitted yet; call fit first")
        schedule = GainSchedule(
            tuple(GainVector(alpha_h=a.h, alpha_m=a.m, alpha_r=a.r) for a in body.schedule)
        )
        results = simulate_fading(session.image, roi, schedule, cfg, session.cache)
        report = {
            "schema": 1,
            "roi": [roi.x, roi.y, roi.w, roi.h],
            "sigma": cfg.resolved_sigma(roi),
            "frames": [
                {
                    "label": r.label,
                    "file": f"frame_{i:03d}.png",
                    "gains": r.gains.as_dict(),
                    "contrast_after": r.contrast_after.as_dict(),
                }
                for i, r in enumerate(results)
            ],
            "contrast_before": results[0].contrast_before.as_dict(),
        }
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for i, r in enumerate(results):
                zf.writestr(_zip_entry(f"frame_{i:03d}.png"), encode_png(r.output))
            zf.writestr(_zip_entry("report.json"), jsonutil.dumps(report) + "\n")
        return Response(content=buf.getvalue(), media_type="application/zip")

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    static = Path(static_dir) if static_dir else _default_static_dir()
    if static is not None and static.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static), html=True), name="studio")
    return app


def _zip_entry(name: str) -> zipfile.ZipInfo:
    # Fixed timestamp keeps archives byte-identical across runs.
    return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))


def _default_static_dir() -> Path | None:
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return candidate if candidate.is_dir() else None


def main(argv=None) -> int:
    import argparse

    import uvicorn

    parser = argparse.ArgumentParser(prog="skinchroma-studio")
    parser.add_argument("--addr", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8435)
    parser.add_argument("--mixing-matrix", dest="mixing_matrix", default=None)
    parser.add_argument("--static-dir", dest="static_dir", default=None)
    args = parser.parse_args(argv)
    config = PipelineConfig()
    if args.mixing_matrix:
        from dataclasses import replace

        from .chromophore import MixingMatrix

        config = replace(config, matrix=MixingMatrix.load(args.mixing_matrix))
    uvicorn.run(create_app(config, static_dir=args.static_dir), host=args.addr, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
