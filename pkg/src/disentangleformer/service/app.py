"""FastAPI app exposing the operation handlers over HTTP."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import DisentangleError
from . import handlers, schemas


def create_app() -> FastAPI:
    app = FastAPI(title="disentangleformer", version=__version__)

    @app.exception_handler(DisentangleError)
    async def package_error(request: Request, exc: DisentangleError):
        return JSONResponse(
            status_code=400,
            content={"detail": f"{type(exc).__name__}: {exc}"},
        )

    @app.exception_handler(OSError)
    async def os_error(request: Request, exc: OSError):
        return JSONResponse(
            status_code=400,
            content={"detail": f"{type(exc).__name__}: {exc}"},
        )

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        return handlers.synth(req)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        return handlers.train(req)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest):
        return handlers.evaluate_checkpoint(req)

    @app.post("/ablate", response_model=schemas.AblateResponse)
    def ablate(req: schemas.AblateRequest):
        return handlers.ablate(req)

    @app.post("/cca", response_model=schemas.CcaResponse)
    def cca(req: schemas.CcaRequest):
        return handlers.cca(req)

    @app.post("/profile", response_model=schemas.ProfileResponse)
    def profile(req: schemas.ProfileRequest):
        return handlers.profile(req)

    return app


app = create_app()
