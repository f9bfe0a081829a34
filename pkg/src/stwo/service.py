"""HTTP service for browsing a trained generator: seeds in, PNG bytes out.

Latents are always derived server-side from integer seeds, so every request
is reproducible and responses are byte-exact functions of their inputs.
"""

from __future__ import annotations

import base64
import hashlib

import numpy as np
from pydantic import BaseModel

from . import autodiff as ad
from . import pngio
from .errors import ContractError, StwoError
from .metrics import EditRequest, edit_latent, sample_orthonormal_direction
from .training import load_checkpoint


def latent_from_seed(seed: int, z_dim: int) -> np.ndarray:
    return np.random.default_rng(int(seed)).standard_normal(z_dim)


class ModelHandle:
    """A generator frozen for inference, shared by the CLI and the service."""

    def __init__(self, G, config_id: str):
        self.G = G
        self.config_id = config_id
        self._dir_cache: dict = {}

    @classmethod
    def from_checkpoint(cls, path: str, use_ema: bool = True) -> "ModelHandle":
        state = load_checkpoint(path)
        if use_ema and state.ema is not None:
            for p in state.G.params:
                p.data = state.ema[p.name].copy()
        return cls(state.G, state.cfg.config_id)

    @property
    def is_split(self) -> bool:
        return self.G.cfg.arch == "stia"

    # -- latent plumbing ---------------------------------------------------

    def w_from_seed(self, seed: int, which: int) -> np.ndarray:
        z = latent_from_seed(seed, self.G.cfg.z_dim)
        with ad.no_grad():
            return self.G.map_latent(z, which).data[0].astype(np.float64)

    def w1_id(self, seed1: int) -> str:
        w1 = self.w_from_seed(seed1, 1)
        return hashlib.sha256(w1.tobytes()).hexdigest()[:16]

    def direction(self, seed1: int, dir_seed: int) -> np.ndarray:
        w1 = self.w_from_seed(seed1, 1)
        key = (hashlib.sha256(w1.tobytes()).hexdigest(), int(dir_seed))
        v = self._dir_cache.get(key)
        if v is None:
            v = sample_orthonormal_direction(w1, dir_seed)
            self._dir_cache[key] = v
        return v

    def direction_seeds(self, seed1: int, count: int) -> list:
        # deterministic family for one w1; warms the cache
        seeds = [int(seed1) * 1000 + i for i in range(count)]
        for s in seeds:
            self.direction(seed1, s)
        return seeds

    # -- rendering ---------------------------------------------------------

    def _forward(self, w1: np.ndarray, seed2: int):
        with ad.no_grad():
            if self.is_split:
                w2 = self.w_from_seed(seed2, 2)
                return self.G.forward(w1, w2)
            return self.G.forward(w1)

    def render_png(self, seed1: int, seed2: int = 0) -> bytes:
        w1 = self.w_from_seed(seed1, 1)
        pyr = self._forward(w1, seed2)
        return pngio.encode(pyr.rgb[self.G.cfg.n].data[0])

    def edit_png(self, seed1: int, seed2: int, dir_seed: int,
                 alpha: float) -> tuple:
        w1 = self.w_from_seed(seed1, 1)
        v = self.direction(seed1, dir_seed)
        moved = edit_latent(EditRequest(w1=w1, direction=v, alpha=alpha))
        pyr = self._forward(moved, seed2)
        png = pngio.encode(pyr.rgb[self.G.cfg.n].data[0])
        return png, float(np.linalg.norm(moved - w1))

    def texture_pngs(self, seed1: int) -> dict:
        if not self.is_split:
            raise ContractError(
                "texture levels exist only for the split architecture")
        w1 = self.w_from_seed(seed1, 1)
        pyr = self._forward(w1, 0)       # texture ignores the second latent
        return {str(2 ** res): pngio.encode(np.asarray(t.data[0]))
                for res, t in sorted(pyr.texture.items())}


# ---------------------------------------------------------------------------
# FastAPI wiring

class GenerateBody(BaseModel):
    seed1: int
    seed2: int = 0


class EditBody(BaseModel):
    seed1: int
    seed2: int = 0
    dir_seed: int
    alpha: float


class InfoResponse(BaseModel):
    resolutions: list[int]
    r: int
    n: int
    w_dim: int
    config_id: str


class GenerateResponse(BaseModel):
    png_base64: str
    w1_id: str


class EditResponse(BaseModel):
    png_base64: str
    delta_norm: float


class DirectionsResponse(BaseModel):
    dir_seeds: list[int]


class TextureResponse(BaseModel):
    levels: dict[str, str]


def create_app(handle: ModelHandle):
    from fastapi import FastAPI, Query, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import JSONResponse

    app = FastAPI(title="stwo service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(StwoError)
    async def _domain_error(request: Request, exc: StwoError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.get("/api/info", response_model=InfoResponse)
    def info():
        cfg = handle.G.cfg
        return InfoResponse(
            resolutions=[2 ** res for res in range(3, cfg.n + 1)],
            r=cfg.r, n=cfg.n, w_dim=cfg.w_dim, config_id=handle.config_id)

    @app.post("/api/generate", response_model=GenerateResponse)
    def generate(body: GenerateBody):
        png = handle.render_png(body.seed1, body.seed2)
        return GenerateResponse(
            png_base64=base64.b64encode(png).decode("ascii"),
            w1_id=handle.w1_id(body.seed1))

    @app.post("/api/edit", response_model=EditResponse)
    def edit(body: EditBody):
        png, delta = handle.edit_png(body.seed1, body.seed2,
                                     body.dir_seed, body.alpha)
        return EditResponse(png_base64=base64.b64encode(png).decode("ascii"),
                            delta_norm=delta)

    @app.get("/api/directions", response_model=DirectionsResponse)
    def directions(seed1: int = Query(...), count: int = Query(6, ge=1, le=64)):
        return DirectionsResponse(
            dir_seeds=handle.direction_seeds(seed1, count))

    @app.get("/api/texture", response_model=TextureResponse)
    def texture(seed1: int = Query(...)):
        pngs = handle.texture_pngs(seed1)
        return TextureResponse(levels={
            k: base64.b64encode(v).decode("ascii") for k, v in pngs.items()})

    return app


def serve(checkpoint_path: str, host: str = "127.0.0.1",
          port: int = 8000) -> None:
    import uvicorn

    handle = ModelHandle.from_checkpoint(checkpoint_path)
    uvicorn.run(create_app(handle), host=host, port=port, log_level="warning")
