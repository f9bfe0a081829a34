"""Path-length metrics over latent interpolations and orthogonal-direction
editing of the coarse latent."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError

SPACES = ("w", "w1", "w2", "w1_orthogonal")


@dataclasses.dataclass
class PplConfig:
    epsilon: float = 1e-4
    num_paths: int = 64
    space: str = "w"
    distance: str = "pyramid_l2"
    seed: int = 0
    levels: int = 3

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.num_paths < 1:
            raise ConfigError(f"num_paths must be >= 1, got {self.num_paths}")
        if self.space not in SPACES:
            raise ConfigError(f"space must be one of {SPACES}, got {self.space!r}")
        if self.distance != "pyramid_l2":
            raise ConfigError(f"unknown distance {self.distance!r}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")


# ---------------------------------------------------------------------------
# primitives

def lerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"lerp: shape mismatch {a.shape} vs {b.shape}")
    return a + (b - a) * t


def _down2(x: np.ndarray) -> np.ndarray:
    return 0.25 * (x[..., ::2, ::2] + x[..., 1::2, ::2]
                   + x[..., ::2, 1::2] + x[..., 1::2, 1::2])


def pyramid_distance(a: np.ndarray, b: np.ndarray, levels: int = 3) -> float:
    """Sum over ``levels`` resolutions (each half the last, by 2x2 average)
    of the mean squared difference.  Symmetric, zero iff equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(
            f"pyramid_distance: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise DimensionError("pyramid_distance: images need 2 spatial axes")
    total = 0.0
    for lvl in range(levels):
        total += float(np.mean((a - b) ** 2))
        if lvl + 1 < levels:
            h, w = a.shape[-2:]
            if h % 2 or w % 2:
                raise DimensionError(
                    f"pyramid_distance: {h}x{w} not divisible for {levels} levels")
            a, b = _down2(a), _down2(b)
    return total


def sample_orthonormal_direction(w1: np.ndarray, seed: int) -> np.ndarray:
    """Gaussian direction, projected orthogonal to w1, normalized.
    Deterministic in ``seed``; re-seeds with seed+1 in the degenerate case."""
    w = np.asarray(w1, dtype=np.float64).ravel()
    n = float(np.linalg.norm(w))
    if n == 0.0:
        raise ContractError("sample_orthonormal_direction: w1 is zero")
    if w.size < 2:
        raise ContractError("sample_orthonormal_direction: need dimension >= 2")
    unit = w / n
    s = int(seed)
    while True:
        v = np.random.default_rng(s).standard_normal(w.size)
        v -= (v @ unit) * unit
        nv = float(np.linalg.norm(v))
        if nv > 1e-12:
            return v / nv
        s += 1


# ---------------------------------------------------------------------------
# latent editing

@dataclasses.dataclass
class EditRequest:
    w1: np.ndarray
    direction: np.ndarray
    alpha: float
    w2: np.ndarray | None = None

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64).ravel()
        self.direction = np.asarray(self.direction, dtype=np.float64).ravel()
        if self.w1.shape != self.direction.shape:
            raise ContractError(
                f"EditRequest: w1 {self.w1.shape} vs direction "
                f"{self.direction.shape}")
        dn = float(np.linalg.norm(self.direction))
        if abs(dn - 1.0) > 1e-9:
            raise ContractError(f"EditRequest: direction norm {dn} is not 1")
        wn = float(np.linalg.norm(self.w1))
        if abs(float(self.direction @ self.w1)) >= 1e-6 * wn * dn:
            raise ContractError("EditRequest: direction is not orthogonal to w1")


def edit_latent(req: EditRequest) -> np.ndarray:
    """Step the coarse latent along its orthogonal direction."""
    return req.w1 + req.alpha * req.direction


# ---------------------------------------------------------------------------
# path-length estimation

@dataclasses.dataclass
class PplResult:
    value: float
    std_error: float
    space: str
    epsilon: float
    num_paths: int

    def to_json_dict(self) -> dict:
        return {"space": self.space, "epsilon": self.epsilon,
                "num_paths": self.num_paths, "value": self.value,
                "std_error": self.std_error}


def ppl_paths(render, sample_path, cfg: PplConfig,
              t_mode: str = "uniform") -> PplResult:
    """Monte-Carlo scaled-difference estimate over independent paths.

    ``sample_path(rng) -> (wa, wb, extra)`` draws one path's endpoints plus
    whatever fixed context rendering needs; ``render(w, extra) -> image``.
    Per-path value is d(render(lerp(wa, wb, t)), render(lerp(wa, wb, t+eps)))
    / eps^2 with t ~ U(0,1), or t = 0 when ``t_mode`` is "zero".
    """
    if t_mode not in ("uniform", "zero"):
        raise ConfigError(f"unknown t_mode {t_mode!r}")
    rng = np.random.default_rng(cfg.seed)
    eps = cfg.epsilon
    vals = np.empty(cfg.num_paths, dtype=np.float64)
    with ad.no_grad():
        for k in range(cfg.num_paths):
            wa, wb, extra = sample_path(rng)
            t = float(rng.uniform()) if t_mode == "uniform" else 0.0
            x0 = render(lerp(wa, wb, t), extra)
            x1 = render(lerp(wa, wb, t + eps), extra)
            vals[k] = pyramid_distance(x0, x1, cfg.levels) / (eps * eps)
    value = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(cfg.num_paths)) \
        if cfg.num_paths > 1 else 0.0
    return PplResult(value=value, std_error=se, space=cfg.space,
                     epsilon=eps, num_paths=cfg.num_paths)


def _top_rgb(G, w1, w2=None) -> np.ndarray:
    pyr = G.forward(w1, w2)
    return pyr.rgb[G.cfg.n].data[0].astype(np.float64)


def _map(G, z: np.ndarray, which: int) -> np.ndarray:
    return G.map_latent(z, which).data[0].astype(np.float64)


def ppl_report(G, cfg: PplConfig) -> PplResult:
    """Path length of a generator in the configured latent space."""
    zd = G.cfg.z_dim
    stia = G.cfg.arch == "stia"
    if cfg.space == "w":
        if stia:
            raise ContractError(
                "space 'w' is for single-latent models; use w1/w2")

        def sample(rng):
            wa = _map(G, rng.standard_normal(zd), 1)
            wb = _map(G, rng.standard_normal(zd), 1)
            return wa, wb, None

        return ppl_paths(lambda w, _x: _top_rgb(G, w), sample, cfg)

    if not stia:
        raise ContractError(
            f"space {cfg.space!r} needs the split-latent architecture")

    if cfg.space == "w1":
        def sample(rng):
            wa = _map(G, rng.standard_normal(zd), 1)
            wb = _map(G, rng.standard_normal(zd), 1)
            w2 = _map(G, rng.standard_normal(zd), 2)
            return wa, wb, w2

        return ppl_paths(lambda w, w2: _top_rgb(G, w, w2), sample, cfg)

    if cfg.space == "w2":
        def sample(rng):
            w1 = _map(G, rng.standard_normal(zd), 1)
            wa = _map(G, rng.standard_normal(zd), 2)
            wb = _map(G, rng.standard_normal(zd), 2)
            return wa, wb, w1

        return ppl_paths(lambda w, w1: _top_rgb(G, w1, w), sample, cfg)

    # w1_orthogonal: unit orthogonal step from a single endpoint, t fixed at 0
    def sample(rng):
        w1 = _map(G, rng.standard_normal(zd), 1)
        w2 = _map(G, rng.standard_normal(zd), 2)
        dir_seed = int(rng.integers(0, 2 ** 31))
        v = sample_orthonormal_direction(w1, dir_seed)
        return w1, w1 + v, w2

    return ppl_paths(lambda w, w2: _top_rgb(G, w, w2), sample, cfg,
                     t_mode="zero")


def ppl(G, cfg: PplConfig) -> float:
    return ppl_report(G, cfg).value


def ppl_orthogonal(G, cfg: PplConfig) -> float:
    if cfg.space != "w1_orthogonal":
        cfg = dataclasses.replace(cfg, space="w1_orthogonal")
    return ppl_report(G, cfg).value
