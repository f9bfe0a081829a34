"""Structure-texture decomposition and real-image pyramids.

The decomposition minimizes a data term plus a relative-total-variation
smoothness term. Each reweighting round recomputes penalty weights from the
current structure estimate (window-blurred directional gradients times a
pointwise sharpness term) and then solves a five-band linear system by
conjugate gradients, one channel at a time. The texture component is the
exact residual, so structure + texture reconstructs the input to rounding.

Real pyramids for the discriminator are built here as well: RGB levels by
repeated 2x2 average downsampling, texture levels by decomposing once at the
coarse boundary resolution and downsampling the residual.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import Tensor, down_avg_2x, no_grad
from .errors import ConfigError, ContractError, DimensionError, NumericError

# lower clamp for the window-blurred directional terms; the pointwise
# sharpness clamp is the configurable sharpness_eps
_DIRECTIONAL_GUARD = 1e-3


@dataclasses.dataclass
class DecompositionParams:
    lam: float = 0.01
    sigma: float = 3.0
    sharpness_eps: float = 0.02
    max_iter: int = 4
    cg_tol: float = 1e-5
    cg_max_iter: int = 200

    def __post_init__(self):
        if (self.lam < 0 or self.sigma <= 0 or self.sharpness_eps <= 0
                or self.cg_tol <= 0 or self.cg_max_iter < 1):
            raise ConfigError("decomposition parameters must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")


class SparseSystem:
    """Symmetric five-band matrix over an H x W pixel grid, plus rhs.

    Bands: main diagonal, east/west neighbor couplings (stored once as
    ``east``) and south/north couplings (stored once as ``south``), all as
    H x W arrays. east[:, -1] and south[-1, :] are structurally zero.
    """

    def __init__(self, diag: np.ndarray, east: np.ndarray,
                 south: np.ndarray, rhs: np.ndarray):
        if not (diag.shape == east.shape == south.shape == rhs.shape):
            raise DimensionError("sparse system bands must share one shape")
        if diag.ndim != 2:
            raise DimensionError("sparse system is defined over a 2-D grid")
        if np.any(diag <= 0):
            raise ContractError("sparse system diagonal must be positive")
        if np.any(east[:, -1] != 0) or np.any(south[-1, :] != 0):
            raise ContractError("boundary couplings must be zero")
        self.diag = diag
        self.east = east
        self.south = south
        self.rhs = rhs
        self.shape = diag.shape

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.diag * x
        e = self.east[:, :-1]
        y[:, :-1] += e * x[:, 1:]
        y[:, 1:] += e * x[:, :-1]
        s = self.south[:-1, :]
        y[:-1, :] += s * x[1:, :]
        y[1:, :] += s * x[:-1, :]
        return y

    def to_dense(self) -> np.ndarray:
        h, w = self.shape
        n = h * w
        A = np.zeros((n, n))
        A[np.arange(n), np.arange(n)] = self.diag.reshape(-1)
        for y in range(h):
            for x in range(w - 1):
                i = y * w + x
                A[i, i + 1] = self.east[y, x]
                A[i + 1, i] = self.east[y, x]
        for y in range(h - 1):
            for x in range(w):
                i = y * w + x
                A[i, i + w] = self.south[y, x]
                A[i + w, i] = self.south[y, x]
        return A


def cg_solve(system: SparseSystem, x0: np.ndarray, tol: float,
             max_iter: int) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients.

    The reweighted systems have diagonals spanning several orders of
    magnitude, so plain CG stalls; diagonal scaling restores fast
    convergence. Stops when the true residual norm drops below
    tol * ||rhs||.
    """
    b = system.rhs
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    x = x0.copy()
    r = b - system.matvec(x)
    if np.linalg.norm(r) <= tol * bnorm:
        return x
    z = r / system.diag
    p = z.copy()
    rz = float(np.sum(r * z))
    for _ in range(max_iter):
        Ap = system.matvec(p)
        alpha = rz / float(np.sum(p * Ap))
        x = x + alpha * p
        r = r - alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        z = r / system.diag
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NumericError(
        f"conjugate gradients stalled at residual {np.linalg.norm(r):.3e} "
        f"(target {tol * bnorm:.3e}) after {max_iter} iterations")


def _forward_diffs(x: np.ndarray):
    """Per-channel forward differences, zero on the far boundary."""
    fx = np.zeros_like(x)
    fy = np.zeros_like(x)
    fx[:, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    fy[:, :-1, :] = x[:, 1:, :] - x[:, :-1, :]
    return fx, fy


def _penalty_weights(est: np.ndarray, params: DecompositionParams):
    """Smoothness weights from the current structure estimate.

    Pointwise term: inverse gradient magnitude (mean over channels), clamped
    by sharpness_eps. Directional terms: inverse blurred gradients, clamped
    by the inner guard. Their product is large in flat or texture regions
    and small across real structure edges.
    """
    c = est.shape[0]
    fx, fy = _forward_diffs(est)
    mag = np.sqrt(fx ** 2 + fy ** 2).sum(axis=0) / c
    wto = 1.0 / np.maximum(mag, params.sharpness_eps)

    blurred = np.stack([
        gaussian_filter(est[k], params.sigma, mode="nearest")
        for k in range(c)])
    gfx, gfy = _forward_diffs(blurred)
    wtbx = 1.0 / np.maximum(np.abs(gfx).sum(axis=0) / c, _DIRECTIONAL_GUARD)
    wtby = 1.0 / np.maximum(np.abs(gfy).sum(axis=0) / c, _DIRECTIONAL_GUARD)

    wx = wtbx * wto
    wy = wtby * wto
    wx[:, -1] = 0.0
    wy[-1, :] = 0.0
    return wx, wy


def build_system(wx: np.ndarray, wy: np.ndarray, lam: float,
                 rhs: np.ndarray) -> SparseSystem:
    """Assemble identity + lam * (Dx^T Wx Dx + Dy^T Wy Dy)."""
    diag = np.ones_like(rhs)
    diag += lam * wx
    diag[:, 1:] += lam * wx[:, :-1]
    diag += lam * wy
    diag[1:, :] += lam * wy[:-1, :]
    east = -lam * wx
    south = -lam * wy
    return SparseSystem(diag=diag, east=east, south=south, rhs=rhs)


def _as_channels(I: np.ndarray):
    if I.ndim == 2:
        return I[None, :, :], True
    if I.ndim == 3:
        return I, False
    raise DimensionError(f"expected (H, W) or (C, H, W), got {I.shape}")


def rtv_decompose(I: np.ndarray, params: DecompositionParams | None = None):
    """Split an image into (structure, texture) with texture = I - structure."""
    if params is None:
        params = DecompositionParams()
    arr, squeeze = _as_channels(np.asarray(I))
    c, h, w = arr.shape
    if h < 8 or w < 8:
        raise ContractError(f"image {h}x{w} too small to decompose")
    work = arr.astype(np.float64)
    est = work.copy()
    for _ in range(params.max_iter):
        wx, wy = _penalty_weights(est, params)
        nxt = np.empty_like(est)
        for k in range(c):
            system = build_system(wx, wy, params.lam, work[k])
            nxt[k] = cg_solve(system, est[k], params.cg_tol,
                              params.cg_max_iter)
        est = nxt
    structure = est.astype(arr.dtype, copy=False)
    texture = (arr - structure).astype(arr.dtype, copy=False)
    if squeeze:
        return structure[0], texture[0]
    return structure, texture


def blur_decompose(I: np.ndarray, sigma: float = 2.0):
    """Cheap stand-in: Gaussian-blur structure, residual texture."""
    arr, squeeze = _as_channels(np.asarray(I))
    structure = np.stack([
        gaussian_filter(arr[k].astype(np.float64), sigma, mode="nearest")
        for k in range(arr.shape[0])]).astype(arr.dtype, copy=False)
    texture = arr - structure
    if squeeze:
        return structure[0], texture[0]
    return structure, texture


# ---------------------------------------------------------------------------
# pyramids

@dataclasses.dataclass
class ImagePyramid:
    """RGB levels at res r+1..n and texture levels at res 3..r.

    Values are (b, 3, 2^res, 2^res) tensors; RGB in [-1, 1], texture a
    signed residual.
    """
    rgb: dict
    texture: dict
    n: int
    r: int

    def validate(self, arch: str = "stia") -> None:
        if not 3 <= self.r < self.n:
            raise ConfigError(f"need 3 <= r < n, got r={self.r} n={self.n}")
        if arch == "stia":
            want_rgb = set(range(self.r + 1, self.n + 1))
            want_tex = set(range(3, self.r + 1))
        elif arch == "msg_baseline":
            want_rgb = set(range(3, self.n + 1))
            want_tex = set()
        else:
            raise ConfigError(f"unknown arch {arch!r}")
        if set(self.rgb) != want_rgb:
            raise DimensionError(
                f"rgb levels {sorted(self.rgb)} != {sorted(want_rgb)}")
        if set(self.texture) != want_tex:
            raise DimensionError(
                f"texture levels {sorted(self.texture)} != {sorted(want_tex)}")
        bsz = None
        for res, t in list(self.rgb.items()) + list(self.texture.items()):
            want = (t.shape[0], 3, 2 ** res, 2 ** res)
            if t.shape != want:
                raise DimensionError(
                    f"level {res} has shape {t.shape}, want {want}")
            if bsz is None:
                bsz = t.shape[0]
            elif t.shape[0] != bsz:
                raise DimensionError("pyramid batch sizes differ")

    def batch_size(self) -> int:
        return self.rgb[self.n].shape[0]


def build_real_pyramid(images: np.ndarray, n: int, r: int,
                       params: DecompositionParams | None = None,
                       method: str = "rtv") -> ImagePyramid:
    """Pyramid of a real batch: downsampled RGB chain, then one decomposition
    at res r whose texture is downsampled further to res 3."""
    if n <= r:
        raise ConfigError(f"need n > r, got n={n} r={r}")
    if r < 3:
        raise ConfigError(f"need r >= 3, got r={r}")
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"expected (b, 3, H, W), got {images.shape}")
    side = 2 ** n
    if images.shape[2] != side or images.shape[3] != side:
        raise DimensionError(
            f"expected {side}x{side} input for n={n}, got {images.shape}")
    if method not in ("rtv", "blur"):
        raise ConfigError(f"unknown decomposition method {method!r}")

    with no_grad():
        rgb = {}
        level = Tensor(images)
        rgb[n] = level
        for res in range(n - 1, r - 1, -1):
            level = down_avg_2x(level)
            if res > r:
                rgb[res] = level
        base = level.data  # (b, 3, 2^r, 2^r)

        textures = np.empty_like(base)
        for b in range(base.shape[0]):
            if method == "rtv":
                _, tex = rtv_decompose(base[b], params)
            else:
                _, tex = blur_decompose(base[b])
            textures[b] = tex
        textures = np.clip(textures, -1.0, 1.0)

        texture = {}
        level = Tensor(textures)
        texture[r] = level
        for res in range(r - 1, 2, -1):
            level = down_avg_2x(level)
            texture[res] = level

    pyr = ImagePyramid(rgb=rgb, texture=texture, n=n, r=r)
    pyr.validate()
    return pyr


def build_msg_real_pyramid(images: np.ndarray, n: int, r: int) -> ImagePyramid:
    """Pyramid for the single-chain discriminator: RGB at every level 3..n,
    no decomposition."""
    if n <= r or r < 3:
        raise ConfigError(f"need 3 <= r < n, got n={n} r={r}")
    images = np.asarray(images)
    side = 2 ** n
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (side, side):
        raise DimensionError(
            f"expected (b, 3, {side}, {side}), got {images.shape}")
    with no_grad():
        rgb = {n: Tensor(images)}
        level = rgb[n]
        for res in range(n - 1, 2, -1):
            level = down_avg_2x(level)
            rgb[res] = level
    pyr = ImagePyramid(rgb=rgb, texture={}, n=n, r=r)
    pyr.validate(arch="msg_baseline")
    return pyr
