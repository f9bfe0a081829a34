"""Training data: synthetic corpus, PNG folders, cached real pyramids."""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError
from .texdecomp import (DecompositionParams, ImagePyramid, build_msg_real_pyramid,
                        build_real_pyramid)


# ---------------------------------------------------------------------------
# synthetic corpus

def _ellipse_mask(side: int, cx, cy, a, b, theta):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    return u * u + v * v <= 1.0


def synthetic_corpus(count: int, n: int, seed: int) -> np.ndarray:
    """Colored ellipses on flat backgrounds with a sinusoidal texture overlay.

    Returns (count, 3, 2**n, 2**n) float32 in [-1, 1].  The ellipses carry the
    low-frequency structure, the overlay carries the texture, so the corpus
    exercises both halves of the structure / texture split.
    """
    if count < 1:
        raise ConfigError(f"synthetic_corpus: count must be >= 1, got {count}")
    if n < 3:
        raise ConfigError(f"synthetic_corpus: n must be >= 3, got {n}")
    rng = np.random.default_rng(seed)
    side = 2 ** n
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    imgs = np.empty((count, 3, side, side), dtype=np.float32)
    for k in range(count):
        img = np.empty((3, side, side), dtype=np.float64)
        img[:] = rng.uniform(-0.9, -0.1, size=3)[:, None, None]
        for _ in range(int(rng.integers(1, 4))):
            cx, cy = rng.uniform(0.2 * side, 0.8 * side, size=2)
            a, b = rng.uniform(0.12 * side, 0.38 * side, size=2)
            mask = _ellipse_mask(side, cx, cy, a, b, rng.uniform(0, np.pi))
            img[:, mask] = rng.uniform(-0.6, 0.9, size=3)[:, None]
        # fine sinusoid, period 3..8 px, shared across channels
        period = rng.uniform(3.0, 8.0)
        phi = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        fx, fy = np.cos(phi) / period, np.sin(phi) / period
        amp = rng.uniform(0.08, 0.2)
        img += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        imgs[k] = np.clip(img, -1.0, 1.0)
    return imgs


# ---------------------------------------------------------------------------
# PNG folders

def _center_crop_square(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return arr[top:top + s, left:left + s]


def load_png_image(path: str, n: int) -> np.ndarray:
    """One PNG -> (3, 2**n, 2**n) float32 in [-1, 1].

    Center-crops to a square, area-resamples to the nearest power of two at or
    above the target, then average-pools the rest of the way down.
    """
    from PIL import Image

    side = 2 ** n
    with Image.open(path) as im:
        im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32)
    arr = _center_crop_square(arr)
    s = arr.shape[0]
    if s < side:
        raise ContractError(
            f"load_png_image: {path} is {s} px after crop, need >= {side}")
    p = side
    while p * 2 <= s:
        p *= 2
    if p != s:
        im2 = Image.fromarray(arr.astype(np.uint8)).resize((p, p), Image.BOX)
        arr = np.asarray(im2, dtype=np.float32)
    x = arr.transpose(2, 0, 1) / 127.5 - 1.0
    while x.shape[-1] > side:
        x = (x[..., ::2, ::2] + x[..., 1::2, ::2]
             + x[..., ::2, 1::2] + x[..., 1::2, 1::2]) * 0.25
    return x.astype(np.float32)


def load_png_dir(path: str, n: int) -> np.ndarray:
    """All *.png under ``path`` (sorted by name) -> (N, 3, 2**n, 2**n)."""
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))
    if not names:
        raise ConfigError(f"load_png_dir: no .png files in {path!r}")
    return np.stack([load_png_image(os.path.join(path, f), n) for f in names])


def load_dataset(spec: str | None, n: int, seed: int,
                 synthetic_count: int = 16) -> np.ndarray:
    """Resolve a dataset field: None / "synthetic" -> built-in corpus,
    anything else -> directory of PNG files."""
    if spec is None or spec == "synthetic":
        return synthetic_corpus(synthetic_count, n, seed)
    return load_png_dir(spec, n)


# ---------------------------------------------------------------------------
# cached pyramids

class PyramidDataset:
    """Holds the full corpus with every pyramid level precomputed.

    The structure / texture decomposition runs once per image at build time;
    batches are then plain slices.
    """

    def __init__(self, images: np.ndarray, n: int, r: int, arch: str,
                 params: DecompositionParams | None = None,
                 method: str = "rtv"):
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(
                f"PyramidDataset: images must be (N, 3, H, W), got {images.shape}")
        if arch == "stia":
            pyr = build_real_pyramid(images, n, r, params=params, method=method)
        elif arch == "msg_baseline":
            pyr = build_msg_real_pyramid(images, n, r)
        else:
            raise ConfigError(f"PyramidDataset: unknown arch {arch!r}")
        self.n, self.r, self.arch = n, r, arch
        self.count = images.shape[0]
        self._rgb = {res: t.data for res, t in pyr.rgb.items()}
        self._texture = {res: t.data for res, t in pyr.texture.items()}

    def batch(self, indices: np.ndarray) -> ImagePyramid:
        idx = np.asarray(indices)
        if idx.ndim != 1 or idx.size == 0:
            raise ContractError("PyramidDataset.batch: need a 1-D index array")
        if idx.min() < 0 or idx.max() >= self.count:
            raise ContractError(
                f"PyramidDataset.batch: index out of range for {self.count} images")
        rgb = {res: ad.Tensor(a[idx]) for res, a in self._rgb.items()}
        tex = {res: ad.Tensor(a[idx]) for res, a in self._texture.items()}
        pyr = ImagePyramid(rgb=rgb, texture=tex, n=self.n, r=self.r)
        pyr.validate(self.arch)
        return pyr
