"""PNG encode/decode for images in [-1, 1], channel-first layout."""

from __future__ import annotations

import io

import numpy as np

from .errors import DimensionError


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255 by (x+1)*127.5 with round-half-even."""
    if x.ndim != 3 or x.shape[0] != 3:
        raise DimensionError(f"expected (3, H, W), got {x.shape}")
    scaled = (np.asarray(x, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def encode(x: np.ndarray) -> bytes:
    """(3, H, W) in [-1, 1] -> PNG bytes.  Deterministic for equal input."""
    from PIL import Image

    u8 = to_uint8(x).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return buf.getvalue()


def save(x: np.ndarray, path: str) -> None:
    with open(path, "wb") as f:
        f.write(encode(x))


def load(source) -> np.ndarray:
    """PNG path or bytes -> (3, H, W) float32 in [-1, 1]."""
    from PIL import Image

    if isinstance(source, (bytes, bytearray)):
        im = Image.open(io.BytesIO(source))
    else:
        im = Image.open(source)
    with im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return (arr.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)
