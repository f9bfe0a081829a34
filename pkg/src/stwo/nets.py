"""Generator and discriminators.

The split architecture keeps structure and texture independent: coarse
generator blocks (res 3..r) are styled only by w1 and each emits a texture
head; fine blocks (res r+1..n) are styled only by w2 and emit RGB heads.
The matching discriminator scores RGB and texture pyramids with two passes
that share the coarse blocks and the final head; shared blocks carry a
3-channel aux slot that a pass zero-fills when it has nothing to
concatenate there. A single-chain variant consuming RGB at every level
serves as the multi-scale baseline for ablations.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .optim import Parameter, check_unique_names
from .stylemod import AffineStyle, DecompLayer, DemodLayer
from .texdecomp import ImagePyramid

ARCHS = ("stia", "msg_baseline")
SCHEMES = ("demod", "decomp")
ORTHO_MODES = ("off", "coarse")


def default_channels(n: int) -> dict:
    """64 features up to res 4, halving each res above (floor 16 at res 6)."""
    return {res: min(64, 2 ** (10 - res)) for res in range(2, n + 1)}


@dataclasses.dataclass
class NetConfig:
    n: int = 6
    r: int = 4
    z_dim: int = 64
    w_dim: int = 64
    channels: dict | None = None
    arch: str = "stia"
    ortho_include_trgb: bool = True

    def __post_init__(self):
        if not 3 <= self.r < self.n:
            raise ConfigError(f"need 3 <= r < n, got r={self.r} n={self.n}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.z_dim < 1 or self.w_dim < 1:
            raise ConfigError("latent sizes must be positive")
        if self.channels is None:
            self.channels = default_channels(self.n)
        missing = [res for res in range(2, self.n + 1)
                   if res not in self.channels]
        if missing:
            raise ConfigError(f"channel schedule missing res {missing}")


@dataclasses.dataclass
class LatentPair:
    w1: Tensor
    w2: Tensor | None = None


def _as_latent_batch(w, w_dim: int, dtype) -> Tensor:
    if not isinstance(w, Tensor):
        w = Tensor(np.asarray(w, dtype=dtype))
    if w.data.ndim == 1:
        w = ad.reshape(w, (1, w.shape[0]))
    if w.data.ndim != 2 or w.shape[1] != w_dim:
        raise DimensionError(f"latent shape {w.shape} incompatible with "
                             f"w_dim {w_dim}")
    return w


# ---------------------------------------------------------------------------
# batched style-conditioned weights

def batched_style_weights(layer, S: Tensor) -> Tensor:
    """Per-sample kernels (b, o, i, h, w) from per-sample styles (b, i)."""
    o, i, h, w = layer.dims
    if S.data.ndim != 2 or S.shape[1] != i:
        raise DimensionError(f"styles {S.shape} incompatible with {i} "
                             "input channels")
    b = S.shape[0]
    if isinstance(layer, DecompLayer):
        out, inn = o, i * h * w
        Ub = ad.expand(ad.reshape(layer.U.tensor, (1, out, i)), (b, out, i))
        Sb = ad.expand(ad.reshape(S, (b, 1, i)), (b, out, i))
        Vt = ad.expand(
            ad.reshape(ad.permute(layer.V.tensor, (1, 0)), (1, i, inn)),
            (b, i, inn))
        mat = ad.bmm(ad.mul(Ub, Sb), Vt)
        return ad.reshape(mat, (b, o, i, h, w))
    if isinstance(layer, DemodLayer):
        shape = (b, o, i, h, w)
        Wb = ad.expand(ad.reshape(layer.W.tensor, (1, o, i, h, w)), shape)
        Sb = ad.expand(ad.reshape(S, (b, 1, i, 1, 1)), shape)
        Ws = ad.mul(Wb, Sb)
        ssq = ad.rsum(ad.square(Ws), (2, 3, 4), keepdims=True)
        sigma = ad.sqrt(ad.add_scalar(ssq, layer.eps))
        return ad.mul(Ws, ad.expand(ad.pow_const(sigma, -1.0), shape))
    raise ContractError(f"unknown layer type {type(layer).__name__}")


def styled_conv(x: Tensor, layer, affine: AffineStyle, w_lat: Tensor) -> Tensor:
    """Modulated convolution with one kernel per batch element."""
    _, _, h, _ = layer.dims
    S = affine(w_lat)
    weights = batched_style_weights(layer, S)
    return ad.conv2d_per_sample(x, weights, pad=(h - 1) // 2)


def _make_styled(scheme: str, name: str, o: int, i: int, h: int, w: int,
                 rng, ortho: bool, dtype):
    if scheme == "decomp":
        return DecompLayer(name, o, i, h, w, rng, ortho_regularized=ortho,
                           dtype=dtype)
    if scheme == "demod":
        return DemodLayer(name, o, i, h, w, rng, dtype=dtype)
    raise ConfigError(f"scheme must be one of {SCHEMES}, got {scheme!r}")


# ---------------------------------------------------------------------------
# generator

class _LinearMap:
    def __init__(self, name: str, z_dim: int, w_dim: int, rng, dtype):
        std = 1.0 / np.sqrt(z_dim)
        self.weight = Parameter(
            f"{name}.weight",
            (rng.standard_normal((z_dim, w_dim)) * std).astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(w_dim, dtype=dtype))

    @property
    def params(self):
        return [self.weight, self.bias]

    def __call__(self, z: Tensor) -> Tensor:
        b = z.shape[0]
        w_dim = self.weight.data.shape[1]
        out = ad.matmul(z, self.weight.tensor)
        bias = ad.expand(ad.reshape(self.bias.tensor, (1, w_dim)), (b, w_dim))
        return ad.add(out, bias)


class _GBlock:
    def __init__(self, name: str, res: int, c_in: int, c_out: int,
                 w_dim: int, scheme: str, rng, ortho: bool, dtype):
        self.res = res
        self.conv1 = _make_styled(scheme, f"{name}.conv1", c_out, c_in, 3, 3,
                                  rng, ortho, dtype)
        self.aff1 = AffineStyle(f"{name}.aff1", w_dim, c_in, rng, dtype)
        self.conv2 = _make_styled(scheme, f"{name}.conv2", c_out, c_out, 3, 3,
                                  rng, ortho, dtype)
        self.aff2 = AffineStyle(f"{name}.aff2", w_dim, c_out, rng, dtype)

    @property
    def params(self):
        return (self.conv1.params + self.aff1.params
                + self.conv2.params + self.aff2.params)

    def __call__(self, x: Tensor, w_lat: Tensor) -> Tensor:
        x = ad.up_nearest_2x(x)
        x = ad.leaky_relu(styled_conv(x, self.conv1, self.aff1, w_lat))
        x = ad.leaky_relu(styled_conv(x, self.conv2, self.aff2, w_lat))
        return x


class _Head:
    """1x1 modulated conv to 3 channels, tanh-bounded."""

    def __init__(self, name: str, c_in: int, w_dim: int, scheme: str, rng,
                 ortho: bool, dtype):
        self.conv = _make_styled(scheme, f"{name}.conv", 3, c_in, 1, 1,
                                 rng, ortho, dtype)
        self.aff = AffineStyle(f"{name}.aff", w_dim, c_in, rng, dtype)

    @property
    def params(self):
        return self.conv.params + self.aff.params

    def __call__(self, x: Tensor, w_lat: Tensor) -> Tensor:
        return ad.tanh(styled_conv(x, self.conv, self.aff, w_lat))


class Generator:
    """Coarse blocks styled by w1 with texture heads, fine blocks styled by
    w2 with RGB heads; the single-chain variant styles everything by w1 and
    emits RGB at every level."""

    def __init__(self, cfg: NetConfig, scheme: str, ortho: str, rng,
                 dtype=np.float64):
        if scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")
        if ortho not in ORTHO_MODES:
            raise ConfigError(f"ortho must be one of {ORTHO_MODES}")
        if ortho == "coarse" and scheme != "decomp":
            raise ConfigError("orthogonal regularization needs the "
                              "decomposition scheme")
        self.cfg = cfg
        self.scheme = scheme
        self.ortho = ortho
        self.dtype = dtype
        ch = cfg.channels
        self.const = Parameter(
            "g.const", rng.standard_normal((1, ch[2], 4, 4)).astype(dtype))
        self.map1 = _LinearMap("g.map1", cfg.z_dim, cfg.w_dim, rng, dtype)
        self.map2 = (None if cfg.arch == "msg_baseline"
                     else _LinearMap("g.map2", cfg.z_dim, cfg.w_dim, rng,
                                     dtype))
        self.blocks = {}
        self.heads = {}
        for res in range(3, cfg.n + 1):
            coarse = res <= cfg.r
            block_ortho = ortho == "coarse" and coarse
            head_ortho = block_ortho and cfg.ortho_include_trgb
            self.blocks[res] = _GBlock(
                f"g.block{res}", res, ch[res - 1], ch[res], cfg.w_dim,
                scheme, rng, block_ortho, dtype)
            self.heads[res] = _Head(
                f"g.head{res}", ch[res], cfg.w_dim, scheme, rng,
                head_ortho, dtype)
        check_unique_names(self.params)

    @property
    def params(self):
        out = [self.const] + self.map1.params
        if self.map2 is not None:
            out += self.map2.params
        for res in sorted(self.blocks):
            out += self.blocks[res].params + self.heads[res].params
        return out

    def ortho_layers(self):
        """Decomposition layers under the orthogonality regularizer."""
        out = []
        for res in sorted(self.blocks):
            for layer in (self.blocks[res].conv1, self.blocks[res].conv2,
                          self.heads[res].conv):
                if isinstance(layer, DecompLayer) and layer.ortho_regularized:
                    out.append(layer)
        return out

    def map_latent(self, z, which: int) -> Tensor:
        if which not in (1, 2):
            raise ContractError(f"latent index must be 1 or 2, got {which}")
        if which == 2 and self.map2 is None:
            raise ContractError("single-chain generator has no second "
                                "latent map")
        z = _as_latent_batch(z, self.cfg.z_dim, self.dtype)
        mapper = self.map1 if which == 1 else self.map2
        return mapper(ad.rms_normalize(z))

    def forward(self, w1, w2=None) -> ImagePyramid:
        cfg = self.cfg
        w1 = _as_latent_batch(w1, cfg.w_dim, self.dtype)
        if cfg.arch == "stia":
            if w2 is None:
                raise ContractError("split generator needs both latents")
            w2 = _as_latent_batch(w2, cfg.w_dim, self.dtype)
            if w2.shape[0] != w1.shape[0]:
                raise DimensionError("latent batch sizes differ")
        b = w1.shape[0]
        x = ad.expand(self.const.tensor, (b,) + self.const.data.shape[1:])
        rgb, texture = {}, {}
        for res in range(3, cfg.n + 1):
            coarse = res <= cfg.r
            lat = w1 if (cfg.arch == "msg_baseline" or coarse) else w2
            x = self.blocks[res](x, lat)
            head_out = self.heads[res](x, lat)
            if cfg.arch == "msg_baseline" or not coarse:
                rgb[res] = head_out
            else:
                texture[res] = head_out
        pyr = ImagePyramid(rgb=rgb, texture=texture, n=cfg.n, r=cfg.r)
        pyr.validate(arch=cfg.arch)
        return pyr


def generator_forward(G: Generator, pair: LatentPair) -> ImagePyramid:
    return G.forward(pair.w1, pair.w2)


def map_latent(G: Generator, z, which: int) -> Tensor:
    return G.map_latent(z, which)


# ---------------------------------------------------------------------------
# discriminators

class _PlainConv:
    def __init__(self, name: str, o: int, i: int, k: int, rng, dtype):
        std = 1.0 / np.sqrt(i * k * k)
        self.W = Parameter(
            f"{name}.W", (rng.standard_normal((o, i, k, k)) * std).astype(dtype))
        self.b = Parameter(f"{name}.b", np.zeros(o, dtype=dtype))
        self.k = k

    @property
    def params(self):
        return [self.W, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.W.tensor, pad=(self.k - 1) // 2)
        o = self.b.data.shape[0]
        bias = ad.expand(ad.reshape(self.b.tensor, (1, o, 1, 1)), y.shape)
        return ad.add(y, bias)


class _DBlock:
    """conv 3x3 -> lrelu -> conv 3x3 -> lrelu -> 2x2 average down."""

    def __init__(self, name: str, c_in: int, c_mid: int, c_out: int, rng,
                 dtype):
        self.conv1 = _PlainConv(f"{name}.conv1", c_mid, c_in, 3, rng, dtype)
        self.conv2 = _PlainConv(f"{name}.conv2", c_out, c_mid, 3, rng, dtype)

    @property
    def params(self):
        return self.conv1.params + self.conv2.params

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.leaky_relu(self.conv1(x))
        x = ad.leaky_relu(self.conv2(x))
        return ad.down_avg_2x(x)


class _FinalHead:
    """Flatten the 4x4 features and project to one score per sample."""

    def __init__(self, name: str, c_in: int, rng, dtype):
        feat = c_in * 4 * 4
        std = 1.0 / np.sqrt(feat)
        self.weight = Parameter(
            f"{name}.weight", (rng.standard_normal((feat, 1)) * std).astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(1, dtype=dtype))
        self.feat = feat

    @property
    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        flat = ad.reshape(x, (b, self.feat))
        out = ad.matmul(flat, self.weight.tensor)
        bias = ad.expand(ad.reshape(self.bias.tensor, (1, 1)), (b, 1))
        return ad.add(out, bias)


def _zeros_aux(like: Tensor) -> Tensor:
    b, _, h, w = like.shape
    return Tensor(np.zeros((b, 3, h, w), dtype=like.dtype))


class Discriminator:
    """Two scoring passes sharing the coarse blocks and the final head.

    The RGB pass enters at res n and concatenates real RGB down to res r+1;
    the texture pass enters at res r. Every block at res <= r carries a
    3-channel aux slot: the texture pass fills it with texture levels below
    its entry, and both passes zero-fill slots with no matching input.
    """

    def __init__(self, cfg: NetConfig, rng, dtype=np.float64):
        if cfg.arch != "stia":
            raise ConfigError("split discriminator requires the stia arch")
        self.cfg = cfg
        self.dtype = dtype
        ch = cfg.channels
        n, r = cfg.n, cfg.r
        self.frgb_rgb = _PlainConv("d.frgb_rgb", ch[n], 3, 1, rng, dtype)
        self.frgb_tex = _PlainConv("d.frgb_tex", ch[r], 3, 1, rng, dtype)
        self.blocks = {}
        for res in range(n, 2, -1):
            c_in = ch[res] if res == n else ch[res] + 3
            self.blocks[res] = _DBlock(f"d.block{res}", c_in, ch[res],
                                       ch[res - 1], rng, dtype)
        self.head = _FinalHead("d.head", ch[2], rng, dtype)
        check_unique_names(self.params)

    @property
    def params(self):
        out = self.frgb_rgb.params + self.frgb_tex.params
        for res in sorted(self.blocks, reverse=True):
            out += self.blocks[res].params
        return out + self.head.params

    def _rgb_pass(self, pyr: ImagePyramid) -> Tensor:
        cfg = self.cfg
        x = ad.leaky_relu(self.frgb_rgb(pyr.rgb[cfg.n]))
        for res in range(cfg.n, 2, -1):
            if res < cfg.n:
                aux = pyr.rgb[res] if res > cfg.r else _zeros_aux(x)
                x = ad.concat_channels([x, aux])
            x = self.blocks[res](x)
        return self.head(x)

    def _texture_pass(self, pyr: ImagePyramid) -> Tensor:
        cfg = self.cfg
        x = ad.leaky_relu(self.frgb_tex(pyr.texture[cfg.r]))
        for res in range(cfg.r, 2, -1):
            aux = _zeros_aux(x) if res == cfg.r else pyr.texture[res]
            x = ad.concat_channels([x, aux])
            x = self.blocks[res](x)
        return self.head(x)

    def forward(self, pyr: ImagePyramid):
        pyr.validate(arch="stia")
        if pyr.n != self.cfg.n or pyr.r != self.cfg.r:
            raise DimensionError(
                f"pyramid (n={pyr.n}, r={pyr.r}) does not match config "
                f"(n={self.cfg.n}, r={self.cfg.r})")
        d1 = self._rgb_pass(pyr)
        d2 = self._texture_pass(pyr)
        return ad.add(d1, d2), d1, d2


class MsgDiscriminator:
    """Single chain consuming RGB at every level 3..n."""

    def __init__(self, cfg: NetConfig, rng, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        ch = cfg.channels
        n = cfg.n
        self.frgb = _PlainConv("d.frgb", ch[n], 3, 1, rng, dtype)
        self.blocks = {}
        for res in range(n, 2, -1):
            c_in = ch[res] if res == n else ch[res] + 3
            self.blocks[res] = _DBlock(f"d.block{res}", c_in, ch[res],
                                       ch[res - 1], rng, dtype)
        self.head = _FinalHead("d.head", ch[2], rng, dtype)
        check_unique_names(self.params)

    @property
    def params(self):
        out = list(self.frgb.params)
        for res in sorted(self.blocks, reverse=True):
            out += self.blocks[res].params
        return out + self.head.params

    def forward(self, pyr: ImagePyramid) -> Tensor:
        pyr.validate(arch="msg_baseline")
        cfg = self.cfg
        x = ad.leaky_relu(self.frgb(pyr.rgb[cfg.n]))
        for res in range(cfg.n, 2, -1):
            if res < cfg.n:
                x = ad.concat_channels([x, pyr.rgb[res]])
            x = self.blocks[res](x)
        return self.head(x)


def discriminator_forward(D: Discriminator, pyr: ImagePyramid):
    return D.forward(pyr)


def msg_discriminator_forward(D: MsgDiscriminator, pyr: ImagePyramid) -> Tensor:
    return D.forward(pyr)


def build_discriminator(cfg: NetConfig, rng, dtype=np.float64):
    if cfg.arch == "stia":
        return Discriminator(cfg, rng, dtype)
    return MsgDiscriminator(cfg, rng, dtype)
