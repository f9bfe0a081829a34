"""Style-conditioned weight construction.

Two schemes produce the effective convolution weight from a style vector S
(one scale per input channel):

* demodulation: W' = (W * S) / sigma, sigma per output channel, which couples
  every weight entry to every style coordinate, and
* weight decomposition: W_WD = U diag(S) V^T, which is linear in S so a
  one-hot style perturbation moves the weight by an exact rank-1 matrix.

The orthogonal regularizer keeps U and V near column-orthonormality so that
the decomposition's locality actually holds. A perturbation report quantifies
the difference between the two schemes.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .optim import Parameter


def _as_style(S, i: int, dtype) -> Tensor:
    if not isinstance(S, Tensor):
        S = Tensor(np.asarray(S, dtype=dtype))
    if S.data.ndim != 1 or S.shape[0] != i:
        raise DimensionError(f"style length {S.shape} does not match {i} "
                             "input channels")
    return S


class DemodLayer:
    """Baseline scheme: full kernel W with per-style demodulation."""

    def __init__(self, name: str, o: int, i: int, h: int, w: int, rng,
                 eps: float = 1e-8, dtype=np.float64):
        if h % 2 == 0 or w % 2 == 0:
            raise ContractError("kernel extents must be odd")
        if eps <= 0:
            raise ContractError("eps must be positive")
        std = 1.0 / np.sqrt(i * h * w)
        self.W = Parameter(f"{name}.W",
                           (rng.standard_normal((o, i, h, w)) * std).astype(dtype))
        self.eps = eps
        self.dims = (o, i, h, w)

    @property
    def params(self):
        return [self.W]


class DecompLayer:
    """Factored scheme: weight built as U diag(S) V^T on demand."""

    def __init__(self, name: str, o: int, i: int, h: int, w: int, rng,
                 ortho_regularized: bool = False, dtype=np.float64):
        if h % 2 == 0 or w % 2 == 0:
            raise ContractError("kernel extents must be odd")
        out, inn = o, i * h * w
        std = 1.0 / np.sqrt(i)
        U = rng.standard_normal((out, i)) * std
        V = rng.standard_normal((inn, i)) * std
        if ortho_regularized:
            U = gram_schmidt_columns(U)
            V = gram_schmidt_columns(V)
        self.U = Parameter(f"{name}.U", U.astype(dtype))
        self.V = Parameter(f"{name}.V", V.astype(dtype))
        self.dims = (o, i, h, w)
        self.ortho_regularized = ortho_regularized

    @property
    def params(self):
        return [self.U, self.V]


class AffineStyle:
    """Learned map from a latent w to the style vector S."""

    def __init__(self, name: str, w_dim: int, i: int, rng, dtype=np.float64):
        self.weight = Parameter(
            f"{name}.weight",
            (rng.standard_normal((w_dim, i)) * 0.01).astype(dtype))
        # bias starts at one so S is near 1 early in training
        self.bias = Parameter(f"{name}.bias", np.ones(i, dtype=dtype))
        self.w_dim = w_dim
        self.i = i

    @property
    def params(self):
        return [self.weight, self.bias]

    def __call__(self, w_latent: Tensor) -> Tensor:
        """Style for a batch of latents: (b, w_dim) -> (b, i)."""
        if w_latent.data.ndim == 1:
            w_latent = ad.reshape(w_latent, (1, w_latent.shape[0]))
        if w_latent.shape[1] != self.w_dim:
            raise DimensionError(f"latent width {w_latent.shape[1]} != "
                                 f"{self.w_dim}")
        b = w_latent.shape[0]
        prod = ad.matmul(w_latent, self.weight.tensor)
        bias = ad.expand(ad.reshape(self.bias.tensor, (1, self.i)),
                         (b, self.i))
        return ad.add(prod, bias)


def gram_schmidt_columns(M: np.ndarray, guard: float = 1e-8) -> np.ndarray:
    """Orthonormalize columns left to right.

    Columns whose residual against the span of earlier ones is below the
    guard (possible when cols > rows) keep their original direction,
    normalized, instead of amplifying noise.
    """
    M = np.array(M, dtype=np.float64)
    out = np.zeros_like(M)
    basis: list[int] = []
    for k in range(M.shape[1]):
        v = M[:, k].copy()
        for j in basis:
            v -= (out[:, j] @ v) * out[:, j]
        norm = np.linalg.norm(v)
        if norm < guard:
            # span exhausted; keep the direction, do not project against it
            v = M[:, k]
            norm = np.linalg.norm(v)
            if norm == 0.0:
                raise ContractError("zero column cannot be orthonormalized")
        else:
            basis.append(k)
        out[:, k] = v / norm
    return out


# ---------------------------------------------------------------------------
# weight construction

def demodulate(layer: DemodLayer, S) -> Tensor:
    """W' = (W * S) / sigma with sigma per output channel."""
    o, i, h, w = layer.dims
    S = _as_style(S, i, layer.W.data.dtype)
    W = layer.W.tensor
    s4 = ad.expand(ad.reshape(S, (1, i, 1, 1)), (o, i, h, w))
    Ws = ad.mul(W, s4)
    ssq = ad.rsum(ad.square(Ws), (1, 2, 3), keepdims=True)
    sigma = ad.sqrt(ad.add_scalar(ssq, layer.eps))
    inv = ad.expand(ad.pow_const(sigma, -1.0), (o, i, h, w))
    return ad.mul(Ws, inv)


@dataclasses.dataclass
class DemodFactors:
    """Diagonals A (per output channel) and B (per flattened input position)
    with A W_hat B equal to the demodulated weight in matrix form."""
    A: Tensor
    B: Tensor
    dims: tuple

    def apply(self, W_hat: Tensor) -> Tensor:
        o, i, h, w = self.dims
        inn = i * h * w
        a = ad.expand(ad.reshape(self.A, (o, 1)), (o, inn))
        b = ad.expand(ad.reshape(self.B, (1, inn)), (o, inn))
        return ad.mul(ad.mul(a, W_hat), b)


def demod_diag_factors(layer: DemodLayer, S) -> DemodFactors:
    """The right/left-diagonal form of demodulation.

    B repeats each style scale across its input channel's h*w block; A is
    1/sigma. Applying both to the flattened kernel reproduces demodulate().
    """
    o, i, h, w = layer.dims
    S = _as_style(S, i, layer.W.data.dtype)
    W = layer.W.tensor
    s4 = ad.expand(ad.reshape(S, (1, i, 1, 1)), (o, i, h, w))
    ssq = ad.rsum(ad.square(ad.mul(W, s4)), (1, 2, 3), keepdims=True)
    sigma = ad.sqrt(ad.add_scalar(ssq, layer.eps))
    A = ad.reshape(ad.pow_const(sigma, -1.0), (o,))
    B = ad.reshape(ad.expand(ad.reshape(S, (i, 1)), (i, h * w)), (i * h * w,))
    return DemodFactors(A=A, B=B, dims=layer.dims)


def weight_matrix(layer) -> Tensor:
    """The layer's raw kernel flattened to (out, in)."""
    o, i, h, w = layer.dims
    if isinstance(layer, DemodLayer):
        return ad.reshape(layer.W.tensor, (o, i * h * w))
    raise ContractError("weight_matrix expects a DemodLayer")


def decompose_weight(layer: DecompLayer, S) -> Tensor:
    """W_WD = U diag(S) V^T = sum_n s_n u_n v_n^T, reshaped to o*i*h*w."""
    o, i, h, w = layer.dims
    S = _as_style(S, i, layer.U.data.dtype)
    out, inn = o, i * h * w
    Us = ad.mul(layer.U.tensor,
                ad.expand(ad.reshape(S, (1, i)), (out, i)))
    mat = ad.matmul(Us, ad.permute(layer.V.tensor, (1, 0)))
    return ad.reshape(mat, (o, i, h, w))


def ortho_penalty(layer: DecompLayer, alpha: float = 1.0) -> Tensor:
    """alpha * (||U^T U - I||_F^2 + ||V^T V - I||_F^2)."""
    if not layer.ortho_regularized:
        raise ContractError("layer is not flagged for orthogonal "
                            "regularization")
    total = None
    for M in (layer.U.tensor, layer.V.tensor):
        i = M.shape[1]
        eye = np.eye(i, dtype=M.data.dtype)
        gram = ad.matmul(ad.permute(M, (1, 0)), M)
        dev = ad.add(gram, Tensor(-eye))
        term = ad.sum_all(ad.square(dev))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, alpha)


# ---------------------------------------------------------------------------
# forward pass with a style produced by the affine map

def modulated_conv_forward(x: Tensor, layer, affine: AffineStyle,
                           w_latent: Tensor) -> Tensor:
    """Single-style forward: every batch element shares one latent."""
    o, i, h, w = layer.dims
    S_row = affine(w_latent)
    if S_row.shape[0] != 1:
        raise DimensionError("modulated_conv_forward takes one latent; "
                             "batched styles live in the network module")
    S = ad.reshape(S_row, (i,))
    if isinstance(layer, DecompLayer):
        weight = decompose_weight(layer, S)
    elif isinstance(layer, DemodLayer):
        weight = demodulate(layer, S)
    else:
        raise ContractError(f"unknown layer type {type(layer).__name__}")
    return ad.conv2d(x, weight, pad=(h - 1) // 2)


# ---------------------------------------------------------------------------
# sensitivity analysis

@dataclasses.dataclass
class SensitivityReport:
    scheme: str
    channel: int
    delta: float
    shape: tuple
    fro_norm: float
    singular_values: list
    rank: int
    fraction_changed: float

    def to_json_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "channel": self.channel,
            "delta": self.delta,
            "shape": list(self.shape),
            "fro_norm": self.fro_norm,
            "singular_values": self.singular_values,
            "rank": self.rank,
            "fraction_changed": self.fraction_changed,
        }

    def to_text(self) -> str:
        sv = ", ".join(f"{v:.3e}" for v in self.singular_values[:6])
        more = " ..." if len(self.singular_values) > 6 else ""
        return (
            f"scheme={self.scheme} channel={self.channel} "
            f"delta={self.delta:g}\n"
            f"  weight matrix {self.shape[0]}x{self.shape[1]}, "
            f"|dW|_F = {self.fro_norm:.6e}\n"
            f"  numerical rank {self.rank}, "
            f"changed entries {self.fraction_changed:.1%}\n"
            f"  singular values: {sv}{more}"
        )


def _built_matrix(scheme: str, layer, S) -> np.ndarray:
    o, i, h, w = layer.dims
    with ad.no_grad():
        if scheme == "demod":
            W4 = demodulate(layer, S)
        elif scheme == "decomp":
            W4 = decompose_weight(layer, S)
        else:
            raise ContractError(f"unknown scheme {scheme!r}")
    return W4.data.reshape(o, i * h * w)


def perturb_report(scheme: str, layer, S, n: int,
                   delta: float) -> SensitivityReport:
    """Effect of nudging style channel n (1-based) by delta."""
    o, i, h, w = layer.dims
    if not 1 <= n <= i:
        raise ContractError(f"channel {n} outside 1..{i}")
    S = np.asarray(S, dtype=np.float64)
    S2 = S.copy()
    S2[n - 1] += delta
    base = _built_matrix(scheme, layer, S)
    moved = _built_matrix(scheme, layer, S2)
    dW = moved - base
    sv = jacobi_svd(dW)
    top = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > 1e-9 * max(top, 1e-30))) if top > 0 else 0
    return SensitivityReport(
        scheme=scheme,
        channel=n,
        delta=float(delta),
        shape=dW.shape,
        fro_norm=float(np.linalg.norm(dW)),
        singular_values=[float(v) for v in sv],
        rank=rank,
        fraction_changed=float(np.mean(np.abs(dW) > 1e-12)),
    )


def jacobi_svd(M: np.ndarray, tol: float = 1e-12,
               max_sweeps: int = 60) -> np.ndarray:
    """Singular values of a dense matrix by one-sided Jacobi rotations.

    Works on columns; the matrix is transposed first if that makes the
    column count the smaller dimension. Returns values sorted descending.
    """
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2:
        raise DimensionError("jacobi_svd expects a matrix")
    if A.shape[0] < A.shape[1]:
        A = A.T
    A = A.copy()
    m, n = A.shape
    if n == 0:
        return np.zeros(0)
    scale = np.abs(A).max()
    if scale == 0.0:
        return np.zeros(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = A[:, p] @ A[:, p]
                aqq = A[:, q] @ A[:, q]
                apq = A[:, p] @ A[:, q]
                if abs(apq) <= tol * np.sqrt(app * aqq) or apq == 0.0:
                    continue
                off = max(off, abs(apq))
                tau = (aqq - app) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                Ap = A[:, p].copy()
                A[:, p] = c * Ap - s * A[:, q]
                A[:, q] = s * Ap + c * A[:, q]
        if off <= tol * scale:
            break
    sv = np.sqrt(np.sum(A * A, axis=0))
    return np.sort(sv)[::-1]
