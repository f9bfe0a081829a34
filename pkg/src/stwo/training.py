"""Adversarial training loop: two-phase steps, R1 penalty, EMA, checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import time

import numpy as np

from . import autodiff as ad
from .checkpoint import read_blob, write_blob
from .data import PyramidDataset, load_dataset
from .errors import ConfigError, FormatError, NumericError
from .nets import Generator, NetConfig, build_discriminator
from .optim import adam_step
from .stylemod import ortho_penalty
from .texdecomp import ImagePyramid

# config_id -> (scheme, ortho, arch).  The six ablation corners.
CONFIG_TRAITS = {
    "baseline": ("demod", "off", "msg_baseline"),
    "A": ("decomp", "off", "msg_baseline"),
    "B": ("decomp", "coarse", "msg_baseline"),
    "C": ("demod", "off", "stia"),
    "D": ("decomp", "off", "stia"),
    "stgan_wo": ("decomp", "coarse", "stia"),
}


@dataclasses.dataclass
class TrainConfig:
    config_id: str = "stgan_wo"
    steps: int = 200
    seed: int = 0
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    r1_gamma: float = 10.0
    ortho_alpha: float = 1.0
    batch: int = 8
    ema_beta: float = 0.999
    ema_enabled: bool = True
    dataset: str | None = None
    synthetic_count: int = 16
    net: NetConfig | None = None

    def __post_init__(self):
        if self.config_id not in CONFIG_TRAITS:
            raise ConfigError(
                f"config_id must be one of {sorted(CONFIG_TRAITS)}, "
                f"got {self.config_id!r}")
        scheme, ortho, arch = CONFIG_TRAITS[self.config_id]
        if self.net is None:
            self.net = NetConfig(arch=arch)
        elif self.net.arch != arch:
            raise ConfigError(
                f"config_id {self.config_id!r} implies arch {arch!r}, "
                f"but net.arch is {self.net.arch!r}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        for fname in ("lr_g", "lr_d", "r1_gamma", "ortho_alpha"):
            if getattr(self, fname) < 0:
                raise ConfigError(f"{fname} must be >= 0")
        if not 0.0 <= self.ema_beta < 1.0:
            raise ConfigError(f"ema_beta must be in [0, 1), got {self.ema_beta}")
        if self.synthetic_count < 1:
            raise ConfigError("synthetic_count must be >= 1")

    @property
    def scheme(self) -> str:
        return CONFIG_TRAITS[self.config_id][0]

    @property
    def ortho(self) -> str:
        return CONFIG_TRAITS[self.config_id][1]

    @property
    def arch(self) -> str:
        return CONFIG_TRAITS[self.config_id][2]

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        net = d.pop("net")
        net["channels"] = {str(k): v for k, v in net["channels"].items()}
        d["net"] = net
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        net = d.pop("net", None)
        if net is not None:
            net = dict(net)
            if net.get("channels") is not None:
                net["channels"] = {int(k): int(v)
                                   for k, v in net["channels"].items()}
            net = NetConfig(**net)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        return cls(net=net, **d)


def save_config(cfg: TrainConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path: str) -> TrainConfig:
    with open(path, encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad config file {path!r}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path!r} must hold a JSON object")
    return TrainConfig.from_json_dict(d)


@dataclasses.dataclass
class LogRow:
    step: int
    loss_g: float
    loss_d: float
    r1: float
    ortho: float
    seconds: float


@dataclasses.dataclass
class TrainState:
    cfg: TrainConfig
    G: Generator
    D: object
    ema: dict | None
    rng: np.random.Generator
    step: int = 0
    history: list = dataclasses.field(default_factory=list)


def build_state(cfg: TrainConfig, dtype=np.float32) -> TrainState:
    """Fresh networks and optimizer state, a pure function of the config."""
    scheme, ortho, _ = CONFIG_TRAITS[cfg.config_id]
    init_rng = np.random.default_rng([cfg.seed, 0])
    G = Generator(cfg.net, scheme, ortho, init_rng, dtype=dtype)
    D = build_discriminator(cfg.net, init_rng, dtype=dtype)
    ema = None
    if cfg.ema_enabled:
        ema = {p.name: p.data.copy() for p in G.params}
    rng = np.random.default_rng([cfg.seed, 1])
    return TrainState(cfg=cfg, G=G, D=D, ema=ema, rng=rng)


# ---------------------------------------------------------------------------
# losses

def _d_score(d_model, pyramid: ImagePyramid) -> ad.Tensor:
    out = d_model.forward(pyramid)
    return out[0] if isinstance(out, tuple) else out


def adversarial_losses(d_real: ad.Tensor, d_fake: ad.Tensor):
    """Non-saturating logistic pair, averaged over the batch.

    loss_d = E[softplus(d_fake)] + E[softplus(-d_real)]
    loss_g = E[softplus(-d_fake)]
    """
    loss_d = ad.add(ad.mean_all(ad.softplus(d_fake)),
                    ad.mean_all(ad.softplus(ad.neg(d_real))))
    loss_g = ad.mean_all(ad.softplus(ad.neg(d_fake)))
    return loss_d, loss_g


def r1_penalty(d_model, real: ImagePyramid, gamma: float):
    """(gamma/2) * sum over pyramid levels of ||d score / d level||^2.

    The sum runs over every element of every level, batch included.  Returns
    (penalty, score) so the score forward can be shared with the loss; the
    penalty stays on the tape and is differentiable w.r.t. the model weights.
    """
    live_rgb = {res: ad.Tensor(t.data, requires_grad=True)
                for res, t in real.rgb.items()}
    live_tex = {res: ad.Tensor(t.data, requires_grad=True)
                for res, t in real.texture.items()}
    live = ImagePyramid(rgb=live_rgb, texture=live_tex, n=real.n, r=real.r)
    score = _d_score(d_model, live)
    levels = list(live_rgb.values()) + list(live_tex.values())
    grads = ad.grad(ad.sum_all(score), levels, create_graph=True)
    pen = None
    for g in grads:
        term = ad.sum_all(ad.square(g))
        pen = term if pen is None else ad.add(pen, term)
    return ad.scale(pen, 0.5 * gamma), score


def ortho_term(G: Generator, alpha: float):
    """Sum of orthogonal penalties over the flagged layers, or None."""
    layers = G.ortho_layers()
    if not layers:
        return None
    total = None
    for layer in layers:
        term = ortho_penalty(layer, alpha)
        total = term if total is None else ad.add(total, term)
    return total


def generator_objective(loss_g: ad.Tensor, G: Generator,
                        ortho_alpha: float = 1.0) -> ad.Tensor:
    extra = ortho_term(G, ortho_alpha)
    return loss_g if extra is None else ad.add(loss_g, extra)


# ---------------------------------------------------------------------------
# one step

def _require_finite(step: int, state: TrainState, **values):
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if not bad:
        return
    worst = sorted(((float(np.abs(p.data).max()), p.name)
                    for p in list(state.G.params) + list(state.D.params)),
                   reverse=True)[:5]
    detail = ", ".join(f"{name} max|w|={m:.3e}" for m, name in worst)
    raise NumericError(
        f"non-finite loss at step {step}: "
        + ", ".join(f"{k}={v}" for k, v in bad.items())
        + f"; largest weights: {detail}")


def _sample_latents(state: TrainState, batch: int):
    cfg = state.cfg
    dtype = state.G.dtype
    z1 = state.rng.standard_normal((batch, cfg.net.z_dim)).astype(dtype)
    z2 = None
    if cfg.net.arch == "stia":
        z2 = state.rng.standard_normal((batch, cfg.net.z_dim)).astype(dtype)
    return z1, z2


def _fake_pyramid(state: TrainState, z1, z2) -> ImagePyramid:
    G = state.G
    w1 = G.map_latent(ad.Tensor(z1), 1)
    w2 = G.map_latent(ad.Tensor(z2), 2) if z2 is not None else None
    return G.forward(w1, w2)


def train_step(state: TrainState, real: ImagePyramid) -> TrainState:
    """One discriminator update then one generator update, plus EMA and a
    log row.  Bit-deterministic given (state, real)."""
    t0 = time.perf_counter()
    cfg = state.cfg
    G, D = state.G, state.D
    batch = real.batch_size()

    # discriminator phase: fresh fakes, detached generator
    z1, z2 = _sample_latents(state, batch)
    with ad.no_grad():
        fake = _fake_pyramid(state, z1, z2)
    pen, score_real = r1_penalty(D, real, cfg.r1_gamma)
    score_fake = _d_score(D, fake)
    loss_d, _ = adversarial_losses(score_real, score_fake)
    r1_val = float(pen.item())
    _require_finite(state.step, state, loss_d=float(loss_d.item()), r1=r1_val)
    total_d = ad.add(loss_d, pen)
    d_params = list(D.params)
    for p, g in zip(d_params, ad.grad(total_d, [p.tensor for p in d_params])):
        p.tensor.grad = g.data
    adam_step(d_params, cfg.lr_d)

    # generator phase: fresh latents, discriminator weights held fixed
    z1g, z2g = _sample_latents(state, batch)
    fake_g = _fake_pyramid(state, z1g, z2g)
    _, loss_g = adversarial_losses(score_real, _d_score(D, fake_g))
    extra = ortho_term(G, cfg.ortho_alpha)
    ortho_val = float(extra.item()) if extra is not None else 0.0
    _require_finite(state.step, state, loss_g=float(loss_g.item()),
                    ortho=ortho_val)
    objective = loss_g if extra is None else ad.add(loss_g, extra)
    g_params = list(G.params)
    for p, g in zip(g_params, ad.grad(objective, [p.tensor for p in g_params])):
        p.tensor.grad = g.data
    adam_step(g_params, cfg.lr_g)

    if state.ema is not None:
        beta = cfg.ema_beta
        for p in g_params:
            acc = state.ema[p.name]
            acc *= beta
            acc += (1.0 - beta) * p.data

    state.step += 1
    state.history.append(LogRow(
        step=state.step, loss_g=float(loss_g.item()),
        loss_d=float(loss_d.item()), r1=r1_val, ortho=ortho_val,
        seconds=time.perf_counter() - t0))
    return state


# ---------------------------------------------------------------------------
# full runs

LOG_FIELDS = ("step", "loss_g", "loss_d", "r1", "ortho", "seconds")


def make_dataset(cfg: TrainConfig, images: np.ndarray | None = None,
                 ) -> PyramidDataset:
    if images is None:
        images = load_dataset(cfg.dataset, cfg.net.n, [cfg.seed, 2],
                              cfg.synthetic_count)
    return PyramidDataset(images, cfg.net.n, cfg.net.r, cfg.net.arch)


def run_training(cfg: TrainConfig, log_path: str | None = None,
                 checkpoint_path: str | None = None,
                 images: np.ndarray | None = None,
                 state: TrainState | None = None,
                 progress=None) -> TrainState:
    """Train from scratch (or resume ``state``) until ``cfg.steps``.

    A resumed state adopts ``cfg``, so a run can be continued past its
    original step budget by passing the same config with larger ``steps``.
    """
    if state is None:
        state = build_state(cfg)
    else:
        state.cfg = cfg
    ds = make_dataset(cfg, images)
    log_file = writer = None
    if log_path is not None:
        log_file = open(log_path, "a", newline="", encoding="utf-8")
        writer = csv.writer(log_file)
        if log_file.tell() == 0:
            writer.writerow(LOG_FIELDS)
    try:
        while state.step < cfg.steps:
            idx = state.rng.integers(0, ds.count, size=cfg.batch)
            train_step(state, ds.batch(idx))
            row = state.history[-1]
            if writer is not None:
                writer.writerow([row.step, f"{row.loss_g:.6f}",
                                 f"{row.loss_d:.6f}", f"{row.r1:.6f}",
                                 f"{row.ortho:.6f}", f"{row.seconds:.3f}"])
                log_file.flush()
            if progress is not None:
                progress(row)
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state


# ---------------------------------------------------------------------------
# checkpoints

def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(state: TrainState, path: str) -> None:
    params = list(state.G.params) + list(state.D.params)
    tensors = []
    for p in params:
        tensors.append((f"param:{p.name}", p.data))
        tensors.append((f"adam_m:{p.name}", p.adam_m))
        tensors.append((f"adam_v:{p.name}", p.adam_v))
    if state.ema is not None:
        for name in sorted(state.ema):
            tensors.append((f"ema:{name}", state.ema[name]))
    meta = {
        "kind": "train-state",
        "config": state.cfg.to_json_dict(),
        "step": state.step,
        "rng_state": _rng_state_json(state.rng),
        "param_steps": {p.name: p.step_count for p in params},
    }
    write_blob(path, meta, tensors)


def load_checkpoint(path: str) -> TrainState:
    meta, tensors = read_blob(path)
    if meta.get("kind") != "train-state":
        raise FormatError(f"not a training checkpoint: kind={meta.get('kind')!r}")
    try:
        cfg = TrainConfig.from_json_dict(meta["config"])
        step = int(meta["step"])
        rng_state = meta["rng_state"]
        param_steps = meta["param_steps"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}") from exc
    state = build_state(cfg)
    used = set()
    for p in list(state.G.params) + list(state.D.params):
        for prefix, target in (("param", None), ("adam_m", p.adam_m),
                               ("adam_v", p.adam_v)):
            key = f"{prefix}:{p.name}"
            if key not in tensors:
                raise FormatError(f"checkpoint missing tensor {key!r}")
            arr = tensors[key]
            used.add(key)
            if target is None:
                if tuple(arr.shape) != p.data.shape:
                    raise FormatError(
                        f"shape mismatch for {key!r}: {arr.shape} vs {p.data.shape}")
                p.data = arr.astype(p.data.dtype, copy=True)
            else:
                if tuple(arr.shape) != target.shape:
                    raise FormatError(
                        f"shape mismatch for {key!r}: {arr.shape} vs {target.shape}")
                target[...] = arr
        if p.name not in param_steps:
            raise FormatError(f"checkpoint missing step count for {p.name!r}")
        p.step_count = int(param_steps[p.name])
    if state.ema is not None:
        for name in state.ema:
            key = f"ema:{name}"
            if key not in tensors:
                raise FormatError(f"checkpoint missing tensor {key!r}")
            used.add(key)
            state.ema[name][...] = tensors[key]
    extra = set(tensors) - used
    if extra:
        raise FormatError(f"checkpoint holds unknown tensors: {sorted(extra)[:4]}")
    state.step = step
    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = rng_state
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad RNG state in checkpoint: {exc}") from exc
    state.rng = rng
    return state
