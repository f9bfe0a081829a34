"""Command-line entry points: train, sample, edit, metrics, decompose,
verify, serve.  Exit codes: 0 success, 2 usage error, 1 runtime error."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import pngio
from .errors import StwoError
from .metrics import PplConfig, ppl_report
from .service import ModelHandle
from .texdecomp import DecompositionParams, rtv_decompose
from .training import load_checkpoint, load_config, run_training


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stwo",
        description="Structure-texture split GAN with decomposed modulated "
                    "convolutions: training, sampling, editing, serving.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop from a JSON config")
    t.add_argument("--config", required=True, help="TrainConfig JSON file")
    t.add_argument("--log", help="CSV loss log to append to")
    t.add_argument("--ckpt", help="checkpoint file to write when done")
    t.add_argument("--resume", help="checkpoint file to continue from")
    t.add_argument("--quiet", action="store_true")

    s = sub.add_parser("sample", help="render one image from latent seeds")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seed1", required=True, type=int)
    s.add_argument("--seed2", type=int, default=0)
    s.add_argument("--out", required=True)

    e = sub.add_parser("edit", help="move the coarse latent along an "
                                    "orthogonal direction and render")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--seed1", required=True, type=int)
    e.add_argument("--seed2", type=int, default=0)
    e.add_argument("--dir-seed", required=True, type=int)
    e.add_argument("--alpha", required=True, type=float)
    e.add_argument("--out", required=True)

    m = sub.add_parser("metrics", help="path-length metrics as JSON")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--space", default="w1_orthogonal",
                   choices=("w", "w1", "w2", "w1_orthogonal"))
    m.add_argument("--paths", type=int, default=64)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--epsilon", type=float, default=1e-4)

    d = sub.add_parser("decompose",
                       help="split a PNG into structure and texture parts")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out-prefix", help="default: input path without .png")
    d.add_argument("--lam", type=float, default=0.01)
    d.add_argument("--sigma", type=float, default=3.0)
    d.add_argument("--iters", type=int, default=4)

    v = sub.add_parser("verify", help="self-check the weight machinery on "
                                      "fresh random layers")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trials", type=int, default=20)

    sv = sub.add_parser("serve", help="HTTP service over a checkpoint")
    sv.add_argument("--ckpt", required=True)
    sv.add_argument("--port", type=int, default=8000)
    sv.add_argument("--host", default="127.0.0.1")
    return p


# ---------------------------------------------------------------------------
# handlers

def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    state = load_checkpoint(args.resume) if args.resume else None

    def progress(row):
        if not args.quiet and (row.step % 10 == 0 or row.step == cfg.steps):
            print(f"step {row.step}/{cfg.steps}  loss_g={row.loss_g:.4f}  "
                  f"loss_d={row.loss_d:.4f}  r1={row.r1:.4f}  "
                  f"ortho={row.ortho:.4f}", flush=True)

    state = run_training(cfg, log_path=args.log, checkpoint_path=args.ckpt,
                         state=state, progress=progress)
    print(f"trained {state.step} steps"
          + (f", checkpoint: {args.ckpt}" if args.ckpt else ""))
    return 0


def _cmd_sample(args) -> int:
    handle = ModelHandle.from_checkpoint(args.ckpt)
    png = handle.render_png(args.seed1, args.seed2)
    with open(args.out, "wb") as f:
        f.write(png)
    print(args.out)
    return 0


def _cmd_edit(args) -> int:
    handle = ModelHandle.from_checkpoint(args.ckpt)
    png, delta = handle.edit_png(args.seed1, args.seed2, args.dir_seed,
                                 args.alpha)
    with open(args.out, "wb") as f:
        f.write(png)
    print(f"{args.out}  delta_norm={delta:.6f}")
    return 0


def _cmd_metrics(args) -> int:
    handle = ModelHandle.from_checkpoint(args.ckpt)
    cfg = PplConfig(epsilon=args.epsilon, num_paths=args.paths,
                    space=args.space, seed=args.seed)
    res = ppl_report(handle.G, cfg)
    out = {"config_id": handle.config_id}
    out.update(res.to_json_dict())
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_decompose(args) -> int:
    img = pngio.load(args.input)
    params = DecompositionParams(lam=args.lam, sigma=args.sigma,
                                 max_iter=args.iters)
    structure, texture = rtv_decompose(img, params)
    prefix = args.out_prefix
    if prefix is None:
        prefix = args.input[:-4] if args.input.lower().endswith(".png") \
            else args.input
    s_path, t_path = prefix + ".structure.png", prefix + ".texture.png"
    pngio.save(np.clip(structure, -1.0, 1.0), s_path)
    pngio.save(np.clip(texture, -1.0, 1.0), t_path)
    print(s_path)
    print(t_path)
    return 0


def _cmd_verify(args) -> int:
    from .stylemod import (DecompLayer, DemodLayer, demod_diag_factors,
                           demodulate, perturb_report, weight_matrix)

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.trials):
        o = int(rng.integers(1, 9))
        i = int(rng.integers(1, 9))
        h = w = int(rng.choice([1, 3]))
        layer = DemodLayer("v.demod", o, i, h, w, rng)
        S = rng.uniform(0.5, 2.0, size=i)
        full = demodulate(layer, S).data.reshape(o, i * h * w)
        factored = demod_diag_factors(layer, S)
        err = float(np.abs(
            factored.apply(weight_matrix(layer)).data - full).max())
        worst = max(worst, err)
    print(f"demod-equivalence max error over {args.trials} layers: {worst:.3e}")
    ok = worst < 1e-9

    layer = DecompLayer("v.decomp", 8, 6, 3, 3, rng, ortho_regularized=True)
    S = rng.uniform(0.5, 2.0, size=6)
    rep = perturb_report("decomp", layer, S, n=3, delta=0.5)
    print(rep.to_text())
    ok = ok and abs(rep.fro_norm - 0.5) < 1e-9 and rep.rank == 1

    dlayer = DemodLayer("v.demod2", 8, 6, 3, 3, rng)
    rep2 = perturb_report("demod", dlayer, S, n=3, delta=0.5)
    print(rep2.to_text())
    ok = ok and rep2.fraction_changed > 0.99

    print("verify: OK" if ok else "verify: FAILED")
    return 0 if ok else 1


def _cmd_serve(args) -> int:
    from .service import serve

    serve(args.ckpt, host=args.host, port=args.port)
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "sample": _cmd_sample,
    "edit": _cmd_edit,
    "metrics": _cmd_metrics,
    "decompose": _cmd_decompose,
    "verify": _cmd_verify,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except StwoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
