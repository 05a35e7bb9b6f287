"""Command-line entry points for the full experiment pipeline.

One JSON config file per run plus four flag overrides (--config, --seed,
--out, --deterministic).  Every artifact lands under --out.  Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Sequence

import numpy as np

from . import archive, datagen
from .aligner import (AlignerConfig, AlignTrainConfig, align_train, finetune,
                      init_aligner_params, load_aligner_params,
                      save_aligner_params)
from .codec import ModeSelection, encode_tokens, inverse_decoder, decode_tokens
from .evaluate import (bundle_predictor, context_sweep, evaluate,
                       inverse_probe, scale_sweep, write_metrics)
from .model import DivergenceError, forward, rollout, temporal_mask
from .tensor import Graph, Tensor, finite_diff_gradient
from .trainer import (TrainConfig, load_bundle, load_manifest, make_bundle,
                      nrmse, pretrain)
from .model import ModelConfig

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):               # argparse default exits with 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="modeformer",
                description="Spectral-token PDE surrogate toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("gen", "generate trajectory archives from a family config"),
        ("pretrain", "train the shared stack on archived trajectories"),
        ("finetune", "alignment-rewarded fine-tuning from a checkpoint"),
        ("align-train", "train the caption/physics alignment towers"),
        ("eval", "rollout metrics for a checkpoint on a manifest"),
        ("rollout", "render one trajectory rollout as PGM triptychs"),
        ("scale-sweep", "evaluate one checkpoint across grid sizes"),
        ("context-sweep", "evaluate one checkpoint across context lengths"),
        ("probe", "ridge-regress a coefficient from frozen hidden states"),
        ("selftest", "run the built-in oracle checks"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", default=None, help="JSON config path")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--out", default=".", help="artifact directory")
        sp.add_argument("--deterministic", action="store_true",
                        help="bitwise-reproducible mode (zeroes timing columns)")
    return p


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    with open(args.config, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _seed_of(cfg: dict, args, default: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", default))


def _manifest_trajectories(path: str) -> list[datagen.Trajectory]:
    return load_manifest(path)


def _bundle_from(cfg: dict) -> "ModelBundle":
    bundle, _ = load_bundle(cfg["checkpoint"])
    return bundle


# --------------------------------------------------------------------------
# gen

def _draw_coefficients(spec: dict, rng: np.random.Generator) -> dict[str, float]:
    out = {}
    for name, val in spec.items():
        if isinstance(val, (list, tuple)):
            lo, hi = float(val[0]), float(val[1])
            out[name] = lo + (hi - lo) * float(rng.random())
        else:
            out[name] = float(val)
    return out


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    seed = _seed_of(cfg, args)
    os.makedirs(args.out, exist_ok=True)
    names, idx = [], 0
    for b, block in enumerate(cfg["blocks"]):
        rng = np.random.default_rng([seed, b, 101])
        for i in range(int(block["count"])):
            coeffs = _draw_coefficients(block["coefficients"], rng)
            spec = datagen.PdeSpec(
                block["family"], coeffs,
                tuple(int(n) for n in block["extents"]),
                tuple(float(x) for x in block.get("lengths", [1.0] * len(block["extents"]))),
                n_steps=int(block["n_steps"]), dt=float(block["dt"]),
                seed=seed * 1000003 + b * 1009 + i,
                ic_modes=int(block.get("ic_modes", 4)),
                ic_decay=float(block.get("ic_decay", 1.0)),
                substeps=block.get("substeps"))
            traj = datagen.gen_trajectory(spec)
            name = f"data_{idx:05d}.bin"
            archive.write_archive(os.path.join(args.out, name), traj)
            names.append(name)
            idx += 1
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump({"archives": names}, fh, indent=1, sort_keys=True)
    print(f"gen: wrote {idx} archives to {args.out}")
    return 0


# --------------------------------------------------------------------------
# training

def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg.get("model", {}))


def _codec_specs(cfg: dict) -> dict[int, dict]:
    return {int(d): dict(spec) for d, spec in cfg["codecs"].items()}


def _train_config(cfg: dict, args) -> TrainConfig:
    kw = dict(cfg.get("train", {}))
    if "batch_size_by_dim" in kw:
        kw["batch_size_by_dim"] = {int(k): int(v)
                                   for k, v in kw["batch_size_by_dim"].items()}
    tc = TrainConfig(**kw)
    if args.seed is not None:
        tc.seed = args.seed
    if args.deterministic:
        tc.deterministic = True
    return tc


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    tc = _train_config(cfg, args)
    trajs = _manifest_trajectories(cfg["manifest"])
    bundle = make_bundle(_model_config(cfg), _codec_specs(cfg), seed=tc.seed)
    res = pretrain(bundle, trajs, tc, args.out, resume_from=cfg.get("resume"))
    print(f"pretrain: {res.steps_run} steps, final loss {res.final_loss:.6f}, "
          f"checkpoint {res.checkpoint_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    tc = _train_config(cfg, args)
    trajs = _manifest_trajectories(cfg["manifest"])
    bundle, _ = load_bundle(cfg["checkpoint"])
    aligner = load_aligner_params(cfg["aligner"])
    res = finetune(bundle, trajs, tc, aligner, args.out,
                   use_alignment=bool(cfg.get("use_alignment", True)))
    print(f"finetune: {res.steps_run} steps, final loss {res.final_loss:.6f}, "
          f"checkpoint {res.checkpoint_path}")
    return 0


def cmd_align_train(args) -> int:
    cfg = _load_config(args)
    trajs = _manifest_trajectories(cfg["manifest"])
    acfg = dict(cfg.get("aligner", {}))
    sel = ModeSelection(int(acfg.pop("k", 8)), acfg.pop("policy", "fixed-low"))
    aconf = AlignerConfig(**acfg)
    ndim = trajs[0].values.ndim - 2
    n_c = trajs[0].values.shape[1]
    tkw = dict(cfg.get("train", {}))
    if args.seed is not None:
        tkw["seed"] = args.seed
    tcfg = AlignTrainConfig(**tkw)
    params = init_aligner_params(aconf, sel, ndim, n_c,
                                 np.random.default_rng([tcfg.seed, 7]))
    samples = [(t.caption, t.values[0], t.values[-1]) for t in trajs]
    os.makedirs(args.out, exist_ok=True)
    res = align_train(params, samples, tcfg, args.out)
    ckpt = os.path.join(args.out, "aligner.ckpt")
    save_aligner_params(ckpt, params)
    print(f"align-train: loss {res.final_loss:.4f}, retrieval accuracy "
          f"{res.final_accuracy:.3f}, checkpoint {ckpt}")
    return 0


# --------------------------------------------------------------------------
# evaluation

def cmd_eval(args) -> int:
    cfg = _load_config(args)
    bundle = _bundle_from(cfg)
    trajs = _manifest_trajectories(cfg["manifest"])
    rows = evaluate(bundle_predictor(bundle), trajs,
                    context=int(cfg["context"]), horizon=int(cfg["horizon"]),
                    seed=_seed_of(cfg, args), deterministic=args.deterministic)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "metrics.csv")
    write_metrics(path, rows)
    print(f"eval: {len(rows)} rows -> {path}")
    return 0


def cmd_scale_sweep(args) -> int:
    cfg = _load_config(args)
    bundle = _bundle_from(cfg)
    rows = scale_sweep(bundle, cfg["family"],
                       {k: float(v) for k, v in cfg["coefficients"].items()},
                       [int(n) for n in cfg["sizes"]],
                       context=int(cfg["context"]), horizon=int(cfg["horizon"]),
                       n_traj=int(cfg.get("n_traj", 8)),
                       t_steps=int(cfg["t_steps"]), dt=float(cfg["dt"]),
                       seed=_seed_of(cfg, args),
                       ic_modes=int(cfg.get("ic_modes", 4)),
                       deterministic=args.deterministic)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "metrics.csv")
    write_metrics(path, rows)
    print(f"scale-sweep: {len(rows)} rows -> {path}")
    return 0


def cmd_context_sweep(args) -> int:
    cfg = _load_config(args)
    bundle = _bundle_from(cfg)
    trajs = _manifest_trajectories(cfg["manifest"])
    rows = context_sweep(bundle_predictor(bundle), trajs,
                         [int(n) for n in cfg["lengths"]],
                         horizon=int(cfg["horizon"]),
                         seed=_seed_of(cfg, args),
                         deterministic=args.deterministic)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "metrics.csv")
    write_metrics(path, rows)
    print(f"context-sweep: {len(rows)} rows -> {path}")
    return 0


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    bundle = _bundle_from(cfg)
    trajs = _manifest_trajectories(cfg["manifest"])
    rep = inverse_probe(bundle, trajs, cfg["target"],
                        alpha=float(cfg.get("alpha", 1e-3)),
                        holdout=float(cfg.get("holdout", 0.2)),
                        seed=_seed_of(cfg, args),
                        shuffle_targets=bool(cfg.get("shuffle", False)))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "probe_report.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"target": rep.target, "r2": rep.r2, "rmse": rep.rmse,
                   "n_train": rep.n_train, "n_test": rep.n_test,
                   "alpha": rep.alpha}, fh, indent=1, sort_keys=True)
    print(f"probe: target {rep.target} R2 {rep.r2:.4f} RMSE {rep.rmse:.4f} -> {path}")
    return 0


# --------------------------------------------------------------------------
# rollout rendering

def _panel(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros_like(a, dtype=np.float64)
    return (a - lo) / (hi - lo)


def _triptych(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """[H, W] truth/prediction/|error| panels side by side, 2-px separators."""
    gap = np.ones((truth.shape[0], 2))
    return np.concatenate([_panel(truth), gap, _panel(pred), gap,
                           _panel(np.abs(truth - pred))], axis=1)


def _as_plane(frame: np.ndarray) -> np.ndarray:
    """One channel's spatial block -> 2-D plane (mid-slice for 3-D)."""
    if frame.ndim == 1:
        return frame[None, :]
    if frame.ndim == 2:
        return frame
    return frame[frame.shape[0] // 2]


def cmd_rollout(args) -> int:
    cfg = _load_config(args)
    bundle = _bundle_from(cfg)
    traj = archive.read_archive(cfg["archive"])
    context, steps = int(cfg["context"]), int(cfg["steps"])
    os.makedirs(args.out, exist_ok=True)
    values = traj.values
    if context < 1 or context + steps > values.shape[0]:
        raise ValueError(f"context {context} + steps {steps} exceeds "
                         f"{values.shape[0]} stored frames")
    try:
        full = rollout(values[:context], steps, bundle,
                       guard=float(cfg.get("guard", 1e6)))
    except DivergenceError as e:
        report = os.path.join(args.out, "divergence_report.txt")
        with open(report, "w", encoding="utf-8") as fh:
            fh.write(f"family: {traj.spec.family}\ncontext: {context}\n"
                     f"steps: {steps}\nreason: {e}\n")
        raise
    pred = full[context:context + steps]
    truth = values[context:context + steps]
    n_c = values.shape[1]

    if values.ndim - 2 == 1:                 # space-time heatmaps per channel
        for c in range(n_c):
            archive.write_pgm(os.path.join(args.out, f"rollout_c{c}.pgm"),
                              _triptych(truth[:, c], pred[:, c]), lo=0.0, hi=1.0)
    else:
        for t in range(steps):
            for c in range(n_c):
                img = _triptych(_as_plane(truth[t, c]), _as_plane(pred[t, c]))
                archive.write_pgm(
                    os.path.join(args.out, f"rollout_t{t:03d}_c{c}.pgm"),
                    img, lo=0.0, hi=1.0)

    with Graph():
        per = nrmse(pred[None], truth[None], per_frame=True).data[0]  # [steps, C]
    rows = [[s + 1, c, float(per[s, c]), "ok"]
            for s in range(steps) for c in range(n_c)]
    archive.write_csv(os.path.join(args.out, "rollout.csv"),
                      ["step", "channel", "nrmse", "status"], rows)
    print(f"rollout: {steps} steps rendered to {args.out}")
    return 0


# --------------------------------------------------------------------------
# selftest

def _selftest_dft() -> None:
    from .fft import dft_reference, rfft_nd
    rng = np.random.default_rng(12)
    for shape in [(16,), (8, 8)]:
        f = rng.normal(size=shape)
        fast, slow = rfft_nd(f), dft_reference(f)
        err = float(np.abs(fast.modes - slow.modes).max())
        if err > 1e-12:
            raise AssertionError(f"DFT mismatch {err} on {shape}")


def _selftest_grad() -> None:
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    probe = Tensor(rng.normal(size=(3, 2)))

    def loss_of(t: Tensor):
        with Graph():
            return ((t @ w).softmax() * probe).sum()

    with Graph() as g:
        y = ((x @ w).softmax() * probe).sum()
        got = g.backward(y)[x]
    want = finite_diff_gradient(loss_of, x)
    err = np.abs(got - want).max() / max(np.abs(want).max(), 1e-12)
    if err > 1e-6:
        raise AssertionError(f"gradient mismatch rel {err}")


def _selftest_codec() -> None:
    from .codec import init_codec_params
    rng = np.random.default_rng(14)
    sel = ModeSelection(4, "fixed-low")
    params = inverse_decoder(init_codec_params(1, sel, 8, 64, rng, bias=False))
    field = datagen.band_limited_ic(rng, (32,), 3)[None, None]   # [T=1, C=1, 32]
    with Graph():
        toks = encode_tokens(field, params)
        back = decode_tokens(toks, params, 1, 1, (32,), freqs=toks.freqs).data
    rel = np.abs(back - field).max() / np.abs(field).max()
    if rel > 1e-10:
        raise AssertionError(f"codec round-trip rel {rel}")


def _selftest_mask() -> None:
    mask = temporal_mask(3, 2)
    allowed = mask == 0.0
    want = np.repeat(np.repeat(np.tril(np.ones((3, 3), bool)), 2, 0), 2, 1)
    if not np.array_equal(allowed, want):
        raise AssertionError("temporal mask shape is not frame-causal")
    bundle = make_bundle(ModelConfig(layers=1, hidden=16, heads=2,
                                     intermediate=32),
                         {1: dict(k=4, policy="fixed-low", width=16)}, seed=3)
    rng = np.random.default_rng(15)
    window = rng.normal(size=(3, 1, 16))
    bumped = window.copy()
    bumped[2:] += 1.0
    with Graph():
        t_a = forward(encode_tokens(window, bundle.codecs[1]),
                      bundle.model).embeddings.data
        t_b = forward(encode_tokens(bumped, bundle.codecs[1]),
                      bundle.model).embeddings.data
    if not np.array_equal(t_a[:2], t_b[:2]):
        raise AssertionError("perturbing a later frame changed earlier tokens")


def cmd_selftest(args) -> int:
    checks = [("dft-equivalence", _selftest_dft),
              ("gradient-check", _selftest_grad),
              ("codec-round-trip", _selftest_codec),
              ("mask-causality", _selftest_mask)]
    for name, fn in checks:
        fn()
        print(f"selftest: {name} ok")
    print("selftest: all checks passed")
    return 0


# --------------------------------------------------------------------------

_COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "align-train": cmd_align_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "scale-sweep": cmd_scale_sweep,
    "context-sweep": cmd_context_sweep,
    "probe": cmd_probe,
    "selftest": cmd_selftest,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:                   # runtime failure contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
