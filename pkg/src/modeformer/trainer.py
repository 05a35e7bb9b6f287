"""Teacher-forced training of the token surrogate.

The objective is a normalized RMSE: for each sample and each physical
quantity the raw RMSE over supervised frames and space is divided by the
root-mean-square of the true signal (per sample, per channel, floored at
``sigma_floor``), and the normalized values are averaged. Supervision is
next-frame: the output tokens at frame positions 0..T-2 are decoded and
compared against frames 1..T-1; the prediction emitted at the final frame
has no target inside the window and is dropped.

Mixed-dimensionality corpora are handled by a round-robin over spatial
dimensionality: each optimizer step draws one batch from a single-dim pool
(batch sizes per dim default to {1: 16, 2: 2, 3: 1}), so the shared stack
sees every dimensionality at the same cadence regardless of corpus mix.
Optimizer state, RNG state, and model weights all live in the checkpoint;
a resumed run continues the step/RNG sequence exactly.
"""

from __future__ import annotations

import json
import os
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from math import cos, pi
from typing import Sequence

import numpy as np

from .archive import read_archive, save_checkpoint, load_checkpoint, write_csv
from .codec import (CodecParams, ModeSelection, encode_tokens, decode_tokens,
                    init_codec_params)
from .datagen import Trajectory
from .model import ModelBundle, ModelConfig, forward, init_model_params
from .tensor import Graph, ShapeError, Tensor, as_tensor, deterministic_mode

__all__ = [
    "TrainConfig",
    "Adam",
    "nrmse",
    "cosine_lr",
    "train_step",
    "pretrain",
    "PretrainResult",
    "load_manifest",
    "split_heldout",
    "save_training_checkpoint",
    "load_training_checkpoint",
    "load_bundle",
    "make_bundle",
]


# --------------------------------------------------------------------------
# loss

def nrmse(pred, target: np.ndarray, *, sigma: np.ndarray | None = None,
          sigma_floor: float = 1e-8, channel_mask: np.ndarray | None = None,
          per_frame: bool = False) -> Tensor:
    """Normalized RMSE of `pred` vs `target`, both [B, P, C, *spatial].

    Inputs are always explicitly batched (a rank-4 array is one spatial axis
    plus batch, never an unbatched plane). The normalizer is
    sqrt(mean target^2) per (sample, channel) over frames and space, floored,
    and never carries gradient. With ``per_frame`` the frame axis survives
    and a [B, P, C] tensor comes back (the evaluation metric); otherwise
    frames join the RMS reduction and the masked mean over samples and
    channels gives the scalar training loss.
    """
    p = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if p.shape != target.shape:
        raise ShapeError(f"pred {p.shape} vs target {target.shape}")
    if p.ndim < 4:
        raise ShapeError(f"need [B, P, C, *spatial], got {p.shape}")

    b, n_frames, n_chan = p.shape[:3]
    spatial_axes = tuple(range(3, p.ndim))
    if sigma is None:
        sigma = np.sqrt(np.mean(target * target, axis=(1,) + spatial_axes))
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), sigma_floor)
    if sigma.shape != (b, n_chan):
        raise ShapeError(f"sigma {sigma.shape}, expected {(b, n_chan)}")

    err = p - Tensor(target)
    sq = err * err
    if per_frame:
        rmse = sq.mean(spatial_axes).sqrt()                      # [B, P, C]
        denom = np.broadcast_to(sigma[:, None, :], (b, n_frames, n_chan)).copy()
        return rmse / Tensor(denom)

    rmse = sq.mean((1,) + spatial_axes).sqrt()                   # [B, C]
    scaled = rmse / Tensor(sigma)
    if channel_mask is None:
        return scaled.mean()
    mask = np.broadcast_to(np.asarray(channel_mask, dtype=np.float64),
                           (b, n_chan)).copy()
    live = float(mask.sum())
    if live == 0:
        raise ShapeError("channel mask excludes every channel")
    return (scaled * Tensor(mask)).sum() * (1.0 / live)


def cosine_lr(step: int, total_steps: int, lr_init: float = 1e-4,
              lr_min: float = 1e-6) -> float:
    """Half-cosine decay: lr(0) = lr_init, lr(total_steps) = lr_min."""
    if total_steps <= 0:
        return lr_min
    s = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + cos(pi * s / total_steps))


# --------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction; moments tracked per parameter name.

    A parameter only advances its own step counter when it receives a
    gradient, so codecs trained on alternating dims keep correct bias
    correction. All state round-trips through checkpoints bitwise.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
             lr: float) -> None:
        for name in sorted(grads):
            p = params[name]
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != p.data.shape:
                raise ShapeError(f"grad {g.shape} vs param {p.data.shape} for {name!r}")
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            t = self.t.get(name, 0) + 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.m[name], self.v[name], self.t[name] = m, v, t

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: dict[str, int]) -> None:
        self.m = {k[len("adam.m."):]: np.array(v) for k, v in arrays.items()
                  if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: np.array(v) for k, v in arrays.items()
                  if k.startswith("adam.v.")}
        self.t = {k: int(v) for k, v in t.items()}


# --------------------------------------------------------------------------
# configuration

def _default_batch_sizes() -> dict[int, int]:
    return {1: 16, 2: 2, 3: 1}


@dataclass
class TrainConfig:
    total_steps: int = 1000
    lr_init: float = 1e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sigma_floor: float = 1e-8
    seed: int = 0
    batch_size_by_dim: dict[int, int] = field(default_factory=_default_batch_sizes)
    holdout_fraction: float = 0.1
    max_frames: int | None = None
    log_every: int = 10
    checkpoint_every: int = 0
    deterministic: bool = False

    def batch_size(self, ndim: int) -> int:
        return self.batch_size_by_dim.get(ndim, 1)


# --------------------------------------------------------------------------
# one optimizer step

def train_step(bundle: ModelBundle, values: np.ndarray, opt: Adam, lr: float,
               cfg: TrainConfig, params: dict[str, Tensor] | None = None) -> float:
    """Teacher-forced step on one same-shape batch [B, T, C, *spatial]."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim < 4:
        raise ShapeError(f"batch must be [B, T, C, *spatial], got {values.shape}")
    b, t_steps, n_q = values.shape[:3]
    if t_steps < 2:
        raise ShapeError("need at least 2 frames for next-frame supervision")
    d = values.ndim - 3
    if d not in bundle.codecs:
        raise ShapeError(f"bundle has no codec for {d} spatial axes")
    codec = bundle.codecs[d]
    extents = values.shape[3:]
    params = bundle.parameters() if params is None else params

    guard = deterministic_mode() if cfg.deterministic else nullcontext()
    with guard, Graph() as g:
        toks = encode_tokens(values, codec)
        out = forward(toks, bundle.model)
        head = out.embeddings.slice((None, 0, None),
                                    (None, (t_steps - 1) * n_q, None))
        pred = decode_tokens(head, codec, t_steps - 1, n_q, extents,
                             freqs=toks.freqs)
        loss = nrmse(pred, values[:, 1:], sigma_floor=cfg.sigma_floor)
        grads = g.backward(loss)

    named = {name: grads[t] for name, t in params.items() if t in grads}
    opt.step(params, named, lr)
    for t in params.values():
        t.grad = None
    return float(loss.data)


# --------------------------------------------------------------------------
# corpus plumbing

def load_manifest(path: str) -> list[Trajectory]:
    """Read {"archives": [...]} (paths relative to the manifest file)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for rel in doc["archives"]:
        p = rel if os.path.isabs(rel) else os.path.join(base, rel)
        out.append(read_archive(p))
    return out


def split_heldout(trajs: Sequence[Trajectory], fraction: float,
                  seed: int) -> tuple[list[Trajectory], list[Trajectory]]:
    """Per-family seeded split; every family with >= 2 members donates >= 1."""
    by_family: dict[str, list[Trajectory]] = {}
    for t in trajs:
        by_family.setdefault(t.spec.family, []).append(t)
    rng = np.random.default_rng([seed, 17])
    train: list[Trajectory] = []
    held: list[Trajectory] = []
    for fam in sorted(by_family):
        group = by_family[fam]
        perm = rng.permutation(len(group))
        n_hold = 0 if len(group) < 2 else max(1, round(fraction * len(group)))
        for j, idx in enumerate(perm):
            (held if j < n_hold else train).append(group[idx])
    return train, held


def _shape_groups(trajs: Sequence[Trajectory]) -> dict[int, list[tuple[str, np.ndarray]]]:
    """Group same-shape trajectories per spatial dim into stacked arrays."""
    keyed: dict[tuple, list[Trajectory]] = {}
    for t in trajs:
        keyed.setdefault(t.values.shape, []).append(t)
    pools: dict[int, list[tuple[str, np.ndarray]]] = {}
    for shape in sorted(keyed, key=str):
        group = keyed[shape]
        fams = sorted({t.spec.family for t in group})
        label = fams[0] if len(fams) == 1 else "mixed"
        stacked = np.stack([t.values for t in group])
        pools.setdefault(len(shape) - 2, []).append((label, stacked))
    return pools


# --------------------------------------------------------------------------
# checkpoints

def _codec_meta(c: CodecParams) -> dict:
    return {"k": c.selection.k, "policy": c.selection.policy,
            "width": c.width, "hidden": c.hidden,
            "bias": c.lift_b is not None}


def make_bundle(model_config: ModelConfig, codec_specs: dict[int, dict],
                seed: int = 0) -> ModelBundle:
    """Fresh bundle: shared stack + one codec per spatial dimensionality."""
    rng = np.random.default_rng([seed, 3])
    model = init_model_params(model_config, rng)
    codecs = {}
    for d in sorted(codec_specs):
        cs = codec_specs[d]
        sel = ModeSelection(cs["k"], cs.get("policy", "fixed-low"))
        codecs[d] = init_codec_params(d, sel, cs["width"],
                                      cs.get("hidden", model_config.hidden),
                                      rng, bias=cs.get("bias", True))
    return ModelBundle(model, codecs)


def save_training_checkpoint(path: str, bundle: ModelBundle, opt: Adam | None,
                             step: int, rng_state: dict | None = None,
                             train_config: TrainConfig | None = None,
                             extra: dict | None = None) -> None:
    arrays = {name: t.data.copy() for name, t in bundle.parameters().items()}
    meta = {
        "step": step,
        "model_config": asdict(bundle.config),
        "codecs": {str(d): _codec_meta(c) for d, c in bundle.codecs.items()},
        "rng_state": rng_state,
        "adam_t": None,
    }
    if opt is not None:
        arrays.update(opt.state_arrays())
        meta["adam_t"] = opt.t
        meta["adam_hparams"] = {"beta1": opt.beta1, "beta2": opt.beta2,
                                "eps": opt.eps}
    if train_config is not None:
        tc = asdict(train_config)
        tc["batch_size_by_dim"] = {str(k): v
                                   for k, v in tc["batch_size_by_dim"].items()}
        meta["train_config"] = tc
    if extra:
        meta.update(extra)
    save_checkpoint(path, arrays, meta)


def load_bundle(path: str) -> tuple[ModelBundle, dict]:
    """Rebuild a bundle (weights only) from a checkpoint."""
    arrays, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    specs = {int(d): cm for d, cm in meta["codecs"].items()}
    bundle = make_bundle(cfg, specs, seed=0)
    for name, tensor in bundle.parameters().items():
        if name not in arrays:
            raise ShapeError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != tensor.data.shape:
            raise ShapeError(f"checkpoint {name!r} shape {arrays[name].shape} "
                             f"vs model {tensor.data.shape}")
        tensor.data[...] = arrays[name]
    return bundle, meta


def load_training_checkpoint(path: str) -> tuple[ModelBundle, Adam, dict]:
    bundle, meta = load_bundle(path)
    arrays, _ = load_checkpoint(path)
    hp = meta.get("adam_hparams") or {}
    opt = Adam(hp.get("beta1", 0.9), hp.get("beta2", 0.999), hp.get("eps", 1e-8))
    opt.load_state(arrays, meta.get("adam_t") or {})
    return bundle, opt, meta


# --------------------------------------------------------------------------
# pretraining loop

@dataclass
class PretrainResult:
    checkpoint_path: str
    csv_path: str
    final_loss: float
    steps_run: int
    heldout: list[Trajectory]


def pretrain(bundle: ModelBundle, trajectories: Sequence[Trajectory],
             cfg: TrainConfig, out_dir: str,
             resume_from: str | None = None) -> PretrainResult:
    """Train on a mixed corpus; emits train_log.csv and model_final.ckpt.

    Logged rows: step, lr, dim, family, loss, nrmse (teacher-forced loss is
    itself an nRMSE, so the last two columns agree during pretraining; they
    diverge when a fine-tuning term joins the objective).
    """
    os.makedirs(out_dir, exist_ok=True)
    train, held = split_heldout(trajectories, cfg.holdout_fraction, cfg.seed)
    if not train:
        raise ShapeError("empty training split")
    pools = _shape_groups(train)
    dims = sorted(pools)
    weights = {d: np.array([g.shape[0] for _, g in pools[d]], dtype=np.float64)
               for d in dims}
    for d in dims:
        weights[d] /= weights[d].sum()

    params = bundle.parameters()
    if resume_from is not None:
        loaded, opt, meta = load_training_checkpoint(resume_from)
        for name, tensor in params.items():
            tensor.data[...] = loaded.parameters()[name].data
        start = int(meta["step"])
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
    else:
        opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
        start = 0
        rng = np.random.default_rng([cfg.seed, 29])

    rows: list[list] = []
    loss = float("nan")
    for step in range(start + 1, cfg.total_steps + 1):
        d = dims[(step - 1) % len(dims)]
        groups = pools[d]
        gi = int(rng.choice(len(groups), p=weights[d]))
        label, stacked = groups[gi]
        idx = rng.integers(0, stacked.shape[0], size=cfg.batch_size(d))
        batch = stacked[idx]
        if cfg.max_frames is not None and batch.shape[1] > cfg.max_frames:
            s0 = int(rng.integers(0, batch.shape[1] - cfg.max_frames + 1))
            batch = batch[:, s0: s0 + cfg.max_frames]
        lr = cosine_lr(step - 1, cfg.total_steps, cfg.lr_init, cfg.lr_min)
        loss = train_step(bundle, batch, opt, lr, cfg, params=params)
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            rows.append([step, lr, d, label, loss, loss])
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_training_checkpoint(
                os.path.join(out_dir, f"ckpt_{step:06d}.bin"), bundle, opt,
                step, rng.bit_generator.state, cfg)

    csv_path = os.path.join(out_dir, "train_log.csv")
    write_csv(csv_path, ["step", "lr", "dim", "family", "loss", "nrmse"], rows)
    final = os.path.join(out_dir, "model_final.ckpt")
    save_training_checkpoint(final, bundle, opt, cfg.total_steps,
                             rng.bit_generator.state, cfg)
    return PretrainResult(final, csv_path, loss, cfg.total_steps - start, held)
