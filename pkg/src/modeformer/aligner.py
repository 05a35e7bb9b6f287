"""Contrastive alignment between equation captions and spectral evolution.

A trajectory's dynamics leave a compact signature on its kept Fourier modes:
comparing the state at time t_i against the initial state t_0, each mode k
carries a normalized phase difference

    dphi(k) = z_i(k) * conj(z_0(k)) / (|z_i(k)| * |z_0(k)|)      (unit modulus)

and a magnitude ratio R(k) = |z_i(k)| / |z_0(k)|. Advection rotates phases
and keeps R = 1; diffusion keeps phases and damps R = exp(-nu k^2 t); other
families mix. The aligner embeds (Re dphi, Im dphi, clamped log R) triples
through a trainable linear map into the same space as a hashed-token caption
embedding, and trains both with a symmetric InfoNCE loss at temperature tau
plus lambda * |mean R - 1| as an energy-conservation regularizer.

Near-silent modes are degenerate for these ratios: whenever either magnitude
is at or below eps_m the triple is replaced by the neutral (1, 0, 0) —
the fixed point of the identity evolution — through a constant-mask blend
that keeps the whole computation differentiable.

Caption augmentation rewrites a template-grammar caption without changing
its physics: symbol substitution from a fixed table (u <-> v/A/w,
beta <-> c, nu <-> eta, x <-> xi), multiplying both sides by a factor in
[0.5, 1.5] (rendered to 2 decimals), and swapping the time-derivative
notation between \\partial_t and \\frac{\\partial}{\\partial t}.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field, replace
from math import prod
from typing import Sequence

import numpy as np

from .codec import ModeSelection, kept_coefficient_pairs, kept_count
from .tensor import Graph, ShapeError, Tensor, as_tensor, concat
from .trainer import Adam, cosine_lr, nrmse
from .archive import load_checkpoint, save_checkpoint, write_csv

__all__ = [
    "AlignerConfig",
    "AlignerParams",
    "AlignTrainConfig",
    "PhysicsFeatures",
    "GrammarError",
    "ParsedCaption",
    "SUBSTITUTION_TABLE",
    "init_aligner_params",
    "save_aligner_params",
    "load_aligner_params",
    "physics_features",
    "tokenize_caption",
    "caption_token_ids",
    "caption_encode",
    "align_loss",
    "retrieval_accuracy",
    "finetune_loss",
    "finetune",
    "align_train",
    "parse_caption",
    "render_caption",
    "substitute_caption",
    "scale_caption",
    "swap_time_notation",
    "augment_caption",
    "classify_probe",
    "ProbeResult",
]


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class AlignerConfig:
    lam: float = 0.1          # weight of the energy-conservation term
    tau: float = 0.07         # InfoNCE temperature
    eps_m: float = 1e-10      # degenerate-mode magnitude threshold
    d_s: int = 64             # shared embedding dim
    d_t: int = 64             # caption token embedding dim
    vocab: int = 4096         # hashed token id range

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


@dataclass
class AlignerParams:
    """Caption tower (hash-embed, project) + feature tower (project)."""

    config: AlignerConfig
    selection: ModeSelection
    ndim: int
    n_channels: int
    embed: Tensor        # [vocab, d_t]
    text_proj: Tensor    # [d_t, d_s]
    feat_proj: Tensor    # [3*C*M, d_s]

    @property
    def n_features(self) -> int:
        return 3 * self.n_channels * kept_count(self.selection, self.ndim)

    def parameters(self, prefix: str = "aligner.") -> dict[str, Tensor]:
        return {f"{prefix}embed": self.embed,
                f"{prefix}text_proj": self.text_proj,
                f"{prefix}feat_proj": self.feat_proj}


def init_aligner_params(config: AlignerConfig, sel: ModeSelection, ndim: int,
                        n_channels: int, rng: np.random.Generator,
                        init_scale: float = 0.02) -> AlignerParams:
    d_s = int(config.d_s)
    n_feat = 3 * n_channels * kept_count(sel, ndim)
    mk = lambda *s: Tensor(rng.normal(0.0, init_scale, size=s), requires_grad=True)
    return AlignerParams(config, sel, ndim, n_channels,
                         embed=mk(config.vocab, config.d_t),
                         text_proj=mk(config.d_t, d_s),
                         feat_proj=mk(n_feat, d_s))


def save_aligner_params(path: str, params: AlignerParams) -> None:
    arrays = {name.removeprefix("aligner."): t.data.copy()
              for name, t in params.parameters().items()}
    meta = {"kind": "aligner",
            "config": {"lam": params.config.lam, "tau": params.config.tau,
                       "eps_m": params.config.eps_m, "d_s": params.config.d_s,
                       "d_t": params.config.d_t, "vocab": params.config.vocab},
            "selection": {"k": params.selection.k,
                          "policy": params.selection.policy},
            "ndim": params.ndim, "n_channels": params.n_channels}
    save_checkpoint(path, arrays, meta)


def load_aligner_params(path: str) -> AlignerParams:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "aligner":
        raise ValueError(f"{path} is not an aligner checkpoint")
    config = AlignerConfig(**meta["config"])
    sel = ModeSelection(meta["selection"]["k"], meta["selection"]["policy"])
    return AlignerParams(config, sel, int(meta["ndim"]), int(meta["n_channels"]),
                         embed=Tensor(arrays["embed"], requires_grad=True),
                         text_proj=Tensor(arrays["text_proj"], requires_grad=True),
                         feat_proj=Tensor(arrays["feat_proj"], requires_grad=True))


# --------------------------------------------------------------------------
# physics features

@dataclass
class PhysicsFeatures:
    """(Re dphi, Im dphi, clamped log R) per channel and kept mode."""

    triples: Tensor      # [..., C, M, 3]
    ratios: Tensor       # [..., C, M], degenerate entries blended to 1
    freqs: np.ndarray    # [M, ndim] signed frequencies

    def flat(self) -> Tensor:
        """Collapse (C, M, 3) into one feature axis for the Psi projection."""
        s = self.triples.shape
        return self.triples.reshape(s[:-3] + (s[-3] * s[-2] * s[-1],))


def physics_features(u_t0, u_ti, sel: ModeSelection, ndim: int,
                     eps_m: float = 1e-10) -> PhysicsFeatures:
    """Spectral evolution signature of u_ti relative to u_t0.

    States are [..., C, *spatial] with `ndim` trailing spatial axes; every
    leading axis is batch. Gradients flow through whichever input is a
    tracked tensor (the predicted state during fine-tuning); the degenerate
    mask itself is data-dependent but constant. Mode selection is made on
    u_t0 (the reference) and reused for u_ti so both see the same modes.
    """
    a = as_tensor(u_t0)
    b = as_tensor(u_ti)
    if a.shape != b.shape:
        raise ShapeError(f"state shapes differ: {a.shape} vs {b.shape}")
    z0, freqs = kept_coefficient_pairs(a, sel, ndim)
    zi, _ = kept_coefficient_pairs(b, sel, ndim, freqs=freqs)

    lead = (None,) * (z0.ndim - 1)
    part = lambda z, j: z.slice(lead + (j,), lead + (j + 1,)).reshape(z.shape[:-1])
    re0, im0 = part(z0, 0), part(z0, 1)
    rei, imi = part(zi, 0), part(zi, 1)

    # 1e-300 keeps sqrt off exact zero; anything that small is masked anyway
    m0 = (re0 * re0 + im0 * im0 + 1e-300).sqrt()
    mi = (rei * rei + imi * imi + 1e-300).sqrt()

    degenerate = (m0.data <= eps_m) | (mi.data <= eps_m)
    mask = Tensor(degenerate.astype(np.float64))
    live = Tensor(1.0 - mask.data)

    denom = mi * m0 + mask                  # masked entries: denom >= 1, no 0/0
    re_dphi = (rei * re0 + imi * im0) / denom
    im_dphi = (imi * re0 - rei * im0) / denom
    ratio = mi / (m0 + mask)

    re_b = re_dphi * live + mask            # neutral triple (1, 0, 0)
    im_b = im_dphi * live
    ratio_b = ratio * live + mask
    log_r = ratio_b.log().clamp(-10.0, 10.0)

    base = re_b.shape
    column = lambda t: t.reshape(base + (1,))
    triples = concat([column(re_b), column(im_b), column(log_r)], axis=len(base))
    return PhysicsFeatures(triples, ratio_b, freqs)


# --------------------------------------------------------------------------
# caption tower

_TOKEN_RE = re.compile(r"\\[A-Za-z]+|\d+\.\d+|\d+|[A-Za-z]+|[^\sA-Za-z0-9]")


def tokenize_caption(caption: str) -> list[str]:
    """LaTeX control sequences, numbers, words, single punctuation marks."""
    return _TOKEN_RE.findall(caption)


def caption_token_ids(caption: str, vocab: int = 4096) -> np.ndarray:
    toks = tokenize_caption(caption)
    if not toks:
        raise ValueError(f"caption has no tokens: {caption!r}")
    ids = [int.from_bytes(hashlib.sha256(t.encode("utf-8")).digest()[:8], "big")
           % vocab for t in toks]
    return np.asarray(ids, dtype=np.intp)


def _l2_row(row: Tensor) -> Tensor:
    """Normalize a [1, d] row by its scalar norm (safe at zero)."""
    norm = ((row * row).sum() + 1e-300).sqrt()
    return row / norm


def caption_encode(caption: str, params: AlignerParams) -> Tensor:
    """Caption -> L2-normalized [d_s] embedding (deterministic per weights)."""
    ids = caption_token_ids(caption, params.config.vocab)
    rows = params.embed.gather(0, ids)                  # [n_tok, d_t]
    pooled = rows.mean((0,)).reshape(1, params.config.d_t)
    return _l2_row(pooled @ params.text_proj).reshape(int(params.config.d_s))


def _embed_rows(captions: Sequence[str], params: AlignerParams) -> Tensor:
    rows = [caption_encode(c, params).reshape(1, int(params.config.d_s))
            for c in captions]
    return concat(rows, axis=0)                          # [B, d_s]


def _feature_rows(feats: PhysicsFeatures, params: AlignerParams) -> Tensor:
    flat = feats.flat()
    if flat.shape[-1] != params.n_features:
        raise ShapeError(f"feature width {flat.shape[-1]} vs aligner "
                         f"{params.n_features} (selection/channels mismatch)")
    if flat.ndim == 1:
        flat = flat.reshape(1, flat.shape[0])
    proj = flat @ params.feat_proj                       # [B, d_s]
    rows = [_l2_row(proj.slice((i, None), (i + 1, None)))
            for i in range(proj.shape[0])]
    return concat(rows, axis=0)


# --------------------------------------------------------------------------
# losses

def _diagonal_nll(logits: Tensor) -> Tensor:
    """Mean -log softmax(logits)[i, i] over rows."""
    n = logits.shape[0]
    probs = logits.softmax()
    diag = probs.reshape((n * n,)).gather(0, np.arange(n) * n + np.arange(n))
    return -(diag.log().mean())


def _alignment_logits(captions: Sequence[str], feats: PhysicsFeatures,
                      params: AlignerParams, config: AlignerConfig) -> Tensor:
    text = _embed_rows(captions, params)                 # [B, d_s]
    phys = _feature_rows(feats, params)                  # [B, d_s]
    if text.shape[0] != phys.shape[0]:
        raise ShapeError(f"{text.shape[0]} captions vs {phys.shape[0]} states")
    return (phys @ text.transpose((1, 0))) * (1.0 / config.tau)


def align_loss(captions: Sequence[str], u_t0, u_ti, params: AlignerParams,
               config: AlignerConfig | None = None) -> Tensor:
    """Symmetric InfoNCE + lam * (per-sample |mean R - 1|, batch-averaged).

    Fields are [B, C, *spatial]; positives sit on the diagonal.
    """
    config = params.config if config is None else config
    n = len(captions)
    if n < 2:
        raise ShapeError(f"contrastive batch needs >= 2 samples, got {n}")
    u_t0 = as_tensor(u_t0)
    if u_t0.ndim != params.ndim + 2 or u_t0.shape[0] != n:
        raise ShapeError(f"states must be [B={n}, C, *spatial], got {u_t0.shape}")
    feats = physics_features(u_t0, u_ti, params.selection, params.ndim,
                             config.eps_m)
    logits = _alignment_logits(captions, feats, params, config)
    l_eq = (_diagonal_nll(logits) + _diagonal_nll(logits.transpose((1, 0)))) * 0.5
    per_sample = feats.ratios.mean((1, 2)) - Tensor(np.ones(n))
    l_energy = per_sample.abs().mean()
    return l_eq + l_energy * config.lam


def retrieval_accuracy(logits: np.ndarray) -> float:
    """Top-1 diagonal retrieval, mean of both directions."""
    n = logits.shape[0]
    hit_f2t = (np.argmax(logits, axis=1) == np.arange(n)).mean()
    hit_t2f = (np.argmax(logits, axis=0) == np.arange(n)).mean()
    return float((hit_f2t + hit_t2f) / 2.0)


def finetune_loss(pred, truth: np.ndarray, captions: Sequence[str],
                  params: AlignerParams, config: AlignerConfig | None = None,
                  sigma_floor: float = 1e-8) -> tuple[Tensor, float, float]:
    """L_ft = L_sim - s with s the caption/feature cosine on the last frame.

    `pred` holds frames 1..P [B, P, C, *spatial]; `truth` holds frames 0..P
    (one longer) — frame 0 is the feature reference, frames 1..P supervise
    L_sim. Returns (loss, L_sim value, s value); aligner parameters stay
    frozen (the caller steps only the model).
    """
    config = params.config if config is None else config
    p = as_tensor(pred)
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape[1] != p.shape[1] + 1:
        raise ShapeError(f"truth must hold one extra leading frame: "
                         f"pred {p.shape} truth {truth.shape}")
    l_sim = nrmse(p, truth[:, 1:], sigma_floor=sigma_floor)

    last = p.slice((None, p.shape[1] - 1) + (None,) * (p.ndim - 2),
                   (None, p.shape[1]) + (None,) * (p.ndim - 2))
    last = last.reshape((p.shape[0],) + p.shape[2:])     # [B, C, *spatial]
    feats = physics_features(truth[:, 0], last, params.selection, params.ndim,
                             config.eps_m)
    text = _embed_rows(captions, params)
    phys = _feature_rows(feats, params)
    sim = (text * phys).sum((1,)).mean()
    loss = l_sim - sim
    return loss, float(l_sim.data), float(sim.data)


# --------------------------------------------------------------------------
# caption grammar: parse, render, transforms

class GrammarError(ValueError):
    """Caption does not match the generator's template grammar."""


# fixed substitution table (each symbol's legal replacements)
SUBSTITUTION_TABLE: dict[str, tuple[str, ...]] = {
    "u": ("v", "A", "w"), "v": ("u", "A", "w"),
    "A": ("u", "v", "w"), "w": ("u", "v", "A"),
    r"\beta": ("c",), "c": (r"\beta",),
    r"\nu": (r"\eta",), r"\eta": (r"\nu",),
    "x": (r"\xi",), r"\xi": ("x",),
}

_NUM = r"\d+(?:\.\d+)?(?:[eE][+-]?\d+)?"
_TIME = r"(?P<time>\\partial_t|\\frac\{\\partial\}\{\\partial t\})"
_VAR = r"(?P<var>[uvAw])"
_SP1 = r"\\partial_(?P<sp>x|\\xi)"
_SP2 = r"\\partial_\{(?P<sp2>xx|\\xi\\xi)\}"
_NUCOEF = rf"(?P<c0>{_NUM}|\\nu|\\eta)"

_TEMPLATES = {
    "advection": re.compile(
        rf"{_TIME} {_VAR} \+ (?P<c0>{_NUM}|\\beta|c) {_SP1} (?P=var) = 0"),
    "diffusion": re.compile(
        rf"{_TIME} {_VAR} = {_NUCOEF} {_SP2} (?P=var)"),
    "burgers": re.compile(
        rf"{_TIME} {_VAR} \+ {_SP1} \( (?P=var)\^2 / 2 \) = {_NUCOEF} {_SP2} (?P=var)"),
    "reacdiff": re.compile(
        rf"{_TIME} {_VAR} = {_NUCOEF} {_SP2} (?P=var) \+ "
        rf"(?P<c1>{_NUM}|\\rho) (?P=var) \( 1 - (?P=var) \)"),
    "heat": re.compile(
        rf"{_TIME} {_VAR} = {_NUCOEF} \\nabla\^2 (?P=var)"),
    "navierstokes": re.compile(
        rf"{_TIME} \\omega \+ {_VAR} \\cdot \\nabla \\omega = "
        rf"{_NUCOEF} \\nabla\^2 \\omega"),
}

_SCALED_RE = re.compile(
    rf"(?P<s>{_NUM}) \\left\( (?P<lhs>.+?) \\right\) = "
    rf"(?:0|(?P<s2>{_NUM}) \\left\( (?P<rhs>.+) \\right\))")


@dataclass(frozen=True)
class ParsedCaption:
    template: str              # advection/diffusion/burgers/reacdiff/heat/navierstokes
    var: str                   # evolved (or advecting) symbol: u, v, A, or w
    space: str                 # spatial symbol: "x" or "\\xi"
    time_frac: bool            # True: \frac{\partial}{\partial t} notation
    coeffs: tuple[str, ...]    # literal slot strings, numbers or symbols
    scale: str | None = None   # both-sides prefactor, already rendered


def parse_caption(caption: str) -> ParsedCaption:
    scale = None
    inner = caption
    m = _SCALED_RE.fullmatch(caption)
    if m is not None:
        scale = m["s"]
        if m["s2"] is not None and m["s2"] != scale:
            raise GrammarError(f"mismatched scale factors in {caption!r}")
        inner = f"{m['lhs']} = {m['rhs'] if m['rhs'] is not None else '0'}"
    for name, pat in _TEMPLATES.items():
        t = pat.fullmatch(inner)
        if t is None:
            continue
        g = t.groupdict()
        space = g.get("sp") or g.get("sp2") or "x"
        if space == "xx":
            space = "x"
        elif space == r"\xi\xi":
            space = r"\xi"
        if "sp" in g and "sp2" in g and g["sp"] and g["sp2"]:
            if (g["sp"] == "x") != (g["sp2"] == "xx"):
                raise GrammarError(f"mixed spatial symbols in {caption!r}")
        coeffs = tuple(g[k] for k in ("c0", "c1") if g.get(k) is not None)
        return ParsedCaption(name, g.get("var") or "u", space,
                             g["time"] != r"\partial_t", coeffs, scale)
    raise GrammarError(f"caption outside template grammar: {caption!r}")


def render_caption(p: ParsedCaption) -> str:
    dt = r"\frac{\partial}{\partial t}" if p.time_frac else r"\partial_t"
    d1 = rf"\partial_{p.space}"
    d2 = r"\partial_{xx}" if p.space == "x" else r"\partial_{\xi\xi}"
    v = p.var
    c = p.coeffs
    if p.template == "advection":
        lhs, rhs = rf"{dt} {v} + {c[0]} {d1} {v}", "0"
    elif p.template == "diffusion":
        lhs, rhs = rf"{dt} {v}", rf"{c[0]} {d2} {v}"
    elif p.template == "burgers":
        lhs, rhs = rf"{dt} {v} + {d1} ( {v}^2 / 2 )", rf"{c[0]} {d2} {v}"
    elif p.template == "reacdiff":
        lhs, rhs = rf"{dt} {v}", rf"{c[0]} {d2} {v} + {c[1]} {v} ( 1 - {v} )"
    elif p.template == "heat":
        lhs, rhs = rf"{dt} {v}", rf"{c[0]} \nabla^2 {v}"
    elif p.template == "navierstokes":
        lhs = rf"{dt} \omega + {v} \cdot \nabla \omega"
        rhs = rf"{c[0]} \nabla^2 \omega"
    else:
        raise GrammarError(f"unknown template {p.template!r}")
    if p.scale is None:
        return f"{lhs} = {rhs}"
    if rhs == "0":
        return rf"{p.scale} \left( {lhs} \right) = 0"
    return rf"{p.scale} \left( {lhs} \right) = {p.scale} \left( {rhs} \right)"


def _apply_map(p: ParsedCaption, mapping: dict[str, str]) -> ParsedCaption:
    for src, dst in mapping.items():
        if src not in SUBSTITUTION_TABLE or dst not in SUBSTITUTION_TABLE[src]:
            raise ValueError(f"substitution {src!r} -> {dst!r} not in the table")
    var = mapping.get(p.var, p.var)
    space = mapping.get(p.space, p.space)
    coeffs = tuple(mapping.get(c, c) for c in p.coeffs)
    return replace(p, var=var, space=space, coeffs=coeffs)


def substitute_caption(caption: str, mapping: dict[str, str]) -> str:
    """Rename symbols by the fixed table; unmatched map entries are inert."""
    return render_caption(_apply_map(parse_caption(caption), mapping))


def scale_caption(caption: str, factor: float) -> str:
    """Multiply both sides by `factor`, rendered to 2 decimals.

    A factor that rounds to 1.00 is the identity and leaves the caption
    untouched; rescaling an already-scaled caption is refused (the grammar
    has one prefactor slot).
    """
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    rendered = f"{factor:.2f}"
    if rendered == "1.00":
        return caption
    p = parse_caption(caption)
    if p.scale is not None:
        raise GrammarError("caption already carries a scale factor")
    return render_caption(replace(p, scale=rendered))


def swap_time_notation(caption: str) -> str:
    p = parse_caption(caption)
    return render_caption(replace(p, time_frac=not p.time_frac))


def augment_caption(caption: str, seed: int, count: int = 4) -> list[str]:
    """`count` physics-preserving rewrites; same (caption, seed) -> same list."""
    p = parse_caption(caption)
    digest = int.from_bytes(
        hashlib.sha256(caption.encode("utf-8")).digest()[:4], "big")
    rng = np.random.default_rng([seed, digest])
    out = []
    for _ in range(count):
        q = p
        if rng.random() < 0.5:
            q = replace(q, var=str(rng.choice(SUBSTITUTION_TABLE[q.var])))
        if rng.random() < 0.5:
            q = replace(q, space=str(rng.choice(SUBSTITUTION_TABLE[q.space])))
        new_coeffs = []
        for c in q.coeffs:
            if c in SUBSTITUTION_TABLE and rng.random() < 0.5:
                new_coeffs.append(str(rng.choice(SUBSTITUTION_TABLE[c])))
            else:
                new_coeffs.append(c)
        q = replace(q, coeffs=tuple(new_coeffs))
        if rng.random() < 0.5:
            q = replace(q, time_frac=not q.time_frac)
        if q.scale is None and rng.random() < 0.5:
            factor = f"{rng.uniform(0.5, 1.5):.2f}"
            if factor != "1.00":
                q = replace(q, scale=factor)
        out.append(render_caption(q))
    return out


# --------------------------------------------------------------------------
# alignment training

@dataclass
class AlignTrainConfig:
    steps: int = 500
    batch: int = 32
    lr_init: float = 3e-3
    lr_min: float = 3e-4
    seed: int = 0
    augment_p: float = 0.5
    log_every: int = 25


@dataclass
class AlignResult:
    final_loss: float
    final_accuracy: float
    csv_path: str | None


def align_train(params: AlignerParams, samples: Sequence[tuple[str, np.ndarray, np.ndarray]],
                tcfg: AlignTrainConfig, out_dir: str | None = None) -> AlignResult:
    """Contrastive training over (caption, u_t0, u_ti) triples.

    Triples are grouped by field shape; every step samples one group and a
    batch within it, augmenting each caption with probability `augment_p`.
    Only aligner parameters move.
    """
    if len(samples) < 2:
        raise ShapeError("alignment needs at least 2 samples")
    groups: dict[tuple, list[int]] = {}
    for i, (_, u0, _ui) in enumerate(samples):
        groups.setdefault(np.shape(u0), []).append(i)
    keys = sorted(groups, key=str)
    weights = np.array([len(groups[k]) for k in keys], dtype=np.float64)
    weights /= weights.sum()

    cfg = params.config
    named = params.parameters()
    opt = Adam()
    rng = np.random.default_rng([tcfg.seed, 41])
    rows = []
    loss_val, acc = float("nan"), float("nan")
    for step in range(1, tcfg.steps + 1):
        key = keys[int(rng.choice(len(keys), p=weights))]
        pool = groups[key]
        take = min(tcfg.batch, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        captions, t0s, tis = [], [], []
        for j in idx:
            cap, u0, ui = samples[pool[int(j)]]
            if rng.random() < tcfg.augment_p:
                variants = augment_caption(cap, seed=int(rng.integers(2 ** 31)))
                cap = variants[int(rng.integers(len(variants)))]
            captions.append(cap)
            t0s.append(np.asarray(u0, dtype=np.float64))
            tis.append(np.asarray(ui, dtype=np.float64))
        if len(captions) < 2:
            raise ShapeError("a shape group must hold >= 2 samples to contrast")
        u0b, uib = np.stack(t0s), np.stack(tis)
        lr = cosine_lr(step - 1, tcfg.steps, tcfg.lr_init, tcfg.lr_min)
        with Graph() as g:
            feats = physics_features(u0b, uib, params.selection, params.ndim,
                                     cfg.eps_m)
            logits = _alignment_logits(captions, feats, params, cfg)
            l_eq = (_diagonal_nll(logits)
                    + _diagonal_nll(logits.transpose((1, 0)))) * 0.5
            per_sample = feats.ratios.mean((1, 2)) - Tensor(np.ones(len(captions)))
            loss = l_eq + per_sample.abs().mean() * cfg.lam
            grads = g.backward(loss)
        opt.step(named, {n: grads[t] for n, t in named.items() if t in grads}, lr)
        for t in named.values():
            t.grad = None
        loss_val = float(loss.data)
        acc = retrieval_accuracy(logits.data)
        if step % tcfg.log_every == 0 or step == tcfg.steps:
            rows.append([step, lr, loss_val, acc])

    csv_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "alignment_log.csv")
        write_csv(csv_path, ["step", "lr", "loss", "retrieval_acc"], rows)
    return AlignResult(loss_val, acc, csv_path)


# --------------------------------------------------------------------------
# fine-tuning loop (surrogate weights move, aligner frozen)

def finetune(bundle, trajectories, cfg, aligner_params: AlignerParams | None,
             out_dir: str, use_alignment: bool = True):
    """Fine-tune the surrogate with L_ft = L_sim - s (or plain L_sim).

    Mirrors the pretraining loop — same sampling stream for a given seed, so
    an L_sim-only run is exactly paired with an L_ft run. Returns the
    trainer's PretrainResult; the log's `loss` column is the objective and
    `nrmse` is the L_sim component.
    """
    from .codec import encode_tokens, decode_tokens
    from .model import forward
    from .trainer import (PretrainResult, split_heldout,
                          save_training_checkpoint)

    if use_alignment and aligner_params is None:
        raise ShapeError("alignment fine-tuning needs aligner parameters")
    os.makedirs(out_dir, exist_ok=True)
    train, held = split_heldout(trajectories, cfg.holdout_fraction, cfg.seed)
    if not train:
        raise ShapeError("empty fine-tuning split")

    # group with captions carried alongside the stacked values
    keyed: dict[tuple, list] = {}
    for t in train:
        keyed.setdefault(t.values.shape, []).append(t)
    dims = sorted({len(s) - 2 for s in keyed})
    pools: dict[int, list[tuple[str, np.ndarray, list[str]]]] = {}
    for shape in sorted(keyed, key=str):
        group = keyed[shape]
        fams = sorted({t.spec.family for t in group})
        label = fams[0] if len(fams) == 1 else "mixed"
        pools.setdefault(len(shape) - 2, []).append(
            (label, np.stack([t.values for t in group]),
             [t.caption for t in group]))
    weights = {d: np.array([g.shape[0] for _, g, _ in pools[d]]) for d in pools}
    for d in weights:
        weights[d] = weights[d] / weights[d].sum()

    params = bundle.parameters()
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 29])
    rows = []
    loss_val = float("nan")
    for step in range(1, cfg.total_steps + 1):
        d = dims[(step - 1) % len(dims)]
        gi = int(rng.choice(len(pools[d]), p=weights[d]))
        label, stacked, captions = pools[d][gi]
        idx = rng.integers(0, stacked.shape[0], size=cfg.batch_size(d))
        batch = stacked[idx]
        caps = [captions[int(i)] for i in idx]
        lr = cosine_lr(step - 1, cfg.total_steps, cfg.lr_init, cfg.lr_min)

        t_steps, n_q = batch.shape[1], batch.shape[2]
        codec = bundle.codecs[d]
        with Graph() as g:
            toks = encode_tokens(batch, codec)
            out = forward(toks, bundle.model)
            head = out.embeddings.slice((None, 0, None),
                                        (None, (t_steps - 1) * n_q, None))
            pred = decode_tokens(head, codec, t_steps - 1, n_q, batch.shape[3:],
                                 freqs=toks.freqs)
            if use_alignment:
                loss, l_sim, _s = finetune_loss(pred, batch, caps, aligner_params,
                                                sigma_floor=cfg.sigma_floor)
            else:
                loss = nrmse(pred, batch[:, 1:], sigma_floor=cfg.sigma_floor)
                l_sim = float(loss.data)
            grads = g.backward(loss)
        opt.step(params, {n: grads[t] for n, t in params.items() if t in grads}, lr)
        for t in params.values():
            t.grad = None
        loss_val = float(loss.data)
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            rows.append([step, lr, d, label, loss_val, l_sim])

    csv_path = os.path.join(out_dir, "finetune_log.csv")
    write_csv(csv_path, ["step", "lr", "dim", "family", "loss", "nrmse"], rows)
    final = os.path.join(out_dir, "model_final.ckpt")
    save_training_checkpoint(final, bundle, opt, cfg.total_steps,
                             rng.bit_generator.state, cfg)
    return PretrainResult(final, csv_path, loss_val, cfg.total_steps, held)


# --------------------------------------------------------------------------
# classification probe

@dataclass
class ProbeResult:
    accuracy: float
    confusion: np.ndarray     # rows: true class, cols: predicted
    classes: list[str]


def classify_probe(features: Sequence, labels: Sequence[str], *, seed: int = 0,
                   steps: int = 500, lr: float = 0.05,
                   holdout: float = 0.2) -> ProbeResult:
    """Multinomial logistic head on frozen feature vectors, 80/20 split.

    `features` holds PhysicsFeatures (flattened internally) or plain
    vectors. Standardization uses train-split statistics only.
    """
    vecs = []
    for f in features:
        v = f.flat().data if isinstance(f, PhysicsFeatures) else np.asarray(f)
        vecs.append(np.ravel(np.asarray(v, dtype=np.float64)))
    x = np.stack(vecs)
    labels = [str(l) for l in labels]
    if len(labels) != x.shape[0]:
        raise ShapeError(f"{len(labels)} labels vs {x.shape[0]} feature rows")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("probe needs >= 2 classes")
    y = np.array([classes.index(l) for l in labels])
    counts = np.bincount(y, minlength=len(classes))
    if counts.min() < 2:
        lacking = classes[int(np.argmin(counts))]
        raise ValueError(f"class {lacking!r} has {counts.min()} sample(s); need >= 2")

    rng = np.random.default_rng([seed, 53])
    train_idx, test_idx = [], []
    for k in range(len(classes)):
        members = np.flatnonzero(y == k)
        perm = members[rng.permutation(members.size)]
        n_test = max(1, int(round(holdout * members.size)))
        test_idx.extend(perm[:n_test])
        train_idx.extend(perm[n_test:])
    train_idx, test_idx = np.array(train_idx), np.array(test_idx)

    mu = x[train_idx].mean(axis=0)
    sd = np.maximum(x[train_idx].std(axis=0), 1e-8)
    xs = (x - mu) / sd

    n_cls = len(classes)
    w = Tensor(np.zeros((x.shape[1], n_cls)), requires_grad=True)
    b = Tensor(np.zeros((1, n_cls)), requires_grad=True)
    xt = Tensor(xs[train_idx])
    yt = y[train_idx]
    opt = Adam()
    pick = np.arange(yt.size) * n_cls + yt
    for _ in range(steps):
        with Graph() as g:
            logits = xt @ w + b
            probs = logits.softmax()
            nll = -(probs.reshape((yt.size * n_cls,)).gather(0, pick)
                    .log().mean())
            grads = g.backward(nll)
        opt.step({"w": w, "b": b}, {"w": grads[w], "b": grads[b]}, lr)
        w.grad = b.grad = None

    scores = xs[test_idx] @ w.data + b.data
    pred = np.argmax(scores, axis=1)
    truth = y[test_idx]
    confusion = np.zeros((n_cls, n_cls), dtype=np.int64)
    for t, q in zip(truth, pred):
        confusion[t, q] += 1
    return ProbeResult(float((pred == truth).mean()), confusion, classes)
