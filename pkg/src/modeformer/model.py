"""Decoder-only transformer over field tokens with a block-causal time mask.

Within one timestep every quantity's token may attend to every other (the
block on the diagonal); across timesteps attention only looks backward:

    allowed(i -> j)  iff  timestep(j) <= timestep(i)  and  j is not padding

where timestep(i) = i // C. The mask is additive with sentinel -1e30, which
float64 absorbs exactly (score - 1e30 == -1e30 for any realistic score), so
prefix outputs are bit-stable no matter what future tokens hold.

Layers are pre-norm: x + Attn(RMSNorm(x)) then x + FFN(RMSNorm(x)), rotary
position mixing on queries/keys with the *timestep index* as position, a
silu-gated-free two-layer FFN, no biases, no final norm (zero layers is the
identity map).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import CodecParams, TokenSequence, decode_tokens, encode_tokens
from .tensor import NEG_MASK_VALUE, ShapeError, Tensor, forward_op

__all__ = [
    "ModelConfig",
    "ModelParams",
    "ModelBundle",
    "DivergenceError",
    "temporal_mask",
    "forward",
    "rollout",
    "init_model_params",
]


class DivergenceError(RuntimeError):
    """A rollout left the trusted magnitude envelope."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    intermediate: int = 256
    rope_base: float = 10000.0
    norm_eps: float = 1e-12

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ShapeError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 2:
            raise ShapeError("head_dim must be even for rotary mixing")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class LayerParams:
    attn_gain: Tensor   # [H]
    wq: Tensor          # [H, H]
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_gain: Tensor    # [H]
    w1: Tensor          # [H, I]
    w2: Tensor          # [I, H]


@dataclass
class ModelParams:
    config: ModelConfig
    layers: list[LayerParams] = field(default_factory=list)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, lp in enumerate(self.layers):
            for name in ("attn_gain", "wq", "wk", "wv", "wo", "ffn_gain", "w1", "w2"):
                out[f"{prefix}layer{i}.{name}"] = getattr(lp, name)
        return out


def init_model_params(config: ModelConfig, rng: np.random.Generator,
                      init_scale: float = 0.02) -> ModelParams:
    h, inter = config.hidden, config.intermediate

    def p(*shape):
        return Tensor(rng.normal(0.0, init_scale, size=shape), requires_grad=True)

    def gain(n):
        return Tensor(np.ones(n), requires_grad=True)

    layers = [
        LayerParams(
            attn_gain=gain(h), wq=p(h, h), wk=p(h, h), wv=p(h, h), wo=p(h, h),
            ffn_gain=gain(h), w1=p(h, inter), w2=p(inter, h),
        )
        for _ in range(config.layers)
    ]
    return ModelParams(config, layers)


def temporal_mask(n_timesteps: int, n_quantities: int,
                  pad_mask: np.ndarray | None = None) -> np.ndarray:
    """Additive [L, L] mask: 0 where attention is allowed, -1e30 elsewhere."""
    if n_timesteps < 1 or n_quantities < 1:
        raise ShapeError(f"mask needs positive T, C; got {n_timesteps}, {n_quantities}")
    length = n_timesteps * n_quantities
    step = np.arange(length) // n_quantities
    allowed = step[None, :] <= step[:, None]
    if pad_mask is not None:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if pad_mask.shape != (length,):
            raise ShapeError(f"pad mask shape {pad_mask.shape} vs token count {length}")
        allowed = allowed & ~pad_mask[None, :]
    return np.where(allowed, 0.0, NEG_MASK_VALUE)


def forward(tokens: TokenSequence, params: ModelParams,
            mask: np.ndarray | None = None) -> TokenSequence:
    """Run the stack; embeddings may be [L, H] or [B, L, H].

    Positions for the rotary mixing are the timestep indices (i // C), so all
    tokens of one physical frame share a position and relative offsets count
    frames, not tokens.
    """
    cfg = params.config
    x = tokens.embeddings
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    b, length, h = x.shape
    if h != cfg.hidden:
        raise ShapeError(f"token width {h} vs model hidden {cfg.hidden}")
    if length != tokens.n_timesteps * tokens.n_quantities:
        raise ShapeError("token count does not match (timesteps, quantities)")

    if mask is None:
        mask = temporal_mask(tokens.n_timesteps, tokens.n_quantities, tokens.pad_mask)
    mask_t = Tensor(np.broadcast_to(mask, (b, cfg.heads, length, length)).copy())
    positions = (np.arange(length) // tokens.n_quantities).astype(np.float64)
    scale = 1.0 / np.sqrt(cfg.head_dim)

    for lp in params.layers:
        hnorm = x.rms_normalize(cfg.norm_eps) * lp.attn_gain
        q = (hnorm @ lp.wq).reshape(b, length, cfg.heads, cfg.head_dim)
        k = (hnorm @ lp.wk).reshape(b, length, cfg.heads, cfg.head_dim)
        v = (hnorm @ lp.wv).reshape(b, length, cfg.heads, cfg.head_dim)
        q = q.rope(positions, cfg.rope_base).transpose((0, 2, 1, 3))  # [B, h, L, d]
        k = k.rope(positions, cfg.rope_base).transpose((0, 2, 1, 3))
        v = v.transpose((0, 2, 1, 3))
        scores = (q @ k.transpose((0, 1, 3, 2))) * scale + mask_t
        att = scores.softmax() @ v                                   # [B, h, L, d]
        merged = att.transpose((0, 2, 1, 3)).reshape(b, length, cfg.hidden)
        x = x + merged @ lp.wo

        fnorm = x.rms_normalize(cfg.norm_eps) * lp.ffn_gain
        x = x + (fnorm @ lp.w1).silu() @ lp.w2

    if squeeze:
        x = x.reshape(length, cfg.hidden)
    return TokenSequence(x, tokens.n_timesteps, tokens.n_quantities,
                         tokens.pad_mask, tokens.freqs)


# --------------------------------------------------------------------------
# bundle: shared transformer + per-dimensionality codecs

@dataclass
class ModelBundle:
    model: ModelParams
    codecs: dict[int, CodecParams]

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def parameters(self) -> dict[str, Tensor]:
        out = self.model.parameters("model.")
        for dim in sorted(self.codecs):
            out.update(self.codecs[dim].parameters(f"codec{dim}d."))
        return out


def rollout(window: np.ndarray, steps: int, bundle: ModelBundle,
            max_context: int | None = None, guard: float = 1e6) -> np.ndarray:
    """Autoregressively extend a field window [T0, C, *spatial] by `steps`.

    Each iteration encodes the (possibly left-truncated) window, runs the
    stack, decodes the last timestep's tokens as the next frame, and appends.
    Frames whose max |value| exceeds `guard` raise DivergenceError.
    """
    window = np.asarray(window, dtype=np.float64)
    if steps < 0:
        raise ShapeError(f"steps must be >= 0, got {steps}")
    d = window.ndim - 2
    if d not in bundle.codecs:
        raise ShapeError(f"bundle has no codec for {d} spatial axes")
    codec = bundle.codecs[d]
    extents = window.shape[2:]
    n_q = window.shape[1]
    frames = [window[i] for i in range(window.shape[0])]

    for _ in range(steps):
        ctx = frames if max_context is None else frames[-max_context:]
        x = np.stack(ctx)                                  # [T, C, *spatial]
        toks = encode_tokens(x, codec)
        out = forward(toks, bundle.model)
        last = out.embeddings.slice(
            (len(ctx) * n_q - n_q, None), (len(ctx) * n_q, None)
        )
        nxt = decode_tokens(last, codec, 1, n_q, extents, freqs=toks.freqs)
        frame = nxt.data[0]
        peak = float(np.abs(frame).max())
        if not np.isfinite(peak) or peak > guard:
            raise DivergenceError(
                f"rollout diverged at step {len(frames) - window.shape[0] + 1}: "
                f"max |u| = {peak:.3e} (guard {guard:.1e})"
            )
        frames.append(frame)

    return np.stack(frames)
