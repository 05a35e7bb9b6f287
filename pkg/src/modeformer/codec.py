"""Field <-> token codec: truncated Fourier modes, lifted and projected.

Encode: real field [T, C, *spatial] -> half-spectrum -> keep a small set of
modes (M of them) -> each complex coefficient (re, im) is lifted 2 -> w by a
linear map -> the M*w vector per (timestep, quantity) is projected to the
token width H. Tokens are ordered timestep-major, quantity-minor.

Decode runs the mirror image (unproject H -> M*w, unlift w -> 2, scatter the
coefficients into an all-zero spectrum at the *target* extents, inverse
transform). Because kept modes are indexed by signed frequency, the same
tokens decode onto any grid that can represent those frequencies — that is
the whole multi-scale story.

One parameter set per spatial dimensionality; the transformer behind it is
shared. All pipeline math runs through autodiff ops, so gradients reach every
map and the input field itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from .fft import Spectrum
from .tensor import ShapeError, Tensor, as_tensor, forward_op

__all__ = [
    "Field",
    "ModeSelection",
    "TruncatedModes",
    "TokenSequence",
    "CodecParams",
    "select_modes",
    "expand_modes",
    "encode_tokens",
    "decode_tokens",
    "init_codec_params",
    "inverse_decoder",
    "kept_coefficient_pairs",
    "kept_count",
    "kept_freqs",
    "spectral_shape",
]


@dataclass
class Field:
    """A spatio-temporal sample: values [T, C, *spatial] plus domain lengths."""

    values: np.ndarray
    lengths: tuple[float, ...]

    @property
    def extents(self) -> tuple[int, ...]:
        return self.values.shape[2:]

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[0]

    @property
    def n_quantities(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ModeSelection:
    """How many and which spectral coefficients survive truncation.

    fixed-low keeps a frequency corner block: indices 0..k-1 on the stored
    half axis, and the k lowest |frequency| bins (ceil(k/2) nonnegative,
    floor(k/2) negative) on every full axis. magnitude-topk keeps the same
    *count* of coefficients, chosen by descending aggregate magnitude with
    ties broken by ascending flat index; kept order is ascending flat index
    so token slots stay stable over time.
    """

    k: int
    policy: str = "fixed-low"

    def __post_init__(self):
        if self.k < 1:
            raise ShapeError(f"selection needs k >= 1, got {self.k}")
        if self.policy not in ("fixed-low", "magnitude-topk"):
            raise ShapeError(f"unknown selection policy {self.policy!r}")


@dataclass
class TruncatedModes:
    """Kept coefficients (flat order) plus their signed frequencies."""

    values: np.ndarray            # complex128, [..., M]
    extents: tuple[int, ...]      # spatial extents the modes came from
    selection: ModeSelection
    freqs: np.ndarray             # [M, d] signed per-axis frequencies

    @property
    def count(self) -> int:
        return self.freqs.shape[0]


@dataclass
class TokenSequence:
    """Transformer-ready embeddings, timestep-major / quantity-minor.

    Token i covers (timestep i // C, quantity i % C). pad_mask marks slots
    belonging to padding quantities; they are never attended to and never
    scored by the loss.
    """

    embeddings: Tensor            # [L, H] or [B, L, H]
    n_timesteps: int
    n_quantities: int
    pad_mask: np.ndarray          # [L] bool
    freqs: np.ndarray | None = None   # carried along for magnitude-topk decode


def spectral_shape(extents: tuple[int, ...]) -> tuple[int, ...]:
    return extents[:-1] + (extents[-1] // 2 + 1,)


def kept_count(sel: ModeSelection, ndim: int) -> int:
    return sel.k ** ndim


def _axis_index_sets(sel: ModeSelection, extents: tuple[int, ...]) -> list[np.ndarray]:
    k = sel.k
    sets = []
    for i, n in enumerate(extents):
        if i == len(extents) - 1:
            half = n // 2 + 1
            if k > half:
                raise ShapeError(f"k={k} exceeds stored bins {half} on the half axis (N={n})")
            sets.append(np.arange(k, dtype=np.intp))
        else:
            if k > n:
                raise ShapeError(f"k={k} exceeds extent {n} on a full axis")
            lo = np.arange((k + 1) // 2, dtype=np.intp)
            hi = np.arange(n - k // 2, n, dtype=np.intp)
            sets.append(np.concatenate([lo, hi]))
    return sets


def kept_freqs(sel: ModeSelection, ndim: int) -> np.ndarray:
    """Signed frequencies of the fixed-low block, extent-independent, [M, d]."""
    k = sel.k
    per_axis = []
    for i in range(ndim):
        if i == ndim - 1:
            per_axis.append(np.arange(k))
        else:
            per_axis.append(np.concatenate([np.arange((k + 1) // 2),
                                            np.arange(-(k // 2), 0)]))
    grids = np.meshgrid(*per_axis, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=-1).astype(np.intp)


def _freqs_to_indices(freqs: np.ndarray, extents: tuple[int, ...]) -> np.ndarray:
    """[M, d] signed frequencies -> [M, d] array indices at given extents."""
    shape = spectral_shape(extents)
    idx = np.empty_like(freqs)
    for j, n in enumerate(extents):
        f = freqs[:, j]
        if j == len(extents) - 1:
            if np.any(f < 0) or np.any(f >= shape[j]):
                raise ShapeError(f"half-axis frequency out of range for extent {n}")
            idx[:, j] = f
        else:
            if np.any(f > n // 2) or np.any(f < -(n // 2)):
                raise ShapeError(f"frequency {f.min()}..{f.max()} unrepresentable at extent {n}")
            idx[:, j] = np.where(f >= 0, f, f + n)
    return idx


def _flat_indices(freqs: np.ndarray, extents: tuple[int, ...]) -> np.ndarray:
    idx = _freqs_to_indices(freqs, extents)
    return np.ravel_multi_index(tuple(idx.T), spectral_shape(extents)).astype(np.intp)


def _indices_to_freqs(idx: np.ndarray, extents: tuple[int, ...]) -> np.ndarray:
    freqs = np.array(idx, dtype=np.intp, copy=True)
    for j, n in enumerate(extents[:-1]):
        f = freqs[:, j]
        freqs[:, j] = np.where(f <= n // 2, f, f - n)
    return freqs


def select_modes(spec: Spectrum, sel: ModeSelection) -> TruncatedModes:
    """Truncate a spectrum; leading (batch) axes share one selection.

    For magnitude-topk the aggregate is the mean |value| over batch axes,
    so a whole trajectory picks a single stable mode set.
    """
    d = spec.ndim_spatial
    modes = np.asarray(spec.modes, dtype=np.complex128)
    sshape = spectral_shape(spec.extents)
    m = kept_count(sel, d)
    if sel.policy == "fixed-low":
        freqs = kept_freqs(sel, d)
        _axis_index_sets(sel, spec.extents)  # validates k against extents
    else:
        flat = modes.reshape(modes.shape[: modes.ndim - d] + (prod(sshape),))
        mag = np.abs(flat)
        while mag.ndim > 1:
            mag = mag.mean(axis=0)
        order = np.argsort(-mag, kind="stable")  # ties -> ascending flat index
        kept = np.sort(order[:m])
        freqs = _indices_to_freqs(
            np.stack(np.unravel_index(kept, sshape), axis=-1).astype(np.intp),
            spec.extents,
        )
    flat_idx = _flat_indices(freqs, spec.extents)
    flat = modes.reshape(modes.shape[: modes.ndim - d] + (prod(sshape),))
    return TruncatedModes(flat[..., flat_idx], spec.extents, sel, freqs)


def expand_modes(tm: TruncatedModes, extents: tuple[int, ...] | None = None) -> Spectrum:
    """Zero-fill the kept coefficients back into a full half-spectrum."""
    extents = tm.extents if extents is None else tuple(int(n) for n in extents)
    sshape = spectral_shape(extents)
    flat_idx = _flat_indices(tm.freqs, extents)
    out = np.zeros(tm.values.shape[:-1] + (prod(sshape),), dtype=np.complex128)
    out[..., flat_idx] = tm.values
    return Spectrum(out.reshape(out.shape[:-1] + sshape), extents)


# --------------------------------------------------------------------------
# learned maps

@dataclass
class CodecParams:
    """Linear lift/project pair and its decode mirror for one dimensionality."""

    ndim: int
    width: int                    # w: per-mode lifted size
    hidden: int                   # H: token size
    selection: ModeSelection
    lift_w: Tensor                # [2, w]
    proj_w: Tensor                # [M*w, H]
    unproj_w: Tensor              # [H, M*w]
    unlift_w: Tensor              # [w, 2]
    lift_b: Tensor | None = None  # [w]
    proj_b: Tensor | None = None  # [H]
    unproj_b: Tensor | None = None
    unlift_b: Tensor | None = None

    @property
    def kept(self) -> int:
        return kept_count(self.selection, self.ndim)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name in ("lift_w", "proj_w", "unproj_w", "unlift_w",
                     "lift_b", "proj_b", "unproj_b", "unlift_b"):
            t = getattr(self, name)
            if t is not None:
                out[prefix + name] = t
        return out


def init_codec_params(ndim: int, sel: ModeSelection, width: int, hidden: int,
                      rng: np.random.Generator, bias: bool = True,
                      init_scale: float = 0.02) -> CodecParams:
    m = kept_count(sel, ndim)

    def p(*shape):
        return Tensor(rng.normal(0.0, init_scale, size=shape), requires_grad=True)

    def z(*shape):
        return Tensor(np.zeros(shape), requires_grad=True) if bias else None

    return CodecParams(
        ndim=ndim, width=width, hidden=hidden, selection=sel,
        lift_w=p(2, width), proj_w=p(m * width, hidden),
        unproj_w=p(hidden, m * width), unlift_w=p(width, 2),
        lift_b=z(width), proj_b=z(hidden), unproj_b=z(m * width), unlift_b=z(2),
    )


def inverse_decoder(params: CodecParams) -> CodecParams:
    """Replace the decode maps with pseudo-inverses of the encode maps.

    Requires zero/absent biases and hidden >= M*w so projection is injective;
    then decode(encode(f)) reproduces any field supported on the kept modes.
    """
    for b in (params.lift_b, params.proj_b):
        if b is not None and np.any(b.data != 0.0):
            raise ShapeError("inverse_decoder needs zero encode biases")
    mw = params.kept * params.width
    if params.hidden < mw:
        raise ShapeError(f"inverse_decoder needs hidden >= kept*width ({params.hidden} < {mw})")
    return CodecParams(
        ndim=params.ndim, width=params.width, hidden=params.hidden,
        selection=params.selection,
        lift_w=params.lift_w, proj_w=params.proj_w,
        unproj_w=Tensor(np.linalg.pinv(params.proj_w.data)),
        unlift_w=Tensor(np.linalg.pinv(params.lift_w.data)),
    )


# --------------------------------------------------------------------------
# differentiable pipeline

def _field_values(field) -> Tensor:
    if isinstance(field, Field):
        return as_tensor(field.values)
    return as_tensor(field)


def kept_coefficient_pairs(field, sel: ModeSelection, ndim: int,
                           freqs: np.ndarray | None = None
                           ) -> tuple[Tensor, np.ndarray]:
    """Kept-mode coefficients of trailing-`ndim` fields, as trailing pairs.

    [..., *spatial] -> ([..., M, 2], freqs [M, ndim]); every leading axis is
    batch. Coefficients are scaled by 1/prod(extents): the coefficients of
    the continuous interpolant, identical for the same function sampled at
    any resolution. Passing `freqs` pins the selection (needed to evaluate a
    magnitude-topk choice made on a different field).
    """
    x = _field_values(field)
    if x.ndim < ndim + 1:
        raise ShapeError(f"field rank {x.ndim} has no batch axis ahead of "
                         f"{ndim} spatial axes")
    lead = x.shape[: x.ndim - ndim]
    extents = x.shape[x.ndim - ndim:]

    spec_pairs = forward_op("rfft", (x,), {"ndim": ndim})        # [..., *sshape, 2]
    sshape = spectral_shape(extents)

    if freqs is None:
        if sel.policy == "fixed-low":
            freqs = kept_freqs(sel, ndim)
            _axis_index_sets(sel, extents)
        else:
            tm = select_modes(
                Spectrum(spec_pairs.data[..., 0] + 1j * spec_pairs.data[..., 1],
                         extents), sel
            )
            freqs = tm.freqs
    flat_idx = _flat_indices(freqs, extents)

    flat = spec_pairs.reshape(lead + (prod(sshape), 2))
    kept = flat.gather(len(lead), flat_idx)                      # [..., M, 2]
    return kept * (1.0 / prod(extents)), freqs


def encode_tokens(field, params: CodecParams, sel: ModeSelection | None = None,
                  n_real_quantities: int | None = None) -> TokenSequence:
    """Field [T, C, *spatial] (or batched [B, T, C, *spatial]) -> tokens.

    Token count L = T*C; pad_mask flags quantities >= n_real_quantities.
    """
    sel = params.selection if sel is None else sel
    x = _field_values(field)
    d = params.ndim
    if x.ndim not in (d + 2, d + 3):
        raise ShapeError(f"field rank {x.ndim} does not fit {d} spatial axes (+T,C[,B])")
    batch = x.shape[: x.ndim - d - 2]
    t_steps, n_q = x.shape[len(batch)], x.shape[len(batch) + 1]

    kept, freqs = kept_coefficient_pairs(x, sel, d)               # [..., T, C, M, 2]
    m = freqs.shape[0]
    lifted = kept @ params.lift_w                                 # [..., T, C, M, w]
    if params.lift_b is not None:
        lifted = lifted + params.lift_b
    stacked = lifted.reshape(batch + (t_steps, n_q, m * params.width))
    tokens = stacked @ params.proj_w                              # [..., T, C, H]
    if params.proj_b is not None:
        tokens = tokens + params.proj_b
    emb = tokens.reshape(batch + (t_steps * n_q, params.hidden))

    pad = np.zeros(t_steps * n_q, dtype=bool)
    if n_real_quantities is not None and n_real_quantities < n_q:
        pad = (np.arange(t_steps * n_q) % n_q) >= n_real_quantities
    return TokenSequence(emb, t_steps, n_q, pad,
                         freqs if sel.policy == "magnitude-topk" else None)


def decode_tokens(tokens, params: CodecParams, n_timesteps: int, n_quantities: int,
                  extents: tuple[int, ...], freqs: np.ndarray | None = None) -> Tensor:
    """Tokens [n, H] / [B, n, H] -> field [T, C, *extents] (or batched).

    `extents` may differ from the encoding grid: kept modes land at the same
    signed frequencies of the target spectrum (zero elsewhere), so one token
    sequence decodes at any compatible resolution.
    """
    x = tokens.embeddings if isinstance(tokens, TokenSequence) else as_tensor(tokens)
    if isinstance(tokens, TokenSequence) and freqs is None:
        freqs = tokens.freqs
    d = params.ndim
    extents = tuple(int(n) for n in extents)
    if freqs is None:
        freqs = kept_freqs(params.selection, d)
        _axis_index_sets(params.selection, extents)
    m = freqs.shape[0]
    if x.ndim not in (2, 3):
        raise ShapeError(f"tokens must be [n, H] or [B, n, H], got {x.shape}")
    if x.shape[-2] != n_timesteps * n_quantities:
        raise ShapeError(
            f"{x.shape[-2]} tokens cannot cover {n_timesteps} x {n_quantities} slots"
        )
    batch = x.shape[:-2]

    flat = x @ params.unproj_w                                    # [..., n, M*w]
    if params.unproj_b is not None:
        flat = flat + params.unproj_b
    lifted = flat.reshape(batch + (n_timesteps, n_quantities, m, params.width))
    pairs = lifted @ params.unlift_w                              # [..., T, C, M, 2]
    if params.unlift_b is not None:
        pairs = pairs + params.unlift_b
    pairs = pairs * float(prod(extents))  # undo the continuous-coefficient scaling

    sshape = spectral_shape(extents)
    flat_idx = _flat_indices(freqs, extents)
    spread = pairs.scatter(len(batch) + 2, flat_idx, prod(sshape))
    spec_pairs = spread.reshape(batch + (n_timesteps, n_quantities) + sshape + (2,))
    return forward_op("irfft", (spec_pairs,), {"ndim": d, "extents": extents})
