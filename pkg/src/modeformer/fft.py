"""Radix-2 FFTs with half-spectrum storage, plus a direct-DFT oracle.

Conventions (normative for the whole package):

- forward transform is unnormalized: F[k] = sum_n f[n] exp(-2*pi*i*k*n/N)
- inverse carries the full 1/prod(N) factor
- real input: only the last spatial axis is stored half, extent N//2 + 1;
  leading spatial axes keep their full signed-frequency range
- spatial axes are the trailing axes of the array; anything in front is batch

The fast path is an iterative power-of-two Cooley-Tukey, vectorized over all
leading axes. ``dft_reference`` computes the same transform from explicit
DFT matrices in O(N^2) per axis and is the correctness oracle for the fast
path: the two share no code beyond numpy.

Autodiff: ``rfft`` / ``irfft`` ops are registered into the tensor op table,
working on the real (re, im) trailing-pair layout. Their backward passes are
the hand-derived adjoints:

    rfft^T(g)  = Re( S(embed_half(g)) )           S = unnormalized inverse
    irfft^T(g) = w * F(g)[stored bins] / prod(N)  w = 2 on interior last-axis
                                                  bins, 1 on bin 0 / Nyquist
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from .tensor import ShapeError, register_op

__all__ = [
    "Spectrum",
    "rfft_nd",
    "irfft_nd",
    "dft_reference",
    "dft_reference_full",
    "resample_spectrum",
    "pairs_to_complex",
    "complex_to_pairs",
]


@dataclass(frozen=True)
class Spectrum:
    """Half-spectrum of a real field: complex modes plus original extents."""

    modes: np.ndarray            # complex128, [..., N1, ..., N_{d-1}, Nd//2 + 1]
    extents: tuple[int, ...]     # spatial extents (N1, ..., Nd) of the field

    @property
    def ndim_spatial(self) -> int:
        return len(self.extents)


def pairs_to_complex(a: np.ndarray) -> np.ndarray:
    if a.shape[-1] != 2:
        raise ShapeError(f"pair layout needs trailing extent 2, got {a.shape}")
    return a[..., 0] + 1j * a[..., 1]


def complex_to_pairs(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1)


# --------------------------------------------------------------------------
# power-of-two core

_BITREV: dict[int, np.ndarray] = {}
_TWIDDLE: dict[tuple[int, int], np.ndarray] = {}


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bitrev(n: int) -> np.ndarray:
    perm = _BITREV.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        perm = np.zeros(n, dtype=np.intp)
        for _ in range(bits):
            perm = (perm << 1) | (idx & 1)
            idx >>= 1
        _BITREV[n] = perm
    return perm


def _twiddle(m: int, sign: int) -> np.ndarray:
    key = (m, sign)
    tw = _TWIDDLE.get(key)
    if tw is None:
        tw = np.exp(sign * 2j * np.pi * np.arange(m // 2) / m)
        _TWIDDLE[key] = tw
    return tw


def _fft_last(z: np.ndarray, sign: int) -> np.ndarray:
    """Unnormalized transform along the last axis; sign -1 forward, +1 inverse."""
    n = z.shape[-1]
    if not _is_pow2(n):
        raise ShapeError(f"fast transform needs a power-of-two extent, got {n}")
    if n == 1:
        return z.astype(np.complex128, copy=True)
    z = np.ascontiguousarray(z, dtype=np.complex128)[..., _bitrev(n)]
    m = 2
    while m <= n:
        half = m // 2
        tw = _twiddle(m, sign)
        v = z.reshape(z.shape[:-1] + (n // m, m))
        even = v[..., :half]
        odd = v[..., half:] * tw
        z = np.concatenate([even + odd, even - odd], axis=-1).reshape(z.shape)
        m *= 2
    return z


def _transform(z: np.ndarray, ndim: int, sign: int) -> np.ndarray:
    out = z
    for ax in range(z.ndim - ndim, z.ndim):
        out = np.moveaxis(_fft_last(np.moveaxis(out, ax, -1), sign), -1, ax)
    return out


def _check_extents(extents: tuple[int, ...]) -> None:
    if not extents:
        raise ShapeError("need at least one spatial axis")
    if len(extents) > 3:
        raise ShapeError(f"at most 3 spatial axes supported, got {len(extents)}")
    for n in extents:
        if not (_is_pow2(n) and n >= 2):
            raise ShapeError(f"spatial extents must be powers of two >= 2, got {extents}")


# --------------------------------------------------------------------------
# public half-spectrum API (complex, non-autodiff)

def rfft_nd(field: np.ndarray, ndim: int | None = None) -> Spectrum:
    """Forward transform of a real field over its trailing ``ndim`` axes."""
    field = np.asarray(field, dtype=np.float64)
    d = field.ndim if ndim is None else int(ndim)
    if d > field.ndim:
        raise ShapeError(f"ndim {d} exceeds array rank {field.ndim}")
    extents = field.shape[field.ndim - d:]
    _check_extents(extents)
    full = _transform(field.astype(np.complex128), d, -1)
    return Spectrum(full[..., : extents[-1] // 2 + 1], extents)


def _hermitian_extend(modes: np.ndarray, extents: tuple[int, ...]) -> np.ndarray:
    """Rebuild the full spectrum from stored bins via conj-mirror symmetry."""
    d = len(extents)
    nd = extents[-1]
    half = nd // 2 + 1
    if modes.shape[-1] != half or modes.shape[modes.ndim - d:-1] != extents[:-1]:
        raise ShapeError(
            f"mode array {modes.shape} does not match extents {extents}"
        )
    full_shape = modes.shape[: modes.ndim - 1] + (nd,)
    z = np.zeros(full_shape, dtype=np.complex128)
    z[..., :half] = modes
    tail = np.conj(modes[..., 1 : nd // 2][..., ::-1])  # bins nd/2+1 .. nd-1
    batch = modes.ndim - d
    for i, n in enumerate(extents[:-1]):
        mirror = (-np.arange(n)) % n
        tail = np.take(tail, mirror, axis=batch + i)
    z[..., half:] = tail
    return z


def irfft_nd(spec: Spectrum) -> np.ndarray:
    """Inverse of :func:`rfft_nd`; returns the real field at spec.extents.

    For stored planes that are not internally conjugate-symmetric (possible
    when modes are synthesized rather than measured) the result is the real
    part of the full inverse, which is what the decode path relies on.
    """
    _check_extents(spec.extents)
    z = _hermitian_extend(np.asarray(spec.modes, dtype=np.complex128), spec.extents)
    out = _transform(z, len(spec.extents), +1) / prod(spec.extents)
    return np.ascontiguousarray(out.real)


def resample_spectrum(spec: Spectrum, extents: tuple[int, ...]) -> Spectrum:
    """Zero-embed a spectrum into larger extents (trigonometric interpolation).

    Coefficients are rescaled by prod(new/old) so grid samples are preserved;
    Nyquist bins of grown axes are split (leading axes) or halved (last axis)
    to keep the interpolant identical to the band-limited original.
    """
    extents = tuple(int(n) for n in extents)
    src = spec.extents
    if len(extents) != len(src):
        raise ShapeError(f"resample rank mismatch: {src} -> {extents}")
    _check_extents(extents)
    for new, old in zip(extents, src):
        if new < old:
            raise ShapeError(f"resample only grows axes: {src} -> {extents}")
    modes = np.asarray(spec.modes, dtype=np.complex128)
    batch = modes.ndim - len(src)

    def _at(ax: int, where) -> tuple:
        sl = [slice(None)] * modes.ndim
        sl[ax] = where
        return tuple(sl)

    for i, (old, new) in enumerate(zip(src[:-1], extents[:-1])):
        ax = batch + i
        if new == old:
            continue
        shape = list(modes.shape)
        shape[ax] = new
        out = np.zeros(shape, dtype=np.complex128)
        out[_at(ax, slice(0, old // 2))] = modes[_at(ax, slice(0, old // 2))]
        out[_at(ax, slice(new - old // 2 + 1, new))] = modes[_at(ax, slice(old // 2 + 1, old))]
        # the Nyquist bin stands for frequencies +-old/2 at once; split it so the
        # interpolant stays the same band-limited function (symmetry of the
        # source plane keeps the global conj-mirror property intact)
        nyq = 0.5 * modes[_at(ax, slice(old // 2, old // 2 + 1))]
        out[_at(ax, slice(old // 2, old // 2 + 1))] = nyq
        out[_at(ax, slice(new - old // 2, new - old // 2 + 1))] = nyq
        modes = out

    old_h, new_h = src[-1] // 2 + 1, extents[-1] // 2 + 1
    if new_h != old_h:
        shape = list(modes.shape)
        shape[-1] = new_h
        out = np.zeros(shape, dtype=np.complex128)
        out[..., :old_h] = modes
        out[..., old_h - 1] *= 0.5  # source Nyquist becomes an interior bin
        modes = out

    scale = prod(extents) / prod(src)
    return Spectrum(modes * scale, extents)


def dft_reference(field: np.ndarray, ndim: int | None = None) -> Spectrum:
    """O(N^2)-per-axis matrix DFT of a real field; oracle for rfft_nd."""
    full = dft_reference_full(field, ndim)
    field = np.asarray(field)
    d = field.ndim if ndim is None else int(ndim)
    extents = field.shape[field.ndim - d:]
    return Spectrum(full[..., : extents[-1] // 2 + 1], extents)


def dft_reference_full(field: np.ndarray, ndim: int | None = None) -> np.ndarray:
    """Full complex spectrum via explicit DFT matrices (any extents >= 1)."""
    z = np.asarray(field, dtype=np.complex128)
    d = z.ndim if ndim is None else int(ndim)
    if d < 1 or d > z.ndim:
        raise ShapeError(f"ndim {d} invalid for array rank {z.ndim}")
    for ax in range(z.ndim - d, z.ndim):
        n = z.shape[ax]
        k = np.arange(n)
        w = np.exp(-2j * np.pi * np.outer(k, k) / n)
        z = np.moveaxis(np.tensordot(w, np.moveaxis(z, ax, 0), axes=(1, 0)), 0, ax)
    return z


# --------------------------------------------------------------------------
# autodiff ops on the trailing-pair layout

def _op_rfft(datas, attrs):
    (a,) = datas
    d = int(attrs["ndim"])
    if d > a.ndim:
        raise ShapeError(f"rfft ndim {d} exceeds array rank {a.ndim}")
    extents = a.shape[a.ndim - d:]
    _check_extents(extents)
    modes = _transform(a.astype(np.complex128), d, -1)[..., : extents[-1] // 2 + 1]
    out = complex_to_pairs(modes)

    def vjp(g):
        gy = pairs_to_complex(g)
        full_shape = gy.shape[:-1] + (extents[-1],)
        z = np.zeros(full_shape, dtype=np.complex128)
        z[..., : extents[-1] // 2 + 1] = gy
        return (np.ascontiguousarray(_transform(z, d, +1).real),)

    return out, vjp


def _op_irfft(datas, attrs):
    (a,) = datas
    d = int(attrs["ndim"])
    extents = tuple(int(n) for n in attrs["extents"])
    _check_extents(extents)
    modes = pairs_to_complex(a)
    z = _hermitian_extend(modes, extents)
    out = np.ascontiguousarray((_transform(z, d, +1) / prod(extents)).real)

    weights = np.ones(extents[-1] // 2 + 1)
    weights[1 : extents[-1] // 2] = 2.0

    def vjp(g):
        f = _transform(g.astype(np.complex128), d, -1)[..., : extents[-1] // 2 + 1]
        return (complex_to_pairs(f * (weights / prod(extents))),)

    return out, vjp


register_op("rfft", _op_rfft)
register_op("irfft", _op_irfft)
