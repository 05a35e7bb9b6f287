"""Trajectory generation: band-limited ICs + classical spectral solvers.

Families (all periodic, unit-RMS band-limited initial data):

    advection1d       u_t + beta u_x = 0                 exact spectral
    diffusion1d       u_t = nu u_xx                      exact spectral
    burgers1d         u_t + (u^2/2)_x = (nu/pi) u_xx     pseudo-spectral RK4
    reacdiff1d        u_t = nu u_xx + rho u (1 - u)      IMEX (semi-implicit)
    heat2d / heat3d   u_t = nu lap(u)                    exact spectral
    navierstokes2d    w_t + (u . grad) w = nu lap(w)     RK4 + viscous
                      (vorticity form)                   integrating factor

Analytic families evolve by *stepwise* multiplication with the one-interval
propagator; ``analytic_solution`` jumps straight to time t from any stored
frame — two separate numerical routes, which is what lets trajectories be
checked against the closed form at every step.

ICs draw a fixed number of complex mode coefficients in a fixed order from
the seed, independent of grid size, so the same seed means the same
continuous function at every resolution. Quadratic terms are 2/3-dealiased.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from math import ceil, pi, prod

import numpy as np

from .codec import Field
from .fft import Spectrum, irfft_nd, rfft_nd
from .tensor import ShapeError

__all__ = [
    "PdeSpec",
    "Trajectory",
    "StabilityError",
    "FAMILIES",
    "COEFFICIENT_ORDER",
    "gen_trajectory",
    "analytic_solution",
    "band_limited_ic",
    "caption_for",
    "burgers_step",
    "fisher_step",
    "ns2d_step",
    "stability_limits",
]


class StabilityError(RuntimeError):
    """A pseudo-spectral step was asked to exceed its stability envelope."""


COEFFICIENT_ORDER: dict[str, tuple[str, ...]] = {
    "advection1d": ("beta",),
    "diffusion1d": ("nu",),
    "burgers1d": ("nu",),
    "reacdiff1d": ("nu", "rho"),
    "heat2d": ("nu",),
    "navierstokes2d": ("nu",),
    "heat3d": ("nu",),
}

_FAMILY_NDIM = {
    "advection1d": 1, "diffusion1d": 1, "burgers1d": 1, "reacdiff1d": 1,
    "heat2d": 2, "navierstokes2d": 2, "heat3d": 3,
}

FAMILIES: tuple[str, ...] = tuple(COEFFICIENT_ORDER)

_ANALYTIC = ("advection1d", "diffusion1d", "heat2d", "heat3d")


@dataclass(frozen=True)
class PdeSpec:
    """Everything needed to reproduce one trajectory bit-for-bit."""

    family: str
    coefficients: dict[str, float]
    extents: tuple[int, ...]
    lengths: tuple[float, ...]
    n_steps: int                 # stored frames, including the IC
    dt: float                    # interval between stored frames
    seed: int
    ic_modes: int = 8            # band limit |k| <= ic_modes
    ic_decay: float = 1.0        # spectral envelope (1 + |k|^2)^(-decay/2)
    substeps: int | None = None  # force internal substeps (pseudo-spectral only)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ShapeError(f"unknown family {self.family!r}; know {sorted(FAMILIES)}")
        d = _FAMILY_NDIM[self.family]
        if len(self.extents) != d or len(self.lengths) != d:
            raise ShapeError(f"{self.family} is {d}-dimensional, got extents {self.extents}")
        for n in self.extents:
            if n < 4 or n & (n - 1):
                raise ShapeError(f"extents must be powers of two >= 4, got {self.extents}")
        for L in self.lengths:
            if L <= 0:
                raise ShapeError("domain lengths must be positive")
        missing = [c for c in COEFFICIENT_ORDER[self.family] if c not in self.coefficients]
        if missing:
            raise ShapeError(f"{self.family} needs coefficients {missing}")
        if self.n_steps < 1:
            raise ShapeError("n_steps must be >= 1")
        if self.dt <= 0:
            raise ShapeError("dt must be positive")
        if not (1 <= self.ic_modes < min(self.extents) // 2):
            raise ShapeError(
                f"ic_modes {self.ic_modes} must stay below Nyquist of extents {self.extents}"
            )

    @property
    def ndim(self) -> int:
        return len(self.extents)

    def coefficient_vector(self) -> np.ndarray:
        return np.array([self.coefficients[c] for c in COEFFICIENT_ORDER[self.family]])


@dataclass
class Trajectory:
    spec: PdeSpec
    values: np.ndarray           # [T, C, *extents] float64
    caption: str

    def field(self) -> Field:
        return Field(self.values, self.spec.lengths)

    @property
    def n_quantities(self) -> int:
        return self.values.shape[1]


# --------------------------------------------------------------------------
# initial conditions

def _ic_mode_list(d: int, kmax: int) -> list[tuple[int, ...]]:
    """Fixed draw order for the free coefficients of a real band-limited field.

    Last axis runs 0..kmax (half spectrum); leading axes run -kmax..kmax.
    On the last-axis-zero plane only the lexicographically positive half is
    free (the rest is forced by conjugate symmetry); DC is real.
    """
    modes: list[tuple[int, ...]] = []
    for last in range(kmax + 1):
        for head in np.ndindex(*[2 * kmax + 1] * (d - 1)):
            lead = tuple(h - kmax for h in head)
            coord = lead + (last,)
            if last == 0:
                first_nonzero = next((c for c in lead if c != 0), 0)
                if first_nonzero < 0:
                    continue  # forced by symmetry
            modes.append(coord)
    return modes


def band_limited_ic(rng: np.random.Generator, extents: tuple[int, ...],
                    kmax: int, decay: float = 1.0) -> np.ndarray:
    """Real field with |k| <= kmax per axis, exactly unit RMS, any grid.

    Coefficients are drawn in a fixed order (never touching the grid size),
    so one rng state yields samples of one continuous function at every
    resolution. Normalization uses the Parseval sum of the coefficients, not
    grid statistics, hence is also resolution-independent.
    """
    d = len(extents)
    if not (1 <= kmax < min(extents) // 2):
        raise ShapeError(f"kmax {kmax} must stay below Nyquist of {extents}")
    coeffs: dict[tuple[int, ...], complex] = {}
    for coord in _ic_mode_list(d, kmax):
        k2 = sum(c * c for c in coord)
        env = (1.0 + k2) ** (-decay / 2.0)
        if all(c == 0 for c in coord):
            coeffs[coord] = complex(rng.normal() * env, 0.0)
        else:
            re, im = rng.normal(size=2)
            coeffs[coord] = complex(re * env, im * env)

    sshape = extents[:-1] + (extents[-1] // 2 + 1,)
    a = np.zeros(sshape, dtype=np.complex128)
    power = 0.0
    for coord, val in coeffs.items():
        idx = tuple(c % n for c, n in zip(coord[:-1], extents[:-1])) + (coord[-1],)
        a[idx] = val
        if coord[-1] == 0 and any(coord[:-1]):
            mirror = tuple((-c) % n for c, n in zip(coord[:-1], extents[:-1])) + (0,)
            a[mirror] = np.conj(val)
        # every drawn mode except DC has a conjugate partner (stored or implied)
        power += abs(val) ** 2 if all(c == 0 for c in coord) else 2.0 * abs(val) ** 2
    a /= np.sqrt(power)
    return irfft_nd(Spectrum(a * prod(extents), extents))


def _ic_peak_bound(a_half: np.ndarray, extents: tuple[int, ...]) -> float:
    """Resolution-independent bound max|u| <= sum of all |coefficients|."""
    weights = np.ones(a_half.shape[-1])
    weights[1: (extents[-1] // 2)] = 2.0
    return float(np.sum(np.abs(a_half) * weights))


# --------------------------------------------------------------------------
# spectral utilities for the solvers (grid-scaled coefficients throughout)

def _wavenumbers(extents: tuple[int, ...], lengths: tuple[float, ...]):
    """Physical wavenumber grids (2*pi*k/L) shaped for the half spectrum."""
    d = len(extents)
    ks = []
    for j, (n, L) in enumerate(zip(extents, lengths)):
        if j == d - 1:
            k = np.arange(n // 2 + 1)
        else:
            k = np.where(np.arange(n) <= n // 2, np.arange(n), np.arange(n) - n)
        shape = [1] * d
        shape[j] = k.size
        ks.append((2.0 * np.pi / L) * k.reshape(shape))
    return ks


def _dealias_mask(extents: tuple[int, ...]) -> np.ndarray:
    """2/3-rule mask on the half spectrum: keep |k| <= N/3 per axis."""
    d = len(extents)
    mask = np.ones(extents[:-1] + (extents[-1] // 2 + 1,), dtype=bool)
    for j, n in enumerate(extents):
        if j == d - 1:
            k = np.arange(n // 2 + 1)
        else:
            k = np.abs(np.where(np.arange(n) <= n // 2, np.arange(n), np.arange(n) - n))
        shape = [1] * d
        shape[j] = k.size
        mask &= (k.reshape(shape) <= n // 3)
    return mask


def _propagator(family: str, coeffs: dict[str, float], extents, lengths, t: float):
    """Per-mode multiplier taking a spectrum forward by time t (analytic families)."""
    ks = _wavenumbers(extents, lengths)
    if family == "advection1d":
        return np.exp(-1j * ks[0] * coeffs["beta"] * t)
    k2 = sum(k * k for k in ks)
    return np.exp(-coeffs["nu"] * k2 * t)


# --------------------------------------------------------------------------
# pseudo-spectral steppers

def stability_limits(family: str, extents, lengths, coeffs: dict[str, float],
                     u_peak: float) -> float:
    """Largest admissible internal dt for the explicit part of a stepper."""
    dx = min(L / n for L, n in zip(lengths, extents))
    if family == "burgers1d":
        adv = 0.5 * dx / max(u_peak, 1e-12)
        diff = 0.25 * dx * dx * pi / coeffs["nu"]
        return min(adv, diff)
    if family == "navierstokes2d":
        return 0.5 * dx / max(u_peak, 1e-12)
    if family == "reacdiff1d":
        # reaction handled explicitly: resolve its e-folding time
        return 0.5 / max(abs(coeffs["rho"]), 1e-12)
    raise ShapeError(f"{family} has no explicit stability limit")


def burgers_step(u_hat: np.ndarray, dt: float, nu: float, extents, lengths) -> np.ndarray:
    """One RK4 step of u_t + (u^2/2)_x = (nu/pi) u_xx on the half spectrum.

    Enforces dt <= 0.5 dx / max|u| and dt <= 0.25 dx^2 pi / nu; raises
    StabilityError outside that envelope. The k=0 mode of the flux derivative
    is identically zero, so the spatial mean is conserved exactly.
    """
    (kx,) = _wavenumbers(extents, lengths)
    mask = _dealias_mask(extents)
    diff = (nu / pi) * kx * kx

    def rhs(z):
        u = irfft_nd(Spectrum(z, tuple(extents)))
        flux = rfft_nd(0.5 * u * u, ndim=1).modes * mask
        return -1j * kx * flux - diff * z

    u0 = irfft_nd(Spectrum(u_hat, tuple(extents)))
    limit = stability_limits("burgers1d", extents, lengths, {"nu": nu},
                             float(np.abs(u0).max()))
    if dt > limit:
        raise StabilityError(
            f"burgers_step dt={dt:.3e} exceeds stability limit {limit:.3e}"
        )
    k1 = rhs(u_hat)
    k2 = rhs(u_hat + 0.5 * dt * k1)
    k3 = rhs(u_hat + 0.5 * dt * k2)
    k4 = rhs(u_hat + dt * k3)
    return u_hat + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def fisher_step(u_hat: np.ndarray, dt: float, nu: float, rho: float,
                extents, lengths) -> np.ndarray:
    """Semi-implicit step: diffusion implicit, logistic reaction explicit."""
    (kx,) = _wavenumbers(extents, lengths)
    mask = _dealias_mask(extents)
    limit = stability_limits("reacdiff1d", extents, lengths, {"nu": nu, "rho": rho}, 0.0)
    if dt > limit:
        raise StabilityError(f"fisher_step dt={dt:.3e} exceeds reaction limit {limit:.3e}")
    u = irfft_nd(Spectrum(u_hat, tuple(extents)))
    react = rfft_nd(rho * u * (1.0 - u), ndim=1).modes * mask
    return (u_hat + dt * react) / (1.0 + dt * nu * kx * kx)


def _ns2d_velocity(w_hat: np.ndarray, extents, lengths):
    kx, ky = _wavenumbers(extents, lengths)
    k2 = kx * kx + ky * ky
    inv = np.zeros_like(k2)
    nz = k2 > 0
    inv[nz] = 1.0 / k2[nz]
    psi = w_hat * inv                      # lap(psi) = -w with w = -lap(psi)
    u_hat = 1j * ky * psi                  # u = d psi / d y
    v_hat = -1j * kx * psi                 # v = -d psi / d x
    ext = tuple(extents)
    return irfft_nd(Spectrum(u_hat, ext)), irfft_nd(Spectrum(v_hat, ext))


def ns2d_step(w_hat: np.ndarray, dt: float, nu: float, extents, lengths) -> np.ndarray:
    """RK4 with exact viscous integrating factor for 2D vorticity transport.

    Only the advective CFL limits dt (diffusion is integrated exactly):
    dt <= 0.5 dx / max(|u|, |v|). Mean vorticity is conserved exactly.
    """
    kx, ky = _wavenumbers(extents, lengths)
    k2 = kx * kx + ky * ky
    mask = _dealias_mask(extents)
    ext = tuple(extents)

    def nonlinear(z):
        u, v = _ns2d_velocity(z, extents, lengths)
        wx = irfft_nd(Spectrum(1j * kx * z, ext))
        wy = irfft_nd(Spectrum(1j * ky * z, ext))
        return -rfft_nd(u * wx + v * wy, ndim=2).modes * mask

    u, v = _ns2d_velocity(w_hat, extents, lengths)
    peak = float(max(np.abs(u).max(), np.abs(v).max()))
    limit = stability_limits("navierstokes2d", extents, lengths, {"nu": nu}, peak)
    if dt > limit:
        raise StabilityError(f"ns2d_step dt={dt:.3e} exceeds CFL limit {limit:.3e}")

    e_half = np.exp(-nu * k2 * (0.5 * dt))
    e_full = e_half * e_half
    n1 = nonlinear(w_hat)
    n2 = nonlinear(e_half * (w_hat + 0.5 * dt * n1))
    n3 = nonlinear(e_half * w_hat + 0.5 * dt * n2)
    n4 = nonlinear(e_full * w_hat + dt * e_half * n3)
    return e_full * w_hat + (dt / 6.0) * (e_full * n1 + 2.0 * e_half * (n2 + n3) + n4)


# --------------------------------------------------------------------------
# trajectory generation

def _auto_substeps(spec: PdeSpec, u_peak: float) -> int:
    limit = stability_limits(spec.family, spec.extents, spec.lengths,
                             spec.coefficients, u_peak)
    return max(1, ceil(spec.dt / (0.8 * limit)))


def gen_trajectory(spec: PdeSpec) -> Trajectory:
    """Deterministically synthesize one trajectory from its spec."""
    rng = np.random.default_rng(spec.seed)
    raw = band_limited_ic(rng, spec.extents, spec.ic_modes, spec.ic_decay)

    if spec.family == "reacdiff1d":
        # logistic reaction needs u in (0, 1); rescale by the analytic peak
        # bound so the map is resolution-independent and u0 stays in [0.1, 0.9]
        a = rfft_nd(raw, ndim=1).modes / prod(spec.extents)
        peak = _ic_peak_bound(a, spec.extents)
        u0 = 0.5 + 0.4 * raw / peak
    else:
        u0 = raw

    frames = [u0]
    if spec.family in _ANALYTIC:
        step = _propagator(spec.family, spec.coefficients, spec.extents,
                           spec.lengths, spec.dt)
        z = rfft_nd(u0, ndim=spec.ndim).modes
        for _ in range(spec.n_steps - 1):
            z = z * step
            frames.append(irfft_nd(Spectrum(z, spec.extents)))
    elif spec.family == "burgers1d":
        z = rfft_nd(u0, ndim=1).modes
        for _ in range(spec.n_steps - 1):
            u = irfft_nd(Spectrum(z, spec.extents))
            n_sub = spec.substeps or _auto_substeps(spec, float(np.abs(u).max()))
            h = spec.dt / n_sub
            for _ in range(n_sub):
                z = burgers_step(z, h, spec.coefficients["nu"],
                                 spec.extents, spec.lengths)
            frames.append(irfft_nd(Spectrum(z, spec.extents)))
    elif spec.family == "reacdiff1d":
        z = rfft_nd(u0, ndim=1).modes
        for _ in range(spec.n_steps - 1):
            n_sub = spec.substeps or _auto_substeps(spec, 0.0)
            h = spec.dt / n_sub
            for _ in range(n_sub):
                z = fisher_step(z, h, spec.coefficients["nu"],
                                spec.coefficients["rho"], spec.extents, spec.lengths)
            frames.append(irfft_nd(Spectrum(z, spec.extents)))
    elif spec.family == "navierstokes2d":
        z = rfft_nd(u0, ndim=2).modes
        for _ in range(spec.n_steps - 1):
            u, v = _ns2d_velocity(z, spec.extents, spec.lengths)
            peak = float(max(np.abs(u).max(), np.abs(v).max()))
            n_sub = spec.substeps or _auto_substeps(spec, peak)
            h = spec.dt / n_sub
            for _ in range(n_sub):
                z = ns2d_step(z, h, spec.coefficients["nu"],
                              spec.extents, spec.lengths)
            frames.append(irfft_nd(Spectrum(z, spec.extents)))
    else:  # pragma: no cover - guarded by PdeSpec validation
        raise ShapeError(f"no generator for family {spec.family!r}")

    values = np.stack(frames)[:, None]  # single physical quantity per family
    return Trajectory(spec, values, caption_for(spec))


def analytic_solution(family: str, ic_field: np.ndarray, coefficients: dict[str, float],
                      lengths: tuple[float, ...], t: float) -> np.ndarray:
    """Closed-form state at time t for the analytic families.

    ``ic_field`` is a grid snapshot [C, *extents]; the jump to time t happens
    in one multiplication (no stepping), which makes this the independent
    oracle for stepped trajectories.
    """
    if family not in _ANALYTIC:
        raise ShapeError(f"{family} has no closed-form solution")
    ic_field = np.asarray(ic_field, dtype=np.float64)
    d = ic_field.ndim - 1
    extents = ic_field.shape[1:]
    factor = _propagator(family, coefficients, extents, tuple(lengths), t)
    spec = rfft_nd(ic_field, ndim=d)
    return irfft_nd(Spectrum(spec.modes * factor, extents))


# --------------------------------------------------------------------------
# captions

def _fmt(v: float) -> str:
    return f"{v:.4g}"


def caption_for(spec: PdeSpec) -> str:
    """Governing equation of a trajectory as a compact LaTeX string."""
    c = spec.coefficients
    fam = spec.family
    if fam == "advection1d":
        return rf"\partial_t u + {_fmt(c['beta'])} \partial_x u = 0"
    if fam == "diffusion1d":
        return rf"\partial_t u = {_fmt(c['nu'])} \partial_{{xx}} u"
    if fam == "burgers1d":
        return (rf"\partial_t u + \partial_x ( u^2 / 2 ) = "
                rf"{_fmt(c['nu'] / pi)} \partial_{{xx}} u")
    if fam == "reacdiff1d":
        return (rf"\partial_t u = {_fmt(c['nu'])} \partial_{{xx}} u + "
                rf"{_fmt(c['rho'])} u ( 1 - u )")
    if fam in ("heat2d", "heat3d"):
        return rf"\partial_t u = {_fmt(c['nu'])} \nabla^2 u"
    if fam == "navierstokes2d":
        return (rf"\partial_t \omega + u \cdot \nabla \omega = "
                rf"{_fmt(c['nu'])} \nabla^2 \omega")
    raise ShapeError(f"no caption template for {fam!r}")
