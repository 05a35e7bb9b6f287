"""Rollout evaluation: metrics rows, resolution/context sweeps, linear probes.

The reporting unit is one MetricsRow per (family, horizon step, channel),
aggregated over the trajectories of a dataset.  All nRMSE numbers come from
the training loss in per-frame mode, so evaluation and optimization share one
formula.  Divergence-aborted rollouts are flagged in the status column and
carry no number.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from .archive import write_csv
from .codec import encode_tokens
from .datagen import PdeSpec, Trajectory, gen_trajectory
from .model import DivergenceError, ModelBundle, forward, rollout
from .tensor import Graph, ShapeError
from .trainer import nrmse

__all__ = [
    "METRICS_HEADER",
    "MetricsRow",
    "InverseProbeReport",
    "oracle_predictor",
    "persistence_predictor",
    "bundle_predictor",
    "evaluate",
    "write_metrics",
    "sweep_trajectories",
    "scale_sweep",
    "context_sweep",
    "pooled_hidden_state",
    "inverse_probe",
]


METRICS_HEADER = ["experiment", "family", "dim", "grid", "context", "horizon",
                  "channel", "nrmse", "seconds", "seed", "status"]


@dataclass(frozen=True)
class MetricsRow:
    experiment: str
    family: str
    dim: int
    grid: str
    context: int
    horizon: int
    channel: int
    nrmse: float | None          # None when the rollout diverged
    seconds: float
    seed: int
    status: str = "ok"

    def cells(self) -> list:
        return [self.experiment, self.family, self.dim, self.grid,
                self.context, self.horizon, self.channel, self.nrmse,
                self.seconds, self.seed, self.status]


def write_metrics(path: str, rows: Sequence[MetricsRow]) -> None:
    write_csv(path, METRICS_HEADER, [r.cells() for r in rows])


# --------------------------------------------------------------------------
# predictors
#
# A predictor maps (values [T, C, *spatial], context, steps) to the predicted
# continuation [steps, C, *spatial].  It receives the full trajectory so the
# oracle stub can cheat; honest predictors read only values[:context].

Predictor = Callable[[np.ndarray, int, int], np.ndarray]


def oracle_predictor(values: np.ndarray, context: int, steps: int) -> np.ndarray:
    """Ground-truth stub: the harness fixed point at nRMSE = 0."""
    return np.asarray(values, dtype=np.float64)[context:context + steps]


def persistence_predictor(values: np.ndarray, context: int, steps: int) -> np.ndarray:
    """Repeat the last context frame; its error has a closed form per family."""
    last = np.asarray(values, dtype=np.float64)[context - 1:context]
    return np.repeat(last, steps, axis=0)


def bundle_predictor(bundle: ModelBundle, max_context: int | None = None,
                     guard: float = 1e6) -> Predictor:
    """Free-running rollout from the context window of a trained bundle."""

    def predict(values: np.ndarray, context: int, steps: int) -> np.ndarray:
        window = np.asarray(values, dtype=np.float64)[:context]
        full = rollout(window, steps, bundle, max_context=max_context, guard=guard)
        return full[context:]

    return predict


# --------------------------------------------------------------------------
# evaluate

def _grid_label(extents: tuple[int, ...]) -> str:
    return "x".join(str(n) for n in extents)


def evaluate(predictor: Predictor, trajectories: Sequence[Trajectory], *,
             context: int, horizon: int, experiment: str = "eval",
             seed: int = 0, deterministic: bool = False,
             sigma_floor: float = 1e-8) -> list[MetricsRow]:
    """Free-running rollout metrics over a trajectory set.

    Trajectories are grouped by family; every member of a group must share
    one [T, C, *extents] shape.  Rows come out sorted by (family, horizon,
    channel), one per horizon step 1..horizon and channel.  horizon = 0
    yields no rows (header-only CSV).  A DivergenceError anywhere in a group
    flags all of that group's rows.  With deterministic=True the wall-clock
    column is written as 0.0 so rows are bitwise functions of the inputs.
    """
    if not trajectories:
        raise ShapeError("evaluate needs at least one trajectory")
    if context < 1:
        raise ShapeError(f"context must be >= 1, got {context}")
    if horizon < 0:
        raise ShapeError(f"horizon must be >= 0, got {horizon}")
    if horizon == 0:
        return []

    groups: dict[str, list[Trajectory]] = {}
    for tr in trajectories:
        groups.setdefault(tr.spec.family, []).append(tr)

    rows: list[MetricsRow] = []
    for fam in sorted(groups):
        members = groups[fam]
        shapes = {m.values.shape for m in members}
        if len(shapes) > 1:
            raise ShapeError(f"family {fam!r} mixes shapes {sorted(shapes)}")
        t_steps, n_c = members[0].values.shape[:2]
        extents = members[0].values.shape[2:]
        if context + horizon > t_steps:
            raise ShapeError(
                f"context {context} + horizon {horizon} exceeds {t_steps} frames")

        t0 = time.perf_counter()
        preds, diverged = [], False
        for m in members:
            try:
                p = predictor(m.values, context, horizon)
            except DivergenceError:
                diverged = True
                break
            if p.shape != (horizon, n_c) + extents:
                raise ShapeError(
                    f"predictor returned {p.shape}, wanted {(horizon, n_c) + extents}")
            preds.append(p)
        seconds = 0.0 if deterministic else time.perf_counter() - t0

        common = dict(experiment=experiment, family=fam,
                      dim=len(extents), grid=_grid_label(extents),
                      context=context, seconds=seconds, seed=seed)
        if diverged:
            for h in range(1, horizon + 1):
                for c in range(n_c):
                    rows.append(MetricsRow(horizon=h, channel=c, nrmse=None,
                                           status="divergent", **common))
            continue

        target = np.stack([m.values[context:context + horizon] for m in members])
        pred = np.stack(preds)
        with Graph():
            per = nrmse(pred, target, per_frame=True,
                        sigma_floor=sigma_floor).data   # [B, horizon, C]
        mean = per.mean(axis=0)
        for h in range(1, horizon + 1):
            for c in range(n_c):
                rows.append(MetricsRow(horizon=h, channel=c,
                                       nrmse=float(mean[h - 1, c]), **common))
    return rows


# --------------------------------------------------------------------------
# sweeps

def sweep_trajectories(family: str, coefficients: dict[str, float],
                       extents: tuple[int, ...], *, n_traj: int, t_steps: int,
                       dt: float, seed: int, ic_modes: int = 4,
                       lengths: tuple[float, ...] | None = None) -> list[Trajectory]:
    """Fresh trajectories for one sweep cell.

    The per-trajectory seed ignores the grid size, and the IC sampler is
    resolution-independent, so one (seed, i) names one continuum initial
    state across every size in a sweep: resolution is the only variable.
    """
    if lengths is None:
        lengths = (1.0,) * len(extents)
    out = []
    for i in range(n_traj):
        spec = PdeSpec(family, dict(coefficients), tuple(extents), lengths,
                       n_steps=t_steps, dt=dt, seed=seed * 100003 + i,
                       ic_modes=ic_modes)
        out.append(gen_trajectory(spec))
    return out


def _mode_floor(bundle: ModelBundle, d: int) -> int:
    sel = bundle.codecs[d].selection
    return 2 * sel.k


def scale_sweep(bundle: ModelBundle, family: str, coefficients: dict[str, float],
                sizes: Sequence[int], *, context: int, horizon: int,
                n_traj: int, t_steps: int, dt: float, seed: int = 0,
                ic_modes: int = 4, deterministic: bool = False,
                experiment: str = "scale-sweep") -> list[MetricsRow]:
    """One checkpoint, several grid sizes, no re-training.

    Each size gets freshly generated trajectories (same continuum initial
    states, resampled).  Rows for a given size are exactly what evaluate()
    returns on sweep_trajectories() with the same arguments, so the
    training-size row is bitwise comparable to a plain evaluation.
    """
    from .datagen import _FAMILY_NDIM   # family -> spatial rank
    d = _FAMILY_NDIM[family]
    if d not in bundle.codecs:
        raise ShapeError(f"bundle has no codec for {d} spatial axes")
    floor = _mode_floor(bundle, d)
    uniq = []
    for n in sizes:
        n = int(n)
        if n < 4 or n & (n - 1):
            raise ShapeError(f"grid size {n} is not a power of two >= 4")
        if n < floor:
            raise ShapeError(f"grid size {n} below mode requirement {floor}")
        if n not in uniq:
            uniq.append(n)

    rows: list[MetricsRow] = []
    pred = bundle_predictor(bundle)
    for n in uniq:
        trajs = sweep_trajectories(family, coefficients, (n,) * d,
                                   n_traj=n_traj, t_steps=t_steps, dt=dt,
                                   seed=seed, ic_modes=ic_modes)
        rows.extend(evaluate(pred, trajs, context=context, horizon=horizon,
                             experiment=experiment, seed=seed,
                             deterministic=deterministic))
    return rows


def context_sweep(predictor: Predictor, trajectories: Sequence[Trajectory],
                  lengths: Sequence[int], *, horizon: int, seed: int = 0,
                  deterministic: bool = False,
                  experiment: str = "context-sweep") -> list[MetricsRow]:
    """Rollout accuracy and wall-clock against context length.

    Duplicate lengths are dropped with a warning.  The trend is reported,
    never asserted; with deterministic=False the seconds column carries the
    real prediction wall-clock per (family, length) cell.
    """
    t_steps = min(tr.values.shape[0] for tr in trajectories)
    uniq: list[int] = []
    for L in lengths:
        L = int(L)
        if L in uniq:
            warnings.warn(f"duplicate context length {L} dropped", stacklevel=2)
            continue
        if not (1 <= L <= t_steps - horizon):
            raise ShapeError(
                f"context length {L} outside [1, {t_steps - horizon}]")
        uniq.append(L)

    rows: list[MetricsRow] = []
    for L in uniq:
        rows.extend(evaluate(predictor, trajectories, context=L,
                             horizon=horizon, experiment=experiment,
                             seed=seed, deterministic=deterministic))
    return rows


# --------------------------------------------------------------------------
# linear probe on frozen hidden states

def pooled_hidden_state(bundle: ModelBundle, values: np.ndarray) -> np.ndarray:
    """Mean of the final-layer token states for one trajectory [T, C, *sp]."""
    values = np.asarray(values, dtype=np.float64)
    d = values.ndim - 2
    if d not in bundle.codecs:
        raise ShapeError(f"bundle has no codec for {d} spatial axes")
    with Graph():
        toks = encode_tokens(values, bundle.codecs[d])
        out = forward(toks, bundle.model)
        h = out.embeddings.data
    return h.mean(axis=0)


@dataclass(frozen=True)
class InverseProbeReport:
    target: str
    r2: float
    rmse: float
    n_train: int
    n_test: int
    alpha: float
    coefficients: np.ndarray = dc_field(repr=False, default=None)


def inverse_probe(bundle: ModelBundle, trajectories: Sequence[Trajectory],
                  target: str, *, alpha: float = 1e-3, holdout: float = 0.2,
                  seed: int = 0, shuffle_targets: bool = False) -> InverseProbeReport:
    """Ridge regression from frozen mean-pooled hidden states to a coefficient.

    Requires >= 100 trajectories whose spec carries `target` with at least
    two distinct values.  Features are standardized on the training split;
    R^2 and RMSE are reported on a held-out fraction.  shuffle_targets=True
    permutes the labels first (permutation control).
    """
    n = len(trajectories)
    if n < 100:
        raise ShapeError(f"inverse probe needs >= 100 trajectories, got {n}")
    y = np.array([float(tr.spec.coefficients[target]) for tr in trajectories])
    if np.ptp(y) == 0.0:
        raise ValueError(f"target {target!r} is constant across the dataset")

    x = np.stack([pooled_hidden_state(bundle, tr.values) for tr in trajectories])
    rng = np.random.default_rng([seed, 71])
    if shuffle_targets:
        y = y[rng.permutation(n)]
    perm = rng.permutation(n)
    n_test = max(1, int(round(holdout * n)))
    test, train = perm[:n_test], perm[n_test:]

    mu, sd = x[train].mean(axis=0), x[train].std(axis=0)
    sd = np.maximum(sd, 1e-8)
    xtr, xte = (x[train] - mu) / sd, (x[test] - mu) / sd
    y_mean = y[train].mean()

    gram = xtr.T @ xtr + alpha * np.eye(xtr.shape[1])
    w = np.linalg.solve(gram, xtr.T @ (y[train] - y_mean))
    pred = xte @ w + y_mean

    resid = y[test] - pred
    ss_res = float(resid @ resid)
    centered = y[test] - y[test].mean()
    ss_tot = float(centered @ centered)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    rmse = float(np.sqrt(ss_res / n_test))
    return InverseProbeReport(target, float(r2), rmse, len(train), n_test,
                              alpha, w)
