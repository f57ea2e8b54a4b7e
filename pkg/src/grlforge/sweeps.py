"""Grid sweeps with plateau selection for the robust radius and GRL strength.

The staging is deliberately rigid: the epsilon sweep runs first (at lambda 0),
and the lambda sweep refuses to start without the epsilon result. Star values
are read off the validation curve at the first point where the per-unit slope
to the next grid value drops to the threshold tau or below, i.e. the first
plateau-or-decline point. The lambda curve is scanned on a log10 axis.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .pipeline import SpectraSplit
from .training import TrainConfig, model_for, train

DEFAULT_EPSILON_GRID = (0.0, 0.03, 0.06, 0.12, 0.3)
DEFAULT_LAMBDA_GRID = (0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 500.0)
DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class SweepPoint:
    """Accuracies of one training run at its selected (best-validation) epoch."""

    value: float
    replicate: int
    train_acc: float
    val_acc: float
    test_acc: float


@dataclass(frozen=True)
class SweepResult:
    param: str  # "epsilon" or "lambda"
    grid: tuple
    points: tuple  # one SweepPoint per (grid value, replicate)
    star: float
    tau: float

    def __post_init__(self):
        if self.star not in self.grid:
            raise ValueError(f"star value {self.star} is not a grid member")

    def replicate_accs(self, value, field: str = "val_acc") -> np.ndarray:
        got = [getattr(p, field) for p in self.points if p.value == value]
        if not got:
            raise KeyError(f"no sweep points at {self.param} = {value}")
        return np.asarray(got, dtype=np.float64)

    def mean_val_accs(self) -> np.ndarray:
        return np.asarray(
            [self.replicate_accs(v).mean() for v in self.grid], dtype=np.float64
        )

    def val_variances(self) -> np.ndarray:
        return np.asarray(
            [self.replicate_accs(v).var() for v in self.grid], dtype=np.float64
        )


def plateau_select(values, accs, tau: float, log_axis: bool = False) -> float:
    """First grid value whose forward slope is <= tau, else the last value.

    The slope between adjacent grid points is (acc[i+1] - acc[i]) / dv with dv
    measured on the scanned axis (log10 of the value when log_axis is set), so
    tau has units of accuracy points per unit, not per step. A declining curve
    plateaus immediately: its slope is negative.
    """
    values = [float(v) for v in values]
    accs = [float(a) for a in accs]
    if len(values) != len(accs):
        raise ValueError("values and accs must have matching lengths")
    if len(values) < 2:
        raise ValueError("plateau selection needs at least 2 points")
    axis = [math.log10(v) for v in values] if log_axis else values
    for i in range(len(values) - 1):
        dv = axis[i + 1] - axis[i]
        if dv <= 0:
            raise ValueError("grid must be strictly ascending")
        if (accs[i + 1] - accs[i]) / dv <= tau:
            return values[i]
    return values[-1]  # still rising at the end: no plateau observed


def _run_point(split, cfg: TrainConfig, model_kwargs) -> tuple:
    result = train(model_for(split, cfg, **model_kwargs), split, cfg)
    m = result.metrics[result.best_epoch]
    return m.train_label_acc, m.val_label_acc, m.test_label_acc


def _collect(split, configs, grid, model_kwargs):
    points = []
    for value, replicate, cfg in configs:
        tr, va, te = _run_point(split, cfg, model_kwargs)
        points.append(SweepPoint(value, replicate, tr, va, te))
    return tuple(points)


def _mean_val_curve(points, grid):
    by_value = {v: [] for v in grid}
    for p in points:
        by_value[p.value].append(p.val_acc)
    return [float(np.mean(by_value[v])) for v in grid]


def sweep_epsilon(split: SpectraSplit, base_cfg: TrainConfig, grid=DEFAULT_EPSILON_GRID,
                  tau: float = DEFAULT_TAU, replicates: int = 1,
                  model_kwargs: dict | None = None) -> SweepResult:
    """Train once per grid value (lambda forced to 0) and pick epsilon star."""
    grid = tuple(float(v) for v in grid)
    if len(grid) < 3:
        raise ValueError("epsilon grid needs at least 3 values")
    if list(grid) != sorted(set(grid)):
        raise ValueError("epsilon grid must be strictly ascending")
    if 0.0 not in grid:
        raise ValueError("epsilon grid must include 0 (the clean baseline)")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    configs = [
        (v, r, dataclasses.replace(base_cfg, epsilon=v, lam=0.0, keep="best",
                                   seed=base_cfg.seed + r))
        for v in grid for r in range(replicates)
    ]
    points = _collect(split, configs, grid, model_kwargs or {})
    star = plateau_select(grid, _mean_val_curve(points, grid), tau)
    return SweepResult("epsilon", grid, points, star, tau)


def sweep_lambda(split: SpectraSplit, base_cfg: TrainConfig, epsilon_result: SweepResult,
                 grid=DEFAULT_LAMBDA_GRID, tau: float = DEFAULT_TAU, replicates: int = 1,
                 model_kwargs: dict | None = None) -> SweepResult:
    """Sweep lambda at the already-selected epsilon star, scanning on log10."""
    if not isinstance(epsilon_result, SweepResult) or epsilon_result.param != "epsilon":
        raise ValueError("sweep_lambda requires the epsilon SweepResult first")
    if base_cfg.mode == "CNN":
        raise ValueError("lambda sweep needs OTF or TCI mode (CNN pins lambda to 0)")
    grid = tuple(float(v) for v in grid)
    if any(v < 0 for v in grid):
        raise ValueError("lambda grid values must be > 0 (one 0 baseline allowed)")
    if sum(1 for v in grid if v == 0.0) > 1:
        raise ValueError("at most one lambda = 0 baseline point")
    if list(grid) != sorted(set(grid)):
        raise ValueError("lambda grid must be strictly ascending")
    scan = tuple(v for v in grid if v > 0)
    if len(scan) < 2:
        raise ValueError("lambda grid needs at least 2 positive values")
    if min(scan) > 0.5 or max(scan) < 500.0:
        raise ValueError("lambda grid must span at least [0.5, 500]")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    configs = [
        (v, r, dataclasses.replace(base_cfg, lam=v, epsilon=epsilon_result.star,
                                   keep="best", seed=base_cfg.seed + r))
        for v in grid for r in range(replicates)
    ]
    points = _collect(split, configs, grid, model_kwargs or {})
    scan_points = tuple(p for p in points if p.value > 0)
    star = plateau_select(scan, _mean_val_curve(scan_points, scan), tau, log_axis=True)
    return SweepResult("lambda", grid, points, star, tau)


def _fmt(x) -> str:
    return repr(float(x))


def write_sweep_csv(path, result: SweepResult) -> None:
    lines = ["param,value,replicate,train_acc,val_acc,test_acc"]
    for p in result.points:
        lines.append(
            f"{result.param},{_fmt(p.value)},{p.replicate},"
            f"{_fmt(p.train_acc)},{_fmt(p.val_acc)},{_fmt(p.test_acc)}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_star_csv(path, result: SweepResult) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("param,star_value,tau\n")
        fh.write(f"{result.param},{_fmt(result.star)},{_fmt(result.tau)}\n")


def read_sweep_result(sweep_path, star_path) -> SweepResult:
    """Rebuild a SweepResult from its two CSVs (for cross-process staging)."""
    with open(sweep_path, "r", encoding="utf-8") as fh:
        rows = fh.read().splitlines()
    if not rows or rows[0] != "param,value,replicate,train_acc,val_acc,test_acc":
        raise ValueError(f"{sweep_path}: not a sweep CSV")
    points, params = [], set()
    for row in rows[1:]:
        param, value, rep, tr, va, te = row.split(",")
        params.add(param)
        points.append(SweepPoint(float(value), int(rep), float(tr),
                                 float(va), float(te)))
    if len(params) != 1 or not points:
        raise ValueError(f"{sweep_path}: expected one non-empty parameter sweep")
    with open(star_path, "r", encoding="utf-8") as fh:
        srows = fh.read().splitlines()
    if len(srows) != 2 or srows[0] != "param,star_value,tau":
        raise ValueError(f"{star_path}: not a star summary CSV")
    sparam, star, tau = srows[1].split(",")
    if sparam not in params:
        raise ValueError(f"star parameter {sparam!r} does not match the sweep")
    grid = tuple(sorted(set(p.value for p in points)))
    return SweepResult(sparam, grid, tuple(points), float(star), float(tau))
