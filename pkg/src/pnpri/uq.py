"""Ensemble estimates of model uncertainty.

Q denoisers trained with different seeds each drive one reconstruction. The
spread of the Q solutions is summarised pixel-wise by two deviation maps:

``deviation_abs``
    ``sum_q |x_q - mean| / sqrt(Q - 1)``, absolute deviations summed.
``deviation_std``
    The usual sample standard deviation, ``ddof = 1``.

They disagree in general (for ``Q = 2`` and members ``c +/- d`` they give
``2 d`` and ``sqrt(2) d``), so both are kept under separate names.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import write_image
from .errors import DivergenceError
from .solvers import solve_fb, solve_pd

logger = logging.getLogger(__name__)

__all__ = [
    "RatioMap",
    "SolutionEnsemble",
    "default_noise_floor",
    "deviation_abs",
    "deviation_std",
    "ensemble_deviation",
    "ensemble_mean",
    "export_maps",
    "ratio_map",
    "run_ensemble",
]


@dataclass
class SolutionEnsemble:
    """Reconstructions from Q denoiser realisations, ordered by seed."""

    members: list
    member_seeds: list
    solver_kind: str
    traces: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.members) != len(self.member_seeds):
            raise ValueError("one seed per member is required")
        shapes = {np.shape(m) for m in self.members}
        if len(shapes) > 1:
            raise ValueError(f"members differ in shape: {shapes}")

    def __len__(self):
        return len(self.members)


def _stack(sol):
    members = sol.members if isinstance(sol, SolutionEnsemble) else sol
    if len(members) == 0:
        raise ValueError("empty ensemble")
    return np.stack([np.asarray(m, dtype=np.float64) for m in members])


def _shelf_seed(shelf):
    d = getattr(shelf, "entries", None)
    d = d[0].denoiser if d else shelf
    return getattr(d, "seed", 0)


def run_ensemble(op, vis, shelves, solver="pd", cfg=None, seeds=None, workers=None):
    """One reconstruction per shelf.

    Members are ordered by seed, taken from ``seeds`` or else from the
    first denoiser of each shelf. A diverging member is left out and its
    error recorded in ``failures``.
    """
    if solver not in ("fb", "pd"):
        raise ValueError(f"solver must be 'fb' or 'pd', got {solver!r}")
    shelves = list(shelves)
    if len(shelves) < 2:
        raise ValueError("an ensemble needs at least two shelves")
    if seeds is None:
        seeds = [_shelf_seed(s) for s in shelves]
    if len(seeds) != len(shelves):
        raise ValueError("one seed per shelf is required")
    if op.norm_sq is None:
        from .rimodel import operator_norm

        operator_norm(op)
    solve = solve_fb if solver == "fb" else solve_pd

    def one(shelf):
        try:
            return solve(op, vis, shelf, cfg)
        except DivergenceError as exc:
            return exc

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, shelves))
    else:
        results = [one(s) for s in shelves]
    order = sorted(range(len(shelves)), key=lambda i: seeds[i])
    members, kept, traces, failures = [], [], [], {}
    for i in order:
        res = results[i]
        if isinstance(res, Exception):
            logger.warning("ensemble member seed=%s failed: %s", seeds[i], res)
            failures[seeds[i]] = str(res)
            continue
        members.append(res[0])
        traces.append(res[1])
        kept.append(seeds[i])
    return SolutionEnsemble(members, kept, solver, traces, failures)


def _mean(x):
    # Shifted by the first member, so identical members give exactly zero spread.
    return x[0] + (x - x[0]).mean(axis=0)


def _residuals(sol):
    x = _stack(sol)
    if x.shape[0] < 2:
        raise ValueError("deviation needs at least two members")
    return x - _mean(x)


def ensemble_mean(sol):
    return _mean(_stack(sol))


def deviation_abs(sol):
    """``sum_q |x_q - mean| / sqrt(Q - 1)`` per pixel."""
    r = _residuals(sol)
    return np.abs(r).sum(axis=0) / math.sqrt(r.shape[0] - 1)


def deviation_std(sol):
    """Sample standard deviation with ``ddof = 1`` per pixel."""
    r = _residuals(sol)
    return np.sqrt((r * r).sum(axis=0) / (r.shape[0] - 1))


def ensemble_deviation(sol, kind="abs"):
    """Deviation map; ``kind`` is ``"abs"`` or ``"std"``."""
    if kind == "abs":
        return deviation_abs(sol)
    if kind == "std":
        return deviation_std(sol)
    raise ValueError(f"unknown deviation kind {kind!r}")


@dataclass(frozen=True)
class RatioMap:
    """Deviation over mean where ``mask``; ``values`` is 0 elsewhere."""

    values: np.ndarray
    mask: np.ndarray

    def unmasked(self):
        return self.values[self.mask]


def default_noise_floor(op, eta):
    """Product of the peak estimate and the heuristic noise level.

    The peak cancels, leaving ``eta / sqrt(2 ||H||^2)``.
    """
    if op.norm_sq is None:
        raise ValueError("operator norm not computed")
    return eta / math.sqrt(2 * op.norm_sq)


def ratio_map(sol, noise_floor, kind="abs"):
    """Deviation divided by mean on pixels whose mean exceeds ``noise_floor``."""
    if not noise_floor >= 0:
        raise ValueError("noise_floor must be >= 0")
    mean = ensemble_mean(sol)
    dev = ensemble_deviation(sol, kind)
    mask = mean > noise_floor
    values = np.zeros_like(mean)
    values[mask] = dev[mask] / mean[mask]
    return RatioMap(values, mask)


def export_maps(directory, sol, noise_floor, kind="abs"):
    """Write mean, both deviations, the ratio map and its 0/1 mask.

    Returns a mapping of map name to path.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rm = ratio_map(sol, noise_floor, kind)
    maps = {
        "mean": ensemble_mean(sol),
        "deviation_abs": deviation_abs(sol),
        "deviation_std": deviation_std(sol),
        "ratio": rm.values,
        "ratio_mask": rm.mask.astype(np.float64),
    }
    paths = {}
    for name, img in maps.items():
        paths[name] = d / f"{name}.airiimg"
        write_image(paths[name], img)
    return paths
