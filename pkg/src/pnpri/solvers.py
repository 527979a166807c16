"""Plug-and-play forward-backward and primal-dual reconstruction.

Both solvers take either a :class:`~pnpri.denoise.DenoiserShelf` or a plain
denoiser. With a shelf, the image peak estimate ``alpha`` is refreshed from
the current iterate, the entry whose training noise level sits just below
the heuristic level is selected, and the entry is applied rescaled by
``beta``. A plain denoiser is applied as is.

The iteration stops once the relative change ``|x_{k+1} - x_k| / |x_k|``
stays at or below ``tol`` for ``persistence`` consecutive iterations. From
the first such iteration on, the peak estimate and the selected denoiser are
frozen so that the tail of the run sees one fixed operator.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .denoise import DenoiserShelf, heuristic_sigma, select_denoiser
from .errors import DivergenceError
from .rimodel import dirty_image, epsilon_bound, operator_norm

__all__ = [
    "FBConfig",
    "PDConfig",
    "SolverTrace",
    "project_l2_ball",
    "solve_fb",
    "solve_pd",
    "stopping_check",
]

TRACE_COLUMNS = ("iteration", "rel_change", "residual", "sigma_selected", "beta", "alpha_tilde")


@dataclass
class FBConfig:
    """Forward-backward settings.

    ``gamma`` defaults to ``1.8 eta^2 / ||H||^2``, 90% of the stability limit.
    """

    gamma: float = None
    max_iter: int = 5000
    tol: float = 1e-5
    peak_update_every: int = 1
    persistence: int = 5

    def __post_init__(self):
        _check_common(self)
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be > 0")


@dataclass
class PDConfig:
    """Primal-dual settings.

    Defaults: ``gamma = 1 / ||H||``, ``sigma_dual = 0.99 / (gamma ||H||^2)``
    and ``epsilon`` from :func:`~pnpri.rimodel.epsilon_bound`. A run only
    counts as converged once the residual is also within
    ``epsilon (1 + feas_tol)``.
    """

    gamma: float = None
    sigma_dual: float = None
    epsilon: float = None
    max_iter: int = 5000
    tol: float = 1e-5
    peak_update_every: int = 1
    persistence: int = 5
    feas_tol: float = 1e-3

    def __post_init__(self):
        _check_common(self)
        if not self.feas_tol >= 0:
            raise ValueError("feas_tol must be >= 0")
        for name in ("gamma", "sigma_dual", "epsilon"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ValueError(f"{name} must be > 0")


def _check_common(cfg):
    if cfg.max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if not cfg.tol >= 0:
        raise ValueError("tol must be >= 0")
    if cfg.peak_update_every < 1:
        raise ValueError("peak_update_every must be >= 1")
    if cfg.persistence < 1:
        raise ValueError("persistence must be >= 1")


@dataclass
class SolverTrace:
    """Per-iteration records and the termination reason.

    ``swaps`` lists ``(iteration, sigma)`` each time the selected shelf entry
    changes, the initial selection included. ``frozen_at`` is the iteration
    at which adaptation stopped, or ``None``.
    """

    rel_change: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    sigma_selected: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    alpha_tilde: list = field(default_factory=list)
    swaps: list = field(default_factory=list)
    reason: str = None
    frozen_at: int = None
    epsilon: float = None

    def __len__(self):
        return len(self.rel_change)

    @property
    def converged(self):
        return self.reason == "converged"

    @property
    def final_residual(self):
        return self.residual[-1] if self.residual else math.nan

    def append(self, rel, res, sel):
        self.rel_change.append(float(rel))
        self.residual.append(float(res))
        self.sigma_selected.append(sel[0])
        self.beta.append(sel[1])
        self.alpha_tilde.append(sel[2])

    def rows(self):
        for i in range(len(self)):
            yield (i + 1, self.rel_change[i], self.residual[i], self.sigma_selected[i],
                   self.beta[i], self.alpha_tilde[i])

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(TRACE_COLUMNS)
            for row in self.rows():
                wr.writerow(["" if v is None else repr(v) for v in row])


def stopping_check(trace, tol, persistence=5):
    """True when the last ``persistence`` relative changes are all ``<= tol``."""
    rel = trace.rel_change if isinstance(trace, SolverTrace) else list(trace)
    if len(rel) < persistence:
        return False
    return all(r <= tol for r in rel[-persistence:])


def project_l2_ball(v, center, radius):
    """Euclidean projection of ``v`` onto the ball ``B(center, radius)``."""
    if not radius >= 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    v = np.asarray(v)
    d = v - center
    nrm = np.linalg.norm(d)
    if nrm <= radius:
        return v.copy()
    return center + d * (radius / nrm)


class _Adaptive:
    """Peak tracking and shelf selection shared by both solvers."""

    def __init__(self, denoiser, op, eta, alpha0, every):
        self.shelf = denoiser if isinstance(denoiser, DenoiserShelf) else None
        self.fixed = None if self.shelf else denoiser
        self.op = op
        self.eta = eta
        self.every = every
        self.alpha = None
        self.selection = None
        self.frozen = False
        if self.shelf is not None:
            if not eta > 0:
                raise ValueError("a shelf needs eta > 0 for the heuristic noise level")
            self._select(alpha0 if alpha0 > 0 else 1.0, 0, None)

    def _select(self, alpha, it, trace):
        self.alpha = float(alpha)
        s_heu = heuristic_sigma(self.eta, self.op.norm_sq, self.alpha)
        sel = select_denoiser(self.shelf, s_heu, self.alpha, warn=self.selection is None)
        if trace is not None and (self.selection is None or sel.sigma != self.selection.sigma):
            trace.swaps.append((it, sel.sigma))
        self.selection = sel
        self.denoise = sel.denoiser()

    def start(self, trace):
        if self.shelf is not None:
            trace.swaps.append((0, self.selection.sigma))
        else:
            self.denoise = self.fixed

    def update(self, x, it, trace):
        if self.shelf is None or self.frozen or it % self.every:
            return
        peak = float(x.max())
        if peak > 0:
            self._select(peak, it, trace)

    def record(self):
        if self.shelf is None:
            return None, 1.0, None
        return self.selection.sigma, self.selection.beta, self.alpha


def _prepare(op, vis):
    if op.norm_sq is None:
        operator_norm(op)
    if not op.norm_sq > 0:
        raise ValueError("operator norm is zero")
    x0 = dirty_image(op, vis)
    return x0, float(x0.max())


def _rel_change(new, old):
    den = np.linalg.norm(old)
    diff = np.linalg.norm(new - old)
    return diff / den if den > 0 else (0.0 if diff == 0 else math.inf)


def _step_bookkeeping(x_new, x, res, adapt, trace, cfg, it, feasible=True):
    if not np.all(np.isfinite(x_new)):
        trace.reason = "diverged"
        raise DivergenceError(f"non-finite iterate at iteration {it}", trace)
    rel = _rel_change(x_new, x)
    trace.append(rel, res, adapt.record())
    if rel <= cfg.tol and not adapt.frozen:
        adapt.frozen = True
        trace.frozen_at = it
    if feasible and stopping_check(trace, cfg.tol, cfg.persistence):
        trace.reason = "converged"
        return True
    return False


def solve_fb(op, vis, denoiser, cfg=None, x0=None):
    """Unconstrained reconstruction by plug-and-play forward-backward.

    Iterates ``x <- D(x - gamma Re(H^H (H x - z)) / eta^2)`` from the dirty
    image. For noiseless data (``eta = 0``) the data term is weighted by 1
    instead of ``1 / eta^2``.

    Parameters
    ----------
    op : RIOperator
    vis : VisibilitySet
    denoiser : DenoiserShelf or callable
    cfg : FBConfig, optional
    x0 : ndarray, optional
        Starting image; defaults to the dirty image.

    Returns
    -------
    x : ndarray
    trace : SolverTrace
    """
    cfg = cfg or FBConfig()
    x_dirty, peak0 = _prepare(op, vis)
    eta = vis.eta
    weight = 1.0 / eta ** 2 if eta > 0 else 1.0
    lip = op.norm_sq * weight
    gamma = cfg.gamma if cfg.gamma is not None else 1.8 / lip
    if not gamma * lip < 2:
        raise ValueError(f"step size gamma={gamma:g} violates gamma L < 2 (L={lip:g})")
    adapt = _Adaptive(denoiser, op, eta, peak0, cfg.peak_update_every)
    trace = SolverTrace()
    adapt.start(trace)
    x = np.array(x_dirty if x0 is None else x0, dtype=np.float64)
    hx = op.forward(x)
    for it in range(1, cfg.max_iter + 1):
        grad = op.adjoint(hx - vis.data) * weight
        x_new = adapt.denoise(x - gamma * grad)
        hx = op.forward(x_new) if np.all(np.isfinite(x_new)) else hx
        done = _step_bookkeeping(x_new, x, np.linalg.norm(hx - vis.data), adapt, trace, cfg, it)
        x = x_new
        if done:
            return x, trace
        adapt.update(x, it, trace)
    trace.reason = "max_iter"
    return x, trace


def solve_pd(op, vis, denoiser, cfg=None, x0=None):
    """Constrained reconstruction by plug-and-play primal-dual.

    The data constraint is ``|H x - z| <= epsilon``. Each iteration:
    ``x+ = D(x - gamma Re(H^H u))`` then
    ``u <- v - sigma P(v / sigma)`` with ``v = u + sigma H (2 x+ - x)`` and
    ``P`` the projection onto the ball. ``u`` starts at 0 and keeps its value
    across denoiser swaps.

    Returns
    -------
    x : ndarray
    trace : SolverTrace
        ``residual`` holds ``|H x - z|`` of each new iterate.
    """
    cfg = cfg or PDConfig()
    x_dirty, peak0 = _prepare(op, vis)
    nrm = math.sqrt(op.norm_sq)
    gamma = cfg.gamma if cfg.gamma is not None else 1.0 / nrm
    sigma = cfg.sigma_dual if cfg.sigma_dual is not None else 0.99 / (gamma * op.norm_sq)
    if gamma * sigma * op.norm_sq > 1 - 1e-6:
        raise ValueError(
            f"step sizes violate gamma sigma ||H||^2 < 1 (product {gamma * sigma * op.norm_sq:g})")
    eps = cfg.epsilon
    if eps is None:
        eps = epsilon_bound(vis.eta, op.n_samples)
        if not eps > 0:
            raise ValueError("epsilon defaults to zero for noiseless data; set it explicitly")
    z = vis.data
    adapt = _Adaptive(denoiser, op, vis.eta, peak0, cfg.peak_update_every)
    trace = SolverTrace(epsilon=float(eps))
    adapt.start(trace)
    x = np.array(x_dirty if x0 is None else x0, dtype=np.float64)
    hx = op.forward(x)
    u = np.zeros_like(z)
    limit = eps * (1 + cfg.feas_tol)
    for it in range(1, cfg.max_iter + 1):
        x_new = adapt.denoise(x - gamma * op.adjoint(u))
        if np.all(np.isfinite(x_new)):
            hx_new = op.forward(x_new)
            v = u + sigma * (2 * hx_new - hx)
            u = v - sigma * project_l2_ball(v / sigma, z, eps)
        else:
            hx_new = hx
        res = np.linalg.norm(hx_new - z)
        done = _step_bookkeeping(x_new, x, res, adapt, trace, cfg, it, res <= limit)
        x, hx = x_new, hx_new
        if done:
            return x, trace
        adapt.update(x, it, trace)
    trace.reason = "max_iter"
    return x, trace
