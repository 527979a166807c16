"""Denoisers, the noise-level shelf, and nonexpansiveness certification.

A denoiser is any callable mapping an image to a nonnegative image of the
same shape. Denoisers that also expose ``jvp(x, v)`` and ``vjp(x, w)`` (the
Jacobian at ``x`` applied to ``v``, and its transpose applied to ``w``) are
certified with exact derivatives; others fall back to finite differences.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import as_image
from .errors import CertificationError

__all__ = [
    "BoxProjection",
    "Certificate",
    "DenoiserShelf",
    "IdentityDenoiser",
    "LinearScaleDenoiser",
    "ScaledDenoiser",
    "Selection",
    "ShelfRangeWarning",
    "SoftThresholdProx",
    "apply_scaled",
    "certify_nonexpansive",
    "heuristic_sigma",
    "jacobian_spectral_norm",
    "prox_denoisers",
    "select_denoiser",
]

DEFAULT_SHELF_SIGMAS = (2.5e-6, 5e-6, 1e-5, 2e-5, 4e-5, 8e-5, 1.6e-4, 3.2e-4)


class ShelfRangeWarning(UserWarning):
    """The heuristic noise level fell outside the span of the shelf."""


class IdentityDenoiser:
    sigma_train = None

    def __call__(self, x):
        return np.array(x, dtype=np.float64)

    def jvp(self, x, v):
        return np.array(v, dtype=np.float64)

    def vjp(self, x, w):
        return np.array(w, dtype=np.float64)


class LinearScaleDenoiser:
    """``x -> c x``; firmly nonexpansive for ``0 <= c <= 1``."""

    sigma_train = None

    def __init__(self, c):
        self.c = float(c)

    def __call__(self, x):
        return self.c * np.asarray(x, dtype=np.float64)

    def jvp(self, x, v):
        return self.c * np.asarray(v, dtype=np.float64)

    vjp = jvp


class SoftThresholdProx:
    """Proximity operator of ``lam * ||x||_1`` plus the nonnegativity constraint.

    Evaluates to ``max(y - lam, 0)``.
    """

    def __init__(self, lam, sigma_train=None):
        if not lam >= 0:
            raise ValueError(f"threshold must be >= 0, got {lam}")
        self.lam = float(lam)
        self.sigma_train = sigma_train

    def __call__(self, x):
        return np.maximum(np.asarray(x, dtype=np.float64) - self.lam, 0.0)

    def jvp(self, x, v):
        return np.where(np.asarray(x) > self.lam, v, 0.0)

    vjp = jvp


class BoxProjection:
    """Projection onto ``[lo, hi]``; the default is the nonnegative orthant."""

    sigma_train = None

    def __init__(self, lo=0.0, hi=np.inf):
        if lo > hi:
            raise ValueError("empty box")
        self.lo, self.hi = lo, hi

    def __call__(self, x):
        return np.clip(np.asarray(x, dtype=np.float64), self.lo, self.hi)

    def jvp(self, x, v):
        x = np.asarray(x)
        return np.where((x > self.lo) & (x < self.hi), v, 0.0)

    vjp = jvp


def prox_denoisers(lam):
    """Closed-form proximal reference denoisers: soft-threshold and box."""
    return SoftThresholdProx(lam), BoxProjection()


class ScaledDenoiser:
    """``x -> beta * base(x / beta)``, a denoiser rescaled to intensity ``beta``."""

    def __init__(self, base, beta):
        if not beta > 0:
            raise ValueError(f"beta must be > 0, got {beta}")
        self.base = base
        self.beta = float(beta)

    @property
    def sigma_train(self):
        return getattr(self.base, "sigma_train", None)

    def __call__(self, x):
        return self.beta * self.base(np.asarray(x, dtype=np.float64) / self.beta)

    def jvp(self, x, v):
        return self.base.jvp(np.asarray(x) / self.beta, v)

    def vjp(self, x, w):
        return self.base.vjp(np.asarray(x) / self.beta, w)


def apply_scaled(sd, x):
    return sd(x)


@dataclass(frozen=True)
class ShelfEntry:
    sigma: float
    denoiser: object


class DenoiserShelf:
    """Denoisers indexed by strictly increasing training noise level."""

    def __init__(self, entries):
        entries = sorted((ShelfEntry(float(s), d) for s, d in entries), key=lambda e: e.sigma)
        if not entries:
            raise ValueError("a shelf needs at least one denoiser")
        sig = [e.sigma for e in entries]
        if sig[0] <= 0 or any(b <= a for a, b in zip(sig, sig[1:])):
            raise ValueError(f"shelf sigmas must be positive and distinct, got {sig}")
        self.entries = tuple(entries)

    @classmethod
    def from_denoisers(cls, denoisers):
        return cls((d.sigma_train, d) for d in denoisers)

    @property
    def sigmas(self):
        return [e.sigma for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def heuristic_sigma(eta, norm_sq, alpha):
    """Target noise level ``eta / (alpha sqrt(2 ||H||^2))``."""
    if not (eta > 0 and norm_sq > 0 and alpha > 0):
        raise ValueError(f"need positive eta, norm_sq, alpha; got {eta}, {norm_sq}, {alpha}")
    return eta / (alpha * math.sqrt(2.0 * norm_sq))


@dataclass(frozen=True)
class Selection:
    """Outcome of :func:`select_denoiser`.

    ``clamped`` is ``"low"`` when ``sigma_heu`` is below the shelf and the
    smallest entry is used anyway, ``"high"`` when it is above the largest
    entry, otherwise ``None``.
    """

    entry: ShelfEntry
    sigma_heu: float
    beta: float
    clamped: str = None

    @property
    def sigma(self):
        return self.entry.sigma

    @property
    def ratio(self):
        return self.sigma_heu / self.entry.sigma

    def denoiser(self):
        return ScaledDenoiser(self.entry.denoiser, self.beta)


def select_denoiser(shelf, sigma_heu, alpha=1.0, warn=True):
    """Pick the entry with the largest sigma not above ``sigma_heu``.

    The scale is ``beta = alpha * sigma_heu / sigma``, so the rescaled input
    ``x / beta`` has peak ``sigma / sigma_heu``.
    """
    if not sigma_heu > 0:
        raise ValueError(f"sigma_heu must be > 0, got {sigma_heu}")
    sig = np.array(shelf.sigmas)
    idx = int(np.searchsorted(sig, sigma_heu, side="right")) - 1
    clamped = None
    if idx < 0:
        idx, clamped = 0, "low"
    elif idx == len(sig) - 1 and sigma_heu > 2 * sig[-1]:
        clamped = "high"
    if clamped and warn:
        warnings.warn(
            f"sigma_heu={sigma_heu:.3g} outside shelf span [{sig[0]:.3g}, {sig[-1]:.3g}]",
            ShelfRangeWarning, stacklevel=2,
        )
    entry = shelf.entries[idx]
    return Selection(entry, float(sigma_heu), alpha * sigma_heu / entry.sigma, clamped)


# --- Jacobian spectral norm --------------------------------------------------


def jacobian_spectral_norm(jvp, vjp, u0, iters):
    """Power iteration on ``J^T J`` given matrix-free products.

    Returns ``(norm, u, w)``: the estimate ``||J u||`` for the final unit
    vector ``u``, and ``w = J u / ||J u||``.
    """
    u = np.array(u0, dtype=np.float64)
    u /= np.linalg.norm(u)
    for _ in range(iters):
        g = vjp(jvp(u))
        nrm = np.linalg.norm(g)
        if not np.isfinite(nrm):
            raise CertificationError("non-finite power iterate")
        if nrm == 0:
            break
        u = g / nrm
    ju = jvp(u)
    norm = float(np.linalg.norm(ju))
    if not np.isfinite(norm):
        raise CertificationError("non-finite power iterate")
    w = ju / norm if norm > 0 else np.zeros_like(ju)
    return norm, u, w


def _fd_step(x):
    return 1e-6 * (1.0 + float(np.abs(x).max()))


def _dense_fd_jacobian(d, x):
    h = _fd_step(x)
    n = x.size
    jac = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        e = e.reshape(x.shape)
        jac[:, j] = ((d(x + e) - d(x - e)) / (2 * h)).ravel()
    return jac


def _reflected_products(d, x):
    """``jvp``/``vjp`` closures of the reflected map ``2 D - Id`` at ``x``."""
    if hasattr(d, "jvp") and hasattr(d, "vjp"):
        def jvp(v):
            return 2 * d.jvp(x, v) - v

        def vjp(w):
            return 2 * d.vjp(x, w) - w
    else:
        jac = 2 * _dense_fd_jacobian(d, x) - np.eye(x.size)

        def jvp(v):
            return (jac @ v.ravel()).reshape(x.shape)

        def vjp(w):
            return (jac.T @ w.ravel()).reshape(x.shape)
    return jvp, vjp


@dataclass(frozen=True)
class Certificate:
    max_norm: float
    norms: tuple
    slack: float

    @property
    def passed(self):
        return self.max_norm <= 1.0 + self.slack


def certify_nonexpansive(d, probes, power_iters=50, slack=1e-2, seed=0, start=None):
    """Largest ``||Jac(2 D - Id)||`` over ``probes``.

    Each probe gets its own power iteration from a seeded random start, or
    from ``start`` when given. Denoisers without ``jvp``/``vjp`` are
    differentiated by central differences with step ``1e-6 (1 + |x|_inf)``.
    """
    rng = np.random.default_rng(seed)
    norms = []
    for probe in probes:
        x = as_image(probe)
        jvp, vjp = _reflected_products(d, x)
        u0 = rng.standard_normal(x.shape) if start is None else start
        norm, _, _ = jacobian_spectral_norm(jvp, vjp, u0, power_iters)
        norms.append(norm)
    if not norms:
        raise ValueError("need at least one probe")
    return Certificate(max(norms), tuple(norms), slack)
