"""Earth-rotation uv-coverage and the interferometric measurement operator.

The operator maps a real image to complex visibilities through
``H = U F Z``: de-apodization and zero-padding ``Z`` onto an oversampled
grid, a unitary 2-D FFT ``F``, and a sparse Kaiser-Bessel interpolation
``U`` from grid cells to the off-grid uv samples.

Conventions
-----------
Pixel ``(m, n)`` of an ``(H, W)`` image sits at centred coordinates
``(m - H // 2, n - W // 2)``. A sample at spatial frequency ``(u, v)`` in
radians per pixel, with ``u`` along columns and ``v`` along rows, targets::

    (1 / sqrt(Kx Ky)) * sum_{m,n} x[m, n] exp(-i (u n_c + v m_c))

where ``Ky, Kx`` are the padded grid sizes. Only one sample of each
conjugate pair is stored. Images are real, so the adjoint used by the
solvers is the real part of the complex adjoint.
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse
from scipy.special import i0

from .core import as_image
from .errors import ConvergenceError, EmptyCoverageError, FormatError

logger = logging.getLogger(__name__)

VIS_MAGIC = b"AIRIVIS1"
DEFAULT_WAVELENGTH = 0.21  # metres, HI line

__all__ = [
    "AntennaArray",
    "KernelSpec",
    "RIOperator",
    "UVCoverage",
    "VisibilitySet",
    "adjoint",
    "back_project",
    "dirty_image",
    "build_operator",
    "epsilon_bound",
    "eta_for_dynamic_range",
    "forward",
    "generate_uv",
    "meerkat_like_array",
    "nyquist_field_scale",
    "operator_norm",
    "psf_peak",
    "read_antennas",
    "read_visibilities",
    "simulate_measurements",
    "write_antennas",
    "write_visibilities",
]


@dataclass(frozen=True)
class AntennaArray:
    """Antenna positions in local east/north/up metres at a given latitude."""

    positions: np.ndarray
    latitude: float

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 2:
            raise ValueError(f"need at least 2 antennas as (P, 3) positions, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("antenna positions must be finite")
        if len(np.unique(p, axis=0)) != len(p):
            raise ValueError("duplicate antenna positions")
        object.__setattr__(self, "positions", p)

    @property
    def n_baselines(self):
        n = len(self.positions)
        return n * (n - 1) // 2

    def baselines(self):
        """All ``p_j - p_i`` for ``i < j``, as (B, 3) east/north/up metres."""
        i, j = np.triu_indices(len(self.positions), k=1)
        return self.positions[j] - self.positions[i]


@dataclass
class UVCoverage:
    """Sampled spatial frequencies in radians per pixel, within [-pi, pi)."""

    u: np.ndarray
    v: np.ndarray
    weights: np.ndarray = None
    delta_t: float = None
    dropped: int = 0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64).ravel()
        self.v = np.asarray(self.v, dtype=np.float64).ravel()
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must have the same length")
        if self.weights is None:
            self.weights = np.ones_like(self.u)
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.weights.shape != self.u.shape:
            raise ValueError("weights must match the number of samples")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and non-negative")

    def __len__(self):
        return self.u.size


@dataclass
class VisibilitySet:
    """Measured visibilities ``z`` with their coverage and noise level ``eta``."""

    uv: UVCoverage
    data: np.ndarray
    eta: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128).ravel()
        if self.data.size != len(self.uv):
            raise ValueError(f"{self.data.size} values for {len(self.uv)} uv samples")
        if not (self.eta >= 0 and np.isfinite(self.eta)):
            raise ValueError(f"eta must be finite and >= 0, got {self.eta}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("visibilities must be finite")

    @property
    def n_samples(self):
        return self.data.size


# --- uv coverage ------------------------------------------------------------


def meerkat_like_array(n_antennas=64, seed=0, core_fraction=0.7, core_radius=500.0,
                       outer_radius=4000.0):
    """Random planar array with a dense core and sparse outskirts.

    Loosely follows the MeerKAT layout: most dishes within about a kilometre,
    the rest spread out to several kilometres. Latitude is MeerKAT's.
    """
    rng = np.random.default_rng(seed)
    n_core = int(round(core_fraction * n_antennas))
    r = np.concatenate([
        core_radius * np.sqrt(rng.uniform(0, 1, n_core)),
        rng.uniform(core_radius, outer_radius, n_antennas - n_core),
    ])
    theta = rng.uniform(0, 2 * np.pi, n_antennas)
    pos = np.column_stack([r * np.cos(theta), r * np.sin(theta), rng.normal(0, 2.0, n_antennas)])
    return AntennaArray(pos, latitude=math.radians(-30.7))


def _enu_to_equatorial(b, latitude):
    e, n, up = b[:, 0], b[:, 1], b[:, 2]
    sl, cl = math.sin(latitude), math.cos(latitude)
    return np.column_stack([-sl * n + cl * up, e, cl * n + sl * up])


def nyquist_field_scale(array, wavelength=DEFAULT_WAVELENGTH, margin=0.95):
    """Pixel size (radians) placing the longest baseline just inside the band."""
    b_max = np.linalg.norm(array.baselines(), axis=1).max()
    return margin * wavelength / (2 * b_max)


def generate_uv(array, declination, hour_angle_span, n_steps, field_scale,
                wavelength=DEFAULT_WAVELENGTH):
    """Earth-rotation synthesis coverage.

    Each baseline is projected onto the uv plane at ``n_steps`` hour angles
    spread evenly over ``hour_angle_span`` hours centred on transit, then
    converted to radians per pixel for pixels of ``field_scale`` radians.
    Samples at or beyond the band edge are dropped and counted in
    ``UVCoverage.dropped``; samples are ordered time-major.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not hour_angle_span > 0:
        raise ValueError("hour_angle_span must be > 0")
    xyz = _enu_to_equatorial(array.baselines(), array.latitude) / wavelength
    if n_steps == 1:
        hours = np.zeros(1)
    else:
        hours = np.linspace(-hour_angle_span / 2, hour_angle_span / 2, n_steps)
    h = hours[:, None] * (2 * np.pi / 24.0)
    x, y, z = xyz[:, 0][None], xyz[:, 1][None], xyz[:, 2][None]
    sd, cd = math.sin(declination), math.cos(declination)
    u = np.sin(h) * x + np.cos(h) * y
    v = -sd * np.cos(h) * x + sd * np.sin(h) * y + cd * z
    scale = 2 * np.pi * field_scale
    u = (u * scale).ravel()
    v = (v * scale).ravel()
    keep = (u >= -np.pi) & (u < np.pi) & (v >= -np.pi) & (v < np.pi)
    dropped = int(keep.size - keep.sum())
    if dropped:
        logger.info("dropped %d of %d uv samples outside the band", dropped, keep.size)
    if not keep.any():
        raise EmptyCoverageError("every uv sample fell outside [-pi, pi)")
    return UVCoverage(u[keep], v[keep], delta_t=float(hour_angle_span), dropped=dropped)


# --- gridding kernel ---------------------------------------------------------


@dataclass(frozen=True)
class KernelSpec:
    """Interpolation kernel: ``"kaiser_bessel"`` of odd support, or ``"nearest"``.

    ``beta`` defaults to the Beatty et al. choice for the padding factor.
    """

    kind: str = "kaiser_bessel"
    support: int = 7
    beta: float = None

    def __post_init__(self):
        if self.kind not in ("kaiser_bessel", "nearest"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "nearest" and self.support != 1:
            raise ValueError("nearest-neighbour kernel has support 1")
        if not (1 <= self.support <= 15 and self.support % 2 == 1):
            raise ValueError(f"kernel support must be odd in [1, 15], got {self.support}")

    def resolved_beta(self, padding_factor):
        if self.beta is not None:
            return float(self.beta)
        j, a = self.support, padding_factor
        arg = (j / a) ** 2 * (a - 0.5) ** 2 - 0.8
        return math.pi * math.sqrt(max(arg, 0.0))


def kaiser_bessel(kappa, support, beta):
    """KB window in grid units, zero outside ``|kappa| <= support / 2``."""
    kappa = np.asarray(kappa, dtype=np.float64)
    r = 1 - (2 * kappa / support) ** 2
    return np.where(r >= 0, i0(beta * np.sqrt(np.clip(r, 0, None))), 0.0)


def kaiser_bessel_ft(t, support, beta):
    """Continuous Fourier transform of :func:`kaiser_bessel` at frequency ``t``.

    ``t`` is in cycles per grid unit, i.e. image offset over grid size.
    """
    t = np.asarray(t, dtype=np.float64)
    q = beta ** 2 - (np.pi * support * t) ** 2
    root = np.sqrt(np.abs(q))
    with np.errstate(invalid="ignore", divide="ignore"):
        pos = np.where(root > 0, np.sinh(root) / root, 1.0)
        neg = np.where(root > 0, np.sin(root) / root, 1.0)
    return support * np.where(q >= 0, pos, neg)


def _axis_coefficients(freq, n_grid, kernel, beta):
    kappa = freq * n_grid / (2 * np.pi)
    half = (kernel.support - 1) // 2
    offsets = np.arange(-half, half + 1)
    k = np.rint(kappa).astype(np.int64)[:, None] + offsets[None, :]
    if kernel.kind == "nearest":
        coef = np.ones(k.shape)
    else:
        coef = kaiser_bessel(kappa[:, None] - k, kernel.support, beta)
    return np.mod(k, n_grid), coef


def _deapodization(n_pix, n_grid, kernel, beta):
    if kernel.kind == "nearest":
        return np.ones(n_pix)
    centred = np.arange(n_pix) - n_pix // 2
    return 1.0 / kaiser_bessel_ft(centred / n_grid, kernel.support, beta)


# --- operator ----------------------------------------------------------------


class RIOperator:
    """Gridded non-uniform Fourier operator ``H = U F Z``.

    Build with :func:`build_operator`. After construction only ``norm_sq``
    changes, when :func:`operator_norm` caches its estimate.
    """

    def __init__(self, uv, image_dims, padding_factor, kernel, interp, deapo_rows,
                 deapo_cols, grid_shape):
        self.uv = uv
        self.image_dims = tuple(image_dims)  # (width, height)
        self.padding_factor = padding_factor
        self.kernel = kernel
        self.interp = interp
        self.grid_shape = grid_shape
        self._deapo = np.outer(deapo_rows, deapo_cols)
        width, height = self.image_dims
        ky, kx = grid_shape
        self._rows = (np.arange(height) - height // 2) % ky
        self._cols = (np.arange(width) - width // 2) % kx
        self.norm_sq = None

    @property
    def shape(self):
        """Image shape ``(height, width)``."""
        return self.image_dims[1], self.image_dims[0]

    @property
    def n_samples(self):
        return self.interp.shape[0]

    def forward(self, x):
        """Visibilities ``H x`` (real or complex image input)."""
        x = np.asarray(x)
        if x.shape != self.shape:
            raise ValueError(f"image shape {x.shape} does not match operator {self.shape}")
        grid = np.zeros(self.grid_shape, dtype=np.complex128)
        grid[np.ix_(self._rows, self._cols)] = x * self._deapo
        spectrum = np.fft.fft2(grid, norm="ortho")
        return self.interp @ spectrum.ravel()

    def adjoint_complex(self, y):
        """Complex adjoint ``H^H y``."""
        y = np.asarray(y)
        if y.shape != (self.n_samples,):
            raise ValueError(f"expected {self.n_samples} visibilities, got shape {y.shape}")
        grid = (self.interp.T @ y).reshape(self.grid_shape)
        img = np.fft.ifft2(grid, norm="ortho")
        return img[np.ix_(self._rows, self._cols)] * self._deapo

    def adjoint(self, y, return_residual=False):
        """Real-image adjoint ``Re(H^H y)``.

        With ``return_residual`` also returns the largest absolute imaginary
        part that was discarded.
        """
        img = self.adjoint_complex(y)
        if return_residual:
            return img.real.copy(), float(np.abs(img.imag).max())
        return img.real.copy()

    def normal(self, x):
        """``Re(H^H H x)`` for a real image."""
        return self.adjoint(self.forward(x))

    def with_duplicated_samples(self, times=2):
        """Operator whose coverage lists every sample ``times`` times."""
        uv = UVCoverage(np.tile(self.uv.u, times), np.tile(self.uv.v, times),
                        np.tile(self.uv.weights, times), self.uv.delta_t, self.uv.dropped)
        return build_operator(uv, self.image_dims, self.padding_factor, self.kernel)


def build_operator(uv, dims, padding_factor=2.0, kernel=None):
    """Precompute interpolation rows and de-apodization for ``uv``.

    Parameters
    ----------
    uv : UVCoverage
    dims : (int, int)
        Image ``(width, height)``.
    padding_factor : float
        Oversampling ratio of the FFT grid, >= 1.
    kernel : KernelSpec, optional
        Defaults to Kaiser-Bessel with support 7.
    """
    kernel = kernel or KernelSpec()
    width, height = int(dims[0]), int(dims[1])
    if width < 1 or height < 1:
        raise ValueError(f"invalid image dims {dims}")
    if not padding_factor >= 1:
        raise ValueError(f"padding_factor must be >= 1, got {padding_factor}")
    u, v = uv.u, uv.v
    if np.any((u < -np.pi) | (u >= np.pi) | (v < -np.pi) | (v >= np.pi)):
        raise ValueError("uv samples must lie in [-pi, pi)")
    kx = int(math.ceil(padding_factor * width))
    ky = int(math.ceil(padding_factor * height))
    beta = kernel.resolved_beta(padding_factor)
    ix, cx = _axis_coefficients(u, kx, kernel, beta)
    iy, cy = _axis_coefficients(v, ky, kernel, beta)
    j = kernel.support
    m = len(uv)
    cols = (iy[:, :, None] * kx + ix[:, None, :]).reshape(m, j * j)
    vals = (cy[:, :, None] * cx[:, None, :]).reshape(m, j * j) * uv.weights[:, None]
    rows = np.repeat(np.arange(m), j * j)
    interp = scipy.sparse.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(m, ky * kx))
    return RIOperator(
        uv, (width, height), padding_factor, kernel, interp,
        _deapodization(height, ky, kernel, beta), _deapodization(width, kx, kernel, beta),
        (ky, kx),
    )


def forward(op, x):
    return op.forward(as_image(x))


def adjoint(op, v):
    return op.adjoint(v)


def operator_norm(op, tol=1e-8, max_iter=5000, seed=0):
    """Estimate ``||H||^2`` by power iteration on ``Re(H^H H)``; cached on ``op``.

    Raises
    ------
    ConvergenceError
        If the relative change of the estimate stays above ``tol`` for
        ``max_iter`` iterations; ``estimate`` carries the last value.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.shape)
    x /= np.linalg.norm(x)
    val = 0.0
    for _ in range(max_iter):
        y = op.normal(x)
        new = float(np.vdot(x, y).real)
        nrm = np.linalg.norm(y)
        if nrm == 0:
            op.norm_sq = 0.0
            return 0.0
        x = y / nrm
        if abs(new - val) <= tol * abs(new):
            op.norm_sq = new
            return new
        val = new
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations", val)


def simulate_measurements(op, truth, eta, seed=None):
    """Noisy visibilities ``z = H x + e``.

    ``e`` is complex Gaussian with independent real and imaginary parts of
    standard deviation ``eta / sqrt(2)``, so ``E|e_m|^2 = eta^2``.
    """
    if not eta >= 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    clean = op.forward(as_image(truth))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean.size) + 1j * rng.standard_normal(clean.size)
    return VisibilitySet(op.uv, clean + noise * (eta / math.sqrt(2)), float(eta))


def eta_for_dynamic_range(op, peak, dyn_range):
    """Noise level giving the measurement dynamic range ``peak sqrt(2 ||H||^2) / eta``."""
    if op.norm_sq is None:
        operator_norm(op)
    return peak * math.sqrt(2 * op.norm_sq) / dyn_range


def back_project(op, vis):
    """Dirty image ``Re(H^H z)``, unnormalised."""
    return op.adjoint(vis.data)


def psf_peak(op):
    """Peak of the point spread function, ``||H delta||^2`` at the image centre."""
    h, w = op.shape
    delta = np.zeros((h, w))
    delta[h // 2, w // 2] = 1.0
    return float(np.linalg.norm(op.forward(delta)) ** 2)


def dirty_image(op, vis):
    """Back-projection normalised so a unit point source peaks near 1."""
    peak = psf_peak(op)
    if peak == 0:
        raise ValueError("operator has an all-zero point spread function")
    return back_project(op, vis) / peak


def epsilon_bound(eta, m, n_sigma=2.0):
    """Radius of the data-fidelity ball.

    ``||e||^2`` is ``eta^2 / 2`` times a chi-squared variable with ``2M``
    degrees of freedom: mean ``eta^2 M``, standard deviation ``eta^2 sqrt(M)``.
    The radius is the square root of the mean plus ``n_sigma`` deviations.
    """
    if not eta >= 0:
        raise ValueError("eta must be >= 0")
    if m < 1:
        raise ValueError("need at least one measurement")
    return eta * math.sqrt(m + n_sigma * math.sqrt(m))


# --- file formats ------------------------------------------------------------


def write_visibilities(path, vis):
    """Write ``vis`` in the AIRIVIS1 format."""
    uv = vis.uv
    rec = np.column_stack([uv.u, uv.v, vis.data.real, vis.data.imag, uv.weights])
    with open(path, "wb") as f:
        f.write(VIS_MAGIC)
        f.write(struct.pack("<Qd", vis.n_samples, vis.eta))
        f.write(np.ascontiguousarray(rec, dtype="<f8").tobytes())


def read_visibilities(path):
    data = Path(path).read_bytes()
    if data[:8] != VIS_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 24:
        raise FormatError(f"{path}: truncated header")
    m, eta = struct.unpack("<Qd", data[8:24])
    if len(data) != 24 + 40 * m:
        raise FormatError(f"{path}: expected {m} records, file size {len(data)}")
    rec = np.frombuffer(data, dtype="<f8", offset=24).reshape(m, 5).astype(np.float64)
    if not np.all(np.isfinite(rec)):
        raise FormatError(f"{path}: non-finite values")
    try:
        uv = UVCoverage(rec[:, 0], rec[:, 1], rec[:, 4])
        return VisibilitySet(uv, rec[:, 2] + 1j * rec[:, 3], eta)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def read_antennas(path, latitude=math.radians(-30.7)):
    """Antenna positions from CSV, one ``x,y,z`` line per antenna."""
    try:
        pos = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    try:
        return AntennaArray(pos, latitude)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_antennas(path, array):
    np.savetxt(path, array.positions, delimiter=",", fmt="%.17g")
