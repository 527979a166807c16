"""Image containers, dynamic-range transforms, and reconstruction metrics.

Images are plain 2-D ``float64`` arrays of shape ``(height, width)`` in
row-major order. Functions here never mutate their inputs.
"""

import math
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize

from .errors import FormatError, NoRootError

__all__ = [
    "SNR_INF",
    "DynRangeTransform",
    "as_image",
    "dynamic_range",
    "is_infinite_snr",
    "load_raster",
    "log_snr",
    "read_csv_image",
    "read_image",
    "rexp",
    "rlog",
    "snr",
    "soft_threshold",
    "solve_expo_factor",
    "write_csv_image",
    "write_image",
]

#: Returned by :func:`snr` when the residual is exactly zero.
SNR_INF = sys.float_info.max

IMAGE_MAGIC = b"AIRIIMG1"
METRIC_LOG_BASE = 2.5e3
DISPLAY_LOG_BASE = 1e4


def as_image(x, nonneg=False):
    """Validate ``x`` as an image and return it as a float64 array."""
    img = np.asarray(x, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite pixels")
    if nonneg and np.any(img < 0):
        raise ValueError("image contains negative pixels")
    return img


def _check_base(a, scale, name):
    if not (np.isfinite(a) and a > 1):
        raise ValueError(f"log base must be > 1, got {a}")
    if not (np.isfinite(scale) and scale > 0):
        raise ValueError(f"{name} must be > 0, got {scale}")


def rlog(img, a, x_max=1.0):
    """Compress dynamic range: ``x_max * log_a(a * x / x_max + 1)``.

    An image with pixels in ``[x_max / a, x_max]`` is mapped into
    ``[x_max log_a 2, x_max log_a (a + 1)]``.
    """
    _check_base(a, x_max, "x_max")
    x = as_image(img, nonneg=True)
    return x_max * np.log1p(a * x / x_max) / math.log(a)


def rexp(img, a, u_max=1.0):
    """Inverse of :func:`rlog`: ``u_max * (a ** (u / u_max) - 1) / a``.

    Accepts pixels in ``[0, u_max log_a(a + 1)]``, the image of
    ``[0, u_max]`` under :func:`rlog`.
    """
    _check_base(a, u_max, "u_max")
    u = as_image(img, nonneg=True)
    upper = u_max * math.log1p(a) / math.log(a)
    if np.any(u > upper * (1 + 1e-12)):
        raise ValueError(f"pixels exceed the rexp domain upper bound {upper:g}")
    return u_max * np.expm1(u / u_max * math.log(a)) / a


@dataclass(frozen=True)
class DynRangeTransform:
    """A fixed ``(a, x_max)`` pair for :func:`rlog` / :func:`rexp`."""

    a: float
    x_max: float = 1.0

    def __post_init__(self):
        _check_base(self.a, self.x_max, "x_max")

    def rlog(self, img):
        return rlog(img, self.a, self.x_max)

    def rexp(self, img):
        return rexp(img, self.a, self.x_max)


def _expo_gap(a, sigma, sigma0):
    # log of (a*sigma + 1)**(1/sigma0) / a; the direct form overflows.
    return math.log1p(a * sigma) / sigma0 - math.log(a)


def solve_expo_factor(sigma, sigma0, a_max=1e18):
    """Exponentiation factor ``a`` such that ``(a sigma + 1)^(1/sigma0) = a``.

    Equivalently ``rexp_a`` maps the faintest clean intensity ``sigma0`` to the
    training noise level ``sigma``. The equation has either no root or two
    roots; the large root is returned, since it is the one that raises the
    dynamic range to about ``1 / sigma``.

    Raises
    ------
    ValueError
        Unless ``0 < sigma < sigma0 < 1``.
    NoRootError
        When ``sigma`` exceeds the largest level ``(a^sigma0 - 1) / a`` can
        reach, or the root lies above ``a_max``.
    """
    if not (0 < sigma < sigma0 < 1):
        raise ValueError(f"need 0 < sigma < sigma0 < 1, got sigma={sigma}, sigma0={sigma0}")
    # The log-gap decreases up to this point and increases after it.
    a_turn = max(sigma0 / (sigma * (1 - sigma0)), 1 + 1e-12)
    if _expo_gap(a_turn, sigma, sigma0) >= 0:
        raise NoRootError(
            f"no exponentiation factor maps sigma0={sigma0} to sigma={sigma}"
        )
    if _expo_gap(a_max, sigma, sigma0) <= 0:
        raise NoRootError(f"root lies above the search limit a_max={a_max:g}")
    # Bracket-preserving secant/bisection in log(a).
    t = optimize.brentq(
        lambda s: _expo_gap(math.exp(s), sigma, sigma0),
        math.log(a_turn),
        math.log(a_max),
        xtol=1e-15,
        rtol=4 * np.finfo(float).eps,
        maxiter=500,
    )
    return math.exp(t)


def snr(truth, est):
    """Reconstruction SNR in dB, ``20 log10(|truth| / |truth - est|)``.

    Returns :data:`SNR_INF` when ``est`` equals ``truth`` exactly.
    """
    x = as_image(truth)
    y = as_image(est)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    num = np.linalg.norm(x)
    if num == 0:
        raise ValueError("truth image is identically zero")
    den = np.linalg.norm(x - y)
    if den == 0:
        return SNR_INF
    return 20.0 * math.log10(num / den)


def is_infinite_snr(value):
    return value >= SNR_INF


def log_snr(truth, est, a=METRIC_LOG_BASE, x_max=None):
    """SNR between ``rlog_a`` of both images; negative pixels are clipped.

    ``x_max`` defaults to the peak of ``truth``.
    """
    x = np.clip(as_image(truth), 0, None)
    y = np.clip(as_image(est), 0, None)
    if x_max is None:
        x_max = float(x.max())
    return snr(rlog(x, a, x_max), rlog(y, a, x_max))


def soft_threshold(img, tau):
    """``max(x - tau, 0)`` pixel-wise."""
    if not tau >= 0:
        raise ValueError(f"threshold must be >= 0, got {tau}")
    return np.maximum(as_image(img) - tau, 0.0)


def dynamic_range(img, percentile=None):
    """Ratio of the peak to the faintest nonzero pixel.

    With ``percentile`` set, the faintest level is that percentile of the
    nonzero pixels instead of their minimum.
    """
    x = as_image(img)
    nz = x[x > 0]
    if nz.size == 0:
        raise ValueError("image has no positive pixels")
    if percentile is None:
        low = nz.min()
    else:
        low = np.percentile(nz, percentile, method="inverted_cdf")
    return float(x.max() / low)


# --- raster I/O -------------------------------------------------------------


def write_image(path, img):
    """Write ``img`` in the AIRIIMG1 raster format."""
    x = as_image(img)
    h, w = x.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(x, dtype="<f8").tobytes())


def read_image(path):
    data = Path(path).read_bytes()
    if data[:8] != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    w, h = struct.unpack("<II", data[8:16])
    if w < 1 or h < 1:
        raise FormatError(f"{path}: empty raster {w}x{h}")
    if len(data) != 16 + 8 * w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, file size {len(data)}")
    img = np.frombuffer(data, dtype="<f8", offset=16).reshape(h, w).astype(np.float64)
    if not np.all(np.isfinite(img)):
        raise FormatError(f"{path}: non-finite pixel values")
    return img


def write_csv_image(path, img):
    np.savetxt(path, as_image(img), delimiter=",", fmt="%.17g")


def read_csv_image(path):
    try:
        img = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    try:
        return as_image(img)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def load_raster(path):
    """Read an AIRIIMG1 file, or CSV when the magic is absent."""
    with open(path, "rb") as f:
        head = f.read(8)
    if head == IMAGE_MAGIC:
        return read_image(path)
    return read_csv_image(path)
