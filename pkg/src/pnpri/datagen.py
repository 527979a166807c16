"""Procedural high-dynamic-range ground truths and the exponentiation pipeline.

Images are sums of truncated elliptical Gaussian blobs, single-pixel point
sources and thin curved filaments over a faint smooth background. The
background is removed by soft-thresholding and the result is normalised to
peak 1. Each image draws its randomness from ``(seed, index)`` only, so
generation order and parallelism do not change the output.
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import as_image, load_raster, rexp, soft_threshold, solve_expo_factor, write_image
from .errors import FormatError

__all__ = [
    "DatasetSpec",
    "exponentiate_dataset",
    "read_dataset",
    "sample_patch",
    "sigma0_of",
    "synth_groundtruth",
    "synth_image",
    "write_dataset",
]

MANIFEST = "manifest.txt"


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a procedural dataset.

    Count ranges are inclusive ``(lo, hi)``. Blob sizes are standard
    deviations as fractions of the smaller image side. Amplitudes are drawn
    log-uniformly from ``[amp_min, 1]``. ``background`` is the peak of the
    smooth background relative to the raw peak; keeping it below ``tau``
    makes the soft-threshold remove it entirely.
    """

    n_images: int = 16
    dims: tuple = (64, 64)
    seed: int = 0
    tau: float = 0.01
    blobs: tuple = (3, 5)
    blob_size: tuple = (0.065, 0.095)
    blob_truncate: float = 2.0
    points: tuple = (0, 4)
    filaments: tuple = (0, 2)
    filament_width: float = 0.8
    amp_min: float = 0.1
    background: float = 0.005

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if not self.tau >= 0:
            raise ValueError("tau must be >= 0")
        if self.blobs[1] + self.points[1] + self.filaments[1] == 0:
            raise ValueError("spec generates no components")
        if min(self.dims) < 1:
            raise ValueError(f"invalid dims {self.dims}")
        for lo, hi in (self.blobs, self.points, self.filaments):
            if not 0 <= lo <= hi:
                raise ValueError("component count ranges must satisfy 0 <= lo <= hi")


def _log_uniform(rng, lo, size=None):
    return np.exp(rng.uniform(np.log(lo), 0.0, size))


def _add_blob(img, rng, spec):
    h, w = img.shape
    side = min(h, w)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    s_major = rng.uniform(*spec.blob_size) * side
    s_minor = s_major * rng.uniform(0.3, 1.0)
    theta = rng.uniform(0, np.pi)
    amp = _log_uniform(rng, spec.amp_min)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    r2 = ((c * dx + s * dy) / s_major) ** 2 + ((-s * dx + c * dy) / s_minor) ** 2
    img += np.where(r2 <= spec.blob_truncate ** 2, amp * np.exp(-0.5 * r2), 0.0)


def _add_filament(img, rng, spec):
    h, w = img.shape
    pts = rng.uniform([0, 0], [h, w], size=(3, 2))
    t = np.linspace(0, 1, 4 * (h + w))[:, None]
    curve = (1 - t) ** 2 * pts[0] + 2 * (1 - t) * t * pts[1] + t ** 2 * pts[2]
    amp = _log_uniform(rng, spec.amp_min)
    yy, xx = np.mgrid[0:h, 0:w]
    dist2 = np.full((h, w), np.inf)
    for y, x in curve:
        np.minimum(dist2, (yy - y) ** 2 + (xx - x) ** 2, out=dist2)
    r2 = dist2 / spec.filament_width ** 2
    img += np.where(r2 <= spec.blob_truncate ** 2, amp * np.exp(-0.5 * r2), 0.0)


def synth_image(spec, index):
    """The ``index``-th image of the dataset described by ``spec``."""
    rng = np.random.default_rng([spec.seed, index])
    w, h = spec.dims
    img = np.zeros((h, w))
    for _ in range(rng.integers(spec.blobs[0], spec.blobs[1] + 1)):
        _add_blob(img, rng, spec)
    for _ in range(rng.integers(spec.filaments[0], spec.filaments[1] + 1)):
        _add_filament(img, rng, spec)
    for _ in range(rng.integers(spec.points[0], spec.points[1] + 1)):
        img[rng.integers(h), rng.integers(w)] += _log_uniform(rng, spec.amp_min)
    peak = img.max()
    if peak <= 0:
        # Every count range allowed zero and all came up zero: place one source.
        img[rng.integers(h), rng.integers(w)] = 1.0
        peak = 1.0
    if spec.background > 0:
        field = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 16, mode="wrap")
        field -= field.min()
        if field.max() > 0:
            img += spec.background * peak * field / field.max()
    img = soft_threshold(img, spec.tau * img.max())
    return img / img.max()


def synth_groundtruth(spec, workers=None):
    """All images of ``spec``, each soft-thresholded and peak-normalised."""
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda i: synth_image(spec, i), range(spec.n_images)))
    return [synth_image(spec, i) for i in range(spec.n_images)]


def sigma0_of(dataset):
    """Faint-feature level: the 1st percentile of all nonzero pixels pooled."""
    nz = np.concatenate([np.asarray(img)[np.asarray(img) > 0] for img in dataset]) \
        if len(dataset) else np.empty(0)
    if nz.size == 0:
        raise ValueError("dataset has no nonzero pixels")
    return float(np.percentile(nz, 1, method="inverted_cdf"))


def exponentiate_dataset(dataset, sigma, sigma0=None):
    """Map every image through ``rexp_a`` with ``a`` solved for ``sigma``.

    The faint level ``sigma0`` (default :func:`sigma0_of`) lands on ``sigma``
    and the peak 1 on ``(a - 1) / a``. Returns ``(images, a)``.
    """
    if sigma0 is None:
        sigma0 = sigma0_of(dataset)
    if not sigma < sigma0:
        raise ValueError(f"sigma={sigma} must be below the faint level sigma0={sigma0}")
    a = solve_expo_factor(sigma, sigma0)
    return [rexp(img, a) for img in dataset], a


def sample_patch(dataset, side, rng, augment=False):
    """A ``side x side`` crop of a uniformly chosen image at a uniform origin.

    With ``augment``, one of the eight flips/rotations is applied.
    """
    img = np.asarray(dataset[rng.integers(len(dataset))])
    h, w = img.shape
    if side > h or side > w:
        raise ValueError(f"patch side {side} exceeds image size {h}x{w}")
    r = rng.integers(h - side + 1)
    c = rng.integers(w - side + 1)
    patch = img[r:r + side, c:c + side]
    if augment:
        patch = np.rot90(patch, rng.integers(4))
        if rng.integers(2):
            patch = patch[:, ::-1]
    return np.ascontiguousarray(patch)


# --- on-disk datasets --------------------------------------------------------


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(directory, images):
    """Write AIRIIMG1 files plus a ``filename checksum`` manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, img in enumerate(images):
        name = f"img_{i:05d}.airiimg"
        write_image(d / name, img)
        lines.append(f"{name} {_sha256(d / name)}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")


def read_dataset(directory):
    """Read a dataset directory, checking manifest checksums.

    Without a manifest every ``*.airiimg`` and ``*.csv`` file is imported in
    name order, which lets users drop in their own rasters.
    """
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.exists():
        files = sorted(p for p in d.iterdir() if p.suffix in (".airiimg", ".csv"))
        if not files:
            raise FormatError(f"{d}: no rasters found")
        return [load_raster(p) for p in files]
    images = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        try:
            name, digest = line.split()
        except ValueError:
            raise FormatError(f"{manifest}: malformed line {line!r}") from None
        path = d / name
        if not path.exists() or _sha256(path) != digest:
            raise FormatError(f"{path}: missing or checksum mismatch")
        images.append(as_image(load_raster(path)))
    return images
