"""Convergent plug-and-play imaging for radio interferometry at desk scale.

Modules
-------
core      images, dynamic-range transforms, metrics, raster I/O
rimodel   uv coverage, the non-uniform Fourier operator, visibility I/O
denoise   denoiser shelf, scaling, nonexpansiveness certification
nnet      convolutional denoiser, training, weights I/O
solvers   forward-backward and primal-dual reconstruction
uq        ensemble uncertainty maps
datagen   synthetic ground truths and exponentiation
cli       command-line pipeline
"""

__version__ = "0.1.0"

from . import core, datagen, denoise, errors, nnet, rimodel, solvers, uq  # noqa: E402

__all__ = ["core", "datagen", "denoise", "errors", "nnet", "rimodel", "solvers", "uq"]
