"""Earth-rotation coverage, the measurement operator and a dirty image.

Run with ``python3 demos/operator_and_coverage.py``.
"""
import math

import numpy as np

from pnpri.datagen import DatasetSpec, synth_image
from pnpri.rimodel import (
    build_operator, dirty_image, epsilon_bound, generate_uv, meerkat_like_array, nyquist_field_scale,
    operator_norm, simulate_measurements,
)

arr = meerkat_like_array(32, seed=0)
uv = generate_uv(arr, math.radians(-40), 6.0, 16, nyquist_field_scale(arr))
print(f"{len(uv)} visibilities kept, {uv.dropped} dropped at the band edge")

op = build_operator(uv, (64, 64), 2.0)
print(f"||H||^2 = {operator_norm(op):.4g}")

truth = synth_image(DatasetSpec(n_images=1, seed=1), 0)
vis = simulate_measurements(op, truth, 0.05, seed=0)
eps = epsilon_bound(vis.eta, op.n_samples)
print(f"eta = {vis.eta}, l2 ball radius = {eps:.4g}, |H x - z| = {np.linalg.norm(op.forward(truth) - vis.data):.4g}")

dirty = dirty_image(op, vis)
# Normalised so a unit point source peaks at 1; extended emission piles up inside the beam.
print(f"dirty image peak {dirty.max():.3f} for a truth peaking at {truth.max():.3f}")
