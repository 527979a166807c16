"""Unconstrained (forward-backward) versus constrained (primal-dual) imaging.

Uses a shelf of l1 proximal denoisers so it runs in seconds; swap in a
trained shelf from ``pnpri train`` for the learned prior.
"""
import math

import numpy as np

from pnpri.core import log_snr, rexp, snr
from pnpri.datagen import DatasetSpec, synth_image
from pnpri.denoise import DenoiserShelf, SoftThresholdProx
from pnpri.rimodel import UVCoverage, build_operator, operator_norm, simulate_measurements
from pnpri.solvers import FBConfig, PDConfig, solve_fb, solve_pd

rng = np.random.default_rng(0)
op = build_operator(UVCoverage(rng.uniform(-np.pi, np.pi, 8000), rng.uniform(-np.pi, np.pi, 8000)),
                    (64, 64), 2.0)
operator_norm(op)
truth = rexp(synth_image(DatasetSpec(n_images=1, seed=3), 0), 1e4)
truth[20, 40] = 1.0
eta = 3e-3 * math.sqrt(2 * op.norm_sq)
vis = simulate_measurements(op, truth, eta, seed=1)

shelf = DenoiserShelf([(s, SoftThresholdProx(0.5 * s, sigma_train=s)) for s in (1e-3, 2e-3, 4e-3)])
x_fb, t_fb = solve_fb(op, vis, shelf, FBConfig(max_iter=2000, tol=1e-5))
x_pd, t_pd = solve_pd(op, vis, shelf, PDConfig(max_iter=2000, tol=1e-5))
for name, x, t in (("forward-backward", x_fb, t_fb), ("primal-dual", x_pd, t_pd)):
    print(f"{name:16s} {t.reason} after {len(t)} its, SNR {snr(truth, x):.2f} dB, "
          f"logSNR {log_snr(truth, x):.2f} dB, selected sigma {t.sigma_selected[-1]:g}")
