"""Epistemic uncertainty from denoisers trained with different seeds."""
import math

import numpy as np

from pnpri.datagen import DatasetSpec, synth_groundtruth, synth_image
from pnpri.denoise import DenoiserShelf
from pnpri.nnet import TrainConfig, train_denoiser
from pnpri.rimodel import UVCoverage, build_operator, operator_norm, simulate_measurements
from pnpri.solvers import PDConfig
from pnpri.uq import default_noise_floor, ratio_map, run_ensemble

images = synth_groundtruth(DatasetSpec(n_images=16, dims=(32, 32)))
shelves = []
for seed in range(4):
    net, _ = train_denoiser(images, TrainConfig(depth=3, channels=8, epochs=40, patch=24, seed=seed))
    shelves.append(DenoiserShelf([(net.sigma_train, net)]))

rng = np.random.default_rng(0)
op = build_operator(UVCoverage(rng.uniform(-np.pi, np.pi, 3000), rng.uniform(-np.pi, np.pi, 3000)),
                    (48, 48), 2.0)
operator_norm(op)
truth = synth_image(DatasetSpec(n_images=1, dims=(48, 48), seed=5), 0)
eta = 3e-3 * math.sqrt(2 * op.norm_sq)
vis = simulate_measurements(op, truth, eta, seed=0)

sol = run_ensemble(op, vis, shelves, "pd", PDConfig(max_iter=2000, tol=1e-5))
for kind in ("abs", "std"):
    rm = ratio_map(sol, default_noise_floor(op, eta), kind)
    vals = rm.unmasked()
    print(f"{kind:5s} deviation/mean over {vals.size} pixels: median {np.median(vals):.4f}, "
          f"90th percentile {np.percentile(vals, 90):.4f}")
