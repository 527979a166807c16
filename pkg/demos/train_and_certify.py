"""Train a small denoiser with the Jacobian penalty and certify it.

A short schedule keeps this under a minute; the acceptance run uses the
full depth-6 network.
"""
import numpy as np

from pnpri.core import rexp, solve_expo_factor
from pnpri.datagen import DatasetSpec, sample_patch, sigma0_of, synth_groundtruth
from pnpri.denoise import certify_nonexpansive
from pnpri.nnet import TrainConfig, train_denoiser

images = synth_groundtruth(DatasetSpec(n_images=16, dims=(48, 48)))
rng = np.random.default_rng(1)
a = None
for lam in (0.05, 0.0):
    cfg = TrainConfig(depth=4, channels=8, epochs=60, patch=32, lam=lam)
    net, state = train_denoiser(images, cfg)
    a = a or solve_expo_factor(cfg.sigma, sigma0_of(images))
    probes = [rexp(sample_patch(images, 16, rng), a) + cfg.sigma * rng.standard_normal((16, 16))
              for _ in range(20)]
    cert = certify_nonexpansive(net, probes)
    # Without the penalty the training loop skips the Jacobian estimate.
    jac = f", last training Jacobian norm {state.history[-1]['jac_norm']:.4f}" if lam > 0 else ""
    print(f"lam={lam}{jac}: certified max ||Jac(2D - Id)|| = {cert.max_norm:.4f}, passed={cert.passed}")
