"""Command-line pipeline: ``pnpri <command> [args]``.

Settings come from a flat ``key = value`` file (``--config``), then from
environment variables ``PNPRI_<KEY>`` (upper case), then from ``--set
key=value`` flags, later sources winning. Unknown keys are rejected. Run
``pnpri config`` to print every key with its default and description.

Every command writes a JSON run report holding the command line, the
canonical configuration and its hash, input and output checksums and
timings. ``pnpri replay REPORT`` reruns a report.

Exit codes: 0 success, 2 configuration or argument error, 3 file format
error, 4 solver divergence, 5 certification failure.
"""

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .core import (
    DISPLAY_LOG_BASE, METRIC_LOG_BASE, as_image, is_infinite_snr, load_raster, log_snr, rexp,
    rlog, snr, solve_expo_factor, write_image,
)
from .datagen import DatasetSpec, read_dataset, sample_patch, sigma0_of, synth_groundtruth, write_dataset
from .denoise import DenoiserShelf, IdentityDenoiser, SoftThresholdProx, certify_nonexpansive
from .errors import CertificationError, DivergenceError, FormatError
from .nnet import TrainConfig, load_weights, save_weights, train_shelf
from .rimodel import (
    KernelSpec, UVCoverage, VisibilitySet, build_operator, eta_for_dynamic_range, generate_uv,
    meerkat_like_array, nyquist_field_scale, operator_norm, read_antennas, read_visibilities,
    simulate_measurements, write_visibilities,
)
from .solvers import FBConfig, PDConfig, solve_fb, solve_pd
from .uq import default_noise_floor, export_maps, ratio_map, run_ensemble

logger = logging.getLogger("pnpri")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_DIVERGENCE, EXIT_CERT = 0, 2, 3, 4, 5
ENV_PREFIX = "PNPRI_"
SHELF_MANIFEST = "shelf.txt"


# --- configuration -----------------------------------------------------------


def _floats(text):
    vals = [float(t) for t in str(text).replace(",", " ").split()]
    if not vals:
        raise ValueError("empty list")
    return tuple(vals)


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_FORMAT = {
    float: repr,
    int: str,
    str: str,
    _bool: lambda v: "true" if v else "false",
    _floats: lambda v: ", ".join(repr(x) for x in v),
}

# key: (parser, default, description)
SCHEMA = {
    "seed": (int, 0, "master seed for data, training and noise"),
    "width": (int, 64, "image width in pixels"),
    "height": (int, 64, "image height in pixels"),
    # datagen
    "n_images": (int, 16, "number of synthetic ground truths"),
    "tau": (float, 0.01, "background soft-threshold, fraction of peak"),
    # train
    "sigma_list": (_floats, (1e-3, 2e-3), "training noise levels of the shelf"),
    "lam": (float, 5e-2, "Jacobian penalty weight"),
    "eps_hinge": (float, 0.05, "hinge margin"),
    "patch": (int, 49, "training patch side"),
    "epochs": (int, 200, "training epochs"),
    "steps_per_epoch": (int, 1, "optimiser steps per epoch"),
    "batch": (int, 4, "patches per step"),
    "lr": (float, 1e-4, "initial Adam learning rate"),
    "lr_halve_every": (int, 900, "epochs between learning-rate halvings"),
    "grad_clip": (float, 1e-2, "per-coordinate gradient clamp"),
    "power_iters": (int, 20, "power iterations per training step"),
    "depth": (int, 6, "convolution layers"),
    "channels": (int, 16, "hidden channels"),
    "leaky_slope": (float, 0.01, "negative-side slope of leaky ReLU"),
    "last_scale": (float, 0.0, "initial scale of the last layer (0 starts at the identity)"),
    # certify
    "n_probes": (int, 50, "certification probes per denoiser"),
    "probe_side": (int, 16, "side of certification probes"),
    "cert_iters": (int, 50, "power iterations per probe"),
    "cert_slack": (float, 1e-2, "allowed excess of the Jacobian norm over 1"),
    # uvgen
    "uv_mode": (str, "synthesis", "'synthesis' (earth rotation) or 'grid' (full on-grid coverage)"),
    "n_antennas": (int, 16, "antennas of the generated array"),
    "declination_deg": (float, -40.0, "source declination in degrees"),
    "hour_span": (float, 4.0, "hour-angle span in hours"),
    "n_steps": (int, 16, "time steps"),
    "wavelength": (float, 0.21, "observing wavelength in metres"),
    "field_margin": (float, 0.95, "longest baseline position as a fraction of the band edge"),
    # operator
    "padding": (float, 2.0, "FFT oversampling factor"),
    "kernel": (str, "kaiser_bessel", "'kaiser_bessel' or 'nearest'"),
    "kernel_support": (int, 7, "interpolation kernel support (odd)"),
    # simulate
    "eta": (float, 0.0, "visibility noise level; 0 derives it from dyn_range"),
    "dyn_range": (float, 1e4, "target measurement dynamic range when eta = 0"),
    "noiseless": (_bool, False, "simulate without noise (eta recorded as given)"),
    # reconstruct
    "solver": (str, "pd", "'fb' (unconstrained) or 'pd' (constrained)"),
    "denoiser": (str, "shelf", "'shelf', 'identity' or 'prox'"),
    "prox_lambda": (float, 1e-3, "threshold of the 'prox' denoiser"),
    "tol": (float, 1e-5, "relative-change stopping tolerance"),
    "max_iter": (int, 2000, "iteration cap"),
    "epsilon": (float, 0.0, "constraint radius; 0 uses the two-sigma bound"),
    "peak_update_every": (int, 1, "iterations between peak refreshes"),
    # ensemble / display
    "noise_floor": (float, -1.0, "ratio-map floor; negative uses eta / sqrt(2 |H|^2)"),
    "deviation": (str, "abs", "ratio-map deviation: 'abs' or 'std'"),
    "display_base": (float, DISPLAY_LOG_BASE, "log base of PNG views"),
    "metric_base": (float, METRIC_LOG_BASE, "log base of logSNR"),
    "export_png": (_bool, True, "write PNG views next to image outputs"),
}

_CHOICES = {
    "uv_mode": ("synthesis", "grid"),
    "kernel": ("kaiser_bessel", "nearest"),
    "solver": ("fb", "pd"),
    "denoiser": ("shelf", "identity", "prox"),
    "deviation": ("abs", "std"),
}


class ConfigError(ValueError):
    pass


def default_config():
    return {k: v[1] for k, v in SCHEMA.items()}


def _set(cfg, key, text, origin):
    key = key.strip()
    if key not in SCHEMA:
        raise ConfigError(f"{origin}: unknown key {key!r}")
    try:
        val = SCHEMA[key][0](str(text).strip())
    except ValueError as exc:
        raise ConfigError(f"{origin}: bad value for {key}: {exc}") from None
    if key in _CHOICES and val not in _CHOICES[key]:
        raise ConfigError(f"{origin}: {key} must be one of {_CHOICES[key]}")
    cfg[key] = val


def parse_config_text(text, cfg=None, origin="config"):
    """Apply ``key = value`` lines to ``cfg`` (defaults if omitted)."""
    cfg = default_config() if cfg is None else cfg
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        key, val = line.split("=", 1)
        _set(cfg, key, val, f"{origin}:{n}")
    return cfg


def canonical_text(cfg):
    """Sorted ``key = value`` lines; parses back to the same config."""
    return "".join(f"{k} = {_FORMAT[SCHEMA[k][0]](cfg[k])}\n" for k in sorted(SCHEMA))


def config_hash(cfg):
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()


def load_config(path=None, overrides=(), environ=None):
    cfg = default_config()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        parse_config_text(text, cfg, str(path))
    environ = os.environ if environ is None else environ
    for name, val in sorted(environ.items()):
        if name.startswith(ENV_PREFIX):
            _set(cfg, name[len(ENV_PREFIX):].lower(), val, f"env {name}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        _set(cfg, key, val, "--set")
    return cfg


def describe_config():
    lines = []
    for k in sorted(SCHEMA):
        parser, default, doc = SCHEMA[k]
        lines.append(f"{k} = {_FORMAT[parser](default)}  # {doc}")
    return "\n".join(lines) + "\n"


# --- helpers -----------------------------------------------------------------


def export_view(img, path, a=DISPLAY_LOG_BASE):
    """Save ``rlog_a`` of ``img`` as an 8-bit grayscale PNG.

    Negative pixels are clipped to zero and the log is taken relative to
    the image peak. The result is min-max scaled to ``0..255``; a constant
    image maps to all zeros.
    """
    if not a > 1:
        raise ValueError(f"display base must be > 1, got {a}")
    x = np.clip(as_image(img), 0, None)
    peak = float(x.max())
    u = rlog(x, a, peak) if peak > 0 else x
    lo, hi = float(u.min()), float(u.max())
    scaled = (u - lo) / (hi - lo) if hi > lo else np.zeros_like(u)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path, format="PNG")


def _sha256(path):
    p = Path(path)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != "report.json"):
            h.update(str(f.relative_to(p)).encode())
            h.update(f.read_bytes())
        return h.hexdigest()
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _require(path):
    if not Path(path).exists():
        raise FormatError(f"{path}: no such file or directory")
    return path


def _dims(cfg):
    if cfg["width"] < 1 or cfg["height"] < 1:
        raise ConfigError("width and height must be positive")
    return cfg["width"], cfg["height"]


def _kernel(cfg):
    if cfg["kernel"] == "nearest":
        return KernelSpec("nearest", 1)
    return KernelSpec("kaiser_bessel", cfg["kernel_support"])


def _operator(cfg, uv, shape=None):
    dims = (shape[1], shape[0]) if shape is not None else _dims(cfg)
    op = build_operator(uv, dims, cfg["padding"], _kernel(cfg))
    operator_norm(op)
    return op


def _train_config(cfg, seed):
    return TrainConfig(
        lam=cfg["lam"], eps_hinge=cfg["eps_hinge"], patch=cfg["patch"], epochs=cfg["epochs"],
        steps_per_epoch=cfg["steps_per_epoch"], batch=cfg["batch"], lr=cfg["lr"],
        lr_halve_every=cfg["lr_halve_every"], grad_clip=cfg["grad_clip"],
        power_iters=cfg["power_iters"], depth=cfg["depth"], channels=cfg["channels"],
        leaky_slope=cfg["leaky_slope"], last_scale=cfg["last_scale"], seed=seed,
        sigma=cfg["sigma_list"][0],
    )


def write_shelf(directory, nets):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, net in enumerate(sorted(nets, key=lambda n: n.sigma_train)):
        name = f"net_{i:02d}.airinet"
        save_weights(net, d / name)
        lines.append(f"{name} {_sha256(d / name)}")
    (d / SHELF_MANIFEST).write_text("\n".join(lines) + "\n")


def read_shelf(directory):
    d = Path(_require(directory))
    manifest = d / SHELF_MANIFEST
    if not manifest.exists():
        raise FormatError(f"{d}: missing {SHELF_MANIFEST}")
    nets = []
    for line in manifest.read_text().split("\n"):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{manifest}: malformed line {line!r}")
        path = d / parts[0]
        if not path.exists() or _sha256(path) != parts[1]:
            raise FormatError(f"{path}: missing or checksum mismatch")
        net = load_weights(path)
        if net.sigma_train is None:
            raise FormatError(f"{path}: network has no training noise level")
        nets.append(net)
    if not nets:
        raise FormatError(f"{manifest}: empty shelf")
    return DenoiserShelf.from_denoisers(nets)


def _write_image_out(cfg, path, img):
    write_image(path, img)
    outs = [str(path)]
    if cfg["export_png"]:
        png = Path(path).with_suffix(".png")
        export_view(img, png, cfg["display_base"])
        outs.append(str(png))
    return outs


# --- commands ----------------------------------------------------------------


@dataclass
class Run:
    cfg: dict
    args: argparse.Namespace
    threads: int
    inputs: list
    outputs: list
    results: dict


def cmd_datagen(run):
    cfg = run.cfg
    spec = DatasetSpec(n_images=cfg["n_images"], dims=_dims(cfg), seed=cfg["seed"], tau=cfg["tau"])
    images = synth_groundtruth(spec, workers=run.threads)
    write_dataset(run.args.out, images)
    run.outputs.append(run.args.out)
    run.results["sigma0"] = sigma0_of(images)


def cmd_train(run):
    cfg = run.cfg
    images = read_dataset(_require(run.args.dataset))
    run.inputs.append(run.args.dataset)
    tcfg = _train_config(cfg, cfg["seed"])
    shelf, failures = train_shelf(images, list(cfg["sigma_list"]), tcfg)
    write_shelf(run.args.out, [e.denoiser for e in shelf])
    run.outputs.append(run.args.out)
    run.results["sigmas"] = shelf.sigmas
    run.results["failures"] = {repr(k): v for k, v in failures.items()}


def certification_probes(net, images, n, side, rng):
    """Noisy exponentiated patches at the net's noise level, plus pure noise."""
    sigma = net.sigma_train
    a = solve_expo_factor(sigma, sigma0_of(images))
    n_noise = max(1, n // 5)
    probes = [rexp(sample_patch(images, side, rng), a) + sigma * rng.standard_normal((side, side))
              for _ in range(n - n_noise)]
    probes += [np.abs(rng.standard_normal((side, side))) * sigma for _ in range(n_noise)]
    return probes


def cmd_certify(run):
    cfg = run.cfg
    shelf = read_shelf(run.args.shelf)
    images = read_dataset(_require(run.args.dataset))
    run.inputs += [run.args.shelf, run.args.dataset]
    rng = np.random.default_rng(cfg["seed"])
    certs, failed = [], []
    for entry in shelf:
        probes = certification_probes(entry.denoiser, images, cfg["n_probes"], cfg["probe_side"], rng)
        cert = certify_nonexpansive(entry.denoiser, probes, cfg["cert_iters"], cfg["cert_slack"],
                                    seed=int(rng.integers(2**31)))
        certs.append({"sigma": entry.sigma, "max_norm": cert.max_norm, "passed": cert.passed})
        if not cert.passed:
            failed.append(entry.sigma)
    run.results["certificates"] = certs
    for c in certs:
        print(f"sigma={c['sigma']:.3g} max|Jac(2D-Id)|={c['max_norm']:.5f} "
              f"{'PASS' if c['passed'] else 'FAIL'}")
    if failed:
        raise CertificationError(f"certification failed for sigma in {failed}")


def cmd_uvgen(run):
    cfg = run.cfg
    if cfg["uv_mode"] == "grid":
        w, h = _dims(cfg)
        ku = 2 * np.pi * (np.arange(w) - w // 2) / w
        kv = 2 * np.pi * (np.arange(h) - h // 2) / h
        uu, vv = np.meshgrid(ku, kv)
        uv = UVCoverage(uu.ravel(), vv.ravel())
    else:
        if run.args.antennas:
            array = read_antennas(_require(run.args.antennas))
            run.inputs.append(run.args.antennas)
        else:
            array = meerkat_like_array(cfg["n_antennas"], seed=cfg["seed"])
        scale = nyquist_field_scale(array, cfg["wavelength"], cfg["field_margin"])
        uv = generate_uv(array, math.radians(cfg["declination_deg"]), cfg["hour_span"],
                         cfg["n_steps"], scale, cfg["wavelength"])
        run.results["dropped"] = uv.dropped
    write_visibilities(run.args.out, VisibilitySet(uv, np.zeros(len(uv)), 0.0))
    run.outputs.append(run.args.out)
    run.results["n_samples"] = len(uv)


def cmd_simulate(run):
    cfg = run.cfg
    truth = load_raster(_require(run.args.truth))
    cov = read_visibilities(_require(run.args.coverage))
    run.inputs += [run.args.truth, run.args.coverage]
    op = _operator(cfg, cov.uv, truth.shape)
    eta = cfg["eta"] if cfg["eta"] > 0 else eta_for_dynamic_range(op, truth.max(), cfg["dyn_range"])
    if cfg["noiseless"]:
        vis = VisibilitySet(cov.uv, op.forward(truth), eta)
    else:
        vis = simulate_measurements(op, truth, eta, seed=cfg["seed"])
    write_visibilities(run.args.out, vis)
    run.outputs.append(run.args.out)
    run.results.update(eta=eta, norm_sq=op.norm_sq, n_samples=vis.n_samples)


def _denoiser(run, shelf_path):
    kind = run.cfg["denoiser"]
    if kind == "identity":
        return IdentityDenoiser()
    if kind == "prox":
        return SoftThresholdProx(run.cfg["prox_lambda"])
    if not shelf_path:
        raise ConfigError("denoiser = shelf needs --shelf")
    run.inputs.append(shelf_path)
    return read_shelf(shelf_path)


def _solver_cfg(cfg):
    common = dict(max_iter=cfg["max_iter"], tol=cfg["tol"], peak_update_every=cfg["peak_update_every"])
    if cfg["solver"] == "fb":
        return FBConfig(**common)
    return PDConfig(epsilon=cfg["epsilon"] or None, **common)


def _trace_summary(trace):
    return {"iterations": len(trace), "reason": trace.reason, "final_residual": trace.final_residual,
            "epsilon": trace.epsilon, "swaps": [[i, s] for i, s in trace.swaps]}


def cmd_reconstruct(run):
    cfg = run.cfg
    vis = read_visibilities(_require(run.args.vis))
    run.inputs.append(run.args.vis)
    op = _operator(cfg, vis.uv)
    den = _denoiser(run, run.args.shelf)
    solve = solve_fb if cfg["solver"] == "fb" else solve_pd
    x, trace = solve(op, vis, den, _solver_cfg(cfg))
    out = Path(run.args.out)
    run.outputs += _write_image_out(cfg, out, x)
    trace_path = out.with_suffix(".trace.csv")
    trace.to_csv(trace_path)
    run.outputs.append(str(trace_path))
    run.results["trace"] = _trace_summary(trace)


def cmd_ensemble(run):
    cfg = run.cfg
    vis = read_visibilities(_require(run.args.vis))
    run.inputs.append(run.args.vis)
    op = _operator(cfg, vis.uv)
    shelves = [read_shelf(p) for p in run.args.shelves]
    run.inputs += list(run.args.shelves)
    sol = run_ensemble(op, vis, shelves, cfg["solver"], _solver_cfg(cfg), workers=run.threads)
    if len(sol) < 2:
        raise DivergenceError(f"only {len(sol)} ensemble members converged: {sol.failures}")
    floor = cfg["noise_floor"] if cfg["noise_floor"] >= 0 else default_noise_floor(op, vis.eta)
    paths = export_maps(run.args.out, sol, floor, cfg["deviation"])
    if cfg["export_png"]:
        for name in ("mean", "deviation_abs", "deviation_std", "ratio"):
            png = paths[name].with_suffix(".png")
            export_view(load_raster(paths[name]), png, cfg["display_base"])
    run.outputs.append(run.args.out)
    rm = ratio_map(sol, floor, cfg["deviation"])
    vals = rm.unmasked()
    run.results.update(
        member_seeds=sol.member_seeds, failures={str(k): v for k, v in sol.failures.items()},
        noise_floor=floor, masked_fraction=float(1 - rm.mask.mean()),
        median_ratio=float(np.median(vals)) if vals.size else None,
        max_ratio=float(vals.max()) if vals.size else None,
        traces=[_trace_summary(t) for t in sol.traces],
    )


def _fmt_snr(val):
    return "inf" if is_infinite_snr(val) else f"{val:.4f}"


def cmd_metrics(run):
    cfg = run.cfg
    truth = load_raster(_require(run.args.truth))
    est = load_raster(_require(run.args.estimate))
    run.inputs += [run.args.truth, run.args.estimate]
    s = snr(truth, est)
    ls = log_snr(truth, est, cfg["metric_base"])
    print(f"SNR    {_fmt_snr(s)} dB")
    print(f"logSNR {_fmt_snr(ls)} dB")
    run.results.update(snr=_fmt_snr(s), log_snr=_fmt_snr(ls))


def cmd_view(run):
    img = load_raster(_require(run.args.image))
    run.inputs.append(run.args.image)
    export_view(img, run.args.out, run.cfg["display_base"])
    run.outputs.append(run.args.out)


COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "certify": cmd_certify,
    "uvgen": cmd_uvgen,
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "ensemble": cmd_ensemble,
    "metrics": cmd_metrics,
    "view": cmd_view,
}


def build_parser():
    p = argparse.ArgumentParser(prog="pnpri", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting (repeatable)")
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    p.add_argument("--report", help="run report path (default depends on the command)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("datagen", help="synthesise a ground-truth dataset")
    s.add_argument("out", help="output directory")
    s = sub.add_parser("train", help="train a denoiser shelf")
    s.add_argument("dataset")
    s.add_argument("out", help="output shelf directory")
    s = sub.add_parser("certify", help="check firm nonexpansiveness of a shelf")
    s.add_argument("shelf")
    s.add_argument("dataset", help="dataset the probes are drawn from")
    s = sub.add_parser("uvgen", help="generate uv coverage")
    s.add_argument("out", help="AIRIVIS1 coverage file (zero data)")
    s.add_argument("--antennas", help="CSV of x,y,z antenna positions")
    s = sub.add_parser("simulate", help="simulate noisy visibilities")
    s.add_argument("truth")
    s.add_argument("coverage")
    s.add_argument("out")
    s = sub.add_parser("reconstruct", help="reconstruct an image")
    s.add_argument("vis")
    s.add_argument("out", help="AIRIIMG1 output image")
    s.add_argument("--shelf")
    s = sub.add_parser("ensemble", help="ensemble reconstruction and uncertainty maps")
    s.add_argument("vis")
    s.add_argument("out", help="output directory")
    s.add_argument("shelves", nargs="+")
    s = sub.add_parser("metrics", help="SNR and logSNR of an estimate")
    s.add_argument("truth")
    s.add_argument("estimate")
    s = sub.add_parser("view", help="export an rlog-scaled PNG")
    s.add_argument("image")
    s.add_argument("out")
    s = sub.add_parser("config", help="print every setting with its default")
    s = sub.add_parser("replay", help="rerun the command recorded in a report")
    s.add_argument("report_file")
    return p


def _default_report(args):
    out = getattr(args, "out", None)
    if out is None:
        return Path(f"{args.command}.report.json")
    out = Path(out)
    if args.command in ("datagen", "train", "ensemble"):
        return out / "report.json"
    return out.with_name(out.name + ".report.json")


def _write_report(path, report):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")


def _replay(report_file, threads):
    rep = json.loads(Path(_require(report_file)).read_text())
    cfg = parse_config_text(rep["config"])
    sets = [f"{k}={v}" for k, v in (line.split(" = ", 1) for line in canonical_text(cfg).splitlines())]
    argv = sum((["--set", s] for s in sets), []) + ["--threads", str(threads)] + rep["argv"]
    return main(argv, environ={})


def main(argv=None, environ=None):
    """Entry point; returns the exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "config":
        sys.stdout.write(describe_config())
        return EXIT_OK
    if args.command == "replay":
        try:
            return _replay(args.report_file, args.threads)
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            print(f"error: bad report: {exc}", file=sys.stderr)
            return EXIT_FORMAT
    cmd_argv = argv[argv.index(args.command):]
    code, error, run = EXIT_OK, None, None
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, args.set, environ)
        run = Run(cfg, args, max(1, args.threads), [], [], {})
        COMMANDS[args.command](run)
    except FormatError as exc:
        code, error = EXIT_FORMAT, exc
    except DivergenceError as exc:
        code, error = EXIT_DIVERGENCE, exc
    except CertificationError as exc:
        code, error = EXIT_CERT, exc
    except (ConfigError, ValueError) as exc:
        code, error = EXIT_CONFIG, exc
    if error is not None:
        print(f"error: {error}", file=sys.stderr)
    if run is None:
        return code
    report = {
        "version": __version__,
        "command": args.command,
        "argv": cmd_argv,
        "config": canonical_text(run.cfg),
        "config_hash": config_hash(run.cfg),
        "inputs": {str(p): _sha256(p) for p in run.inputs if Path(p).exists()},
        "outputs": {str(p): _sha256(p) for p in run.outputs if Path(p).exists()},
        "results": run.results,
        "exit_code": code,
        "error": None if error is None else str(error),
        "timings": {"wall_seconds": time.perf_counter() - t0},
    }
    try:
        _write_report(args.report or _default_report(args), report)
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
