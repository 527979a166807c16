"""Small residual convolutional denoiser with hand-written derivatives.

Architecture: ``depth`` 3x3 convolutions with reflection padding, leaky ReLU
after every layer but the last, the output added to the input, then a ReLU
so results are nonnegative. Tensors are channel-last ``(B, H, W, C)``;
kernels are stored ``(C_out, C_in, 3, 3)`` and applied as cross-correlation.

Between activation kinks the network is linear in its tangent, so
:meth:`ConvNetDenoiser.jvp` and :meth:`ConvNetDenoiser.vjp` are exact. The
Jacobian penalty differentiates ``<w, J u>`` with respect to the weights by
back-propagating through the tangent pass with the primal activation masks
held fixed.
"""

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import rexp, solve_expo_factor
from .denoise import DenoiserShelf
from .errors import FormatError, TrainingAbort

logger = logging.getLogger(__name__)

NET_MAGIC = b"AIRINET1"

__all__ = [
    "ConvNetDenoiser",
    "TrainConfig",
    "TrainState",
    "jac_norm_training",
    "load_weights",
    "save_weights",
    "train_denoiser",
    "train_shelf",
    "train_step",
]


# --- convolution primitives ---------------------------------------------------


def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")


def _pad_adjoint(g):
    # Transpose of reflection padding: fold border rows/cols back in.
    h, w = g.shape[1] - 2, g.shape[2] - 2
    gc = g[:, :, 1:-1].copy()
    gc[:, :, 1] += g[:, :, 0]
    gc[:, :, w - 2] += g[:, :, w + 1]
    gx = gc[:, 1:-1].copy()
    gx[:, 1] += gc[:, 0]
    gx[:, h - 2] += gc[:, h + 1]
    return gx


def _im2col(x):
    # Columns ordered (kernel row, kernel col, channel).
    b, h, w, c = x.shape
    xp = _pad(x)
    cols = np.concatenate([xp[:, i:i + h, j:j + w] for i in range(3) for j in range(3)], axis=-1)
    return cols.reshape(b * h * w, 9 * c)


def _col2im(cols, shape):
    b, h, w, c = shape
    cols = cols.reshape(b, h, w, 9, c)
    gp = np.zeros((b, h + 2, w + 2, c))
    for i in range(3):
        for j in range(3):
            gp[:, i:i + h, j:j + w] += cols[:, :, :, 3 * i + j]
    return _pad_adjoint(gp)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected (H, W) or (B, H, W) input, got shape {x.shape}")


# --- network ----------------------------------------------------------------


class ConvNetDenoiser:
    """Residual conv denoiser ``D(x) = relu(x + R(x))``.

    Parameters
    ----------
    weights : list of (kernel, bias)
        ``kernel`` has shape ``(C_out, C_in, 3, 3)``; the first layer takes
        one channel and the last produces one.
    leaky_slope : float
    sigma_train : float, optional
        Training noise level, in intensity units of peak-1 images.
    seed : int
        Training seed, kept for provenance.
    """

    def __init__(self, weights, leaky_slope=0.01, sigma_train=None, seed=0):
        weights = [(np.asarray(k, dtype=np.float64), np.asarray(b, dtype=np.float64))
                   for k, b in weights]
        if len(weights) < 2:
            raise ValueError("need at least two layers")
        if weights[0][0].shape[1] != 1 or weights[-1][0].shape[0] != 1:
            raise ValueError("first layer must take 1 channel and last must emit 1")
        for (k, b), (k2, _) in zip(weights, weights[1:]):
            if k.shape[0] != k2.shape[1]:
                raise ValueError("layer channel counts do not chain")
        for k, b in weights:
            if k.shape[2:] != (3, 3) or b.shape != (k.shape[0],):
                raise ValueError("kernels must be 3x3 with one bias per output channel")
            if not (np.all(np.isfinite(k)) and np.all(np.isfinite(b))):
                raise ValueError("weights must be finite")
        self.weights = weights
        self.leaky_slope = float(leaky_slope)
        self.sigma_train = sigma_train
        self.seed = int(seed)

    @classmethod
    def init(cls, depth=6, channels=16, leaky_slope=0.01, seed=0, last_scale=0.1,
             sigma_train=None):
        """He-normal initialisation; the last layer is scaled by ``last_scale``."""
        if depth < 2:
            raise ValueError("depth must be >= 2")
        rng = np.random.default_rng(seed)
        dims = [1] + [channels] * (depth - 1) + [1]
        weights = []
        for layer, (cin, cout) in enumerate(zip(dims, dims[1:])):
            std = math.sqrt(2.0 / (9 * cin))
            if layer == depth - 1:
                std *= last_scale
            weights.append((rng.normal(0, std, (cout, cin, 3, 3)), np.zeros(cout)))
        return cls(weights, leaky_slope, sigma_train, seed)

    @property
    def depth(self):
        return len(self.weights)

    @property
    def channels(self):
        return self.weights[0][0].shape[0]

    def params(self):
        return [p for kb in self.weights for p in kb]

    def with_params(self, params):
        pairs = list(zip(params[0::2], params[1::2]))
        return ConvNetDenoiser(pairs, self.leaky_slope, self.sigma_train, self.seed)

    def _mat(self, layer):
        k = self.weights[layer][0]
        return k.transpose(2, 3, 1, 0).reshape(-1, k.shape[0])  # (9 C_in, C_out)

    def _forward(self, x):
        """Batched forward pass keeping what the derivatives need."""
        b, h, w = x.shape
        if h < 3 or w < 3:
            raise ValueError(f"input must be at least 3x3, got {h}x{w}")
        act = x[..., None]
        cols_list, slopes = [], []
        for layer in range(self.depth):
            cols = _im2col(act)
            z = cols @ self._mat(layer) + self.weights[layer][1]
            z = z.reshape(b, h, w, -1)
            cols_list.append(cols)
            if layer < self.depth - 1:
                slope = np.where(z > 0, 1.0, self.leaky_slope)
                slopes.append(slope)
                act = z * slope
            else:
                s = x + z[..., 0]
        out_mask = s > 0
        # np.maximum keeps NaN visible to callers instead of clipping it to 0.
        return np.maximum(s, 0.0), (cols_list, slopes, out_mask, x.shape)

    def __call__(self, x):
        xb, single = _as_batch(x)
        out, _ = self._forward(xb)
        return out[0] if single else out

    def _tangent(self, cache, v):
        """Unfolded tangent inputs to each layer, and the output tangent."""
        _, slopes, out_mask, shape = cache
        b, h, w = shape
        t = v[..., None]
        cols_list = []
        for layer in range(self.depth):
            cols = _im2col(t)
            cols_list.append(cols)
            z = (cols @ self._mat(layer)).reshape(b, h, w, -1)
            t = z * slopes[layer] if layer < self.depth - 1 else z
        return cols_list, np.where(out_mask, v + t[..., 0], 0.0)

    def _backward(self, cols_list, cache, g, need_input=True, need_weights=True):
        """Weight and input cotangents given the output cotangent ``g``.

        With ``need_weights`` false the weight entries are ``None``.
        """
        _, slopes, out_mask, shape = cache
        b, h, w = shape
        gs = np.where(out_mask, g, 0.0)
        gz = gs.reshape(-1, 1)
        grads = [None] * self.depth
        gx = None
        for layer in range(self.depth - 1, -1, -1):
            if need_weights:
                cout, cin = self.weights[layer][0].shape[:2]
                gk = (cols_list[layer].T @ gz).reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
                grads[layer] = (gk, gz.sum(axis=0))
            if layer == 0 and not need_input:
                break
            cin = self.weights[layer][0].shape[1]
            ga = _col2im(gz @ self._mat(layer).T, (b, h, w, cin))
            if layer > 0:
                gz = (ga * slopes[layer - 1]).reshape(-1, ga.shape[-1])
            else:
                gx = gs + ga[..., 0]
        return grads, gx

    def jvp(self, x, v):
        """Jacobian of the denoiser at ``x`` applied to ``v``."""
        xb, single = _as_batch(x)
        vb, _ = _as_batch(v)
        _, cache = self._forward(xb)
        _, out = self._tangent(cache, vb)
        return out[0] if single else out

    def vjp(self, x, w):
        """Transposed Jacobian at ``x`` applied to ``w``."""
        xb, single = _as_batch(x)
        wb, _ = _as_batch(w)
        _, cache = self._forward(xb)
        _, gx = self._backward(cache[0], cache, wb, need_weights=False)
        return gx[0] if single else gx

    def vjp_full(self, x, w):
        """``(weight gradients, input gradient)`` of ``<w, D(x)>``."""
        xb, single = _as_batch(x)
        wb, _ = _as_batch(w)
        _, cache = self._forward(xb)
        grads, gx = self._backward(cache[0], cache, wb)
        return grads, (gx[0] if single else gx)


# --- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    """Hyperparameters for one denoiser.

    One epoch is ``steps_per_epoch`` optimiser steps on freshly sampled
    batches. ``lr`` halves every ``lr_halve_every`` epochs. Gradients are
    clamped coordinate-wise to ``[-grad_clip, grad_clip]`` before Adam.
    """

    sigma: float = 2e-3
    lam: float = 5e-2
    eps_hinge: float = 0.05
    patch: int = 49
    epochs: int = 200
    steps_per_epoch: int = 1
    batch: int = 4
    lr: float = 1e-4
    lr_halve_every: int = 900
    grad_clip: float = 1e-2
    power_iters: int = 20
    depth: int = 6
    channels: int = 16
    leaky_slope: float = 0.01
    last_scale: float = 0.0
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.eps_hinge < 1:
            raise ValueError("eps_hinge must be in (0, 1)")
        if self.patch < 8:
            raise ValueError("patch must be >= 8")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")

    def learning_rate(self, epoch):
        return self.lr * 0.5 ** (epoch // self.lr_halve_every)


@dataclass
class TrainState:
    step: int = 0
    m: list = None
    v: list = None
    power_vector: np.ndarray = None
    data_loss: float = float("nan")
    hinge_loss: float = float("nan")
    jac_norm: float = float("nan")
    history: list = field(default_factory=list)


def _unit_rows(a):
    n = np.sqrt(np.einsum("bij,bij->b", a, a))
    return a / np.where(n > 0, n, 1.0)[:, None, None], n


def jac_norm_training(net, y_tilde, iters, warm_vector=None, rng=None):
    """Per-sample spectral norms of ``Jac(2 D - Id)`` at a batch of points.

    Runs one power iteration per sample, all in the same batched passes.
    Returns ``(norms, u, w)``: ``norms`` has one entry per sample, ``u``
    holds the unit right singular vector estimates and ``w = J u / |J u|``
    sample by sample. A 2-D ``y_tilde`` is treated as a batch of one.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    yb, _ = _as_batch(y_tilde)
    _, cache = net._forward(yb)

    def jvp(v):
        return 2 * net._tangent(cache, v)[1] - v

    def vjp(g):
        return 2 * net._backward(cache[0], cache, g, need_weights=False)[1] - g

    if warm_vector is None or warm_vector.shape != yb.shape:
        rng = rng or np.random.default_rng(0)
        warm_vector = rng.standard_normal(yb.shape)
    u, _ = _unit_rows(np.array(warm_vector, dtype=np.float64))
    for _ in range(iters):
        u, n = _unit_rows(vjp(jvp(u)))
        if not np.all(np.isfinite(n)):
            raise TrainingAbort("non-finite power iterate")
    w, norms = _unit_rows(jvp(u))
    if not np.all(np.isfinite(norms)):
        raise TrainingAbort("non-finite Jacobian norm")
    return norms, u, w


def _hinge_weight_grad(net, y_tilde, u, w):
    """Weight gradient of ``<w, Jac(2 D - Id) u>`` at fixed ``u``, ``w``.

    Summed over the batch; scale or zero rows of ``w`` to weight samples.
    """
    _, cache = net._forward(y_tilde)
    t_cols, _ = net._tangent(cache, u)
    grads, _ = net._backward(t_cols, cache, w, need_input=False)
    return [g for gk, gb in grads for g in (2 * gk, np.zeros_like(gb))]


def train_step(net, state, clean, cfg, rng):
    """One Adam step on a batch of clean patches ``(B, P, P)``.

    Loss is the mean absolute denoising error plus ``lam`` times the batch
    mean of ``max(||Jac(2 D - Id)(y_tilde)||, 1 - eps_hinge)``, with each
    ``y_tilde`` drawn uniformly on the segment between a clean patch and its
    noisy version. The report's ``jac_norm`` is the batch maximum.
    Returns ``(net, state, report)``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noisy = clean + cfg.sigma * rng.standard_normal(clean.shape)
    out, cache = net._forward(noisy)
    diff = out - clean
    data_loss = float(np.abs(diff).mean())
    grads, _ = net._backward(cache[0], cache, np.sign(diff) / diff.size, need_input=False)
    flat = [g for pair in grads for g in pair]

    floor = 1.0 - cfg.eps_hinge
    hinge, jnorm = floor, float("nan")
    if cfg.lam > 0:
        t = rng.uniform(0, 1, (clean.shape[0], 1, 1))
        y_tilde = clean + t * (noisy - clean)
        norms, u, w = jac_norm_training(net, y_tilde, cfg.power_iters, state.power_vector, rng)
        state.power_vector = u
        active = norms > floor
        hinge, jnorm = float(np.maximum(norms, floor).mean()), float(norms.max())
        if active.any():
            w = w * (active / len(norms))[:, None, None]
            flat = [g + cfg.lam * h for g, h in zip(flat, _hinge_weight_grad(net, y_tilde, u, w))]
    loss = data_loss + cfg.lam * hinge
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in flat):
        raise TrainingAbort(f"non-finite loss at step {state.step}", state)

    flat = [np.clip(g, -cfg.grad_clip, cfg.grad_clip) for g in flat]
    params = net.params()
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    state.step += 1
    lr = cfg.learning_rate((state.step - 1) // cfg.steps_per_epoch)
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    new = []
    for p, g, m, v in zip(params, flat, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        new.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
    net = net.with_params(new)
    state.data_loss, state.hinge_loss, state.jac_norm = data_loss, cfg.lam * hinge, jnorm
    report = {"step": state.step, "loss": loss, "data": data_loss, "hinge": cfg.lam * hinge,
              "jac_norm": jnorm, "lr": lr, "max_abs_grad": max(float(np.abs(g).max()) for g in flat)}
    state.history.append(report)
    return net, state, report


def train_denoiser(images, cfg, sigma0=None, log_every=0):
    """Train one denoiser on patches from peak-normalised ``images``.

    Patches are exponentiated on the fly with the factor solved from
    ``cfg.sigma`` and the dataset's faint level ``sigma0``. Returns
    ``(net, state)``.
    """
    from .datagen import sample_patch, sigma0_of

    if sigma0 is None:
        sigma0 = sigma0_of(images)
    a = solve_expo_factor(cfg.sigma, sigma0)
    rng = np.random.default_rng(cfg.seed)
    net = ConvNetDenoiser.init(cfg.depth, cfg.channels, cfg.leaky_slope,
                               seed=int(rng.integers(2**63)), last_scale=cfg.last_scale,
                               sigma_train=cfg.sigma)
    net.seed = cfg.seed
    state = TrainState()
    total = cfg.epochs * cfg.steps_per_epoch
    for _ in range(total):
        batch = np.stack([
            rexp(sample_patch(images, cfg.patch, rng, augment=cfg.augment), a)
            for _ in range(cfg.batch)
        ])
        net, state, report = train_step(net, state, batch, cfg, rng)
        if log_every and state.step % log_every == 0:
            logger.info("step %d loss %.4g data %.4g jac %.4f", state.step, report["loss"],
                        report["data"], report["jac_norm"])
    return net, state


def train_shelf(images, sigma_list, cfg, sigma0=None):
    """Train one denoiser per noise level.

    A failing entry is logged and skipped. Returns ``(shelf, failures)``,
    ``failures`` mapping sigma to the error message.
    """
    sigma_list = list(sigma_list)
    if sorted(sigma_list) != sigma_list:
        raise ValueError("sigma_list must be ascending")
    nets, failures = [], {}
    for sigma in sigma_list:
        try:
            net, _ = train_denoiser(images, replace(cfg, sigma=sigma), sigma0)
            nets.append(net)
        except (TrainingAbort, ValueError) as exc:
            logger.warning("training at sigma=%g failed: %s", sigma, exc)
            failures[sigma] = str(exc)
    if not nets:
        raise TrainingAbort(f"every shelf entry failed: {failures}")
    return DenoiserShelf.from_denoisers(nets), failures


# --- weights file ------------------------------------------------------------


def save_weights(net, path):
    """Write ``net`` in the AIRINET1 format.

    Layout (little-endian): magic, u32 depth, u32 channels, f64 leaky slope,
    f64 sigma_train (NaN if unset), u64 seed, then per layer the kernel
    ``(C_out, C_in, 3, 3)`` in C order followed by the bias.
    """
    sigma = math.nan if net.sigma_train is None else float(net.sigma_train)
    with open(path, "wb") as f:
        f.write(NET_MAGIC)
        f.write(struct.pack("<IIddQ", net.depth, net.channels, net.leaky_slope, sigma, net.seed))
        for k, b in net.weights:
            f.write(np.ascontiguousarray(k, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _layer_shapes(depth, channels):
    dims = [1] + [channels] * (depth - 1) + [1]
    return [((cout, cin, 3, 3), (cout,)) for cin, cout in zip(dims, dims[1:])]


def load_weights(path):
    data = Path(path).read_bytes()
    if data[:8] != NET_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}")
    head = struct.calcsize("<IIddQ")
    if len(data) < 8 + head:
        raise FormatError(f"{path}: truncated header")
    depth, channels, slope, sigma, seed = struct.unpack("<IIddQ", data[8:8 + head])
    if depth < 2 or channels < 1:
        raise FormatError(f"{path}: invalid architecture depth={depth} channels={channels}")
    shapes = _layer_shapes(depth, channels)
    expected = sum(int(np.prod(s)) for pair in shapes for s in pair)
    if len(data) != 8 + head + 8 * expected:
        raise FormatError(f"{path}: weight block size does not match architecture")
    flat = np.frombuffer(data, dtype="<f8", offset=8 + head).astype(np.float64)
    weights, pos = [], 0
    for ks, bs in shapes:
        nk, nb = int(np.prod(ks)), bs[0]
        weights.append((flat[pos:pos + nk].reshape(ks), flat[pos + nk:pos + nk + nb]))
        pos += nk + nb
    try:
        return ConvNetDenoiser(weights, slope, None if math.isnan(sigma) else sigma, seed)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
