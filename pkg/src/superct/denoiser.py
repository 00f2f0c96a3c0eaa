"""Small residual CNN denoiser with hand-written backpropagation.

Images enter the network as ``HU / 1000`` (water 0, air -1).  Convolutions
are same-size with zero padding and implemented as im2col matrix products.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .simulate import MU_WATER

log = logging.getLogger(__name__)

HU_NORMALIZATION = 1.0 / 1000.0


class TrainingError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass(frozen=True)
class NetworkSpec:
    depth: int = 5
    channels: int = 16
    kernel_side: int = 3
    residual: bool = True

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.kernel_side < 1 or self.kernel_side % 2 == 0:
            raise ValueError("kernel_side must be odd")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    def layer_shapes(self):
        """(out, in, k, k) kernel shape of every layer."""
        k = self.kernel_side
        ch = [1] + [self.channels] * (self.depth - 1) + [1]
        return [(ch[i + 1], ch[i], k, k) for i in range(self.depth)]

    def to_dict(self):
        return asdict(self)


@dataclass
class NetworkParams:
    spec: NetworkSpec
    kernels: list
    biases: list

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, [k.copy() for k in self.kernels], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.kernels, self.biases) for a in pair])

    def arrays(self):
        """Parameter tensors in declaration order: kernel0, bias0, kernel1, ..."""
        return [a for pair in zip(self.kernels, self.biases) for a in pair]


def init_params(spec: NetworkSpec, variance: float = 0.005, seed: int = 0,
                zero_last: bool = True) -> NetworkParams:
    """I.i.d. zero-mean Gaussian kernels, zero biases.

    ``zero_last`` zeroes the final kernel so a residual network starts as the
    identity map; otherwise a random start can sit well above the identity loss.
    """
    rng = np.random.default_rng(seed)
    kernels, biases = [], []
    for i, shape in enumerate(spec.layer_shapes()):
        if zero_last and i == spec.depth - 1:
            kernels.append(np.zeros(shape))
        else:
            kernels.append(rng.normal(0.0, np.sqrt(variance), size=shape))
        biases.append(np.zeros(shape[0]))
    return NetworkParams(spec, kernels, biases)


def zero_params(spec: NetworkSpec) -> NetworkParams:
    return NetworkParams(spec, [np.zeros(s) for s in spec.layer_shapes()],
                         [np.zeros(s[0]) for s in spec.layer_shapes()])


def _im2col(x, k):
    """(C, H, W) -> (H*W, C*k*k) patches of the zero-padded input."""
    c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)


def _input_grad(g, ker):
    """Adjoint of the same-size correlation: correlate with the flipped, transposed kernel."""
    cout, h, w = g.shape
    k = ker.shape[-1]
    flipped = ker[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ker.shape[1], -1)
    return (_im2col(g, k) @ flipped.T).T.reshape(ker.shape[1], h, w)


def _forward(params: NetworkParams, img, keep=False):
    spec = params.spec
    k = spec.kernel_side
    h, w = img.shape
    act = img[None, :, :]
    cache = []
    for i, (ker, b) in enumerate(zip(params.kernels, params.biases)):
        cols = _im2col(act, k)
        pre = cols @ ker.reshape(ker.shape[0], -1).T + b
        pre = pre.T.reshape(ker.shape[0], h, w)
        last = i == spec.depth - 1
        out = pre if last else np.maximum(pre, 0.0)
        if keep:
            cache.append((cols, pre))
        act = out
    res = act[0]
    if spec.residual:
        res = res + img
    return res, cache


def forward(params: NetworkParams, img) -> np.ndarray:
    """Network output for one normalized image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a single 2D image")
    return _forward(params, img)[0]


def _backward(params: NetworkParams, cache, g_out):
    spec = params.spec
    h, w = g_out.shape
    gk = [None] * spec.depth
    gb = [None] * spec.depth
    g = g_out[None, :, :]
    for i in reversed(range(spec.depth)):
        cols, pre = cache[i]
        if i != spec.depth - 1:
            g = g * (pre > 0)  # rectifier subgradient 0 at 0
        ker = params.kernels[i]
        gm = g.reshape(ker.shape[0], h * w).T  # (HW, Cout)
        gk[i] = (gm.T @ cols).reshape(ker.shape)
        gb[i] = gm.sum(axis=0)
        if i > 0:
            g = _input_grad(g, ker)
    return gk, gb


def loss_and_gradient(params: NetworkParams, batch):
    """Summed squared error over ``batch`` of (input, target) and its exact gradient.

    Returns ``(loss, NetworkParams)`` where the second item holds gradients.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    spec = params.spec
    loss = 0.0
    gk = [np.zeros_like(a) for a in params.kernels]
    gb = [np.zeros_like(a) for a in params.biases]
    for n, (inp, target) in enumerate(batch):
        inp = np.asarray(inp, dtype=np.float64)
        out, cache = _forward(params, inp, keep=True)
        err = out - np.asarray(target, dtype=np.float64)
        sample_loss = float(np.sum(err * err))
        if not np.isfinite(sample_loss):
            raise TrainingError(f"non-finite loss at sample {n}")
        loss += sample_loss
        k_grads, b_grads = _backward(params, cache, 2.0 * err)
        for i in range(spec.depth):
            gk[i] += k_grads[i]
            gb[i] += b_grads[i]
    return loss, NetworkParams(spec, gk, gb)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    momentum: float = 0.99
    batch_size: int = 1
    init_variance: float = 0.005
    seed: int = 0
    # multiplies the summed-loss gradient before the momentum update
    grad_scale: float = 0.25

    def __post_init__(self):
        if self.grad_scale <= 0:
            raise ValueError("grad_scale must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.lr_end <= self.lr_start:
            raise ValueError("need 0 <= lr_end <= lr_start")
        if self.lr_end == 0 and self.lr_start > 0:
            raise ValueError("logarithmic decay needs lr_end > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


def learning_rate(step: int, total: int, cfg: TrainConfig) -> float:
    if cfg.lr_start == 0:
        return 0.0
    if total <= 1:
        return cfg.lr_start
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (step / (total - 1))


@dataclass
class TrainResult:
    params: NetworkParams
    losses: list = field(default_factory=list)  # per step


def train(params_init: NetworkParams, dataset, cfg: TrainConfig) -> TrainResult:
    """Momentum SGD on the summed squared error with log-decaying step size.

    The step is ``lr * grad_scale * gradient``; the summed loss over a whole
    image makes the raw gradient large enough to diverge at the nominal rates.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    params = params_init.copy()
    velocity = [np.zeros_like(a) for a in params.arrays()]
    rng = np.random.default_rng(cfg.seed)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * per_epoch
    losses = []
    first = None
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            loss, grad = loss_and_gradient(params, batch)
            if first is None:
                first = max(loss, 1e-300)
            if loss > 1e6 * first:
                raise TrainingError(f"training diverged at step {step}", losses)
            losses.append(loss)
            lr = learning_rate(step, total, cfg)
            for p, v, g in zip(params.arrays(), velocity, grad.arrays()):
                v *= cfg.momentum
                v -= (lr * cfg.grad_scale) * g
                p += v
            step += 1
        log.debug("epoch %d mean loss %.4g", epoch, np.mean(losses[-per_epoch:]))
    return TrainResult(params, losses)


# ---------------------------------------------------------------- image scaling

def to_net(img):
    """Attenuation (mm^-1) to network units ``HU / 1000``."""
    return (np.asarray(img, dtype=np.float64) - MU_WATER) / MU_WATER * (1000.0 * HU_NORMALIZATION)


def from_net(v):
    return np.asarray(v, dtype=np.float64) / (1000.0 * HU_NORMALIZATION) * MU_WATER + MU_WATER


def apply(params: NetworkParams, img, nonneg: bool = False) -> np.ndarray:
    """Denoise an attenuation image; output is attenuation.

    ``nonneg`` projects the result onto ``x >= 0`` so it is a valid image.
    """
    out = from_net(forward(params, to_net(img)))
    return np.maximum(out, 0.0) if nonneg else out
