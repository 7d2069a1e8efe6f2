"""Compact encoder-decoder network for needle isolation, from scratch.

Plain numpy throughout: 3x3 zero-padded "same" convolutions lowered to a
single GEMM per layer via im2col, 2x2 max pooling, 2x2 stride-2 transposed
convolutions for upsampling, channel-concatenation skips, ReLU everywhere
except the linear 1x1 head. Backprop is hand-written and mirrors the
forward pass layer by layer; the finite-difference tests keep it honest.

Reference mode is single threaded and bit-deterministic: same seed, same
data, same trained weights, byte for byte. Training defaults to float32
(the heavy GEMMs run twice as fast); pass precision="float64" where the
extra headroom matters.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .core import PixelImage, read_container, resize_bicubic, write_container
from .dataset import DatasetManifest, load_pair

WEIGHTS_ROLE = "network_weights"

_PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture knobs. Everything else (3x3 kernels, 2x2 pools, ReLU,
    doubling channel widths, 1x1 single-channel head) is fixed."""

    n_scales: int = 3
    base_channels: int = 16

    def __post_init__(self):
        if self.n_scales not in (3, 4, 5):
            raise ValueError("n_scales must be 3, 4, or 5")
        if self.base_channels < 1:
            raise ValueError("base_channels must be at least 1")

    @property
    def divisor(self) -> int:
        """Input sides must be divisible by this (one halving per scale)."""
        return 1 << (self.n_scales - 1)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels << s for s in range(self.n_scales))


def layer_specs(cfg: NetworkConfig) -> list[tuple[str, str, tuple]]:
    """(name, kind, kernel shape) in execution order.

    Kernel layouts: conv (out, in, 3, 3); up (in, out, 2, 2);
    conv1x1 (out, in, 1, 1). Every layer also owns a bias over its output
    channels.
    """
    w = cfg.widths
    specs = []
    c = 1
    for s in range(cfg.n_scales - 1):
        specs.append((f"enc{s}_conv1", "conv", (w[s], c, 3, 3)))
        specs.append((f"enc{s}_conv2", "conv", (w[s], w[s], 3, 3)))
        c = w[s]
    top = w[-1]
    specs.append(("bottom_conv1", "conv", (top, c, 3, 3)))
    specs.append(("bottom_conv2", "conv", (top, top, 3, 3)))
    c = top
    for s in reversed(range(cfg.n_scales - 1)):
        specs.append((f"dec{s}_up", "up", (c, w[s], 2, 2)))
        specs.append((f"dec{s}_conv1", "conv", (w[s], 2 * w[s], 3, 3)))
        specs.append((f"dec{s}_conv2", "conv", (w[s], w[s], 3, 3)))
        c = w[s]
    specs.append(("head", "conv1x1", (1, w[0], 1, 1)))
    return specs


def _bias_len(kind: str, kshape: tuple) -> int:
    return kshape[1] if kind == "up" else kshape[0]


def arch_hash(cfg: NetworkConfig) -> str:
    doc = [[name, kind, list(shape)] for name, kind, shape in layer_specs(cfg)]
    blob = json.dumps(doc, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class NetworkWeights:
    """Ordered parameter tensors ("<layer>.w" / "<layer>.b") plus the config
    they were shaped for."""

    config: NetworkConfig
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, kind, kshape in layer_specs(self.config):
            w = self.tensors.get(f"{name}.w")
            b = self.tensors.get(f"{name}.b")
            if w is None or b is None:
                raise ValueError(f"missing tensors for layer {name}")
            if w.shape != kshape or b.shape != (_bias_len(kind, kshape),):
                raise ValueError(f"layer {name} has tensors of the wrong "
                                 f"shape for the configuration")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {name} contains non-finite values")

    @property
    def param_count(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    @property
    def arch_hash(self) -> str:
        return arch_hash(self.config)

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.config, copy.deepcopy(self.tensors))


def init_weights(cfg: NetworkConfig, seed: int = 0) -> NetworkWeights:
    """Kaiming-uniform kernels (fan-in scaled), zero biases, float64."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, kind, kshape in layer_specs(cfg):
        fan_in = (kshape[0] if kind == "up" else kshape[1]) \
            * kshape[2] * kshape[3]
        bound = np.sqrt(6.0 / fan_in)
        tensors[f"{name}.w"] = rng.uniform(-bound, bound, size=kshape)
        tensors[f"{name}.b"] = np.zeros(_bias_len(kind, kshape))
    return NetworkWeights(cfg, tensors)


# ---------------------------------------------------------------------------
# layer primitives: forward returns (y, ctx), backward consumes ctx
# ---------------------------------------------------------------------------

def _conv3_forward(x, w, b):
    """3x3 same convolution. x (B,C,H,W), w (O,C,3,3), b (O,)."""
    bs, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bs, h * wd, c * 9)
    y = cols @ w.reshape(w.shape[0], c * 9).T
    y = y.transpose(0, 2, 1).reshape(bs, w.shape[0], h, wd)
    y += b[:, None, None]
    return y, (cols, x.shape)


def _conv3_backward(dy, ctx, w):
    cols, x_shape = ctx
    bs, c, h, wd = x_shape
    o = w.shape[0]
    dym = dy.transpose(0, 2, 3, 1).reshape(bs * h * wd, o)
    dw = (dym.T @ cols.reshape(bs * h * wd, c * 9)).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    # data gradient of a zero-padded same conv is the same conv with the
    # kernel flipped in space and transposed in channels
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = _conv3_forward(dy, wt, np.zeros(c, dtype=dy.dtype))
    return dx, dw, db


def _conv1x1_forward(x, w, b):
    y = np.einsum("bchw,oc->bohw", x, w[:, :, 0, 0])
    y += b[:, None, None]
    return y, x


def _conv1x1_backward(dy, x, w):
    dw = np.einsum("bohw,bchw->oc", dy, x)[:, :, None, None]
    db = dy.sum(axis=(0, 2, 3))
    dx = np.einsum("bohw,oc->bchw", dy, w[:, :, 0, 0])
    return dx, dw, db


def _relu_forward(x):
    mask = x > 0
    return x * mask, mask


def _relu_backward(dy, mask):
    return dy * mask


def _pool_forward(x):
    """2x2 stride-2 max pool; ties go to the first window cell row-major."""
    bs, c, h, wd = x.shape
    xr = x.reshape(bs, c, h // 2, 2, wd // 2, 2) \
          .transpose(0, 1, 2, 4, 3, 5) \
          .reshape(bs, c, h // 2, wd // 2, 4)
    idx = xr.argmax(axis=-1)  # argmax returns the first maximum
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def _pool_backward(dy, ctx):
    idx, (bs, c, h, wd) = ctx
    g = np.zeros((bs, c, h // 2, wd // 2, 4), dtype=dy.dtype)
    np.put_along_axis(g, idx[..., None], dy[..., None], axis=-1)
    return g.reshape(bs, c, h // 2, wd // 2, 2, 2) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(bs, c, h, wd)


def _up_forward(x, w, b):
    """2x2 stride-2 transposed conv. x (B,C,H,W), w (C,O,2,2), b (O,).
    Kernel size equals stride, so output cells never overlap."""
    bs, c, h, wd = x.shape
    o = w.shape[1]
    y = np.tensordot(x, w, axes=([1], [0]))        # (B,H,W,O,2,2)
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(bs, o, 2 * h, 2 * wd)
    y = y + b[:, None, None]
    return y, x


def _up_backward(dy, x, w):
    bs, c, h, wd = x.shape
    o = w.shape[1]
    d6 = dy.reshape(bs, o, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5)
    dx = np.tensordot(d6, w, axes=([3, 4, 5], [1, 2, 3]))  # (B,H,W,C)
    dx = dx.transpose(0, 3, 1, 2)
    dw = np.tensordot(x, d6, axes=([0, 2, 3], [0, 1, 2]))  # (C,O,2,2)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


# ---------------------------------------------------------------------------
# whole-network forward / backward
# ---------------------------------------------------------------------------

def _check_size(cfg: NetworkConfig, h: int, w: int) -> None:
    d = cfg.divisor
    if h % d or w % d:
        raise ValueError(f"input size {h}x{w} must be divisible by {d} "
                         f"for a {cfg.n_scales}-scale network")


def _net_forward(tensors, cfg, x, keep=False):
    _check_size(cfg, x.shape[2], x.shape[3])
    tape = {} if keep else None

    def conv_relu(h, name):
        h, cctx = _conv3_forward(h, tensors[f"{name}.w"], tensors[f"{name}.b"])
        h, mask = _relu_forward(h)
        if keep:
            tape[name] = (cctx, mask)
        return h

    h = x
    skips = []
    for s in range(cfg.n_scales - 1):
        h = conv_relu(h, f"enc{s}_conv1")
        h = conv_relu(h, f"enc{s}_conv2")
        skips.append(h)
        h, pctx = _pool_forward(h)
        if keep:
            tape[f"pool{s}"] = pctx
    h = conv_relu(h, "bottom_conv1")
    h = conv_relu(h, "bottom_conv2")
    for s in reversed(range(cfg.n_scales - 1)):
        h, uctx = _up_forward(h, tensors[f"dec{s}_up.w"],
                              tensors[f"dec{s}_up.b"])
        if keep:
            tape[f"dec{s}_up"] = uctx
        h = np.concatenate([h, skips[s]], axis=1)
        h = conv_relu(h, f"dec{s}_conv1")
        h = conv_relu(h, f"dec{s}_conv2")
    y, hctx = _conv1x1_forward(h, tensors["head.w"], tensors["head.b"])
    if keep:
        tape["head"] = hctx
    return y, tape


def _net_backward(tensors, cfg, tape, dy):
    grads = {}

    def conv_back(g, name):
        cctx, mask = tape[name]
        g = _relu_backward(g, mask)
        g, dw, db = _conv3_backward(g, cctx, tensors[f"{name}.w"])
        grads[f"{name}.w"] = dw
        grads[f"{name}.b"] = db
        return g

    g, dw, db = _conv1x1_backward(dy, tape["head"], tensors["head.w"])
    grads["head.w"] = dw
    grads["head.b"] = db

    skip_grads = {}
    for s in range(cfg.n_scales - 1):  # decoder scales, reverse of forward
        g = conv_back(g, f"dec{s}_conv2")
        g = conv_back(g, f"dec{s}_conv1")
        w_s = cfg.widths[s]
        skip_grads[s] = g[:, w_s:]
        g, dw, db = _up_backward(g[:, :w_s], tape[f"dec{s}_up"],
                                 tensors[f"dec{s}_up.w"])
        grads[f"dec{s}_up.w"] = dw
        grads[f"dec{s}_up.b"] = db

    g = conv_back(g, "bottom_conv2")
    g = conv_back(g, "bottom_conv1")

    for s in reversed(range(cfg.n_scales - 1)):
        g = _pool_backward(g, tape[f"pool{s}"])
        g = g + skip_grads[s]
        g = conv_back(g, f"enc{s}_conv2")
        g = conv_back(g, f"enc{s}_conv1")
    return grads


def forward(weights: NetworkWeights, image: np.ndarray) -> np.ndarray:
    """Single-image forward pass; H and W must divide by weights' divisor."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("forward expects a single 2D image")
    y, _ = _net_forward(weights.tensors, weights.config,
                        image[None, None], keep=False)
    return y[0, 0]


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> float:
    prediction = np.asarray(prediction)
    target = np.asarray(target)
    if prediction.shape != target.shape:
        raise ValueError(f"prediction shape {prediction.shape} does not "
                         f"match target shape {target.shape}")
    d = prediction - target
    return float(np.mean(d * d))


def _loss_and_grads(tensors, cfg, x, t):
    y, tape = _net_forward(tensors, cfg, x, keep=True)
    diff = y - t
    loss = float(np.mean(diff * diff))
    dy = diff * (2.0 / diff.size)
    return _net_backward(tensors, cfg, tape, dy), loss


def backward(weights: NetworkWeights, inputs: np.ndarray,
             targets: np.ndarray) -> tuple[dict, float]:
    """Mean-square-error loss over a batch plus gradients for every
    parameter. inputs/targets: (B, H, W) or a single (H, W) pair."""
    x = np.asarray(inputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.ndim == 2:
        x, t = x[None], t[None]
    if x.shape != t.shape or x.ndim != 3:
        raise ValueError(f"input batch shape {x.shape} does not match "
                         f"target shape {t.shape}")
    return _loss_and_grads(weights.tensors, weights.config,
                           x[:, None], t[:, None])


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 4
    lr0: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_every: int = 25
    input_size: int = 128
    precision: str = "float32"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.val_every < 1:
            raise ValueError("val_every must be at least 1")
        if self.input_size < 4:
            raise ValueError("input_size must be at least 4")
        if self.precision not in _PRECISIONS:
            raise ValueError(f"precision must be one of "
                             f"{sorted(_PRECISIONS)}")


def lr_at(t: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr0 to 0 across the run."""
    if not 0 <= t <= cfg.iterations:
        raise ValueError(f"iteration {t} outside [0, {cfg.iterations}]")
    return 0.5 * cfg.lr0 * (1.0 + float(np.cos(np.pi * t / cfg.iterations)))


class _Adam:
    def __init__(self, tensors, cfg: TrainConfig):
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.b1, self.b2, self.eps = cfg.beta1, cfg.beta2, cfg.eps
        self.t = 0

    def step(self, tensors, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            tensors[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _stack_pairs(pairs, dtype):
    xs = np.stack([np.asarray(p[0], dtype=dtype) for p in pairs])
    ts = np.stack([np.asarray(p[1], dtype=dtype) for p in pairs])
    if xs.shape != ts.shape:
        raise ValueError("inputs and targets disagree in shape")
    return xs, ts


def _eval_mse(tensors, cfg, xs, ts, chunk):
    err = 0.0
    for i in range(0, len(xs), chunk):
        y, _ = _net_forward(tensors, cfg, xs[i:i + chunk, None], keep=False)
        d = y[:, 0] - ts[i:i + chunk]
        err += float(np.sum(d * d))
    return err / ts.size


def fit(train_pairs, val_pairs, net_cfg: NetworkConfig,
        train_cfg: TrainConfig, log=None) -> tuple[NetworkWeights, dict]:
    """Adam + cosine annealing over (input, target) image pairs.

    Keeps whichever weights scored the lowest validation MSE; with no
    validation pairs the final weights are returned. History carries one
    train loss per iteration and (iteration, mse) validation points.
    """
    if not train_pairs:
        raise ValueError("train split is empty")
    dtype = _PRECISIONS[train_cfg.precision]
    xs, ts = _stack_pairs(train_pairs, dtype)
    _check_size(net_cfg, xs.shape[1], xs.shape[2])
    if val_pairs:
        vxs, vts = _stack_pairs(val_pairs, dtype)

    tensors = {k: v.astype(dtype)
               for k, v in init_weights(net_cfg, train_cfg.seed).tensors.items()}
    opt = _Adam(tensors, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)

    history = {"train_loss": [], "val_loss": []}
    best_val = np.inf
    best = None
    for t in range(train_cfg.iterations):
        idx = rng.integers(0, len(xs), size=train_cfg.batch_size)
        grads, loss = _loss_and_grads(tensors, net_cfg,
                                      xs[idx][:, None], ts[idx][:, None])
        if not np.isfinite(loss):
            raise RuntimeError(f"training loss is not finite at iteration {t}")
        opt.step(tensors, grads, lr_at(t, train_cfg))
        history["train_loss"].append(loss)

        last = t == train_cfg.iterations - 1
        if val_pairs and ((t + 1) % train_cfg.val_every == 0 or last):
            vmse = _eval_mse(tensors, net_cfg, vxs, vts, train_cfg.batch_size)
            history["val_loss"].append((t + 1, vmse))
            if vmse < best_val:
                best_val = vmse
                best = {k: v.copy() for k, v in tensors.items()}
            if log:
                log(f"iter {t + 1}/{train_cfg.iterations}  "
                    f"train {loss:.3e}  val {vmse:.3e}")

    return NetworkWeights(net_cfg, best if best is not None else tensors), \
        history


def _prepared_pairs(man: DatasetManifest, entries, size):
    pairs = []
    for e in entries:
        img, gt = load_pair(man, e)
        x = resize_bicubic(img, (size, size))
        top = x.max()
        if top > 0:
            x = x / top
        y = resize_bicubic(gt, (size, size))
        pairs.append((x, y))
    return pairs


def train(manifest: DatasetManifest, net_cfg: NetworkConfig,
          train_cfg: TrainConfig, log=None) -> tuple[NetworkWeights, dict]:
    """Train on a generated dataset: images are resized to the configured
    square input size and peak-normalized; targets are resized likewise."""
    tr = manifest.split("train")
    va = manifest.split("val")
    if not tr:
        raise ValueError("train split is empty")
    if not va:
        raise ValueError("val split is empty")
    size = train_cfg.input_size
    return fit(_prepared_pairs(manifest, tr, size),
               _prepared_pairs(manifest, va, size),
               net_cfg, train_cfg, log=log)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def infer(weights: NetworkWeights, image: PixelImage,
          size: int = 256) -> PixelImage:
    """Resize to the inference resolution, peak-normalize the way training
    did, run the network, and clamp negatives to zero."""
    v = resize_bicubic(image.values, (size, size))
    top = v.max()
    if top > 0:
        v = v / top
    out = np.maximum(forward(weights, v), 0.0)
    scale = image.values.shape[0] / size
    return PixelImage(out, pixel_size=image.pixel_size * scale)


# ---------------------------------------------------------------------------
# serialization: one container row of concatenated float32 tensors
# ---------------------------------------------------------------------------

def save_weights(path, weights: NetworkWeights) -> None:
    flat = np.concatenate([weights.tensors[f"{n}.{p}"].reshape(-1)
                           for n, _, _ in layer_specs(weights.config)
                           for p in ("w", "b")])
    extra = {
        "n_scales": weights.config.n_scales,
        "base_channels": weights.config.base_channels,
        "arch_hash": weights.arch_hash,
        "layers": [{"name": n, "kind": k, "shape": list(s)}
                   for n, k, s in layer_specs(weights.config)],
    }
    write_container(path, flat[None, :], role=WEIGHTS_ROLE, extra=extra)


def load_weights(path) -> NetworkWeights:
    header, payload = read_container(path)
    if header["role"] != WEIGHTS_ROLE:
        raise ValueError(f"{path}: role {header['role']!r} is not "
                         f"{WEIGHTS_ROLE!r}")
    extra = header.get("extra", {})
    cfg = NetworkConfig(n_scales=int(extra["n_scales"]),
                        base_channels=int(extra["base_channels"]))
    if extra.get("arch_hash") != arch_hash(cfg):
        raise ValueError(f"{path}: architecture hash does not match the "
                         f"declared configuration")
    flat = np.asarray(payload, dtype=np.float64).reshape(-1)
    tensors = {}
    pos = 0
    for name, kind, kshape in layer_specs(cfg):
        n = int(np.prod(kshape))
        tensors[f"{name}.w"] = flat[pos:pos + n].reshape(kshape).copy()
        pos += n
        nb = _bias_len(kind, kshape)
        tensors[f"{name}.b"] = flat[pos:pos + nb].copy()
        pos += nb
    if pos != flat.size:
        raise ValueError(f"{path}: payload holds {flat.size} parameters, "
                         f"architecture needs {pos}")
    return NetworkWeights(cfg, tensors)
