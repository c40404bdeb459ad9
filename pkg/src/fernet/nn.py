"""Neural network layers with forward and backward passes.

Every layer is a pure function pair: ``*_forward`` maps inputs to
outputs (plus whatever the backward pass needs), ``*_backward`` maps the
output gradient to input/parameter gradients.  Convolutions use the
floor output-size convention with explicit zero padding; pooling uses
the ceiling convention, clipping windows that overhang the input.

The composite Inception block, the stock network builder, and the
per-layer operation counter live here as well.  Parameters are plain
arrays held by :class:`Network` under dotted names
(``conv1.weight``, ``inception3a.5x5.bias``, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .errors import ConfigError, LabelError, ShapeError

LAYER_KINDS = (
    "convolution",
    "max-pool",
    "avg-pool",
    "fully-connected",
    "relu",
    "concat",
    "inception",
    "softmax-loss",
)

INCEPTION_BRANCHES = ("1x1", "3x3reduce", "3x3", "5x5reduce", "5x5", "poolproj")


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------

def conv2d_forward(x, weights, bias, stride, pad):
    """Cross-correlation plus per-channel bias.

    x: [n,c,h,w]; weights: [oc,c,kh,kw]; bias: [oc] -> [n,oc,oh,ow]
    with oh = floor((h + 2*pad - kh) / stride) + 1.
    """
    n, c, h, w = x.shape
    oc, wc, kh, kw = weights.shape
    if wc != c:
        raise ShapeError(f"conv channels disagree: input {c}, weights {wc}")
    if bias.shape != (oc,):
        raise ShapeError(f"conv bias shape {bias.shape} != ({oc},)")
    oh = tensor.conv_out_size(h, kh, stride, pad)
    ow = tensor.conv_out_size(w, kw, stride, pad)
    cols = tensor.im2col(x, (kh, kw), stride, pad)
    out = weights.reshape(oc, c * kh * kw) @ cols + bias[:, None]
    return out.reshape(oc, n, oh, ow).transpose(1, 0, 2, 3)


def conv2d_backward(x, weights, grad_out, stride, pad):
    """Adjoints of :func:`conv2d_forward`.

    Returns (grad_input, grad_weights, grad_bias); grad_bias is the
    per-channel sum of grad_out.
    """
    n, c, h, w = x.shape
    oc = weights.shape[0]
    kh, kw = weights.shape[2], weights.shape[3]
    expect = (n, oc, tensor.conv_out_size(h, kh, stride, pad),
              tensor.conv_out_size(w, kw, stride, pad))
    if grad_out.shape != expect:
        raise ShapeError(f"conv grad shape {grad_out.shape} != {expect}")
    g = grad_out.transpose(1, 0, 2, 3).reshape(oc, -1)
    cols = tensor.im2col(x, (kh, kw), stride, pad)
    grad_b = g.sum(axis=1)
    grad_w = (g @ cols.T).reshape(weights.shape)
    grad_cols = weights.reshape(oc, -1).T @ g
    grad_x = tensor.col2im(grad_cols, x.shape, (kh, kw), stride, pad)
    return grad_x, grad_w, grad_b


def maxpool_forward(x, patch, stride, pad=0):
    """Max pooling under the ceiling output convention.

    Windows that overhang the (padded) input are clipped; padding cells
    never win the max.  Returns (output, argmax) where argmax holds, per
    output cell, the linear index row*w + col of the winning input pixel
    in its [h,w] plane.  Ties go to the lowest linear index.
    """
    n, c, h, w = x.shape
    kh, kw = patch
    if kh < 1 or kw < 1 or stride < 1 or pad < 0:
        raise ShapeError(f"bad pooling geometry patch={patch} stride={stride} pad={pad}")
    oh = tensor.pool_out_size(h, kh, stride, pad)
    ow = tensor.pool_out_size(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"pooling window {patch} larger than padded input")
    if (oh - 1) * stride - pad >= h or (ow - 1) * stride - pad >= w:
        raise ShapeError("pooling window contains no input pixels")

    # canvas large enough that every window is in bounds; -inf marks padding
    eh, ew = (oh - 1) * stride + kh, (ow - 1) * stride + kw
    canvas = np.full((n, c, eh, ew), -np.inf, dtype=x.dtype)
    canvas[:, :, pad:pad + h, pad:pad + w] = x

    best = np.full((n, c, oh, ow), -np.inf, dtype=x.dtype)
    arg = np.zeros((n, c, oh, ow), dtype=np.int64)
    oy = np.arange(oh) * stride
    ox = np.arange(ow) * stride
    for dy in range(kh):
        iy = oy + dy - pad
        for dx in range(kw):
            ix = ox + dx - pad
            cand = canvas[:, :, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride]
            lin = iy[:, None] * w + ix[None, :]
            mask = cand > best
            best = np.where(mask, cand, best)
            arg = np.where(mask, lin, arg)
    return best, arg


def maxpool_backward(argmax, grad_out, input_shape):
    """Route each output gradient to its argmax position; overlaps sum."""
    n, c, h, w = input_shape
    if argmax.shape != grad_out.shape or argmax.shape[:2] != (n, c):
        raise ShapeError(
            f"pool backward geometry mismatch: argmax {argmax.shape}, "
            f"grad {grad_out.shape}, input {tuple(input_shape)}"
        )
    grad_x = np.zeros((n * c, h * w), dtype=grad_out.dtype)
    planes = np.arange(n * c)[:, None]
    np.add.at(grad_x, (planes, argmax.reshape(n * c, -1)), grad_out.reshape(n * c, -1))
    return grad_x.reshape(n, c, h, w)


def avgpool_global_forward(x):
    """Per-channel mean over all spatial positions: [n,c,h,w] -> [n,c,1,1]."""
    if x.ndim != 4:
        raise ShapeError(f"global average pool expects [n,c,h,w], got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def avgpool_global_backward(grad_out, input_shape):
    n, c, h, w = input_shape
    if grad_out.shape != (n, c, 1, 1):
        raise ShapeError(f"avg pool grad shape {grad_out.shape} != {(n, c, 1, 1)}")
    return np.broadcast_to(grad_out / (h * w), (n, c, h, w)).copy()


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Pass gradient where the forward input was > 0 (subgradient 0 at 0)."""
    return grad_out * (x > 0)


def fc_forward(x, weights, bias):
    """Affine map x @ W^T + b; rank-4 inputs are flattened per sample."""
    flat = x.reshape(x.shape[0], -1)
    u, d = weights.shape
    if flat.shape[1] != d:
        raise ShapeError(f"fc input width {flat.shape[1]} != weights width {d}")
    if bias.shape != (u,):
        raise ShapeError(f"fc bias shape {bias.shape} != ({u},)")
    return flat @ weights.T + bias


def fc_backward(x, weights, grad_out):
    """Returns (grad_input, grad_weights, grad_bias); grad_input keeps x's shape."""
    flat = x.reshape(x.shape[0], -1)
    if grad_out.shape != (flat.shape[0], weights.shape[0]):
        raise ShapeError(
            f"fc grad shape {grad_out.shape} != {(flat.shape[0], weights.shape[0])}"
        )
    grad_x = (grad_out @ weights).reshape(x.shape)
    grad_w = grad_out.T @ flat
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def concat_channels(inputs):
    """Concatenate along the channel axis; all inputs share n, h, w."""
    if not inputs:
        raise ShapeError("concat requires at least one input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ShapeError(
                f"concat spatial mismatch: {t.shape} vs {inputs[0].shape}"
            )
    return np.concatenate(inputs, axis=1)


def concat_backward(grad_out, channel_counts):
    """Split the gradient back into per-input channel slices."""
    if grad_out.shape[1] != sum(channel_counts):
        raise ShapeError(
            f"concat grad channels {grad_out.shape[1]} != sum {sum(channel_counts)}"
        )
    grads, start = [], 0
    for ci in channel_counts:
        grads.append(np.ascontiguousarray(grad_out[:, start:start + ci]))
        start += ci
    return grads


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over a batch of logits.

    Returns (loss, probs).  The softmax is stabilized by row-max
    subtraction; probability rows sum to 1 and the loss is >= 0.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    sums = e.sum(axis=1)
    probs = e / sums[:, None]
    loss = float(np.mean(np.log(sums) - z[np.arange(n), labels]))
    return loss, probs


def softmax_cross_entropy_backward(probs, labels):
    """Gradient of the mean cross-entropy w.r.t. the logits: (probs - onehot)/n."""
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1
    return grad / n


# ---------------------------------------------------------------------------
# Inception block
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InceptionSpec:
    """Channel counts for the four parallel branches of an Inception block."""

    n1x1: int
    n3x3reduce: int
    n3x3: int
    n5x5reduce: int
    n5x5: int
    npoolproj: int

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 1:
                raise ConfigError(f"inception branch {name} must be >= 1, got {value}")

    @property
    def out_channels(self) -> int:
        return self.n1x1 + self.n3x3 + self.n5x5 + self.npoolproj


def inception_param_shapes(in_channels: int, spec: InceptionSpec):
    """Weight/bias shapes per branch, keyed by branch name."""
    return {
        "1x1": ((spec.n1x1, in_channels, 1, 1), (spec.n1x1,)),
        "3x3reduce": ((spec.n3x3reduce, in_channels, 1, 1), (spec.n3x3reduce,)),
        "3x3": ((spec.n3x3, spec.n3x3reduce, 3, 3), (spec.n3x3,)),
        "5x5reduce": ((spec.n5x5reduce, in_channels, 1, 1), (spec.n5x5reduce,)),
        "5x5": ((spec.n5x5, spec.n5x5reduce, 5, 5), (spec.n5x5,)),
        "poolproj": ((spec.npoolproj, in_channels, 1, 1), (spec.npoolproj,)),
    }


def inception_forward(x, spec: InceptionSpec, params, prefix=""):
    """Four parallel branches, each conv followed by ReLU, channel-concatenated.

    (a) 1x1 conv; (b) 1x1 reduce then 3x3 conv (pad 1); (c) 1x1 reduce
    then 5x5 conv (pad 2); (d) 3x3/1 max-pool (pad 1) then 1x1
    projection.  Spatial size is preserved.  ``params`` maps
    ``prefix + branch + '.weight'/'.bias'`` to arrays.
    """
    def p(branch, kind):
        return params[f"{prefix}{branch}.{kind}"]

    z1 = conv2d_forward(x, p("1x1", "weight"), p("1x1", "bias"), 1, 0)
    a1 = relu(z1)

    z3r = conv2d_forward(x, p("3x3reduce", "weight"), p("3x3reduce", "bias"), 1, 0)
    a3r = relu(z3r)
    z3 = conv2d_forward(a3r, p("3x3", "weight"), p("3x3", "bias"), 1, 1)
    a3 = relu(z3)

    z5r = conv2d_forward(x, p("5x5reduce", "weight"), p("5x5reduce", "bias"), 1, 0)
    a5r = relu(z5r)
    z5 = conv2d_forward(a5r, p("5x5", "weight"), p("5x5", "bias"), 1, 2)
    a5 = relu(z5)

    pooled, arg = maxpool_forward(x, (3, 3), 1, pad=1)
    zp = conv2d_forward(pooled, p("poolproj", "weight"), p("poolproj", "bias"), 1, 0)
    ap = relu(zp)

    out = concat_channels([a1, a3, a5, ap])
    cache = {
        "x": x, "spec": spec, "prefix": prefix, "params": params,
        "z1": z1, "z3r": z3r, "a3r": a3r, "z3": z3,
        "z5r": z5r, "a5r": a5r, "z5": z5,
        "pool_arg": arg, "pooled": pooled, "zp": zp,
    }
    return out, cache


def inception_backward(cache, grad_out):
    """Backward through all four branches; returns (grad_input, grads dict)."""
    x, spec, prefix = cache["x"], cache["spec"], cache["prefix"]
    params = cache["params"]

    def p(branch, kind):
        return params[f"{prefix}{branch}.{kind}"]

    g1, g3, g5, gp = concat_backward(
        grad_out, [spec.n1x1, spec.n3x3, spec.n5x5, spec.npoolproj]
    )
    grads = {}

    gz1 = relu_backward(cache["z1"], g1)
    gx1, gw, gb = conv2d_backward(x, p("1x1", "weight"), gz1, 1, 0)
    grads[f"{prefix}1x1.weight"], grads[f"{prefix}1x1.bias"] = gw, gb

    gz3 = relu_backward(cache["z3"], g3)
    ga3r, gw, gb = conv2d_backward(cache["a3r"], p("3x3", "weight"), gz3, 1, 1)
    grads[f"{prefix}3x3.weight"], grads[f"{prefix}3x3.bias"] = gw, gb
    gz3r = relu_backward(cache["z3r"], ga3r)
    gx3, gw, gb = conv2d_backward(x, p("3x3reduce", "weight"), gz3r, 1, 0)
    grads[f"{prefix}3x3reduce.weight"], grads[f"{prefix}3x3reduce.bias"] = gw, gb

    gz5 = relu_backward(cache["z5"], g5)
    ga5r, gw, gb = conv2d_backward(cache["a5r"], p("5x5", "weight"), gz5, 1, 2)
    grads[f"{prefix}5x5.weight"], grads[f"{prefix}5x5.bias"] = gw, gb
    gz5r = relu_backward(cache["z5r"], ga5r)
    gx5, gw, gb = conv2d_backward(x, p("5x5reduce", "weight"), gz5r, 1, 0)
    grads[f"{prefix}5x5reduce.weight"], grads[f"{prefix}5x5reduce.bias"] = gw, gb

    gzp = relu_backward(cache["zp"], gp)
    gpooled, gw, gb = conv2d_backward(cache["pooled"], p("poolproj", "weight"), gzp, 1, 0)
    grads[f"{prefix}poolproj.weight"], grads[f"{prefix}poolproj.bias"] = gw, gb
    gxp = maxpool_backward(cache["pool_arg"], gpooled, x.shape)

    return gx1 + gx3 + gx5 + gxp, grads


# ---------------------------------------------------------------------------
# Network configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One entry of the sequential layer chain."""

    kind: str
    name: str
    patch: tuple[int, int] | None = None
    stride: int | None = None
    pad: int | None = None
    out_channels: int | None = None
    inception: InceptionSpec | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "convolution":
            if self.patch is None or self.stride is None or self.out_channels is None:
                raise ConfigError(f"convolution {self.name!r} needs patch/stride/out_channels")
        elif self.kind == "max-pool":
            if self.patch is None or self.stride is None:
                raise ConfigError(f"max-pool {self.name!r} needs patch/stride")
        elif self.kind == "fully-connected":
            if self.out_channels is None:
                raise ConfigError(f"fully-connected {self.name!r} needs out_channels")
        elif self.kind == "inception":
            if self.inception is None:
                raise ConfigError(f"inception {self.name!r} needs an InceptionSpec")
        if self.out_channels is not None and self.out_channels < 1:
            raise ConfigError(f"layer {self.name!r} out_channels must be >= 1")


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative description of a sequential network."""

    layers: tuple[LayerSpec, ...]
    in_channels: int = 1
    input_size: tuple[int, int] = (48, 48)
    num_classes: int = 7


# Stock architecture channel plan: conv/pool stem, three Inception blocks,
# global average pooling, then the fully connected classifier stack.
_STOCK_INCEPTION = {
    # (n1x1, n3x3reduce, n3x3, n5x5reduce, n5x5, npoolproj)
    "inception3a": (64, 96, 128, 16, 32, 32),
    "inception3b": (128, 128, 192, 32, 96, 64),
    "inception4a": (192, 96, 208, 16, 48, 64),
}


def default_config(num_classes=7, in_channels=1, input_size=(48, 48),
                   fc7_units=4096, fc8_units=1024, width_divisor=1) -> NetworkConfig:
    """The stock network; ``width_divisor`` scales every channel count down.

    The divisor must divide all stock channel counts (1, 2, 4, 8, and 16
    all work); the class count is never scaled.
    """
    def scaled(v):
        if v % width_divisor:
            raise ConfigError(
                f"width_divisor {width_divisor} does not divide channel count {v}"
            )
        return v // width_divisor

    def incep(name):
        return LayerSpec(
            "inception", name,
            inception=InceptionSpec(*(scaled(v) for v in _STOCK_INCEPTION[name])),
        )

    layers = (
        LayerSpec("convolution", "conv1", patch=(7, 7), stride=2, pad=3,
                  out_channels=scaled(64)),
        LayerSpec("relu", "relu1"),
        LayerSpec("max-pool", "maxpool1", patch=(3, 3), stride=2, pad=0),
        LayerSpec("convolution", "conv2", patch=(3, 3), stride=1, pad=1,
                  out_channels=scaled(192)),
        LayerSpec("relu", "relu2"),
        LayerSpec("max-pool", "maxpool2", patch=(3, 3), stride=2, pad=0),
        incep("inception3a"),
        incep("inception3b"),
        LayerSpec("max-pool", "maxpool4", patch=(3, 3), stride=2, pad=0),
        incep("inception4a"),
        LayerSpec("avg-pool", "avgpool"),
        LayerSpec("fully-connected", "fc7", out_channels=scaled(fc7_units)),
        LayerSpec("relu", "relu7"),
        LayerSpec("fully-connected", "fc8", out_channels=scaled(fc8_units)),
        LayerSpec("relu", "relu8"),
        LayerSpec("fully-connected", "classifier", out_channels=num_classes),
        LayerSpec("softmax-loss", "loss"),
    )
    return NetworkConfig(layers=layers, in_channels=in_channels,
                         input_size=tuple(input_size), num_classes=num_classes)


def _walk_shapes(config: NetworkConfig):
    """Yield (spec, in_shape, out_shape) per layer; shapes are per-image.

    Raises ConfigError when the chain does not shape-check.
    """
    shape = (config.in_channels, *config.input_size)
    for spec in config.layers:
        if spec.kind == "convolution":
            if len(shape) != 3:
                raise ConfigError(f"{spec.name}: convolution needs spatial input, got {shape}")
            c, h, w = shape
            kh, kw = spec.patch
            try:
                oh = tensor.conv_out_size(h, kh, spec.stride, spec.pad or 0)
                ow = tensor.conv_out_size(w, kw, spec.stride, spec.pad or 0)
            except ShapeError as exc:
                raise ConfigError(f"{spec.name}: {exc}") from exc
            if oh < 1 or ow < 1:
                raise ConfigError(f"{spec.name}: kernel {spec.patch} larger than input {shape}")
            out = (spec.out_channels, oh, ow)
        elif spec.kind == "max-pool":
            if len(shape) != 3:
                raise ConfigError(f"{spec.name}: pooling needs spatial input, got {shape}")
            c, h, w = shape
            kh, kw = spec.patch
            oh = tensor.pool_out_size(h, kh, spec.stride, spec.pad or 0)
            ow = tensor.pool_out_size(w, kw, spec.stride, spec.pad or 0)
            if oh < 1 or ow < 1:
                raise ConfigError(f"{spec.name}: window {spec.patch} larger than input {shape}")
            out = (c, oh, ow)
        elif spec.kind == "avg-pool":
            if len(shape) != 3:
                raise ConfigError(f"{spec.name}: pooling needs spatial input, got {shape}")
            out = (shape[0], 1, 1)
        elif spec.kind == "relu":
            out = shape
        elif spec.kind == "fully-connected":
            d = int(np.prod(shape))
            out = (spec.out_channels,)
        elif spec.kind == "inception":
            if len(shape) != 3:
                raise ConfigError(f"{spec.name}: inception needs spatial input, got {shape}")
            out = (spec.inception.out_channels, shape[1], shape[2])
        elif spec.kind == "softmax-loss":
            if len(shape) != 1:
                raise ConfigError(f"{spec.name}: softmax-loss needs flat input, got {shape}")
            out = shape
        else:  # concat
            raise ConfigError(f"{spec.name}: concat layers appear only inside inception blocks")
        yield spec, shape, out
        shape = out


def validate_config(config: NetworkConfig) -> None:
    """Shape-check the whole chain and the classifier/softmax tail."""
    if not config.layers:
        raise ConfigError("network has no layers")
    if config.in_channels < 1:
        raise ConfigError(f"in_channels must be >= 1, got {config.in_channels}")
    if config.num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {config.num_classes}")
    last_shape = None
    for _, _, out in _walk_shapes(config):
        last_shape = out
    if config.layers[-1].kind != "softmax-loss":
        raise ConfigError("final layer must be softmax-loss")
    if last_shape != (config.num_classes,):
        raise ConfigError(
            f"classifier emits {last_shape}, expected ({config.num_classes},)"
        )


def shape_trace(config: NetworkConfig):
    """Dry-run shape chain: list of (layer name, per-image output shape)."""
    return [(spec.name, out) for spec, _, out in _walk_shapes(config)]


# ---------------------------------------------------------------------------
# Network: parameters + execution
# ---------------------------------------------------------------------------

class Network:
    """A configured network with named parameters and LR multipliers.

    The trainer is the sole mutator of ``params``; forward/backward are
    read-only with respect to the network and safe to run concurrently
    on disjoint batches.
    """

    def __init__(self, config: NetworkConfig, params: dict, lr_mult: dict, dtype):
        self.config = config
        self.params = params
        self.lr_mult = lr_mult
        self.dtype = np.dtype(dtype)

    def astype(self, dtype) -> "Network":
        """Copy of the network with parameters cast to ``dtype``."""
        dtype = np.dtype(dtype)
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return Network(self.config, params, dict(self.lr_mult), dtype)

    # -- execution ---------------------------------------------------------

    def forward(self, batch, train_mode=False):
        """Run the batch through every layer; returns (logits, cache).

        ``train_mode`` is part of the contract for layers that behave
        differently in training; none of the stock layers do.
        """
        expect = (self.config.in_channels, *self.config.input_size)
        if batch.ndim != 4 or batch.shape[1:] != expect:
            raise ShapeError(f"batch shape {batch.shape} != (n, {expect})")
        x = batch.astype(self.dtype, copy=False)
        caches = []
        for spec in self.config.layers:
            if spec.kind == "convolution":
                caches.append((spec, x))
                x = conv2d_forward(x, self.params[f"{spec.name}.weight"],
                                   self.params[f"{spec.name}.bias"],
                                   spec.stride, spec.pad or 0)
            elif spec.kind == "max-pool":
                out, arg = maxpool_forward(x, spec.patch, spec.stride, spec.pad or 0)
                caches.append((spec, (arg, x.shape)))
                x = out
            elif spec.kind == "avg-pool":
                caches.append((spec, x.shape))
                x = avgpool_global_forward(x)
            elif spec.kind == "relu":
                caches.append((spec, x))
                x = relu(x)
            elif spec.kind == "fully-connected":
                caches.append((spec, x))
                x = fc_forward(x, self.params[f"{spec.name}.weight"],
                               self.params[f"{spec.name}.bias"])
            elif spec.kind == "inception":
                x, cache = inception_forward(x, spec.inception, self.params,
                                             prefix=f"{spec.name}.")
                caches.append((spec, cache))
            elif spec.kind == "softmax-loss":
                caches.append((spec, None))
            else:
                raise ConfigError(f"cannot execute layer kind {spec.kind!r}")
        return x, {"logits": x, "layers": caches}

    def backward(self, cache, labels):
        """Loss plus one gradient per parameter for the cached forward pass."""
        logits = cache["logits"]
        loss, probs = softmax_cross_entropy(logits, labels)
        g = softmax_cross_entropy_backward(probs, labels)
        grads = {}
        for spec, layer_cache in reversed(cache["layers"]):
            if spec.kind == "convolution":
                x = layer_cache
                g, gw, gb = conv2d_backward(x, self.params[f"{spec.name}.weight"],
                                            g, spec.stride, spec.pad or 0)
                grads[f"{spec.name}.weight"] = gw
                grads[f"{spec.name}.bias"] = gb
            elif spec.kind == "max-pool":
                arg, in_shape = layer_cache
                g = maxpool_backward(arg, g, in_shape)
            elif spec.kind == "avg-pool":
                g = avgpool_global_backward(g, layer_cache)
            elif spec.kind == "relu":
                g = relu_backward(layer_cache, g)
            elif spec.kind == "fully-connected":
                x = layer_cache
                g, gw, gb = fc_backward(x, self.params[f"{spec.name}.weight"], g)
                grads[f"{spec.name}.weight"] = gw
                grads[f"{spec.name}.bias"] = gb
            elif spec.kind == "inception":
                g, incep_grads = inception_backward(layer_cache, g)
                grads.update(incep_grads)
            # softmax-loss was consumed when computing g
        return loss, grads

    def predict_probs(self, batch):
        """Softmax probabilities for a batch, inference mode."""
        logits, _ = self.forward(batch, train_mode=False)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def _xavier_limit(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def build_network(config: NetworkConfig, seed=0, dtype=tensor.DEFAULT_DTYPE,
                  bias_lr_multiplier=2.0) -> Network:
    """Allocate and initialize all parameters for ``config``.

    Weights draw from a uniform Xavier range +-sqrt(6/(fan_in+fan_out));
    biases start at zero and carry ``bias_lr_multiplier`` as their
    learning-rate multiplier.  Two builds with the same seed produce
    bitwise-identical parameters.
    """
    validate_config(config)
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params: dict[str, np.ndarray] = {}
    lr_mult: dict[str, float] = {}

    def add(name, w_shape, b_shape, fan_in, fan_out):
        limit = _xavier_limit(fan_in, fan_out)
        params[f"{name}.weight"] = rng.uniform(-limit, limit, w_shape).astype(dtype)
        params[f"{name}.bias"] = np.zeros(b_shape, dtype=dtype)
        lr_mult[f"{name}.weight"] = 1.0
        lr_mult[f"{name}.bias"] = float(bias_lr_multiplier)

    for spec, in_shape, out_shape in _walk_shapes(config):
        if spec.kind == "convolution":
            c = in_shape[0]
            kh, kw = spec.patch
            oc = spec.out_channels
            add(spec.name, (oc, c, kh, kw), (oc,), c * kh * kw, oc * kh * kw)
        elif spec.kind == "fully-connected":
            d = int(np.prod(in_shape))
            u = spec.out_channels
            add(spec.name, (u, d), (u,), d, u)
        elif spec.kind == "inception":
            shapes = inception_param_shapes(in_shape[0], spec.inception)
            for branch in INCEPTION_BRANCHES:
                w_shape, b_shape = shapes[branch]
                oc, c, kh, kw = w_shape
                add(f"{spec.name}.{branch}", w_shape, b_shape,
                    c * kh * kw, oc * kh * kw)
    return Network(config, params, lr_mult, dtype)


# ---------------------------------------------------------------------------
# Operation counting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpCount:
    """Per-layer multiply-accumulate counts for one input image."""

    per_layer: tuple[tuple[str, int], ...]
    total: int = field(default=0)

    def __post_init__(self):
        object.__setattr__(self, "total", sum(m for _, m in self.per_layer))

    def as_dict(self):
        return dict(self.per_layer)


# Reference per-layer operation counts published for the stock
# architecture, used by the op-count report for side-by-side comparison.
STOCK_REFERENCE_MACS = {
    "conv1": 5_700_000,
    "maxpool1": 5_700_000,
    "conv2": 1_400_000,
    "maxpool2": 1_400_000,
    "inception3a": 2_600_000,
    "inception3b": 4_500_000,
    "maxpool4": 600_000,
    "inception4a": 1_300_000,
    "avgpool": 25_600,
    "fc7": 200_000,
    "fc8": 51_000,
}
STOCK_REFERENCE_TOTAL = 25_000_000


def count_operations(net_or_config, input_shape=None) -> OpCount:
    """Closed-form MAC counts per layer for a single input image.

    conv: oh*ow*oc*kh*kw*ic; fully connected: d*u; pooling: window size
    times output count; inception: sum over branch convolutions plus its
    pooling branch.  ReLU and the loss layer cost zero MACs.
    """
    config = getattr(net_or_config, "config", net_or_config)
    if input_shape is not None:
        config = NetworkConfig(layers=config.layers, in_channels=input_shape[0],
                               input_size=tuple(input_shape[1:]),
                               num_classes=config.num_classes)
    rows = []
    for spec, in_shape, out_shape in _walk_shapes(config):
        if spec.kind == "convolution":
            c = in_shape[0]
            oc, oh, ow = out_shape
            kh, kw = spec.patch
            macs = oh * ow * oc * kh * kw * c
        elif spec.kind == "max-pool":
            kh, kw = spec.patch
            c, oh, ow = out_shape
            macs = kh * kw * oh * ow * c
        elif spec.kind == "avg-pool":
            c, h, w = in_shape
            macs = h * w * c
        elif spec.kind == "fully-connected":
            macs = int(np.prod(in_shape)) * spec.out_channels
        elif spec.kind == "inception":
            c, h, w = in_shape
            isp = spec.inception
            pos = h * w
            macs = pos * (
                isp.n1x1 * c
                + isp.n3x3reduce * c
                + isp.n3x3 * isp.n3x3reduce * 9
                + isp.n5x5reduce * c
                + isp.n5x5 * isp.n5x5reduce * 25
                + isp.npoolproj * c
                + 9 * c  # 3x3/1 pooling branch
            )
        else:
            macs = 0
        rows.append((spec.name, int(macs)))
    return OpCount(per_layer=tuple(rows))
