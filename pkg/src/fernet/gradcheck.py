"""Finite-difference verification of every backward pass.

Each check builds a scalar objective phi = sum(R * f(x)) with a fixed
random projection R, computes the analytic gradient via the layer's
backward pass with R as the incoming gradient, and compares against
central finite differences of phi.  Everything runs in float64; the
reported figure is the maximum absolute difference normalized by the
overall gradient scale.

The composed-network check runs the same procedure over every parameter
and the input batch of a small but structurally complete network (conv,
pooling, an Inception block, global average pooling, two fully
connected layers, softmax loss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

DEFAULT_STEP = 1e-5

# Loose enough for float64 round-off at step 1e-5, tight enough that a
# wrong formula (dropped term, transposed index) fails by orders of
# magnitude.
LAYER_TOLERANCE = 1e-6
INCEPTION_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradCheckRecord:
    """Outcome of one gradient check."""

    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self):
        verdict = "ok" if self.passed else "FAIL"
        return f"{self.name:<18} max_error={self.max_error:.3e} tol={self.tolerance:.0e} {verdict}"


def numerical_gradient(f, x, step=DEFAULT_STEP):
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    Perturbs one element at a time; ``f`` must not retain references to
    the array it is handed.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        f_plus = f(x)
        flat_x[i] = orig - step
        f_minus = f(x)
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-12):
    """max |a - n| divided by the larger of the two gradient scales."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _compare(name, pairs, tolerance):
    """Fold (analytic, numeric) pairs into one record via the worst error."""
    worst = max(max_relative_error(a, n) for a, n in pairs)
    return GradCheckRecord(name=name, max_error=worst, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Per-layer checks
# ---------------------------------------------------------------------------

def check_conv(step=DEFAULT_STEP, seed=7):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3)) * 0.5
    b = rng.normal(size=(4,))
    r = rng.normal(size=nn.conv2d_forward(x, w, b, 2, 1).shape)

    gx, gw, gb = nn.conv2d_backward(x, w, r, 2, 1)
    pairs = [
        (gx, numerical_gradient(lambda v: float(np.sum(r * nn.conv2d_forward(v, w, b, 2, 1))), x, step)),
        (gw, numerical_gradient(lambda v: float(np.sum(r * nn.conv2d_forward(x, v, b, 2, 1))), w, step)),
        (gb, numerical_gradient(lambda v: float(np.sum(r * nn.conv2d_forward(x, w, v, 2, 1))), b, step)),
    ]
    return _compare("conv2d", pairs, LAYER_TOLERANCE)


def check_maxpool(step=DEFAULT_STEP, seed=7):
    # continuous draws keep window maxima isolated, so the argmax is
    # stable under +-step perturbations
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 7, 6))
    out, arg = nn.maxpool_forward(x, (3, 3), 2, pad=1)
    r = rng.normal(size=out.shape)

    def phi(v):
        return float(np.sum(r * nn.maxpool_forward(v, (3, 3), 2, pad=1)[0]))

    analytic = nn.maxpool_backward(arg, r, x.shape)
    return _compare("max-pool", [(analytic, numerical_gradient(phi, x, step))],
                    LAYER_TOLERANCE)


def check_avgpool(step=DEFAULT_STEP, seed=7):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 5, 5))
    r = rng.normal(size=(2, 4, 1, 1))
    analytic = nn.avgpool_global_backward(r, x.shape)

    def phi(v):
        return float(np.sum(r * nn.avgpool_global_forward(v)))

    return _compare("global-avg-pool", [(analytic, numerical_gradient(phi, x, step))],
                    LAYER_TOLERANCE)


def check_relu(step=DEFAULT_STEP, seed=7):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 5, 5))
    x += 0.05 * np.sign(x)  # keep inputs away from the kink at zero
    r = rng.normal(size=x.shape)
    analytic = nn.relu_backward(x, r)

    def phi(v):
        return float(np.sum(r * nn.relu(v)))

    return _compare("relu", [(analytic, numerical_gradient(phi, x, step))],
                    LAYER_TOLERANCE)


def check_fc(step=DEFAULT_STEP, seed=7):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 2, 4, 4))
    w = rng.normal(size=(6, 32)) * 0.3
    b = rng.normal(size=(6,))
    r = rng.normal(size=(3, 6))

    gx, gw, gb = nn.fc_backward(x, w, r)
    pairs = [
        (gx, numerical_gradient(lambda v: float(np.sum(r * nn.fc_forward(v, w, b))), x, step)),
        (gw, numerical_gradient(lambda v: float(np.sum(r * nn.fc_forward(x, v, b))), w, step)),
        (gb, numerical_gradient(lambda v: float(np.sum(r * nn.fc_forward(x, w, v))), b, step)),
    ]
    return _compare("fully-connected", pairs, LAYER_TOLERANCE)


def check_concat(step=DEFAULT_STEP, seed=7):
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=(2, c, 3, 3)) for c in (2, 3, 1)]
    r = rng.normal(size=(2, 6, 3, 3))
    analytic = nn.concat_backward(r, [2, 3, 1])
    pairs = []
    for i, x in enumerate(xs):
        def phi(v, i=i):
            parts = list(xs)
            parts[i] = v
            return float(np.sum(r * nn.concat_channels(parts)))
        pairs.append((analytic[i], numerical_gradient(phi, x, step)))
    return _compare("concat", pairs, LAYER_TOLERANCE)


def check_softmax_loss(step=DEFAULT_STEP, seed=7):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(5, 7)) * 2.0
    labels = rng.integers(0, 7, size=5)
    _, probs = nn.softmax_cross_entropy(logits, labels)
    analytic = nn.softmax_cross_entropy_backward(probs, labels)

    def phi(v):
        return nn.softmax_cross_entropy(v, labels)[0]

    return _compare("softmax-loss", [(analytic, numerical_gradient(phi, logits, step))],
                    LAYER_TOLERANCE)


def check_inception(step=DEFAULT_STEP, seed=7):
    rng = np.random.default_rng(seed)
    spec = nn.InceptionSpec(n1x1=2, n3x3reduce=2, n3x3=3, n5x5reduce=1,
                            n5x5=2, npoolproj=2)
    in_channels = 3
    params = {}
    for branch, (w_shape, b_shape) in nn.inception_param_shapes(in_channels, spec).items():
        params[f"{branch}.weight"] = rng.normal(size=w_shape) * 0.4
        params[f"{branch}.bias"] = rng.normal(size=b_shape) * 0.1
    x = rng.normal(size=(2, in_channels, 6, 6))
    out, cache = nn.inception_forward(x, spec, params)
    r = rng.normal(size=out.shape)
    gx, grads = nn.inception_backward(cache, r)

    def phi_x(v):
        return float(np.sum(r * nn.inception_forward(v, spec, params)[0]))

    pairs = [(gx, numerical_gradient(phi_x, x, step))]
    for name in sorted(grads):
        def phi_p(v, name=name):
            trial = dict(params)
            trial[name] = v
            return float(np.sum(r * nn.inception_forward(x, spec, trial)[0]))
        pairs.append((grads[name], numerical_gradient(phi_p, params[name], step)))
    return _compare("inception", pairs, INCEPTION_TOLERANCE)


# ---------------------------------------------------------------------------
# Composed network check
# ---------------------------------------------------------------------------

def tiny_config(num_classes=3):
    """A structurally complete network small enough to difference exhaustively."""
    layers = (
        nn.LayerSpec("convolution", "conv1", patch=(3, 3), stride=1, pad=1,
                     out_channels=4),
        nn.LayerSpec("relu", "relu1"),
        nn.LayerSpec("max-pool", "pool1", patch=(2, 2), stride=2, pad=0),
        nn.LayerSpec("inception", "incep", inception=nn.InceptionSpec(
            n1x1=2, n3x3reduce=2, n3x3=3, n5x5reduce=1, n5x5=2, npoolproj=2)),
        nn.LayerSpec("avg-pool", "avgpool"),
        nn.LayerSpec("fully-connected", "fc1", out_channels=8),
        nn.LayerSpec("relu", "relu2"),
        nn.LayerSpec("fully-connected", "classifier", out_channels=num_classes),
        nn.LayerSpec("softmax-loss", "loss"),
    )
    return nn.NetworkConfig(layers=layers, in_channels=2, input_size=(8, 8),
                            num_classes=num_classes)


def check_network(step=DEFAULT_STEP, seed=7):
    """Difference the full loss against every parameter and the input batch."""
    rng = np.random.default_rng(seed)
    net = nn.build_network(tiny_config(), seed=seed, dtype=np.float64)
    batch = rng.normal(size=(2, 2, 8, 8))
    labels = rng.integers(0, net.config.num_classes, size=2)

    def loss_of(params_override=None, batch_override=None):
        saved = None
        if params_override is not None:
            name, value = params_override
            saved = net.params[name]
            net.params[name] = value
        try:
            x = batch if batch_override is None else batch_override
            _, cache = net.forward(x, train_mode=True)
            loss, _ = net.backward(cache, labels)
            return loss
        finally:
            if saved is not None:
                net.params[name] = saved

    _, cache = net.forward(batch, train_mode=True)
    _, grads = net.backward(cache, labels)

    pairs = []
    for name in sorted(grads):
        numeric = numerical_gradient(
            lambda v, name=name: loss_of(params_override=(name, v)),
            net.params[name], step)
        pairs.append((grads[name], numeric))

    # the input gradient exercises every layer's grad_input path
    analytic_gx = _input_gradient(net, batch, labels)
    numeric_gx = numerical_gradient(lambda v: loss_of(batch_override=v), batch, step)
    pairs.append((analytic_gx, numeric_gx))
    return _compare("composed-network", pairs, NETWORK_TOLERANCE)


def _input_gradient(net, batch, labels):
    """Gradient of the loss w.r.t. the input batch (not part of training)."""
    logits, cache = net.forward(batch, train_mode=True)
    _, probs = nn.softmax_cross_entropy(logits, labels)
    g = nn.softmax_cross_entropy_backward(probs, labels)
    for spec, layer_cache in reversed(cache["layers"]):
        if spec.kind == "convolution":
            g, _, _ = nn.conv2d_backward(layer_cache, net.params[f"{spec.name}.weight"],
                                         g, spec.stride, spec.pad or 0)
        elif spec.kind == "max-pool":
            arg, in_shape = layer_cache
            g = nn.maxpool_backward(arg, g, in_shape)
        elif spec.kind == "avg-pool":
            g = nn.avgpool_global_backward(g, layer_cache)
        elif spec.kind == "relu":
            g = nn.relu_backward(layer_cache, g)
        elif spec.kind == "fully-connected":
            g, _, _ = nn.fc_backward(layer_cache, net.params[f"{spec.name}.weight"], g)
        elif spec.kind == "inception":
            g, _ = nn.inception_backward(layer_cache, g)
    return g


def run_all(step=DEFAULT_STEP, seed=7):
    """Every check in a fixed order; the composed network runs last."""
    return [
        check_conv(step, seed),
        check_maxpool(step, seed),
        check_avgpool(step, seed),
        check_relu(step, seed),
        check_fc(step, seed),
        check_concat(step, seed),
        check_softmax_loss(step, seed),
        check_inception(step, seed),
        check_network(step, seed),
    ]
