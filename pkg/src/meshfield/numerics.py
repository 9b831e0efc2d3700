"""Small-scale differentiable numerics: positional encoding, tape-based MLPs
with explicit forward/backward (and backward-of-backward for losses that
differentiate a gradient), Adam, and a finite-difference gradient checker.

Everything is plain numpy. Batch inputs are (M, dim) arrays; single vectors
are promoted transparently. No GPU, no general tensor graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mlp",
    "MlpTape",
    "AdamState",
    "positional_encode",
    "mlp_init",
    "mlp_forward",
    "mlp_backward",
    "mlp_input_gradient",
    "mlp_grad_input_backward",
    "adam_step",
    "finite_diff_check",
]


# ---------------------------------------------------------------------------
# activations: value, first and second derivative, by tag

def _softplus(z):
    # stable: log(1 + e^z) = max(z, 0) + log1p(e^{-|z|})
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_ACTIVATIONS = {
    "linear": (
        lambda z: z,
        lambda z: np.ones_like(z),
        lambda z: np.zeros_like(z),
    ),
    "relu": (
        lambda z: np.maximum(z, 0.0),
        lambda z: (z > 0).astype(z.dtype),
        lambda z: np.zeros_like(z),
    ),
    "softplus": (
        _softplus,
        _sigmoid,
        lambda z: (lambda s: s * (1.0 - s))(_sigmoid(z)),
    ),
    "sigmoid": (
        _sigmoid,
        lambda z: (lambda s: s * (1.0 - s))(_sigmoid(z)),
        lambda z: (lambda s: s * (1.0 - s) * (1.0 - 2.0 * s))(_sigmoid(z)),
    ),
}


def positional_encode(x, n_freq):
    """NeRF-style positional encoding.

    Layout: [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{n-1} pi x),
    cos(2^{n-1} pi x)], applied componentwise. Output width is
    dim(x) * (1 + 2 * n_freq). n_freq=0 returns x unchanged.
    """
    if n_freq < 0:
        raise ValueError(f"n_freq must be >= 0, got {n_freq}")
    x = np.asarray(x)
    parts = [x]
    for j in range(n_freq):
        arg = (2.0**j) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class Mlp:
    """Fully-connected net. weights[i] has shape (widths[i+1], widths[i]);
    activation applies to hidden layers, output_activation to the last."""

    layer_widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    output_activation: str = "linear"

    @property
    def n_layers(self):
        return len(self.weights)

    def layer_activation(self, i):
        return self.output_activation if i == self.n_layers - 1 else self.activation

    def param_dict(self, prefix=""):
        out = {}
        for i in range(self.n_layers):
            out[f"{prefix}W{i}"] = self.weights[i]
            out[f"{prefix}b{i}"] = self.biases[i]
        return out

    def astype(self, dtype):
        return Mlp(
            list(self.layer_widths),
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.activation,
            self.output_activation,
        )


@dataclass
class MlpTape:
    """Activation record of one forward call: inputs a[0..L], pre-acts z[1..L].
    First activation derivatives are cached on first use."""

    a: list[np.ndarray] = field(default_factory=list)
    z: list[np.ndarray] = field(default_factory=list)
    single: bool = False
    dact: list = None


def _dact_cache(net, tape):
    if tape.dact is None:
        tape.dact = [
            _ACTIVATIONS[net.layer_activation(i)][1](tape.z[i])
            for i in range(net.n_layers)
        ]
    return tape.dact


def mlp_init(layer_widths, activation="relu", output_activation="linear",
             rng=None, dtype=np.float64):
    """Glorot-uniform init: U(+-sqrt(6 / (fan_in + fan_out))), zero biases."""
    if rng is None:
        rng = np.random.default_rng(0)
    for tag in (activation, output_activation):
        if tag not in _ACTIVATIONS:
            raise ValueError(f"unknown activation tag {tag!r}")
    ws, bs = [], []
    for fan_in, fan_out in zip(layer_widths[:-1], layer_widths[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)).astype(dtype))
        bs.append(np.zeros(fan_out, dtype=dtype))
    return Mlp(list(layer_widths), ws, bs, activation, output_activation)


def _promote(x, width, what):
    x = np.asarray(x)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{what}: expected width {width}, got shape {x.shape}")
    return x, single


def mlp_forward(net, x):
    """Returns (output, tape). Accepts (in,) or (M, in)."""
    a, single = _promote(x, net.layer_widths[0], "mlp_forward input")
    tape = MlpTape(single=single)
    tape.a.append(a)
    for i in range(net.n_layers):
        z = a @ net.weights[i].T + net.biases[i]
        act = _ACTIVATIONS[net.layer_activation(i)][0]
        a = act(z)
        tape.z.append(z)
        tape.a.append(a)
    y = tape.a[-1]
    return (y[0] if single else y), tape


def mlp_backward(net, tape, output_grad):
    """Exact reverse pass for the recorded forward.

    Returns (input_grad, param_grads) where param_grads is a list of
    (dW, db) per layer, summed over the batch.
    """
    g, single = _promote(output_grad, net.layer_widths[-1], "mlp_backward output_grad")
    if len(tape.a) != net.n_layers + 1 or g.shape[0] != tape.a[0].shape[0]:
        raise ValueError("tape does not match this net/output_grad")
    dact = _dact_cache(net, tape)
    param_grads = [None] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        gz = g * dact[i]
        param_grads[i] = (gz.T @ tape.a[i], gz.sum(axis=0))
        g = gz @ net.weights[i]
    return (g[0] if single else g), param_grads


def mlp_input_gradient(net, tape):
    """Per-sample gradient of a scalar output w.r.t. the input.

    Requires output width 1. Returns (M, in) (or (in,) for a single-sample
    tape). This is itself a differentiable computation; see
    mlp_grad_input_backward.
    """
    if net.layer_widths[-1] != 1:
        raise ValueError("input gradient requires scalar output")
    m = tape.a[0].shape[0]
    dact = _dact_cache(net, tape)
    t = np.ones((m, 1), dtype=tape.a[0].dtype)
    for i in range(net.n_layers - 1, -1, -1):
        t = (t * dact[i]) @ net.weights[i]
    return t[0] if tape.single else t


def mlp_grad_input_backward(net, tape, p):
    """Backward of the input-gradient map: d(sum_m p_m . grad_u y_m) / d(u, params).

    p has the input width (the contraction direction per sample). Returns
    (input_grad_contribution, param_grads). Needs the hidden activation's
    second derivative; used by losses that penalize or consume grad_x s.
    """
    p, _ = _promote(p, net.layer_widths[0], "mlp_grad_input_backward p")
    if net.layer_widths[-1] != 1:
        raise ValueError("requires scalar output")
    m = tape.a[0].shape[0]
    dtype = tape.a[0].dtype

    # replay the input-gradient program, keeping intermediates
    t = [None] * (net.n_layers + 1)  # t[i]: grad w.r.t. a[i]
    r = [None] * net.n_layers        # r[i]: grad w.r.t. z[i]
    t[net.n_layers] = np.ones((m, 1), dtype=dtype)
    dact_z = _dact_cache(net, tape)
    d2act_z = [None] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        d2act_z[i] = _ACTIVATIONS[net.layer_activation(i)][2](tape.z[i])
        r[i] = t[i + 1] * dact_z[i]
        t[i] = r[i] @ net.weights[i]

    # reverse pass over (replayed gradient program, then the forward program)
    bar_W = [np.zeros_like(w) for w in net.weights]
    bar_b = [np.zeros_like(b) for b in net.biases]
    bar_z = [np.zeros_like(z) for z in tape.z]
    bar_t = p
    for i in range(net.n_layers):
        bar_r = bar_t @ net.weights[i].T
        bar_W[i] += r[i].T @ bar_t
        bar_z[i] += d2act_z[i] * t[i + 1] * bar_r
        bar_t = dact_z[i] * bar_r
    # t[L] is constant; bar_t discarded here.
    bar_a = np.zeros_like(tape.a[-1])
    for i in range(net.n_layers - 1, -1, -1):
        bar_z[i] += dact_z[i] * bar_a
        bar_W[i] += bar_z[i].T @ tape.a[i]
        bar_b[i] += bar_z[i].sum(axis=0)
        bar_a = bar_z[i] @ net.weights[i]
    return bar_a, list(zip(bar_W, bar_b))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One Adam update with bias correction. params/grads are matching dicts
    of arrays (or single arrays). Updates params in place and returns them.
    Zero gradient on a fresh slot leaves the parameter bit-identical."""
    bare = not isinstance(params, dict)
    if bare:
        params, grads = {"_": params}, {"_": grads}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for key, p in params.items():
        g = np.asarray(grads[key])
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {key!r}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params["_"] if bare else params


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(f, x, step=1e-5, coords=None):
    """Max relative error between f's analytic gradient and central
    differences: max_i |analytic_i - fd_i| / max(1, |analytic_i|).

    f maps a flat array to (scalar value, gradient array). coords optionally
    restricts the checked coordinates (indices into the flattened x).
    """
    x = np.asarray(x, dtype=np.float64).copy()
    value, grad = f(x)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite value or gradient at base point")
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp, _ = f(x)
        flat[i] = old - step
        fm, _ = f(x)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite f at perturbed coordinate {i}")
        fd = (fp - fm) / (2.0 * step)
        err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
        worst = max(worst, err)
    return worst
