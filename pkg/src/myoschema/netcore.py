"""Minimal dense feedforward network with exact analytic gradients.

This is the substrate for both supervised training of the body schema and
the latent-space control solve: we need gradients w.r.t. parameters (for
training) and w.r.t. the input vector (for optimizing a latent code), and
we need them to be exactly reproducible and cheap for very small networks.
No autodiff framework is used on purpose; the networks here are a handful
of small matrices and a hand-written backward pass is both faster and
easier to serialize deterministically.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigError",
    "DenseNet",
    "Gradients",
    "OptimizerState",
    "init_network",
    "forward",
    "backward_params",
    "backward_input",
    "apply_update",
    "save_densenet",
    "load_densenet",
    "write_densenet",
    "read_densenet",
    "fmt",
]

FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Raised for invalid network / optimizer configuration."""


def _tanh(z):
    return np.tanh(z)


def _dtanh(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _identity(z):
    return z


def _didentity(z):
    return np.ones_like(z)


# activation -> (f, df) applied to hidden layers; the output layer is always linear
ACTIVATIONS = {
    "tanh": (_tanh, _dtanh),
    "identity": (_identity, _didentity),
}


@dataclass
class DenseNet:
    """Fully connected net: weights[k] is (out, in), biases[k] is (out,).

    The hidden-layer activation is applied after every layer except the
    last one, which stays linear.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_width(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_width(self) -> int:
        return self.layer_sizes[-1]

    def clone(self) -> "DenseNet":
        return DenseNet(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def check_shapes(self) -> None:
        sizes = self.layer_sizes
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ConfigError(f"bad layer sizes {sizes}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise ConfigError(
                    f"layer {k}: weight {w.shape} / bias {b.shape} do not chain "
                    f"with sizes {sizes}"
                )


@dataclass
class Gradients:
    """Parameter gradients mirroring a DenseNet's weights/biases."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]

    def scaled(self, factor: float) -> "Gradients":
        return Gradients(
            [g * factor for g in self.d_weights],
            [g * factor for g in self.d_biases],
        )

    def add(self, other: "Gradients") -> "Gradients":
        return Gradients(
            [a + b for a, b in zip(self.d_weights, other.d_weights)],
            [a + b for a, b in zip(self.d_biases, other.d_biases)],
        )


def init_network(layer_sizes, seed: int, activation: str = "tanh") -> DenseNet:
    """Zero-mean normal weights scaled by 1/sqrt(fan_in); zero biases.

    Fully determined by (layer_sizes, seed, activation).
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ConfigError(f"need at least input and output layer, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ConfigError(f"layer sizes must be positive, got {sizes}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(sizes, weights, biases, activation)


def forward(net: DenseNet, x: np.ndarray):
    """Evaluate the net; returns (y, cache) with cache reusable by both
    backward passes.

    x may be a single vector (d,) or a batch (B, d); y matches.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.in_width:
        raise ValueError(f"input width {x.shape[-1]} != expected {net.in_width}")
    act, _ = ACTIVATIONS[net.activation]
    a = x
    pre = []  # z_k before activation
    post = [x]  # a_k after activation (post[0] is the input)
    last = net.n_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = z if k == last else act(z)
        post.append(a)
    return a, (pre, post)


def _upstream_deltas(net: DenseNet, cache, dL_dy: np.ndarray):
    """Shared backward recursion: per-layer delta = dL/d(pre-activation)."""
    pre, post = cache
    dL_dy = np.asarray(dL_dy, dtype=float)
    if dL_dy.shape != pre[-1].shape:
        raise ValueError(
            f"dL_dy shape {dL_dy.shape} does not match forward output {pre[-1].shape}"
        )
    _, dact = ACTIVATIONS[net.activation]
    deltas = [None] * net.n_layers
    delta = dL_dy  # output layer is linear
    deltas[-1] = delta
    for k in range(net.n_layers - 2, -1, -1):
        delta = (delta @ net.weights[k + 1]) * dact(pre[k])
        deltas[k] = delta
    return deltas, post


def backward_params(net: DenseNet, cache, dL_dy: np.ndarray) -> Gradients:
    """Exact gradients of L w.r.t. every weight and bias.

    For batched caches the gradients are summed over the batch.
    """
    deltas, post = _upstream_deltas(net, cache, dL_dy)
    d_weights = []
    d_biases = []
    for k in range(net.n_layers):
        a_in = post[k]
        delta = deltas[k]
        if delta.ndim == 1:
            d_weights.append(np.outer(delta, a_in))
            d_biases.append(delta.copy())
        else:
            d_weights.append(delta.T @ a_in)
            d_biases.append(delta.sum(axis=0))
    return Gradients(d_weights, d_biases)


def backward_input(net: DenseNet, cache, dL_dy: np.ndarray) -> np.ndarray:
    """Gradient of L w.r.t. the input vector (shape matches the input)."""
    deltas, _ = _upstream_deltas(net, cache, dL_dy)
    return deltas[0] @ net.weights[0]


@dataclass
class OptimizerState:
    """Adam-style adaptive step, with a plain gradient-descent mode.

    Accumulator shapes mirror the parameter shapes; created lazily on the
    first update so one state can be initialized without a network.
    """

    learning_rate: float = 1e-3
    mode: str = "adam"  # "adam" | "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def clone(self) -> "OptimizerState":
        s = OptimizerState(self.learning_rate, self.mode, self.beta1, self.beta2, self.eps)
        s.step = self.step
        s.m = [a.copy() for a in self.m]
        s.v = [a.copy() for a in self.v]
        return s


def apply_update(net: DenseNet, grads: Gradients, state: OptimizerState):
    """One optimizer step. Returns (new_net, new_state); inputs untouched."""
    if state.mode not in ("adam", "sgd"):
        raise ConfigError(f"unknown optimizer mode {state.mode!r}")
    params = net.weights + net.biases
    gs = grads.d_weights + grads.d_biases
    for p, g in zip(params, gs):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")

    out = net.clone()
    new_params = out.weights + out.biases
    st = state.clone()
    if st.mode == "sgd":
        for p, g in zip(new_params, gs):
            p -= st.learning_rate * g
        st.step += 1
        return out, st

    if not st.m:
        st.m = [np.zeros_like(p) for p in params]
        st.v = [np.zeros_like(p) for p in params]
    st.step += 1
    b1t = 1.0 - st.beta1 ** st.step
    b2t = 1.0 - st.beta2 ** st.step
    for p, g, m, v in zip(new_params, gs, st.m, st.v):
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * g * g
        p -= st.learning_rate * (m / b1t) / (np.sqrt(v / b2t) + st.eps)
    return out, st


# ---------------------------------------------------------------------------
# serialization: portable decimal text, value-exact round trip


def fmt(x: float) -> str:
    """17 significant digits: enough to reproduce any float64 exactly."""
    return format(float(x), ".17g")


def write_densenet(net: DenseNet, out: io.TextIOBase) -> None:
    net.check_shapes()
    out.write(f"densenet v{FORMAT_VERSION}\n")
    out.write("activation " + net.activation + "\n")
    out.write("layer_sizes " + " ".join(str(s) for s in net.layer_sizes) + "\n")
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        out.write(f"W {k} {w.shape[0]} {w.shape[1]}\n")
        for row in w:
            out.write(" ".join(fmt(v) for v in row) + "\n")
        out.write(f"b {k} {b.shape[0]}\n")
        out.write(" ".join(fmt(v) for v in b) + "\n")
    out.write("end densenet\n")


def read_densenet(inp: io.TextIOBase) -> DenseNet:
    header = inp.readline().split()
    if len(header) != 2 or header[0] != "densenet":
        raise ValueError(f"not a densenet section: {header}")
    if header[1] != f"v{FORMAT_VERSION}":
        raise ValueError(f"unsupported densenet format {header[1]}")
    tok = inp.readline().split()
    if tok[0] != "activation":
        raise ValueError("expected activation line")
    activation = tok[1]
    tok = inp.readline().split()
    if tok[0] != "layer_sizes":
        raise ValueError("expected layer_sizes line")
    sizes = [int(s) for s in tok[1:]]
    weights = []
    biases = []
    for k in range(len(sizes) - 1):
        tok = inp.readline().split()
        if tok[:2] != ["W", str(k)]:
            raise ValueError(f"expected weight block {k}, got {tok}")
        rows, cols = int(tok[2]), int(tok[3])
        w = np.empty((rows, cols))
        for i in range(rows):
            w[i] = [float(v) for v in inp.readline().split()]
        tok = inp.readline().split()
        if tok[:2] != ["b", str(k)]:
            raise ValueError(f"expected bias block {k}, got {tok}")
        b = np.array([float(v) for v in inp.readline().split()])
        weights.append(w)
        biases.append(b)
    tok = inp.readline().split()
    if tok != ["end", "densenet"]:
        raise ValueError(f"expected densenet terminator, got {tok}")
    net = DenseNet(sizes, weights, biases, activation)
    net.check_shapes()
    return net


def save_densenet(net: DenseNet, path) -> None:
    with open(path, "w") as f:
        write_densenet(net, f)


def load_densenet(path) -> DenseNet:
    with open(path) as f:
        return read_densenet(f)
