"""Fully connected embedding network with hand-written backprop and Adam.

The network maps ``D_in`` vectors to ``D_emb`` embeddings through tanh hidden
layers and a linear output layer. Everything is float64 so that gradients can
be checked against central finite differences.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import (
    ConfigurationError,
    DataError,
    OptimizationError,
    ParseError,
    ShapeError,
    UnsupportedVersionError,
)


@dataclass
class EmbedNet:
    """Parameters of the embedding function.

    ``weights[l]`` has shape ``(layer_dims[l + 1], layer_dims[l])``.
    """

    layer_dims: list
    weights: list
    biases: list

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    def copy(self):
        return EmbedNet(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def parameters(self):
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def __call__(self, X):
        return net_forward(self, X)[0]


@dataclass
class Tape:
    """Forward-pass record needed by :func:`net_gradients`."""

    net: EmbedNet
    inputs: list  # input to each layer
    outputs: np.ndarray


@dataclass
class Gradients:
    weights: list
    biases: list

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def __add__(self, other):
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-5

    @classmethod
    def for_net(cls, net, **hyper):
        params = net.parameters()
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **hyper,
        )


def _check_dims(layer_dims):
    try:
        dims = [int(d) for d in layer_dims]
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"layer_dims must be integers, got {layer_dims!r}") from exc
    if len(dims) < 2:
        raise ConfigurationError(f"layer_dims needs at least 2 entries, got {dims}")
    if any(d < 1 for d in dims):
        raise ConfigurationError(f"every layer dim must be >= 1, got {dims}")
    return dims


def net_init(layer_dims, seed):
    """Initialise weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases at zero."""
    dims = _check_dims(layer_dims)
    rng = np.random.Generator(np.random.PCG64(int(seed) & ((1 << 64) - 1)))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EmbedNet(dims, weights, biases)


def net_forward(net, batch):
    """Embed each row of ``batch``; returns ``(embeddings, tape)``."""
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ShapeError(f"expected batch of width {net.input_dim}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("input batch contains non-finite values")
    inputs = []
    h = X
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
    return h, Tape(net, inputs, h)


def net_gradients(tape, upstream_grad):
    """Backpropagate ``upstream_grad`` (dLoss/dEmbeddings) to the parameters."""
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != tape.outputs.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != embeddings {tape.outputs.shape}")
    net = tape.net
    n = net.n_layers
    gw, gb = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        x = tape.inputs[i]
        gw[i] = g.T @ x
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = g @ net.weights[i]
            # x is tanh output of the previous layer
            g = g * (1.0 - x * x)
    return Gradients(gw, gb)


def adam_step(net, grads, state):
    """One Adam update with L2 weight decay added to the gradient.

    Returns a new ``(net, state)`` pair; the inputs are not modified.
    """
    params = net.parameters()
    gparams = grads.parameters()
    if len(gparams) != len(params):
        raise ShapeError("gradient list does not match network parameters")
    for idx, (p, g) in enumerate(zip(params, gparams)):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {idx} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite gradient in layer {idx // 2}", layer=idx // 2)

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, gparams, state.first_moment, state.second_moment):
        g = g + state.weight_decay * p
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m)
        new_v.append(v)

    new_net = EmbedNet(list(net.layer_dims), new_params[0::2], new_params[1::2])
    new_state = AdamState(
        new_m,
        new_v,
        t,
        state.learning_rate,
        state.beta1,
        state.beta2,
        state.epsilon,
        state.weight_decay,
    )
    return new_net, new_state


def save_net(net, fh):
    """Write ``net`` in the ``pcn-net v1`` text format."""
    fh.write("pcn-net v1 " + " ".join(str(d) for d in net.layer_dims) + "\n")
    for w, b in zip(net.weights, net.biases):
        for row in w:
            fh.write(" ".join("%.17g" % v for v in row) + "\n")
        fh.write(" ".join("%.17g" % v for v in b) + "\n")


def load_net(lines, start=0):
    """Parse a ``pcn-net v1`` block from ``lines``.

    Returns ``(net, next_line_index)``.
    """
    if start >= len(lines):
        raise ParseError("missing pcn-net header", start + 1)
    head = lines[start].split()
    if len(head) < 2 or head[0] != "pcn-net":
        raise ParseError("expected 'pcn-net' header", start + 1)
    if head[1] != "v1":
        raise UnsupportedVersionError(f"unsupported pcn-net version {head[1]!r}", start + 1)
    try:
        dims = _check_dims(head[2:])
    except ConfigurationError as exc:
        raise ParseError(str(exc), start + 1) from exc
    pos = start + 1
    weights, biases = [], []

    def row(width):
        nonlocal pos
        if pos >= len(lines):
            raise ParseError("unexpected end of file in network block", pos + 1)
        try:
            vals = np.array([float(t) for t in lines[pos].split()])
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", pos + 1) from exc
        if vals.shape != (width,) or not np.all(np.isfinite(vals)):
            raise ParseError(f"expected {width} finite values", pos + 1)
        pos += 1
        return vals

    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(np.stack([row(fan_in) for _ in range(fan_out)]))
        biases.append(row(fan_out))
    return EmbedNet(dims, weights, biases), pos
