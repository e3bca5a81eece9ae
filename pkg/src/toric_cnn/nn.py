"""Periodic convolutional networks with hand-written reverse-mode gradients.

Tensors are float64 arrays shaped ``(batch, L, ..., L, channels)``. A
convolution with kernel side ``n`` computes

    y[v, o] = sum_{u in Z_n^D, i} x[(v - u + c) mod L, i] * K[u, i, o] + b[o]

with ``c = (n - 1) // 2``. The output index shift ``c`` centres odd kernels on
the output site; for ``n <= 2`` it is zero and the sum is the plain cyclic
convolution.
"""
from __future__ import annotations

import base64
import functools
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("tanh", "sigmoid", "relu", "none")
FORMAT_VERSION = 1
LOG_EPS = 1e-12


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# -- elementwise ---------------------------------------------------------------

def sigmoid(z):
    return expit(z)


def tanh(z):
    return np.tanh(z)


def relu(z):
    return np.maximum(z, 0.0)


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return expit(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "none":
        return z
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d act / dz, given pre-activation z and output y."""
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "none":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


def softmax(x: np.ndarray, batch_axes: int = 0) -> np.ndarray:
    """Softmax over every entry jointly (per sample if ``batch_axes`` leading axes)."""
    axes = tuple(range(batch_axes, x.ndim))
    z = x - x.max(axis=axes, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axes, keepdims=True)


def cross_entropy(predicted: np.ndarray, target: np.ndarray, eps: float = LOG_EPS) -> float:
    """Binary cross-entropy summed over outputs, averaged over samples (axis 0)."""
    pred = np.clip(predicted, eps, 1.0 - eps)
    per = target * np.log(pred) + (1.0 - target) * np.log(1.0 - pred)
    return float(-per.reshape(per.shape[0], -1).sum(axis=1).mean())


def softmax_cross_entropy(logits: np.ndarray, target: np.ndarray, eps: float = LOG_EPS):
    """Fused global softmax and reduced cross-entropy ``-sum F log softmax(z)``.

    Both arrays are batched along axis 0. Returns the batch-mean cost and its
    gradient with respect to the logits.
    """
    b = logits.shape[0]
    flat = logits.reshape(b, -1)
    t = target.reshape(b, -1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = np.maximum(shifted - lse, np.log(eps))
    cost = float(-(t * logp).sum(axis=1).mean())
    prob = np.exp(shifted - lse)
    grad = (prob * t.sum(axis=1, keepdims=True) - t) / b
    return cost, grad.reshape(logits.shape)


def l2_cost(predicted: np.ndarray, target: np.ndarray) -> float:
    """Half the squared error summed over outputs, averaged over samples."""
    d = (predicted - target).reshape(predicted.shape[0], -1)
    return float(0.5 * (d * d).sum(axis=1).mean())


# -- convolution ---------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def conv_indices(dim: int, size: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gather table ``src[v, u]`` and its inverse ``dst[w, u]`` over flat sites."""
    shape = (size,) * dim
    sites = np.indices(shape).reshape(dim, -1).T
    offsets = np.array(list(itertools.product(range(n), repeat=dim)), dtype=np.int64).reshape(-1, dim)
    c = (n - 1) // 2
    src = sites[:, None, :] - offsets[None, :, :] + c
    dst = sites[:, None, :] + offsets[None, :, :] - c
    src = np.ravel_multi_index(np.moveaxis(src, -1, 0), shape, mode="wrap")
    dst = np.ravel_multi_index(np.moveaxis(dst, -1, 0), shape, mode="wrap")
    return src, dst


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (n,)*D + (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.out_channels} output channels")
        sides = set(self.kernel.shape[:-2])
        if len(sides) != 1:
            raise ShapeError(f"kernel must be hypercubic, got {self.kernel.shape}")

    @property
    def dim(self) -> int:
        return self.kernel.ndim - 2

    @property
    def side(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[-2]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[-1]

    def matrix(self) -> np.ndarray:
        return self.kernel.reshape(-1, self.out_channels)


def _flatten_sites(x: np.ndarray, dim: int) -> tuple[np.ndarray, tuple[int, ...]]:
    if x.ndim == dim + 1:
        x = x[None]
    if x.ndim != dim + 2:
        raise ShapeError(f"expected a {dim}D tensor with channels, got shape {x.shape}")
    site_shape = x.shape[1:-1]
    if len(set(site_shape)) != 1:
        raise ShapeError(f"lattice must be hypercubic, got {site_shape}")
    return x.reshape(x.shape[0], -1, x.shape[-1]), site_shape


def _im2col(layer: ConvLayer, x_flat: np.ndarray, size: int) -> np.ndarray:
    if layer.side == 1:
        return x_flat
    src, _ = conv_indices(layer.dim, size, layer.side)
    cols = np.take(x_flat, src, axis=1)  # (B, S, n^D, d)
    return cols.reshape(x_flat.shape[0], x_flat.shape[1], -1)


ROW_BLOCK = 16


def rowwise_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``a @ w`` over the last axis with results independent of row position.

    BLAS treats trailing rows of a matrix with different micro-kernels, which
    changes rounding; padding the row count to a block multiple keeps every
    site on the same code path so lattice shifts commute bit-exactly.
    """
    lead = a.shape[:-1]
    a2 = a.reshape(-1, a.shape[-1])
    m = a2.shape[0]
    padded = -(-m // ROW_BLOCK) * ROW_BLOCK
    if padded != m:
        a2 = np.concatenate([a2, np.zeros((padded - m, a2.shape[1]))])
    return (a2 @ w)[:m].reshape(lead + (w.shape[1],))


def conv_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Apply one periodic convolution plus activation; batch axis optional."""
    batched = x.ndim == layer.dim + 2
    x_flat, site_shape = _flatten_sites(np.asarray(x, dtype=np.float64), layer.dim)
    if x_flat.shape[-1] != layer.in_channels:
        raise ShapeError(f"input has {x_flat.shape[-1]} channels, layer expects {layer.in_channels}")
    cols = _im2col(layer, x_flat, site_shape[0])
    y = activate(layer.activation, rowwise_matmul(cols, layer.matrix()) + layer.bias)
    y = y.reshape((x_flat.shape[0],) + site_shape + (layer.out_channels,))
    return y if batched else y[0]


def conv_backward_input(layer: ConvLayer, dcols: np.ndarray, size: int) -> np.ndarray:
    """Fold column gradients (B, S, n^D * d) back onto input sites."""
    if layer.side == 1:
        return dcols
    _, dst = conv_indices(layer.dim, size, layer.side)
    b, s, _ = dcols.shape
    dcols = dcols.reshape(b, s, -1, layer.in_channels)
    taps = np.arange(dst.shape[1])[None, :]
    return dcols[:, dst, taps, :].sum(axis=2)


# -- network -------------------------------------------------------------------

@dataclass
class Network:
    """Stack of periodic convolutions, optionally followed by a global softmax."""

    layers: list[ConvLayer]
    softmax: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_channels != b.in_channels or a.dim != b.dim:
                raise ShapeError(f"layer with {a.out_channels} outputs feeds a layer expecting {b.in_channels}")

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def receptive_radius(self) -> int:
        return sum((layer.side - 1) // 2 for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.kernel, layer.bias]
        return out

    def forward(self, x: np.ndarray, keep_cache: bool = False):
        """Pre-softmax outputs for a batch ``(B, L, ..., L, d)``.

        With ``keep_cache`` also returns what :meth:`backward` needs.
        """
        x_flat, site_shape = _flatten_sites(np.asarray(x, dtype=np.float64), self.dim)
        if x_flat.shape[-1] != self.in_channels:
            raise ShapeError(f"input has {x_flat.shape[-1]} channels, network expects {self.in_channels}")
        size = site_shape[0]
        cache = []
        h = x_flat
        for layer in self.layers:
            cols = _im2col(layer, h, size)
            z = rowwise_matmul(cols, layer.matrix()) + layer.bias
            h = activate(layer.activation, z)
            if keep_cache:
                cache.append((cols, z, h))
        out = h.reshape((x_flat.shape[0],) + site_shape + (self.out_channels,))
        if keep_cache:
            return out, (size, cache)
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Network output including the global softmax when enabled."""
        out = self.forward(x)
        return softmax(out, batch_axes=1) if self.softmax else out

    def backward(self, cache, dout: np.ndarray) -> list[np.ndarray]:
        """Gradients of a scalar cost w.r.t. all parameters, given d cost / d output."""
        size, layers_cache = cache
        b = dout.shape[0]
        g = dout.reshape(b, -1, self.out_channels)
        grads: list[np.ndarray] = []
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            cols, z, h = layers_cache[k]
            dz = g * activation_grad(layer.activation, z, h)
            dz2 = dz.reshape(-1, layer.out_channels)
            dk = cols.reshape(-1, cols.shape[-1]).T @ dz2
            grads.append(dz2.sum(axis=0))
            grads.append(dk.reshape(layer.kernel.shape))
            if k > 0:
                g = conv_backward_input(layer, dz @ layer.matrix().T, size)
        grads.reverse()
        return grads

    def loss_and_grad(self, x: np.ndarray, target: np.ndarray):
        out, cache = self.forward(x, keep_cache=True)
        if self.softmax:
            cost, dout = softmax_cross_entropy(out, target)
        else:
            b = out.shape[0]
            cost = l2_cost(out, target)
            dout = (out - target) / b
        return cost, self.backward(cache, dout)

    def loss(self, x: np.ndarray, target: np.ndarray) -> float:
        out = self.forward(x)
        if self.softmax:
            return softmax_cross_entropy(out, target)[0]
        return l2_cost(out, target)

    def copy(self) -> Network:
        layers = [ConvLayer(l.kernel.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return Network(layers, self.softmax, json.loads(json.dumps(self.metadata)))


def init_network(dim: int, in_channels: int, spec, rng: np.random.Generator,
                 std: float | None = None, softmax: bool = True) -> Network:
    """Random network from ``spec = [(side, out_channels, activation), ...]``.

    Kernels are Normal(0, 1/sqrt(fan_in)) unless ``std`` is given; biases zero.
    """
    layers = []
    d = in_channels
    for side, out, act in spec:
        fan_in = side ** dim * d
        scale = std if std is not None else 1.0 / np.sqrt(fan_in)
        kernel = rng.normal(0.0, scale, size=(side,) * dim + (d, out))
        layers.append(ConvLayer(kernel, np.zeros(out), act))
        d = out
    return Network(layers, softmax)


def decoder_network(dim: int, hidden: int, rng: np.random.Generator, sides=(3, 1, 1),
                    activation: str = "tanh") -> Network:
    """Decoder shape: syndrome (D channels) -> hidden layers -> binom(D,2) face scores."""
    spec = [(s, hidden, activation) for s in sides[:-1]] + [(sides[-1], dim * (dim - 1) // 2, "none")]
    net = init_network(dim, dim, spec, rng)
    net.metadata["channels"] = channel_conventions(dim)
    return net


def channel_conventions(dim: int) -> dict:
    return {
        "input": "edges",
        "edge_channels": list(range(dim)),
        "output": "faces",
        "face_channels": [list(p) for p in itertools.combinations(range(dim), 2)],
    }


# -- optimizers ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for p, g in zip(params, grads):
        p -= lr * g


def exponential_schedule(lr0: float, gamma: float, step: int) -> float:
    return lr0 * gamma ** step


# -- checkpoints -----------------------------------------------------------------

def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64).reshape(shape)


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        layers.append({
            "side": layer.side,
            "in_channels": layer.in_channels,
            "out_channels": layer.out_channels,
            "activation": layer.activation,
            "kernel_shape": list(layer.kernel.shape),
            "kernel": _encode(layer.kernel),
            "bias": _encode(layer.bias),
        })
    body = {
        "format_version": FORMAT_VERSION,
        "dim": net.dim,
        "channels": net.metadata.get("channels", channel_conventions(net.dim)),
        "softmax": net.softmax,
        "layers": layers,
        "metadata": {k: v for k, v in net.metadata.items() if k != "channels"},
    }
    body["checksum"] = _checksum(body)
    return body


def _checksum(body: dict) -> str:
    payload = {k: v for k, v in body.items() if k != "checksum"}
    return "sha256:" + hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def network_from_dict(body: dict) -> Network:
    if body.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {body.get('format_version')!r}")
    if body.get("checksum") != _checksum(body):
        raise CheckpointError("checkpoint checksum mismatch")
    layers = []
    for spec in body["layers"]:
        kernel = _decode(spec["kernel"], spec["kernel_shape"])
        bias = _decode(spec["bias"], (spec["out_channels"],))
        layers.append(ConvLayer(kernel, bias, spec["activation"]))
    net = Network(layers, bool(body["softmax"]), dict(body.get("metadata", {})))
    if net.dim != body["dim"]:
        raise CheckpointError(f"checkpoint declares D={body['dim']} but kernels are {net.dim}D")
    net.metadata["channels"] = body["channels"]
    return net


def save_network(net: Network, path) -> str:
    body = network_to_dict(net)
    Path(path).write_text(json.dumps(body, indent=1, sort_keys=True))
    return body["checksum"]


def load_network(path) -> Network:
    try:
        body = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from exc
    return network_from_dict(body)


def check_decoder_compat(net: Network, dim: int) -> None:
    """Reject networks whose geometry or channel layout does not match a decoder for ``dim``."""
    expected = channel_conventions(dim)
    found = net.metadata.get("channels")
    if net.dim != dim or net.in_channels != dim or net.out_channels != dim * (dim - 1) // 2:
        raise CheckpointError(
            f"checkpoint geometry mismatch: expected D={dim} with {dim} input and "
            f"{dim * (dim - 1) // 2} output channels, found D={net.dim} with "
            f"{net.in_channels} input and {net.out_channels} output channels")
    if found is not None and found != expected:
        raise CheckpointError(f"channel convention mismatch: expected {expected}, found {found}")
