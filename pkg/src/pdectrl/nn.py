"""Dense networks with hand-written backpropagation, Adam, and checkpoints.

Inputs are either a single vector ``(d,)`` or a batch ``(m, d)``; parameter
gradients are summed over the batch. All arithmetic is float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, InvalidArgumentError
from .numerics import Rng

ACTIVATIONS = ("tanh", "relu", "identity")
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _activate(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(name, z, a, grad):
    if name == "tanh":
        return grad * (1.0 - a * a)
    if name == "relu":
        return grad * (z > 0.0)
    return grad


class DenseNet:
    """Stack of affine layers, each followed by its activation.

    ``weights[k]`` has shape ``(in, out)`` so a batch multiplies from the left.
    """

    def __init__(self, layer_dims, activations, weights=None, biases=None):
        layer_dims = [int(d) for d in layer_dims]
        activations = list(activations)
        if len(layer_dims) < 2:
            raise InvalidArgumentError("a network needs at least an input and an output width")
        if len(activations) != len(layer_dims) - 1:
            raise InvalidArgumentError(
                f"{len(layer_dims) - 1} layers but {len(activations)} activations")
        for a in activations:
            if a not in ACTIVATIONS:
                raise InvalidArgumentError(f"unknown activation {a!r}")
        self.layer_dims = layer_dims
        self.activations = activations
        shapes = list(zip(layer_dims[:-1], layer_dims[1:]))
        if weights is None:
            weights = [np.zeros(s) for s in shapes]
        if biases is None:
            biases = [np.zeros(s[1]) for s in shapes]
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        for (fan_in, fan_out), w, b in zip(shapes, self.weights, self.biases):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise InvalidArgumentError(
                    f"parameter shapes {w.shape}/{b.shape} do not match layer {fan_in}->{fan_out}")

    @classmethod
    def initialized(cls, layer_dims, activations, rng: Rng) -> "DenseNet":
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""
        net = cls(layer_dims, activations)
        for w in net.weights:
            bound = 1.0 / math.sqrt(w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
        return net

    @property
    def params(self) -> list:
        """Parameters in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "DenseNet":
        return DenseNet(self.layer_dims, self.activations,
                        [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def load_params(self, other: "DenseNet") -> None:
        for p, q in zip(self.params, other.params):
            p[...] = q

    def forward(self, x):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise InvalidArgumentError(f"input width {x.shape[-1]} != {self.in_dim}")
        cache = []
        a = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ w + b
            cache.append((a, z))
            a = _activate(act, z)
        cache.append(a)
        return a, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_output):
        """Reverse pass: returns ``(param_grads, input_grad)``."""
        grad = np.asarray(grad_output, dtype=float)
        out = cache[-1]
        if grad.shape != out.shape:
            raise InvalidArgumentError(f"output gradient shape {grad.shape} != {out.shape}")
        grads = [None] * (2 * len(self.weights))
        a_next = out
        for k in range(len(self.weights) - 1, -1, -1):
            a_in, z = cache[k]
            grad = _activation_grad(self.activations[k], z, a_next, grad)
            if grad.ndim == 1:
                grads[2 * k] = np.outer(a_in, grad)
                grads[2 * k + 1] = grad.copy()
            else:
                grads[2 * k] = a_in.T @ grad
                grads[2 * k + 1] = grad.sum(axis=0)
            grad = grad @ self.weights[k].T
            a_next = a_in
        return grads, grad


def net_forward(net: DenseNet, x):
    return net.forward(x)


def net_backward(net: DenseNet, cache, grad_output):
    return net.backward(cache, grad_output)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with bias correction, updating a fixed list of arrays in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps, 0,
                               [np.zeros_like(p) for p in self.params],
                               [np.zeros_like(p) for p in self.params])

    def step(self, grads) -> None:
        s = self.state
        if len(grads) != len(self.params):
            raise InvalidArgumentError(f"{len(grads)} gradients for {len(self.params)} parameters")
        s.step += 1
        c1 = 1.0 - s.beta1 ** s.step
        c2 = 1.0 - s.beta2 ** s.step
        for p, g, m, v in zip(self.params, grads, s.m, s.v):
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)


class SGD:
    def __init__(self, params, lr=1e-3):
        self.params = list(params)
        self.lr = lr

    def step(self, grads) -> None:
        for p, g in zip(self.params, grads):
            p -= self.lr * g


def make_optimizer(kind: str, params, lr: float):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise InvalidArgumentError(f"unknown optimizer {kind!r}")


def adam_step(params, grads, state_or_optimizer):
    """Functional wrapper: one Adam update of ``params`` (in place, also returned)."""
    state_or_optimizer.step(grads)
    return params


def _log1m_tanh_sq(u):
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), stable for large |u|
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


@dataclass
class SquashedSample:
    action: np.ndarray
    log_prob: np.ndarray
    pre_tanh: np.ndarray
    tanh: np.ndarray
    std: np.ndarray
    noise: np.ndarray
    log_std_active: np.ndarray
    bound: float

    def backward(self, grad_action, grad_log_prob):
        """Chain ``dL/da`` and ``dL/dlogp`` back to ``(dL/dmean, dL/dlog_std)``."""
        t = self.tanh
        dlogp_du = 2.0 * t
        da_du = self.bound * (1.0 - t * t)
        grad_u = grad_action * da_du + grad_log_prob * dlogp_du
        grad_mean = grad_u
        grad_log_std = grad_u * self.std * self.noise - grad_log_prob
        grad_log_std = np.where(self.log_std_active, grad_log_std, 0.0)
        return grad_mean, grad_log_std


def squashed_gaussian_sample(mean, log_std, noise, bound: float) -> SquashedSample:
    """Reparameterized ``a = bound * tanh(mean + exp(log_std) * noise)``.

    ``log_std`` is clamped to [-20, 2]. The log-density is that of the
    pre-squash Gaussian corrected for the tanh and the ``bound`` scaling.
    """
    mean = np.asarray(mean, dtype=float)
    raw_log_std = np.asarray(log_std, dtype=float)
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    noise = np.asarray(noise, dtype=float)
    std = np.exp(log_std)
    u = mean + std * noise
    t = np.tanh(u)
    inner = math.nextafter(bound, 0.0)
    action = np.clip(bound * t, -inner, inner)
    log_prob = (-0.5 * noise * noise - log_std - HALF_LOG_2PI
                - _log1m_tanh_sq(u) - math.log(bound))
    active = (raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX)
    return SquashedSample(action, log_prob, u, t, std, noise, active, bound)


def squashed_log_prob(action, mean, log_std, bound: float):
    """Density of a given action under the squashed Gaussian (used by checks)."""
    action = np.asarray(action, dtype=float)
    log_std = np.clip(np.asarray(log_std, dtype=float), LOG_STD_MIN, LOG_STD_MAX)
    u = np.arctanh(action / bound)
    z = (u - mean) / np.exp(log_std)
    return -0.5 * z * z - log_std - HALF_LOG_2PI - _log1m_tanh_sq(u) - math.log(bound)


# ---------------------------------------------------------------------------
# checkpoint format

MAGIC = b"NNCP"
VERSION = 1
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(nets: dict, scalars: dict | None = None) -> bytes:
    scalars = scalars or {}
    parts = [MAGIC, struct.pack("<HH", VERSION, len(nets))]
    for name, net in nets.items():
        parts.append(_pack_name(name))
        parts.append(struct.pack("<I", len(net.weights)))
        for (fan_in, fan_out), act in zip(zip(net.layer_dims[:-1], net.layer_dims[1:]),
                                          net.activations):
            parts.append(struct.pack("<III", fan_in, fan_out, _ACT_CODE[act]))
        for w, b in zip(net.weights, net.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(struct.pack("<H", len(scalars)))
    for name, value in scalars.items():
        parts.append(_pack_name(name))
        parts.append(struct.pack("<d", float(value)))
    body = b"".join(parts)
    return body + struct.pack("<Q", _checksum(body))


def _checksum(data: bytes) -> int:
    return int(np.frombuffer(data, dtype=np.uint8).sum(dtype=np.uint64))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"truncated checkpoint: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"bad name encoding: {exc}") from None


def parse_checkpoint(data: bytes):
    if len(data) < 16:
        raise CheckpointFormatError(f"truncated checkpoint ({len(data)} bytes)")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic: not a network checkpoint")
    version, count = r.unpack("<HH")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version: expected {VERSION}, found {version}")
    if _checksum(body) != stored:
        raise CheckpointFormatError("checksum mismatch (file corrupted or truncated)")
    nets = {}
    for _ in range(count):
        name = r.name()
        (n_layers,) = r.unpack("<I")
        dims, acts = [], []
        for k in range(n_layers):
            fan_in, fan_out, code = r.unpack("<III")
            if code >= len(ACTIVATIONS):
                raise CheckpointFormatError(f"net {name!r}: unknown activation code {code}")
            if dims and dims[-1] != fan_in:
                raise CheckpointFormatError(
                    f"net {name!r}: layer {k} input {fan_in} != previous output {dims[-1]}")
            if not dims:
                dims.append(fan_in)
            dims.append(fan_out)
            acts.append(ACTIVATIONS[code])
        if not dims:
            raise CheckpointFormatError(f"net {name!r} has no layers")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(r.take(8 * fan_in * fan_out), dtype="<f8").reshape(fan_in, fan_out)
            b = np.frombuffer(r.take(8 * fan_out), dtype="<f8")
            weights.append(w.astype(float))
            biases.append(b.astype(float))
        nets[name] = DenseNet(dims, acts, weights, biases)
    (n_scalars,) = r.unpack("<H")
    scalars = {}
    for _ in range(n_scalars):
        name = r.name()
        (scalars[name],) = r.unpack("<d")
    if r.pos != len(body):
        raise CheckpointFormatError(f"{len(body) - r.pos} trailing bytes after checkpoint payload")
    return nets, scalars


def checkpoint_save(nets: dict, path, scalars: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(nets, scalars))


def checkpoint_load(path):
    """Return ``(nets, scalars)`` read from ``path``."""
    return parse_checkpoint(Path(path).read_bytes())
