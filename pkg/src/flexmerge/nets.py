"""Plain feedforward networks with hand-written reverse-mode derivatives.

Parameters live in one flat vector.  Layer ``l`` contributes its weight
matrix (``fan_out x fan_in``, row-major) followed by its bias, so the total
length is ``sum((fan_in + 1) * fan_out)``.  Hidden layers apply the
activation; the last layer is affine.

All functions accept a batch of inputs with shape ``(n, input_dim)``; a
single vector is treated as a batch of one and returned unbatched.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EncodingError, InvalidInput

_MAGIC = b"FMNET1\n"


class Activation(str, enum.Enum):
    SIGMOIDAL = "Sigmoidal"
    SOFTPLUS = "SoftPlus"
    RECTIFIED_SMOOTH = "RectifiedSmooth"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act(kind, x):
    if kind is Activation.SOFTPLUS:
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = _sigmoid(x)
    if kind is Activation.SIGMOIDAL:
        return sig
    return x * sig


def _act_grad(kind, x):
    sig = _sigmoid(x)
    if kind is Activation.SOFTPLUS:
        return sig
    if kind is Activation.SIGMOIDAL:
        return sig * (1.0 - sig)
    return sig * (1.0 + x * (1.0 - sig))


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_layers: tuple = (3, 3)
    output_dim: int = 1
    activation: Activation = Activation.SOFTPLUS
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        object.__setattr__(self, "activation", Activation(self.activation))
        dims = (self.input_dim, *self.hidden_layers, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise InvalidInput(f"all layer widths must be >= 1, got {dims}")

    @property
    def dims(self) -> tuple:
        return (int(self.input_dim), *self.hidden_layers, int(self.output_dim))

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum((d[i] + 1) * d[i + 1] for i in range(len(d) - 1))

    def shapes(self):
        d = self.dims
        return [(d[i + 1], d[i]) for i in range(len(d) - 1)]

    def with_seed(self, seed) -> "NetSpec":
        return NetSpec(self.input_dim, self.hidden_layers, self.output_dim, self.activation, int(seed))

    def to_dict(self) -> dict:
        return {
            "input_dim": int(self.input_dim),
            "hidden_layers": list(self.hidden_layers),
            "output_dim": int(self.output_dim),
            "activation": self.activation.value,
            "init_seed": int(self.init_seed),
        }

    @classmethod
    def from_dict(cls, d) -> "NetSpec":
        return cls(d["input_dim"], tuple(d["hidden_layers"]), d["output_dim"], Activation(d["activation"]), d["init_seed"])


def unpack(spec: NetSpec, theta):
    """Split a flat parameter vector into ``[(W, b), ...]`` views."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.n_params,):
        raise EncodingError(f"theta has shape {theta.shape}, expected ({spec.n_params},)")
    out, pos = [], 0
    for fan_out, fan_in in spec.shapes():
        W = theta[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in)
        pos += fan_out * fan_in
        b = theta[pos : pos + fan_out]
        pos += fan_out
        out.append((W, b))
    return out


def pack(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])


def init(spec: NetSpec) -> np.ndarray:
    """Uniform(-a, a) weights and biases with ``a = sqrt(3 / fan_in)``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(spec.init_seed)))
    parts = []
    for fan_out, fan_in in spec.shapes():
        a = np.sqrt(3.0 / fan_in)
        parts.append(rng.uniform(-a, a, fan_out * fan_in))
        parts.append(rng.uniform(-a, a, fan_out))
    return np.concatenate(parts)


def _batch(spec, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise EncodingError(f"input has shape {x.shape}, network expects {spec.input_dim} features")
    return X, single


def _forward_cache(spec, layers, X):
    pre, post = [], [X]
    a = X
    for i, (W, b) in enumerate(layers):
        z = a @ W.T + b
        if i < len(layers) - 1:
            pre.append(z)
            a = _act(spec.activation, z)
            post.append(a)
        else:
            a = z
    return a, pre, post


def forward(spec: NetSpec, theta, x) -> np.ndarray:
    layers = unpack(spec, theta)
    X, single = _batch(spec, x)
    out = _forward_cache(spec, layers, X)[0]
    return out[0] if single else out


def _backward(spec, layers, pre, post, G):
    """Per-layer cotangents of the pre-activations, last layer first."""
    deltas = [G]
    for i in range(len(layers) - 1, 0, -1):
        W = layers[i][0]
        G = (G @ W) * _act_grad(spec.activation, pre[i - 1])
        deltas.append(G)
    return deltas[::-1]


def _cotangent(spec, cot, n, single):
    G = np.asarray(cot, dtype=float)
    if single and G.ndim == 1:
        G = G[None, :]
    if G.shape != (n, spec.output_dim):
        raise EncodingError(f"cotangent shape {np.shape(cot)} does not match outputs ({n}, {spec.output_dim})")
    return G


def grad_theta(spec: NetSpec, theta, x, cot) -> np.ndarray:
    """Gradient of ``sum_i cot_i . forward(x_i)`` with respect to theta."""
    layers = unpack(spec, theta)
    X, single = _batch(spec, x)
    _, pre, post = _forward_cache(spec, layers, X)
    deltas = _backward(spec, layers, pre, post, _cotangent(spec, cot, X.shape[0], single))
    return pack([(d.T @ a, d.sum(axis=0)) for d, a in zip(deltas, post)])


def grad_input(spec: NetSpec, theta, x, cot) -> np.ndarray:
    """Gradient of ``cot_i . forward(x_i)`` with respect to each input row."""
    layers = unpack(spec, theta)
    X, single = _batch(spec, x)
    _, pre, post = _forward_cache(spec, layers, X)
    deltas = _backward(spec, layers, pre, post, _cotangent(spec, cot, X.shape[0], single))
    gx = deltas[0] @ layers[0][0]
    return gx[0] if single else gx


def jacobian_theta(spec: NetSpec, theta, x) -> np.ndarray:
    """Per-sample parameter gradients of a scalar-output net, shape ``(n, b)``."""
    if spec.output_dim != 1:
        raise InvalidInput("jacobian_theta needs a scalar-output network")
    layers = unpack(spec, theta)
    X, single = _batch(spec, x)
    n = X.shape[0]
    _, pre, post = _forward_cache(spec, layers, X)
    deltas = _backward(spec, layers, pre, post, np.ones((n, 1)))
    cols = []
    for d, a in zip(deltas, post):
        cols.append((d[:, :, None] * a[:, None, :]).reshape(n, -1))
        cols.append(d)
    J = np.concatenate(cols, axis=1)
    return J[0] if single else J


def hidden_features(spec: NetSpec, theta, x) -> np.ndarray:
    """Activations feeding the last affine layer, shape ``(n, width)``."""
    layers = unpack(spec, theta)
    X, _ = _batch(spec, x)
    return _forward_cache(spec, layers, X)[2][-1]


def last_layer_slice(spec: NetSpec) -> slice:
    """Location of the last layer's ``(W, b)`` block inside theta."""
    fan_out, fan_in = spec.shapes()[-1]
    return slice(spec.n_params - (fan_in + 1) * fan_out, spec.n_params)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, spec: NetSpec, theta, extra: dict | None = None) -> None:
    """JSON header line, then theta as little-endian float64."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.n_params,):
        raise EncodingError("theta length does not match spec")
    header = {"spec": spec.to_dict(), "n_params": spec.n_params}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(theta.astype("<f8").tobytes())


def load_checkpoint(path):
    """Return ``(spec, theta, extra)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise InvalidInput(f"{path} is not a network checkpoint")
    pos = len(_MAGIC)
    (n,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    header = json.loads(raw[pos : pos + n])
    pos += n
    theta = np.frombuffer(raw[pos:], dtype="<f8").astype(float)
    spec = NetSpec.from_dict(header["spec"])
    if theta.size != header["n_params"] or theta.size != spec.n_params:
        raise InvalidInput(f"{path}: truncated parameter block")
    return spec, theta, header.get("extra", {})
