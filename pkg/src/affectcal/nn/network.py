"""Feedforward and dilated-TCN prediction heads with exact backpropagation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

from ..errors import ConfigError, FormatError, ShapeError
from ..datamodel import _write_text

ACTIVATIONS = ("relu", "gelu")
HEADS = ("softmax", "sigmoid", "linear")
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class TcnSpec:
    num_layers: int = 5
    kernel_size: int = 3
    channels: int = 256
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16)

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.num_layers != len(self.dilations):
            raise ConfigError("num_layers must equal len(dilations)")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd for centered padding")
        if self.channels < 1 or any(d < 1 for d in self.dilations):
            raise ConfigError("channels and dilations must be positive")

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "relu"
    head: str = "softmax"
    temporal_head: TcnSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if isinstance(self.temporal_head, dict):
            object.__setattr__(self, "temporal_head", TcnSpec(**self.temporal_head))
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("layer sizes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        if self.temporal_head is not None:
            d["temporal_head"]["dilations"] = list(self.temporal_head.dilations)
        return d


PRESETS = ("expr", "audio", "va", "au", "vd", "tcn")


def preset(name: str, input_dim: int, hidden: int = 128, channels: int = 256) -> NetworkSpec:
    """Task presets: one hidden layer for Expr/AU/VD, none for VA, TCN for VD clips."""
    if name in ("expr", "audio"):
        return NetworkSpec(input_dim, 8, (hidden,), head="softmax")
    if name == "va":
        return NetworkSpec(input_dim, 2, (), head="linear")
    if name == "au":
        return NetworkSpec(input_dim, 12, (hidden,), head="sigmoid")
    if name == "vd":
        return NetworkSpec(input_dim, 2, (hidden,), head="softmax")
    if name == "tcn":
        return NetworkSpec(input_dim, 2, (), head="softmax", temporal_head=TcnSpec(channels=channels))
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


@dataclass
class NetworkState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    def copy(self) -> "NetworkState":
        return NetworkState({k: a.copy() for k, a in self.params.items()},
                            {k: a.copy() for k, a in self.m.items()},
                            {k: a.copy() for k, a in self.v.items()}, self.step, self.seed)


def param_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    width = spec.input_dim
    if spec.temporal_head is not None:
        tcn = spec.temporal_head
        for layer in range(tcn.num_layers):
            shapes[f"tcn{layer}.W"] = (tcn.kernel_size, width, tcn.channels)
            shapes[f"tcn{layer}.b"] = (tcn.channels,)
            if width != tcn.channels:
                shapes[f"tcn{layer}.R"] = (width, tcn.channels)
            width = tcn.channels
    for i, h in enumerate(spec.hidden_dims):
        shapes[f"dense{i}.W"] = (width, h)
        shapes[f"dense{i}.b"] = (h,)
        width = h
    shapes["out.W"] = (width, spec.output_dim)
    shapes["out.b"] = (spec.output_dim,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...], shapes: dict) -> int:
    if name.endswith(".W") and len(shape) == 3:
        return shape[0] * shape[1]
    if name.endswith(".W") or name.endswith(".R"):
        return shape[0]
    w_shape = shapes[name[:-2] + ".W"]
    return w_shape[0] * w_shape[1] if len(w_shape) == 3 else w_shape[0]


def init_state(spec: NetworkSpec, seed: int = 0) -> NetworkState:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng([int(seed), 0])
    shapes = param_shapes(spec)
    params = {}
    for name, shape in shapes.items():
        bound = 1.0 / np.sqrt(_fan_in(name, shape, shapes))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return NetworkState(params, {k: np.zeros_like(a) for k, a in params.items()},
                        {k: np.zeros_like(a) for k, a in params.items()}, 0, int(seed))


# ---------------------------------------------------------------- primitives

def _act(z: np.ndarray, kind: str, gate: np.ndarray | None = None) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0) if gate is None else z * gate
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def dilated_conv(h: np.ndarray, W: np.ndarray, b: np.ndarray, dilation: int) -> np.ndarray:
    """Centered dilated 1-D convolution along axis -2 with zero padding.

    ``h`` is ``(..., T, c_in)``, ``W`` is ``(k, c_in, c_out)``; output length is T.
    """
    k = W.shape[0]
    pad = (k - 1) // 2 * dilation
    T = h.shape[-2]
    hp = _pad_time(h, pad)
    out = np.broadcast_to(b, h.shape[:-1] + (W.shape[2],)).copy()
    for j in range(k):
        out += hp[..., j * dilation: j * dilation + T, :] @ W[j]
    return out


def _pad_time(h: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return h
    widths = [(0, 0)] * h.ndim
    widths[-2] = (pad, pad)
    return np.pad(h, widths)


def dilated_conv_backward(h, W, dilation, dout):
    k = W.shape[0]
    pad = (k - 1) // 2 * dilation
    T = h.shape[-2]
    hp = _pad_time(h, pad)
    dW = np.empty_like(W)
    dhp = np.zeros_like(hp)
    cin, cout = W.shape[1], W.shape[2]
    dout2 = dout.reshape(-1, cout)
    for j in range(k):
        window = hp[..., j * dilation: j * dilation + T, :]
        dW[j] = window.reshape(-1, cin).T @ dout2
        dhp[..., j * dilation: j * dilation + T, :] += dout @ W[j].T
    db = dout2.sum(axis=0)
    dh = dhp[..., pad: pad + T, :] if pad else dhp
    return dh, dW, db


# ---------------------------------------------------------------- network

@dataclass
class Forward:
    logits: np.ndarray
    outputs: np.ndarray
    cache: list = field(repr=False, default_factory=list)

    def relu_gates(self) -> list[np.ndarray]:
        """On/off pattern of every activation, in layer order."""
        return [(entry[-1] > 0).astype(np.float64) for entry in self.cache[:-1]]


def head_output(logits: np.ndarray, head: str) -> np.ndarray:
    if head == "softmax":
        return softmax(logits)
    if head == "sigmoid":
        return sigmoid(logits)
    return logits.copy()


def forward(state: NetworkState, spec: NetworkSpec, batch, relu_gates: list | None = None) -> Forward:
    """Run the network. ``relu_gates`` pins each ReLU's on/off pattern (as
    returned by :meth:`Forward.relu_gates`); gradient checks use it so finite
    differences stay on one linear piece."""
    x = np.asarray(batch, dtype=np.float64)
    if spec.temporal_head is not None:
        if x.ndim not in (2, 3):
            raise ShapeError("temporal head expects (time, dim) or (batch, time, dim) input")
    elif x.ndim != 2:
        raise ShapeError("MLP expects a (batch, dim) matrix")
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"input has {x.shape[-1]} columns, network expects {spec.input_dim}")
    p = state.params
    cache = []
    h = x
    if spec.temporal_head is not None:
        tcn = spec.temporal_head
        for layer, d in enumerate(tcn.dilations):
            z = dilated_conv(h, p[f"tcn{layer}.W"], p[f"tcn{layer}.b"], d)
            R = p.get(f"tcn{layer}.R")
            res = h if R is None else h @ R
            gate = None if relu_gates is None else relu_gates[len(cache)]
            cache.append(("tcn", layer, d, h, z))
            h = _act(z, spec.activation, gate) + res
    for i in range(len(spec.hidden_dims)):
        z = h @ p[f"dense{i}.W"] + p[f"dense{i}.b"]
        gate = None if relu_gates is None else relu_gates[len(cache)]
        cache.append(("dense", i, h, z))
        h = _act(z, spec.activation, gate)
    cache.append(("out", h))
    logits = h @ p["out.W"] + p["out.b"]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    return Forward(logits, head_output(logits, spec.head), cache)


def backward(state: NetworkState, spec: NetworkSpec, fwd: Forward, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    p = state.params
    grads: dict[str, np.ndarray] = {}
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(fwd.logits.shape)
    _, h = fwd.cache[-1]
    out_dim = dlogits.shape[-1]
    grads["out.W"] = h.reshape(-1, h.shape[-1]).T @ dlogits.reshape(-1, out_dim)
    grads["out.b"] = dlogits.reshape(-1, out_dim).sum(axis=0)
    dh = dlogits @ p["out.W"].T
    for entry in reversed(fwd.cache[:-1]):
        if entry[0] == "dense":
            _, i, h_in, z = entry
            dz = dh * _act_grad(z, spec.activation)
            grads[f"dense{i}.W"] = h_in.reshape(-1, h_in.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
            grads[f"dense{i}.b"] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
            dh = dz @ p[f"dense{i}.W"].T
        else:
            _, layer, d, h_in, z = entry
            dz = dh * _act_grad(z, spec.activation)
            dh_conv, grads[f"tcn{layer}.W"], grads[f"tcn{layer}.b"] = dilated_conv_backward(
                h_in, p[f"tcn{layer}.W"], d, dz)
            R = p.get(f"tcn{layer}.R")
            if R is None:
                dh = dh_conv + dh
            else:
                grads[f"tcn{layer}.R"] = h_in.reshape(-1, h_in.shape[-1]).T @ dh.reshape(-1, dh.shape[-1])
                dh = dh_conv + dh @ R.T
    return {k: grads[k] for k in p}


# ---------------------------------------------------------------- persistence

def _pack(arrays: dict[str, np.ndarray]) -> list[dict]:
    return [{"name": k, "shape": list(a.shape), "data": a.ravel().tolist()} for k, a in arrays.items()]


def _unpack(items: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for it in items:
        out[it["name"]] = np.asarray(it["data"], dtype=np.float64).reshape(it["shape"])
    return out


def save_network(path, spec: NetworkSpec, state: NetworkState) -> None:
    doc = {
        "spec": spec.to_dict(),
        "step": state.step,
        "seed": state.seed,
        "params": _pack(state.params),
        "moments": {"m": _pack(state.m), "v": _pack(state.v)},
    }
    _write_text(path, json.dumps(doc) + "\n")


def load_network(path) -> tuple[NetworkSpec, NetworkState]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        spec = NetworkSpec(**doc["spec"])
        state = NetworkState(_unpack(doc["params"]), _unpack(doc["moments"]["m"]),
                             _unpack(doc["moments"]["v"]), int(doc["step"]), int(doc["seed"]))
    except FileNotFoundError:
        raise ConfigError(f"network file not found: {path}") from None
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad network file: {exc}") from None
    expected = param_shapes(spec)
    got = {k: a.shape for k, a in state.params.items()}
    if got != expected:
        raise FormatError(f"{path}: parameter shapes do not match the network spec")
    return spec, state
