"""Feed-forward networks: layers, evaluation to pre-softmax logits, input
gradients and the model file format.

Biases are accepted on dense and conv2d layers. They cancel in the
difference ``f(W(x + dx) + b) - f(W x + b)``, so every amplification bound
computed from the weights alone stays valid.

Gradient conventions at kinks are fixed: relu'(0) = 0, leaky_relu'(0) = alpha,
elu'(0) = alpha, and maxpool routes the gradient to the first maximal entry of
its window.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar, Sequence

import numpy as np

from .errors import (InvalidArgumentError, ModelParseError, ModelValidationError,
                     NumericOverflowError)

FORMAT_VERSION = 1

Shape = tuple


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

class Layer:
    kind: ClassVar[str] = ""
    has_weights: ClassVar[bool] = False

    def output_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def forward(self, x):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        raise NotImplementedError

    def backward(self, grad_out, x, cache):
        raise NotImplementedError

    def params(self) -> dict:
        return {}


class Activation(Layer):
    """Elementwise activation; subclasses define ``f`` and ``df``."""

    def f(self, z):
        raise NotImplementedError

    def df(self, z):
        raise NotImplementedError

    def forward(self, x):
        return self.f(x), None

    def backward(self, grad_out, x, cache):
        return grad_out * self.df(x)


@dataclass(frozen=True, eq=False)
class ReLU(Activation):
    kind: ClassVar[str] = "relu"

    def f(self, z):
        return np.maximum(z, 0.0)

    def df(self, z):
        return (z > 0).astype(np.float64)


def _check_alpha(kind, alpha):
    if not (0.0 < alpha <= 1.0):
        raise ModelValidationError(f"{kind} alpha must lie in (0, 1], got {alpha!r}")


@dataclass(frozen=True, eq=False)
class LeakyReLU(Activation):
    alpha: float = 0.1
    kind: ClassVar[str] = "leaky_relu"

    def __post_init__(self):
        _check_alpha(self.kind, self.alpha)

    def f(self, z):
        return np.where(z > 0, z, self.alpha * z)

    def df(self, z):
        return np.where(z > 0, 1.0, self.alpha)

    def params(self):
        return {"alpha": self.alpha}


@dataclass(frozen=True, eq=False)
class ELU(Activation):
    alpha: float = 0.1
    kind: ClassVar[str] = "elu"

    def __post_init__(self):
        _check_alpha(self.kind, self.alpha)

    def f(self, z):
        return np.where(z > 0, z, self.alpha * np.expm1(np.minimum(z, 0.0)))

    def df(self, z):
        return np.where(z > 0, 1.0, self.alpha * np.exp(np.minimum(z, 0.0)))

    def params(self):
        return {"alpha": self.alpha}


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


@dataclass(frozen=True, eq=False)
class Sigmoid(Activation):
    kind: ClassVar[str] = "sigmoid"

    def f(self, z):
        return sigmoid(z)

    def df(self, z):
        s = sigmoid(z)
        return s * (1.0 - s)


@dataclass(frozen=True, eq=False)
class Tanh(Activation):
    kind: ClassVar[str] = "tanh"

    def f(self, z):
        return np.tanh(z)

    def df(self, z):
        return 1.0 - np.tanh(z) ** 2


@dataclass(frozen=True, eq=False)
class Dense(Layer):
    weight: np.ndarray
    bias: np.ndarray | None = None
    kind: ClassVar[str] = "dense"
    has_weights: ClassVar[bool] = True

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        if w.ndim != 2:
            raise ModelValidationError(f"dense weight must be rank 2, got shape {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.array(self.bias, dtype=np.float64)
            if b.shape != (w.shape[0],):
                raise ModelValidationError(
                    f"dense bias shape {b.shape} does not match weight rows {w.shape[0]}")
            b.setflags(write=False)
            object.__setattr__(self, "bias", b)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.weight.shape[1],):
            raise ModelValidationError(
                f"dense expects input shape ({self.weight.shape[1]},), got {tuple(in_shape)}")
        return (self.weight.shape[0],)

    def linear(self, x):
        return self.weight @ x

    def linear_adjoint(self, g):
        return self.weight.T @ g

    def forward(self, x):
        y = self.weight @ x
        if self.bias is not None:
            y = y + self.bias
        return y, None

    def backward(self, grad_out, x, cache):
        return self.weight.T @ grad_out


@dataclass(frozen=True, eq=False)
class Conv2D(Layer):
    """2-D cross-correlation on ``(channels, height, width)`` inputs."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: tuple = (0, 0)
    kind: ClassVar[str] = "conv2d"
    has_weights: ClassVar[bool] = True

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        if w.ndim != 4:
            raise ModelValidationError(
                f"conv2d weight must be (out_ch, in_ch, kh, kw), got shape {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.array(self.bias, dtype=np.float64)
            if b.shape != (w.shape[0],):
                raise ModelValidationError(
                    f"conv2d bias shape {b.shape} does not match out channels {w.shape[0]}")
            b.setflags(write=False)
            object.__setattr__(self, "bias", b)
        if int(self.stride) < 1:
            raise ModelValidationError(f"conv2d stride must be >= 1, got {self.stride}")
        object.__setattr__(self, "stride", int(self.stride))
        pad = tuple(int(p) for p in self.padding)
        if len(pad) != 2 or min(pad) < 0:
            raise ModelValidationError(f"conv2d padding must be two non-negative ints, got {pad}")
        object.__setattr__(self, "padding", pad)

    def output_shape(self, in_shape):
        in_shape = tuple(in_shape)
        o, c, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != c:
            raise ModelValidationError(
                f"conv2d expects input shape ({c}, H, W), got {in_shape}")
        ph, pw = self.padding
        ho = (in_shape[1] + 2 * ph - kh) // self.stride + 1
        wo = (in_shape[2] + 2 * pw - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ModelValidationError(f"conv2d kernel larger than padded input {in_shape}")
        return (o, ho, wo)

    def linear(self, x):
        ph, pw = self.padding
        _, _, kh, kw = self.weight.shape
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, ::self.stride, ::self.stride]
        return np.einsum("ockl,cijkl->oij", self.weight, win)

    def linear_adjoint(self, g, in_shape=None):
        """Adjoint of :meth:`linear`; ``in_shape`` defaults to the smallest fitting input."""
        o, c, kh, kw = self.weight.shape
        ph, pw = self.padding
        s = self.stride
        _, ho, wo = g.shape
        if in_shape is None:
            in_shape = (c, (ho - 1) * s + kh - 2 * ph, (wo - 1) * s + kw - 2 * pw)
        hp, wp = in_shape[1] + 2 * ph, in_shape[2] + 2 * pw
        gx = np.zeros((c, hp, wp))
        for k in range(kh):
            for l in range(kw):
                gx[:, k:k + s * ho:s, l:l + s * wo:s] += np.einsum(
                    "oc,oij->cij", self.weight[:, :, k, l], g)
        return gx[:, ph:ph + in_shape[1], pw:pw + in_shape[2]]

    def forward(self, x):
        y = self.linear(x)
        if self.bias is not None:
            y = y + self.bias[:, None, None]
        return y, None

    def backward(self, grad_out, x, cache):
        return self.linear_adjoint(grad_out, x.shape)

    def params(self):
        return {"stride": self.stride, "padding": list(self.padding)}


@dataclass(frozen=True, eq=False)
class Flatten(Layer):
    kind: ClassVar[str] = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(-1), None

    def backward(self, grad_out, x, cache):
        return grad_out.reshape(x.shape)


@dataclass(frozen=True, eq=False)
class _Pool(Layer):
    """Non-overlapping pooling over ``(channels, height, width)``; trailing
    rows/columns that do not fill a window are dropped."""

    window: int = 2
    stride: int | None = None

    def __post_init__(self):
        if int(self.window) < 1:
            raise ModelValidationError(f"{self.kind} window must be >= 1")
        object.__setattr__(self, "window", int(self.window))
        stride = self.window if self.stride is None else int(self.stride)
        if stride != self.window:
            raise ModelValidationError(
                f"{self.kind} requires stride == window (non-overlapping), "
                f"got window {self.window}, stride {stride}")
        object.__setattr__(self, "stride", stride)

    def output_shape(self, in_shape):
        in_shape = tuple(in_shape)
        if len(in_shape) != 3:
            raise ModelValidationError(f"{self.kind} expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if h < self.window or w < self.window:
            raise ModelValidationError(f"{self.kind} window exceeds input {in_shape}")
        return (c, h // self.window, w // self.window)

    def _blocks(self, x):
        c, h, w = x.shape
        k = self.window
        ho, wo = h // k, w // k
        b = x[:, :ho * k, :wo * k].reshape(c, ho, k, wo, k)
        return b.transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, k * k)

    def _unblocks(self, blocks, in_shape):
        c, h, w = in_shape
        k = self.window
        ho, wo = h // k, w // k
        out = np.zeros(in_shape)
        out[:, :ho * k, :wo * k] = (blocks.reshape(c, ho, wo, k, k)
                                    .transpose(0, 1, 3, 2, 4).reshape(c, ho * k, wo * k))
        return out

    def params(self):
        return {"window": self.window, "stride": self.stride}


@dataclass(frozen=True, eq=False)
class MaxPool(_Pool):
    kind: ClassVar[str] = "maxpool"

    def forward(self, x):
        b = self._blocks(x)
        idx = np.argmax(b, axis=-1)
        return np.take_along_axis(b, idx[..., None], axis=-1)[..., 0], idx

    def backward(self, grad_out, x, cache):
        g = np.zeros(cache.shape + (self.window ** 2,))
        np.put_along_axis(g, cache[..., None], grad_out[..., None], axis=-1)
        return self._unblocks(g, x.shape)


@dataclass(frozen=True, eq=False)
class AvgPool(_Pool):
    kind: ClassVar[str] = "avgpool"

    def forward(self, x):
        return self._blocks(x).mean(axis=-1), None

    def backward(self, grad_out, x, cache):
        area = self.window ** 2
        g = np.repeat(grad_out[..., None] / area, area, axis=-1)
        return self._unblocks(g, x.shape)


LAYER_KINDS = {cls.kind: cls for cls in
               (Dense, Conv2D, ReLU, LeakyReLU, ELU, Sigmoid, Tanh, Flatten, MaxPool, AvgPool)}
ACTIVATIONS = {k: LAYER_KINDS[k] for k in ("relu", "leaky_relu", "elu", "sigmoid", "tanh")}


def make_activation(name: str, alpha: float = 0.1) -> Activation:
    try:
        cls = ACTIVATIONS[name]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None
    return cls(alpha) if name in ("leaky_relu", "elu") else cls()


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    input_shape: tuple
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        in_shape = tuple(int(s) for s in self.input_shape)
        if not layers:
            raise ModelValidationError("network has no layers")
        if not in_shape or min(in_shape) < 1:
            raise ModelValidationError(f"invalid input shape {in_shape}")
        shapes = [in_shape]
        for i, layer in enumerate(layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ModelValidationError as exc:
                raise ModelValidationError(str(exc), layer_index=i) from None
        if len(shapes[-1]) != 1:
            raise ModelValidationError(
                f"final output must be a rank-1 logit vector, got shape {shapes[-1]}",
                layer_index=len(layers) - 1)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", in_shape)
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def class_count(self) -> int:
        return self.shapes[-1][0]

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))


def _check_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        if x.size == net.input_size and x.ndim == 1:
            x = x.reshape(net.input_shape)
        else:
            raise InvalidArgumentError(
                f"input shape {x.shape} does not match network input {net.input_shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("input contains NaN or Inf")
    return x


def forward_trace(net: Network, x):
    """Evaluate every layer, keeping ``(input, cache)`` for the backward pass."""
    x = _check_input(net, x)
    trace = []
    h = x
    for i, layer in enumerate(net.layers):
        with np.errstate(over="ignore", invalid="ignore"):
            out, cache = layer.forward(h)
        if not np.all(np.isfinite(out)):
            raise NumericOverflowError(f"non-finite value produced by layer {i} ({layer.kind})",
                                       layer_index=i)
        trace.append((h, cache))
        h = out
    return h, trace


def forward(net: Network, x) -> np.ndarray:
    return forward_trace(net, x)[0]


def classify(net: Network, x) -> int:
    # np.argmax returns the lowest index among ties.
    return int(np.argmax(forward(net, x)))


def _backward(net: Network, trace, grad_out):
    g = grad_out
    for layer, (h, cache) in zip(reversed(net.layers), reversed(trace)):
        g = layer.backward(g, h, cache)
    return g


def grad_logit(net: Network, x, k: int) -> np.ndarray:
    """Gradient of logit ``k`` with respect to the input, shaped like the input."""
    if not 0 <= k < net.class_count:
        raise InvalidArgumentError(f"class index {k} outside [0, {net.class_count})")
    _, trace = forward_trace(net, x)
    seed = np.zeros(net.class_count)
    seed[k] = 1.0
    return _backward(net, trace, seed)


def logits_and_jacobian(net: Network, x):
    """Logits and the full input Jacobian, shaped ``(class_count, *input_shape)``."""
    logits, trace = forward_trace(net, x)
    eye = np.eye(net.class_count)
    jac = np.stack([_backward(net, trace, eye[k]) for k in range(net.class_count)])
    return logits, jac


# --------------------------------------------------------------------------
# Model file format
# --------------------------------------------------------------------------

def _encode_tensor(t: np.ndarray) -> dict:
    data = np.ascontiguousarray(t, dtype="<f8").tobytes()
    return {"shape": list(t.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode_tensor(obj, where: str) -> np.ndarray:
    if not isinstance(obj, dict):
        raise ModelParseError("expected an object with 'shape' and 'data'", where)
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except KeyError as exc:
        raise ModelParseError(f"missing field {exc.args[0]!r}", where) from None
    except (TypeError, ValueError) as exc:
        raise ModelParseError(f"bad tensor encoding ({exc})", where) from None
    if any(s < 1 for s in shape):
        raise ModelParseError(f"shape extents must be positive, got {list(shape)}", where)
    if len(raw) != 8 * int(np.prod(shape)):
        raise ModelParseError(
            f"data holds {len(raw) // 8} values but shape {list(shape)} needs {int(np.prod(shape))}",
            where)
    t = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(t)):
        raise ModelParseError("tensor contains NaN or Inf", where)
    return t


def layer_to_dict(layer: Layer) -> dict:
    d = {"kind": layer.kind}
    if layer.has_weights:
        d["weight"] = _encode_tensor(layer.weight)
        d["bias"] = None if layer.bias is None else _encode_tensor(layer.bias)
    d.update(layer.params())
    return d


def network_to_dict(net: Network) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "layers": [layer_to_dict(layer) for layer in net.layers],
    }


def dumps_model(net: Network) -> str:
    return json.dumps(network_to_dict(net), indent=1, sort_keys=True) + "\n"


def _layer_from_dict(d, i: int) -> Layer:
    where = f"layers[{i}]"
    if not isinstance(d, dict) or "kind" not in d:
        raise ModelParseError("layer must be an object with a 'kind'", where)
    kind = d["kind"]
    if kind not in LAYER_KINDS:
        raise ModelParseError(f"unknown layer kind {kind!r}", f"{where}.kind")
    try:
        if kind in ("dense", "conv2d"):
            if "weight" not in d:
                raise ModelParseError("missing field 'weight'", where)
            w = _decode_tensor(d["weight"], f"{where}.weight")
            b = d.get("bias")
            b = None if b is None else _decode_tensor(b, f"{where}.bias")
            if kind == "dense":
                return Dense(w, b)
            return Conv2D(w, b, stride=d.get("stride", 1), padding=tuple(d.get("padding", (0, 0))))
        if kind in ("leaky_relu", "elu"):
            alpha = d.get("alpha", 0.1)
            if not isinstance(alpha, (int, float)) or isinstance(alpha, bool):
                raise ModelParseError(f"alpha must be a number, got {alpha!r}", f"{where}.alpha")
            return LAYER_KINDS[kind](float(alpha))
        if kind in ("maxpool", "avgpool"):
            return LAYER_KINDS[kind](window=d.get("window", 2), stride=d.get("stride"))
        return LAYER_KINDS[kind]()
    except ModelValidationError as exc:
        raise ModelValidationError(str(exc), layer_index=i) from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ModelParseError):
            raise
        raise ModelParseError(str(exc), where) from None


def loads_model(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(exc.msg, f"line {exc.lineno}, column {exc.colno}") from None
    if not isinstance(doc, dict):
        raise ModelParseError("top level must be an object", "line 1")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelParseError(f"unsupported format_version {version!r}", "format_version")
    for key in ("input_shape", "layers"):
        if key not in doc:
            raise ModelParseError(f"missing field {key!r}", key)
    if not isinstance(doc["layers"], list):
        raise ModelParseError("must be a list", "layers")
    try:
        input_shape = tuple(int(s) for s in doc["input_shape"])
    except (TypeError, ValueError):
        raise ModelParseError("must be a list of integers", "input_shape") from None
    layers = [_layer_from_dict(d, i) for i, d in enumerate(doc["layers"])]
    return Network(tuple(layers), input_shape)


def save_model(net: Network, path) -> None:
    Path(path).write_text(dumps_model(net), encoding="utf-8")


def load_model(path) -> Network:
    return loads_model(Path(path).read_text(encoding="utf-8"))


def model_digest(net: Network) -> str:
    """SHA-256 of the canonical serialization."""
    return hashlib.sha256(dumps_model(net).encode("utf-8")).hexdigest()


def dense_mlp(weights: Sequence, biases: Sequence | None = None,
              activation: str | None = "relu", alpha: float = 0.1) -> Network:
    """Chain dense layers with ``activation`` between them (none after the last)."""
    layers = []
    biases = biases if biases is not None else [None] * len(weights)
    for i, (w, b) in enumerate(zip(weights, biases)):
        layers.append(Dense(w, b))
        if activation is not None and i < len(weights) - 1:
            layers.append(make_activation(activation, alpha))
    return Network(tuple(layers), (np.asarray(weights[0]).shape[1],))
