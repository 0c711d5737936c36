"""
Hand-written network layers, loss and optimizer.

Every ``*_forward`` returns ``(output, cache)`` and its ``*_backward`` takes
``(dout, cache)`` back to ``(dinput, grads)``. Layout is NCHW for feature maps
and [batch, features] for dense activations.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, ClassVar, Dict, Iterable, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from src.core import BatchSizeError, ModelStateError, ParameterError, ShapeError, get_logger
from src.tensorcore import Rng, Tensor, matmul, reshape

if TYPE_CHECKING:
    from src.trainer import ModelConfig

logger = get_logger(__name__, 'nn')

MODES = ("train", "eval")
ACTIVATIONS = ("sigmoid", "tanh", "relu")
BCE_CLAMP = 1e-7

Grads = Dict[str, Tensor]


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ParameterError(f"Unknown mode '{mode}'. Must be one of {list(MODES)}.")


# --- Convolution -----------------------------------------------------------

@dataclass
class ConvLayer:
    """3x3 convolution, stride 1, zero "same" padding."""
    kind: ClassVar[str] = "conv2d"
    param_names: ClassVar[Tuple[str, ...]] = ("weights", "bias")
    buffer_names: ClassVar[Tuple[str, ...]] = ()

    name: str
    weights: Tensor  # [out_ch, in_ch, 3, 3]
    bias: Tensor     # [out_ch]

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
            raise ShapeError(f"{self.name}: kernel must be [out, in, 3, 3], got {list(self.weights.shape)}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"{self.name}: bias must be [{self.weights.shape[0]}], got {list(self.bias.shape)}")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    def describe(self) -> Dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": [3, 3], "stride": 1, "padding": "same"}

    def forward(self, x: Tensor, mode: str, rng: Optional[Rng]):
        return conv2d_forward(self, x)

    def backward(self, dout: Tensor, cache) -> Tuple[Tensor, Grads]:
        return conv2d_backward(self, dout, cache)


def conv2d_forward(layer: ConvLayer, x: Tensor) -> Tuple[Tensor, Any]:
    """Cross-correlation with zero padding 1 and stride 1, plus per-channel bias."""
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"{layer.name}: expected input [batch, {layer.in_channels}, H, W], got {list(x.shape)}")
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # windows[n, c, y, x, i, j] == padded[n, c, y + i, x + j]
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
    kernel = layer.weights.reshape(layer.out_channels, c * 9)
    out = cols @ kernel.T + layer.bias
    y = np.ascontiguousarray(out.reshape(n, h, w, layer.out_channels).transpose(0, 3, 1, 2))
    return y, (x.shape, cols)


def conv2d_backward(layer: ConvLayer, dout: Tensor, cache) -> Tuple[Tensor, Grads]:
    (n, c, h, w), cols = cache
    o = layer.out_channels
    dout_flat = dout.transpose(0, 2, 3, 1).reshape(n * h * w, o)
    d_weights = (dout_flat.T @ cols).reshape(layer.weights.shape)
    d_bias = dout_flat.sum(axis=0)
    dcols = (dout_flat @ layer.weights.reshape(o, c * 9)).reshape(n, h, w, c, 3, 3)
    dpadded = np.zeros((n, c, h + 2, w + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dpadded[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = np.ascontiguousarray(dpadded[:, :, 1:-1, 1:-1])
    return dx, {"weights": d_weights, "bias": d_bias}


# --- Max pooling -----------------------------------------------------------

@dataclass(frozen=True)
class PoolRouting:
    input_shape: Tuple[int, ...]
    argmax: np.ndarray  # [batch, ch, H/2, W/2], row-major position 0..3 inside each window


@dataclass
class MaxPoolLayer:
    kind: ClassVar[str] = "maxpool2d"
    param_names: ClassVar[Tuple[str, ...]] = ()
    buffer_names: ClassVar[Tuple[str, ...]] = ()

    name: str

    def describe(self) -> Dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "window": [2, 2], "stride": 2}

    def forward(self, x: Tensor, mode: str, rng: Optional[Rng]):
        return maxpool2d_forward(x)

    def backward(self, dout: Tensor, cache) -> Tuple[Tensor, Grads]:
        return maxpool2d_backward(dout, cache), {}


def _pool_windows(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def maxpool2d_forward(x: Tensor) -> Tuple[Tensor, PoolRouting]:
    """Non-overlapping 2x2 max pooling; ties route to the first maximal element."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool needs [batch, ch, even H, even W], got {list(x.shape)}")
    windows = _pool_windows(x)
    argmax = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return y, PoolRouting(input_shape=x.shape, argmax=argmax)


def maxpool2d_backward(dout: Tensor, routing: PoolRouting) -> Tensor:
    n, c, h, w = routing.input_shape
    dwindows = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dwindows, routing.argmax[..., None], dout[..., None], axis=-1)
    return dwindows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


# --- Batch normalization ---------------------------------------------------

@dataclass
class BatchNormLayer:
    kind: ClassVar[str] = "batchnorm"
    param_names: ClassVar[Tuple[str, ...]] = ("gamma", "beta")
    buffer_names: ClassVar[Tuple[str, ...]] = ("running_mean", "running_var")

    name: str
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ParameterError(f"{self.name}: epsilon must be > 0, got {self.epsilon}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def describe(self) -> Dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "channels": self.channels,
                "epsilon": self.epsilon, "momentum": self.momentum, "variance": "biased"}

    def forward(self, x: Tensor, mode: str, rng: Optional[Rng]):
        return batchnorm_forward(self, x, mode)

    def backward(self, dout: Tensor, cache) -> Tuple[Tensor, Grads]:
        return batchnorm_backward(self, dout, cache)


def _channel_axes(x: Tensor) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    """Reduction axes and broadcast shape for per-channel statistics."""
    if x.ndim == 2:
        return (0,), (1, x.shape[1])
    return (0, 2, 3), (1, x.shape[1], 1, 1)


def batchnorm_forward(layer: BatchNormLayer, x: Tensor, mode: str) -> Tuple[Tensor, Any]:
    """
    Per-channel normalisation.

    Train mode uses the batch mean and biased variance and moves the running
    statistics by ``momentum``; eval mode uses the running statistics.
    """
    _check_mode(mode)
    if x.ndim not in (2, 4) or x.shape[1] != layer.channels:
        raise ShapeError(f"{layer.name}: expected {layer.channels} channels, got input {list(x.shape)}")
    axes, bshape = _channel_axes(x)

    if mode == "train":
        if x.shape[0] < 2:
            raise BatchSizeError(f"{layer.name}: train-mode batch norm needs a batch of at least 2, got {x.shape[0]}")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        layer.running_mean = (layer.momentum * layer.running_mean + (1 - layer.momentum) * mean).astype(x.dtype)
        layer.running_var = (layer.momentum * layer.running_var + (1 - layer.momentum) * var).astype(x.dtype)
    else:
        mean, var = layer.running_mean, layer.running_var

    inv_std = (1.0 / np.sqrt(var + layer.epsilon)).reshape(bshape)
    x_hat = (x - mean.reshape(bshape)) * inv_std
    y = layer.gamma.reshape(bshape) * x_hat + layer.beta.reshape(bshape)
    return y, (x_hat, inv_std, axes, bshape)


def batchnorm_backward(layer: BatchNormLayer, dout: Tensor, cache) -> Tuple[Tensor, Grads]:
    x_hat, inv_std, axes, bshape = cache
    m = dout.size // dout.shape[1]
    d_gamma = (dout * x_hat).sum(axis=axes)
    d_beta = dout.sum(axis=axes)
    dx_hat = dout * layer.gamma.reshape(bshape)
    dx = (inv_std / m) * (
        m * dx_hat
        - dx_hat.sum(axis=axes, keepdims=True)
        - x_hat * (dx_hat * x_hat).sum(axis=axes, keepdims=True)
    )
    return dx, {"gamma": d_gamma, "beta": d_beta}


# --- Dropout ---------------------------------------------------------------

@dataclass
class DropoutLayer:
    """Inverted dropout."""
    kind: ClassVar[str] = "dropout"
    param_names: ClassVar[Tuple[str, ...]] = ()
    buffer_names: ClassVar[Tuple[str, ...]] = ()

    name: str
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ParameterError(f"{self.name}: dropout rate must be in [0, 1), got {self.rate}")

    def describe(self) -> Dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "rate": self.rate}

    def forward(self, x: Tensor, mode: str, rng: Optional[Rng]):
        return dropout_forward(self, x, rng, mode)

    def backward(self, dout: Tensor, cache) -> Tuple[Tensor, Grads]:
        return dropout_backward(self, dout, cache), {}


def dropout_forward(layer: DropoutLayer, x: Tensor, rng: Optional[Rng], mode: str = "train"):
    """Zero each element with probability ``rate`` and rescale survivors; identity in eval mode."""
    _check_mode(mode)
    if mode == "eval":
        return x, None
    if rng is None:
        raise ParameterError(f"{layer.name}: train-mode dropout needs an Rng")
    mask = rng.random(x.shape) >= layer.rate
    return x * mask * (1.0 / (1.0 - layer.rate)), mask


def dropout_backward(layer: DropoutLayer, dout: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    if mask is None:
        return dout
    return dout * mask * (1.0 / (1.0 - layer.rate))


# --- Dense -----------------------------------------------------------------

@dataclass
class DenseLayer:
    kind: ClassVar[str] = "dense"
    param_names: ClassVar[Tuple[str, ...]] = ("weights", "bias")
    buffer_names: ClassVar[Tuple[str, ...]] = ()

    name: str
    weights: Tensor  # [in_features, out_features]
    bias: Tensor     # [out_features]

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(f"{self.name}: weights {list(self.weights.shape)} and bias "
                             f"{list(self.bias.shape)} do not form a dense layer")

    @property
    def in_features(self) -> int:
        return self.weights.shape[0]

    @property
    def out_features(self) -> int:
        return self.weights.shape[1]

    def describe(self) -> Dict[str, Any]:
        return {"name": self.name, "kind": self.kind,
                "in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x: Tensor, mode: str, rng: Optional[Rng]):
        return dense_forward(self, x)

    def backward(self, dout: Tensor, cache) -> Tuple[Tensor, Grads]:
        return dense_backward(self, dout, cache)


def dense_forward(layer: DenseLayer, x: Tensor) -> Tuple[Tensor, Tensor]:
    """x . W + bias."""
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"{layer.name}: expected input [batch, {layer.in_features}], got {list(x.shape)}")
    return matmul(x, layer.weights) + layer.bias, x


def dense_backward(layer: DenseLayer, dout: Tensor, x: Tensor) -> Tuple[Tensor, Grads]:
    return dout @ layer.weights.T, {"weights": x.T @ dout, "bias": dout.sum(axis=0)}


# --- Activations and flatten -------------------------------------------------

@dataclass
class ActivationLayer:
    kind: ClassVar[str] = "activation"
    param_names: ClassVar[Tuple[str, ...]] = ()
    buffer_names: ClassVar[Tuple[str, ...]] = ()

    name: str
    function: str

    def __post_init__(self):
        if self.function not in ACTIVATIONS:
            raise ParameterError(f"{self.name}: unknown activation '{self.function}'. "
                                 f"Must be one of {list(ACTIVATIONS)}.")

    def describe(self) -> Dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "function": self.function}

    def forward(self, x: Tensor, mode: str, rng: Optional[Rng]):
        return activation(x, self.function)

    def backward(self, dout: Tensor, cache) -> Tuple[Tensor, Grads]:
        return activation_backward(dout, cache), {}


def activation(x: Tensor, kind: str) -> Tuple[Tensor, Any]:
    """Elementwise sigmoid, tanh or relu."""
    if kind == "sigmoid":
        y = expit(x)
    elif kind == "tanh":
        y = np.tanh(x)
    elif kind == "relu":
        y = np.maximum(x, 0)
    else:
        raise ParameterError(f"Unknown activation '{kind}'. Must be one of {list(ACTIVATIONS)}.")
    return y, (kind, x, y)


def activation_backward(dout: Tensor, cache) -> Tensor:
    kind, x, y = cache
    if kind == "sigmoid":
        return dout * y * (1 - y)
    if kind == "tanh":
        return dout * (1 - y * y)
    return dout * (x > 0)


@dataclass
class FlattenLayer:
    kind: ClassVar[str] = "flatten"
    param_names: ClassVar[Tuple[str, ...]] = ()
    buffer_names: ClassVar[Tuple[str, ...]] = ()

    name: str

    def describe(self) -> Dict[str, Any]:
        return {"name": self.name, "kind": self.kind}

    def forward(self, x: Tensor, mode: str, rng: Optional[Rng]):
        return reshape(x, (x.shape[0], x.size // x.shape[0])), x.shape

    def backward(self, dout: Tensor, input_shape) -> Tuple[Tensor, Grads]:
        return reshape(dout, input_shape), {}


# --- Loss ------------------------------------------------------------------

def bce_loss(p: Tensor, y: Tensor) -> Tuple[float, Tensor]:
    """
    Mean binary cross-entropy and its gradient with respect to ``p``.

    Probabilities are clamped to [1e-7, 1 - 1e-7]. For two classes this is the
    categorical cross-entropy of a two-way softmax.
    """
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss shape mismatch: p {list(p.shape)} vs y {list(y.shape)}")
    clamped = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    loss = -np.mean(y * np.log(clamped) + (1 - y) * np.log(1 - clamped))
    grad = (clamped - y) / (clamped * (1 - clamped)) / p.shape[0]
    return float(loss), grad.astype(p.dtype)


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError(f"Adam learning rate must be >= 0, got {self.alpha}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ParameterError(f"Adam decay rates must be in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ParameterError(f"Adam epsilon must be > 0, got {self.epsilon}")

    @classmethod
    def fresh(cls, params: Dict[str, Tensor], **hyper) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   **hyper)


def adam_step(params: Dict[str, Tensor], grads: Grads, state: AdamState) -> Tuple[Dict[str, Tensor], AdamState]:
    """
    One bias-corrected Adam update.

    Returns new parameter tensors and a new state; the inputs are left as they
    are. With alpha == 0 the parameters come back unchanged while m, v and t
    still advance.
    """
    if params.keys() != grads.keys():
        raise ShapeError(f"Parameter and gradient names differ: {sorted(set(params) ^ set(grads))}")
    t = state.t + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    new_params, new_m, new_v = {}, {}, {}
    for name, param in params.items():
        grad = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(param), np.zeros_like(param)
        if not (param.shape == grad.shape == m.shape == v.shape):
            raise ShapeError(f"Adam shapes disagree for '{name}': param {list(param.shape)}, "
                             f"grad {list(grad.shape)}, m {list(m.shape)}, v {list(v.shape)}")
        m = (state.beta1 * m + (1 - state.beta1) * grad).astype(param.dtype)
        v = (state.beta2 * v + (1 - state.beta2) * grad * grad).astype(param.dtype)
        if state.alpha == 0:
            new_params[name] = param
        else:
            m_hat = m / correction1
            v_hat = v / correction2
            new_params[name] = (param - state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype)
        new_m[name], new_v[name] = m, v

    return new_params, dataclasses.replace(state, t=t, m=new_m, v=new_v)


# --- Model -----------------------------------------------------------------

@dataclass
class Model:
    """Ordered layer stack with named parameters, running statistics and optimizer state."""
    layers: List[Any]
    optimizer: AdamState = field(default_factory=AdamState)
    config: Optional["ModelConfig"] = None
    version: int = 0

    @property
    def input_channels(self) -> int:
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                return layer.in_channels
        raise ShapeError("Model has no convolution layer")

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{layer.name}.{attr}": getattr(layer, attr)
                for layer in self.layers for attr in layer.param_names}

    def buffers(self) -> Dict[str, Tensor]:
        return {f"{layer.name}.{attr}": getattr(layer, attr)
                for layer in self.layers for attr in layer.buffer_names}

    def _assign(self, values: Dict[str, Tensor], expected: Dict[str, Tensor]) -> None:
        by_name = {layer.name: layer for layer in self.layers}
        for key, value in values.items():
            if key not in expected:
                raise ShapeError(f"Unknown tensor '{key}'")
            if value.shape != expected[key].shape:
                raise ShapeError(f"Tensor '{key}' must have shape {list(expected[key].shape)}, got {list(value.shape)}")
            layer_name, attr = key.rsplit(".", 1)
            setattr(by_name[layer_name], attr, value)

    def set_parameters(self, values: Dict[str, Tensor]) -> None:
        self._assign(values, self.parameters())
        self.version += 1

    def set_buffers(self, values: Dict[str, Tensor]) -> None:
        self._assign(values, self.buffers())

    def describe(self) -> List[Dict[str, Any]]:
        return [layer.describe() for layer in self.layers]


@dataclass
class ForwardCache:
    mode: str
    version: int
    layer_caches: List[Any]


def model_forward(model: Model, x: Tensor, mode: str, rng: Optional[Rng] = None) -> Tuple[Tensor, ForwardCache]:
    """Run the full stack; returns probabilities [batch] and the cache for backward."""
    _check_mode(mode)
    if x.ndim != 4 or x.shape[1] != model.input_channels:
        raise ShapeError(f"Model expects input [batch, {model.input_channels}, H, W], got {list(x.shape)}")

    caches = []
    out = x
    for layer in model.layers:
        out, cache = layer.forward(out, mode, rng)
        caches.append(cache if mode == "train" else None)
    return out.reshape(x.shape[0]), ForwardCache(mode=mode, version=model.version, layer_caches=caches)


def recalibrate_batchnorm(model: Model, inputs: Iterable[Tensor]) -> int:
    """
    Replace every batch-norm layer's running statistics with population
    statistics measured over ``inputs`` at the current weights.

    Dropout is off during the pass, as at inference. Each batch is normalised
    with its own statistics on the way through, and the running mean and
    biased variance become the per-channel averages over all batches seen.
    Returns the number of images used; with no input the buffers are untouched.
    """
    norms = [layer for layer in model.layers if isinstance(layer, BatchNormLayer)]
    sums = {layer.name: np.zeros(layer.channels) for layer in norms}
    squares = {layer.name: np.zeros(layer.channels) for layer in norms}
    counts = dict.fromkeys(sums, 0)
    images = 0

    for x in inputs:
        if x.shape[0] < 2:
            raise BatchSizeError(f"Batch-norm calibration needs batches of at least 2, got {x.shape[0]}")
        out = x
        for layer in model.layers:
            if not isinstance(layer, BatchNormLayer):
                out, _ = layer.forward(out, "eval", None)
                continue
            axes, bshape = _channel_axes(out)
            wide = out.astype(np.float64)
            sums[layer.name] += wide.sum(axis=axes)
            squares[layer.name] += np.square(wide).sum(axis=axes)
            counts[layer.name] += out.size // out.shape[1]
            mean, var = out.mean(axis=axes), out.var(axis=axes)
            x_hat = (out - mean.reshape(bshape)) / np.sqrt(var + layer.epsilon).reshape(bshape)
            out = layer.gamma.reshape(bshape) * x_hat + layer.beta.reshape(bshape)
        images += x.shape[0]

    if not images:
        return 0
    for layer in norms:
        mean = sums[layer.name] / counts[layer.name]
        var = np.maximum(squares[layer.name] / counts[layer.name] - np.square(mean), 0.0)
        layer.running_mean = mean.astype(layer.running_mean.dtype)
        layer.running_var = var.astype(layer.running_var.dtype)
    logger.debug(f"Recalibrated {len(norms)} batch-norm layer(s) over {images} images")
    return images


def model_backward(model: Model, cache: Optional[ForwardCache], dp: Tensor) -> Grads:
    """Gradients for every named parameter from dL/dp."""
    if cache is None:
        raise ModelStateError("No forward cache: run a train-mode forward pass before backward")
    if cache.mode != "train":
        raise ModelStateError("Backward needs the cache of a train-mode forward pass")
    if cache.version != model.version:
        raise ModelStateError(f"Stale forward cache (model version {model.version}, cache version {cache.version})")

    grads: Grads = {}
    dout = dp.reshape(dp.shape[0], 1)
    for layer, layer_cache in zip(reversed(model.layers), reversed(cache.layer_caches)):
        dout, layer_grads = layer.backward(dout, layer_cache)
        for attr, grad in layer_grads.items():
            grads[f"{layer.name}.{attr}"] = grad
    return {name: grads[name] for name in model.parameters()}
