"""
Minimal numpy neural core - 1-D convolution / transposed convolution, dense
layers, activations, RMSProp and finite-difference gradient checking

Tensors are plain numpy arrays; conv layers take (N, C, L) batches and dense
layers take (N, D). Every *_forward returns (out, cache) and the matching
*_backward consumes that cache.
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sfft

from core.errors import (
    InvalidParameterError,
    MissingCacheError,
    NonFiniteError,
    ShapeMismatchError,
    ValidationError,
)
from core.logger import get_logger

logger = get_logger()

Tensor = np.ndarray


def ensure_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"Non-finite values in {what}")
    return x


class LayerKind(str, Enum):
    CONV1D = "conv1d"
    DECONV1D = "deconv1d"
    DENSE = "dense"


class Padding(str, Enum):
    SAME = "same"
    VALID = "valid"


class Activation(str, Enum):
    LRELU = "lrelu"
    LINEAR = "linear"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class LayerSpec:
    """Shape and behaviour of one parametrised layer"""

    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: Padding = Padding.SAME
    activation: Activation = Activation.LRELU
    slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "padding", Padding(self.padding))
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.kernel < 1 or self.stride < 1:
            raise InvalidParameterError("kernel and stride must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidParameterError("channel counts must be >= 1")

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind is LayerKind.CONV1D:
            return (self.out_channels, self.in_channels, self.kernel)
        if self.kind is LayerKind.DECONV1D:
            return (self.in_channels, self.out_channels, self.kernel)
        return (self.in_channels, self.out_channels)

    @property
    def fans(self) -> Tuple[int, int]:
        receptive = self.kernel if self.kind is not LayerKind.DENSE else 1
        return self.in_channels * receptive, self.out_channels * receptive

    def output_length(self, length: int) -> int:
        if self.kind is LayerKind.CONV1D:
            if self.padding is Padding.SAME:
                return -(-length // self.stride)
            return (length - self.kernel) // self.stride + 1
        if self.kind is LayerKind.DECONV1D:
            if self.padding is Padding.SAME:
                return length * self.stride
            return (length - 1) * self.stride + self.kernel
        return self.out_channels


def _pads(kernel: int, padding: Padding) -> Tuple[int, int]:
    if Padding(padding) is Padding.VALID:
        return 0, 0
    total = kernel - 1
    return total // 2, total - total // 2


# Stride-1 valid cross-correlation and its two adjoints, all in the frequency domain

def _corr(xp: Tensor, w: Tensor) -> Tensor:
    """out[n, o, t] = sum_c sum_k w[o, c, k] xp[n, c, t + k]"""
    kernel = w.shape[-1]
    out_len = xp.shape[-1] - kernel + 1
    size = sfft.next_fast_len(xp.shape[-1] + kernel - 1, real=True)
    xf = sfft.rfft(xp, size, axis=-1).transpose(2, 0, 1)
    wf = sfft.rfft(w[..., ::-1], size, axis=-1).transpose(2, 1, 0)
    full = sfft.irfft((xf @ wf).transpose(1, 2, 0), size, axis=-1)
    return full[..., kernel - 1:kernel - 1 + out_len]


def _corr_wgrad(xp: Tensor, gfull: Tensor, kernel: int) -> Tensor:
    """d/dw of sum(gfull * _corr(xp, w)), shape (O, C, K)"""
    out_len = gfull.shape[-1]
    size = sfft.next_fast_len(xp.shape[-1] + out_len - 1, real=True)
    xf = sfft.rfft(xp, size, axis=-1).transpose(2, 0, 1)
    gf = sfft.rfft(gfull[..., ::-1], size, axis=-1).transpose(2, 1, 0)
    full = sfft.irfft((gf @ xf).transpose(1, 2, 0), size, axis=-1)
    return full[..., out_len - 1:out_len - 1 + kernel]


def _corr_xgrad(gfull: Tensor, w: Tensor, in_len: int) -> Tensor:
    """d/dxp of sum(gfull * _corr(xp, w)), shape (N, C, in_len)"""
    size = sfft.next_fast_len(in_len, real=True)
    gf = sfft.rfft(gfull, size, axis=-1).transpose(2, 0, 1)
    wf = sfft.rfft(w, size, axis=-1).transpose(2, 0, 1)
    full = sfft.irfft((gf @ wf).transpose(1, 2, 0), size, axis=-1)
    return full[..., :in_len]


def _check_conv_input(x: Tensor, channels: int, what: str):
    if x.ndim != 3 or x.shape[1] != channels:
        raise ShapeMismatchError(
            f"{what} expects (N, {channels}, L) input, got {tuple(x.shape)}"
        )


@dataclass
class ConvCache:
    xp: Tensor
    w: Tensor
    stride: int
    left: int
    in_len: int
    full_len: int


def conv1d_forward(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
                   padding: Padding = Padding.SAME) -> Tuple[Tensor, ConvCache]:
    """
    Strided 1-D cross-correlation

    Args:
        x: (N, C_in, L) input
        w: (C_out, C_in, K) weights
        b: (C_out,) bias
        stride: Output subsampling
        padding: 'same' (zero pad totalling K-1, extra on the right) or 'valid'

    Returns:
        ((N, C_out, L') output, cache)
    """
    if w.ndim != 3 or b.shape != (w.shape[0],):
        raise ShapeMismatchError(f"Bad conv parameters {w.shape} / {b.shape}")
    _check_conv_input(x, w.shape[1], "conv1d")
    kernel = w.shape[-1]
    left, right = _pads(kernel, padding)
    if x.shape[-1] + left + right < kernel:
        raise ShapeMismatchError(f"Input of length {x.shape[-1]} shorter than kernel {kernel}")

    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    full = _corr(xp, w)
    out = full[..., ::stride] + b[None, :, None]
    return out, ConvCache(xp, w, stride, left, x.shape[-1], full.shape[-1])


def conv1d_backward(grad_out: Tensor, cache: Optional[ConvCache]
                    ) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_x, grad_w, grad_b)"""
    if cache is None:
        raise MissingCacheError("conv1d_backward called without a forward cache")
    n, c_out = grad_out.shape[:2]
    gfull = np.zeros((n, c_out, cache.full_len))
    gfull[..., ::cache.stride] = grad_out

    grad_w = _corr_wgrad(cache.xp, gfull, cache.w.shape[-1])
    grad_xp = _corr_xgrad(gfull, cache.w, cache.xp.shape[-1])
    grad_x = grad_xp[..., cache.left:cache.left + cache.in_len]
    return grad_x, grad_w, grad_out.sum(axis=(0, 2))


@dataclass
class DeconvCache:
    upsampled: Tensor
    w: Tensor
    stride: int
    left: int
    right: int
    out_len: int


def deconv1d_forward(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
                     padding: Padding = Padding.SAME) -> Tuple[Tensor, DeconvCache]:
    """
    Transposed convolution: the input-gradient map of conv1d

    Args:
        x: (N, C_in, L) input
        w: (C_in, C_out, K) weights
        b: (C_out,) bias

    Returns:
        ((N, C_out, L * stride) for 'same', ((L - 1) * stride + K) for 'valid', cache)
    """
    if w.ndim != 3 or b.shape != (w.shape[1],):
        raise ShapeMismatchError(f"Bad deconv parameters {w.shape} / {b.shape}")
    _check_conv_input(x, w.shape[0], "deconv1d")
    kernel = w.shape[-1]
    n, c_in, length = x.shape
    left, right = _pads(kernel, padding)
    if Padding(padding) is Padding.SAME:
        out_len = length * stride
    else:
        out_len = (length - 1) * stride + kernel
    padded_len = out_len + left + right
    full_len = padded_len - kernel + 1

    upsampled = np.zeros((n, c_in, full_len))
    upsampled[..., ::stride] = x
    yp = _corr_xgrad(upsampled, w, padded_len)
    out = yp[..., left:left + out_len] + b[None, :, None]
    return out, DeconvCache(upsampled, w, stride, left, right, out_len)


def deconv1d_backward(grad_out: Tensor, cache: Optional[DeconvCache]
                      ) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_x, grad_w, grad_b)"""
    if cache is None:
        raise MissingCacheError("deconv1d_backward called without a forward cache")
    gp = np.pad(grad_out, ((0, 0), (0, 0), (cache.left, cache.right)))
    grad_x = _corr(gp, cache.w)[..., ::cache.stride]
    grad_w = _corr_wgrad(gp, cache.upsampled, cache.w.shape[-1])
    return grad_x, grad_w, grad_out.sum(axis=(0, 2))


def dense_forward(x: Tensor, w: Tensor, b: Tensor) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
    """y = x W + b for x (N, D_in), W (D_in, D_out)"""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatchError(
            f"dense expects (N, {w.shape[0]}) input, got {tuple(x.shape)}"
        )
    return x @ w + b, (x, w)


def dense_backward(grad_out: Tensor, cache: Optional[Tuple[Tensor, Tensor]]
                   ) -> Tuple[Tensor, Tensor, Tensor]:
    if cache is None:
        raise MissingCacheError("dense_backward called without a forward cache")
    x, w = cache
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


def lrelu(x: Tensor, slope: float = 0.2) -> Tensor:
    """x for x >= 0, slope * x otherwise"""
    return np.where(x >= 0, x, slope * x)


def lrelu_forward(x: Tensor, slope: float = 0.2) -> Tuple[Tensor, Tuple[Tensor, float]]:
    return lrelu(x, slope), (x, slope)


def lrelu_backward(grad_out: Tensor, cache) -> Tensor:
    if cache is None:
        raise MissingCacheError("lrelu_backward called without a forward cache")
    x, slope = cache
    return grad_out * np.where(x >= 0, 1.0, slope)


def sigmoid_forward(x: Tensor) -> Tuple[Tensor, Tensor]:
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    return out, out


def sigmoid_backward(grad_out: Tensor, cache) -> Tensor:
    if cache is None:
        raise MissingCacheError("sigmoid_backward called without a forward cache")
    return grad_out * cache * (1.0 - cache)


@dataclass
class Parameter:
    """Value, gradient and RMSProp accumulator of one named parameter"""

    value: Tensor
    grad: Tensor = None
    accum: Tensor = None

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value) if self.grad is None else np.array(self.grad, dtype=np.float64)
        self.accum = np.zeros_like(self.value) if self.accum is None else np.array(self.accum, dtype=np.float64)

    def check_shapes(self, name: str):
        if not (self.value.shape == self.grad.shape == self.accum.shape):
            raise ShapeMismatchError(
                f"Parameter '{name}' drifted: value {self.value.shape}, "
                f"grad {self.grad.shape}, accum {self.accum.shape}"
            )


ACCUM_SUFFIX = "@rms"


class ParameterStore:
    """
    Ordered name -> Parameter map

    Stores are shared by reference: merged() returns a view whose entries are
    the same Parameter objects.
    """

    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()

    def add(self, name: str, value: Tensor) -> Parameter:
        if name in self._params:
            raise ValidationError(f"Duplicate parameter '{name}'")
        param = Parameter(value)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    @property
    def num_values(self) -> int:
        return int(sum(p.value.size for p in self._params.values()))

    def zero_grad(self):
        for param in self._params.values():
            param.grad[...] = 0.0

    @classmethod
    def merged(cls, *stores: "ParameterStore") -> "ParameterStore":
        combined = cls()
        for store in stores:
            for name, param in store.items():
                if name in combined:
                    raise ValidationError(f"Parameter '{name}' appears in two stores")
                combined._params[name] = param
        return combined

    def to_arrays(self, prefix: str = "") -> Dict[str, Tensor]:
        """Parameter values plus '@rms' accumulators, keyed for a FeatureArchive"""
        arrays = {}
        for name, param in self._params.items():
            arrays[f"{prefix}{name}"] = param.value
            arrays[f"{prefix}{name}{ACCUM_SUFFIX}"] = param.accum
        return arrays

    def load_arrays(self, arrays: Dict[str, Tensor], prefix: str = ""):
        for name, param in self._params.items():
            key = f"{prefix}{name}"
            if key not in arrays:
                raise ShapeMismatchError(f"Missing parameter '{key}'")
            value = np.asarray(arrays[key], dtype=np.float64)
            if value.shape != param.value.shape:
                raise ShapeMismatchError(
                    f"Parameter '{key}' has shape {value.shape}, expected {param.value.shape}"
                )
            param.value = value.copy()
            accum = arrays.get(f"{key}{ACCUM_SUFFIX}")
            param.accum = np.zeros_like(param.value) if accum is None else np.asarray(accum, dtype=np.float64).copy()
            param.grad = np.zeros_like(param.value)
            param.check_shapes(key)


def glorot_uniform(shape: Tuple[int, ...], fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """A LayerSpec bound to its weight/bias entries in a ParameterStore"""

    def __init__(self, name: str, spec: LayerSpec, store: ParameterStore,
                 rng: np.random.Generator):
        self.name = name
        self.spec = spec
        fan_in, fan_out = spec.fans
        self.weight = store.add(f"{name}.weight", glorot_uniform(spec.weight_shape, fan_in, fan_out, rng))
        self.bias = store.add(f"{name}.bias", np.zeros(spec.out_channels))

    def forward(self, x: Tensor):
        spec = self.spec
        if spec.kind is LayerKind.CONV1D:
            z, core = conv1d_forward(x, self.weight.value, self.bias.value, spec.stride, spec.padding)
        elif spec.kind is LayerKind.DECONV1D:
            z, core = deconv1d_forward(x, self.weight.value, self.bias.value, spec.stride, spec.padding)
        else:
            z, core = dense_forward(x, self.weight.value, self.bias.value)

        if spec.activation is Activation.LRELU:
            out, act = lrelu_forward(z, spec.slope)
        elif spec.activation is Activation.SIGMOID:
            out, act = sigmoid_forward(z)
        else:
            out, act = z, None
        return ensure_finite(out, f"{self.name} output"), (core, act)

    def backward(self, grad_out: Tensor, cache) -> Tensor:
        """Accumulate parameter gradients and return the input gradient"""
        if cache is None:
            raise MissingCacheError(f"{self.name}: backward without forward")
        core, act = cache
        spec = self.spec
        if spec.activation is Activation.LRELU:
            grad_z = lrelu_backward(grad_out, act)
        elif spec.activation is Activation.SIGMOID:
            grad_z = sigmoid_backward(grad_out, act)
        else:
            grad_z = grad_out

        if spec.kind is LayerKind.CONV1D:
            grad_x, grad_w, grad_b = conv1d_backward(grad_z, core)
        elif spec.kind is LayerKind.DECONV1D:
            grad_x, grad_w, grad_b = deconv1d_backward(grad_z, core)
        else:
            grad_x, grad_w, grad_b = dense_backward(grad_z, core)

        self.weight.grad += grad_w
        self.bias.grad += grad_b
        return grad_x


class Lift:
    """(N, L) -> (N, 1, L)"""

    name = "lift"

    def forward(self, x: Tensor):
        return x[:, None, :], x.shape

    def backward(self, grad_out: Tensor, cache) -> Tensor:
        return grad_out.reshape(cache)


class Flatten:
    """(N, C, L) -> (N, C * L)"""

    name = "flatten"

    def forward(self, x: Tensor):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad_out: Tensor, cache) -> Tensor:
        return grad_out.reshape(cache)


class Unflatten:
    """(N, C * L) -> (N, C, L)"""

    name = "unflatten"

    def __init__(self, channels: int, length: int):
        self.channels = channels
        self.length = length

    def forward(self, x: Tensor):
        if x.shape[1] != self.channels * self.length:
            raise ShapeMismatchError(
                f"Cannot unflatten width {x.shape[1]} into {self.channels} x {self.length}"
            )
        return x.reshape(x.shape[0], self.channels, self.length), x.shape

    def backward(self, grad_out: Tensor, cache) -> Tensor:
        return grad_out.reshape(cache)


class Squeeze:
    """(N, 1, L) -> (N, L)"""

    name = "squeeze"

    def forward(self, x: Tensor):
        if x.shape[1] != 1:
            raise ShapeMismatchError(f"Cannot squeeze {x.shape[1]} channels")
        return x[:, 0, :], x.shape

    def backward(self, grad_out: Tensor, cache) -> Tensor:
        return grad_out.reshape(cache)


class Crop:
    """Keep the first `length` positions of the last axis"""

    name = "crop"

    def __init__(self, length: int):
        self.length = length

    def forward(self, x: Tensor):
        if x.shape[-1] < self.length:
            raise ShapeMismatchError(f"Cannot crop length {x.shape[-1]} to {self.length}")
        return x[..., :self.length], x.shape

    def backward(self, grad_out: Tensor, cache) -> Tensor:
        grad = np.zeros(cache)
        grad[..., :self.length] = grad_out
        return grad


@dataclass
class Sequential:
    """Ordered steps sharing one ParameterStore"""

    steps: List = field(default_factory=list)
    store: ParameterStore = field(default_factory=ParameterStore)

    def forward(self, x: Tensor) -> Tuple[Tensor, List]:
        caches = []
        for step in self.steps:
            x, cache = step.forward(x)
            caches.append(cache)
        return x, caches

    def predict(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]

    def backward(self, grad_out: Tensor, caches: Optional[Sequence]) -> Tensor:
        if caches is None or len(caches) != len(self.steps):
            raise MissingCacheError("Network backward called without forward caches")
        grad = grad_out
        for step, cache in zip(reversed(self.steps), reversed(caches)):
            grad = step.backward(grad, cache)
        return grad

    @property
    def layers(self) -> List[Layer]:
        return [s for s in self.steps if isinstance(s, Layer)]


def rmsprop_step(store: ParameterStore, lr: float, decay: float = 0.9, eps: float = 1e-8):
    """
    acc <- decay * acc + (1 - decay) * g^2; value <- value - lr * g / sqrt(acc + eps);
    gradients are zeroed afterwards
    """
    for name, param in store.items():
        param.check_shapes(name)
        ensure_finite(param.grad, f"gradient of {name}")
        param.accum = decay * param.accum + (1.0 - decay) * param.grad ** 2
        param.value = param.value - lr * param.grad / np.sqrt(param.accum + eps)
        param.grad = np.zeros_like(param.value)


@dataclass
class GradientReport:
    """Max relative analytic-vs-numeric gradient error per layer"""

    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> List[str]:
        return [name for name, err in self.errors.items() if not err < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def gradient_check(network: Sequential, x: Tensor, tolerance: float = 1e-4,
                   epsilon: float = 1e-4, seed: int = 0,
                   max_entries: Optional[int] = None) -> GradientReport:
    """
    Compare backward() against central differences of a random projection of the output

    Args:
        network: Deterministic network
        x: Input batch
        tolerance: Pass threshold on the relative error
        epsilon: Finite-difference step; failing entries are re-measured at epsilon / 100
        seed: Seed for the output projection and entry sampling
        max_entries: Per-parameter cap on checked entries (None checks all)

    Returns:
        GradientReport keyed by layer name
    """
    rng = np.random.default_rng(seed)
    out, caches = network.forward(x)
    projection = rng.standard_normal(out.shape)

    def loss() -> float:
        value = float(np.sum(projection * network.predict(x)))
        if not np.isfinite(value):
            raise NonFiniteError("Gradient check loss is not finite")
        return value

    loss()
    network.store.zero_grad()
    network.backward(projection, caches)

    report = GradientReport(tolerance)
    for name, param in network.store.items():
        layer = name.rsplit(".", 1)[0]
        analytic = param.grad.copy()
        flat = param.value.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))

        worst = report.errors.get(layer, 0.0)
        for idx in indices:
            errors = []
            for step in (epsilon, epsilon / 100.0):
                original = flat[idx]
                flat[idx] = original + step
                plus = loss()
                flat[idx] = original - step
                minus = loss()
                flat[idx] = original
                numeric = (plus - minus) / (2.0 * step)
                errors.append(_relative_error(analytic.reshape(-1)[idx], numeric))
                if errors[-1] < tolerance:
                    break
            worst = max(worst, min(errors))
        report.errors[layer] = worst

    network.store.zero_grad()
    for layer, err in report.errors.items():
        logger.debug(f"Gradient check {layer}: max relative error {err:.3e}")
    return report
