# segmentation/nn.py
"""
Differentiable compute core for 2D and 3D networks.

Arrays are (batch, channels, *spatial). Convolutions follow the
cross-correlation convention (no kernel flip). Every reduction runs in a
fixed order, so forward and backward passes are bit-deterministic.
"""

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ContractError, DomainError, OptimizerError, ShapeError, StateError

logger = logging.getLogger(__name__)


class Tensor:
    """A value array paired with an accumulated gradient array."""

    def __init__(self, values, grad=None):
        self.values = np.asarray(values)
        if grad is not None and np.shape(grad) != self.values.shape:
            raise ShapeError(f"Gradient shape {np.shape(grad)} does not match values {self.values.shape}.", field="grad")
        self.grad = grad

    @property
    def dims(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad):
        if grad.shape != self.values.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match values {self.values.shape}.", field="grad")
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def __repr__(self):
        return f"Tensor(dims={self.dims}, dtype={self.values.dtype}, grad={'yes' if self.grad is not None else 'no'})"


# --- Layer descriptions ---

LAYER_KINDS = ("conv", "relu", "sigmoid", "dropout", "maxpool", "upsample", "tconv", "concat", "batchnorm")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = ()
    stride: int = 1
    same_padding: bool = True
    rate: float = 0.0
    window: int = 2
    factor: int = 2
    source: str = ""
    epsilon: float = 1e-5
    momentum: float = 0.1
    affine: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractError(f"Unknown layer kind {self.kind!r}.", field="kind")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))

    def to_dict(self):
        data = asdict(self)
        data["kernel"] = list(self.kernel)
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**{**data, "kernel": tuple(data.get("kernel", ()))})


# --- Convolutions ---

def _same_pads(kernel):
    return [((k - 1) // 2, k - 1 - (k - 1) // 2) for k in kernel]


def _strided(offset, count, stride):
    return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, count))


@dataclass
class ConvCache:
    padded: np.ndarray
    weight: np.ndarray
    stride: int
    pads: list
    out_dims: tuple


def conv_forward(x, w, b, stride=1, same_padding=True):
    """x (N, C, *S), w (F, C, *K), b (F,) -> ((N, F, *O), cache)."""
    nd = x.ndim - 2
    if nd not in (2, 3) or w.ndim != nd + 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"Convolution shapes disagree: input {x.shape}, weight {w.shape}, bias {b.shape}.", field="shape")
    if stride < 1:
        raise ShapeError(f"Stride must be >= 1, got {stride}.", field="stride")
    kernel = w.shape[2:]
    pads = _same_pads(kernel) if same_padding else [(0, 0)] * nd
    padded = np.pad(x, [(0, 0), (0, 0)] + pads)
    out_dims = tuple((padded.shape[2 + a] - kernel[a]) // stride + 1 for a in range(nd))
    if min(out_dims) < 1:
        raise ShapeError(f"Kernel {kernel} does not fit input {x.shape}.", field="shape")

    out = np.zeros((x.shape[0], w.shape[0]) + out_dims, dtype=np.result_type(x, w))
    for offset in itertools.product(*(range(k) for k in kernel)):
        window = padded[(slice(None), slice(None)) + _strided(offset, out_dims, stride)]
        out += np.moveaxis(np.tensordot(window, w[(slice(None), slice(None)) + offset], axes=([1], [1])), -1, 1)
    out += b.reshape((1, -1) + (1,) * nd)
    return out, ConvCache(padded, w, stride, pads, out_dims)


def conv_backward(grad_out, cache):
    """-> (grad_x, grad_w, grad_b) for the forward pass recorded in `cache`."""
    if cache is None:
        raise StateError("conv_backward called without a forward cache.", field="cache")
    padded, w, stride = cache.padded, cache.weight, cache.stride
    if grad_out.shape[2:] != cache.out_dims or grad_out.shape[1] != w.shape[0]:
        raise ShapeError(f"Gradient {grad_out.shape} does not match forward output dims {cache.out_dims}.", field="shape")
    nd = w.ndim - 2
    spatial = list(range(2, 2 + nd))
    grad_padded = np.zeros_like(padded)
    grad_w = np.zeros_like(w)
    for offset in itertools.product(*(range(k) for k in w.shape[2:])):
        region = (slice(None), slice(None)) + _strided(offset, cache.out_dims, stride)
        tap = (slice(None), slice(None)) + offset
        grad_w[tap] = np.tensordot(grad_out, padded[region], axes=([0] + spatial, [0] + spatial))
        grad_padded[region] += np.moveaxis(np.tensordot(grad_out, w[tap], axes=([1], [0])), -1, 1)
    grad_b = grad_out.sum(axis=tuple([0] + spatial))
    interior = (slice(None), slice(None)) + tuple(slice(lo, grad_padded.shape[2 + a] - hi) for a, (lo, hi) in enumerate(cache.pads))
    return grad_padded[interior], grad_w, grad_b


def tconv_forward(x, w, b, stride=2):
    """Transposed convolution: x (N, C, *I), w (C, F, *K) -> (N, F, *((I - 1) * stride + K))."""
    nd = x.ndim - 2
    if nd not in (2, 3) or w.ndim != nd + 2 or w.shape[0] != x.shape[1] or b.shape != (w.shape[1],):
        raise ShapeError(f"Transposed convolution shapes disagree: input {x.shape}, weight {w.shape}.", field="shape")
    kernel = w.shape[2:]
    in_dims = x.shape[2:]
    out_dims = tuple((i - 1) * stride + k for i, k in zip(in_dims, kernel))
    out = np.zeros((x.shape[0], w.shape[1]) + out_dims, dtype=np.result_type(x, w))
    for offset in itertools.product(*(range(k) for k in kernel)):
        region = (slice(None), slice(None)) + _strided(offset, in_dims, stride)
        out[region] += np.moveaxis(np.tensordot(x, w[(slice(None), slice(None)) + offset], axes=([1], [0])), -1, 1)
    out += b.reshape((1, -1) + (1,) * nd)
    return out, (x, w, stride)


def tconv_backward(grad_out, cache):
    if cache is None:
        raise StateError("tconv_backward called without a forward cache.", field="cache")
    x, w, stride = cache
    nd = x.ndim - 2
    spatial = list(range(2, 2 + nd))
    grad_x = np.zeros_like(x)
    grad_w = np.zeros_like(w)
    for offset in itertools.product(*(range(k) for k in w.shape[2:])):
        region = (slice(None), slice(None)) + _strided(offset, x.shape[2:], stride)
        tap = (slice(None), slice(None)) + offset
        grad_x += np.moveaxis(np.tensordot(grad_out[region], w[tap], axes=([1], [1])), -1, 1)
        grad_w[tap] = np.tensordot(x, grad_out[region], axes=([0] + spatial, [0] + spatial))
    return grad_x, grad_w, grad_out.sum(axis=tuple([0] + spatial))


# --- Pooling and resampling ---

def _window_view(shape, window):
    """Reshape + permutation that puts each pooling window on the trailing axes."""
    nd = len(shape) - 2
    split = list(shape[:2])
    for size in shape[2:]:
        split += [size // window, window]
    order = [0, 1] + [2 + 2 * a for a in range(nd)] + [3 + 2 * a for a in range(nd)]
    return split, order


def maxpool_forward(x, window=2):
    nd = x.ndim - 2
    if any(size % window for size in x.shape[2:]):
        raise ContractError(f"Spatial dims {x.shape[2:]} are not divisible by pool window {window}; pad upstream.", field="dims")
    split, order = _window_view(x.shape, window)
    blocks = x.reshape(split).transpose(order)
    pooled_dims = blocks.shape[: 2 + nd]
    flat = blocks.reshape(pooled_dims + (window ** nd,))
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., np.newaxis], axis=-1)[..., 0]
    return out, (x.shape, argmax, window)


def maxpool_backward(grad_out, cache):
    if cache is None:
        raise StateError("maxpool_backward called without a forward cache.", field="cache")
    shape, argmax, window = cache
    nd = len(shape) - 2
    flat = np.zeros(argmax.shape + (window ** nd,), dtype=grad_out.dtype)
    np.put_along_axis(flat, argmax[..., np.newaxis], grad_out[..., np.newaxis], axis=-1)
    split, order = _window_view(shape, window)
    blocks = flat.reshape(argmax.shape + (window,) * nd)
    return blocks.transpose(np.argsort(order)).reshape(shape)


def upsample_forward(x, factor=2):
    out = x
    for axis in range(2, x.ndim):
        out = np.repeat(out, factor, axis=axis)
    return out


def upsample_backward(grad_out, factor=2):
    nd = grad_out.ndim - 2
    split, order = _window_view(grad_out.shape, factor)
    blocks = grad_out.reshape(split).transpose(order)
    return blocks.sum(axis=tuple(range(2 + nd, 2 + 2 * nd)))


# --- Activations ---

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- Loss ---

def dice_loss(P, T, S=1.0):
    """
    Smoothed Dice energy E = (2 * sum(P * T) + S) / (sum(T) + sum(P) + S)
    and its gradient dE/dP. Training minimizes 1 - E.
    """
    P = np.asarray(P)
    T = np.asarray(T)
    if P.shape != T.shape:
        raise ShapeError(f"Prediction {P.shape} and target {T.shape} differ.", field="shape")
    T = T.astype(P.dtype if np.issubdtype(P.dtype, np.floating) else np.float64)
    numerator = 2.0 * np.sum(P * T) + S
    denominator = np.sum(T) + np.sum(P) + S
    energy = numerator / denominator
    grad = (2.0 * T * denominator - numerator) / (denominator * denominator)
    return float(energy), grad.astype(T.dtype)


# --- Initialization ---

def he_init(shape, fan_in, seed, dtype=np.float32):
    if fan_in <= 0:
        raise DomainError(f"fan_in must be positive, got {fan_in}.", field="fan_in")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)


# --- Optimizer ---

@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """Bias-corrected Adam update; returns the new parameter arrays and advances `state`."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients.", field="grads")
    for index, grad in enumerate(grads):
        if grad.shape != params[index].shape:
            raise ShapeError(f"Gradient {index} shape {grad.shape} does not match parameter {params[index].shape}.", field="grads")
        if not np.all(np.isfinite(grad)):
            raise OptimizerError(f"Non-finite gradient for parameter {index}.", field="grads", parameter=index)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    updated = []
    for index, (param, grad) in enumerate(zip(params, grads)):
        dtype = param.dtype
        state.m[index] = (state.beta1 * state.m[index] + (1.0 - state.beta1) * grad).astype(dtype)
        state.v[index] = (state.beta2 * state.v[index] + (1.0 - state.beta2) * grad * grad).astype(dtype)
        m_hat = state.m[index] / dtype.type(correction1)
        v_hat = state.v[index] / dtype.type(correction2)
        step = dtype.type(state.lr) * m_hat / (np.sqrt(v_hat) + dtype.type(state.eps))
        updated.append((param - step).astype(dtype))
    return updated, state


# --- Layers ---

class Layer:
    """A layer with its forward cache; parameters are Tensors."""

    def __init__(self, spec):
        self.spec = spec
        self.cache = None

    @property
    def name(self):
        return self.spec.name

    def params(self):
        return []

    def buffers(self):
        return []

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _require_cache(self):
        if self.cache is None:
            raise StateError(f"Layer {self.name!r} has no forward cache; call forward first.", field=self.name)
        return self.cache

    def astype(self, dtype):
        for tensor in self.params():
            tensor.values = tensor.values.astype(dtype)
            tensor.grad = None


class Conv(Layer):
    def __init__(self, spec, nd, seed):
        super().__init__(spec)
        kernel = spec.kernel or (3,) * nd
        fan_in = spec.in_channels * int(np.prod(kernel))
        self.weight = Tensor(he_init((spec.out_channels, spec.in_channels) + kernel, fan_in, seed))
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=np.float32))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False, rng=None):
        out, self.cache = conv_forward(x, self.weight.values, self.bias.values, self.spec.stride, self.spec.same_padding)
        return out

    def backward(self, grad):
        grad_x, grad_w, grad_b = conv_backward(grad, self._require_cache())
        self.weight.accumulate(grad_w)
        self.bias.accumulate(grad_b)
        return grad_x


class TransposedConv(Layer):
    def __init__(self, spec, nd, seed):
        super().__init__(spec)
        kernel = spec.kernel or (2,) * nd
        fan_in = spec.in_channels * int(np.prod(kernel))
        self.weight = Tensor(he_init((spec.in_channels, spec.out_channels) + kernel, fan_in, seed))
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=np.float32))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False, rng=None):
        out, self.cache = tconv_forward(x, self.weight.values, self.bias.values, self.spec.stride)
        return out

    def backward(self, grad):
        grad_x, grad_w, grad_b = tconv_backward(grad, self._require_cache())
        self.weight.accumulate(grad_w)
        self.bias.accumulate(grad_b)
        return grad_x


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self.cache = x > 0
        return np.where(self.cache, x, 0).astype(x.dtype)

    def backward(self, grad):
        return np.where(self._require_cache(), grad, 0).astype(grad.dtype)


class Sigmoid(Layer):
    def forward(self, x, train=False, rng=None):
        self.cache = sigmoid(x)
        return self.cache

    def backward(self, grad):
        out = self._require_cache()
        return grad * out * (1 - out)


class Dropout(Layer):
    """Inverted dropout with a per-voxel mask; identity at inference."""

    def __init__(self, spec):
        super().__init__(spec)
        self.frozen_mask = None

    def forward(self, x, train=False, rng=None):
        rate = self.spec.rate
        if not train or rate == 0:
            self.cache = None
            return x
        if self.frozen_mask is not None:
            mask = self.frozen_mask
        else:
            if rng is None:
                raise StateError(f"Dropout layer {self.name!r} needs a random generator in train mode.", field=self.name)
            mask = rng.random(x.shape) >= rate
        self.cache = (mask / (1.0 - rate)).astype(x.dtype)
        return x * self.cache

    def backward(self, grad):
        if self.cache is None:
            return grad
        return grad * self.cache


class MaxPool(Layer):
    def forward(self, x, train=False, rng=None):
        out, self.cache = maxpool_forward(x, self.spec.window)
        return out

    def backward(self, grad):
        return maxpool_backward(grad, self._require_cache())


class Upsample(Layer):
    def forward(self, x, train=False, rng=None):
        self.cache = True
        return upsample_forward(x, self.spec.factor)

    def backward(self, grad):
        self._require_cache()
        return upsample_backward(grad, self.spec.factor)


class BatchNorm(Layer):
    """Per-channel normalization over batch and spatial axes, with running statistics."""

    def __init__(self, spec):
        super().__init__(spec)
        channels = spec.in_channels
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        if spec.affine:
            self.gamma = Tensor(np.ones(channels, dtype=np.float32))
            self.beta = Tensor(np.zeros(channels, dtype=np.float32))

    def params(self):
        return [self.gamma, self.beta] if self.spec.affine else []

    def buffers(self):
        return [self.running_mean, self.running_var]

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def forward(self, x, train=False, rng=None):
        axes = tuple([0] + list(range(2, x.ndim)))
        shape = (1, -1) + (1,) * (x.ndim - 2)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            momentum = self.spec.momentum
            self.running_mean[...] = (1 - momentum) * self.running_mean + momentum * mean
            self.running_var[...] = (1 - momentum) * self.running_var + momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = (1.0 / np.sqrt(var + self.spec.epsilon)).astype(x.dtype)
        normalized = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        self.cache = (normalized, inv_std, train, axes, shape)
        if self.spec.affine:
            return normalized * self.gamma.values.reshape(shape) + self.beta.values.reshape(shape)
        return normalized

    def backward(self, grad):
        normalized, inv_std, train, axes, shape = self._require_cache()
        if self.spec.affine:
            self.gamma.accumulate(np.sum(grad * normalized, axis=axes))
            self.beta.accumulate(np.sum(grad, axis=axes))
            grad = grad * self.gamma.values.reshape(shape)
        if not train:
            return grad * inv_std.reshape(shape)
        mean_grad = grad.mean(axis=axes).reshape(shape)
        mean_proj = (grad * normalized).mean(axis=axes).reshape(shape)
        return (grad - mean_grad - normalized * mean_proj) * inv_std.reshape(shape)


def build_layer(spec, nd, seed):
    if spec.kind == "conv":
        return Conv(spec, nd, seed)
    if spec.kind == "tconv":
        return TransposedConv(spec, nd, seed)
    return {
        "relu": ReLU,
        "sigmoid": Sigmoid,
        "dropout": Dropout,
        "maxpool": MaxPool,
        "upsample": Upsample,
        "batchnorm": BatchNorm,
        "concat": Layer,
    }[spec.kind](spec)


# --- Finite differences ---

def numerical_gradient(f, x, h=1e-5):
    """Central differences of scalar f at array x (perturbed in place, restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + h
        plus = f()
        flat[index] = original - h
        minus = f()
        flat[index] = original
        grad.reshape(-1)[index] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_check(layer, x, train=False, h=1e-5, seed=0):
    """
    Compare a layer's backward pass against central differences of
    sum(forward(x) * R) for a fixed random R. Returns {name: relative error}
    for the input and every parameter. Works in float64.
    """
    x = np.asarray(x, dtype=np.float64).copy()
    layer.astype(np.float64)
    rng = np.random.default_rng(seed)
    projection = rng.standard_normal(layer.forward(x, train=train, rng=np.random.default_rng(seed)).shape)
    if isinstance(layer, Dropout) and train:
        layer.frozen_mask = np.random.default_rng(seed).random(x.shape) >= layer.spec.rate

    def objective():
        return float(np.sum(layer.forward(x, train=train, rng=np.random.default_rng(seed)) * projection))

    for tensor in layer.params():
        tensor.zero_grad()
    layer.forward(x, train=train, rng=np.random.default_rng(seed))
    grad_x = layer.backward(projection)
    errors = {"input": relative_error(grad_x, numerical_gradient(objective, x, h))}
    for index, tensor in enumerate(layer.params()):
        errors[f"param{index}"] = relative_error(tensor.grad, numerical_gradient(objective, tensor.values, h))
    return errors
