"""
Small differentiable engine for 1-D convolutional classifiers.

Tensors are plain numpy arrays laid out as (batch, channel, time). Every layer
implements ``forward``/``backward`` with analytic gradients and keeps its own
parameters, so independent models never share mutable state.
"""

import numpy as np
from typing import Dict, List, Optional, Tuple
from loguru import logger

from models.errors import ConfigurationError, DataValidationError, ShapeError, StateError

BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator used by every initializer."""
    return np.random.default_rng(seed)


def as_tensor3(x: np.ndarray, dtype: Optional[np.dtype] = None) -> np.ndarray:
    """Check that ``x`` is a (B, C, L) array of finite values."""
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 3:
        raise ShapeError(f"expected a (batch, channel, time) tensor, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise DataValidationError("tensor contains NaN or Inf values")
    return x


def same_padding(kernel_size: int) -> Tuple[int, int]:
    """Left/right zero padding keeping the length; even kernels pad one more on the right."""
    left = (kernel_size - 1) // 2
    return left, kernel_size - 1 - left


class Parameter:
    """A trainable array and its accumulated gradient."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad.fill(0)

    @property
    def size(self) -> int:
        return int(self.value.size)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: Dict[str, Parameter] = {}
        self._cache = None

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a train-mode forward pass")
        return self._cache

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv1d(Layer):
    """
    Stride-1 cross-correlation with zero same-padding.

    out[b, o, t] = bias[o] + sum_{i, j} w[o, i, j] * x_padded[b, i, t + j]
    """
    kind = "conv1d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, dtype=np.float32, name: str = "conv"):
        super().__init__()
        if kernel_size < 1 or in_channels < 1 or out_channels < 1:
            raise ConfigurationError(
                f"conv1d needs positive sizes, got in={in_channels} out={out_channels} k={kernel_size}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        bound = 1.0 / np.sqrt(in_channels * kernel_size)
        weight = rng.uniform(-bound, bound, (out_channels, in_channels, kernel_size)).astype(dtype)
        bias = rng.uniform(-bound, bound, (out_channels,)).astype(dtype)
        self.params = {"weight": Parameter(f"{name}.weight", weight), "bias": Parameter(f"{name}.bias", bias)}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv1d expects {self.in_channels} input channels, got shape {x.shape}")
        length = x.shape[2]
        if self.kernel_size > 2 * length + 1:
            raise ConfigurationError(
                f"kernel size {self.kernel_size} is too large for series of length {length}"
            )
        left, right = same_padding(self.kernel_size)
        x_padded = np.pad(x, ((0, 0), (0, 0), (left, right)))
        weight = self.params["weight"].value
        out = np.zeros((x.shape[0], self.out_channels, length), dtype=np.result_type(x, weight))
        for j in range(self.kernel_size):
            out += np.matmul(weight[:, :, j], x_padded[:, :, j:j + length])
        out += self.params["bias"].value[None, :, None]
        if train:
            self._cache = x_padded
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x_padded = self._cached()
        length = grad_out.shape[2]
        if grad_out.shape[0] != x_padded.shape[0] or grad_out.shape[1] != self.out_channels:
            raise ShapeError(f"conv1d grad has shape {grad_out.shape}, forward output had other dims")
        weight = self.params["weight"]
        left, _ = same_padding(self.kernel_size)
        grad_padded = np.zeros_like(x_padded)
        for j in range(self.kernel_size):
            window = x_padded[:, :, j:j + length]
            weight.grad[:, :, j] += np.tensordot(grad_out, window, axes=([0, 2], [0, 2]))
            grad_padded[:, :, j:j + length] += np.matmul(weight.value[:, :, j].T, grad_out)
        self.params["bias"].grad += grad_out.sum(axis=(0, 2))
        return grad_padded[:, :, left:left + length]


class BatchNorm1d(Layer):
    """
    Per-channel normalization over (batch, time).

    Running statistics start at (0, 1) and are tracked from the first
    train-mode pass; eval mode refuses to run before that.
    """
    kind = "batchnorm"

    def __init__(self, channels: int, dtype=np.float32, momentum: float = BATCHNORM_MOMENTUM,
                 eps: float = BATCHNORM_EPS, name: str = "bn"):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params = {
            "gamma": Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype)),
            "beta": Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype)),
        }
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.num_batches_tracked = 0

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got shape {x.shape}")
        gamma = self.params["gamma"].value[None, :, None]
        beta = self.params["beta"].value[None, :, None]
        if not train:
            if self.num_batches_tracked == 0:
                raise StateError("batchnorm running statistics are not initialized; run a train-mode pass first")
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            return (x - self.running_mean[None, :, None]) * inv_std[None, :, None] * gamma + beta

        count = x.shape[0] * x.shape[2]
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean[None, :, None]) * inv_std[None, :, None]
        unbiased = var * count / (count - 1) if count > 1 else var
        self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * unbiased).astype(self.running_var.dtype)
        self.num_batches_tracked += 1
        self._cache = (x_hat, inv_std)
        return x_hat * gamma + beta

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x_hat, inv_std = self._cached()
        gamma = self.params["gamma"]
        self.params["beta"].grad += grad_out.sum(axis=(0, 2))
        gamma.grad += (grad_out * x_hat).sum(axis=(0, 2))
        count = grad_out.shape[0] * grad_out.shape[2]
        grad_hat = grad_out * gamma.value[None, :, None]
        sum_grad = grad_hat.sum(axis=(0, 2), keepdims=True)
        sum_grad_xhat = (grad_hat * x_hat).sum(axis=(0, 2), keepdims=True)
        return (inv_std[None, :, None] / count) * (count * grad_hat - sum_grad - x_hat * sum_grad_xhat)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        mask = x > 0
        if train:
            self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return np.where(self._cached(), grad_out, 0).astype(grad_out.dtype, copy=False)


class GlobalAveragePool(Layer):
    """Mean over the temporal axis: (B, C, L) -> (B, C)."""
    kind = "gap"

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 3:
            raise ShapeError(f"global average pooling expects (B, C, L), got shape {x.shape}")
        if x.shape[2] == 0:
            raise DataValidationError("global average pooling over an empty series")
        if train:
            self._cache = x.shape[2]
        return x.mean(axis=2)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        length = self._cached()
        return np.repeat(grad_out[:, :, None] / length, length, axis=2)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "head"):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        bound = 1.0 / np.sqrt(in_features)
        self.params = {
            "weight": Parameter(f"{name}.weight", rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype)),
            "bias": Parameter(f"{name}.bias", rng.uniform(-bound, bound, (out_features,)).astype(dtype)),
        }

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects (B, {self.in_features}) features, got shape {x.shape}")
        if train:
            self._cache = x
        return x @ self.params["weight"].value.T + self.params["bias"].value

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x = self._cached()
        self.params["weight"].grad += grad_out.T @ x
        self.params["bias"].grad += grad_out.sum(axis=0)
        return grad_out @ self.params["weight"].value


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


class SoftmaxCrossEntropy:
    """Mean negative log-likelihood of integer labels under a softmax."""

    def __init__(self):
        self._cache = None

    def forward(self, logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, float]:
        labels = np.asarray(labels)
        if labels.shape != (logits.shape[0],):
            raise ShapeError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
        if not np.isin(labels, np.arange(logits.shape[1])).all():
            raise DataValidationError(f"labels must be class ids in [0, {logits.shape[1] - 1}]")
        labels = labels.astype(np.int64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        probs = np.exp(log_probs)
        loss = float(-log_probs[np.arange(len(labels)), labels].mean())
        self._cache = (probs, labels)
        return probs, loss

    def backward(self) -> np.ndarray:
        if self._cache is None:
            raise StateError("cross-entropy backward called before forward")
        probs, labels = self._cache
        grad = probs.copy()
        grad[np.arange(len(labels)), labels] -= 1
        return grad / len(labels)


def linear_softmax_xent(features: np.ndarray, head: Linear, labels: np.ndarray,
                        criterion: Optional[SoftmaxCrossEntropy] = None,
                        train: bool = False) -> Tuple[np.ndarray, float]:
    """
    Classifier head and loss in one call: probabilities and mean cross-entropy of (B, C) features.

    With ``train`` the head and ``criterion`` keep what ``head.backward(criterion.backward())`` needs.
    """
    criterion = criterion or SoftmaxCrossEntropy()
    return criterion.forward(head.forward(features, train), labels)


class Adam:
    """Adam optimizer; gradients are zeroed after every step."""

    def __init__(self, params: List[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.value) for p in params]
        self._v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.step_count += 1
        correction1 = 1 - self.beta1 ** self.step_count
        correction2 = 1 - self.beta2 ** self.step_count
        for param, m, v in zip(self.params, self._m, self._v):
            grad = param.grad
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            param.value -= update.astype(param.value.dtype, copy=False)
            param.zero_grad()

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()


def check_finite(name: str, array: np.ndarray) -> None:
    if not np.isfinite(array).all():
        logger.error(f"Non-finite values produced by {name}")
        raise StateError(f"{name} produced NaN or Inf values")
