import numpy as np
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple
from collections import OrderedDict
from loguru import logger
from pydantic import BaseModel, Field

from core.gradcore import (
    Adam,
    BatchNorm1d,
    Conv1d,
    GlobalAveragePool,
    Linear,
    Parameter,
    ReLU,
    SoftmaxCrossEntropy,
    as_tensor3,
    check_finite,
    linear_softmax_xent,
    make_rng,
    softmax,
)
from models.config import ResNetSpec
from models.errors import DataValidationError, ShapeError


INFERENCE_BATCH = 256


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class TrainingMetadata(BaseModel):
    seed: int = Field(..., description="Seed the model was initialized with")
    epochs_run: int = Field(0, description="Epochs completed")
    best_val_loss: Optional[float] = Field(None, description="Best early-stopping loss")
    trial: int = Field(0, description="Trial index within its kernel size")


class ForwardPass(NamedTuple):
    probabilities: np.ndarray
    feature_maps: np.ndarray
    logits: np.ndarray


class ConvBlock:
    """Convolution -> batch normalization -> optional ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, dtype, name: str, activate: bool = True):
        self.conv = Conv1d(in_channels, out_channels, kernel_size, rng, dtype, name=f"{name}.conv")
        self.bn = BatchNorm1d(out_channels, dtype, name=f"{name}.bn")
        self.relu = ReLU() if activate else None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        out = self.bn.forward(self.conv.forward(x, train), train)
        return self.relu.forward(out, train) if self.relu else out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self.relu:
            grad = self.relu.backward(grad)
        return self.conv.backward(self.bn.backward(grad))

    def layers(self):
        return [self.conv, self.bn]


class ResidualBlock:
    """
    Three convolutional blocks plus a shortcut, followed by ReLU.

    The shortcut is the identity when channels match, else a 1x1 convolution
    with batch normalization.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, dtype, name: str):
        self.convs = [
            ConvBlock(in_channels, out_channels, kernel_size, rng, dtype, f"{name}.block0"),
            ConvBlock(out_channels, out_channels, kernel_size, rng, dtype, f"{name}.block1"),
            ConvBlock(out_channels, out_channels, kernel_size, rng, dtype, f"{name}.block2", activate=False),
        ]
        self.shortcut: Optional[ConvBlock] = None
        if in_channels != out_channels:
            self.shortcut = ConvBlock(in_channels, out_channels, 1, rng, dtype, f"{name}.shortcut", activate=False)
        self.relu = ReLU()

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        out = x
        for block in self.convs:
            out = block.forward(out, train)
        residual = self.shortcut.forward(x, train) if self.shortcut else x
        return self.relu.forward(out + residual, train)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad = self.relu.backward(grad)
        grad_main = grad
        for block in reversed(self.convs):
            grad_main = block.backward(grad_main)
        grad_short = self.shortcut.backward(grad) if self.shortcut else grad
        return grad_main + grad_short

    def layers(self):
        layers = [layer for block in self.convs for layer in block.layers()]
        if self.shortcut:
            layers.extend(self.shortcut.layers())
        return layers


class ResNetModel:
    """
    Fully convolutional binary classifier: 3 residual blocks, global average
    pooling, linear head and softmax. Exposes last feature maps for CAM.
    """

    def __init__(self, spec: ResNetSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.metadata = TrainingMetadata(seed=seed)
        rng = make_rng(seed)
        self.blocks: List[ResidualBlock] = []
        in_channels = spec.input_channels
        for index, filters in enumerate(spec.filters):
            self.blocks.append(ResidualBlock(in_channels, filters, spec.kernel_size, rng, self.dtype, f"res{index}"))
            in_channels = filters
        self.gap = GlobalAveragePool()
        self.head = Linear(in_channels, spec.num_classes, rng, self.dtype, name="head")
        self.criterion = SoftmaxCrossEntropy()

    @property
    def kernel_size(self) -> int:
        return self.spec.kernel_size

    def layers(self):
        return [layer for block in self.blocks for layer in block.layers()] + [self.head]

    def parameters(self) -> List[Parameter]:
        return [param for layer in self.layers() for param in layer.parameters()]

    @property
    def param_count(self) -> int:
        return sum(param.size for param in self.parameters())

    def forward(self, batch: np.ndarray, mode: Mode = Mode.EVAL) -> ForwardPass:
        """
        Args:
            batch: (B, 1, L) input windows
            mode: train caches activations and updates batch-norm statistics

        Returns:
            class probabilities (B, 2), last feature maps (B, 128, L) and logits (B, 2)
        """
        train = Mode(mode) == Mode.TRAIN
        feature_maps, pooled = self._features(batch, train)
        logits = self.head.forward(pooled, train)
        return ForwardPass(softmax(logits), feature_maps, logits)

    def _features(self, batch: np.ndarray, train: bool) -> Tuple[np.ndarray, np.ndarray]:
        x = as_tensor3(batch, self.dtype)
        if x.shape[1] != self.spec.input_channels:
            raise ShapeError(f"expected {self.spec.input_channels} input channel, got shape {x.shape}")
        if x.shape[2] < 1:
            raise ShapeError("input series must hold at least one timestamp")
        for block in self.blocks:
            x = block.forward(x, train)
        return x, self.gap.forward(x, train)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        grad = self.gap.backward(self.head.backward(grad_logits))
        for block in reversed(self.blocks):
            grad = block.backward(grad)
        return grad

    def cam(self, feature_maps: np.ndarray, class_id: int = 1) -> np.ndarray:
        """
        Class activation map: classifier-weighted sum of the last feature maps (bias excluded).

        Returns:
            (B, L) relevance per timestamp
        """
        if class_id not in (0, 1):
            raise DataValidationError(f"class_id must be 0 or 1, got {class_id}")
        weights = self.head.params["weight"].value
        if feature_maps.ndim != 3 or feature_maps.shape[1] != weights.shape[1]:
            raise ShapeError(
                f"feature maps of shape {feature_maps.shape} do not match classifier weights {weights.shape}"
            )
        return np.einsum("k,bkl->bl", weights[class_id], feature_maps)

    def train_step(self, batch: np.ndarray, labels: np.ndarray, optimizer: Adam) -> float:
        _, pooled = self._features(batch, train=True)
        _, loss = linear_softmax_xent(pooled, self.head, labels, self.criterion, train=True)
        check_finite(f"k={self.kernel_size} training loss", np.asarray(loss))
        self.backward(self.criterion.backward())
        optimizer.step()
        return loss

    def loss(self, windows: np.ndarray, labels: np.ndarray, batch_size: int = INFERENCE_BATCH) -> float:
        """Mean eval-mode cross-entropy over (N, L) windows."""
        total = 0.0
        criterion = SoftmaxCrossEntropy()
        for start in range(0, len(windows), batch_size):
            chunk = windows[start:start + batch_size, None, :]
            output = self.forward(chunk, Mode.EVAL)
            _, chunk_loss = criterion.forward(output.logits.astype(np.float64), labels[start:start + batch_size])
            total += chunk_loss * len(chunk)
        return total / max(len(windows), 1)

    def predict_proba(self, windows: np.ndarray, batch_size: int = INFERENCE_BATCH) -> np.ndarray:
        """Class-1 probability of (N, L) windows in float64."""
        probs = [
            self.forward(windows[start:start + batch_size, None, :], Mode.EVAL).logits.astype(np.float64)
            for start in range(0, len(windows), batch_size)
        ]
        if not probs:
            return np.zeros(0)
        return softmax(np.concatenate(probs))[:, 1]

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters and running statistics in serialization order."""
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for layer in self.layers():
            for param in layer.parameters():
                state[param.name] = param.value
            if isinstance(layer, BatchNorm1d):
                prefix = layer.params["gamma"].name.rsplit(".", 1)[0]
                state[f"{prefix}.running_mean"] = layer.running_mean
                state[f"{prefix}.running_var"] = layer.running_var
        return state

    def batches_tracked(self) -> Dict[str, int]:
        return {
            layer.params["gamma"].name.rsplit(".", 1)[0]: layer.num_batches_tracked
            for layer in self.layers() if isinstance(layer, BatchNorm1d)
        }

    def load_state_arrays(self, state: Dict[str, np.ndarray], tracked: Optional[Dict[str, int]] = None) -> None:
        expected = self.state_arrays()
        missing = set(expected) - set(state)
        if missing:
            raise ShapeError(f"state is missing arrays: {sorted(missing)[:3]}")
        for layer in self.layers():
            for param in layer.parameters():
                param.value = self._checked(param.name, state[param.name], param.value.shape)
                param.grad = np.zeros_like(param.value)
            if isinstance(layer, BatchNorm1d):
                prefix = layer.params["gamma"].name.rsplit(".", 1)[0]
                layer.running_mean = self._checked(prefix, state[f"{prefix}.running_mean"], (layer.channels,))
                layer.running_var = self._checked(prefix, state[f"{prefix}.running_var"], (layer.channels,))
                if tracked is not None:
                    layer.num_batches_tracked = int(tracked.get(prefix, 0))

    def _checked(self, name: str, array: np.ndarray, shape) -> np.ndarray:
        if tuple(array.shape) != tuple(shape):
            raise ShapeError(f"{name}: stored shape {array.shape} differs from model shape {shape}")
        return np.array(array, dtype=self.dtype, copy=True)

    def snapshot(self):
        return {name: array.copy() for name, array in self.state_arrays().items()}, self.batches_tracked()


def build(spec: ResNetSpec, seed: int, dtype=np.float32) -> ResNetModel:
    """Initialize a ResNet for ``spec`` from ``seed``."""
    model = ResNetModel(spec, seed, dtype)
    logger.debug(f"Built ResNet k={spec.kernel_size} seed={seed} with {model.param_count} parameters")
    return model


def expected_param_count(kernel_size: int) -> int:
    """Trainable parameters of the fixed architecture for one kernel size."""
    return 98368 * kernel_size + 11970
