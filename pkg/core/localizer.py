import numpy as np
from typing import Sequence, Tuple
from loguru import logger

from core.ensemble import Ensemble, mean_probabilities
from core.gradcore import softmax
from core.resnet import INFERENCE_BATCH, Mode
from models.config import ApplianceProfile, LocalizerConfig
from models.errors import DataValidationError, ShapeError
from models.series import LocalizationResult


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def normalize_cam(raw: np.ndarray) -> np.ndarray:
    """
    Divide a CAM by its maximum along the time axis.

    Negative values are kept. A map with no positive value becomes all zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    peak = raw.max(axis=-1, keepdims=True)
    positive = peak > 0
    if not positive.all():
        logger.debug(f"{int((~positive).sum())} CAM map(s) without positive evidence set to zero")
    return np.where(positive, raw / np.where(positive, peak, 1.0), 0.0)


def aggregate_cams(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Pointwise mean of equally long maps."""
    if len(maps) == 0:
        raise DataValidationError("cannot aggregate an empty list of CAMs")
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise ShapeError(f"CAMs must share one shape, got {sorted(shapes)}")
    return np.mean(np.stack([np.asarray(m, dtype=np.float64) for m in maps]), axis=0)


def attention_binarize(cam_ens: np.ndarray, window: np.ndarray, inclusive: bool = False) -> np.ndarray:
    """
    Status from the CAM weighted by the kW-scaled input.

    Sigmoid(cam * x) > 0.5 is evaluated as cam * x > 0 so zero products stay OFF;
    ``inclusive`` restores the >= 0.5 rule.
    """
    cam_ens = np.asarray(cam_ens, dtype=np.float64)
    window = np.asarray(window, dtype=np.float64)
    if cam_ens.shape != window.shape:
        raise ShapeError(f"CAM shape {cam_ens.shape} differs from window shape {window.shape}")
    product = cam_ens * window
    status = product >= 0 if inclusive else product > 0
    return status.astype(np.int8)


def binarize_without_attention(cam_ens: np.ndarray) -> np.ndarray:
    """Ablation: round the normalized ensemble CAM itself."""
    return (np.asarray(cam_ens) >= 0.5).astype(np.int8)


def estimate_power(status: np.ndarray, profile: ApplianceProfile, aggregate_w: np.ndarray) -> np.ndarray:
    """Constant-power estimate status * P_a, clipped to the aggregate (Watts)."""
    status = np.asarray(status)
    aggregate_w = np.asarray(aggregate_w, dtype=np.float64)
    if status.shape != aggregate_w.shape:
        raise ShapeError(f"status shape {status.shape} differs from aggregate shape {aggregate_w.shape}")
    if (aggregate_w < 0).any():
        raise DataValidationError("aggregate power must be non-negative")
    return np.minimum(status * profile.mean_power_w, aggregate_w)


class Localizer:
    """
    Detection-gated CAM localization with an ensemble.
    """

    def __init__(self, ensemble: Ensemble, config: LocalizerConfig = None):
        self.ensemble = ensemble
        self.config = config or LocalizerConfig()

    def localize_batch(self, windows: np.ndarray) -> LocalizationResult:
        """
        Args:
            windows: (N, L) kW-scaled aggregate windows

        Returns:
            per-window probabilities and per-timestamp status, CAM and attention
        """
        windows = self.ensemble._as_windows(windows).astype(np.float64)
        n_windows, length = windows.shape
        member_probs = np.zeros((len(self.ensemble), n_windows))
        member_cams = np.zeros((len(self.ensemble), n_windows, length))
        for index, model in enumerate(self.ensemble.models):
            for start in range(0, n_windows, INFERENCE_BATCH):
                chunk = windows[start:start + INFERENCE_BATCH]
                output = model.forward(chunk[:, None, :], Mode.EVAL)
                member_probs[index, start:start + INFERENCE_BATCH] = softmax(output.logits.astype(np.float64))[:, 1]
                member_cams[index, start:start + INFERENCE_BATCH] = normalize_cam(model.cam(output.feature_maps, class_id=1))

        probabilities = mean_probabilities(member_probs)
        detected = probabilities > self.ensemble.threshold
        cam = aggregate_cams(list(member_cams))
        cam[~detected] = 0.0
        attention = np.where(detected[:, None], sigmoid(cam * windows), 0.0)
        if self.config.attention:
            status = attention_binarize(cam, windows, inclusive=self.config.inclusive_threshold)
        else:
            status = binarize_without_attention(cam)
        status[~detected] = 0
        logger.info(f"Localized {n_windows} windows, {int(detected.sum())} detected")
        return LocalizationResult(
            probabilities=probabilities, detected=detected, status=status, cam=cam, attention=attention
        )

    def localize(self, window: np.ndarray) -> Tuple[np.ndarray, float]:
        result = self.localize_batch(np.asarray(window).reshape(1, -1))
        return result.status[0], float(result.probabilities[0])


def localize(ens: Ensemble, window: np.ndarray, config: LocalizerConfig = None) -> Tuple[np.ndarray, float]:
    return Localizer(ens, config).localize(window)
