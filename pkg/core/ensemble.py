import asyncio
import math
import time
import numpy as np
from typing import List, Sequence, Tuple
from loguru import logger
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from core.gradcore import Adam
from core.resnet import ResNetModel, build
from helpers.seeding import candidate_seed
from models.config import ResNetSpec, TrainConfig
from models.errors import DataValidationError, ShapeError
from models.report import CandidateResult
from models.series import WindowDataset


class Ensemble:
    """
    Selected ResNets of one appliance, sorted by ascending validation loss.
    """

    def __init__(self, models: List[ResNetModel], validation_losses: List[float], appliance: str,
                 window_length: int, threshold: float = 0.5):
        if not models:
            raise DataValidationError("an ensemble needs at least one model")
        if len(models) != len(validation_losses):
            raise DataValidationError("one validation loss is required per model")
        order = sorted(range(len(models)), key=lambda i: validation_losses[i])
        self.models = [models[i] for i in order]
        self.validation_losses = [float(validation_losses[i]) for i in order]
        self.appliance = appliance
        self.window_length = window_length
        self.threshold = threshold

    def __len__(self) -> int:
        return len(self.models)

    def _as_windows(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows)
        if windows.ndim == 3:
            if windows.shape[1] != 1:
                raise ShapeError(f"windows must hold a single channel, got shape {windows.shape}")
            windows = windows[:, 0, :]
        if windows.ndim == 1:
            windows = windows[None, :]
        if windows.shape[-1] != self.window_length:
            raise ShapeError(
                f"window length {windows.shape[-1]} does not match the ensemble's expected L={self.window_length}"
            )
        return windows

    def member_probabilities(self, windows: np.ndarray) -> np.ndarray:
        """(n, N) class-1 probabilities of every member."""
        windows = self._as_windows(windows)
        return np.stack([model.predict_proba(windows) for model in self.models])

    def probability(self, windows: np.ndarray) -> np.ndarray:
        """
        Ensemble detection probability: mean of member class-1 probabilities.

        Members are summed with math.fsum (correctly rounded), so the result does
        not depend on member order.
        """
        return mean_probabilities(self.member_probabilities(windows))

    def detect(self, windows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        probs = self.probability(windows)
        return probs > self.threshold, probs


def mean_probabilities(member_probs: np.ndarray) -> np.ndarray:
    member_probs = np.asarray(member_probs, dtype=np.float64)
    n_members = member_probs.shape[0]
    return np.array([math.fsum(column) / n_members for column in member_probs.T])


def ensemble_probability(ens: Ensemble, window: np.ndarray) -> float:
    return float(ens.probability(window)[0])


def detect(ens: Ensemble, window: np.ndarray) -> Tuple[bool, float]:
    prob = ensemble_probability(ens, window)
    return prob > ens.threshold, prob


def _require_both_classes(dataset: WindowDataset, name: str) -> np.ndarray:
    if dataset.weak_labels is None:
        raise DataValidationError(f"{name} dataset has no weak labels")
    counts = dataset.class_counts()
    if min(counts.values()) == 0:
        raise DataValidationError(f"{name} dataset holds a single class: {counts}")
    return dataset.weak_labels.astype(np.int64)


def split_train_sub(dataset: WindowDataset, fraction: float, seed: int) -> Tuple[WindowDataset, WindowDataset]:
    """Stratified split of the training windows into train-sub and val-sub."""
    labels = _require_both_classes(dataset, "train")
    held_out = math.ceil(fraction * len(dataset))
    if min(dataset.class_counts().values()) < 2 or held_out < 2 or len(dataset) - held_out < 2:
        raise DataValidationError(
            f"{len(dataset)} training windows {dataset.class_counts()} are too few for a stratified val-sub split"
        )
    indices = np.arange(len(dataset))
    train_idx, val_idx = train_test_split(indices, test_size=fraction, random_state=seed % (2 ** 32), stratify=labels)
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(val_idx))


def minibatches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """
    Consecutive slices of ``order``; a trailing single sample joins the previous
    batch since batch norm needs two samples per channel.
    """
    if batch_size < 2:
        raise DataValidationError(f"batch size must be at least 2, got {batch_size}")
    batches = [order[start:start + batch_size] for start in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


class CandidateTrainer:
    """
    Trains one candidate with early stopping on val-sub and restores its best weights.
    """

    def __init__(self, kernel_size: int, trial: int, cfg: TrainConfig):
        self.kernel_size = kernel_size
        self.trial = trial
        self.cfg = cfg
        self.seed = candidate_seed(cfg.seed, kernel_size, trial)
        self.dtype = np.float64 if cfg.precision == "float64" else np.float32

    def fit(self, train_sub: WindowDataset, val_sub: WindowDataset) -> Tuple[ResNetModel, CandidateResult]:
        started = time.perf_counter()
        model = build(ResNetSpec(kernel_size=self.kernel_size), self.seed, self.dtype)
        model.metadata.trial = self.trial
        optimizer = Adam(model.parameters(), lr=self.cfg.learning_rate)
        rng = np.random.default_rng(self.seed)
        x_train = train_sub.windows.astype(self.dtype)
        y_train = train_sub.weak_labels.astype(np.int64)
        x_val = val_sub.windows.astype(self.dtype)
        y_val = val_sub.weak_labels.astype(np.int64)

        best_loss = math.inf
        best_state = None
        stale = 0
        epochs = 0
        for epoch in range(self.cfg.max_epochs):
            for idx in minibatches(rng.permutation(len(x_train)), self.cfg.batch_size):
                model.train_step(x_train[idx, None, :], y_train[idx], optimizer)
            epochs = epoch + 1
            val_loss = model.loss(x_val, y_val)
            logger.debug(f"k={self.kernel_size} trial={self.trial} epoch={epochs} val_sub_loss={val_loss:.5f}")
            if val_loss < best_loss:
                best_loss = val_loss
                best_state = model.snapshot()
                stale = 0
            else:
                stale += 1
                if stale >= self.cfg.patience:
                    break

        if best_state is not None:
            model.load_state_arrays(*best_state)
        model.metadata.epochs_run = epochs
        model.metadata.best_val_loss = float(best_loss)
        result = CandidateResult(
            kernel_size=self.kernel_size,
            trial=self.trial,
            seed=self.seed,
            epochs_run=epochs,
            best_val_sub_loss=float(best_loss),
            validation_loss=math.inf,
            wall_clock_s=time.perf_counter() - started,
        )
        return model, result


async def _train_candidates(jobs: List[CandidateTrainer], train_sub: WindowDataset, val_sub: WindowDataset,
                            validation: WindowDataset, workers: int, progress: bool):
    semaphore = asyncio.Semaphore(workers)
    x_val = validation.windows
    y_val = validation.weak_labels.astype(np.int64)
    bar = tqdm(total=len(jobs), desc="candidates", disable=not progress)

    async def run(job: CandidateTrainer):
        async with semaphore:
            model, result = await asyncio.to_thread(job.fit, train_sub, val_sub)
            result.validation_loss = await asyncio.to_thread(model.loss, x_val.astype(job.dtype), y_val)
            logger.info(
                f"Candidate k={job.kernel_size} trial={job.trial} stopped after {result.epochs_run} epochs, "
                f"val-sub loss {result.best_val_sub_loss:.4f}, validation loss {result.validation_loss:.4f}"
            )
            bar.update(1)
            return model, result

    try:
        return await asyncio.gather(*(run(job) for job in jobs))
    finally:
        bar.close()


def select_members(results: Sequence[CandidateResult], n: int) -> List[int]:
    """Indices of the n lowest validation losses; ties go to the lower (kernel, trial)."""
    ranked = sorted(range(len(results)), key=lambda i: (results[i].validation_loss, results[i].kernel_size, results[i].trial))
    return ranked[:n]


def train_ensemble(train: WindowDataset, validation: WindowDataset, cfg: TrainConfig,
                   appliance: str = "appliance") -> Tuple[Ensemble, List[CandidateResult]]:
    """
    Train one candidate per (kernel size, trial) and keep the n with the lowest validation loss.

    Args:
        train: labelled training windows, split 80/20 internally for early stopping
        validation: windows from distinct houses used only to rank candidates
        cfg: training parameters

    Returns:
        the ensemble and every candidate's result in (kernel, trial) order
    """
    _require_both_classes(validation, "validation")
    if cfg.ensemble_size > cfg.candidate_count:
        raise DataValidationError(f"ensemble size {cfg.ensemble_size} exceeds {cfg.candidate_count} candidates")
    if train.window_length != validation.window_length:
        raise ShapeError(
            f"train windows have L={train.window_length}, validation windows L={validation.window_length}"
        )
    train_sub, val_sub = split_train_sub(train, cfg.val_sub_fraction, cfg.seed)
    logger.info(
        f"Training {cfg.candidate_count} candidates for {appliance} on {len(train_sub)} windows "
        f"(val-sub {len(val_sub)}, validation {len(validation)})"
    )

    jobs = [CandidateTrainer(k, trial, cfg) for k in cfg.kernel_sizes for trial in range(cfg.trials)]
    outcomes = asyncio.run(_train_candidates(jobs, train_sub, val_sub, validation, cfg.workers, cfg.progress))
    models = [model for model, _ in outcomes]
    results = [result for _, result in outcomes]

    chosen = select_members(results, cfg.ensemble_size)
    for index in chosen:
        results[index].selected = True
    ensemble = Ensemble(
        [models[i] for i in chosen],
        [results[i].validation_loss for i in chosen],
        appliance=appliance,
        window_length=train.window_length,
        threshold=cfg.detection_threshold,
    )
    logger.info(
        "Selected members: "
        + ", ".join(f"k={results[i].kernel_size}/t={results[i].trial} ({results[i].validation_loss:.4f})" for i in chosen)
    )
    return ensemble, results
