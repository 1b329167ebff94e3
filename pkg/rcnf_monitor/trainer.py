"""Two-stage maximum-likelihood training and gradient verification.

Stage 1 draws uniform batches. At ``next_stage_epoch`` (1-based) every
training window is scored in eval mode, the scores are turned into balanced
sampling weights, and all later epochs draw batches from that weighted
sampler. ``weight_refresh_interval`` optionally rescores every that many
epochs after the handoff.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .artifacts import write_json
from .const import (
    CHECKPOINT_EVERY,
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_GRAD_CLIP,
    DEFAULT_LEARNING_RATE,
    DEFAULT_NEXT_STAGE_EPOCH,
    DEFAULT_SAMPLER_BINS,
    DEFAULT_VALIDATION_SPLIT,
    SAMPLING_BALANCED,
    SAMPLING_UNIFORM,
)
from .dataset import (
    SampleWeights,
    Window,
    compute_balanced_weights,
    split_by_episode,
    stack_windows,
    weighted_sample,
)
from .exceptions import (
    ActNormAlreadyInitializedError,
    AnomalousTrainingDataError,
    ConfigError,
    RCNFValidationError,
    TrainingDivergedError,
)
from .flow import RCNFlow, save_checkpoint, score_batch
from .seeding import derive_seed

_LOGGER = logging.getLogger(__name__)

ROUNDTRIP_TOLERANCE = 1e-4
ROUNDTRIP_WINDOWS = 4
GRAD_CHECK_ATOL = 1e-6     # below this |analytic - numeric| is rounding noise
GRAD_CHECK_FLOOR = 1e-8    # relative-error denominator floor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = DEFAULT_EPOCHS
    next_stage_epoch: int = DEFAULT_NEXT_STAGE_EPOCH
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    grad_clip: float = DEFAULT_GRAD_CLIP
    seed: int = 0
    bins: int = DEFAULT_SAMPLER_BINS
    validation_split: float = DEFAULT_VALIDATION_SPLIT
    checkpoint_every: int = CHECKPOINT_EVERY
    weight_refresh_interval: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 1 <= self.next_stage_epoch <= self.epochs:
            raise ConfigError(
                f"next_stage_epoch must be in [1, {self.epochs}], got {self.next_stage_epoch}"
            )
        for name in ("batch_size", "learning_rate", "grad_clip", "bins", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.validation_split < 1.0:
            raise ConfigError(f"validation_split must be in [0, 1), got {self.validation_split}")
        if self.weight_refresh_interval is not None and self.weight_refresh_interval < 1:
            raise ConfigError("weight_refresh_interval must be >= 1 or None")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    epoch_nll: list[float] = field(default_factory=list)
    epoch_val_nll: list[float | None] = field(default_factory=list)
    sampling_schedule: list[str] = field(default_factory=list)
    roundtrip_errors: list[float] = field(default_factory=list)
    sampler_stage_epoch: int | None = None
    weight_refresh_epochs: list[int] = field(default_factory=list)
    initial_nll: float | None = None
    final_validation_nll: float | None = None
    best_validation_nll: float | None = None
    best_epoch: int | None = None
    train_windows: int = 0
    validation_windows: int = 0
    checkpoints: list[str] = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.epoch_nll)

    def to_dict(self) -> dict:
        return asdict(self)


def _reject_anomalous(windows: Sequence[Window]) -> None:
    anomalous = [w.source for w in windows if w.is_anomalous]
    if anomalous:
        raise AnomalousTrainingDataError(
            f"{len(anomalous)} anomalous window(s) in training data, first from {anomalous[0]}"
        )


@torch.no_grad()
def _mean_nll(model: RCNFlow, x: np.ndarray, s: np.ndarray, task_ids: list[str], batch_size: int) -> float:
    model.eval()
    total = 0.0
    for start in range(0, len(x), batch_size):
        end = start + batch_size
        total += float(-model.log_prob(x[start:end], s[start:end], task_ids[start:end]).sum())
    return total / len(x)


@torch.no_grad()
def _roundtrip_error(model: RCNFlow, x: np.ndarray, s: np.ndarray, task_ids: list[str]) -> float:
    model.eval()
    z, _, _, _ = model.encode(x, s, task_ids)
    restored = model.decode(z, s, task_ids)
    return float((restored - torch.as_tensor(x)).abs().max())


def train(
    model: RCNFlow,
    windows: Sequence[Window],
    config: TrainConfig,
    *,
    checkpoint_dir: str | os.PathLike | None = None,
    on_epoch: Callable[[int, TrainReport], None] | None = None,
) -> tuple[RCNFlow, TrainReport]:
    """Fit ``model`` to nominal windows by maximum likelihood."""
    if not windows:
        raise RCNFValidationError("no training windows")
    _reject_anomalous(windows)
    if model.actnorm_initialized:
        raise ActNormAlreadyInitializedError("train() expects a model with uninitialized ActNorm")

    started = time.monotonic()
    report = TrainReport()
    train_windows, val_windows = split_by_episode(
        windows, config.validation_split, derive_seed(config.seed, "validation-split")
    )
    x, s, task_ids = stack_windows(train_windows)
    val = stack_windows(val_windows) if val_windows else None
    report.train_windows = len(train_windows)
    report.validation_windows = len(val_windows)
    n = len(x)
    batch_rng = np.random.default_rng(derive_seed(config.seed, "batches"))
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "torch"))

        first = batch_rng.permutation(n)[: config.batch_size]
        model.initialize_actnorm(x[first], s[first], [task_ids[i] for i in first])
        report.initial_nll = _mean_nll(model, x, s, task_ids, config.batch_size)
        _LOGGER.info(
            "Training on %d windows (%d held out), initial NLL %.3f",
            n, len(val_windows), report.initial_nll,
        )

        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        weights: SampleWeights | None = None

        for epoch in range(1, config.epochs + 1):
            refresh = (
                config.weight_refresh_interval is not None
                and epoch > config.next_stage_epoch
                and (epoch - config.next_stage_epoch) % config.weight_refresh_interval == 0
            )
            if epoch == config.next_stage_epoch or refresh:
                model.eval()
                scores = score_batch(model, x, s, task_ids)
                weights = compute_balanced_weights(scores, config.bins)
                if epoch == config.next_stage_epoch:
                    report.sampler_stage_epoch = epoch
                    _LOGGER.info("Epoch %d: switching to the balanced sampler", epoch)
                else:
                    report.weight_refresh_epochs.append(epoch)
                    _LOGGER.info("Epoch %d: sampler weights refreshed", epoch)

            if weights is None:
                order = batch_rng.permutation(n)
                report.sampling_schedule.append(SAMPLING_UNIFORM)
            else:
                order = np.asarray(weighted_sample(weights, n, derive_seed(config.seed, "sampler", epoch)))
                report.sampling_schedule.append(SAMPLING_BALANCED)

            model.train()
            total = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                loss = -model.log_prob(x[idx], s[idx], [task_ids[i] for i in idx]).mean()
                if not torch.isfinite(loss):
                    report.wall_clock_seconds = time.monotonic() - started
                    raise TrainingDivergedError(
                        f"non-finite NLL at epoch {epoch}, batch starting {start}", report
                    )
                optimizer.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                total += float(loss) * len(idx)
            report.epoch_nll.append(total / n)

            val_nll = _mean_nll(model, *val, config.batch_size) if val is not None else None
            report.epoch_val_nll.append(val_nll)

            head = slice(0, min(ROUNDTRIP_WINDOWS, n))
            error = _roundtrip_error(model, x[head], s[head], task_ids[head])
            report.roundtrip_errors.append(error)
            if error > ROUNDTRIP_TOLERANCE:
                _LOGGER.warning("Epoch %d: round-trip error %.3e exceeds %g", epoch, error, ROUNDTRIP_TOLERANCE)

            _LOGGER.info(
                "Epoch %d/%d: NLL %.4f%s [%s]",
                epoch, config.epochs, report.epoch_nll[-1],
                "" if val_nll is None else f", val {val_nll:.4f}",
                report.sampling_schedule[-1],
            )

            if val_nll is not None and (
                report.best_validation_nll is None or val_nll < report.best_validation_nll
            ):
                report.best_validation_nll = val_nll
                report.best_epoch = epoch
                if checkpoint_dir is not None:
                    save_checkpoint(model, checkpoint_dir / "best.npz", extra={"epoch": epoch})
            if checkpoint_dir is not None and epoch % config.checkpoint_every == 0:
                path = checkpoint_dir / f"epoch_{epoch:03d}.npz"
                save_checkpoint(model, path, extra={"epoch": epoch})
                report.checkpoints.append(str(path))
            if on_epoch is not None:
                on_epoch(epoch, report)

    report.final_validation_nll = report.epoch_val_nll[-1] if report.epoch_val_nll else None
    report.wall_clock_seconds = time.monotonic() - started
    model.eval()
    return model, report


def save_train_report(report: TrainReport, path, *, force: bool = True, extra: dict | None = None) -> Path:
    document = report.to_dict()
    if extra:
        document.update(extra)
    return write_json(path, document, force=force)


# ─────────────────────────────────────────────
# Gradient verification
# ─────────────────────────────────────────────

def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.nn.Parameter],
    epsilon: float = 1e-5,
    *,
    samples: int = 200,
    seed: int = 0,
    atol: float = GRAD_CHECK_ATOL,
) -> float:
    """Max relative error between autograd and central differences.

    Coordinates are drawn uniformly from every trainable parameter, so a
    gradient autograd never produced counts as zero and is checked like any
    other. Disagreements up to ``atol`` are rounding noise and score 0.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [
        p.grad.detach().reshape(-1).clone() if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        for p in params
    ]
    offsets = np.cumsum([0] + [p.numel() for p in params])
    total = int(offsets[-1])
    if total == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(samples, total), replace=False)

    worst = 0.0
    with torch.no_grad():
        for flat_index in chosen:
            i = int(np.searchsorted(offsets, flat_index, side="right")) - 1
            j = int(flat_index - offsets[i])
            analytic = float(grads[i][j])
            flat = params[i].data.view(-1)
            original = float(flat[j])
            flat[j] = original + epsilon
            plus = float(loss_fn())
            flat[j] = original - epsilon
            minus = float(loss_fn())
            flat[j] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            excess = max(abs(analytic - numeric) - atol, 0.0)
            worst = max(worst, excess / max(abs(analytic), abs(numeric), GRAD_CHECK_FLOOR))
    for p in params:
        p.grad = None
    return worst


def grad_check(
    model: RCNFlow,
    window: Window,
    task_id: str | None = None,
    epsilon: float = 1e-5,
    *,
    samples: int = 200,
    seed: int = 0,
) -> float:
    """Finite-difference check of d NLL / d parameters on one window."""
    task_id = task_id or window.task_id
    model.eval()
    x, s = window.x[None], window.s[None]

    def loss_fn() -> torch.Tensor:
        return -model.log_prob(x, s, [task_id]).sum()

    error = finite_difference_check(loss_fn, list(model.parameters()), epsilon, samples=samples, seed=seed)
    _LOGGER.info("Gradient check (eps=%g): max relative error %.3e", epsilon, error)
    return error
