"""Loss, Adam and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autograd import Tape, Tensor, as_tensor, custom_op
from .dataset import Manifest, batch_iter
from .errors import ConfigError, DataIOError, NumericError, ShapeError, UsageError
from .evalkit import binarize, dice
from .imaging import AugmentParams
from .unet import ParamStore, UNetConfig, save_checkpoint, track, unet_forward

log = logging.getLogger(__name__)

CLAMP = 1e-7


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [1e-7, 1 - 1e-7].

    The gradient is taken at the clamped value even where clamping was active,
    so a saturated wrong prediction still gets pushed back.
    """
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"bce_loss: prediction {pred.shape} vs target {t.shape}")
    p = np.clip(pred.data, CLAMP, 1 - CLAMP)
    n = p.size
    out = np.asarray(-(t * np.log(p) + (1 - t) * np.log1p(-p)).mean(), dtype=pred.dtype)

    def make_backward():
        return lambda g: (g * (p - t) / (p * (1 - p)) / n,)

    return custom_op("bce", (pred,), out, make_backward)


def batch_dice(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    """Mean per-image DICE over an (N, 1, H, W) batch."""
    return float(np.mean([dice(binarize(p, threshold), t) for p, t in zip(pred[:, 0], target[:, 0])]))


# -- Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, lr: float = 0.0005, **kw) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, lr=lr, **kw)


def adam_step(state: AdamState, params: ParamStore, grads) -> ParamStore:
    """One bias-corrected Adam update, in place on each parameter's data."""
    missing = [k for k in params if k not in grads or grads[k] is None]
    if missing:
        raise UsageError(f"no gradient for parameters {missing[:5]}")
    if set(state.m) != set(params):
        raise UsageError("optimizer state does not match the parameter set")
    state.t += 1
    bc1 = 1 - state.beta1 ** state.t
    bc2 = 1 - state.beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.data.dtype, copy=False)
    return params


def train_step(params: ParamStore, state: AdamState, x: Tensor, y: Tensor) -> tuple[float, np.ndarray]:
    """Forward, backward and one Adam update; returns (loss, predictions before the update)."""
    tape = Tape()
    tracked = track(params, tape)
    pred = unet_forward(tracked, x)
    loss = bce_loss(pred, y)
    value = loss.item()
    if not np.isfinite(value):
        return value, pred.data
    tape.backward(loss)
    adam_step(state, params, {k: tape.grad(t) for k, t in tracked.items()})
    return value, pred.data


def fit_batch(params: ParamStore, x: Tensor, y: Tensor, max_steps: int, lr: float = 1e-3,
              target_loss: float | None = None, target_dice: float | None = None) -> list[tuple[int, float, float]]:
    """Repeatedly fit one fixed batch; returns (step, loss, dice) per step.

    Metrics at each step come from the forward pass before that step's update.
    When both targets are given and met, the loop stops without updating, so the
    returned parameters reproduce the last recorded metrics.
    """
    state = AdamState.for_params(params, lr=lr)
    history = []
    for step in range(max_steps):
        tape = Tape()
        tracked = track(params, tape)
        pred = unet_forward(tracked, x)
        loss = bce_loss(pred, y)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        d = batch_dice(pred.data, y.data)
        history.append((step, value, d))
        if target_loss is not None and target_dice is not None and value < target_loss and d >= target_dice:
            break
        tape.backward(loss)
        adam_step(state, params, {k: tape.grad(t) for k, t in tracked.items()})
    return history


# -- epoch loop -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr: float = 0.0005
    seed: int = 0
    augment: bool = True
    checkpoint: Path | None = None
    report_every: int = 1
    dilate_iterations: int = 1
    aug_params: AugmentParams = AugmentParams()

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_dice: float = -1.0
    best_params: ParamStore | None = None


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _relabel(manifest: Manifest, split: str) -> Manifest:
    return Manifest([replace(r, split=split) for r in manifest.records], dict(manifest.provenance))


def _validate(params: ParamStore, manifest: Manifest, unet_cfg: UNetConfig, cfg: TrainConfig,
              cache: dict) -> tuple[float, float]:
    loss_sum, count, dices = 0.0, 0, []
    for x, y in batch_iter(manifest, "val", cfg.batch_size, 0, augment=False, size=unet_cfg.input_size,
                           dilate_iterations=cfg.dilate_iterations, cache=cache, shuffle=False):
        pred = unet_forward(params, x)
        loss_sum += bce_loss(pred, y).item() * pred.size
        count += pred.size
        dices += [dice(binarize(p), t) for p, t in zip(pred.data[:, 0], y.data[:, 0])]
    return loss_sum / count, float(np.mean(dices))


def train_epochs(params: ParamStore, unet_cfg: UNetConfig, cfg: TrainConfig,
                 train_manifest: Manifest, val_manifest: Manifest, on_epoch=None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs, keeping the parameters with the best val DICE.

    ``params`` is updated in place. If ``cfg.checkpoint`` is set, the best
    parameters are written there whenever validation DICE improves.
    ``on_epoch(stats)`` is called after each epoch.
    """
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise UsageError("training and validation manifests must both be non-empty")
    train_m, val_m = _relabel(train_manifest, "train"), _relabel(val_manifest, "val")
    state = AdamState.for_params(params, lr=cfg.lr)
    train_cache: dict = {}
    val_cache: dict = {}
    result = TrainResult()
    for epoch in range(1, cfg.epochs + 1):
        loss_sum, count = 0.0, 0
        batches = batch_iter(train_m, "train", cfg.batch_size, epoch_seed(cfg.seed, epoch), augment=cfg.augment,
                             size=unet_cfg.input_size, dilate_iterations=cfg.dilate_iterations,
                             aug_params=cfg.aug_params, cache=train_cache)
        for bi, (x, y) in enumerate(batches):
            value, _ = train_step(params, state, x, y)
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {bi}")
            loss_sum += value * x.shape[0]
            count += x.shape[0]
        val_loss, val_dice = _validate(params, val_m, unet_cfg, cfg, val_cache)
        stats = EpochStats(epoch, loss_sum / count, val_loss, val_dice)
        result.history.append(stats)
        if val_dice > result.best_val_dice:
            result.best_val_dice, result.best_epoch = val_dice, epoch
            result.best_params = {k: Tensor(p.data.copy()) for k, p in params.items()}
            if cfg.checkpoint is not None:
                save_checkpoint(result.best_params, unet_cfg, cfg.checkpoint)
        if on_epoch is not None:
            on_epoch(stats)
        if cfg.report_every and epoch % cfg.report_every == 0:
            log.info("epoch %d  train_loss %.5f  val_loss %.5f  val_dice %.4f",
                     epoch, stats.train_loss, stats.val_loss, stats.val_dice)
    return result


def write_history(history: list[EpochStats], path, header: dict | None = None) -> None:
    """TSV of per-epoch metrics, preceded by ``# key=value`` lines for the run header."""
    try:
        with open(path, "w", newline="") as fh:
            for key, value in (header or {}).items():
                fh.write(f"# {key}={value}\n")
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(("epoch", "train_loss", "val_loss", "val_dice"))
            for s in history:
                w.writerow((s.epoch, repr(s.train_loss), repr(s.val_loss), repr(s.val_dice)))
    except OSError as exc:
        raise DataIOError(f"cannot write history {path}: {exc}") from exc
