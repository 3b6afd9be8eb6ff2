"""MSE training with RMSprop, evaluation metrics and CSV reports."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import tensor as tn
from .dataset import InsufficientDataError, NormalizationSpec, WindowBatcher
from .rng import SplitMix64, derive_seed
from .tensor import DimensionError, NonFiniteError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 40
    epochs: int = 200
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    early_stop_patience: int = 20
    seed: int = 0
    lr_schedule: str = "constant"  # or "cosine", see epoch_lr
    lr_final_fraction: float = 0.01

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("need lr >= 0, batch_size >= 1, epochs >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if not 0 <= self.lr_final_fraction <= 1:
            raise ValueError("lr_final_fraction must lie in [0, 1]")
        if self.weight_decay != 0:
            raise ValueError("weight decay is not supported (the optimizer runs without it)")


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``."""
    if cfg.lr_schedule == "constant" or cfg.epochs == 1:
        return cfg.lr
    f = cfg.lr_final_fraction
    return cfg.lr * (f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / (cfg.epochs - 1))))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor._wrap(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    return tn.mean(tn.square(tn.sub(pred, target)))


@dataclass
class RMSpropState:
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_step(params: dict[str, Tensor], state: RMSpropState, lr: float,
                 alpha: float = 0.99, eps: float = 1e-8) -> None:
    """``v <- a v + (1 - a) g^2``; ``p <- p - lr g / (sqrt(v) + eps)``, in place.

    Gradients are read from ``.grad`` (missing means zero). Any NaN/Inf
    gradient aborts before a single parameter is touched.
    """
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    for k, p in params.items():
        g = grads[k]
        v = state.square_avg.get(k)
        if v is None:
            v = np.zeros_like(p.data)
        v = alpha * v + (1.0 - alpha) * g * g
        state.square_avg[k] = v
        if lr != 0:
            p.data = p.data - lr * g / (np.sqrt(v) + eps)


def batch_loss(params: M.ModelParams, x, z, y, rings) -> Tensor:
    return mse_loss(M.forward(params, x, z, rings), y)


def mean_squared_error(params: M.ModelParams, batcher: WindowBatcher, rings, batch_size: int = 256) -> float:
    """MSE over every element of every window of ``batcher`` (no grad)."""
    total, count = 0.0, 0
    with tn.no_grad():
        for x, z, y in batcher.batches(batch_size):
            pred = M.forward(params, x, z, rings).data
            total += float(np.sum((pred - y) ** 2))
            count += y.size
    if count == 0:
        raise InsufficientDataError("no windows to evaluate")
    return total / count


@dataclass
class TrainResult:
    params: M.ModelParams
    curve: list[tuple[int, float, float]]  # (epoch, train_mse, val_mse)
    best_epoch: int
    best_val_mse: float


def train(params: M.ModelParams, train_data: WindowBatcher, val_data: WindowBatcher,
          cfg: TrainConfig, rings=None) -> TrainResult:
    """Mini-batch training; returns the parameters with the best validation MSE."""
    if len(train_data) == 0 or len(val_data) == 0:
        raise InsufficientDataError("train and validation splits need at least one window")
    params = params.copy()
    rng = SplitMix64(derive_seed(cfg.seed, "shuffle"))
    state = RMSpropState()
    best = (np.inf, 0, params.copy())
    curve = []
    bad_epochs = 0
    # overflow shows up as non-finite losses or gradients, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_data))
            sq_sum, n_el = 0.0, 0
            lr = epoch_lr(cfg, epoch)
            for x, z, y in train_data.batches(cfg.batch_size, order):
                tn.zero_grads(params.parameters())
                try:
                    loss = batch_loss(params, x, z, y, rings)
                except NonFiniteError as exc:
                    raise TrainingError(f"forward pass diverged in epoch {epoch}: {exc}") from exc
                tn.backward(loss)
                try:
                    rmsprop_step(params.tensors, state, lr, cfg.rmsprop_alpha, cfg.rmsprop_eps)
                except NonFiniteError as exc:
                    raise TrainingError(f"gradient diverged in epoch {epoch}: {exc}") from exc
                sq_sum += loss.item() * y.size
                n_el += y.size
            try:
                val = mean_squared_error(params, val_data, rings)
            except NonFiniteError:
                val = float("nan")
            if not np.isfinite(val):
                raise TrainingError(f"validation loss is not finite in epoch {epoch}")
            curve.append((epoch, sq_sum / n_el, val))
            log.info("epoch %d train_mse=%.6g val_mse=%.6g", epoch, sq_sum / n_el, val)
            if val < best[0]:
                best = (val, epoch, params.copy())
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.early_stop_patience:
                    break
    return TrainResult(best[2], curve, best[1], best[0])


def write_curve(path: str | Path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for epoch, tr, va in curve:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])


def read_curve(path: str | Path) -> list[tuple[int, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["epoch"]), float(r["train_mse"]), float(r["val_mse"])) for r in csv.DictReader(fh)]


# --------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    """MAE in mph; RMSE on both the normalized and the mph scale."""

    mae: float
    rmse: float  # normalized
    rmse_mph: float
    mse: float  # normalized
    mae_norm: float
    per_horizon: list[dict[str, float]]
    n_windows: int

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("mae_mph", "all", self.mae), ("rmse_mph", "all", self.rmse_mph),
               ("mae_norm", "all", self.mae_norm), ("rmse_norm", "all", self.rmse),
               ("mse_norm", "all", self.mse), ("n_windows", "all", float(self.n_windows))]
        for k, m in enumerate(self.per_horizon, start=1):
            out += [(name, f"h{k}", m[name]) for name in ("mae_mph", "rmse_mph", "rmse_norm")]
        return out


def report_from_predictions(pred: np.ndarray, target: np.ndarray, norm: NormalizationSpec) -> EvalReport:
    """Metrics for ``[W, T, N, P]`` normalized predictions and targets."""
    if pred.shape != target.shape:
        raise DimensionError(f"predictions {pred.shape} vs targets {target.shape}")
    if pred.shape[0] == 0:
        raise InsufficientDataError("empty test set")
    err_n = pred - target
    err_mph = norm.denormalize_states(pred) - norm.denormalize_states(target)
    per_h = []
    for h in range(pred.shape[1]):
        en, em = err_n[:, h], err_mph[:, h]
        per_h.append({"mae_mph": float(np.mean(np.abs(em))), "rmse_mph": float(np.sqrt(np.mean(em ** 2))),
                      "rmse_norm": float(np.sqrt(np.mean(en ** 2)))})
    mse = float(np.mean(err_n ** 2))
    return EvalReport(mae=float(np.mean(np.abs(err_mph))), rmse=float(np.sqrt(mse)),
                      rmse_mph=float(np.sqrt(np.mean(err_mph ** 2))), mse=mse,
                      mae_norm=float(np.mean(np.abs(err_n))), per_horizon=per_h, n_windows=pred.shape[0])


def predict_windows(params: M.ModelParams, batcher: WindowBatcher, rings, batch_size: int = 256,
                    zero_features: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Normalized predictions and targets for every window, ``[W, T, N, P]`` each."""
    preds, targets = [], []
    with tn.no_grad():
        for x, z, y in batcher.batches(batch_size):
            if zero_features:
                z = np.zeros_like(z)
            preds.append(M.forward(params, x, z, rings).data)
            targets.append(y)
    if not preds:
        raise InsufficientDataError("empty test set")
    return np.concatenate(preds), np.concatenate(targets)


def evaluate(params: M.ModelParams, test_data: WindowBatcher, norm: NormalizationSpec, rings=None) -> EvalReport:
    if len(test_data) == 0:
        raise InsufficientDataError("empty test set")
    pred, target = predict_windows(params, test_data, rings)
    return report_from_predictions(pred, target, norm)


def write_report(path: str | Path, report: EvalReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "scope", "value"])
        for name, scope, value in report.rows():
            w.writerow([name, scope, repr(float(value))])
