"""Joint loss, RMSprop, the training loop, metrics and naive reference forecasts."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import WindowSet
from .model import STForecaster
from .tensor import Tensor, exp, mse, no_grad

log = logging.getLogger(__name__)

LOSS_MODES = ("fixed", "uncertainty")


class TrainingError(RuntimeError):
    """Non-finite gradients or a diverging loss."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 5e-4
    lr_decay: float = 0.0
    rmsprop_alpha: float = 0.99
    epsilon: float = 1e-8
    max_epochs: int = 50
    max_steps: int = 0  # 0 = unlimited
    patience: int = 10
    seed: int = 0
    loss_mode: str = "fixed"
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.lr_decay < 1.0:
            raise ValueError("lr_decay must lie in [0, 1)")


def lambda_from_sigma2(sigma2: float) -> float:
    """Main-task weight 1 / (2 sigma^2) for a task uncertainty sigma^2."""
    if sigma2 <= 0:
        raise ValueError("sigma^2 must be positive")
    return 1.0 / (2.0 * sigma2)


# -- loss ----------------------------------------------------------------------------------


def joint_loss(y_hat: Tensor, y, ym_hat: Tensor | None, ym, mode: str = "fixed",
               lam: float = 0.5, log_vars: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Blend main and auxiliary MSE.

    fixed:       lam * MSE_main + (1 - lam) * MSE_aux
    uncertainty: exp(-s1) MSE_main + exp(-s2) MSE_aux + s1 + s2, with s = log sigma^2
    Without an auxiliary prediction the loss is MSE_main.
    """
    main = mse(y_hat, y)
    if ym_hat is None:
        return main
    aux = mse(ym_hat, ym)
    if mode == "fixed":
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        return main * lam + aux * (1.0 - lam)
    if mode == "uncertainty":
        if log_vars is None:
            raise ValueError("uncertainty mode needs the two log-variance parameters")
        s1, s2 = log_vars
        return exp(-s1) * main + exp(-s2) * aux + s1 + s2
    raise ValueError(f"unknown loss mode {mode!r}")


# -- optimiser -------------------------------------------------------------------------------


def rmsprop_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
                 state: dict[str, np.ndarray], lr: float, alpha: float = 0.99,
                 eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place RMSprop update with decoupled weight decay applied first."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= alpha
        v += (1.0 - alpha) * g * g
        p -= lr * g / (np.sqrt(v) + eps)


class RMSprop:
    def __init__(self, params, lr: float, alpha: float = 0.99, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, np.ndarray] = {}

    def step(self, lr: float | None = None) -> None:
        rmsprop_step({k: p.data for k, p in self.params.items()},
                     {k: p.grad for k, p in self.params.items()},
                     self.state, self.lr if lr is None else lr, self.alpha, self.eps,
                     self.weight_decay)


# -- metrics ------------------------------------------------------------------------------------


@dataclass
class EvalReport:
    mae: np.ndarray  # (tau,)
    rmse: np.ndarray  # (tau,)
    config_hash: str = ""
    runtime: float = field(default=0.0, compare=False)

    @property
    def aggregate_mae(self) -> float:
        return float(np.mean(self.mae))

    @property
    def aggregate_rmse(self) -> float:
        return float(np.mean(self.rmse))

    def __eq__(self, other):
        return (isinstance(other, EvalReport) and self.config_hash == other.config_hash
                and np.array_equal(self.mae, other.mae) and np.array_equal(self.rmse, other.rmse))

    def to_csv(self) -> str:
        lines = [f"# config_hash={self.config_hash}",
                 f"# aggregate mae={self.aggregate_mae!r} rmse={self.aggregate_rmse!r}",
                 "horizon,mae,rmse"]
        lines += [f"{h + 1},{m!r},{r!r}" for h, (m, r) in
                  enumerate(zip(self.mae.tolist(), self.rmse.tolist()))]
        return "\n".join(lines) + "\n"


def horizon_metrics(pred: np.ndarray, truth: np.ndarray, missing: np.ndarray | None = None):
    """Per-horizon MAE and RMSE over windows and nodes; arrays are (W, N, tau, 1)."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and target {truth.shape} differ")
    err = pred - truth
    keep = np.ones(err.shape, bool) if missing is None else ~missing
    count = keep.sum(axis=(0, 1, 3))
    count = np.where(count == 0, 1, count)
    mae = np.where(keep, np.abs(err), 0.0).sum(axis=(0, 1, 3)) / count
    rmse = np.sqrt(np.where(keep, err ** 2, 0.0).sum(axis=(0, 1, 3)) / count)
    return mae, rmse


def predict(model: STForecaster, windows: WindowSet, batch_size: int = 256) -> np.ndarray:
    """Normalised main-head forecasts for every window, (W, N, tau, 1)."""
    out = []
    with no_grad():
        for i in range(0, len(windows), batch_size):
            idx = np.arange(i, min(i + batch_size, len(windows)))
            y_hat, _, _ = model.forward(windows.inputs(idx))
            out.append(y_hat.data)
    if not out:
        return np.zeros((0, model.config.n_nodes, model.config.out_steps, 1))
    return np.concatenate(out, axis=0)


def _denorm(windows: WindowSet, values: np.ndarray) -> np.ndarray:
    if windows.scaler is None:
        return values
    return windows.scaler.denormalize(values, windows.target_index)


def evaluate(model: STForecaster, windows: WindowSet, config_hash: str = "",
             batch_size: int = 256) -> EvalReport:
    c = model.config
    if windows.values.shape[1] != c.n_nodes or windows.values.shape[2] != c.in_features:
        raise ValueError(
            f"shape conflict: model expects {c.n_nodes} nodes x {c.in_features} features, data has "
            f"{windows.values.shape[1]} x {windows.values.shape[2]}"
        )
    if (windows.in_steps, windows.out_steps) != (c.in_steps, c.out_steps):
        raise ValueError(
            f"shape conflict: model window {c.in_steps}->{c.out_steps}, data window "
            f"{windows.in_steps}->{windows.out_steps}"
        )
    t0 = time.perf_counter()
    pred = _denorm(windows, predict(model, windows, batch_size))
    truth = _denorm(windows, windows.targets())
    mae, rmse = horizon_metrics(pred, truth, windows.target_mask())
    return EvalReport(mae, rmse, config_hash, time.perf_counter() - t0)


def baseline_persistence(windows: WindowSet, config_hash: str = "") -> EvalReport:
    """Repeat the last observed target value for every horizon."""
    t0 = time.perf_counter()
    x = windows.inputs()[..., -1:, windows.target_index:windows.target_index + 1]
    pred = np.repeat(x, windows.out_steps, axis=2)
    mae, rmse = horizon_metrics(_denorm(windows, pred), _denorm(windows, windows.targets()),
                                windows.target_mask())
    return EvalReport(mae, rmse, config_hash, time.perf_counter() - t0)


def baseline_seasonal(windows: WindowSet, period: int = 24, config_hash: str = "") -> EvalReport:
    """Repeat the value one period before each target step (whole periods back past the window end)."""
    if period < 1 or period > windows.in_steps:
        raise ValueError(
            f"seasonal baseline unavailable: period {period} exceeds the {windows.in_steps}-step input"
        )
    t0 = time.perf_counter()
    x = windows.inputs()[..., windows.target_index]  # (W, N, T)
    t = windows.in_steps
    cols = [t - 1 + h - period * math.ceil(h / period) for h in range(1, windows.out_steps + 1)]
    pred = x[..., cols][..., None]
    mae, rmse = horizon_metrics(_denorm(windows, pred), _denorm(windows, windows.targets()),
                                windows.target_mask())
    return EvalReport(mae, rmse, config_hash, time.perf_counter() - t0)


# -- training loop ----------------------------------------------------------------------------------


@dataclass
class LogRow:
    epoch: int
    train_loss: float
    val_mae: float
    val_rmse: float
    weights: str  # lambda, or "sigma2_main;sigma2_aux" in uncertainty mode

    def csv(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.val_mae!r},{self.val_rmse!r},{self.weights}"


LOG_HEADER = "epoch,train_loss,val_mae,val_rmse,lambda_or_sigmas"


@dataclass
class TrainResult:
    log: list[LogRow]
    best_epoch: int
    best_val_mae: float
    steps: int
    optimizer_state: dict[str, np.ndarray]
    last_epoch: int


def _log_vars(model: STForecaster):
    p = model.params
    if "loss.log_var_main" in p:
        return p["loss.log_var_main"], p["loss.log_var_aux"]
    return None


def _weights_field(model: STForecaster, cfg: TrainConfig) -> str:
    lv = _log_vars(model)
    if cfg.loss_mode == "uncertainty" and lv is not None:
        return f"{math.exp(lv[0].item())!r};{math.exp(lv[1].item())!r}"
    return repr(cfg.lam)


def batch_loss(model: STForecaster, batch, cfg: TrainConfig) -> Tensor:
    y_hat, ym_hat, _ = model.forward(batch.x)
    ym = None
    if ym_hat is not None:
        if batch.y_moran is None:
            raise ValueError("auxiliary head enabled but the windows carry no Moran targets")
        ym = batch.y_moran
    return joint_loss(y_hat, batch.y, ym_hat, ym, cfg.loss_mode, cfg.lam, _log_vars(model))


def train(model: STForecaster, train_set: WindowSet, val_set: WindowSet, cfg: TrainConfig,
          start_epoch: int = 0, optimizer_state: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Epoch loop with seed-deterministic shuffling, early stopping and best-epoch restore."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation splits must be non-empty")
    opt = RMSprop(model.params, cfg.lr, cfg.rmsprop_alpha, cfg.epsilon, cfg.weight_decay)
    if optimizer_state:
        opt.state = {k: v.copy() for k, v in optimizer_state.items()}

    rows: list[LogRow] = []
    best = {k: p.data.copy() for k, p in model.params.items()}
    best_mae, best_epoch, stale = math.inf, start_epoch, 0
    initial_loss = None
    steps = 0
    epoch = start_epoch
    for epoch in range(start_epoch + 1, start_epoch + cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = cfg.lr * (1.0 - cfg.lr_decay) ** (epoch - 1)
        total, seen = 0.0, 0
        for batch in train_set.batches(cfg.batch_size, rng):
            model.zero_grad()
            loss = batch_loss(model, batch, cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            if initial_loss is None:
                initial_loss = value
            loss.backward()
            opt.step(lr)
            total += value * len(batch.starts)
            seen += len(batch.starts)
            steps += 1
            if cfg.max_steps and steps >= cfg.max_steps:
                break
        train_loss = total / seen
        if initial_loss is not None and train_loss > 10.0 * max(initial_loss, 1e-12):
            raise TrainingError(
                f"training diverged: epoch {epoch} loss {train_loss:.4g} exceeds 10x initial {initial_loss:.4g}"
            )
        report = evaluate(model, val_set)
        rows.append(LogRow(epoch, train_loss, report.aggregate_mae, report.aggregate_rmse,
                           _weights_field(model, cfg)))
        log.info("epoch %d loss %.5f val_mae %.5f val_rmse %.5f", epoch, train_loss,
                 report.aggregate_mae, report.aggregate_rmse)
        if report.aggregate_mae < best_mae:
            best_mae, best_epoch, stale = report.aggregate_mae, epoch, 0
            best = {k: p.data.copy() for k, p in model.params.items()}
        else:
            stale += 1
        if stale >= cfg.patience or (cfg.max_steps and steps >= cfg.max_steps):
            break
    for k, p in model.params.items():
        p.data = best[k]
    return TrainResult(rows, best_epoch, best_mae, steps, opt.state, epoch if rows else start_epoch)
