"""Super-adapter training: per-step rank activation over a frozen sparse base.

Each step draws one sub-adapter config (uniform per module in nls mode, a
constant one in fixed-lora mode), computes gradients on the active slices
only, and applies the optimizer update to those slices. Optimizer moments
live at maximal-rank shape with per-rank-index step counts, so inactive rank
tails are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .adapters import SubAdapterConfig, SuperAdapter
from .data import Dataset
from .errors import NumericError
from .linalg import Rng
from .model import Model, _loss_and_grads, forward, loss, weights_hash
from .search import SearchSpace, heuristic_config


class OptimizerKind(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


class TrainMode(str, Enum):
    NLS = "nls"
    FIXED_LORA = "fixed_lora"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 16
    learning_rate: float = 3e-4
    optimizer: OptimizerKind = OptimizerKind.ADAM
    seed: int = 0
    mode: TrainMode = TrainMode.NLS
    fixed_rank: int | None = None  # fixed_lora only; defaults to the maximal rank
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class StepRecord:
    step: int
    config: SubAdapterConfig
    loss: float


@dataclass
class EpochRecord:
    epoch: int
    val_loss: float
    val_accuracy: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_records(self) -> list[dict]:
        out = [
            {"kind": "step", "step": s.step, "config": s.config, "loss": s.loss}
            for s in self.steps
        ]
        out += [
            {
                "kind": "epoch",
                "epoch": e.epoch,
                "val_loss": e.val_loss,
                "val_accuracy": e.val_accuracy,
            }
            for e in self.epochs
        ]
        return out


def sample_config(adapter: SuperAdapter, rng: Rng) -> SubAdapterConfig:
    """Each module's rank drawn independently and uniformly from its choices."""
    choices = adapter.rank_choices
    return {name: choices[int(rng.integers(0, len(choices)))] for name in adapter.pairs}


def evaluate(
    model: Model,
    dataset: Dataset,
    adapters: SuperAdapter | None = None,
    config: SubAdapterConfig | None = None,
    batch_size: int = 64,
) -> tuple[float, float]:
    """(mean loss, accuracy) over a dataset under an optional adapter config."""
    total_loss = 0.0
    correct = 0
    for batch in dataset.batches(batch_size):
        logits = forward(model, batch, adapters, config)
        total_loss += loss(logits, batch.labels) * batch.labels.shape[0]
        correct += int((np.argmax(logits, axis=1) == batch.labels).sum())
    return total_loss / dataset.n, correct / dataset.n


class SlicedAdam:
    """Adam whose moments live at maximal-rank shape and update active slices only.

    One step-count vector per module tracks how often each rank index has been
    active; bias correction uses those per-index counts, so a rank tail that
    sat out some steps is corrected as if it had just started.
    """

    def __init__(self, adapter: SuperAdapter, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.adapter = adapter
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m_b = {n: np.zeros_like(p.b) for n, p in adapter.pairs.items()}
        self.v_b = {n: np.zeros_like(p.b) for n, p in adapter.pairs.items()}
        self.m_a = {n: np.zeros_like(p.a) for n, p in adapter.pairs.items()}
        self.v_a = {n: np.zeros_like(p.a) for n, p in adapter.pairs.items()}
        self.counts = {n: np.zeros(adapter.r_max, dtype=np.int64) for n in adapter.pairs}

    def _update(self, param, grad, m, v, t):
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        param -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(param.dtype)

    def step(self, grads: dict[str, tuple[np.ndarray, np.ndarray]], active: SubAdapterConfig):
        for name, (grad_b, grad_a) in grads.items():
            rank = active[name]
            counts = self.counts[name]
            counts[:rank] += 1
            t_col = counts[:rank].astype(np.float64)[None, :]  # B slice is [out, r]
            t_row = counts[:rank].astype(np.float64)[:, None]  # A slice is [r, in]
            pair = self.adapter.pairs[name]
            self._update(pair.b[:, :rank], grad_b, self.m_b[name][:, :rank],
                         self.v_b[name][:, :rank], t_col)
            self._update(pair.a[:rank, :], grad_a, self.m_a[name][:rank, :],
                         self.v_a[name][:rank, :], t_row)


class SlicedSGD:
    def __init__(self, adapter: SuperAdapter, lr: float):
        self.adapter = adapter
        self.lr = lr

    def step(self, grads, active):
        for name, (grad_b, grad_a) in grads.items():
            rank = active[name]
            pair = self.adapter.pairs[name]
            pair.b[:, :rank] -= self.lr * grad_b
            pair.a[:rank, :] -= self.lr * grad_a


def train(
    model: Model,
    adapter: SuperAdapter,
    train_data: Dataset,
    val_data: Dataset,
    cfg: TrainConfig,
) -> tuple[SuperAdapter, TrainLog]:
    """Train the adapter pairs over a frozen model; base weights never change.

    The model must carry a frozen hash (from sparsify_model or freeze_model);
    it is re-verified before and after the run. Per-epoch validation runs under
    the heuristic config in nls mode and the fixed config in fixed-lora mode.
    """
    cfg.validate()
    if model.frozen_hash is None:
        raise ValueError("model is not frozen; run sparsify_model or freeze_model first")
    if weights_hash(model) != model.frozen_hash:
        raise ValueError("model weights do not match their frozen hash")

    adapter = adapter.copy()
    log = TrainLog()
    rng = Rng(cfg.seed)
    sample_rng = rng.split("rank-sample")
    shuffle_rng = rng.split("shuffle")

    mode = TrainMode(cfg.mode)
    fixed_rank = cfg.fixed_rank if cfg.fixed_rank is not None else adapter.rank_choices[0]
    if fixed_rank not in adapter.rank_choices:
        raise ValueError(f"fixed_rank {fixed_rank} not in choices {list(adapter.rank_choices)}")
    fixed = {name: fixed_rank for name in adapter.pairs}
    val_config = heuristic_config(SearchSpace.from_adapter(adapter)) if mode is TrainMode.NLS else fixed

    if OptimizerKind(cfg.optimizer) is OptimizerKind.ADAM:
        optimizer = SlicedAdam(adapter, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    else:
        optimizer = SlicedSGD(adapter, cfg.learning_rate)

    step = 0
    for epoch in range(cfg.epochs):
        for batch in train_data.batches(cfg.batch_size, shuffle_rng):
            active = sample_config(adapter, sample_rng) if mode is TrainMode.NLS else fixed
            step_loss, grads = _loss_and_grads(model, adapter, active, batch)
            if not np.isfinite(step_loss):
                raise NumericError(f"non-finite training loss at step {step}")
            optimizer.step(grads, active)
            log.steps.append(StepRecord(step=step, config=dict(active), loss=step_loss))
            step += 1
        val_loss, val_acc = evaluate(model, val_data, adapter, val_config)
        log.epochs.append(EpochRecord(epoch=epoch, val_loss=val_loss, val_accuracy=val_acc))

    if weights_hash(model) != model.frozen_hash:
        raise NumericError("base weights changed during training; frozen-base guarantee violated")
    adapter.trained = adapter.trained or cfg.epochs > 0
    return adapter, log


def make_evaluator(
    model: Model,
    adapter: SuperAdapter,
    dataset: Dataset,
    batch_size: int = 64,
):
    """Search evaluator: config -> (validation accuracy, active adapter params)."""

    def evaluate_config(config: SubAdapterConfig) -> tuple[float, int]:
        _, accuracy = evaluate(model, dataset, adapter, config, batch_size)
        params = active_param_count(adapter, config)
        return accuracy, params

    return evaluate_config


def active_param_count(adapter: SuperAdapter, config: SubAdapterConfig) -> int:
    """Entry count of the active slices: sum over modules of r * (out + in)."""
    total = 0
    for name, pair in adapter.pairs.items():
        rank = config[name]
        total += pair.b[:, :rank].size + pair.a[:rank, :].size
    return total
