"""Elastic low-rank adapter pairs stored at maximal rank.

Each target module gets B [out x r_max] (zero-init) and A [r_max x in]
(Gaussian init). Activating rank r uses the leading prefix B[:, :r], A[:r, :],
scaled by alpha / r, so every smaller rank shares the leading weights of the
larger ones.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import Rng, accum_matmul
from .model import INIT_STD, Model
from .pruning import PruneReport, scan_report

SubAdapterConfig = dict[str, int]

DEFAULT_RANK_CHOICES = (32, 24, 16)
DEFAULT_ALPHA = 64.0


@dataclass
class LoraPair:
    b: np.ndarray  # [out, r_max]
    a: np.ndarray  # [r_max, in]


@dataclass
class SuperAdapter:
    pairs: dict[str, LoraPair]
    rank_choices: tuple[int, ...]
    alpha: float
    trained: bool = False

    @property
    def r_max(self) -> int:
        return self.rank_choices[0]

    @property
    def modules(self) -> list[str]:
        return list(self.pairs.keys())

    def copy(self) -> "SuperAdapter":
        return replace(
            self,
            pairs={k: LoraPair(b=p.b.copy(), a=p.a.copy()) for k, p in self.pairs.items()},
        )


def _check_rank_choices(rank_choices) -> tuple[int, ...]:
    choices = tuple(int(r) for r in rank_choices)
    if not choices:
        raise ValueError("rank_choices must be non-empty")
    if any(r < 1 for r in choices):
        raise ValueError(f"rank_choices must all be >= 1, got {list(choices)}")
    if any(a <= b for a, b in zip(choices, choices[1:])):
        raise ValueError(f"rank_choices must be strictly descending, got {list(choices)}")
    return choices


def attach(
    model: Model,
    targets,
    rank_choices=DEFAULT_RANK_CHOICES,
    alpha: float = DEFAULT_ALPHA,
    rng: Rng | None = None,
) -> SuperAdapter:
    """One zero-B / Gaussian-A pair per target module, deterministic per seed."""
    choices = _check_rank_choices(rank_choices)
    targets = list(targets)
    unknown = [t for t in targets if t not in model.weights]
    if unknown:
        raise ValueError(f"unknown target modules: {unknown}")
    if rng is None:
        rng = Rng(0)
    r_max = choices[0]
    pairs: dict[str, LoraPair] = {}
    for name in model.module_names:  # fixed draw order regardless of targets order
        if name not in targets:
            continue
        out_dim, in_dim = model.weights[name].shape
        pairs[name] = LoraPair(
            b=np.zeros((out_dim, r_max), dtype=np.float32),
            a=rng.normal((r_max, in_dim), INIT_STD),
        )
    return SuperAdapter(pairs=pairs, rank_choices=choices, alpha=float(alpha))


def delta(adapter: SuperAdapter, module: str, rank: int) -> np.ndarray:
    """(alpha / rank) * B[:, :rank] @ A[:rank, :] — the active low-rank update."""
    if module not in adapter.pairs:
        raise ValueError(f"unknown adapter module {module!r}")
    if rank not in adapter.rank_choices:
        raise ValueError(f"rank {rank} not in choices {list(adapter.rank_choices)}")
    pair = adapter.pairs[module]
    return accum_matmul(pair.b[:, :rank], pair.a[:rank, :]) * np.float32(adapter.alpha / rank)


def maximal_config(adapter: SuperAdapter) -> SubAdapterConfig:
    return {name: adapter.rank_choices[0] for name in adapter.pairs}


def minimal_config(adapter: SuperAdapter) -> SubAdapterConfig:
    return {name: adapter.rank_choices[-1] for name in adapter.pairs}


def validate_config(adapter: SuperAdapter, config: SubAdapterConfig) -> None:
    for name in config:
        if name not in adapter.pairs:
            raise ValueError(f"config names unknown module {name!r}")
    for name in adapter.pairs:
        if name not in config:
            raise ValueError(f"config is missing module {name!r}")
        if config[name] not in adapter.rank_choices:
            raise ValueError(
                f"rank {config[name]} for {name!r} not in choices {list(adapter.rank_choices)}"
            )


def merge(model: Model, adapter: SuperAdapter, config: SubAdapterConfig) -> tuple[Model, PruneReport]:
    """Fold each active delta into its base weight; pure, original untouched.

    The returned report re-scans the merged targets: a trained adapter's B @ A
    is generically dense, so the merged sparsity collapses toward zero.
    """
    validate_config(adapter, config)
    merged = model.copy()
    for name, rank in config.items():
        merged.weights[name] = merged.weights[name] + delta(adapter, name, rank)
    merged.frozen_hash = None
    report = scan_report(merged, list(adapter.pairs.keys()), model.prune_sparsity or 0.0)
    return merged, report
