"""Unstructured row-wise sparsification of target modules.

Scoring is pluggable: "wanda" weighs each entry by |w| times the L2 norm of
that input feature's activations over a small calibration pass; "magnitude"
is the same with all norms set to one. Each row zeroes its floor(s * cols)
lowest-scoring entries exactly once, before adapter training, and the result
is frozen (hash recorded) for the rest of the pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import F32
from .model import Batch, Model, capture_activations, weights_hash


class PruneMethod(str, Enum):
    WANDA = "wanda"
    MAGNITUDE = "magnitude"


@dataclass
class ModulePruneStats:
    name: str
    shape: tuple[int, int]
    requested_sparsity: float
    nnz: int
    achieved_sparsity: float

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "shape": list(self.shape),
            "requested_sparsity": self.requested_sparsity,
            "nnz": self.nnz,
            "achieved_sparsity": self.achieved_sparsity,
        }


@dataclass
class PruneReport:
    requested_sparsity: float
    modules: list[ModulePruneStats]
    target_total: int
    target_nonzero: int
    global_target_sparsity: float
    global_sparsity_with_adapters: float | None = None

    def to_dict(self) -> dict:
        return {
            "requested_sparsity": self.requested_sparsity,
            "modules": [m.to_dict() for m in self.modules],
            "target_total": self.target_total,
            "target_nonzero": self.target_nonzero,
            "global_target_sparsity": self.global_target_sparsity,
            "global_sparsity_with_adapters": self.global_sparsity_with_adapters,
        }


def wanda_scores(w: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Importance S[i][j] = |w[i][j]| * norms[j]."""
    w = np.asarray(w, dtype=F32)
    norms = np.asarray(norms)
    if norms.ndim != 1 or norms.shape[0] != w.shape[1]:
        raise ValueError(f"norms length {norms.shape} does not match weight cols {w.shape}")
    if norms.size and norms.min() < 0:
        raise ValueError("norms must be non-negative")
    return np.abs(w) * norms.astype(F32)[None, :]


def prune_count(sparsity: float, cols: int) -> int:
    return int(math.floor(sparsity * cols))


def prune_rows(w: np.ndarray, scores: np.ndarray, s: float) -> np.ndarray:
    """Zero the floor(s * cols) lowest-scoring entries of each row.

    Ties are broken deterministically: among equal scores the larger column
    index is pruned first. Surviving entries are bit-identical to the input.
    """
    w = np.asarray(w, dtype=F32)
    scores = np.asarray(scores, dtype=F32)
    if w.shape != scores.shape:
        raise ValueError(f"shape mismatch: weights {w.shape}, scores {scores.shape}")
    if not 0.0 <= s < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {s}")
    out = w.copy()
    n_prune = prune_count(s, w.shape[1])
    if n_prune == 0:
        return out
    neg_cols = -np.arange(w.shape[1])
    for i in range(w.shape[0]):
        order = np.lexsort((neg_cols, scores[i]))  # score asc, then larger col first
        out[i, order[:n_prune]] = 0.0
    return out


def scan_report(
    model: Model,
    targets: list[str],
    requested_sparsity: float,
    adapter_nonzero: int | None = None,
    adapter_total: int | None = None,
) -> PruneReport:
    """Sparsity accounting by direct tensor scan over the target modules."""
    stats = []
    total = 0
    nonzero = 0
    for name in targets:
        w = model.weights[name]
        nnz = int(np.count_nonzero(w))
        stats.append(
            ModulePruneStats(
                name=name,
                shape=w.shape,
                requested_sparsity=requested_sparsity,
                nnz=nnz,
                achieved_sparsity=1.0 - nnz / w.size,
            )
        )
        total += w.size
        nonzero += nnz
    with_adapters = None
    if adapter_nonzero is not None and adapter_total is not None:
        with_adapters = 1.0 - (nonzero + adapter_nonzero) / (total + adapter_total)
    return PruneReport(
        requested_sparsity=requested_sparsity,
        modules=stats,
        target_total=total,
        target_nonzero=nonzero,
        global_target_sparsity=1.0 - nonzero / total if total else 0.0,
        global_sparsity_with_adapters=with_adapters,
    )


def sparsify_model(
    model: Model,
    calib: list[Batch],
    targets,
    s: float,
    method: PruneMethod = PruneMethod.WANDA,
) -> tuple[Model, PruneReport]:
    """Prune every target module once and freeze the result.

    Wanda norms come from a single calibration pass over `calib`; magnitude
    uses all-ones norms. Non-target matrices (embedding, head, unlisted
    modules) are untouched. The returned model records the prune settings and
    the hash of all base weights; the input model is not modified.
    """
    method = PruneMethod(method)
    targets = list(targets)
    if not targets:
        raise ValueError("sparsify_model requires a non-empty target set")
    unknown = [t for t in targets if t not in model.weights]
    if unknown:
        raise ValueError(f"unknown target modules: {unknown}")
    if not 0.0 <= s < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {s}")
    if method is PruneMethod.WANDA:
        if not calib:
            raise ValueError("wanda pruning requires a non-empty calibration set")
        norms = capture_activations(model, calib, targets)
    else:
        norms = {name: np.ones(model.module_in_dim(name), dtype=np.float64) for name in targets}

    pruned = model.copy()
    for name in model.module_names:
        if name not in targets:
            continue
        scores = wanda_scores(pruned.weights[name], norms[name])
        pruned.weights[name] = prune_rows(pruned.weights[name], scores, s)
    pruned.prune_method = method.value
    pruned.prune_sparsity = float(s)
    pruned.prune_targets = tuple(t for t in model.module_names if t in targets)
    pruned.frozen_hash = weights_hash(pruned)
    return pruned, scan_report(pruned, list(pruned.prune_targets), s)
