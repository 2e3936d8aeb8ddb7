"""Non-zero parameter accounting and dense-vs-CSR inference benchmarking."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .adapters import SubAdapterConfig, SuperAdapter, merge, validate_config
from .linalg import Rng, csr_from_dense
from .model import Batch, Model, forward
from .pruning import PruneReport, scan_report


@dataclass
class ParamReport:
    base_total: int
    base_nonzero: int
    adapter_active_params: int
    adapter_nonzero: int
    global_nonzero_unmerged: int
    global_nonzero_merged: int | None
    base_sparsity: float
    unmerged_sparsity: float
    merged_sparsity: float | None

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def count_params(
    model: Model,
    adapter: SuperAdapter | None = None,
    config: SubAdapterConfig | None = None,
    merged: bool = False,
) -> ParamReport:
    """Parameter accounting by direct tensor scan.

    Counts come from scanning the tensors themselves (np.count_nonzero and
    slice sizes); the closed-form totals live in the tests as the oracle.
    """
    if (adapter is None) != (config is None):
        raise ValueError("adapter and config must be given together")
    if merged and adapter is None:
        raise ValueError("merged accounting requires an adapter and config")

    tensors = [model.embedding, *model.weights.values(), model.head]
    base_total = sum(t.size for t in tensors)
    base_nonzero = sum(int(np.count_nonzero(t)) for t in tensors)

    adapter_active = 0
    adapter_nonzero = 0
    if adapter is not None:
        for name, pair in adapter.pairs.items():
            rank = config[name]
            b_slice, a_slice = pair.b[:, :rank], pair.a[:rank, :]
            adapter_active += b_slice.size + a_slice.size
            adapter_nonzero += int(np.count_nonzero(b_slice)) + int(np.count_nonzero(a_slice))

    merged_nonzero = None
    merged_sparsity = None
    if merged:
        merged_model, _ = merge(model, adapter, config)
        merged_tensors = [merged_model.embedding, *merged_model.weights.values(), merged_model.head]
        merged_nonzero = sum(int(np.count_nonzero(t)) for t in merged_tensors)
        merged_sparsity = 1.0 - merged_nonzero / base_total

    unmerged_total = base_total + adapter_active
    return ParamReport(
        base_total=base_total,
        base_nonzero=base_nonzero,
        adapter_active_params=adapter_active,
        adapter_nonzero=adapter_nonzero,
        global_nonzero_unmerged=base_nonzero + adapter_nonzero,
        global_nonzero_merged=merged_nonzero,
        base_sparsity=1.0 - base_nonzero / base_total,
        unmerged_sparsity=1.0 - (base_nonzero + adapter_nonzero) / unmerged_total,
        merged_sparsity=merged_sparsity,
    )


def prune_report_with_adapters(
    model: Model, adapter: SuperAdapter, config: SubAdapterConfig
) -> PruneReport:
    """Re-scan the pruned targets and fill in the sparsity-including-adapters
    figure for the active slices of an attached (unmerged) adapter."""
    if model.prune_sparsity is None:
        raise ValueError("prune_report_with_adapters requires a pruned model")
    validate_config(adapter, config)
    adapter_total = 0
    adapter_nonzero = 0
    for name, pair in adapter.pairs.items():
        rank = config[name]
        b_slice, a_slice = pair.b[:, :rank], pair.a[:rank, :]
        adapter_total += b_slice.size + a_slice.size
        adapter_nonzero += int(np.count_nonzero(b_slice)) + int(np.count_nonzero(a_slice))
    return scan_report(
        model,
        list(model.prune_targets),
        model.prune_sparsity,
        adapter_nonzero=adapter_nonzero,
        adapter_total=adapter_total,
    )


@dataclass
class BenchCase:
    batch: int
    seq_len: int
    dense_median_s: float
    csr_median_s: float
    speedup: float
    max_abs_diff: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class BenchReport:
    repetitions: int
    sparsity: float
    cases: list[BenchCase] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "repetitions": self.repetitions,
            "sparsity": self.sparsity,
            "cases": [c.to_dict() for c in self.cases],
        }


def _median_seconds(fn, repetitions: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return sorted(times)[len(times) // 2]


def bench_inference(
    model: Model,
    adapter: SuperAdapter | None,
    config: SubAdapterConfig | None,
    input_sizes: list[tuple[int, int]],
    repetitions: int = 5,
    seed: int = 0,
) -> BenchReport:
    """Median forward wall-clock for the dense path vs the CSR kernel path.

    Both paths run the same unmerged forward; only the base product of the
    pruned target modules swaps kernels. Timing is pinned to one BLAS thread
    so the comparison is fair; outputs of the two paths must agree closely
    and the report records their max divergence.
    """
    if model.prune_sparsity is None:
        raise ValueError("bench_inference requires a pruned model")
    if repetitions < 3:
        raise ValueError(f"repetitions must be >= 3, got {repetitions}")

    csr_weights = {name: csr_from_dense(model.weights[name]) for name in model.prune_targets}
    rng = Rng(seed)
    report = BenchReport(repetitions=repetitions, sparsity=model.prune_sparsity)
    with threadpool_limits(limits=1):
        for batch_size, seq_len in input_sizes:
            tokens = np.asarray(
                rng.integers(0, model.config.vocab_size, size=(batch_size, seq_len))
            )
            batch = Batch(tokens=tokens, labels=np.zeros(batch_size, dtype=np.int64))

            dense_out = forward(model, batch, adapter, config)
            csr_out = forward(model, batch, adapter, config, csr_weights=csr_weights)
            max_diff = float(np.abs(dense_out - csr_out).max())

            dense_t = _median_seconds(lambda: forward(model, batch, adapter, config), repetitions)
            csr_t = _median_seconds(
                lambda: forward(model, batch, adapter, config, csr_weights=csr_weights),
                repetitions,
            )
            report.cases.append(
                BenchCase(
                    batch=batch_size,
                    seq_len=seq_len,
                    dense_median_s=dense_t,
                    csr_median_s=csr_t,
                    speedup=dense_t / csr_t,
                    max_abs_diff=max_diff,
                )
            )
    return report
