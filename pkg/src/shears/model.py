"""Toy transformer classifier with globally named linear target modules.

Architecture: embed -> n_blocks x [single-head softmax attention + residual ->
gated FFN (silu(gate) * up -> down) + residual] -> mean-pool over sequence ->
classifier head. No layer norm, no positional encoding, no biases; the named
target modules (q, k, v, o, up, gate, down per block) are the only matrices the
pruning and adapter stages touch.

Target-module weights are stored [out_features x in_features]; a linear applies
as x @ W.T, so row i of W holds the weights feeding output feature i and the
columns line up with the module's input features.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable

import numpy as np

from . import tape
from .errors import NumericError
from .linalg import F32, CsrMatrix, Rng, csr_matmul

if TYPE_CHECKING:
    from .adapters import SuperAdapter

TARGET_KINDS = ("q", "k", "v", "o", "up", "gate", "down")

INIT_STD = 0.02

# Fixed read-out gain on the embedding lookup, the usual sqrt(d_model)-style
# input scaling: it puts token activations at unit scale so the norm-free
# blocks start in a trainable regime.
EMBED_GAIN = 1.0 / INIT_STD


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_blocks: int
    d_ff: int
    n_classes: int
    seq_len: int
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_blocks", "d_ff", "n_classes", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class Batch:
    tokens: np.ndarray  # [batch, seq_len] int64
    labels: np.ndarray  # [batch] int64

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)


def module_dims(cfg: ModelConfig, kind: str) -> tuple[int, int]:
    """(out_features, in_features) of a target-module kind."""
    if kind == "down":
        return cfg.d_model, cfg.d_ff
    if kind in ("up", "gate"):
        return cfg.d_ff, cfg.d_model
    if kind in ("q", "k", "v", "o"):
        return cfg.d_model, cfg.d_model
    raise ValueError(f"unknown target-module kind {kind!r}")


def module_names_for(cfg: ModelConfig) -> list[str]:
    return [f"b{i}.{kind}" for i in range(cfg.n_blocks) for kind in TARGET_KINDS]


@dataclass
class Model:
    config: ModelConfig
    embedding: np.ndarray              # [vocab, d_model]
    weights: dict[str, np.ndarray]     # target modules, [out, in]
    head: np.ndarray                   # [d_model, n_classes]
    frozen_hash: str | None = None
    prune_method: str | None = None
    prune_sparsity: float | None = None
    prune_targets: tuple[str, ...] = field(default_factory=tuple)

    @property
    def module_names(self) -> list[str]:
        return list(self.weights.keys())

    def module_in_dim(self, name: str) -> int:
        return self.weights[name].shape[1]

    def copy(self) -> "Model":
        return replace(
            self,
            embedding=self.embedding.copy(),
            weights={k: v.copy() for k, v in self.weights.items()},
            head=self.head.copy(),
        )


def init_model(cfg: ModelConfig, rng: Rng) -> Model:
    """Gaussian(0, 0.02^2) weights drawn in a fixed order; deterministic per seed."""
    cfg.validate()
    embedding = rng.normal((cfg.vocab_size, cfg.d_model), INIT_STD)
    weights: dict[str, np.ndarray] = {}
    for name in module_names_for(cfg):
        out_dim, in_dim = module_dims(cfg, name.split(".")[1])
        weights[name] = rng.normal((out_dim, in_dim), INIT_STD)
    head = rng.normal((cfg.d_model, cfg.n_classes), INIT_STD)
    return Model(config=cfg, embedding=embedding, weights=weights, head=head)


def weights_hash(model: Model, names: Iterable[str] | None = None) -> str:
    """SHA-256 over the named base tensors (all of them by default), in order."""
    if names is None:
        names = ["embedding", *model.module_names, "head"]
    digest = hashlib.sha256()
    for name in names:
        if name == "embedding":
            arr = model.embedding
        elif name == "head":
            arr = model.head
        else:
            arr = model.weights[name]
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr, dtype=F32).tobytes())
    return digest.hexdigest()


def freeze_model(model: Model) -> Model:
    """Copy with the current base-weight hash recorded; training requires this."""
    out = model.copy()
    out.frozen_hash = weights_hash(out)
    return out


def _check_active(adapters: "SuperAdapter", active: dict[str, int]) -> None:
    for name in active:
        if name not in adapters.pairs:
            raise ValueError(f"active config names unknown module {name!r}")
    for name in adapters.pairs:
        if name not in active:
            raise ValueError(f"active config is missing module {name!r}")
        if active[name] not in adapters.rank_choices:
            raise ValueError(
                f"rank {active[name]} for {name!r} not in choices {list(adapters.rank_choices)}"
            )


def _check_batch(model: Model, batch: Batch) -> None:
    cfg = model.config
    if batch.tokens.ndim != 2:
        raise ValueError(f"tokens must be [batch, seq], got shape {batch.tokens.shape}")
    if batch.tokens.size and (batch.tokens.min() < 0 or batch.tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")


def _apply_linear(
    model: Model,
    name: str,
    x: tape.Tensor,
    adapters: "SuperAdapter | None",
    active: dict[str, int] | None,
    leaves: dict[str, tuple[tape.Tensor, tape.Tensor]] | None,
    capture: dict[str, np.ndarray] | None,
    csr_weights: dict[str, CsrMatrix] | None,
) -> tape.Tensor:
    w = model.weights[name]
    if capture is not None and name in capture:
        flat = x.data.reshape(-1, x.data.shape[-1])
        capture[name] += np.sum(flat.astype(np.float64) ** 2, axis=0)
    if csr_weights is not None and name in csr_weights:
        # Inference-only kernel swap; gradients never flow through this path.
        flat = x.data.reshape(-1, x.data.shape[-1])
        out2d = csr_matmul(csr_weights[name], np.ascontiguousarray(flat.T)).T
        base = tape.Tensor(
            np.ascontiguousarray(out2d).reshape(x.data.shape[:-1] + (w.shape[0],))
        )
    else:
        base = tape.matmul(x, tape.Tensor(w.T))
    if adapters is not None and name in adapters.pairs:
        rank = active[name]
        if leaves is not None and name in leaves:
            b_t, a_t = leaves[name]
        else:
            pair = adapters.pairs[name]
            b_t, a_t = tape.Tensor(pair.b[:, :rank]), tape.Tensor(pair.a[:rank, :])
        low = tape.matmul(x, tape.transpose_last(a_t))
        extra = tape.matmul(low, tape.transpose_last(b_t))
        base = tape.add(base, tape.scale(extra, adapters.alpha / rank))
    return base


def _forward_graph(
    model: Model,
    batch: Batch,
    adapters: "SuperAdapter | None" = None,
    active: dict[str, int] | None = None,
    leaves: dict[str, tuple[tape.Tensor, tape.Tensor]] | None = None,
    capture: dict[str, np.ndarray] | None = None,
    csr_weights: dict[str, CsrMatrix] | None = None,
) -> tape.Tensor:
    cfg = model.config
    x = tape.Tensor(model.embedding[batch.tokens] * F32(EMBED_GAIN))
    inv_sqrt_d = 1.0 / math.sqrt(cfg.d_model)

    def lin(name, inp):
        return _apply_linear(model, name, inp, adapters, active, leaves, capture, csr_weights)

    for i in range(cfg.n_blocks):
        q = lin(f"b{i}.q", x)
        k = lin(f"b{i}.k", x)
        v = lin(f"b{i}.v", x)
        scores = tape.scale(tape.matmul(q, tape.transpose_last(k)), inv_sqrt_d)
        attn = tape.softmax_last(scores)
        ctx = tape.matmul(attn, v)
        x = tape.add(x, lin(f"b{i}.o", ctx))
        gate = lin(f"b{i}.gate", x)
        up = lin(f"b{i}.up", x)
        hidden = tape.mul(tape.silu(gate), up)
        x = tape.add(x, lin(f"b{i}.down", hidden))

    pooled = tape.mean_axis1(x)
    return tape.matmul(pooled, tape.Tensor(model.head))


def _resolve_active(
    adapters: "SuperAdapter | None", active: dict[str, int] | None
) -> dict[str, int] | None:
    if active is not None:
        if adapters is None:
            raise ValueError("an active config requires adapters")
        _check_active(adapters, active)
        return active
    if adapters is not None:
        return {name: adapters.rank_choices[0] for name in adapters.pairs}
    return None


def forward(
    model: Model,
    batch: Batch,
    adapters: "SuperAdapter | None" = None,
    active: dict[str, int] | None = None,
    csr_weights: dict[str, CsrMatrix] | None = None,
) -> np.ndarray:
    """Logits [batch, n_classes]; with adapters attached but omitted `active`,
    the maximal config is used."""
    _check_batch(model, batch)
    active = _resolve_active(adapters, active)
    logits = _forward_graph(model, batch, adapters, active, csr_weights=csr_weights).data
    if not np.isfinite(logits).all():
        raise NumericError("forward produced non-finite logits")
    return logits


def loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy via float64 log-sum-exp."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"shape mismatch: logits {logits.shape}, labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(labels.shape[0]), labels].mean())


def capture_activations(
    model: Model, batches: list[Batch], targets: Iterable[str]
) -> dict[str, np.ndarray]:
    """One forward-only pass per batch accumulating per-input-feature L2 norms.

    Sums of squares accumulate in float64 over every token of every batch;
    sqrt is taken once at the end, so norms are independent of batch
    partitioning.
    """
    targets = list(targets)
    unknown = [t for t in targets if t not in model.weights]
    if unknown:
        raise ValueError(f"unknown target modules: {unknown}")
    if not batches:
        raise ValueError("calibration requires at least one batch")
    acc = {name: np.zeros(model.module_in_dim(name), dtype=np.float64) for name in targets}
    for batch in batches:
        _check_batch(model, batch)
        _forward_graph(model, batch, capture=acc)
    return {name: np.sqrt(total) for name, total in acc.items()}


def _loss_and_grads(
    model: Model,
    adapters: "SuperAdapter",
    active: dict[str, int],
    batch: Batch,
) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
    leaves = {}
    for name, pair in adapters.pairs.items():
        rank = active[name]
        leaves[name] = (
            tape.Tensor(pair.b[:, :rank], requires_grad=True),
            tape.Tensor(pair.a[:rank, :], requires_grad=True),
        )
    logits = _forward_graph(model, batch, adapters, active, leaves=leaves)
    loss_node = tape.cross_entropy(logits, batch.labels)
    tape.backward(loss_node)
    grads = {}
    for name, (b_t, a_t) in leaves.items():
        gb = b_t.grad if b_t.grad is not None else np.zeros_like(b_t.data)
        ga = a_t.grad if a_t.grad is not None else np.zeros_like(a_t.data)
        grads[name] = (gb, ga)
    return float(loss_node.data), grads


def adapter_gradients(
    model: Model,
    adapters: "SuperAdapter",
    active: dict[str, int] | None,
    batch: Batch,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Exact loss gradients w.r.t. the active slices of each (B, A) pair.

    Returns {module: (dB [out x r], dA [r x in])}; inactive rank tails are not
    represented at all, and base weights receive no gradient by construction.
    """
    _check_batch(model, batch)
    active = _resolve_active(adapters, active)
    _, grads = _loss_and_grads(model, adapters, active, batch)
    return grads
