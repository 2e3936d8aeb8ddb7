"""Independent test oracles: straight float64 numpy, no shared code paths
with the library kernels they check."""

from __future__ import annotations

import math

import numpy as np

# Architecture constants mirrored by hand; if the model changes, these tests
# must fail loudly rather than follow along.
EMBED_GAIN = 50.0  # 1 / 0.02


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop float64 product, rounded to float32 at the end."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out.astype(np.float32)


def column_norms_loop(x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[1], dtype=np.float64)
    for j in range(x.shape[1]):
        acc = 0.0
        for i in range(x.shape[0]):
            acc += float(x[i, j]) ** 2
        out[j] = math.sqrt(acc)
    return out


def prune_rows_fullsort(w: np.ndarray, scores: np.ndarray, s: float) -> np.ndarray:
    """Full-sort pruning oracle with the same tie rule: among equal scores the
    larger column index goes first."""
    out = w.copy()
    cols = w.shape[1]
    n_prune = int(math.floor(s * cols))
    for i in range(w.shape[0]):
        order = sorted(range(cols), key=lambda j: (float(scores[i, j]), -j))
        for j in order[:n_prune]:
            out[i, j] = 0.0
    return out


def _softmax64(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def reference_forward(model, batch, adapters=None, active=None, override=None):
    """Float64 re-implementation of the forward pass.

    `override` maps (module, "a" | "b") to a float64 array standing in for the
    stored adapter tensor, which lets finite differences perturb a single
    entry exactly.
    """
    override = override or {}
    cfg = model.config

    def adapter_tensor(name, which):
        if (name, which) in override:
            return override[(name, which)]
        pair = adapters.pairs[name]
        return (pair.a if which == "a" else pair.b).astype(np.float64)

    def lin(name, t):
        w = model.weights[name].astype(np.float64)
        out = t @ w.T
        if adapters is not None and name in adapters.pairs:
            rank = active[name]
            a = adapter_tensor(name, "a")[:rank, :]
            b = adapter_tensor(name, "b")[:, :rank]
            out = out + (adapters.alpha / rank) * ((t @ a.T) @ b.T)
        return out

    x = model.embedding.astype(np.float64)[batch.tokens] * EMBED_GAIN
    for i in range(cfg.n_blocks):
        q = lin(f"b{i}.q", x)
        k = lin(f"b{i}.k", x)
        v = lin(f"b{i}.v", x)
        attn = _softmax64(q @ k.swapaxes(-1, -2) / math.sqrt(cfg.d_model))
        x = x + lin(f"b{i}.o", attn @ v)
        gate = lin(f"b{i}.gate", x)
        up = lin(f"b{i}.up", x)
        hidden = (gate / (1.0 + np.exp(-gate))) * up
        x = x + lin(f"b{i}.down", hidden)
    pooled = x.mean(axis=1)
    return pooled @ model.head.astype(np.float64)


def reference_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def fd_adapter_gradient(model, adapters, active, batch, name, which, index, eps=1e-3):
    """Central finite difference of the float64 reference loss w.r.t. one
    adapter entry."""
    base = (adapters.pairs[name].a if which == "a" else adapters.pairs[name].b).astype(np.float64)
    losses = []
    for sign in (+1.0, -1.0):
        perturbed = base.copy()
        perturbed[index] += sign * eps
        logits = reference_forward(
            model, batch, adapters, active, override={(name, which): perturbed}
        )
        losses.append(reference_loss(logits, batch.labels))
    return (losses[0] - losses[1]) / (2.0 * eps)


def pareto_fronts_bruteforce(objectives: list[tuple[float, int]]) -> list[list[int]]:
    """Peel fronts by repeated O(n^2) dominance scans (maximize first objective,
    minimize second)."""

    def dominates(a, b):
        return a[0] >= b[0] and a[1] <= b[1] and (a[0] > b[0] or a[1] < b[1])

    remaining = list(range(len(objectives)))
    fronts = []
    while remaining:
        front = [
            i
            for i in remaining
            if not any(dominates(objectives[j], objectives[i]) for j in remaining if j != i)
        ]
        fronts.append(front)
        remaining = [i for i in remaining if i not in front]
    return fronts
