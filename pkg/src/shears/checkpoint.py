"""Checkpoint directories: meta.json plus one binary tensor file per matrix."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from .adapters import LoraPair, SuperAdapter
from .errors import ArtifactError
from .linalg import load_tensor, save_tensor
from .model import Model, ModelConfig, weights_hash

META_NAME = "meta.json"


def _read_meta(path: Path) -> dict:
    meta_path = path / META_NAME
    if not meta_path.is_file():
        raise ArtifactError(f"missing checkpoint metadata: {meta_path}")
    return json.loads(meta_path.read_text())


def save_model(model: Model, path: Path | str) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {"embedding": "embedding.shrt", "head": "head.shrt"}
    tensors.update({name: f"{name}.shrt" for name in model.module_names})
    meta = {
        "kind": "model",
        "config": asdict(model.config),
        "module_names": model.module_names,
        "prune": {
            "method": model.prune_method,
            "sparsity": model.prune_sparsity,
            "targets": list(model.prune_targets),
        },
        "frozen_hash": model.frozen_hash,
        "tensors": tensors,
    }
    save_tensor(path / tensors["embedding"], model.embedding)
    save_tensor(path / tensors["head"], model.head)
    for name in model.module_names:
        save_tensor(path / tensors[name], model.weights[name])
    (path / META_NAME).write_text(json.dumps(meta, indent=2))


def load_model(path: Path | str) -> Model:
    """Load and verify: a recorded frozen hash must match the loaded tensors."""
    path = Path(path)
    meta = _read_meta(path)
    if meta.get("kind") != "model":
        raise ArtifactError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(**meta["config"])
    tensors = meta["tensors"]
    try:
        embedding = load_tensor(path / tensors["embedding"])
        head = load_tensor(path / tensors["head"])
        weights = {name: load_tensor(path / tensors[name]) for name in meta["module_names"]}
    except (FileNotFoundError, ValueError) as exc:
        raise ArtifactError(f"unreadable checkpoint tensor in {path}: {exc}") from exc
    model = Model(
        config=cfg,
        embedding=embedding,
        weights=weights,
        head=head,
        frozen_hash=meta.get("frozen_hash"),
        prune_method=meta["prune"]["method"],
        prune_sparsity=meta["prune"]["sparsity"],
        prune_targets=tuple(meta["prune"]["targets"]),
    )
    if model.frozen_hash is not None and weights_hash(model) != model.frozen_hash:
        raise ArtifactError(
            f"checkpoint {path} failed its frozen-hash check; tensors were modified"
        )
    return model


def save_adapter(adapter: SuperAdapter, path: Path | str) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, pair in adapter.pairs.items():
        tensors[name] = {"b": f"{name}.b.shrt", "a": f"{name}.a.shrt"}
        save_tensor(path / tensors[name]["b"], pair.b)
        save_tensor(path / tensors[name]["a"], pair.a)
    meta = {
        "kind": "adapter",
        "rank_choices": list(adapter.rank_choices),
        "alpha": adapter.alpha,
        "targets": adapter.modules,
        "trained": adapter.trained,
        "tensors": tensors,
    }
    (path / META_NAME).write_text(json.dumps(meta, indent=2))


def load_adapter(path: Path | str) -> SuperAdapter:
    path = Path(path)
    meta = _read_meta(path)
    if meta.get("kind") != "adapter":
        raise ArtifactError(f"{path} is not an adapter checkpoint")
    pairs = {}
    try:
        for name in meta["targets"]:
            files = meta["tensors"][name]
            pairs[name] = LoraPair(
                b=load_tensor(path / files["b"]), a=load_tensor(path / files["a"])
            )
    except (FileNotFoundError, KeyError, ValueError) as exc:
        raise ArtifactError(f"unreadable adapter tensor in {path}: {exc}") from exc
    return SuperAdapter(
        pairs=pairs,
        rank_choices=tuple(meta["rank_choices"]),
        alpha=meta["alpha"],
        trained=meta["trained"],
    )
