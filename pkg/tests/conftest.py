import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shears import (
    Batch,
    ModelConfig,
    TaskKind,
    TaskSpec,
    attach,
    generate,
    init_model,
    sparsify_model,
)
from shears.linalg import Rng
from shears.nls import TrainConfig, train

TINY_CFG = ModelConfig(
    vocab_size=11, d_model=8, n_blocks=1, d_ff=16, n_classes=3, seq_len=6, seed=1
)

ADAPTER_KINDS = ("q", "k", "v", "up", "down")


def adapter_targets(model):
    return [n for n in model.module_names if n.split(".")[1] in ADAPTER_KINDS]


@pytest.fixture
def tiny_model():
    return init_model(TINY_CFG, Rng(TINY_CFG.seed))


@pytest.fixture
def tiny_batch():
    rng = Rng(99)
    tokens = np.asarray(rng.integers(0, TINY_CFG.vocab_size, size=(4, TINY_CFG.seq_len)))
    labels = np.asarray(rng.integers(0, TINY_CFG.n_classes, size=4))
    return Batch(tokens=tokens, labels=labels)


def build_pipeline(kind=TaskKind.KEY_LOOKUP, seed=0, epochs=5, n_train=2000, sparsity=0.5):
    """Prune -> attach -> train at the desk-scale defaults; returns all stages."""
    model_cfg = ModelConfig(
        vocab_size=16, d_model=32, n_blocks=2, d_ff=128, n_classes=4, seq_len=16, seed=seed
    )
    task = TaskSpec(
        kind=kind,
        n_train=n_train,
        n_val=300,
        n_test=400,
        seq_len=16,
        vocab_size=16,
        n_classes=4,
        seed=seed + 100,
    )
    train_data, val_data, test_data = generate(task)
    model = init_model(model_cfg, Rng(model_cfg.seed))
    calib = [train_data.batch(np.arange(32))]
    pruned, report = sparsify_model(model, calib, model.module_names, sparsity)
    adapter = attach(pruned, adapter_targets(pruned), rank_choices=(32, 24, 16), alpha=64.0,
                     rng=Rng(seed + 2))
    cfg = TrainConfig(epochs=epochs, batch_size=16, learning_rate=3e-4, seed=seed + 3)
    trained, log = train(pruned, adapter, train_data, val_data, cfg)
    return {
        "model_cfg": model_cfg,
        "task": task,
        "model": model,
        "pruned": pruned,
        "prune_report": report,
        "adapter": adapter,
        "trained": trained,
        "log": log,
        "train_data": train_data,
        "val_data": val_data,
        "test_data": test_data,
    }


@pytest.fixture(scope="session")
def trained_keylookup():
    return build_pipeline(kind=TaskKind.KEY_LOOKUP, seed=0)


@pytest.fixture(scope="session")
def trained_majority():
    # vocab 16, 2k samples, d_model 32, 50% sparsity: the pinned desk recipe
    return build_pipeline(kind=TaskKind.MAJORITY_TOKEN, seed=0)
