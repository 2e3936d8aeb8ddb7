import numpy as np
import pytest

from conftest import TINY_CFG
from shears import (
    attach,
    delta,
    forward,
    init_model,
    maximal_config,
    merge,
    minimal_config,
    weights_hash,
)
from shears.adapters import SuperAdapter, validate_config
from shears.linalg import Rng


def _randomized(adapter: SuperAdapter, seed=70, std=0.05) -> SuperAdapter:
    """Trained-looking copy: both factors dense and non-zero."""
    out = adapter.copy()
    rng = Rng(seed)
    for pair in out.pairs.values():
        pair.b[:] = rng.normal(pair.b.shape, std=std)
        pair.a[:] = rng.normal(pair.a.shape, std=std)
    return out


@pytest.fixture
def model():
    return init_model(TINY_CFG, Rng(TINY_CFG.seed))


@pytest.fixture
def adapter(model):
    return attach(model, ["b0.q", "b0.v", "b0.up", "b0.down"], rank_choices=(8, 6, 4),
                  alpha=16.0, rng=Rng(2))


class TestAttach:
    def test_b_is_exactly_zero(self, adapter):
        assert max(np.abs(p.b).max() for p in adapter.pairs.values()) == 0.0

    def test_zero_init_forward_neutral(self, model, adapter, tiny_batch):
        plain = forward(model, tiny_batch)
        attached = forward(model, tiny_batch, adapter, maximal_config(adapter))
        assert np.array_equal(plain, attached)

    def test_same_seed_identical_a(self, model):
        a1 = attach(model, ["b0.q"], rank_choices=(4,), rng=Rng(5))
        a2 = attach(model, ["b0.q"], rank_choices=(4,), rng=Rng(5))
        assert np.array_equal(a1.pairs["b0.q"].a, a2.pairs["b0.q"].a)

    def test_shapes(self, model, adapter):
        for name, pair in adapter.pairs.items():
            out_dim, in_dim = model.weights[name].shape
            assert pair.b.shape == (out_dim, 8)
            assert pair.a.shape == (8, in_dim)

    def test_unknown_target(self, model):
        with pytest.raises(ValueError, match="unknown"):
            attach(model, ["b3.q"], rank_choices=(4,), rng=Rng(5))

    def test_bad_rank_choices(self, model):
        for bad in ((), (4, 4), (2, 4), (4, 0)):
            with pytest.raises(ValueError, match="rank_choices"):
                attach(model, ["b0.q"], rank_choices=bad, rng=Rng(5))


class TestDelta:
    def test_zero_b_gives_zero_delta(self, adapter):
        for rank in adapter.rank_choices:
            assert np.all(delta(adapter, "b0.q", rank) == 0.0)

    def test_alpha_equal_rmax_cancels_scaling(self, model):
        adapter = _randomized(
            attach(model, ["b0.q"], rank_choices=(8, 4), alpha=8.0, rng=Rng(3))
        )
        pair = adapter.pairs["b0.q"]
        want = (pair.b.astype(np.float64) @ pair.a.astype(np.float64)).astype(np.float32)
        assert np.allclose(delta(adapter, "b0.q", 8), want, atol=1e-7)

    def test_slicing_equivalence_standalone(self, model, adapter):
        trained = _randomized(adapter)
        for rank in trained.rank_choices:
            for name, pair in trained.pairs.items():
                standalone = SuperAdapter(
                    pairs={name: type(pair)(b=pair.b[:, :rank].copy(), a=pair.a[:rank, :].copy())},
                    rank_choices=(rank,),
                    alpha=trained.alpha,
                )
                assert np.abs(
                    delta(trained, name, rank) - delta(standalone, name, rank)
                ).max() < 1e-6

    def test_invalid_rank(self, adapter):
        with pytest.raises(ValueError, match="rank"):
            delta(adapter, "b0.q", 5)

    def test_unknown_module(self, adapter):
        with pytest.raises(ValueError, match="unknown"):
            delta(adapter, "b0.gate", 4)


class TestNamedConfigs:
    def test_maximal_minimal(self, adapter):
        assert set(maximal_config(adapter).values()) == {8}
        assert set(minimal_config(adapter).values()) == {4}

    def test_paper_style_choices(self, model):
        adapter = attach(model, ["b0.q"], rank_choices=(32, 24, 16), rng=Rng(4))
        assert maximal_config(adapter) == {"b0.q": 32}
        assert minimal_config(adapter) == {"b0.q": 16}

    def test_single_choice_degenerate(self, model):
        adapter = attach(model, ["b0.q"], rank_choices=(8,), rng=Rng(4))
        assert maximal_config(adapter) == minimal_config(adapter)

    def test_validate_config(self, adapter):
        validate_config(adapter, maximal_config(adapter))
        with pytest.raises(ValueError, match="missing"):
            validate_config(adapter, {"b0.q": 8})
        with pytest.raises(ValueError, match="unknown"):
            validate_config(adapter, {**maximal_config(adapter), "b0.k": 8})


class TestMerge:
    def test_fresh_adapter_is_identity(self, model, adapter, tiny_batch):
        merged, report = merge(model, adapter, maximal_config(adapter))
        for name in adapter.pairs:
            assert np.array_equal(merged.weights[name], model.weights[name])

    def test_trained_merge_densifies(self, model, adapter):
        from shears import sparsify_model
        from shears.model import Batch

        calib = [tiny := Batch(tokens=np.zeros((2, 6), dtype=np.int64),
                               labels=np.zeros(2, dtype=np.int64))]
        pruned, before = sparsify_model(model, calib, list(adapter.pairs), 0.5)
        trained = _randomized(adapter)
        merged, after = merge(pruned, trained, maximal_config(trained))
        assert before.global_target_sparsity == 0.5
        assert after.global_target_sparsity < 0.01

    def test_forward_equivalence_within_1e4(self, model, adapter, tiny_batch):
        trained = _randomized(adapter, std=0.02)
        config = {name: 6 for name in trained.pairs}
        unmerged = forward(model, tiny_batch, trained, config)
        merged, _ = merge(model, trained, config)
        assert np.abs(forward(merged, tiny_batch) - unmerged).max() < 1e-4

    def test_merge_is_pure(self, model, adapter):
        trained = _randomized(adapter)
        before = weights_hash(model)
        merge(model, trained, maximal_config(trained))
        assert weights_hash(model) == before

    def test_invalid_config(self, model, adapter):
        with pytest.raises(ValueError, match="missing"):
            merge(model, adapter, {"b0.q": 8})


class TestAdapterInvariants:
    def test_prefix_nesting(self, adapter):
        trained = _randomized(adapter)
        pair = trained.pairs["b0.q"]
        for smaller, larger in ((4, 6), (6, 8), (4, 8)):
            assert np.array_equal(pair.a[:smaller, :], pair.a[:larger, :][:smaller, :])
            assert np.array_equal(pair.b[:, :smaller], pair.b[:, :larger][:, :smaller])

    def test_monotone_param_count(self, model, adapter):
        from shears.nls import active_param_count

        counts = [
            active_param_count(adapter, {name: rank for name in adapter.pairs})
            for rank in sorted(adapter.rank_choices)
        ]
        assert counts == sorted(counts) and len(set(counts)) == len(counts)

    def test_neutrality_on_many_random_batches(self, model, adapter):
        rng = Rng(77)
        for _ in range(10):
            tokens = np.asarray(rng.integers(0, TINY_CFG.vocab_size, size=(3, TINY_CFG.seq_len)))
            from shears.model import Batch

            batch = Batch(tokens=tokens, labels=np.zeros(3, dtype=np.int64))
            assert np.array_equal(
                forward(model, batch), forward(model, batch, adapter, maximal_config(adapter))
            )
