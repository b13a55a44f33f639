"""Adam optimizer, parameter store, and checkpoint round trips."""

import numpy as np
import pytest

from debiasrank import tensor as T
from debiasrank.checkpoint import (CheckpointError, load_checkpoint,
                                   read_checkpoint, save_checkpoint)
from debiasrank.optim import AdamState, ParameterStore, adam_step, seed_for


def reference_adam(values, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Independent scalar-at-a-time Adam, stepped once per grads entry."""
    x = float(values)
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        x -= lr * mhat / (np.sqrt(vhat) + eps)
    return x


class TestParameterStore:
    def test_register_and_lookup(self):
        store = ParameterStore()
        p = store.register("w", np.zeros((2, 3)))
        assert store["w"] is p and p.requires_grad
        assert store.names() == ["w"]
        assert store.n_values() == 6

    def test_duplicate_name_rejected(self):
        store = ParameterStore()
        store.register("w", np.zeros(2))
        with pytest.raises(ValueError, match="already registered"):
            store.register("w", np.zeros(2))

    def test_snapshot_and_load_roundtrip(self):
        store = ParameterStore()
        store.register("a", np.arange(4.0))
        snap = store.snapshot()
        store["a"].values[...] = 0.0
        store.load(snap)
        np.testing.assert_array_equal(store["a"].values, np.arange(4.0))

    def test_seed_for_is_name_stable(self):
        a1 = seed_for(3, "x").normal(size=4)
        a2 = seed_for(3, "x").normal(size=4)
        b = seed_for(3, "y").normal(size=4)
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(a1, b)


class TestAdam:
    def test_first_step_magnitude(self):
        # bias correction cancels on the first step: delta = -lr*g/(|g|+eps)
        store = ParameterStore()
        p = store.register("x", np.array([2.0]))
        state = AdamState.for_store(store, lr=0.1)
        p.accumulate_grad(np.array([1.0]))
        adam_step(store, state)
        np.testing.assert_allclose(p.values, 2.0 - 0.1, atol=1e-8)
        assert state.t == 1

    def test_zero_grad_leaves_parameters_unchanged(self):
        store = ParameterStore()
        p = store.register("x", np.array([1.5, -2.5]))
        state = AdamState.for_store(store, lr=0.1)
        p.accumulate_grad(np.zeros(2))
        adam_step(store, state)
        np.testing.assert_array_equal(p.values, [1.5, -2.5])

    def test_two_steps_match_reference(self):
        store = ParameterStore()
        p = store.register("x", np.array([0.7]))
        state = AdamState.for_store(store, lr=0.05)
        for _ in range(2):
            p.accumulate_grad(np.array([0.3]))
            adam_step(store, state)
        expected = reference_adam(0.7, [0.3, 0.3], lr=0.05)
        np.testing.assert_allclose(p.values, [expected], atol=1e-12)

    def test_many_steps_varying_grads_match_reference(self):
        rng = np.random.default_rng(11)
        grads = rng.normal(size=20)
        store = ParameterStore()
        p = store.register("x", np.array([1.0]))
        state = AdamState.for_store(store, lr=0.01)
        for g in grads:
            p.accumulate_grad(np.array([g]))
            adam_step(store, state)
        expected = reference_adam(1.0, grads, lr=0.01)
        np.testing.assert_allclose(p.values, [expected], atol=1e-12)

    def test_missing_grad_names_parameter(self):
        store = ParameterStore()
        store.register("x", np.array([1.0]))
        store.register("dangling", np.array([1.0]))
        store["x"].accumulate_grad(np.array([1.0]))
        state = AdamState.for_store(store, lr=0.1)
        with pytest.raises(T.GraphError, match="dangling"):
            adam_step(store, state)

    def test_grads_zeroed_after_step(self):
        store = ParameterStore()
        p = store.register("x", np.array([1.0]))
        state = AdamState.for_store(store)
        p.accumulate_grad(np.array([2.0]))
        adam_step(store, state)
        np.testing.assert_array_equal(p.grad, [0.0])
        assert p.grad_populated


class TestCheckpoint:
    def _store(self):
        store = ParameterStore()
        rng = np.random.default_rng(5)
        store.register("emb", rng.normal(size=(4, 3)))
        store.register("w", rng.normal(size=(3,)))
        return store

    def test_roundtrip_bit_exact(self, tmp_path):
        store = self._store()
        save_checkpoint(str(tmp_path / "ck"), store, extra={"alpha": 0.5})
        restored = self._store()
        restored["emb"].values[...] = 0.0
        extra = load_checkpoint(str(tmp_path / "ck"), restored)
        assert extra == {"alpha": 0.5}
        for name in store.names():
            assert np.array_equal(store[name].values, restored[name].values)
            assert store[name].values.tobytes() == restored[name].values.tobytes()

    def test_truncated_blob_raises(self, tmp_path):
        store = self._store()
        path = tmp_path / "ck"
        save_checkpoint(str(path), store)
        blob = (path / "params.blob").read_bytes()
        (path / "params.blob").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError, match="blob length"):
            read_checkpoint(str(path))

    def test_missing_parameter_named(self, tmp_path):
        small = ParameterStore()
        small.register("emb", np.zeros((4, 3)))
        save_checkpoint(str(tmp_path / "ck"), small)
        with pytest.raises(CheckpointError, match="'w'"):
            load_checkpoint(str(tmp_path / "ck"), self._store())

    def test_shape_mismatch_named(self, tmp_path):
        store = self._store()
        save_checkpoint(str(tmp_path / "ck"), store)
        other = ParameterStore()
        other.register("emb", np.zeros((2, 3)))
        other.register("w", np.zeros((3,)))
        with pytest.raises(CheckpointError, match="emb"):
            load_checkpoint(str(tmp_path / "ck"), other)
