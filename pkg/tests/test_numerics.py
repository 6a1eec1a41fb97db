import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tmpsched.numerics import (FD_STEP, ToyShardedModel, Var, add_n, allreduce_grad_identity, backward, matmul,
                               recompute_elision_equivalence, square_sum, tanh, total)


def test_single_worker_is_exact():
    r = allreduce_grad_identity(1, seed=3)
    assert r.autodiff_deviation == 0.0


def test_four_workers_eight_by_eight():
    assert allreduce_grad_identity(4, shape=(8, 8), seed=1).max_deviation < 1e-8


@pytest.mark.parametrize("w", [1, 2, 4, 8])
def test_linear_loss_gives_unit_gradients(w):
    xs = [Var(np.random.default_rng(w).normal(size=(3, 3))) for _ in range(w)]
    backward(total(add_n(xs)))
    for x in xs:
        assert np.array_equal(x.grad, np.ones((3, 3)))
    assert allreduce_grad_identity(w, shape=(3, 3), loss="linear").autodiff_deviation == 0.0


def test_bad_arguments():
    with pytest.raises(ValueError):
        allreduce_grad_identity(0)
    with pytest.raises(ValueError):
        allreduce_grad_identity(2, shape=())
    with pytest.raises(ValueError):
        allreduce_grad_identity(2, loss="cubic")
    with pytest.raises(ValueError):
        ToyShardedModel.random(3, d_ff=8)


def test_tape_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def f(a_val):
        return float(np.sum(np.tanh(a_val @ b) ** 2))

    av = Var(a)
    backward(square_sum(tanh(matmul(av, Var(b)))))
    fd = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        e = np.zeros_like(a)
        e[idx] = FD_STEP
        fd[idx] = (f(a + e) - f(a - e)) / (2 * FD_STEP)
    np.testing.assert_allclose(av.grad, fd, atol=1e-8)


def test_sharded_model_reproduces_unsharded_output():
    for w in (1, 2, 4, 8):
        m = ToyShardedModel.random(w, seed=w)
        assert np.max(np.abs(m.forward() - m.unsharded_output())) < 1e-10


def test_elision_single_worker():
    assert recompute_elision_equivalence(ToyShardedModel.random(1, seed=0)) == 0.0


def test_elision_two_workers_small_ffn():
    assert recompute_elision_equivalence(ToyShardedModel.random(2, d_model=4, d_ff=4, seed=5)) < 1e-10


def test_elision_hundred_trials_four_workers():
    for seed in range(100):
        assert recompute_elision_equivalence(ToyShardedModel.random(4, seed=seed)) < 1e-10


def test_loss_bit_identical_between_paths():
    m = ToyShardedModel.random(4, seed=9)
    assert m.grads_full_replay()[0] == m.grads_elided()[0]


@settings(max_examples=30)
@given(st.integers(1, 8), st.integers(0, 2**31), st.lists(st.integers(1, 4), min_size=1, max_size=3))
def test_worker_gradients_identical(w, seed, shape):
    rng = np.random.default_rng(seed)
    xs = [Var(rng.normal(size=shape)) for _ in range(w)]
    y = add_n(xs)
    backward(square_sum(tanh(y)))
    for x in xs[1:]:
        assert np.array_equal(x.grad, xs[0].grad)
    assert np.array_equal(xs[0].grad, y.grad)
