import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from divtok import diversity as dv
from divtok.nn import softmax
from divtok.tensor import Tensor, finite_difference_grad, relative_error


def loop_diversity(a):
    n, m, s = a.shape
    total = 0.0
    for k in range(n):
        for i in range(m):
            for j in range(m):
                if i != j:
                    total += sum(a[k, i, p] * a[k, j, p] for p in range(s)) ** 2
    return total / n


def random_maps(rng, n, m, s):
    return rng.dirichlet(np.ones(s), size=(n, m))


class TestDiversityLoss:
    def test_disjoint_zero(self):
        a = np.array([[[1.0, 0, 0, 0], [0, 1.0, 0, 0]]])
        assert dv.diversity_loss(a).item() == 0.0

    def test_identical_half_maps(self):
        a = np.array([[[0.5, 0.5, 0, 0], [0.5, 0.5, 0, 0]]])
        assert dv.diversity_loss(a).item() == 0.5

    def test_single_token(self):
        assert dv.diversity_loss(np.full((3, 1, 4), 0.25)).item() == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_loop_oracle(self, seed):
        a = random_maps(np.random.default_rng(seed), 2, 3, 4)
        want = loop_diversity(a)
        assert abs(dv.diversity_loss(a).item() - want) / want <= 1e-12

    def test_batch_mean(self):
        a = random_maps(np.random.default_rng(5), 1, 4, 6)
        assert dv.diversity_loss(np.concatenate([a, a, a])).item() == pytest.approx(dv.diversity_loss(a).item(), rel=1e-14)

    def test_equals_off_diagonal_overlap(self):
        a = random_maps(np.random.default_rng(6), 3, 5, 7)
        o = dv.pairwise_overlap_matrix(a)
        off = (o.sum(axis=(1, 2)) - np.trace(o, axis1=1, axis2=2)).mean()
        assert dv.diversity_loss(a).item() == pytest.approx(off, rel=1e-12)

    def test_gradient(self):
        a = random_maps(np.random.default_rng(7), 2, 3, 5)
        x = Tensor(a, requires_grad=True)
        dv.diversity_loss(x).backward()
        assert relative_error(x.grad, finite_difference_grad(dv.diversity_loss, Tensor(a))) <= 1e-6

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            dv.diversity_loss(np.ones((2, 3)))

    @settings(max_examples=40)
    @given(arrays(np.float64, (2, 3, 4), elements=st.floats(-20, 20)))
    def test_non_negative(self, logits):
        assert dv.diversity_loss(softmax(Tensor(logits))).item() >= 0.0


class TestOverlapMatrix:
    def test_one_hot_identity(self):
        a = np.eye(4)[None, :3]
        np.testing.assert_array_equal(dv.pairwise_overlap_matrix(a)[0], np.eye(3))

    def test_uniform(self):
        np.testing.assert_array_equal(dv.pairwise_overlap_matrix(np.full((1, 3, 4), 0.25)), np.full((1, 3, 3), 0.0625))

    def test_loop_oracle_and_symmetry(self):
        a = random_maps(np.random.default_rng(8), 2, 4, 6)
        o = dv.pairwise_overlap_matrix(a)
        for k, i, j in np.ndindex(2, 4, 4):
            assert o[k, i, j] == pytest.approx(sum(a[k, i, p] * a[k, j, p] for p in range(6)) ** 2, rel=1e-12)
        np.testing.assert_array_equal(o, o.transpose(0, 2, 1))
        assert o.min() >= 0 and o.max() <= 1
        assert (np.diagonal(o, axis1=1, axis2=2) >= 1 / 36 - 1e-15).all()

    def test_off_diagonal_summaries(self):
        o = np.array([[[1.0, 0.2, 0.4], [0.2, 1.0, 0.0], [0.4, 0.0, 1.0]]])
        assert dv.mean_off_diagonal(o) == pytest.approx(0.2)
        assert dv.max_off_diagonal(o) == 0.4
        assert dv.mean_off_diagonal(np.ones((1, 1, 1))) == 0.0


class TestCombinedLoss:
    def maps(self):
        rng = np.random.default_rng(9)
        return [[Tensor(random_maps(rng, 2, 3, 4))], [Tensor(random_maps(rng, 2, 3, 4))]]

    def test_lambda_zero_is_task(self):
        task = Tensor(np.array(1.2345678901234567))
        assert dv.combined_loss(task, self.maps(), 0.0) is task

    def test_hand(self):
        # <a1, a2> = sqrt(1/8): two ordered pairs of 1/8 give div = 0.25
        r = np.sqrt(0.125)
        maps = np.array([[[r, 1 - r], [1.0, 0.0]]])
        assert dv.diversity_loss(maps).item() == pytest.approx(0.25, rel=1e-15)
        assert dv.combined_loss(Tensor(np.array(0.5)), [[Tensor(maps)]], 1.0).item() == pytest.approx(0.75, rel=1e-15)

    def test_mean_over_layers_and_streams(self):
        maps = self.maps()
        want = 0.3 + 0.7 * np.mean([dv.diversity_loss(m[0]).item() for m in maps])
        assert dv.combined_loss(Tensor(np.array(0.3)), maps, 0.7).item() == pytest.approx(want, rel=1e-14)
        last = 0.3 + 0.7 * dv.diversity_loss(maps[-1][0]).item()
        assert dv.combined_loss(Tensor(np.array(0.3)), maps, 0.7, "last").item() == pytest.approx(last, rel=1e-14)

    @pytest.mark.parametrize("lam", [-0.1, float("nan"), float("inf")])
    def test_bad_lambda(self, lam):
        with pytest.raises(ValueError):
            dv.combined_loss(Tensor(np.array(0.0)), self.maps(), lam)

    def test_gradient_linear_in_lambda(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(2, 3, 5))
        target = rng.normal(size=(2, 3, 5))

        def grad(lam):
            x = Tensor(logits, requires_grad=True)
            maps = softmax(x)
            task = ((maps - Tensor(target)) * (maps - Tensor(target))).sum()
            dv.combined_loss(task, [[maps]], lam).backward()
            return x.grad

        g0, g1, g2 = grad(0.0), grad(1.0), grad(2.0)
        np.testing.assert_allclose(g2 - g0, 2 * (g1 - g0), rtol=1e-10, atol=1e-14)
        assert not np.allclose(g1, g0)

    def test_select_layers(self):
        maps = self.maps()
        assert len(dv.select_layers(maps, "all")) == 2
        assert dv.select_layers(maps, "last") == [maps[1][0]]
        with pytest.raises(ValueError):
            dv.select_layers(maps, "first")


def test_descent_drives_overlap_to_zero():
    """Adam on free logits minimizing only the penalty separates the maps."""
    m, s, lr = 8, 16, 0.1
    logits = np.random.default_rng(11).normal(scale=0.1, size=(1, m, s))
    mom, vel = np.zeros_like(logits), np.zeros_like(logits)
    for t in range(1, 501):
        x = Tensor(logits, requires_grad=True)
        dv.diversity_loss(softmax(x)).backward()
        g = x.grad
        mom = 0.9 * mom + 0.1 * g
        vel = 0.999 * vel + 0.001 * g * g
        logits = logits - lr * (mom / (1 - 0.9**t)) / (np.sqrt(vel / (1 - 0.999**t)) + 1e-8)
    final = softmax(Tensor(logits)).data
    assert dv.max_off_diagonal(dv.pairwise_overlap_matrix(final)) < 1e-3
