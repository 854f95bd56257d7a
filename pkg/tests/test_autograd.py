import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from octave_unet import autograd as ag
from octave_unet.autograd import Node, Tape, backward, finite_difference_check, no_grad
from octave_unet.errors import ContractError, OracleInvalidError


def leaf(value):
    return Node(np.asarray(value, dtype=np.float64), requires_grad=True)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf([1.0, 2.0, 3.0])
        backward(ag.sum_all(x))
        assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = leaf([3.0])
        backward(ag.sum_all(x * x))
        assert_array_equal(x.grad, [6.0])

    def test_fan_out_accumulates(self):
        x = leaf([2.0])
        y = x * 3.0
        backward(ag.sum_all(y + y * x))
        # d/dx (3x + 3x^2) = 3 + 6x
        assert_array_equal(x.grad, [15.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_leaf_grads_accumulate_across_calls(self):
        x = leaf([1.0, -1.0])
        for _ in range(2):
            backward(ag.sum_all(x * 2.0))
        assert_array_equal(x.grad, [4.0, 4.0])
        x.zero_grad()
        assert x.grad is None

    def test_zero_upstream_gives_zero_grads(self, rng):
        x = leaf(rng.normal(size=4))
        backward(ag.sum_all(x * x), grad=np.zeros(()))
        assert_array_equal(x.grad, 0)

    def test_linearity(self, rng):
        x1, x2, x3 = (leaf(v) for v in [rng.normal(size=5)] * 3)
        backward(ag.sum_all(x1 * x1))
        backward(ag.sum_all(ag.log(ag.clip(x2 * x2 + 1.0, 0.0, 1e9))))
        backward(ag.sum_all(x3 * x3) + ag.sum_all(ag.log(ag.clip(x3 * x3 + 1.0, 0.0, 1e9))))
        assert_allclose(x3.grad, x1.grad + x2.grad, rtol=1e-14)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert y.is_leaf and not y.requires_grad

    def test_constant_inputs_do_not_need_grad(self):
        y = Node(np.ones(2)) * 2.0
        assert not y.requires_grad

    def test_tape_records_in_topological_order(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = x * 2.0
            z = ag.sum_all(y + x)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for n in tape.nodes:
            for p in n.parents:
                if id(p) in pos:
                    assert pos[id(p)] < pos[id(n)]
        tape.backward(z)
        assert_array_equal(x.grad, [3.0, 3.0])

    def test_deterministic_regrad(self, rng):
        v = rng.normal(size=(3, 3))
        grads = []
        for _ in range(2):
            x = leaf(v)
            backward(ag.mean_all(ag.log(ag.clip(x * x, 1e-3, 10.0)) / 3.0))
            grads.append(x.grad)
        assert_array_equal(grads[0], grads[1])


class TestElementaryGradients:
    @pytest.mark.parametrize("fn", [
        lambda p: ag.sum_all(p["a"] * p["b"]),
        lambda p: ag.sum_all(p["a"] / p["b"]),
        lambda p: ag.sum_all(p["a"] - p["b"] * 2.0),
        lambda p: ag.mean_all(ag.log(p["b"])),
        lambda p: ag.sum_all(1.0 - p["a"]),
    ])
    def test_against_finite_differences(self, rng, fn):
        params = {"a": rng.normal(size=(2, 3)), "b": rng.uniform(0.5, 2.0, size=(2, 3))}
        report = finite_difference_check(fn, params)
        assert report.passed, str(report)

    def test_linear_function_is_exact(self, rng):
        w = rng.normal(size=6)
        report = finite_difference_check(lambda p: ag.sum_all(p["x"] * Node(w)), {"x": rng.normal(size=6)})
        assert report.max_error < 1e-9

    def test_clip_blocks_gradient_outside(self):
        x = leaf([-2.0, 0.5, 2.0])
        backward(ag.sum_all(ag.clip(x, -1.0, 1.0)))
        assert_array_equal(x.grad, [0, 1, 0])


class TestFiniteDifferenceCheck:
    def test_nondeterministic_function_rejected(self):
        counter = iter(range(1000))

        def f(p):
            return ag.sum_all(p["x"] * float(next(counter)))

        with pytest.raises(OracleInvalidError):
            finite_difference_check(f, {"x": np.ones(2)})

    def test_wrong_gradient_detected(self):
        def bad_square(x):
            return ag.make_node(x.value ** 2, (x,), lambda g: (g * x.value,), "bad_square")

        report = finite_difference_check(lambda p: ag.sum_all(bad_square(p["x"])), {"x": np.array([1.0, 2.0])})
        assert not report.passed

    def test_relative_error_definition(self):
        assert ag.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.5])) == pytest.approx(0.2)
        assert ag.relative_error(np.zeros(2), np.zeros(2)) == 0.0
