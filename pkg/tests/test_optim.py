import numpy as np
import pytest

from kglite import tensor as T
from kglite.optim import AdamW, MissingGradError, clip_grad_norm, lr_at


def quad_grad(p):
    """Gradient of 0.5 * sum(p^2), i.e. p itself."""
    p.grad = p.data.copy()


class TestAdamW:
    def test_first_step_magnitude(self):
        # m-hat / (sqrt(v-hat) + eps) == g / (|g| + eps) on step one, so the
        # parameter moves by almost exactly lr
        p = T.parameter([1.0], "p")
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
        p.grad = np.array([1.0])
        opt.step()
        assert abs(p.data[0] - 0.9) < 1e-8

    def test_weight_decay_only(self):
        p = T.parameter([1.0], "p")
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.01)
        p.grad = np.array([0.0])
        opt.step()
        np.testing.assert_allclose(p.data, [0.999], rtol=0, atol=1e-15)

    def test_two_steps_match_scalar_reference(self):
        p = T.parameter([2.0], "p")
        opt = AdamW([("p", p)], lr=0.05, weight_decay=0.01)
        ref = 2.0
        m = v = 0.0
        for t in (1, 2):
            g = ref  # gradient of 0.5 ref^2
            p.grad = p.data.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            ref -= 0.05 * (mh / (vh ** 0.5 + 1e-8) + 0.01 * ref)
            assert abs(p.data[0] - ref) < 1e-12

    def test_zero_lr_is_identity(self):
        rng = np.random.default_rng(0)
        p = T.parameter(rng.normal(size=(4, 3)), "p")
        before = p.data.copy()
        opt = AdamW([("p", p)], lr=0.0)
        for _ in range(3):
            p.grad = rng.normal(size=(4, 3))
            opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_frozen_params_excluded(self):
        frozen = T.constant([1.0], "frozen")
        live = T.parameter([1.0], "live")
        opt = AdamW([("frozen", frozen), ("live", live)], lr=0.1)
        assert [name for name, _ in opt.params] == ["live"]
        assert "frozen" not in opt.m
        live.grad = np.array([1.0])
        opt.step()  # must not demand a gradient for the frozen tensor
        np.testing.assert_array_equal(frozen.data, [1.0])

    def test_missing_grad_names_the_parameter(self):
        a = T.parameter([1.0], "a")
        b = T.parameter([1.0], "b")
        opt = AdamW([("layer.w", a), ("layer.b", b)], lr=0.1)
        a.grad = np.array([1.0])
        with pytest.raises(MissingGradError) as e:
            opt.step()
        assert "layer.b" in str(e.value)
        assert "layer.w" not in str(e.value)

    def test_grads_cleared_after_step(self):
        p = T.parameter([1.0], "p")
        opt = AdamW([("p", p)], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert p.grad is None
        assert opt.t == 1

    def test_negative_lr_rejected(self):
        p = T.parameter([1.0], "p")
        opt = AdamW([("p", p)])
        p.grad = np.array([1.0])
        with pytest.raises(ValueError):
            opt.step(lr=-1e-4)

    def test_deterministic_trajectory(self):
        def run():
            p = T.parameter(np.linspace(-1, 1, 6), "p")
            opt = AdamW([("p", p)], lr=0.01, weight_decay=0.01)
            for _ in range(20):
                quad_grad(p)
                opt.step()
            return p.data

        np.testing.assert_array_equal(run(), run())

    def test_converges_on_quadratic(self):
        p = T.parameter([5.0, -3.0], "p")
        opt = AdamW([("p", p)], lr=0.05, weight_decay=0.0)
        for _ in range(2000):
            quad_grad(p)
            opt.step()
        assert np.abs(p.data).max() < 1e-3


class TestClipGradNorm:
    def test_scales_down_to_max(self):
        p = T.parameter(np.zeros(2), "p")
        p.grad = np.array([3.0, 4.0])  # norm 5
        norm = clip_grad_norm([("p", p)], 1.0)
        assert abs(norm - 5.0) < 1e-12
        np.testing.assert_allclose(p.grad, [0.6, 0.8])

    def test_no_op_below_threshold(self):
        p = T.parameter(np.zeros(2), "p")
        p.grad = np.array([0.3, 0.4])
        norm = clip_grad_norm([("p", p)], 1.0)
        assert abs(norm - 0.5) < 1e-12
        np.testing.assert_array_equal(p.grad, [0.3, 0.4])

    def test_global_norm_across_tensors(self):
        a = T.parameter(np.zeros(1), "a")
        b = T.parameter(np.zeros(1), "b")
        a.grad = np.array([3.0])
        b.grad = np.array([4.0])
        clip_grad_norm([("a", a), ("b", b)], 1.0)
        total = float(a.grad[0] ** 2 + b.grad[0] ** 2) ** 0.5
        assert abs(total - 1.0) < 1e-12


class TestSchedule:
    def test_worked_examples(self):
        assert lr_at(5, 100, 0.1, 1e-4) == pytest.approx(5e-5)
        assert lr_at(10, 100, 0.1, 1e-4) == pytest.approx(1e-4)
        assert lr_at(55, 100, 0.1, 1e-4) == pytest.approx(5e-5)
        assert lr_at(100, 100, 0.1, 1e-4) == 0.0
        assert lr_at(0, 100, 0.1, 1e-4) == 0.0

    def test_peak_at_end_of_warmup(self):
        total, ratio, base = 200, 0.25, 3e-3
        peak_step = int(total * ratio)
        values = [lr_at(s, total, ratio, base) for s in range(total + 1)]
        assert max(values) == pytest.approx(base)
        assert values.index(max(values)) == peak_step

    def test_piecewise_linear(self):
        # equal spacing on each side of the peak
        up = [lr_at(s, 100, 0.1, 1.0) for s in range(11)]
        diffs = np.diff(up)
        np.testing.assert_allclose(diffs, diffs[0])
        down = [lr_at(s, 100, 0.1, 1.0) for s in range(10, 101)]
        np.testing.assert_allclose(np.diff(down), np.diff(down)[0])

    def test_errors(self):
        with pytest.raises(ValueError):
            lr_at(1, 0, 0.1, 1e-4)
        with pytest.raises(ValueError):
            lr_at(1, 100, 0.0, 1e-4)
        with pytest.raises(ValueError):
            lr_at(1, 100, 1.0, 1e-4)
        with pytest.raises(ValueError):
            lr_at(101, 100, 0.1, 1e-4)
        with pytest.raises(ValueError):
            lr_at(-1, 100, 0.1, 1e-4)
