"""Tests for the autodiff core, Adam, schedules and gradient checking."""

import numpy as np
import pytest

from w2vj.core.autograd import (
    Tensor,
    conv1d,
    conv2d,
    detach,
    dropout,
    exp,
    gelu,
    layer_norm,
    linear,
    log,
    log_softmax,
    logsumexp,
    silu,
    softmax,
    tanh,
    tsum,
    where,
)
from w2vj.core.gradcheck import gradient_check
from w2vj.core.optim import (
    AdamState,
    LinearWarmupDecaySchedule,
    ParameterSet,
    TriStageSchedule,
    adam_step,
    clip_grad_norm,
    lr_schedule,
)
from w2vj.utils.errors import (
    ConfigError,
    MissingGradientError,
    NonDeterministicError,
    NonFiniteError,
    ShapeError,
)

RAMP = Tensor(np.arange(12.0).reshape(3, 4))
SLOPE = Tensor(np.linspace(-1, 1, 12).reshape(3, 4))


class TestBackward:
    def test_quadratic_gradient(self):
        """sum(w*w) at w=[1,2] has gradient [2,4]."""
        params = ParameterSet({"w": np.array([1.0, 2.0])})
        w = params["w"]
        tsum(w * w).backward()
        np.testing.assert_array_equal(params.grad("w"), [2.0, 4.0])

    def test_constant_root_leaves_zero_gradients(self):
        params = ParameterSet({"w": np.array([1.0, 2.0])})
        Tensor(3.0).backward()
        np.testing.assert_array_equal(params.grad("w"), [0.0, 0.0])

    def test_gradients_accumulate_until_cleared(self):
        params = ParameterSet({"w": np.array([3.0])})
        for _ in range(2):
            tsum(params["w"] * 2.0).backward()
        np.testing.assert_array_equal(params.grad("w"), [4.0])
        params.zero_grad()
        assert params["w"].grad is None

    def test_non_scalar_root_is_rejected(self):
        params = ParameterSet({"w": np.ones(3)})
        with pytest.raises(ShapeError):
            (params["w"] * 2.0).backward()

    def test_non_finite_forward_is_an_error(self):
        params = ParameterSet({"w": np.array([0.0, 1.0])})
        with pytest.raises(NonFiniteError):
            log(params["w"])

    def test_shared_subexpression(self):
        """y = x*x used twice: d(y + y)/dx = 4x."""
        params = ParameterSet({"x": np.array([1.5, -2.0])})
        y = params["x"] * params["x"]
        tsum(y + y).backward()
        np.testing.assert_allclose(params.grad("x"), [6.0, -8.0])

    def test_detach_blocks_gradient(self):
        params = ParameterSet({"x": np.array([1.0, 2.0])})
        tsum(detach(params["x"]) * params["x"]).backward()
        np.testing.assert_array_equal(params.grad("x"), [1.0, 2.0])

    def test_backward_is_deterministic(self, rng):
        arrays = {"w": rng.standard_normal((4, 3)), "b": rng.standard_normal(4)}
        x = Tensor(rng.standard_normal((5, 3)))
        grads = []
        for _ in range(2):
            params = ParameterSet(arrays)
            tsum(tanh(linear(x, params["w"], params["b"]))).backward()
            grads.append(params.grad("w"))
        np.testing.assert_array_equal(grads[0], grads[1])


class TestPrimitiveGradients:
    """Each primitive against central differences in FP64."""

    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize(
        "op",
        [
            lambda x: tsum(exp(x * 0.3)),
            lambda x: tsum(tanh(x)),
            lambda x: tsum(gelu(x)),
            lambda x: tsum(silu(x)),
            lambda x: tsum(softmax(x, axis=-1) * RAMP),
            lambda x: tsum(log_softmax(x, axis=0) * SLOPE),
            lambda x: tsum(logsumexp(x, axis=1)),
            lambda x: tsum(x[np.array([0, 2, 2])] * 1.5),
            lambda x: tsum(where(x.data > 0, x * x, x * 3.0)),
        ],
    )
    def test_elementwise_and_reductions(self, op, seed):
        x = np.random.default_rng(seed).standard_normal((3, 4))
        params = ParameterSet({"x": x})
        report = gradient_check(lambda: op(params["x"]), params)
        assert report.passed, report.max_rel_error

    @pytest.mark.parametrize("seed", range(3))
    def test_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        params = ParameterSet(
            {
                "x": rng.standard_normal((3, 6)),
                "g": rng.standard_normal(6),
                "b": rng.standard_normal(6),
            }
        )
        readout = Tensor(rng.standard_normal((3, 6)))

        def fragment() -> Tensor:
            return tsum(layer_norm(params["x"], params["g"], params["b"]) * readout)

        report = gradient_check(fragment, params)
        assert report.passed, report.max_rel_error

    @pytest.mark.parametrize(
        "stride,padding,groups", [(1, 0, 1), (2, 1, 1), (1, (2, 1), 2)]
    )
    def test_conv1d(self, stride, padding, groups):
        rng = np.random.default_rng(0)
        params = ParameterSet(
            {
                "x": rng.standard_normal((9, 4)),
                "w": rng.standard_normal((4, 4 // groups, 3)),
                "b": rng.standard_normal(4),
            }
        )

        def fragment() -> Tensor:
            x, w, b = params["x"], params["w"], params["b"]
            y = conv1d(x, w, b, stride=stride, padding=padding, groups=groups)
            return tsum(tanh(y))

        assert gradient_check(fragment, params).passed

    def test_conv2d(self):
        rng = np.random.default_rng(0)
        params = ParameterSet(
            {
                "x": rng.standard_normal((2, 7, 6)),
                "w": rng.standard_normal((3, 2, 3, 3)),
                "b": rng.standard_normal(3),
            }
        )

        def fragment() -> Tensor:
            y = conv2d(params["x"], params["w"], params["b"], stride=2, padding=1)
            return tsum(tanh(y))

        assert gradient_check(fragment, params).passed

    def test_conv2d_output_dims(self):
        x = Tensor(np.zeros((1, 9, 80)))
        w = Tensor(np.zeros((4, 1, 3, 3)))
        assert conv2d(x, w, None, stride=2, padding=1).shape == (4, 5, 40)

    def test_three_layer_mlp(self, rng):
        arrays = {}
        for i, (n_in, n_out) in enumerate([(5, 7), (7, 7), (7, 2)]):
            arrays[f"l{i}.w"] = rng.standard_normal((n_out, n_in))
            arrays[f"l{i}.b"] = rng.standard_normal(n_out)
        params = ParameterSet(arrays)
        x = Tensor(rng.standard_normal((4, 5)))

        def fragment() -> Tensor:
            h = x
            for i in range(3):
                h = linear(h, params[f"l{i}.w"], params[f"l{i}.b"])
                h = tanh(h) if i < 2 else h
            return tsum(h * h)

        assert gradient_check(fragment, params).passed


class TestGradientCheck:
    def test_linear_layer_passes_tight_tolerance(self, rng):
        params = ParameterSet(
            {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(3)}
        )
        x = Tensor(rng.standard_normal((2, 4)))

        def fragment() -> Tensor:
            return tsum(linear(x, params["w"], params["b"]) ** 2)

        report = gradient_check(fragment, params, tolerance=1e-6)
        assert report.passed
        assert {check.name for check in report.checks} == {"b", "w"}

    def test_corrupted_backward_fails(self):
        params = ParameterSet({"w": np.array([1.0, 2.0, 3.0])})

        def broken(a: Tensor) -> Tensor:
            return Tensor.from_op(a.data**2, (a,), lambda g: (g * a.data,), "broken")

        report = gradient_check(lambda: tsum(broken(params["w"])), params)
        assert not report.passed
        assert report.max_rel_error == pytest.approx(0.5)

    def test_non_deterministic_fragment_is_rejected(self):
        params = ParameterSet({"w": np.ones(2)})
        noise = np.random.default_rng(0)
        with pytest.raises(NonDeterministicError):
            gradient_check(lambda: tsum(params["w"] * float(noise.random())), params)

    def test_dropout_with_fixed_rng_is_checkable(self):
        params = ParameterSet({"w": np.arange(1.0, 7.0)})

        def fragment() -> Tensor:
            return tsum(dropout(params["w"], 0.5, np.random.default_rng(4)) ** 2)

        report = gradient_check(fragment, params)
        assert report.passed

    def test_max_entries_limits_perturbations(self, rng):
        params = ParameterSet({"w": rng.standard_normal(50)})
        report = gradient_check(lambda: tsum(tanh(params["w"])), params, max_entries=5)
        assert report.checks[0].checked == 5


class TestAdam:
    def test_one_step_decreases_quadratic(self):
        params = ParameterSet({"w": np.array([1.0])})
        tsum(params["w"] * params["w"]).backward()
        adam_step(params, AdamState(), lr=0.01)
        assert params["w"].data[0] ** 2 < 1.0

    def test_step_clears_gradients_and_counts(self):
        params = ParameterSet({"w": np.array([1.0])})
        state = AdamState()
        tsum(params["w"] * 2.0).backward()
        adam_step(params, state, lr=0.1)
        assert params["w"].grad is None
        assert state.step == 1

    def test_zero_gradient_leaves_parameters(self):
        params = ParameterSet({"w": np.array([0.5, -0.25])})
        before = params["w"].data.copy()
        tsum(params["w"] * 0.0).backward()
        adam_step(params, AdamState(), lr=0.1)
        assert np.max(np.abs(params["w"].data - before)) < 1e-12

    def test_zero_learning_rate_is_identity(self, rng):
        params = ParameterSet({"w": rng.standard_normal(5)})
        before = params["w"].data.copy()
        tsum(exp(params["w"])).backward()
        adam_step(params, AdamState(), lr=0.0)
        np.testing.assert_array_equal(params["w"].data, before)

    def test_missing_gradients(self):
        params = ParameterSet({"w": np.ones(2)})
        with pytest.raises(MissingGradientError):
            adam_step(params, AdamState(), lr=0.1)

    def test_frozen_prefix_is_untouched(self):
        params = ParameterSet({"frontend.w": np.ones(2), "encoder.w": np.ones(2)})
        tsum(params["frontend.w"] * params["encoder.w"]).backward()
        adam_step(params, AdamState(), lr=0.1, frozen=("frontend.",))
        np.testing.assert_array_equal(params["frontend.w"].data, [1.0, 1.0])
        assert np.all(params["encoder.w"].data < 1.0)

    def test_converges_on_quadratic(self):
        params = ParameterSet({"w": np.array([1.0, -2.0])})
        state = AdamState()
        for step in range(500):
            w = params["w"]
            tsum(w * w * Tensor(np.array([1.0, 3.0]))).backward()
            adam_step(params, state, lr=0.05 * (1.0 - step / 500))
        assert np.max(np.abs(params["w"].data)) < 1e-2

    def test_clip_grad_norm(self):
        params = ParameterSet({"a": np.array([3.0]), "b": np.array([4.0])})
        tsum(params["a"] * 3.0 + params["b"] * 4.0).backward()
        total = clip_grad_norm(params, 1.0)
        assert total == pytest.approx(5.0)
        norm = np.sqrt(params.grad("a") ** 2 + params.grad("b") ** 2)
        assert norm[0] == pytest.approx(1.0, rel=1e-5)


class TestSchedules:
    def test_tri_stage_boundaries(self):
        schedule = TriStageSchedule(peak_lr=3e-5, total_steps=1000)
        assert lr_schedule(0, schedule) == pytest.approx(3e-7)
        assert lr_schedule(100, schedule) == pytest.approx(3e-5)
        assert lr_schedule(500, schedule) == pytest.approx(3e-5)
        assert lr_schedule(1000, schedule) == pytest.approx(3e-5 * 0.05)

    def test_tri_stage_is_continuous(self):
        schedule = TriStageSchedule(peak_lr=1.0, total_steps=1000)
        values = np.array([schedule(s) for s in range(1001)])
        assert np.max(np.abs(np.diff(values))) < 0.011

    def test_linear_warmup_decay(self):
        schedule = LinearWarmupDecaySchedule(
            peak_lr=5e-4, total_steps=100, warmup_steps=10
        )
        assert schedule(0) == 0.0
        assert schedule(10) == pytest.approx(5e-4)
        assert schedule(55) == pytest.approx(2.5e-4)
        assert schedule(100) == 0.0

    def test_negative_step(self):
        with pytest.raises(ConfigError):
            lr_schedule(-1, TriStageSchedule(peak_lr=1.0, total_steps=10))

    def test_ratios_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            TriStageSchedule(
                peak_lr=1.0,
                total_steps=10,
                warmup_ratio=0.5,
                hold_ratio=0.5,
                decay_ratio=0.5,
            )
