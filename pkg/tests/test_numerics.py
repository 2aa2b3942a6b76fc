import math

import pytest
import torch

from mmdiff.numerics import (
    NumericError,
    backward,
    finite_difference_gradient,
    forward_op,
    grad_check,
    grad_check_module,
    op_names,
    sinusoidal_features,
)


def f64(*shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


class TestForwardOps:
    def test_unknown_op_rejected(self):
        with pytest.raises(ValueError, match="unknown op"):
            forward_op("transmogrify", torch.ones(2))

    def test_matmul_shape_mismatch_names_op(self):
        with pytest.raises(ValueError, match="matmul"):
            forward_op("matmul", torch.ones(2, 3), torch.ones(4, 2))

    def test_add_broadcast_mismatch(self):
        with pytest.raises(ValueError, match="add"):
            forward_op("add", torch.ones(2, 3), torch.ones(4))

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ValueError, match="conv2d"):
            forward_op("conv2d", torch.ones(1, 3, 8, 8), torch.ones(4, 2, 3, 3))

    def test_embedding_id_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            forward_op("embedding_lookup", torch.ones(4, 8), torch.tensor([4]))

    def test_embedding_rejects_float_ids(self):
        with pytest.raises(ValueError, match="integer"):
            forward_op("embedding_lookup", torch.ones(4, 8), torch.tensor([1.0]))

    def test_nonfinite_output_raises(self):
        big = torch.full((2,), 3e38)
        with pytest.raises(NumericError, match="add"):
            forward_op("add", big, big)

    def test_layer_norm_constant_input_stable(self):
        out = forward_op("layer_norm", torch.full((4, 8), 2.5))
        assert torch.isfinite(out).all()

    def test_group_norm_group_mismatch(self):
        with pytest.raises(ValueError, match="group_norm"):
            forward_op("group_norm", torch.ones(1, 6, 4, 4), num_groups=4)

    def test_downsample_odd_extent_rejected(self):
        with pytest.raises(ValueError, match="downsample"):
            forward_op("downsample", torch.ones(1, 2, 5, 6))

    def test_upsample_doubles_extent(self):
        out = forward_op("upsample", torch.ones(1, 2, 4, 4))
        assert out.shape == (1, 2, 8, 8)


# per-op differentiable inputs for the gradient sweep
_GRAD_CASES = {
    "matmul": lambda s: (f64(3, 4, seed=s), f64(4, 2, seed=s + 1)),
    "add": lambda s: (f64(3, 4, seed=s), f64(4, seed=s + 1)),
    "mul": lambda s: (f64(3, 4, seed=s), f64(3, 1, seed=s + 1)),
    "softmax_rows": lambda s: (f64(3, 5, seed=s),),
    "layer_norm": lambda s: (f64(3, 6, seed=s), f64(6, seed=s + 1), f64(6, seed=s + 2)),
    "group_norm": lambda s: (f64(2, 4, 3, 3, seed=s),),
    "silu": lambda s: (f64(3, 4, seed=s),),
    "gelu": lambda s: (f64(3, 4, seed=s),),
    "conv2d": lambda s: (f64(1, 2, 5, 5, seed=s), f64(3, 2, 3, 3, seed=s + 1)),
    "downsample": lambda s: (f64(1, 2, 4, 4, seed=s),),
    "upsample": lambda s: (f64(1, 2, 3, 3, seed=s),),
    "embedding_lookup": lambda s: (f64(5, 4, seed=s), torch.tensor([0, 2, 4, 1])),
}


class TestGradCheck:
    @pytest.mark.parametrize("op", sorted(set(op_names()) - {"embedding_lookup"}))
    def test_registered_ops_pass(self, op):
        for seed in range(3):
            inputs = _GRAD_CASES[op](seed * 10)

            def f(x, rest=inputs[1:]):
                return forward_op(op, x, *rest)

            report = grad_check(f, inputs[0])
            assert report.passed, f"{op}: {report}"

    def test_embedding_table_gradient(self):
        table, ids = _GRAD_CASES["embedding_lookup"](0)
        report = grad_check(lambda t: forward_op("embedding_lookup", t, ids), table)
        assert report.passed, str(report)

    def test_detects_wrong_gradient(self):
        class Sabotaged(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                ctx.save_for_backward(x)
                return x.square()

            @staticmethod
            def backward(ctx, g):
                (x,) = ctx.saved_tensors
                return g * 2.5 * x  # true gradient is 2x

            run = None

        report = grad_check(lambda x: Sabotaged.apply(x), f64(4))
        assert not report.passed
        assert report.max_rel_error > 1e-2

    def test_projected_reduction_catches_sign_symmetric_error(self):
        # sum() would cancel [+e, -e] corruption across two outputs
        class SignSym(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return torch.stack([x.sum(), x.sum()])

            @staticmethod
            def backward(ctx, g):
                true = (g[0] + g[1]) * torch.ones(3, dtype=g.dtype)
                corruption = (g[0] - g[1]) * torch.tensor([0.7, -0.2, 0.9], dtype=g.dtype)
                return true + corruption

        report = grad_check(lambda x: SignSym.apply(x), f64(3))
        assert not report.passed

    def test_grad_check_module_covers_params_and_inputs(self):
        torch.manual_seed(0)
        lin = torch.nn.Linear(4, 3).double()
        x = f64(2, 4)
        report = grad_check_module(lin, [x])
        assert report.passed, str(report)
        assert report.n_coords == 4 * 3 + 3 + 8

    def test_finite_difference_matches_analytic_quadratic(self):
        point = f64(5)
        g = finite_difference_gradient(lambda x: float((x**3).sum()), point.clone())
        assert torch.allclose(g, 3 * point**2, rtol=1e-6, atol=1e-8)


class TestBackward:
    def test_scalar_only(self):
        x = torch.ones(3, requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(x * 2)

    def test_disconnected_leaf_gets_zero_grad(self):
        x = torch.ones(3, requires_grad=True)
        y = torch.ones(2, requires_grad=True)
        backward((x * 3).sum(), leaves=[x, y])
        assert torch.equal(y.grad, torch.zeros(2))
        assert torch.equal(x.grad, torch.full((3,), 3.0))

    def test_grads_accumulate_across_calls(self):
        x = torch.ones(2, requires_grad=True)
        backward(x.sum())
        backward(x.sum())
        assert torch.equal(x.grad, torch.full((2,), 2.0))


class TestSinusoidalFeatures:
    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            sinusoidal_features(torch.tensor([1.0]), 7)

    def test_step_zero_is_cos_one_sin_zero(self):
        out = sinusoidal_features(torch.tensor([0.0]), 8)
        assert torch.equal(out[0, :4], torch.ones(4))
        assert torch.equal(out[0, 4:], torch.zeros(4))

    def test_shape_and_range(self):
        out = sinusoidal_features(torch.arange(5, dtype=torch.float32), 16)
        assert out.shape == (5, 16)
        assert out.abs().max() <= 1.0

    def test_distinct_steps_distinct_features(self):
        out = sinusoidal_features(torch.arange(100, dtype=torch.float64), 32)
        assert torch.unique(out, dim=0).shape[0] == 100

    def test_highest_frequency_is_unit(self):
        # first coordinate oscillates as cos(t)
        t = torch.tensor([0.5, 2.0], dtype=torch.float64)
        out = sinusoidal_features(t, 8)
        assert torch.allclose(out[:, 0], torch.cos(t))
        assert torch.allclose(out[:, 4], torch.sin(t))
