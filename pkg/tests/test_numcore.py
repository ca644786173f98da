"""
Tests for the array primitives: shape validation, the computation tape,
gradients and the finite-difference checker.
"""

import math

import pytest
import torch
from torch import nn

from goalmask_nav import numcore as nc


class TestShapes:
    def test_matmul_inner_mismatch_names_op(self):
        with pytest.raises(nc.ShapeError) as exc:
            nc.matmul(torch.zeros(2, 3), torch.zeros(4, 5))
        assert exc.value.op_kind == "matmul"
        assert "3" in str(exc.value) and "4" in str(exc.value)

    def test_conv1d_channel_mismatch(self):
        layer = nn.Conv1d(4, 8, 3, padding=1)
        with pytest.raises(nc.ShapeError, match="conv1d"):
            nc.conv1d(torch.zeros(1, 2, 8), layer)

    def test_group_norm_indivisible_channels(self):
        layer = nn.GroupNorm(2, 6)
        x = torch.zeros(1, 6, 4)
        assert nc.group_norm(x, layer).shape == (1, 6, 4)
        with pytest.raises(nc.ShapeError, match="group_norm"):
            nc.forward_primitive("group_norm", [x, layer.weight, layer.bias], groups=4)

    def test_film_scale_shape(self):
        with pytest.raises(nc.ShapeError, match="film"):
            nc.film(torch.zeros(2, 3, 5), torch.zeros(2, 4), torch.zeros(2, 3))

    def test_concat_mismatch(self):
        with pytest.raises(nc.ShapeError, match="concat"):
            nc.concat([torch.zeros(2, 3), torch.zeros(3, 3)], dim=1)

    def test_elementwise_broadcast_and_scalars(self):
        out = nc.forward_primitive("mul", [torch.ones(2, 3), 2.0])
        assert torch.equal(out, torch.full((2, 3), 2.0))
        with pytest.raises(nc.ShapeError, match="add"):
            nc.forward_primitive("add", [torch.zeros(2, 3), torch.zeros(4)])

    def test_unknown_op_kind(self):
        with pytest.raises(nc.NumcoreError):
            nc.forward_primitive("cosh", [torch.zeros(1)])

    def test_unknown_activation(self):
        with pytest.raises(nc.NumcoreError):
            nc.activation(torch.zeros(1), "swish")


class TestAttention:
    def test_masked_column_gets_no_weight(self):
        g = torch.Generator().manual_seed(0)
        q = torch.randn(1, 3, 4, generator=g)
        k = torch.randn(1, 3, 4, generator=g)
        v = torch.randn(1, 3, 4, generator=g)
        mask = torch.zeros(1, 1, 3)
        mask[..., 2] = nc.MASK_VALUE
        masked = nc.attention(q, k, v, mask)
        changed_v = v.clone()
        changed_v[:, 2] += 100.0
        assert torch.allclose(masked, nc.attention(q, k, changed_v, mask))

    def test_mask_must_broadcast(self):
        q = torch.zeros(1, 3, 4)
        with pytest.raises(nc.ShapeError, match="attention"):
            nc.attention(q, q, q, torch.zeros(1, 2, 2))

    def test_softmax_rows_sum_to_one(self):
        out = nc.softmax(torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, nc.MASK_VALUE]]))
        assert torch.allclose(out.sum(dim=-1), torch.ones(2))
        assert out[1, 2] == 0.0


class TestTape:
    def test_records_ops_in_order(self):
        layer = nn.Linear(3, 2)
        with nc.recording() as tape:
            y = nc.linear(torch.ones(4, 3), layer)
            nc.mean(nc.activation(y, "relu"))
        assert [e.op_kind for e in tape.entries] == ["linear", "relu", "mean"]
        assert tape.entries[0].output_shape == (4, 2)
        assert tape.op_counts() == {"linear": 1, "relu": 1, "mean": 1}

    def test_no_recording_outside_context(self):
        with nc.recording() as tape:
            pass
        nc.matmul(torch.ones(2, 2), torch.ones(2, 2))
        assert len(tape) == 0

    def test_backward_over_watched_leaves(self):
        tape = nc.ComputationTape()
        with nc.recording(tape):
            x = tape.watch("x", torch.tensor([1.0, 2.0, 3.0]))
            unused = tape.watch("unused", torch.ones(2))
            loss = nc.mean(nc.forward_primitive("mul", [x, x]))
        grads = nc.backward(loss, tape)
        assert torch.allclose(grads["x"], 2 * x.detach() / 3)
        assert torch.equal(grads["unused"], torch.zeros(2))
        assert unused.requires_grad

    def test_backward_rejects_non_scalar(self):
        x = torch.ones(3, requires_grad=True)
        with pytest.raises(nc.NonScalarOutputError):
            nc.backward(x * 2, [x])


class TestPrecision:
    def test_precision_context_restores_default(self):
        before = torch.get_default_dtype()
        with nc.precision("float64"):
            assert torch.get_default_dtype() == torch.float64
            assert nc.get_precision() == "float64"
        assert torch.get_default_dtype() == before

    def test_unknown_precision(self):
        with pytest.raises(nc.NumcoreError):
            nc.resolve_dtype("float16")


class TestFiniteDifference:
    def test_smooth_function_passes(self, float64):
        report = nc.finite_difference_check(lambda x: (x.sin() * x).sum(), torch.linspace(-1, 1, 7), step=1e-5)
        assert torch.get_default_dtype() == torch.float64
        assert report.checked == 7
        assert report.passed(1e-6)
        assert not report.flagged

    def test_kink_is_flagged(self, float64):
        report = nc.finite_difference_check(lambda x: x.abs().sum(), torch.tensor([0.0, 1.0]), step=1e-3)
        assert report.nonsmooth == 1
        assert not report.passed()

    def test_wrong_gradient_is_caught(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x * x

            @staticmethod
            def backward(ctx, grad):
                return grad * 3.0

        with nc.precision("float64"):
            report = nc.finite_difference_check(lambda x: Bad.apply(x).sum(), torch.tensor([2.0]), step=1e-5)
        assert report.max_rel_error == pytest.approx(abs(3.0 - 4.0) / 4.0, rel=1e-4)

    def test_module_check_covers_every_tensor(self):
        with nc.precision("float64"):
            torch.manual_seed(0)
            module = nn.Sequential(nn.Linear(3, 4), nn.Tanh(), nn.Linear(4, 1))
            x = torch.randn(5, 3)
            report = nc.check_module_gradients(lambda: module(x).pow(2).mean(), module, step=1e-5,
                                               coords_per_tensor=3, generator=torch.Generator().manual_seed(0))
        # weights contribute 3 coordinates each, the 4- and 1-element biases 3 and 1
        assert report.checked + report.skipped == 3 + 3 + 3 + 1
        assert report.max_rel_error < 1e-4

    def test_relative_error(self):
        assert nc.relative_error(1.0, 1.0) == 0.0
        assert math.isclose(nc.relative_error(1.1, 1.0), 0.1, rel_tol=1e-9)
