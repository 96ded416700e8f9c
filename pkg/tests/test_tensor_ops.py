"""Forward semantics of the tensor primitives.

Each op is checked against a plain-numpy statement of what it should
compute, plus the shape and parameter validation it promises.
"""

import numpy as np
import pytest

from danet.tensor import ParamError, ShapeError, Tensor, ops


def t(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def rand(rng, *shape):
    return t(rng.standard_normal(shape))


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestElementwise:
    def test_add_sub_mul(self, rng):
        a, b = rand(rng, 2, 3, 4, 5), rand(rng, 2, 3, 4, 5)
        np.testing.assert_array_equal(ops.add(a, b).data, a.data + b.data)
        np.testing.assert_array_equal(ops.sub(a, b).data, a.data - b.data)
        np.testing.assert_array_equal(ops.mul(a, b).data, a.data * b.data)

    def test_binary_shape_mismatch(self, rng):
        a, b = rand(rng, 2, 3, 4, 5), rand(rng, 2, 3, 4, 6)
        for fn in (ops.add, ops.sub, ops.mul):
            with pytest.raises(ShapeError):
                fn(a, b)

    def test_scalar_family(self, rng):
        a = rand(rng, 1, 2, 3, 3)
        np.testing.assert_array_equal(ops.neg(a).data, -a.data)
        np.testing.assert_allclose(ops.scale(a, 2.5).data, 2.5 * a.data)
        np.testing.assert_allclose(ops.add_scalar(a, -1.5).data, a.data - 1.5)
        np.testing.assert_array_equal(ops.absolute(a).data, np.abs(a.data))
        np.testing.assert_allclose(ops.square(a).data, a.data**2)

    def test_sqrt_reciprocal(self, rng):
        a = t(rng.uniform(0.5, 2.0, (1, 1, 4, 4)))
        np.testing.assert_allclose(ops.sqrt(a).data, np.sqrt(a.data))
        np.testing.assert_allclose(ops.reciprocal(a).data, 1.0 / a.data)

    def test_leaky_relu(self):
        a = t([[[[-2.0, -0.5, 0.0, 1.0]]]])
        out = ops.leaky_relu(a, slope=0.2)
        np.testing.assert_allclose(out.data, [[[[-0.4, -0.1, 0.0, 1.0]]]])

    def test_leaky_relu_slope_one_is_identity(self, rng):
        a = rand(rng, 1, 1, 3, 3)
        np.testing.assert_array_equal(ops.leaky_relu(a, slope=1.0).data, a.data)


class TestLayout:
    def test_pad_crop_inverse(self, rng):
        a = rand(rng, 2, 3, 5, 6)
        padded = ops.pad_zero(a, 1, 2, 3, 0)
        assert padded.shape == (2, 3, 8, 9)
        assert float(np.abs(padded.data[:, :, 0, :]).sum()) == 0.0
        back = ops.crop(padded, 1, 2, 3, 0)
        np.testing.assert_array_equal(back.data, a.data)

    def test_crop_too_much(self, rng):
        with pytest.raises(ShapeError):
            ops.crop(rand(rng, 1, 1, 4, 4), 2, 2, 0, 0)

    def test_negative_pad_rejected(self, rng):
        with pytest.raises(ParamError):
            ops.pad_zero(rand(rng, 1, 1, 4, 4), -1, 0, 0, 0)

    def test_dilate_undilate(self, rng):
        a = rand(rng, 1, 2, 3, 3)
        d = ops.dilate(a, 2)
        assert d.shape == (1, 2, 5, 5)
        np.testing.assert_array_equal(d.data[:, :, ::2, ::2], a.data)
        np.testing.assert_array_equal(ops.undilate(d, 2).data, a.data)
        # off-lattice positions are zero
        assert float(np.abs(d.data[:, :, 1::2, :]).sum()) == 0.0

    def test_swap01_flip(self, rng):
        a = rand(rng, 2, 3, 4, 4)
        np.testing.assert_array_equal(ops.swap01(a).data, a.data.swapaxes(0, 1))
        np.testing.assert_array_equal(ops.flip_hw(a).data, a.data[:, :, ::-1, ::-1])

    def test_concat_slice_channels(self, rng):
        a, b, c = rand(rng, 2, 1, 3, 3), rand(rng, 2, 2, 3, 3), rand(rng, 2, 4, 3, 3)
        cat = ops.concat_channels(a, b, c)
        assert cat.shape == (2, 7, 3, 3)
        np.testing.assert_array_equal(ops.slice_channels(cat, 1, 3).data, b.data)
        np.testing.assert_array_equal(ops.slice_channels(cat, 3, 7).data, c.data)

    def test_concat_needs_matching_spatial(self, rng):
        with pytest.raises(ShapeError):
            ops.concat_channels(rand(rng, 2, 1, 3, 3), rand(rng, 2, 1, 4, 3))

    def test_slice_bounds(self, rng):
        a = rand(rng, 1, 4, 2, 2)
        with pytest.raises(ShapeError):
            ops.slice_channels(a, 3, 2)
        with pytest.raises(ShapeError):
            ops.slice_channels(a, 0, 5)

    def test_pad_channels(self, rng):
        a = rand(rng, 2, 2, 3, 3)
        p = ops.pad_channels(a, 1, 2)
        assert p.shape == (2, 5, 3, 3)
        np.testing.assert_array_equal(p.data[:, 1:3], a.data)
        assert float(np.abs(p.data[:, 0]).sum()) == 0.0
        assert float(np.abs(p.data[:, 3:]).sum()) == 0.0

    def test_upsample_sum_pool(self, rng):
        a = rand(rng, 1, 2, 3, 4)
        up = ops.upsample_nearest(a, 2)
        assert up.shape == (1, 2, 6, 8)
        np.testing.assert_array_equal(up.data, a.data.repeat(2, axis=2).repeat(2, axis=3))
        # sum_pool after upsample multiplies by factor^2
        np.testing.assert_allclose(ops.sum_pool(up, 2).data, 4.0 * a.data)

    def test_sum_pool_divisibility(self, rng):
        with pytest.raises(ShapeError):
            ops.sum_pool(rand(rng, 1, 1, 5, 4), 2)

    def test_reshape_roundtrip(self, rng):
        a = rand(rng, 2, 3, 4, 5)
        flat = ops.reshape4(a, (2, 60, 1, 1))
        assert flat.shape == (2, 60, 1, 1)
        np.testing.assert_array_equal(ops.reshape4(flat, (2, 3, 4, 5)).data, a.data)
        with pytest.raises(ShapeError):
            ops.reshape4(a, (2, 61, 1, 1))

    def test_broadcast_and_sum_to(self, rng):
        a = rand(rng, 2, 1, 1, 1)
        big = ops.broadcast_to4(a, (2, 3, 4, 4))
        np.testing.assert_array_equal(big.data, np.broadcast_to(a.data, (2, 3, 4, 4)))
        back = ops.sum_to4(big, (2, 1, 1, 1))
        np.testing.assert_allclose(back.data, a.data * 48)

    def test_broadcast_incompatible(self, rng):
        with pytest.raises(ShapeError):
            ops.broadcast_to4(rand(rng, 2, 2, 1, 1), (2, 3, 4, 4))


class TestReflectPadding:
    def test_reflect_pad_matches_numpy(self, rng):
        a = rand(rng, 2, 2, 5, 6)
        out = ops.reflect_pad(a, 2)
        expect = np.pad(a.data, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="reflect")
        np.testing.assert_array_equal(out.data, expect)

    def test_reflect_pad_needs_room(self, rng):
        # reflection about the edge needs pad < extent
        with pytest.raises(ShapeError):
            ops.reflect_pad(rand(rng, 1, 1, 3, 8), 3)

    def test_fold_is_adjoint_of_pad(self, rng):
        """<pad(x), y> == <x, fold(y)> for arbitrary x, y."""
        x = rand(rng, 1, 2, 5, 5)
        y = rand(rng, 1, 2, 9, 9)
        lhs = float((ops.reflect_pad(x, 2).data * y.data).sum())
        rhs = float((x.data * ops.reflect_fold(y, 2).data).sum())
        assert abs(lhs - rhs) < 1e-12


class TestReductions:
    def test_sum_mean(self, rng):
        a = rand(rng, 2, 3, 4, 5)
        assert ops.sum_all(a).shape == (1, 1, 1, 1)
        np.testing.assert_allclose(ops.sum_all(a).item(), a.data.sum())
        np.testing.assert_allclose(ops.mean_all(a).item(), a.data.mean())


class TestTensorBasics:
    def test_requires_4d(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((3, 4)))

    def test_item_needs_scalar(self, rng):
        from danet.tensor import ContractError

        with pytest.raises(ContractError):
            rand(rng, 1, 1, 2, 1).item()

    def test_detach_drops_grad_flag(self, rng):
        a = rand(rng, 1, 1, 2, 2)
        a.requires_grad = True
        d = a.detach()
        assert not d.requires_grad
        np.testing.assert_array_equal(d.data, a.data)

    def test_constructors(self):
        z = Tensor.zeros((1, 2, 3, 3))
        o = Tensor.ones((1, 2, 3, 3))
        s = Tensor.scalar(2.5)
        assert z.data.sum() == 0.0 and o.data.sum() == 18.0
        assert s.shape == (1, 1, 1, 1) and s.item() == 2.5


def test_op_case_registry_is_total():
    """Every differentiable primitive has a matching finite-difference case."""
    import danet.tensor.ops as m

    diffable = {
        "add", "sub", "neg", "mul", "scale", "add_scalar", "absolute", "square",
        "sqrt", "reciprocal", "leaky_relu", "pad_zero", "crop", "dilate",
        "undilate", "swap01", "flip_hw", "concat_channels", "slice_channels",
        "pad_channels", "upsample_nearest", "sum_pool", "reshape4",
        "broadcast_to4", "sum_to4", "reflect_pad", "reflect_fold", "conv2d",
        "sum_all", "mean_all", "gaussian_filter",
    }
    assert diffable <= set(m.OP_CASES), sorted(diffable - set(m.OP_CASES))
