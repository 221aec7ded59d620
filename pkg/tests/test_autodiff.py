import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lfsal import autodiff as ad
from lfsal.autodiff import GradientTape, ShapeError, TapeError, Tensor


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def weighted_sum(out, seed=0):
    """Scalar probe with O(1) gradients: sum(out * R) for fixed random R."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.sum_all(ad.mul(out, T(r)))


def naive_conv2d(x, k, stride=1, pad=0, dil=1):
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.pad(x, [(0, 0), (pad, pad), (pad, pad)])
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            acc += k[o, c, a, b] * xp[c, i * stride + a * dil, j * stride + b * dil]
                out[o, i, j] = acc
    return out


def naive_conv3d(x, k, strides, pads):
    xp = np.pad(x, [(0, 0)] + [(p, p) for p in pads])
    c_out, c_in = k.shape[:2]
    ks = k.shape[2:]
    osz = [(n + 2 * p - kk) // s + 1 for n, p, kk, s in zip(x.shape[1:], pads, ks, strides)]
    out = np.zeros([c_out] + osz)
    for o in range(c_out):
        for idx in np.ndindex(*osz):
            patch = xp[
                :,
                idx[0] * strides[0] : idx[0] * strides[0] + ks[0],
                idx[1] * strides[1] : idx[1] * strides[1] + ks[1],
                idx[2] * strides[2] : idx[2] * strides[2] + ks[2],
            ]
            out[(o,) + idx] = (patch * k[o]).sum()
    return out


class TestTensor:
    def test_extents_must_be_positive(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_scalar_is_promoted_to_length_one(self):
        assert Tensor(3.0).shape == (1,)

    def test_dump(self):
        assert T([[1, 2], [3, 4]]).dump() == "2x2; 1.0 2.0 3.0 4.0"


class TestMatmul:
    def test_identity(self):
        b = T([[1, 2], [3, 4]])
        np.testing.assert_array_equal(ad.matmul(T(np.eye(2)), b).data, b.data)

    def test_hand_value(self):
        out = ad.matmul(T([[1, 2], [3, 4]]), T([[5], [6]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ad.softmax(T([0.0, 0.0]), 0).data, [0.5, 0.5])

    def test_closed_form(self):
        out = ad.softmax(T([math.log(1), math.log(3)]), 0).data
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-15)

    def test_shift_invariance(self):
        x = np.random.default_rng(1).standard_normal((3, 4))
        a = ad.softmax(T(x), 1).data
        b = ad.softmax(T(x + 17.5), 1).data
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            ad.softmax(T(np.ones((2, 2))), 2)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(-1e4, 1e4)), st.integers(0, 1))
    def test_sums_to_one_even_for_large_entries(self, x, axis):
        s = ad.softmax(T(x), axis).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-9)

    def test_jacobian_rows_sum_to_zero(self):
        rng = np.random.default_rng(2)
        x = T(rng.standard_normal(6) * 3, grad=True)
        # d/dx of sum(softmax) is the column-sum of the Jacobian; shift invariance makes
        # each Jacobian row (derivative along the all-ones direction) vanish.
        for i in range(6):
            with GradientTape() as tape:
                s = ad.softmax(x, 0)
                yi = ad.sum_all(ad.mul(s, T(np.eye(6)[i])))
            tape.backward(yi)
            assert abs(x.grad.sum()) <= 1e-9


class TestPointwise:
    def test_values(self):
        assert ad.pointwise(T([0.0]), "sigmoid").item() == 0.5
        np.testing.assert_array_equal(ad.pointwise(T([-1.0, 2.0]), "relu").data, [0.0, 2.0])
        x = T(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(ad.pointwise(x, "hadamard", T(np.ones((2, 3)))).data, x.data)

    def test_binary_needs_matching_shape(self):
        with pytest.raises(ShapeError):
            ad.pointwise(T(np.ones(3)), "add", T(np.ones(2)))

    def test_sigmoid_is_stable_at_extremes(self):
        s = ad.sigmoid(T([-800.0, 800.0])).data
        assert np.all(np.isfinite(s))
        assert s[0] >= 0 and s[1] <= 1


class TestConv:
    def test_unit_kernel_is_identity(self):
        x = T(np.random.default_rng(0).standard_normal((1, 5, 4)))
        np.testing.assert_array_equal(ad.conv2d(x, T(np.ones((1, 1, 1, 1)))).data, x.data)

    def test_impulse_copies_kernel(self):
        x = np.zeros((1, 5, 5))
        x[0, 2, 2] = 1.0
        k = np.arange(9.0).reshape(1, 1, 3, 3)
        out = ad.conv2d(T(x), T(k), pad=1).data[0]
        # cross-correlation places the kernel flipped around the impulse
        np.testing.assert_array_equal(out[1:4, 1:4], k[0, 0, ::-1, ::-1])
        assert out.sum() == k.sum()

    def test_constant_input_interior(self):
        out = ad.conv2d(T(np.full((1, 4, 4), 2.5)), T(np.ones((1, 1, 3, 3))), pad=1).data
        np.testing.assert_allclose(out[0, 1:3, 1:3], 9 * 2.5)

    @pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (2, 1, 1), (1, 3, 3), (2, 2, 2), (3, 1, 1)])
    def test_matches_loop_oracle(self, stride, pad, dil):
        rng = np.random.default_rng(stride * 10 + pad + dil)
        x = rng.standard_normal((2, 7, 6))
        k = rng.standard_normal((3, 2, 3, 3))
        out = ad.conv2d(T(x), T(k), stride=stride, pad=pad, dilation=dil).data
        np.testing.assert_allclose(out, naive_conv2d(x, k, stride, pad, dil), atol=1e-12)

    def test_output_extent_below_one(self):
        with pytest.raises(ShapeError):
            ad.conv2d(T(np.ones((1, 2, 2))), T(np.ones((1, 1, 5, 5))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ad.conv2d(T(np.ones((1, 4, 4))), T(np.ones((1, 1, 2, 2))))

    def test_conv3d_unit_kernel(self):
        x = T(np.random.default_rng(1).standard_normal((2, 3, 4, 4)))
        k = np.zeros((2, 2, 1, 1, 1))
        k[0, 0] = k[1, 1] = 1.0
        np.testing.assert_array_equal(ad.conv3d(x, T(k)).data, x.data)

    def test_conv3d_temporal_sum(self):
        x = np.random.default_rng(2).standard_normal((1, 5, 3, 3))
        out = ad.conv3d(T(x), T(np.ones((1, 1, 5, 1, 1)))).data
        np.testing.assert_allclose(out[0, 0], x[0].sum(axis=0), atol=1e-12)

    def test_conv3d_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 5, 5))
        k = rng.standard_normal((2, 2, 3, 3, 3))
        out = ad.conv3d(T(x), T(k), strides=(2, 1, 2), pads=(1, 1, 1)).data
        np.testing.assert_allclose(out, naive_conv3d(x, k, (2, 1, 2), (1, 1, 1)), atol=1e-12)

    def test_transposed_single_pixel_block(self):
        out = ad.transposed_conv2d(T([[[3.5]]]), T(np.ones((1, 1, 2, 2))), stride=2).data
        np.testing.assert_array_equal(out, np.full((1, 2, 2), 3.5))

    @pytest.mark.parametrize("stride,pad,k,n", [(2, 0, 2, 3), (2, 1, 4, 4), (1, 1, 3, 5), (3, 0, 3, 2)])
    def test_transposed_extent(self, stride, pad, k, n):
        out = ad.transposed_conv2d(T(np.ones((1, n, n))), T(np.ones((1, 2, k, k))), stride=stride, pad=pad)
        assert out.shape == (2, stride * (n - 1) + k - 2 * pad, stride * (n - 1) + k - 2 * pad)

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_identity(self, seed):
        rng = np.random.default_rng(seed)
        stride, pad, k = [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 3), (3, 1, 3)][seed]
        cin, cout, n_out = 2, 3, 4
        n_in = stride * (n_out - 1) + k - 2 * pad
        x = rng.standard_normal((cin, n_in, n_in))
        y = rng.standard_normal((cout, n_out, n_out))
        kern = T(rng.standard_normal((cout, cin, k, k)))
        lhs = (ad.conv2d(T(x), kern, stride=stride, pad=pad).data * y).sum()
        rhs = (x * ad.transposed_conv2d(T(y), kern, stride=stride, pad=pad).data).sum()
        assert abs(lhs - rhs) <= 1e-9


class TestPoolingAndFC:
    def test_global_max_pool(self):
        assert ad.global_max_pool(T([[[1, 5], [3, 2]]])).item() == 5
        np.testing.assert_array_equal(ad.global_max_pool(T(np.full((3, 2, 2), 4.0))).data, [4, 4, 4])

    def test_max_pool_tie_goes_to_first(self):
        x = T([[[2.0, 1.0], [2.0, 2.0]]], grad=True)
        with GradientTape() as tape:
            y = ad.sum_all(ad.global_max_pool(x))
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, [[[1, 0], [0, 0]]])

    def test_fully_connected(self):
        x, b = T([1.0, -2.0, 3.0]), T([0.5, 1.5])
        np.testing.assert_array_equal(ad.fully_connected(x, T(np.zeros((2, 3))), b).data, b.data)
        np.testing.assert_array_equal(ad.fully_connected(x, T(np.eye(3)), T(np.zeros(3))).data, x.data)
        with pytest.raises(ShapeError):
            ad.fully_connected(x, T(np.zeros((2, 2))), b)


class TestResampling:
    def test_nearest(self):
        np.testing.assert_array_equal(ad.upsample2x(T([[[7.0]]]), "nearest").data, np.full((1, 2, 2), 7.0))

    @pytest.mark.parametrize("mode", ["nearest", "bilinear"])
    def test_constant_preserved(self, mode):
        out = ad.upsample2x(T(np.full((2, 3, 5), 0.3)), mode).data
        assert out.shape == (2, 6, 10)
        np.testing.assert_allclose(out, 0.3, atol=1e-15)

    def test_bilinear_ramp_monotone(self):
        ramp = np.tile(np.arange(4.0), (4, 1))[None]
        out = ad.upsample2x(T(ramp), "bilinear").data[0]
        assert np.all(np.diff(out, axis=1) >= 0)
        # align-corners-false: first output pixel sits at source -0.25, clamped to 0
        np.testing.assert_allclose(out[0, :4], [0.0, 0.25, 0.75, 1.25])

    def test_concat(self):
        a, b = T(np.zeros((1, 4, 4))), T(np.ones((2, 4, 4)))
        out = ad.concat_channels([a, b])
        assert out.shape == (3, 4, 4)
        assert ad.concat_channels([a]) is a
        with pytest.raises(ShapeError):
            ad.concat_channels([a, T(np.ones((1, 3, 4)))])


class TestBackward:
    def test_sum_of_squares(self):
        x = T([1.0, -2.0, 3.5], grad=True)
        with GradientTape() as tape:
            y = ad.sum_all(ad.mul(x, x))
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, 2 * x.data)

    def test_unused_leaf_gets_zero(self):
        x = T([1.0, 2.0], grad=True)
        z = T([3.0, 4.0], grad=True)
        with GradientTape() as tape:
            _ = ad.mul(z, 2.0)
            y = ad.sum_all(x)
        tape.backward(y)
        np.testing.assert_array_equal(z.grad, [0.0, 0.0])

    def test_second_backward_is_an_error(self):
        x = T([1.0], grad=True)
        with GradientTape() as tape:
            y = ad.mul(x, x)
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)
        tape.reset()
        with tape:
            y = ad.mul(x, 3.0)
        ad.backward(y, tape)
        assert x.grad[0] == 3.0

    def test_non_scalar_loss(self):
        x = T([1.0, 2.0], grad=True)
        with GradientTape() as tape:
            y = ad.mul(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_no_tape_no_recording(self):
        x = T([1.0], grad=True)
        assert not ad.mul(x, x).requires_grad

    def test_tape_is_topologically_ordered(self):
        x = T(np.ones(3), grad=True)
        with GradientTape() as tape:
            y = ad.sigmoid(ad.mul(x, 2.0))
            ad.sum_all(y)
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(t) in seen for t in node.inputs if t.requires_grad)
            seen.add(id(node.out))


def _cases():
    """(name, f(x) -> scalar, shapes) for every differentiable primitive."""
    rng = np.random.default_rng(11)

    def const(shape):
        return T(rng.standard_normal(shape))

    k2 = const((3, 2, 3, 3))
    k3 = const((2, 2, 3, 3, 3))
    kt = const((2, 3, 4, 4))
    w, b = const((4, 3)), const(4)
    other = {}

    def partner(x):
        key = x.shape
        if key not in other:
            other[key] = const(key)
        return other[key]

    return [
        ("matmul", lambda x: weighted_sum(ad.matmul(x, T(np.ones((x.shape[1], 2)) * 0.7))), [(2, 3), (1, 1), (4, 2), (3, 5), (2, 2)]),
        ("softmax0", lambda x: weighted_sum(ad.softmax(x, 0)), [(3,), (2, 4), (5, 1), (4, 4), (1, 3)]),
        ("softmax1", lambda x: weighted_sum(ad.softmax(x, -1)), [(3, 2), (2, 4), (5, 3), (1, 6), (2, 2, 3)]),
        ("sigmoid", lambda x: weighted_sum(ad.sigmoid(x)), [(3,), (2, 3), (1, 4, 4), (5,), (2, 2, 2)]),
        ("relu", lambda x: weighted_sum(ad.relu(x)), [(3,), (2, 3), (1, 4, 4), (5,), (2, 2, 2)]),
        ("add", lambda x: weighted_sum(ad.add(x, partner(x))), [(3,), (2, 3), (1, 4, 4), (5,), (2, 2, 2)]),
        ("hadamard", lambda x: weighted_sum(ad.mul(x, partner(x))), [(3,), (2, 3), (1, 4, 4), (5,), (2, 2, 2)]),
        ("div", lambda x: weighted_sum(ad.div(partner(x), ad.add(ad.mul(x, x), 1.0))), [(3,), (2, 3), (1, 4, 4), (5,), (2, 2)]),
        ("log", lambda x: weighted_sum(ad.log(ad.add(ad.mul(x, x), 0.5))), [(3,), (2, 3), (1, 4, 4), (5,), (2, 2)]),
        ("conv2d", lambda x: weighted_sum(ad.conv2d(x, k2, pad=1)), [(2, 4, 4), (2, 3, 5), (2, 1, 1), (2, 2, 6), (2, 5, 3)]),
        ("conv2d_s2_d2", lambda x: weighted_sum(ad.conv2d(x, k2, stride=2, pad=2, dilation=2)), [(2, 4, 4), (2, 5, 5), (2, 3, 6), (2, 2, 2), (2, 6, 3)]),
        ("conv3d", lambda x: weighted_sum(ad.conv3d(x, k3, strides=(2, 1, 1), pads=1)), [(2, 3, 4, 4), (2, 1, 3, 3), (2, 4, 2, 3), (2, 2, 2, 2), (2, 5, 3, 2)]),
        ("transposed_conv2d", lambda x: weighted_sum(ad.transposed_conv2d(x, kt, stride=2, pad=1)), [(2, 2, 2), (2, 3, 3), (2, 1, 4), (2, 4, 2), (2, 1, 1)]),
        ("global_max_pool", lambda x: weighted_sum(ad.global_max_pool(x)), [(3, 4, 4), (1, 2, 2), (2, 3, 1), (4, 1, 5), (2, 2, 3)]),
        ("fully_connected", lambda x: weighted_sum(ad.fully_connected(x, w, b)), [(3,)] * 5),
        ("upsample_nearest", lambda x: weighted_sum(ad.upsample2x(x, "nearest")), [(1, 2, 2), (2, 3, 1), (3, 2, 4), (1, 1, 1), (2, 4, 4)]),
        ("upsample_bilinear", lambda x: weighted_sum(ad.upsample2x(x, "bilinear")), [(1, 2, 2), (2, 3, 1), (3, 2, 4), (1, 1, 1), (2, 4, 4)]),
        ("concat", lambda x: weighted_sum(ad.concat_channels([x, ad.mul(x, x), partner(x)])), [(1, 2, 2), (2, 3, 1), (3, 2, 4), (1, 1, 1), (2, 4, 4)]),
        ("mean_axis", lambda x: weighted_sum(ad.mean_axis(x, 0, keepdims=True)), [(3, 2, 2), (2, 3, 1), (4, 2, 4), (1, 1, 1), (2, 4, 4)]),
        ("max_axis", lambda x: weighted_sum(ad.max_axis(x, 0, keepdims=True)), [(3, 2, 2), (2, 3, 1), (4, 2, 4), (1, 1, 1), (2, 4, 4)]),
        ("pad_edge", lambda x: weighted_sum(ad.pad_edge(x, 1, 1, 2)), [(2, 3, 2), (1, 1, 2), (2, 4, 1, 2), (1, 2, 2), (3, 1, 1)]),
        ("channel_affine", lambda x: weighted_sum(ad.channel_affine(partner(x), ad.mul(x, 1.5), ad.mul(x, x))), [(3,), (1,), (4,), (2,), (5,)]),
        ("scale_channels", lambda x: weighted_sum(ad.scale_channels(x, ad.global_max_pool(x))), [(3, 2, 2), (2, 3, 1), (4, 2, 4), (1, 1, 1), (2, 4, 4)]),
        ("scale_spatial", lambda x: weighted_sum(ad.scale_spatial(x, ad.mean_axis(x, 0, keepdims=True))), [(3, 2, 2), (2, 3, 1), (4, 2, 4), (1, 1, 1), (2, 4, 4)]),
        ("mean_all", lambda x: ad.mean_all(ad.mul(x, x)), [(3,), (2, 3), (1, 4, 4), (5,), (2, 2, 2)]),
        ("clamp", lambda x: weighted_sum(ad.clamp(x, -0.5, 0.5)), [(3,), (2, 3), (1, 4, 4), (5,), (2, 2, 2)]),
        ("reshape_transpose", lambda x: weighted_sum(ad.transpose(ad.reshape(x, (x.size // 2, 2)))), [(2, 2), (4,), (3, 2), (2, 3, 2), (6,)]),
    ]


@pytest.mark.parametrize("name,f,shapes", _cases(), ids=[c[0] for c in _cases()])
def test_primitive_gradients(name, f, shapes):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for shape in shapes:
        x = T(rng.standard_normal(shape))
        assert ad.grad_check(f, x, eps=1e-5) <= 1e-4, (name, shape)


class TestGradCheck:
    def test_sigmoid_at_zero(self):
        x = T([0.0], grad=True)
        with GradientTape() as tape:
            y = ad.sigmoid(x)
        tape.backward(y)
        assert x.grad[0] == 0.25
        assert ad.grad_check(ad.sigmoid, T([0.0])) <= 1e-6

    def test_matmul_sum(self):
        m = T(np.random.default_rng(5).standard_normal((3, 3)))
        assert ad.grad_check(lambda x: ad.sum_all(ad.matmul(x, m)), T(np.random.default_rng(6).standard_normal((3, 3)))) <= 1e-4

    def test_constant_function(self):
        assert ad.grad_check(lambda x: ad.add(ad.mul(ad.sum_all(x), 0.0), 2.0), T(np.ones(4))) == 0.0

    def test_directional(self):
        rng = np.random.default_rng(7)
        a, b = T(rng.standard_normal((3, 4))), T(rng.standard_normal((4, 2)))
        err = ad.directional_grad_check(lambda: ad.sum_all(ad.sigmoid(ad.matmul(a, b))), [a, b])
        assert err <= 1e-6
        assert not a.requires_grad


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = {"w": T([1.0, -2.0, 0.5])}
        g = {"w": np.array([0.3, -4.0, 1e-3])}
        ad.adam_step(p, g, ad.AdamState(lr=0.01))
        np.testing.assert_allclose(p["w"].data, [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], atol=1e-7)

    def test_zero_gradient_keeps_params(self):
        p = {"w": T([1.0, 2.0])}
        ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState())
        np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(3)
            p = {"w": T(rng.standard_normal(5))}
            s = ad.AdamState(lr=0.1)
            for _ in range(10):
                ad.adam_step(p, {"w": rng.standard_normal(5)}, s)
            runs.append(p["w"].data.tobytes())
        assert runs[0] == runs[1]

    def test_non_finite_rejected(self):
        p = {"w": T([1.0, 2.0]), "v": T([0.0])}
        s = ad.AdamState()
        with pytest.raises(ad.NonFiniteGradientError):
            ad.adam_step(p, {"v": np.array([1.0]), "w": np.array([np.nan, 0.0])}, s)
        assert s.step == 0 and s.m == {}
        np.testing.assert_array_equal(p["v"].data, [0.0])


def test_operations_are_deterministic():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 6, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    a = ad.conv2d(T(x), T(k), pad=1).data.tobytes()
    b = ad.conv2d(T(x), T(k), pad=1).data.tobytes()
    assert a == b
