import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from irlsrecon import fixtures
from irlsrecon.linops import (CFAMask, Compose, Decimation, DiagonalOp, IdentityOp, Scale,
                              SquareRuleError, SubsampledDFT, SumOp, ValidConv2D, adjoint_check,
                              bayer_rggb, densify, is_conjugate_symmetric)
from irlsrecon.priors import FilterBank


def _symmetric_mask(shape, rate, seed):
    r = np.random.default_rng(seed)
    m = r.random(shape) < rate
    flipped = np.roll(m[::-1, ::-1], 1, axis=(0, 1))
    m = m | flipped
    m[0, 0] = True
    return m


def operators():
    gray = (1, 8, 8)
    color = (3, 8, 8)
    r = np.random.default_rng(7)
    return {
        "identity": IdentityOp(gray),
        "conv": ValidConv2D(r.random((3, 3)), gray),
        "conv-color": ValidConv2D(r.random((3, 2, 3)), color),
        "decimated-conv": Compose(Decimation((1, 6, 6), 2, (1, 0)), ValidConv2D(r.random((3, 3)), gray)),
        "cfa": CFAMask(8, 8),
        "dft": SubsampledDFT(_symmetric_mask((8, 8), 0.3, 1)),
        "dft-odd": SubsampledDFT(_symmetric_mask((7, 9), 0.4, 2)),
        "filter-bank": FilterBank(r.standard_normal((3, 3, 3)), color),
        "scale": Scale(IdentityOp(gray), -2.5),
        "sum": SumOp(CFAMask(8, 8), DiagonalOp(r.random(color))),
    }


OPS = operators()


def test_identity_apply_and_adjoint(rng):
    v = rng.standard_normal((1, 3, 3))
    op = IdentityOp(v.shape)
    np.testing.assert_array_equal(op.apply(v), v)
    np.testing.assert_array_equal(op.adjoint(v), v)


def test_unit_kernel_scales(rng):
    v = rng.standard_normal((2, 5, 4))
    np.testing.assert_allclose(ValidConv2D(np.array([[2.0]]), v.shape).apply(v), 2 * v)


def _direct_valid_conv(k, img):
    kh, kw = k.shape
    out = np.zeros((img.shape[0] - kh + 1, img.shape[1] - kw + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for a in range(kh):
                for b in range(kw):
                    out[i, j] += k[a, b] * img[i + kh - 1 - a, j + kw - 1 - b]
    return out


def test_conv_matches_direct_loop(rng):
    k = rng.random((3, 2))
    img = rng.random((6, 7))
    out = ValidConv2D(k, (1, 6, 7)).apply(img[None])[0]
    np.testing.assert_allclose(out, _direct_valid_conv(k, img), atol=1e-14)


@pytest.mark.parametrize("name", list(OPS))
def test_apply_and_adjoint_match_dense(name, rng):
    op = OPS[name]
    mat = densify(op)
    v = rng.standard_normal(op.in_shape)
    u = rng.standard_normal(op.out_shape)
    np.testing.assert_allclose(op.apply(v).ravel(), mat @ v.ravel(), atol=1e-12)
    np.testing.assert_allclose(op.adjoint(u).ravel(), mat.T @ u.ravel(), atol=1e-12)


@pytest.mark.parametrize("name", [n for n in OPS if n != "sum"])
def test_square_actions_match_dense(name, rng):
    op = OPS[name]
    sq = densify(op) ** 2
    v = rng.standard_normal(op.in_shape)
    u = rng.standard_normal(op.out_shape)
    np.testing.assert_allclose(op.apply_square(v).ravel(), sq @ v.ravel(), atol=1e-12)
    np.testing.assert_allclose(op.square_adjoint(u).ravel(), sq.T @ u.ravel(), atol=1e-12)


def test_sum_has_no_square_rule():
    with pytest.raises(SquareRuleError):
        OPS["sum"].apply_square(np.zeros(OPS["sum"].in_shape))


def test_compose_without_exact_square_rule_refuses():
    r = np.random.default_rng(0)
    op = Compose(ValidConv2D(r.random((2, 2)), (1, 4, 4)), ValidConv2D(r.random((2, 2)), (1, 5, 5)))
    with pytest.raises(SquareRuleError):
        op.square_adjoint(np.ones(op.out_shape))


@pytest.mark.parametrize("name", list(OPS))
def test_adjoint_check_on_all_operators(name):
    assert adjoint_check(OPS[name], trials=100, rng=0) <= 1e-10


def test_adjoint_check_identity_zero():
    assert adjoint_check(IdentityOp((1, 3, 3)), trials=10, rng=0) == 0.0


def test_adjoint_check_catches_broken_adjoint():
    class Broken(ValidConv2D):
        def adjoint(self, u):
            return 1.01 * super().adjoint(u)

    assert adjoint_check(Broken(np.ones((3, 3)) / 9, (1, 8, 8)), trials=100, rng=0) > 1e-3


def test_decimation_adjoint_interleaves_zeros():
    op = Decimation((1, 4, 4), 2)
    u = np.arange(1.0, 5.0).reshape(1, 2, 2)
    expected = np.zeros((1, 4, 4))
    expected[0, ::2, ::2] = u[0]
    np.testing.assert_array_equal(op.adjoint(u), expected)


def test_decimation_dense_selection():
    mat = densify(Decimation((1, 1, 4), (1, 2)))
    np.testing.assert_array_equal(mat, [[1, 0, 0, 0], [0, 0, 1, 0]])


def test_decimation_bad_offset():
    with pytest.raises(ValueError):
        Decimation((1, 4, 4), 2, (2, 0))


def test_identity_densifies_to_eye():
    np.testing.assert_array_equal(densify(IdentityOp((1, 2, 2))), np.eye(4))


def test_densify_refuses_huge():
    with pytest.raises(ValueError):
        densify(IdentityOp((1, 200, 200)), max_entries=1000)


def test_cfa_square_equals_apply(rng):
    op = CFAMask(6, 4)
    v = rng.standard_normal(op.in_shape)
    np.testing.assert_array_equal(op.apply_square(v), op.apply(v))


def test_cfa_pattern_one_sample_per_pixel():
    m = bayer_rggb(4, 6)
    np.testing.assert_array_equal(m.sum(axis=0), np.ones((4, 6)))
    assert m[0, 0, 0] == 1 and m[1, 0, 1] == 1 and m[1, 1, 0] == 1 and m[2, 1, 1] == 1


def test_cfa_backprojection_is_mosaic(rng):
    op = CFAMask(4, 4)
    x = rng.random(op.in_shape)
    bp = op.adjoint(op.apply(x))
    np.testing.assert_array_equal(bp, x * bayer_rggb(4, 4))


def test_dft_square_of_ones_is_sampling_rate():
    op = SubsampledDFT(fixtures.kernel("fourier_mask32"))
    out = op.square_adjoint(np.ones(op.out_shape))
    np.testing.assert_allclose(out, op.m / op.n, atol=1e-12)


def test_dft_rows_orthonormal():
    mask = np.zeros(8, dtype=bool)
    mask[[0, 1, 7, 4]] = True
    op = SubsampledDFT(mask[None, :].repeat(1, axis=0))
    mat = densify(op)
    assert mat.shape == (4, 8)
    np.testing.assert_allclose(mat @ mat.T, np.eye(4), atol=1e-12)


def test_dft_rejects_asymmetric_mask():
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 1] = True
    assert not is_conjugate_symmetric(mask)
    with pytest.raises(ValueError):
        SubsampledDFT(mask)


def test_dft_backprojection_is_zero_filled_inverse(rng):
    mask = _symmetric_mask((8, 8), 0.4, 3)
    op = SubsampledDFT(mask)
    x = rng.random(op.in_shape)
    expected = np.fft.ifft2(np.fft.fft2(x[0]) * mask).real
    np.testing.assert_allclose(op.adjoint(op.apply(x))[0], expected, atol=1e-12)


def test_conv_rejects_large_kernel():
    with pytest.raises(ValueError):
        ValidConv2D(np.ones((5, 5)), (1, 4, 4))


def test_shape_checks(rng):
    with pytest.raises(ValueError):
        OPS["conv"].apply(rng.random((1, 7, 8)))
    with pytest.raises(ValueError):
        OPS["conv"].adjoint(rng.random((1, 7, 8)))


def test_transpose_view(rng):
    op = OPS["decimated-conv"]
    u = rng.standard_normal(op.out_shape)
    np.testing.assert_array_equal(op.T.apply(u), op.adjoint(u))
    assert op.T.T is op


@given(st.integers(1, 4), st.integers(1, 4), st.integers(4, 9), st.integers(4, 9),
       st.integers(0, 2 ** 31))
def test_conv_adjoint_property(kh, kw, h, w, seed):
    r = np.random.default_rng(seed)
    op = ValidConv2D(r.standard_normal((kh, kw)), (2, h, w))
    assert adjoint_check(op, trials=5, rng=r) <= 1e-10


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.integers(0, 2 ** 31))
def test_decimation_square_rule_property(sy, sx, off, seed):
    r = np.random.default_rng(seed)
    inner = ValidConv2D(r.standard_normal((2, 2)), (1, 7, 7))
    op = Compose(Decimation(inner.out_shape, (sy, sx), (off % sy, off % sx)), inner)
    u = r.standard_normal(op.out_shape)
    np.testing.assert_allclose(op.square_adjoint(u).ravel(), (densify(op) ** 2).T @ u.ravel(),
                               atol=1e-12)
