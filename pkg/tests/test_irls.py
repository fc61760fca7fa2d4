import csv

import numpy as np
import pytest

from irlsrecon import fixtures
from irlsrecon.irls import (TRACE_COLUMNS, _interpolate_to_grid, IrlsSettings, IrlsState, NormalSystem, ProblemSpec,
                            assemble_normal_system, backproject_init, initial_estimate, mm_step,
                            relative_changes, ridge_solution, run_irls, surrogate_eval,
                            wiener_init, write_trace_csv)
from irlsrecon.linops import (CFAMask, Compose, Decimation, IdentityOp, SubsampledDFT, ValidConv2D,
                              densify)
from irlsrecon.priors import LOWRANK, SPARSE, FilterBank, PriorConfig, gradient_filters
from irlsrecon.tensors_io import psnr

EXACT = IrlsSettings(cg_rtol=1e-14, cg_maxiter=2000)


class Dense:
    def __init__(self, fn, shape):
        self.fn, self.in_shape, self.out_shape = fn, shape, shape

    def apply(self, v):
        return self.fn(v)


def _spec(A, y, sigma, family=SPARSE, w=1.0, p=1.0, filters=None, delta=8e-4):
    bank = FilterBank(gradient_filters() if filters is None else filters)
    return ProblemSpec(A, y, sigma, bank, PriorConfig(family, p, 1e-3, w), delta)


def test_normal_system_without_prior(rng):
    A = IdentityOp((1, 4, 4))
    y, xk = rng.random((2, 1, 4, 4))
    spec = _spec(A, y, 0.1, w=0.0)
    system = assemble_normal_system(spec, spec.weights(xk), xk)
    v = rng.standard_normal((1, 4, 4))
    np.testing.assert_allclose(system(v), (1 + spec.alpha) * v, rtol=1e-15)
    np.testing.assert_allclose(system.rhs, y + spec.alpha * xk, rtol=1e-15)


def _dense_weight_matrix(wf):
    if wf.family == SPARSE:
        return np.diag(wf.values.ravel())
    k, c, hv, wv = wf.maps_shape
    n = k * c * hv * wv
    W = np.zeros((n, n))
    index = np.arange(n).reshape(wf.maps_shape)
    for pos in range(hv * wv):
        i, j = divmod(pos, wv)
        for f in range(k):
            rows = index[f, :, i, j]
            W[np.ix_(rows, rows)] = wf.blocks[pos]
    return W


@pytest.mark.parametrize("family,channels", [(SPARSE, 1), (LOWRANK, 3)])
def test_normal_system_matches_dense(family, channels, rng):
    shape = (channels, 12, 12)
    A = ValidConv2D(fixtures.kernel("blur3"), shape)
    y, xk = rng.random(A.out_shape), rng.random(shape)
    w = rng.random(3) if family == SPARSE else np.sort(rng.random(channels))
    spec = _spec(A, y, 0.05, family, w, 0.7, rng.standard_normal((3, 3, 3)))
    wf = spec.weights(xk)
    system = NormalSystem(spec, wf, xk)
    Ad, Gd = densify(A), densify(spec.bank)
    expected = Ad.T @ Ad + 0.7 * 0.05 ** 2 * Gd.T @ _dense_weight_matrix(wf) @ Gd \
        + spec.alpha * np.eye(Ad.shape[1])
    got = densify(Dense(system, shape))
    np.testing.assert_allclose(got, expected, atol=1e-12 * np.abs(expected).max())
    np.testing.assert_allclose(system.rhs.ravel(), Ad.T @ y.ravel() + spec.alpha * xk.ravel(),
                               atol=1e-12)


def test_mm_step_quadratic_matches_dense(rng):
    A = ValidConv2D(fixtures.kernel("gauss5"), (1, 10, 10))
    y, xk = rng.random(A.out_shape), rng.random((1, 10, 10))
    spec = _spec(A, y, 0.05, w=0.0)
    state = IrlsState(x=xk, weights=spec.weights(xk))
    new, _ = mm_step(spec, state, EXACT)
    Ad = densify(A)
    expected = np.linalg.solve(Ad.T @ Ad + spec.alpha * np.eye(100), Ad.T @ y.ravel() + spec.alpha * xk.ravel())
    np.testing.assert_allclose(new.x.ravel(), expected, rtol=1e-8, atol=1e-10)


def test_mm_step_keeps_a_fixed_point():
    fx = fixtures.tiny_fixture("deblur8")
    spec = fx.spec()
    tight = IrlsSettings(max_steps=5000, fp_rtol=1e-12, consecutive=2, cg_rtol=1e-14, cg_maxiter=3000)
    x, st, _ = run_irls(spec, fx.x0(), tight)
    assert st.converged
    new, _ = mm_step(spec, IrlsState(x=x, weights=spec.weights(x)), EXACT)
    assert np.linalg.norm(new.x - x) <= 1e-9 * np.linalg.norm(x)


def test_mm_step_descent_on_deblur_fixture():
    fx = fixtures.fixture("deblur-sparse")
    spec = fx.spec()
    state = IrlsState(x=fx.x0(), weights=spec.weights(fx.x0()))
    for _ in range(20):
        state, _ = mm_step(spec, state, IrlsSettings())
    diffs = np.diff(state.objectives)
    assert len(state.objectives) == 21
    assert diffs.max() <= 1e-9 and state.descent_violations == 0


def test_surrogate_majorizes_objective(rng):
    fx = fixtures.fixture("deblur-lowrank")
    spec = fx.spec()
    xk = fx.x0()
    assert surrogate_eval(spec, xk, xk) == pytest.approx(spec.objective(xk), rel=1e-12)
    for _ in range(5):
        x = xk + 0.05 * rng.standard_normal(xk.shape)
        assert surrogate_eval(spec, x, xk) >= spec.objective(x) - 1e-9


def test_quadratic_problem_converges_immediately(rng):
    A = ValidConv2D(fixtures.kernel("blur3"), (1, 8, 8))
    x_true = rng.random((1, 8, 8))
    y = A.apply(x_true)
    spec = _spec(A, y, 0.05, w=0.0)
    x, st, _ = run_irls(spec, np.zeros((1, 8, 8)), IrlsSettings(consecutive=1, cg_rtol=1e-12,
                                                                 cg_maxiter=500))
    assert st.converged and st.k <= 2
    Ad = densify(A)
    lsq = np.linalg.lstsq(Ad, y.ravel(), rcond=None)[0]
    assert np.linalg.norm(Ad.T @ (Ad @ x.ravel() - y.ravel())) <= 1e-4 * np.linalg.norm(Ad.T @ y.ravel())
    assert np.linalg.norm(Ad @ (x.ravel() - lsq)) <= 1e-3 * np.linalg.norm(y)


@pytest.mark.parametrize("name", fixtures.FIXTURE_NAMES)
def test_run_irls_converges_on_fixtures(name):
    fx = fixtures.fixture(name)
    x, st, trace = run_irls(fx.spec(), fx.x0(), IrlsSettings.train(), reference=fx.x_true)
    assert st.converged and st.k <= 400
    assert st.residuals[-1] < 1e-4 and all(r < 1e-4 for r in st.residuals[-3:])
    assert st.descent_violations == 0
    assert len(trace) == st.k + 1
    assert trace[-1].psnr > trace[0].psnr
    r = np.array(st.residuals)
    assert np.all(r[6:] <= 1.1 * r[5:-1])


def test_run_irls_respects_step_cap():
    fx = fixtures.fixture("demosaick-lowrank")
    _, st, trace = run_irls(fx.spec(), fx.x0(), IrlsSettings.inference())
    assert not st.converged and st.k == 15 and len(trace) == 16


def test_run_irls_shape_check():
    fx = fixtures.fixture("deblur-sparse")
    with pytest.raises(ValueError):
        run_irls(fx.spec(), np.zeros((1, 5, 5)))


def test_trace_csv(tmp_path):
    fx = fixtures.fixture("fourier-sparse")
    _, _, trace = run_irls(fx.spec(), fx.x0(), reference=fx.x_true)
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == TRACE_COLUMNS
    assert len(rows) == len(trace) + 1
    assert rows[1][-1] == "" and float(rows[2][-1]) > 0
    assert len(relative_changes(trace)) == len(trace) - 1


def test_settings_presets_and_validation():
    assert IrlsSettings.train().max_steps == 400 and IrlsSettings.train().cg_maxiter == 150
    assert IrlsSettings.inference().max_steps == 15 and IrlsSettings.inference().cg_maxiter == 50
    with pytest.raises(ValueError):
        IrlsSettings(fp_rtol=0)
    with pytest.raises(ValueError):
        IrlsSettings(max_steps=0)


def test_spec_validation(rng):
    A = IdentityOp((1, 4, 4))
    with pytest.raises(ValueError):
        _spec(A, np.zeros((1, 3, 3)), 0.1)
    with pytest.raises(ValueError):
        _spec(A, np.zeros((1, 4, 4)), 0.0)


def test_wiener_identity_kernel_returns_y(rng):
    y = rng.random((1, 9, 9))
    A = ValidConv2D(np.ones((1, 1)), y.shape)
    np.testing.assert_allclose(wiener_init(A, y, 0.0, lam=1e-14), y, atol=1e-10)


def test_wiener_delta_kernel_with_support_returns_interior(rng):
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    x = rng.random((1, 10, 10))
    A = ValidConv2D(k, x.shape)
    out = wiener_init(A, A.apply(x), 0.0, lam=1e-14)
    np.testing.assert_allclose(out[:, 1:-1, 1:-1], x[:, 1:-1, 1:-1], atol=1e-10)


def test_wiener_single_tap_is_scaled_copy(rng):
    y = rng.random((1, 1, 12))
    A = ValidConv2D(np.array([[0.5]]), y.shape)
    for lam in (1e-2, 1.0, 1e6):
        np.testing.assert_allclose(wiener_init(A, y, 0.0, lam=lam), 0.5 * y / (0.25 + lam), rtol=1e-12)


def test_wiener_large_lambda_attenuates(rng):
    y = rng.random((1, 1, 14))
    A = ValidConv2D(np.array([[0.2, 0.5, 0.3]]), (1, 1, 16))
    a = wiener_init(A, y, 0.0, lam=1e8)
    b = wiener_init(A, y, 0.0, lam=1e9)
    assert np.abs(a).max() < 1e-7
    # 1/lam scaling: lam * x0 tends to the conj(K)-filtered canvas
    np.testing.assert_allclose(1e8 * a, 1e9 * b, rtol=1e-6)


@pytest.mark.parametrize("kernel", ["gauss5", "gauss9"])
def test_wiener_beats_padded_observation(kernel):
    x = fixtures.gray32()
    k = fixtures.kernel(kernel)
    A = ValidConv2D(k, x.shape)
    y = fixtures.noisy(A, x, 0.01, 0)
    h = (k.shape[0] - 1) // 2
    padded = np.pad(y, ((0, 0), (h, h), (h, h)), mode="edge")
    assert psnr(wiener_init(A, y, 0.01), x) > psnr(padded, x)


def test_decimated_samples_interpolate_ramps_exactly():
    rows, cols = np.meshgrid(np.arange(9.0), np.arange(7.0), indexing="ij")
    ramp = (0.3 * rows - 0.2 * cols)[None]
    coarse = ramp[:, 1::2, 0::3]
    grid = _interpolate_to_grid(coarse, (8, 7), (2, 3), (1, 0))
    np.testing.assert_allclose(grid[:, 1:, :7], ramp[:, 1:8, :7], atol=1e-12)


def test_wiener_handles_decimation():
    x = fixtures.gray32()
    conv = ValidConv2D(fixtures.kernel("gauss5"), x.shape)
    A = Compose(Decimation(conv.out_shape, 2), conv)
    y = fixtures.noisy(A, x, 0.01, 0)
    out = wiener_init(A, y, 0.01)
    assert out.shape == x.shape
    baseline = np.pad(_interpolate_to_grid(y, conv.out_shape[1:], (2, 2), (0, 0)),
                      ((0, 0), (2, 2), (2, 2)), mode="edge")
    assert psnr(out, x) > psnr(baseline, x)


def test_backproject_identity(rng):
    y = rng.random((1, 4, 4))
    np.testing.assert_array_equal(backproject_init(IdentityOp(y.shape), y), y)


def test_backproject_fourier_is_zero_filled_inverse(rng):
    mask = fixtures.kernel("fourier_mask32")[:8, :8] * 0
    mask[0, 0] = mask[0, 1] = mask[0, 7] = mask[3, 5] = mask[5, 3] = 1
    A = SubsampledDFT(mask)
    x = rng.random((1, 8, 8))
    bp = backproject_init(A, A.apply(x))
    Ad = densify(A)
    np.testing.assert_allclose(bp.ravel(), Ad.T @ Ad @ x.ravel(), atol=1e-12)
    np.testing.assert_allclose(bp[0], np.fft.ifft2(np.fft.fft2(x[0]) * mask).real, atol=1e-12)


def test_backproject_cfa_is_mosaic(rng):
    A = CFAMask(4, 6)
    x = rng.random(A.in_shape)
    bp = initial_estimate(A, A.apply(x), 0.01)
    np.testing.assert_array_equal(bp, A.diag * x)


def test_ridge_solution(rng):
    A = ValidConv2D(fixtures.kernel("blur3"), (1, 6, 6))
    y = rng.random(A.out_shape)
    spec = _spec(A, y, 0.1, w=0.0)
    Ad = densify(A)
    expected = np.linalg.solve(Ad.T @ Ad + spec.alpha * np.eye(36), Ad.T @ y.ravel())
    x = ridge_solution(spec, IrlsSettings(cg_rtol=1e-13, cg_maxiter=1000))
    np.testing.assert_allclose(x.ravel(), expected, rtol=1e-8)
