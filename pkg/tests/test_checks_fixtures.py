import numpy as np
import pytest

from irlsrecon import checks, fixtures, plots
from irlsrecon.irls import IrlsSettings, run_irls
from irlsrecon.tensors_io import read_image

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.mark.parametrize("suite", sorted(checks.SUITES))
def test_suites_pass(suite):
    results = checks.run_suites([suite])
    assert results and all(r.passed for r in results), [r for r in results if not r.passed]


def test_majorizer_suite_small_run_passes():
    assert all(r.passed for r in checks.suite_majorizer(seed=3, trials=50))


def test_mutated_adjoint_is_detected():
    results = {r.name: r for r in checks.run_suites(["adjoint"], mutate_adjoint=True)}
    assert not results["conv"].passed and results["conv"].value > 1e-3
    assert all(r.passed for n, r in results.items() if n != "conv")


def test_suite_selection_errors():
    with pytest.raises(ValueError):
        checks.run_suites([])
    with pytest.raises(KeyError, match="nope"):
        checks.run_suites(["adjoint", "nope"])


@pytest.mark.parametrize("name", fixtures.FIXTURE_NAMES)
def test_fixture_shapes_and_noise(name):
    fx = fixtures.fixture(name, sigma=0.02, seed=4)
    assert fx.y.shape == tuple(fx.A.out_shape)
    assert fx.x_true.shape == tuple(fx.A.in_shape)
    resid = fx.y - fx.A.apply(fx.x_true)
    assert 0.015 < np.std(resid) < 0.025
    np.testing.assert_array_equal(fx.y, fixtures.fixture(name, sigma=0.02, seed=4).y)
    assert fx.x0().shape == fx.x_true.shape


@pytest.mark.parametrize("name", fixtures.TINY_NAMES)
def test_tiny_fixtures(name):
    fx = fixtures.tiny_fixture(name)
    assert fx.x_true.shape[1] in (8, 12) and fx.y.shape == tuple(fx.A.out_shape)


def test_unknown_fixture_names():
    with pytest.raises(KeyError, match="deblur-sparse"):
        fixtures.fixture("nope")
    with pytest.raises(KeyError):
        fixtures.tiny_fixture("nope")
    with pytest.raises(FileNotFoundError):
        fixtures.data_path("missing.ltsr")


def test_shipped_data():
    assert fixtures.gray32().shape == (1, 32, 32)
    assert fixtures.color32().shape == (3, 32, 32)
    assert fixtures.training_crops().shape == (6, 1, 16, 16)
    for name in ("gauss5", "gauss9", "blur3", "motion7"):
        k = fixtures.kernel(name)
        assert k.ndim == 2 and abs(k.sum() - 1) < 1e-12 and np.all(k >= 0)
    mask = fixtures.kernel("fourier_mask32")
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0.0, 1.0}
    deep = read_image(fixtures.data_path("gray32_16bit.png"))
    assert np.max(np.abs(deep - fixtures.gray32())) <= 0.5 / 255 + 1e-12


def test_plots_write_png(tmp_path):
    fx = fixtures.fixture("deblur-sparse")
    _, _, trace = run_irls(fx.spec(), fx.x0(), IrlsSettings(max_steps=3), reference=fx.x_true)
    plots.plot_convergence(trace, tmp_path / "c.png")
    plots.plot_convergence(run_irls(fx.spec(), fx.x0(), IrlsSettings(max_steps=2))[2],
                           tmp_path / "d.png")
    plots.plot_training([{"loss": -20.0}, {"loss": -21.0}], tmp_path / "t.png")
    for name in ("c.png", "d.png", "t.png"):
        assert (tmp_path / name).read_bytes()[:8] == PNG_MAGIC
