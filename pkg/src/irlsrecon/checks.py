"""Self-check suites: operator adjoints, majorizer bounds, equilibration, descent."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fixtures
from .irls import IrlsSettings, NormalSystem, ProblemSpec, run_irls
from .linops import (CFAMask, Compose, Decimation, LinearOp, SubsampledDFT, ValidConv2D,
                     adjoint_check)
from .priors import (LOWRANK, SPARSE, FilterBank, PriorConfig, gradient_filters,
                     majorizer_eval, regularizer_eval)


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool


class _BrokenAdjoint(LinearOp):
    """Wraps an operator and perturbs its adjoint (used to test the checks)."""

    def __init__(self, op: LinearOp):
        self.op = op
        self.in_shape, self.out_shape = op.in_shape, op.out_shape

    def apply(self, v):
        return self.op.apply(v)

    def adjoint(self, u):
        return 1.01 * self.op.adjoint(u)


def shipped_operators(size: int = 16) -> dict:
    gray = (1, size, size)
    mask = fixtures.kernel("fourier_mask32")
    return {
        "conv": ValidConv2D(fixtures.kernel("motion7"), gray),
        "decimated-conv": Compose(Decimation((1, size - 4, size - 4), 2),
                                  ValidConv2D(fixtures.kernel("gauss5"), gray)),
        "cfa": CFAMask(size, size),
        "subsampled-dft": SubsampledDFT(mask),
        "filter-bank": FilterBank(gradient_filters(), gray),
    }


def _normal_system(size=12, seed=0):
    rng = np.random.default_rng(seed)
    shape = (1, size, size)
    A = ValidConv2D(fixtures.kernel("gauss5"), shape)
    y = A.apply(rng.random(shape))
    spec = ProblemSpec(A, y, 0.05, FilterBank(gradient_filters()), PriorConfig(SPARSE, 1.0, 1e-5, 1.0))
    xk = rng.random(shape)
    return spec, NormalSystem(spec, spec.weights(xk), xk)


class _SystemOp(LinearOp):
    def __init__(self, system, shape):
        self.system = system
        self.in_shape = self.out_shape = shape

    def apply(self, v):
        return self.system(v)

    def adjoint(self, u):
        return self.system(u)


def suite_adjoint(seed=0, mutate=False):
    rng = np.random.default_rng(seed)
    ops = shipped_operators()
    spec, system = _normal_system()
    ops["normal-system"] = _SystemOp(system, spec.x_shape)
    if mutate:
        ops["conv"] = _BrokenAdjoint(ops["conv"])
    out = []
    for name, op in ops.items():
        err = adjoint_check(op, trials=100, rng=rng)
        out.append(CheckResult("adjoint", name, err, 1e-10, err <= 1e-10))
    return out


def suite_majorizer(seed=0, trials=1000):
    """Random majorizer bounds on single positions: 16-vectors and 3x8 matrices."""
    rng = np.random.default_rng(seed)
    worst = {SPARSE: np.inf, LOWRANK: np.inf}
    tight = {SPARSE: 0.0, LOWRANK: 0.0}
    for _ in range(trials):
        for family, shape in ((SPARSE, (16, 1, 1, 1)), (LOWRANK, (8, 3, 1, 1))):
            p = float(rng.uniform(0.05, 2.0))
            gamma = float(10 ** rng.uniform(-6, 0))
            w = rng.uniform(0, 2, 16) if family == SPARSE else np.sort(rng.uniform(0, 2, 3))
            prior = PriorConfig(family, p, gamma, w)
            x, xk = rng.standard_normal((2,) + shape) * rng.uniform(0.01, 3)
            r = _potential_on_maps(prior, x)
            worst[family] = min(worst[family], (_majorizer_on_maps(prior, x, xk) - r) / (1 + abs(r)))
            rk = _potential_on_maps(prior, xk)
            tight[family] = max(tight[family],
                                abs(_majorizer_on_maps(prior, xk, xk) - rk) / (1 + abs(rk)))
    out = []
    for family in (SPARSE, LOWRANK):
        out.append(CheckResult("majorizer", f"{family}-bound", worst[family], -1e-10,
                               worst[family] >= -1e-10))
        out.append(CheckResult("majorizer", f"{family}-tight", tight[family], 1e-10,
                               tight[family] <= 1e-10))
    return out


class _MapsBank:
    """Feature maps passed through unchanged (lets the suites probe potentials directly)."""

    def apply(self, maps):
        return maps


def _majorizer_on_maps(prior, x, xk):
    return majorizer_eval(_MapsBank(), prior, x, xk)


def _potential_on_maps(prior, x):
    return regularizer_eval(_MapsBank(), prior, x)


def suite_equilibration(seed=0):
    spec, system = _normal_system(size=8, seed=seed)
    d = system.preconditioner().d
    n = d.size
    diag = np.empty(n)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        diag[j] = (d.ravel() * system(d * e.reshape(d.shape)).ravel())[j]
    err = float(np.max(np.abs(diag - 1.0)))
    return [CheckResult("equilibration", "unit-diagonal", err, 1e-12, err <= 1e-12)]


def suite_descent(seed=0):
    out = []
    for name in ("deblur-sparse", "deblur-lowrank"):
        fx = fixtures.fixture(name, seed=seed)
        settings = IrlsSettings(max_steps=20)
        _, state, trace = run_irls(fx.spec(), fx.x0(), settings)
        objectives = [row.objective for row in trace]
        rises = np.diff(objectives)
        worst = float(max(0.0, rises.max())) if rises.size else 0.0
        out.append(CheckResult("descent", name, worst, 1e-9, worst <= 1e-9))
    return out


SUITES = {
    "adjoint": suite_adjoint,
    "majorizer": suite_majorizer,
    "equilibration": suite_equilibration,
    "descent": suite_descent,
}


def run_suites(names, seed=0, mutate_adjoint=False) -> list:
    if not names:
        raise ValueError("no check suites selected")
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown check suite(s): {', '.join(unknown)}")
    results = []
    for name in names:
        if name == "adjoint":
            results += suite_adjoint(seed, mutate=mutate_adjoint)
        else:
            results += SUITES[name](seed)
    return results
