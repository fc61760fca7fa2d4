"""Majorization-minimization IRLS driver.

Each step freezes the weights at the current estimate ``x^k`` and solves

    (A^T A + p sigma^2 G^T W^k G + alpha I) x^{k+1} = A^T y + alpha x^k,

with ``alpha = delta * sigma^2``. The fixed-point residual of ``x^k`` is
``|S^k x^k - A^T y| / |A^T y|`` where ``S^k`` is the system matrix without
the ``alpha`` term.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import krylov
from .linops import Compose, Decimation, LinearOp, ValidConv2D
from .priors import (FilterBank, PriorConfig, WeightField, majorizer_eval,
                     objective_eval, weight_field)
from .tensors_io import psnr

log = logging.getLogger(__name__)

DESCENT_TOL = 1e-9


@dataclass
class ProblemSpec:
    A: LinearOp
    y: np.ndarray
    sigma: float
    bank: FilterBank
    prior: PriorConfig
    delta: float = 8e-4

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.shape != tuple(self.A.out_shape):
            raise ValueError(f"y has shape {self.y.shape}, operator produces {self.A.out_shape}")
        if self.bank.in_shape != tuple(self.A.in_shape):
            self.bank = self.bank.bound(self.A.in_shape)

    @property
    def alpha(self) -> float:
        return self.delta * self.sigma ** 2

    @property
    def x_shape(self):
        return tuple(self.A.in_shape)

    def objective(self, x) -> float:
        return objective_eval(self.A, self.y, self.sigma, self.bank, self.prior, x)

    def weights(self, x) -> WeightField:
        return weight_field(self.bank, self.prior, x)

    def with_prior(self, bank=None, prior=None) -> "ProblemSpec":
        return replace(self, bank=self.bank if bank is None else bank,
                       prior=self.prior if prior is None else prior)


@dataclass
class IrlsSettings:
    max_steps: int = 400
    fp_rtol: float = 1e-4
    consecutive: int = 3
    cg_rtol: float = 1e-6
    cg_maxiter: int = 150
    precondition: bool = True

    def __post_init__(self):
        if min(self.max_steps, self.consecutive, self.cg_maxiter) < 1:
            raise ValueError("iteration caps must be >= 1")
        if not (0 < self.fp_rtol < 1 and 0 < self.cg_rtol < 1):
            raise ValueError("tolerances must lie in (0, 1)")

    @classmethod
    def train(cls, **kw):
        return cls(**{"max_steps": 400, "cg_maxiter": 150, **kw})

    @classmethod
    def inference(cls, **kw):
        return cls(**{"max_steps": 15, "cg_maxiter": 50, **kw})


@dataclass
class IrlsState:
    x: np.ndarray
    k: int = 0
    weights: WeightField | None = None
    residuals: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    passes: int = 0
    converged: bool = False
    descent_violations: int = 0
    flags: list = field(default_factory=list)


class NormalSystem:
    """``v -> (A^T A + p sigma^2 G^T W G + alpha I) v`` with cached right-hand side."""

    def __init__(self, spec: ProblemSpec, wf: WeightField, xk, alpha=None):
        self.spec = spec
        self.wf = wf
        self.alpha = spec.alpha if alpha is None else alpha
        self.aty = spec.A.adjoint(spec.y)
        self.rhs = self.aty + self.alpha * np.asarray(xk, dtype=np.float64)

    def apply_S(self, v):
        """System matrix without the ``alpha`` term."""
        A, bank = self.spec.A, self.spec.bank
        coef = self.spec.prior.p * self.spec.sigma ** 2
        return A.adjoint(A.apply(v)) + coef * bank.adjoint(self.wf.apply(bank.apply(v)))

    def __call__(self, v):
        return self.apply_S(v) + self.alpha * v

    def preconditioner(self) -> krylov.DiagPrecond:
        return krylov.equilibrate(self.spec.A, self.spec.bank, self.wf,
                                  self.spec.prior.p, self.spec.sigma, self.alpha)

    def fixed_point_residual(self, x) -> float:
        denom = np.linalg.norm(self.aty)
        return float(np.linalg.norm(self.apply_S(x) - self.aty) / (denom if denom > 0 else 1.0))


def assemble_normal_system(spec: ProblemSpec, wf: WeightField, xk) -> NormalSystem:
    return NormalSystem(spec, wf, xk)


def surrogate_eval(spec: ProblemSpec, x, xk) -> float:
    """Augmented majorizer of ``J`` at ``xk``: data term + ``Q_reg`` + ``delta/2 |x - xk|^2``."""
    r = spec.y - spec.A.apply(x)
    data = float(np.vdot(r, r)) / (2 * spec.sigma ** 2)
    diff = np.asarray(x) - np.asarray(xk)
    return data + majorizer_eval(spec.bank, spec.prior, x, xk) \
        + spec.delta / 2 * float(np.vdot(diff, diff))


def _solve(system: NormalSystem, x0, settings: IrlsSettings, rtol=None, precondition=None):
    rtol = settings.cg_rtol if rtol is None else rtol
    precondition = settings.precondition if precondition is None else precondition
    pc = system.preconditioner() if precondition else None
    return krylov.pcg_solve(system, pc, system.rhs, x0, rtol, settings.cg_maxiter)


def mm_step(spec: ProblemSpec, state: IrlsState, settings: IrlsSettings):
    """One MM step from ``state.x``. Returns ``(new_state, solve_report)``.

    ``state.weights`` must hold the weights of ``state.x``; the new state's
    weights are refreshed at ``x^{k+1}``.
    """
    xk = state.x
    wf = state.weights if state.weights is not None else spec.weights(xk)
    system = NormalSystem(spec, wf, xk)
    j_old = state.objectives[-1] if state.objectives else spec.objective(xk)

    x_new, rep = _solve(system, xk, settings)
    flags = list(state.flags)
    if rep.reason == "breakdown" and settings.precondition:
        flags.append(f"step {state.k}: breakdown, retried unpreconditioned")
        x_new, rep = _solve(system, xk, settings, precondition=False)
    if rep.reason == "breakdown":
        flags.append(f"step {state.k}: inner solver breakdown")
    j_new = spec.objective(x_new)
    violations = state.descent_violations
    if j_new > j_old + DESCENT_TOL:
        x_retry, rep_retry = _solve(system, xk, settings, rtol=settings.cg_rtol / 10)
        j_retry = spec.objective(x_retry)
        rep_retry.iterations += rep.iterations
        x_new, rep, j_new = x_retry, rep_retry, j_retry
        if j_new > j_old + DESCENT_TOL:
            violations += 1
            flags.append(f"step {state.k}: objective rose by {j_new - j_old:.3e}")

    wf_new = spec.weights(x_new)
    new_state = IrlsState(
        x=x_new, k=state.k + 1, weights=wf_new,
        residuals=list(state.residuals), objectives=list(state.objectives) + [j_new],
        passes=state.passes, converged=False,
        descent_violations=violations, flags=flags)
    if not state.objectives:
        new_state.objectives.insert(0, j_old)
    return new_state, rep


@dataclass
class TraceRow:
    step: int
    fixed_point_rtol: float
    objective: float
    psnr: float | None
    cg_iters: int
    rel_change: float | None


TRACE_COLUMNS = ["step", "fixed_point_rtol", "objective", "psnr", "cg_iters", "rel_change"]


def run_irls(spec: ProblemSpec, x0, settings: IrlsSettings | None = None, reference=None,
             callback=None):
    """Iterate MM steps until the fixed-point criterion holds for
    ``settings.consecutive`` successive iterates, or ``max_steps`` solves.

    Returns ``(x, state, trace)`` where ``trace`` is a list of :class:`TraceRow`,
    one per iterate ``x^0, x^1, ...``.
    """
    settings = settings or IrlsSettings()
    x = np.array(x0, dtype=np.float64)
    if x.shape != spec.x_shape:
        raise ValueError(f"x0 has shape {x.shape}, expected {spec.x_shape}")
    state = IrlsState(x=x, weights=spec.weights(x))
    state.objectives.append(spec.objective(x))
    trace = []
    cg_iters, prev = 0, None
    aty = spec.A.adjoint(spec.y)
    aty_norm = np.linalg.norm(aty) or 1.0
    while True:
        system = NormalSystem(spec, state.weights, state.x)
        r = float(np.linalg.norm(system.apply_S(state.x) - aty) / aty_norm)
        state.residuals.append(r)
        state.passes = state.passes + 1 if r < settings.fp_rtol else 0
        rel = None if prev is None else float(
            np.linalg.norm(state.x - prev) / max(np.linalg.norm(state.x), 1e-300))
        trace.append(TraceRow(state.k, r, state.objectives[-1],
                              None if reference is None else psnr(state.x, reference),
                              cg_iters, rel))
        if callback is not None:
            callback(state, trace[-1])
        if state.passes >= settings.consecutive:
            state.converged = True
            break
        if state.k >= settings.max_steps:
            break
        prev = state.x
        new_state, rep = mm_step(spec, state, settings)
        new_state.residuals = state.residuals
        new_state.passes = state.passes
        state, cg_iters = new_state, rep.iterations
    if not state.converged:
        log.info("IRLS stopped after %d steps without meeting the fixed-point criterion "
                 "(last residual %.3e)", state.k, state.residuals[-1])
    return state.x, state, trace


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([row.step, repr(row.fixed_point_rtol), repr(row.objective),
                             "" if row.psnr is None else repr(row.psnr),
                             row.cg_iters,
                             "" if row.rel_change is None else repr(row.rel_change)])


def _conv_parts(A: LinearOp):
    """``(conv, decimation)`` if ``A`` is a valid convolution, optionally decimated."""
    if isinstance(A, ValidConv2D):
        return A, None
    if isinstance(A, Compose) and isinstance(A.outer, Decimation) and isinstance(A.inner, ValidConv2D):
        return A.inner, A.outer
    return None, None


def _interpolate_to_grid(y, grid, stride, offset):
    """Piecewise-linear interpolation of decimated samples back onto the full grid."""
    rows = offset[0] + stride[0] * np.arange(y.shape[1])
    cols = offset[1] + stride[1] * np.arange(y.shape[2])
    along_rows = np.apply_along_axis(lambda col: np.interp(np.arange(grid[0]), rows, col), 1, y)
    return np.apply_along_axis(lambda row: np.interp(np.arange(grid[1]), cols, row), 2, along_rows)


def wiener_init(A: LinearOp, y, sigma, lam=None, margin=None):
    """FFT Wiener deconvolution with periodic boundaries.

    The valid-size observation (linearly interpolated first when ``A``
    decimates) is placed on a canvas that extends the image by ``margin``
    mirrored pixels on every side, filtered with ``conj(K) / (|K|^2 + lam)``
    and cropped back. The margin keeps the wrap-around seam away from the
    image. ``lam`` defaults to ``max(100 sigma^2, 1e-4)``, multiplied by the
    decimation factor when there is one. Operators that are
    not convolutional fall back to :func:`backproject_init`.
    """
    conv, dec = _conv_parts(A)
    if conv is None:
        return backproject_init(A, y)
    default_lam = lam is None
    if default_lam:
        lam = max(100.0 * sigma ** 2, 1e-4)
    y = np.asarray(y, dtype=np.float64)
    c, height, width = conv.in_shape
    kh, kw = conv.kernel.shape[1:]
    if margin is None:
        margin = 2 * max(kh, kw)
    if dec is not None:
        # aliased samples need stronger damping than a plain blur
        lam *= dec.stride[0] * dec.stride[1] if default_lam else 1.0
        y = _interpolate_to_grid(y, conv.out_shape[1:], dec.stride, dec.offset)
    out = np.empty((c, height, width))
    m = margin
    for ch in range(c):
        # edge-extend y to the image grid around the kernel centre, mirror the
        # margin, then shift so that index t holds the full convolution at t
        ch_, cw_ = (kh - 1) // 2, (kw - 1) // 2
        canvas = np.pad(y[ch], ((ch_, kh - 1 - ch_), (cw_, kw - 1 - cw_)), mode="edge")
        canvas = np.pad(canvas, m, mode="reflect") if m else canvas
        canvas = np.roll(canvas, (ch_, cw_), axis=(0, 1))
        K = np.fft.fft2(conv.kernel[ch], s=canvas.shape)
        Y = np.fft.fft2(canvas)
        full = np.fft.ifft2(np.conj(K) * Y / (np.abs(K) ** 2 + lam)).real
        out[ch] = full[m:m + height, m:m + width]
    return out


def backproject_init(A: LinearOp, y):
    return A.adjoint(y)


def initial_estimate(A: LinearOp, y, sigma):
    conv, _ = _conv_parts(A)
    return wiener_init(A, y, sigma) if conv is not None else backproject_init(A, y)


def ridge_solution(spec: ProblemSpec, settings: IrlsSettings | None = None):
    """``(A^T A + alpha I)^{-1} A^T y`` via CG; used when the prior vanishes."""
    settings = settings or IrlsSettings()
    aty = spec.A.adjoint(spec.y)
    x, _ = krylov.cg_solve(lambda v: spec.A.adjoint(spec.A.apply(v)) + spec.alpha * v,
                           aty, None, settings.cg_rtol, settings.cg_maxiter)
    return x


def relative_changes(trace):
    return [row.rel_change for row in trace if row.rel_change is not None and not math.isnan(row.rel_change)]
