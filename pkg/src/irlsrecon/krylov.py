"""Matrix-free symmetric solvers (CG, PCG, MINRES) and diagonal equilibration.

Operators are plain callables ``v -> M v`` acting on arrays of any shape;
inner products are taken over the flattened arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linops import LinearOp
from .priors import FilterBank, WeightField

_TINY = np.finfo(np.float64).tiny


@dataclass
class SolveReport:
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    reason: str = "converged"
    history: list = field(default_factory=list)


@dataclass
class DiagPrecond:
    """Diagonal scaling ``D = diag(d)``; the solvers use ``D^2`` as the preconditioner."""
    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if not (np.all(np.isfinite(self.d)) and np.all(self.d > 0)):
            raise ValueError("preconditioner entries must be finite and positive")


def _norm(v) -> float:
    return math.sqrt(float(np.vdot(v, v)))


def _true_residual(M, b, x, bnorm):
    r = b - M(x)
    return r, _norm(r) / bnorm


def pcg_solve(M, precond: DiagPrecond | None, b, x0=None, rtol=1e-6, maxiter=150):
    """Preconditioned conjugate gradients for symmetric positive definite ``M``.

    Stops on the unpreconditioned relative residual ``|b - M x| / |b|``. The
    iterates are those of plain CG applied to ``D M D u = D b`` with ``x = D u``.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = _norm(b)
    report = SolveReport()
    if bnorm == 0:
        return np.zeros_like(b), report
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    d2 = None if precond is None else precond.d ** 2
    r, rel = _true_residual(M, b, x, bnorm)
    report.history.append(rel)
    it = 0
    while it < maxiter and rel > rtol:
        # restart loop: rebuild the direction from the current true residual
        z = r if d2 is None else d2 * r
        pdir = z.copy()
        rz = float(np.vdot(r, z))
        while it < maxiter:
            q = M(pdir)
            curv = float(np.vdot(pdir, q))
            if not np.isfinite(curv) or curv <= _TINY * max(rz, 1.0):
                report.reason = "breakdown" if not np.isfinite(curv) or curv < 0 else "stagnation"
                r, rel = _true_residual(M, b, x, bnorm)
                report.iterations, report.residual = it, rel
                report.converged = rel <= rtol
                return x, report
            step = rz / curv
            x = x + step * pdir
            r = r - step * q
            it += 1
            est = _norm(r) / bnorm
            report.history.append(est)
            if est <= rtol:
                break
            z = r if d2 is None else d2 * r
            rz_new = float(np.vdot(r, z))
            pdir = z + (rz_new / rz) * pdir
            rz = rz_new
        r, rel = _true_residual(M, b, x, bnorm)
    report.iterations, report.residual = it, rel
    report.converged = rel <= rtol
    if not report.converged:
        report.reason = "maxiter"
    return x, report


def cg_solve(M, b, x0=None, rtol=1e-6, maxiter=150):
    return pcg_solve(M, None, b, x0, rtol, maxiter)


def minres_solve(M, b, x0=None, rtol=1e-6, maxiter=2000):
    """MINRES (Paige & Saunders) for symmetric, possibly indefinite ``M``.

    ``report.history`` holds the residual-norm estimates, which are
    non-increasing.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = _norm(b)
    report = SolveReport()
    if bnorm == 0:
        return np.zeros_like(b), report
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r, rel = _true_residual(M, b, x, bnorm)
    report.history.append(rel)
    it = 0
    eps = np.finfo(np.float64).eps
    while it < maxiter and rel > rtol:
        r1 = r
        y = r.copy()
        beta1 = _norm(r)
        oldb, beta, dbar, epsln = 0.0, beta1, 0.0, 0.0
        phibar, cs, sn = beta1, -1.0, 0.0
        w = np.zeros_like(b)
        w2 = np.zeros_like(b)
        r2 = r1
        first = True
        while it < maxiter:
            v = y / beta
            y = M(v)
            if not first:
                y = y - (beta / oldb) * r1
            alfa = float(np.vdot(v, y))
            y = y - (alfa / beta) * r2
            r1, r2 = r2, y
            oldb, beta = beta, _norm(y)
            oldeps = epsln
            delta = cs * dbar + sn * alfa
            gbar = sn * dbar - cs * alfa
            epsln = sn * beta
            dbar = -cs * beta
            gamma = max(math.hypot(gbar, beta), eps)
            cs, sn = gbar / gamma, beta / gamma
            phi = cs * phibar
            phibar = sn * phibar
            w1, w2 = w2, w
            w = (v - oldeps * w1 - delta * w2) / gamma
            x = x + phi * w
            it += 1
            first = False
            est = phibar / bnorm
            report.history.append(est)
            if not np.isfinite(est):
                report.reason = "breakdown"
                break
            if est <= rtol or beta <= eps * beta1:
                break
        if report.reason == "breakdown":
            break
        r, rel = _true_residual(M, b, x, bnorm)
    r, rel = _true_residual(M, b, x, bnorm)
    report.iterations, report.residual = it, rel
    report.converged = rel <= rtol
    if not report.converged and report.reason == "converged":
        report.reason = "maxiter"
    return x, report


def column_norms_sq(A: LinearOp, bank: FilterBank, wf: WeightField | None, p, sigma, alpha):
    """Squared column norms of ``B = [A; sqrt(p) sigma W^{1/2} G; sqrt(alpha) I]``."""
    ones_out = np.ones(A.out_shape)
    norms = A.square_adjoint(ones_out)
    if wf is not None:
        norms = norms + p * sigma ** 2 * bank.square_adjoint(wf.sqrt_square_colsum())
    return norms + alpha


def equilibrate(A: LinearOp, bank: FilterBank, wf: WeightField | None, p, sigma, alpha) -> DiagPrecond:
    """Diagonal ``D`` with ``d_j = 1/|B_{:,j}|`` so that ``D S D`` has a unit diagonal."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    norms = column_norms_sq(A, bank, wf, p, sigma, alpha)
    assert np.all(norms > 0), "nonpositive column norm"
    return DiagPrecond(1.0 / np.sqrt(norms))
