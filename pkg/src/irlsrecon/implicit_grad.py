"""Gradients of a loss on the IRLS fixed point with respect to the prior parameters.

At a fixed point ``x*`` the residual

    g(x, theta) = S(x, theta) x - A^T y = sigma^2 grad_x J(x; theta)

vanishes, so ``dg/dx`` is ``sigma^2`` times the Hessian of ``J`` (symmetric).
With ``v`` solving ``(dg/dx) v = dL/dx*`` the parameter gradient is
``-(dg/dtheta)^T v``. The sparse family has hand-derived products; the
low-rank family falls back to central differences of ``g``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import krylov
from .irls import IrlsSettings, ProblemSpec, run_irls
from .priors import LOWRANK, SPARSE, FilterBank, PriorConfig

P_LOW, P_SPAN = 0.4, 0.5


class ForwardNotConverged(RuntimeError):
    """A forward IRLS run missed the fixed-point criterion."""


def p_from_raw(p_raw: float) -> float:
    return P_LOW + P_SPAN / (1.0 + math.exp(-p_raw))


def dp_draw(p_raw: float) -> float:
    s = 1.0 / (1.0 + math.exp(-p_raw))
    return P_SPAN * s * (1.0 - s)


def raw_from_p(p: float) -> float:
    if not P_LOW < p < P_LOW + P_SPAN:
        raise ValueError(f"p must lie strictly inside ({P_LOW}, {P_LOW + P_SPAN})")
    s = (p - P_LOW) / P_SPAN
    return math.log(s / (1.0 - s))


@dataclass
class ThetaParams:
    """Learnable prior parameters.

    ``weights`` holds one nonnegative entry per filter for the sparse family,
    and nonnegative increments whose cumulative sum gives the (sorted)
    per-singular-value weights for the low-rank family. ``p`` comes from
    ``p_raw`` through a logistic map onto [0.4, 0.9] unless ``p_fixed`` pins it
    (``p_fixed = 1`` gives the convex l1 models).
    """
    filters: np.ndarray
    weights: np.ndarray
    p_raw: float = 0.0
    family: str = SPARSE
    gamma: float = 1e-5
    p_fixed: float | None = None

    def __post_init__(self):
        self.filters = np.array(self.filters, dtype=np.float64)
        if self.filters.ndim == 2:
            self.filters = self.filters[None]
        self.weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        self.p_raw = float(self.p_raw)
        if self.family not in (SPARSE, LOWRANK):
            raise ValueError(f"unknown prior family {self.family!r}")
        if self.family == SPARSE and self.weights.size != self.filters.shape[0]:
            raise ValueError(f"{self.weights.size} weights for {self.filters.shape[0]} filters")

    @property
    def p(self) -> float:
        return float(self.p_fixed) if self.p_fixed is not None else p_from_raw(self.p_raw)

    def weight_vector(self) -> np.ndarray:
        if self.family == LOWRANK:
            return np.cumsum(self.weights)
        return self.weights.copy()

    def prior(self) -> PriorConfig:
        return PriorConfig(self.family, self.p, self.gamma, self.weight_vector())

    def bank(self) -> FilterBank:
        return FilterBank(self.filters)

    def apply_to(self, spec: ProblemSpec) -> ProblemSpec:
        return spec.with_prior(bank=FilterBank(self.filters, spec.x_shape), prior=self.prior())

    def project(self) -> "ThetaParams":
        """Clip the weight parameters at zero (the feasible set)."""
        return replace(self, weights=np.maximum(self.weights, 0.0))

    # flat vector view used by the optimizer and the FD oracle
    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.filters.ravel(), self.weights, [self.p_raw]])

    def from_vector(self, vec) -> "ThetaParams":
        vec = np.asarray(vec, dtype=np.float64)
        nf, nw = self.filters.size, self.weights.size
        if vec.size != nf + nw + 1:
            raise ValueError(f"expected {nf + nw + 1} entries, got {vec.size}")
        return replace(self, filters=vec[:nf].reshape(self.filters.shape),
                       weights=vec[nf:nf + nw], p_raw=float(vec[-1]))

    def names(self) -> list:
        k, h, w = self.filters.shape
        out = [f"filter[{f}][{a},{b}]" for f in range(k) for a in range(h) for b in range(w)]
        label = "weight" if self.family == SPARSE else "weight_increment"
        out += [f"{label}[{j}]" for j in range(self.weights.size)]
        return out + ["p_raw"]

    def zeros_like(self) -> "ThetaParams":
        return self.from_vector(np.zeros(self.to_vector().size))


@dataclass
class GradReport:
    grad: ThetaParams
    solve: krylov.SolveReport
    adjoint: np.ndarray
    solver: str
    fd: np.ndarray | None = None
    notes: list = field(default_factory=list)


def residual_g(spec: ProblemSpec, theta: ThetaParams, x):
    """``S(x, theta) x - A^T y`` (no augmentation term)."""
    spec = theta.apply_to(spec)
    x = np.asarray(x, dtype=np.float64)
    wf = spec.weights(x)
    reg = spec.bank.adjoint(wf.apply(spec.bank.apply(x)))
    return spec.A.adjoint(spec.A.apply(x) - spec.y) + spec.prior.p * spec.sigma ** 2 * reg


def _sparse_terms(spec: ProblemSpec, theta: ThetaParams, x):
    """Feature maps and the pieces of ``rho(z) = p sigma^2 w z (z^2+gamma)^((p-2)/2)``."""
    z = spec.bank.apply(x)
    p, gamma, s2 = theta.p, theta.gamma, spec.sigma ** 2
    w = theta.weight_vector()[:, None, None, None]
    base = z * z + gamma
    pw = base ** ((p - 2) / 2)
    rho = p * s2 * w * z * pw
    drho = p * s2 * w * (pw + (p - 2) * z * z * base ** ((p - 4) / 2))
    return z, base, pw, rho, drho


def _fd_step(x, v, rel=1e-6) -> float:
    vn = float(np.linalg.norm(v))
    return rel * (1.0 + float(np.linalg.norm(x))) / vn


def vjp_x(spec: ProblemSpec, theta: ThetaParams, x, v):
    """``(dg/dx)^T v``; equals ``(dg/dx) v`` since the Jacobian is symmetric."""
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return np.zeros_like(v)
    spec = theta.apply_to(spec)
    if theta.family == SPARSE:
        _, _, _, _, drho = _sparse_terms(spec, theta, x)
        return spec.A.adjoint(spec.A.apply(v)) + spec.bank.adjoint(drho * spec.bank.apply(v))
    eps = _fd_step(x, v)
    return (residual_g(spec, theta, x + eps * v) - residual_g(spec, theta, x - eps * v)) / (2 * eps)


def vjp_theta(spec: ProblemSpec, theta: ThetaParams, x, v) -> ThetaParams:
    """``(dg/dtheta)^T v`` in the layout of ``theta``."""
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return theta.zeros_like()
    spec = theta.apply_to(spec)
    if theta.family == LOWRANK:
        return _vjp_theta_numeric(spec, theta, x, v)
    z, base, pw, rho, drho = _sparse_terms(spec, theta, x)
    gv = spec.bank.apply(v)
    d_filters = spec.bank.filter_gradient(drho * gv, x) + spec.bank.filter_gradient(rho, v)
    p, s2 = theta.p, spec.sigma ** 2
    d_weights = np.sum(p * s2 * z * pw * gv, axis=(1, 2, 3))
    d_p_raw = 0.0
    if theta.p_fixed is None:
        w = theta.weight_vector()[:, None, None, None]
        drho_dp = s2 * w * z * pw * (1.0 + 0.5 * p * np.log(base))
        d_p_raw = float(np.sum(drho_dp * gv)) * dp_draw(theta.p_raw)
    return replace(theta, filters=d_filters, weights=d_weights, p_raw=d_p_raw)


def _vjp_theta_numeric(spec, theta, x, v, rel=1e-6):
    base_vec = theta.to_vector()
    grad = np.zeros_like(base_vec)
    n_free = base_vec.size - (1 if theta.p_fixed is not None else 0)
    for j in range(n_free):
        eps = rel * (1.0 + abs(base_vec[j]))
        plus, minus = base_vec.copy(), base_vec.copy()
        plus[j] += eps
        minus[j] -= eps
        gp = residual_g(spec, theta.from_vector(plus), x)
        gm = residual_g(spec, theta.from_vector(minus), x)
        grad[j] = float(np.vdot(gp - gm, v)) / (2 * eps)
    return theta.from_vector(grad)


def is_convex(theta: ThetaParams) -> bool:
    return theta.p >= 1.0 and bool(np.all(theta.weight_vector() >= 0))


def backward_pass(spec: ProblemSpec, theta: ThetaParams, x, dl_dx, rtol=1e-2,
                  maxiter=2000) -> GradReport:
    """Implicit gradient of a loss on the fixed point ``x``.

    CG solves the adjoint system when ``J`` is convex, MINRES otherwise. A
    solve that misses ``rtol`` still returns its gradient, flagged in the
    report.
    """
    dl_dx = np.asarray(dl_dx, dtype=np.float64)
    convex = is_convex(theta)
    op = lambda u: vjp_x(spec, theta, x, u)
    if convex:
        v, rep = krylov.cg_solve(op, dl_dx, rtol=rtol, maxiter=maxiter)
    else:
        v, rep = krylov.minres_solve(op, dl_dx, rtol=rtol, maxiter=maxiter)
    g = vjp_theta(spec, theta, x, v)
    grad = g.from_vector(-g.to_vector())
    report = GradReport(grad=grad, solve=rep, adjoint=v, solver="cg" if convex else "minres")
    if not rep.converged:
        report.notes.append(f"adjoint solve stopped at residual {rep.residual:.3e} ({rep.reason})")
    return report


def tight_settings() -> IrlsSettings:
    """Forward settings for finite-difference probes."""
    return IrlsSettings(max_steps=20000, fp_rtol=1e-13, consecutive=2, cg_rtol=1e-14,
                        cg_maxiter=3000)


def fd_gradient(spec: ProblemSpec, theta: ThetaParams, loss, eps=1e-5, x0=None,
                settings: IrlsSettings | None = None, indices=None) -> np.ndarray:
    """Central differences of ``loss(x*(theta))`` through re-converged forward runs.

    Returns a flat vector in ``theta.to_vector()`` order; entries outside
    ``indices`` are left as NaN. The step for entry ``j`` is
    ``eps * (1 + |theta_j|)``.
    """
    settings = settings or tight_settings()
    base_vec = theta.to_vector()
    if indices is None:
        indices = range(base_vec.size - (1 if theta.p_fixed is not None else 0))
    if x0 is None:
        x0 = spec.A.adjoint(spec.y)
    out = np.full(base_vec.size, np.nan)
    if theta.p_fixed is not None:
        out[-1] = 0.0

    def probe(vec):
        probe_spec = theta.from_vector(vec).apply_to(spec)
        x, state, _ = run_irls(probe_spec, x0, settings)
        if not state.converged:
            raise ForwardNotConverged(
                f"forward probe stopped at residual {state.residuals[-1]:.3e} "
                f"after {state.k} steps")
        return loss(x)

    for j in indices:
        h = eps * (1.0 + abs(base_vec[j]))
        plus, minus = base_vec.copy(), base_vec.copy()
        plus[j] += h
        minus[j] -= h
        out[j] = (probe(plus) - probe(minus)) / (2 * h)
    return out
