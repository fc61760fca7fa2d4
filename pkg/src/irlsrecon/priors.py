"""Convolutional regularization operator, potentials and IRLS weights.

Feature maps produced by a :class:`FilterBank` have shape ``(k, c, Hv, Wv)``:
filter ``f`` correlated (valid mode) with channel ``c``. A position ``i`` on
the ``Hv x Wv`` grid (row-major, ``l = Hv*Wv`` positions) carries

* the sparse feature vector ``z_i`` of length ``d = k*c`` (filter-major), or
* the low-rank feature matrix ``Z_i`` of shape ``(c, q)`` with ``q = k``;
  row ``j`` holds the responses of channel ``j`` to all filters.

Low-rank potentials are evaluated through the eigenvalues of the ``c x c``
Gram matrix ``Z_i Z_i^T``. When ``c <= q`` these are the squared singular
values; when ``c > q`` the extra zero eigenvalues only add the constant
``sum_{j>q} w_j gamma^(p/2)``, so the weight vector always has length ``c``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .linops import LinearOp

SPARSE = "sparse"
LOWRANK = "lowrank"


class FilterBank(LinearOp):
    """Valid-correlation filter bank shared across image channels."""

    def __init__(self, filters, in_shape=None):
        filters = np.asarray(filters, dtype=np.float64)
        if filters.ndim == 2:
            filters = filters[None]
        if filters.ndim != 3 or filters.shape[0] < 1:
            raise ValueError(f"filters must be (k, h, w), got {filters.shape}")
        self.filters = filters
        self.in_shape = self.out_shape = None
        if in_shape is not None:
            self.bind(in_shape)

    @property
    def k(self) -> int:
        return self.filters.shape[0]

    @property
    def size(self):
        return self.filters.shape[1:]

    def bind(self, in_shape) -> "FilterBank":
        c, height, width = in_shape
        h, w = self.size
        if height < h or width < w:
            raise ValueError(f"image {height}x{width} smaller than filters {h}x{w}")
        self.in_shape = (c, height, width)
        self.out_shape = (self.k, c, height - h + 1, width - w + 1)
        return self

    def bound(self, in_shape) -> "FilterBank":
        return FilterBank(self.filters, in_shape)

    def _windows(self, x):
        if self.in_shape is None:
            self.bind(np.shape(x))
        x = self._check_in(x)
        return sliding_window_view(x, self.size, axis=(1, 2))

    def _forward(self, filters, x):
        return np.einsum("fab,cijab->fcij", filters, self._windows(x), optimize=True)

    def _backward(self, filters, f):
        f = self._check_out(f)
        h, w = self.size
        _, _, hv, wv = self.out_shape
        taps = np.tensordot(filters, f, axes=(0, 0))  # (h, w, c, hv, wv)
        out = np.zeros(self.in_shape)
        for a in range(h):
            for b in range(w):
                out[:, a:a + hv, b:b + wv] += taps[a, b]
        return out

    def apply(self, x):
        return self._forward(self.filters, x)

    def adjoint(self, f):
        return self._backward(self.filters, f)

    def apply_square(self, x):
        return self._forward(self.filters ** 2, x)

    def square_adjoint(self, f):
        return self._backward(self.filters ** 2, f)

    def filter_gradient(self, f, x):
        """Gradient of ``<f, G x>`` with respect to the filter taps."""
        return np.einsum("fcij,cijab->fab", f, self._windows(x), optimize=True)


def sparse_view(maps):
    """``(k, c, Hv, Wv)`` maps -> ``(l, k*c)`` per-position feature vectors."""
    k, c, hv, wv = maps.shape
    return maps.transpose(2, 3, 0, 1).reshape(hv * wv, k * c)


def lowrank_view(maps):
    """``(k, c, Hv, Wv)`` maps -> ``(l, c, k)`` per-position feature matrices."""
    k, c, hv, wv = maps.shape
    return maps.transpose(2, 3, 1, 0).reshape(hv * wv, c, k)


def from_lowrank_view(zs, maps_shape):
    k, c, hv, wv = maps_shape
    return zs.reshape(hv, wv, c, k).transpose(3, 2, 0, 1)


@dataclass
class PriorConfig:
    """Prior family and potential parameters.

    ``weights`` may be a scalar, a per-filter vector ``(k,)`` (sparse), a
    per-singular-value vector ``(c,)`` (low-rank, nondecreasing), or a full
    per-position field: ``(k, c, Hv, Wv)`` for sparse, ``(c, Hv, Wv)`` for
    low-rank.
    """
    family: str = SPARSE
    p: float = 1.0
    gamma: float = 1e-5
    weights: object = 1.0

    def __post_init__(self):
        if self.family not in (SPARSE, LOWRANK):
            raise ValueError(f"unknown prior family {self.family!r}")
        if not 0 < self.p <= 2:
            raise ValueError(f"p must lie in (0, 2], got {self.p}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0):
            raise ValueError("prior weights must be nonnegative")
        if self.family == LOWRANK and w.ndim >= 1 and np.any(np.diff(w, axis=0) < 0):
            raise ValueError("low-rank weights must be sorted in nondecreasing order")

    def sparse_weight_maps(self, maps_shape):
        k, c, hv, wv = maps_shape
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 1:
            if w.shape[0] != k:
                raise ValueError(f"{w.shape[0]} weights for {k} filters")
            w = w[:, None, None, None]
        return np.broadcast_to(w, maps_shape)

    def lowrank_weight_vectors(self, n_pos, c):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 0:
            return np.full((n_pos, c), float(w))
        if w.ndim == 1:
            if w.shape[0] != c:
                raise ValueError(f"{w.shape[0]} low-rank weights for {c} channels")
            return np.broadcast_to(w, (n_pos, c))
        if w.shape[0] != c:
            raise ValueError(f"weight field {w.shape} does not match {c} channels")
        return w.reshape(c, -1).T


def phi_sparse(z, w, p, gamma) -> float:
    z = np.asarray(z, dtype=np.float64)
    if gamma <= 0 or p <= 0:
        raise ValueError("need p > 0 and gamma > 0")
    return float(np.sum(np.asarray(w) * (z * z + gamma) ** (p / 2)))


def _gram_eig(zs):
    """Descending eigenvalues/eigenvectors of ``Z Z^T`` for a stack of matrices."""
    gram = zs @ np.swapaxes(zs, -1, -2)
    lam, vec = np.linalg.eigh(gram)
    return np.maximum(lam[..., ::-1], 0.0), vec[..., ::-1]


def phi_lowrank(Z, w, p, gamma) -> float:
    Z = np.asarray(Z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any(np.diff(w) < 0):
        raise ValueError("low-rank weights must be nondecreasing")
    if w.shape[0] != Z.shape[0]:
        raise ValueError(f"need {Z.shape[0]} weights, got {w.shape[0]}")
    lam, _ = _gram_eig(Z)
    return float(np.sum(w * (lam + gamma) ** (p / 2)))


@dataclass
class WeightField:
    """Per-position IRLS weights.

    Sparse: ``values`` has the shape of the feature maps. Low-rank: ``blocks``
    is ``(l, c, c)`` with eigen-pairs ``evals``/``evecs`` kept for square roots.
    """
    family: str
    maps_shape: tuple
    values: np.ndarray | None = None
    blocks: np.ndarray | None = None
    evals: np.ndarray | None = None
    evecs: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def apply(self, maps):
        """``W f`` with ``f`` in feature-map layout."""
        if self.family == SPARSE:
            return self.values * maps
        zs = lowrank_view(maps)
        return from_lowrank_view(self.blocks @ zs, self.maps_shape)

    def trace(self) -> float:
        if self.family == SPARSE:
            return float(self.values.sum())
        return float(self.evals.sum())

    def sqrt_square_colsum(self):
        """``((W^{1/2})^{o2})^T 1`` in feature-map layout."""
        if self.family == SPARSE:
            return np.array(self.values, dtype=np.float64)
        root = (self.evecs * np.sqrt(np.maximum(self.evals, 0))[:, None, :]) @ np.swapaxes(self.evecs, 1, 2)
        colsum = (root ** 2).sum(axis=1)  # (l, c)
        k, c, hv, wv = self.maps_shape
        per_pos = colsum.T.reshape(c, hv, wv)
        return np.broadcast_to(per_pos, self.maps_shape).copy()


def weights_sparse(maps, w, p, gamma) -> WeightField:
    maps = np.asarray(maps, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1 and maps.ndim == 4:
        w = w[:, None, None, None]
    values = w * (maps * maps + gamma) ** ((p - 2) / 2)
    return WeightField(SPARSE, maps.shape, values=values)


def weights_lowrank(maps, w, p, gamma) -> WeightField:
    """Low-rank weights ``U diag(w_j (lam_j + gamma)^((p-2)/2)) U^T`` per position.

    ``w`` is ``(c,)`` or ``(l, c)``, nondecreasing along the last axis and paired
    with the Gram eigenvalues sorted in decreasing order.
    """
    maps = np.asarray(maps, dtype=np.float64)
    zs = lowrank_view(maps)
    n_pos, c, _ = zs.shape
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (n_pos, c))
    lam, vec = _gram_eig(zs)
    if not np.all(np.isfinite(lam)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(lam), axis=1))[0])
        raise np.linalg.LinAlgError(f"eigen-decomposition failed at position {bad}")
    ev = w * (lam + gamma) ** ((p - 2) / 2)
    blocks = (vec * ev[:, None, :]) @ np.swapaxes(vec, 1, 2)
    return WeightField(LOWRANK, maps.shape, blocks=blocks, evals=ev, evecs=vec,
                       extra={"gram_evals": lam})


def weight_field(bank: FilterBank, prior: PriorConfig, x) -> WeightField:
    maps = bank.apply(x)
    if prior.family == SPARSE:
        return weights_sparse(maps, prior.sparse_weight_maps(maps.shape), prior.p, prior.gamma)
    n_pos, c = maps.shape[2] * maps.shape[3], maps.shape[1]
    return weights_lowrank(maps, prior.lowrank_weight_vectors(n_pos, c), prior.p, prior.gamma)


def _potential_sum(maps, prior: PriorConfig) -> float:
    p, gamma = prior.p, prior.gamma
    if prior.family == SPARSE:
        w = prior.sparse_weight_maps(maps.shape)
        return float(np.sum(w * (maps * maps + gamma) ** (p / 2)))
    zs = lowrank_view(maps)
    lam, _ = _gram_eig(zs)
    w = prior.lowrank_weight_vectors(zs.shape[0], zs.shape[1])
    return float(np.sum(w * (lam + gamma) ** (p / 2)))


def regularizer_eval(bank: FilterBank, prior: PriorConfig, x) -> float:
    """``R(x) = sum_i phi(G_i x)``."""
    return _potential_sum(bank.apply(x), prior)


def objective_eval(A: LinearOp, y, sigma, bank, prior, x) -> float:
    """``J(x) = |y - A x|^2 / (2 sigma^2) + R(x)``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.asarray(y) - A.apply(x)
    return float(np.vdot(r, r) / (2 * sigma ** 2)) + regularizer_eval(bank, prior, x)


def majorizer_eval(bank: FilterBank, prior: PriorConfig, x, xk) -> float:
    """Quadratic majorizer of ``R`` at ``xk`` including the constant terms.

    ``Q(x; xk) = p/2 sum_i <z_i, W_i z_i> + p*gamma/2 tr(W) + (2-p)/2 R(xk)``,
    so that ``Q(xk; xk) = R(xk)`` and ``Q(x; xk) >= R(x)``.
    """
    wf = weight_field(bank, prior, xk)
    maps = bank.apply(x)
    p = prior.p
    quad = float(np.vdot(maps, wf.apply(maps)))
    return p / 2 * quad + p * prior.gamma / 2 * wf.trace() \
        + (2 - p) / 2 * regularizer_eval(bank, prior, xk)


def gradient_filters() -> np.ndarray:
    """Forward differences ``[-1, 1]`` (horizontal, vertical) as a ``(2, 2, 2)`` bank."""
    g = np.zeros((2, 2, 2))
    g[0, 0, 0], g[0, 0, 1] = -1.0, 1.0
    g[1, 0, 0], g[1, 1, 0] = -1.0, 1.0
    return g
