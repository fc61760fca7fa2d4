"""Matrix-free linear operators.

Every operator maps arrays of ``in_shape`` to arrays of ``out_shape`` and
provides four actions:

* ``apply(v)``            -- ``A v``
* ``adjoint(u)``          -- ``A^T u``
* ``apply_square(v)``     -- ``(A o A) v``, the elementwise-squared matrix
* ``square_adjoint(u)``   -- ``(A o A)^T u``

``square_adjoint(ones)`` gives the squared column norms of ``A`` without ever
forming the matrix; this is what the equilibration preconditioner needs.
"""
from __future__ import annotations

import numpy as np
from scipy import signal


class SquareRuleError(NotImplementedError):
    """The operator has no exact elementwise-square rule."""


class LinearOp:
    in_shape: tuple
    out_shape: tuple
    # Matrix has at most one nonzero per row / per column. Used to decide when
    # (A B)^{o2} = A^{o2} B^{o2} is exact.
    single_per_row = False
    single_per_col = False

    def apply(self, v):
        raise NotImplementedError

    def adjoint(self, u):
        raise NotImplementedError

    def apply_square(self, v):
        raise SquareRuleError(f"{type(self).__name__} has no square rule")

    def square_adjoint(self, u):
        raise SquareRuleError(f"{type(self).__name__} has no square rule")

    @property
    def T(self) -> "LinearOp":
        return AdjointOp(self)

    def __call__(self, v):
        return self.apply(v)

    def __matmul__(self, other: "LinearOp") -> "LinearOp":
        return Compose(self, other)

    def __repr__(self):
        return f"{type(self).__name__}({self.in_shape} -> {self.out_shape})"

    def _check_in(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != tuple(self.in_shape):
            raise ValueError(f"{type(self).__name__}: expected input {self.in_shape}, got {v.shape}")
        return v

    def _check_out(self, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != tuple(self.out_shape):
            raise ValueError(f"{type(self).__name__}: expected output-space {self.out_shape}, got {u.shape}")
        return u


class AdjointOp(LinearOp):
    def __init__(self, op: LinearOp):
        self.op = op
        self.in_shape = op.out_shape
        self.out_shape = op.in_shape
        self.single_per_row = op.single_per_col
        self.single_per_col = op.single_per_row

    def apply(self, v):
        return self.op.adjoint(v)

    def adjoint(self, u):
        return self.op.apply(u)

    def apply_square(self, v):
        return self.op.square_adjoint(v)

    def square_adjoint(self, u):
        return self.op.apply_square(u)

    @property
    def T(self):
        return self.op


class IdentityOp(LinearOp):
    single_per_row = single_per_col = True

    def __init__(self, shape):
        self.in_shape = self.out_shape = tuple(shape)

    def apply(self, v):
        return self._check_in(v).copy()

    adjoint = apply_square = square_adjoint = apply


class DiagonalOp(LinearOp):
    """Pointwise multiplication by a fixed array."""
    single_per_row = single_per_col = True

    def __init__(self, diag):
        self.diag = np.asarray(diag, dtype=np.float64)
        self.in_shape = self.out_shape = self.diag.shape

    def apply(self, v):
        return self.diag * self._check_in(v)

    adjoint = apply

    def apply_square(self, v):
        return self.diag ** 2 * self._check_in(v)

    square_adjoint = apply_square


def bayer_rggb(height: int, width: int) -> np.ndarray:
    """Binary ``(3, H, W)`` sampling pattern for an RGGB colour filter array."""
    mask = np.zeros((3, height, width))
    mask[0, 0::2, 0::2] = 1.0
    mask[1, 0::2, 1::2] = 1.0
    mask[1, 1::2, 0::2] = 1.0
    mask[2, 1::2, 1::2] = 1.0
    return mask


class CFAMask(DiagonalOp):
    """Demosaicking operator: keeps one colour sample per pixel, zeros elsewhere."""

    def __init__(self, height: int, width: int, pattern: str = "RGGB"):
        if pattern.upper() != "RGGB":
            raise ValueError(f"unsupported Bayer pattern {pattern!r}")
        super().__init__(bayer_rggb(height, width))
        self.pattern = "RGGB"

    # binary diagonal: A o A = A
    apply_square = DiagonalOp.apply
    square_adjoint = DiagonalOp.apply


class Scale(LinearOp):
    def __init__(self, op: LinearOp, factor: float):
        self.op = op
        self.factor = float(factor)
        self.in_shape, self.out_shape = op.in_shape, op.out_shape
        self.single_per_row = op.single_per_row
        self.single_per_col = op.single_per_col

    def apply(self, v):
        return self.factor * self.op.apply(v)

    def adjoint(self, u):
        return self.factor * self.op.adjoint(u)

    def apply_square(self, v):
        return self.factor ** 2 * self.op.apply_square(v)

    def square_adjoint(self, u):
        return self.factor ** 2 * self.op.square_adjoint(u)


class Compose(LinearOp):
    """``outer o inner``: ``inner`` is applied first."""

    def __init__(self, outer: LinearOp, inner: LinearOp):
        if tuple(outer.in_shape) != tuple(inner.out_shape):
            raise ValueError(f"cannot chain {inner} into {outer}")
        self.outer, self.inner = outer, inner
        self.in_shape, self.out_shape = inner.in_shape, outer.out_shape
        self.single_per_row = outer.single_per_row and inner.single_per_row
        self.single_per_col = outer.single_per_col and inner.single_per_col

    def apply(self, v):
        return self.outer.apply(self.inner.apply(v))

    def adjoint(self, u):
        return self.inner.adjoint(self.outer.adjoint(u))

    def _square_exact(self):
        # (BC)_ij = sum_k B_ik C_kj has a single term when B selects rows or C
        # has one entry per column.
        if not (self.outer.single_per_row or self.inner.single_per_col):
            raise SquareRuleError(f"no exact square rule for {self.outer} o {self.inner}")

    def apply_square(self, v):
        self._square_exact()
        return self.outer.apply_square(self.inner.apply_square(v))

    def square_adjoint(self, u):
        self._square_exact()
        return self.inner.square_adjoint(self.outer.square_adjoint(u))


class SumOp(LinearOp):
    def __init__(self, *ops: LinearOp):
        if not ops:
            raise ValueError("SumOp needs at least one operator")
        first = ops[0]
        for op in ops[1:]:
            if op.in_shape != first.in_shape or op.out_shape != first.out_shape:
                raise ValueError(f"shape mismatch between {first} and {op}")
        self.ops = ops
        self.in_shape, self.out_shape = first.in_shape, first.out_shape

    def apply(self, v):
        return sum(op.apply(v) for op in self.ops)

    def adjoint(self, u):
        return sum(op.adjoint(u) for op in self.ops)


class ValidConv2D(LinearOp):
    """Per-channel 2-D convolution keeping only fully-overlapping positions.

    ``kernel`` is ``(h, w)`` (shared by all channels) or ``(c, h, w)``.
    Input ``(c, H, W)`` maps to ``(c, H-h+1, W-w+1)``. The adjoint is the
    zero-padded full correlation.
    """

    def __init__(self, kernel, in_shape):
        kernel = np.asarray(kernel, dtype=np.float64)
        c, height, width = in_shape
        if kernel.ndim == 2:
            kernel = np.broadcast_to(kernel, (c,) + kernel.shape)
        if kernel.ndim != 3 or kernel.shape[0] != c:
            raise ValueError(f"kernel shape {kernel.shape} incompatible with {c} channels")
        kh, kw = kernel.shape[1:]
        if kh > height or kw > width:
            raise ValueError(f"kernel {kh}x{kw} larger than image {height}x{width}")
        self.kernel = np.array(kernel)
        self.in_shape = (c, height, width)
        self.out_shape = (c, height - kh + 1, width - kw + 1)

    def _conv(self, kernel, v):
        return np.stack([signal.convolve(vc, kc, mode="valid") for vc, kc in zip(v, kernel)])

    def _corr_full(self, kernel, u):
        return np.stack([signal.correlate(uc, kc, mode="full") for uc, kc in zip(u, kernel)])

    def apply(self, v):
        return self._conv(self.kernel, self._check_in(v))

    def adjoint(self, u):
        return self._corr_full(self.kernel, self._check_out(u))

    def apply_square(self, v):
        return self._conv(self.kernel ** 2, self._check_in(v))

    def square_adjoint(self, u):
        return self._corr_full(self.kernel ** 2, self._check_out(u))


class Decimation(LinearOp):
    """Keeps every ``stride``-th sample per spatial axis starting at ``offset``."""
    single_per_row = single_per_col = True

    def __init__(self, in_shape, stride, offset=(0, 0)):
        if np.isscalar(stride):
            stride = (int(stride), int(stride))
        self.stride = tuple(int(s) for s in stride)
        self.offset = tuple(int(o) for o in offset)
        if min(self.stride) < 1 or any(not 0 <= o < s for o, s in zip(self.offset, self.stride)):
            raise ValueError(f"bad stride/offset {self.stride}/{self.offset}")
        c, height, width = in_shape
        self.in_shape = (c, height, width)
        self._sl = (slice(None),
                    slice(self.offset[0], None, self.stride[0]),
                    slice(self.offset[1], None, self.stride[1]))
        self.out_shape = (
            c,
            len(range(self.offset[0], height, self.stride[0])),
            len(range(self.offset[1], width, self.stride[1])),
        )

    def apply(self, v):
        return self._check_in(v)[self._sl].copy()

    def adjoint(self, u):
        out = np.zeros(self.in_shape)
        out[self._sl] = self._check_out(u)
        return out

    apply_square = apply
    square_adjoint = adjoint


def is_conjugate_symmetric(mask) -> bool:
    mask = np.asarray(mask)
    flipped = np.roll(mask[::-1, ::-1], 1, axis=(0, 1))
    return bool(np.array_equal(mask, flipped))


class SubsampledDFT(LinearOp):
    """Real-valued orthonormal Fourier sampling on a conjugate-symmetric mask.

    Input is a single-channel image ``(1, H, W)``; output is a vector of
    ``m = mask.sum()`` reals. For a sampled pair ``{k, -k}`` the outputs are
    ``sqrt(2) Re F_k`` and ``sqrt(2) Im F_k``; a self-conjugate bin (DC,
    Nyquist) gives ``Re F_k``. ``F`` is the unitary 2-D DFT, so the rows are
    orthonormal and ``A A^T = I``.
    """

    def __init__(self, mask):
        mask = np.asarray(mask) != 0
        if mask.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not is_conjugate_symmetric(mask):
            raise ValueError("Fourier mask is not conjugate-symmetric")
        self.mask = mask
        height, width = mask.shape
        self.n = height * width
        flat = np.flatnonzero(mask)
        ky, kx = np.unravel_index(flat, mask.shape)
        partner = ((-ky) % height) * width + (-kx) % width
        self_conj = flat == partner
        pair_rep = flat < partner
        self._self_idx = flat[self_conj]
        self._pair_idx = flat[pair_rep]
        self._pair_neg = partner[pair_rep]
        self.m = int(mask.sum())
        assert self.m == len(self._self_idx) + 2 * len(self._pair_idx)
        self.in_shape = (1, height, width)
        self.out_shape = (self.m,)
        self._np = len(self._pair_idx)

    @property
    def sampling_rate(self) -> float:
        return self.m / self.n

    def _double(self, idx):
        height, width = self.mask.shape
        ky, kx = np.unravel_index(idx, self.mask.shape)
        return ((2 * ky) % height) * width + (2 * kx) % width

    def apply(self, v):
        f = np.fft.fft2(self._check_in(v)[0], norm="ortho").ravel()
        fp = f[self._pair_idx]
        return np.concatenate([f[self._self_idx].real,
                               np.sqrt(2) * fp.real, np.sqrt(2) * fp.imag])

    def adjoint(self, u):
        u = self._check_out(u)
        ns, npair = len(self._self_idx), self._np
        a, b = u[ns:ns + npair], u[ns + npair:]
        c = np.zeros(self.n, dtype=complex)
        c[self._self_idx] = u[:ns]
        c[self._pair_idx] = (a + 1j * b) / np.sqrt(2)
        c[self._pair_neg] = (a - 1j * b) / np.sqrt(2)
        out = np.fft.ifft2(c.reshape(self.mask.shape), norm="ortho").real
        return out[None]

    # Squared rows: self-conjugate bins give 1/n; a pair gives
    # (1 +/- cos(2 theta))/n, i.e. frequency 2k of the unnormalised DFT.
    def apply_square(self, v):
        v = self._check_in(v)[0]
        total = v.sum()
        f2 = np.fft.fft2(v).ravel()[self._double(self._pair_idx)].real
        return np.concatenate([np.full(len(self._self_idx), total),
                               total + f2, total - f2]) / self.n

    def square_adjoint(self, u):
        u = self._check_out(u)
        ns, npair = len(self._self_idx), self._np
        a, b = u[ns:ns + npair], u[ns + npair:]
        e = np.zeros(self.n, dtype=complex)
        np.add.at(e, self._double(self._pair_idx), a - b)
        osc = np.fft.ifft2(e.reshape(self.mask.shape)).real * self.n
        return ((u.sum() + osc) / self.n)[None]


def densify(op: LinearOp, max_entries: int = 10 ** 7) -> np.ndarray:
    """Dense matrix of ``op``; column ``j`` is ``op.apply(e_j)``. Test oracle only."""
    n_in = int(np.prod(op.in_shape))
    n_out = int(np.prod(op.out_shape))
    if n_in * n_out > max_entries:
        raise ValueError(f"dense form would have {n_in * n_out} entries (> {max_entries})")
    mat = np.empty((n_out, n_in))
    e = np.zeros(n_in)
    for j in range(n_in):
        e[j] = 1.0
        mat[:, j] = op.apply(e.reshape(op.in_shape)).ravel()
        e[j] = 0.0
    return mat


def adjoint_check(op: LinearOp, trials: int = 100, rng=None) -> float:
    """Worst ``|<Av,u> - <v,A^T u>| / (|Av| |u| + 1)`` over random pairs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng)
    worst = 0.0
    for _ in range(trials):
        v = rng.standard_normal(op.in_shape)
        u = rng.standard_normal(op.out_shape)
        av = op.apply(v)
        lhs = np.vdot(av, u)
        rhs = np.vdot(v, op.adjoint(u))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(av) * np.linalg.norm(u) + 1.0))
    return worst
