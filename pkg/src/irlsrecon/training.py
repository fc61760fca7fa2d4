"""Supervised learning of the prior parameters through implicit fixed-point gradients."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fixtures import kernel, noisy, training_crops
from .implicit_grad import ThetaParams, backward_pass
from .irls import IrlsSettings, ProblemSpec, initial_estimate, run_irls
from .linops import LinearOp, ValidConv2D
from .priors import LOWRANK, SPARSE, FilterBank, PriorConfig
from .tensors_io import psnr, read_tensor, write_tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "batch", "loss", "mean_forward_steps", "mean_cg_iters",
               "skipped", "adjoint_flags"]
CHECKPOINT_VERSION = 1
_FAMILY_CODE = {SPARSE: 0, LOWRANK: 1}


class TrainingError(RuntimeError):
    """Every sample of a batch failed its forward pass."""


@dataclass
class TrainConfig:
    lr: float = 5e-3
    decay: float = 0.98
    batch_size: int = 8
    epochs: int = 100
    batches_per_epoch: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    backward_rtol: float = 1e-2
    backward_maxiter: int = 2000

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("batch size, epochs and batches per epoch must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.batches_per_epoch

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``; decays once per completed epoch."""
        return self.lr * self.decay ** (step // self.batches_per_epoch)


@dataclass
class Sample:
    clean: np.ndarray
    A: LinearOp
    y: np.ndarray
    sigma: float

    def spec(self, delta: float = 8e-4) -> ProblemSpec:
        # the bank and prior are placeholders, replaced by theta before use
        return ProblemSpec(self.A, self.y, self.sigma, FilterBank(np.ones((1, 1, 1))),
                           PriorConfig(), delta)


def make_sample_set(crops, blur, sigma_range=(0.01, 0.01), seed: int = 0) -> list:
    """Blurred noisy observations of ``crops`` (``(N, c, H, W)``) with per-sample noise levels."""
    rng = np.random.default_rng(seed)
    samples = []
    for i, clean in enumerate(np.asarray(crops, dtype=np.float64)):
        if clean.min() < 0 or clean.max() > 1:
            raise ValueError(f"crop {i} leaves [0, 1]")
        A = ValidConv2D(blur, clean.shape)
        sigma = float(rng.uniform(*sigma_range)) if sigma_range[1] > sigma_range[0] \
            else float(sigma_range[0])
        samples.append(Sample(clean, A, noisy(A, clean, sigma, rng.integers(2 ** 32)), sigma))
    return samples


def desk_samples(seed: int = 0, sigma: float = 0.01) -> list:
    """The shipped 16x16 crops blurred by the 5x5 Gaussian."""
    return make_sample_set(training_crops(), kernel("gauss5"), (sigma, sigma), seed)


def initial_theta(n_filters: int = 4, size: int = 3, family: str = SPARSE, weight: float = 1.0,
                  p_fixed: float | None = 1.0, gamma: float = 1e-3, channels: int = 1,
                  seed: int = 0) -> ThetaParams:
    """Random zero-mean unit-norm filters with equal weights."""
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((n_filters, size, size))
    f -= f.mean(axis=(1, 2), keepdims=True)
    f /= np.linalg.norm(f, axis=(1, 2), keepdims=True)
    if family == SPARSE:
        w = np.full(n_filters, weight)
    else:
        w = np.zeros(channels)
        w[0] = weight
    return ThetaParams(f, w, 0.0, family, gamma, p_fixed)


def loss_neg_psnr(x, target):
    """``(-PSNR(x, target), gradient)`` for unit peak."""
    e = np.asarray(x, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    sq = float(np.vdot(e, e))
    if sq == 0:
        raise ValueError("loss is undefined when x equals the target")
    value = -10.0 * math.log10(e.size / sq)
    return value, (10.0 / math.log(10.0)) * 2.0 * e / sq


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta, grad, moments: AdamState, config: TrainConfig, t: int, lr=None):
    """Bias-corrected Adam update of the flat vector ``theta`` at step ``t >= 1``."""
    if t < 1:
        raise ValueError("Adam steps are counted from 1")
    lr = config.lr if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    m = b1 * moments.m + (1 - b1) * grad
    v = b2 * moments.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t) if b1 > 0 else m
    v_hat = v / (1 - b2 ** t) if b2 > 0 else v
    new = theta - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return new, AdamState(m, v, t)


@dataclass
class SampleResult:
    loss: float
    steps: int
    cg_iters: float
    converged: bool
    grad: np.ndarray | None = None
    flagged: bool = False


def forward_backward(theta: ThetaParams, sample: Sample, settings: IrlsSettings,
                     config: TrainConfig, with_grad: bool = True) -> SampleResult:
    spec = theta.apply_to(sample.spec())
    x0 = initial_estimate(sample.A, sample.y, sample.sigma)
    x, state, trace = run_irls(spec, x0, settings)
    loss, dl_dx = loss_neg_psnr(x, sample.clean)
    cg = float(np.mean([row.cg_iters for row in trace[1:]])) if len(trace) > 1 else 0.0
    result = SampleResult(loss, state.k, cg, state.converged)
    if state.converged and with_grad:
        rep = backward_pass(spec, theta, x, dl_dx, config.backward_rtol, config.backward_maxiter)
        result.grad = rep.grad.to_vector()
        result.flagged = not rep.solve.converged
    return result


@dataclass
class TrainResult:
    theta: ThetaParams
    adam: AdamState
    log: list = field(default_factory=list)
    validation_psnr: float | None = None


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step])
    if batch_size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def train(theta: ThetaParams, samples: list, config: TrainConfig,
          settings: IrlsSettings | None = None, adam: AdamState | None = None,
          start_step: int = 0, steps: int | None = None, validation: list | None = None,
          callback=None) -> TrainResult:
    """Run ``steps`` optimizer steps (default: the whole schedule from ``start_step``).

    Each step draws a batch, solves every forward problem, averages the
    implicit gradients of the converged samples and applies one projected
    Adam update. The logged loss is the batch mean before the update.
    """
    if not samples:
        raise ValueError("empty sample set")
    settings = settings or IrlsSettings.train()
    adam = adam or AdamState.zeros(theta.to_vector().size)
    end = config.total_steps if steps is None else start_step + steps
    rows = []
    for step in range(start_step, end):
        idx = batch_indices(len(samples), config.batch_size, config.seed, step)
        results = [forward_backward(theta, samples[i], settings, config) for i in idx]
        used = [r for r in results if r.grad is not None]
        skipped = len(results) - len(used)
        for i, r in zip(idx, results):
            if r.grad is None:
                log.warning("step %d: sample %d skipped (forward not converged in %d steps)",
                            step, i, r.steps)
        if not used:
            raise TrainingError(f"step {step}: no sample converged")
        grad = np.mean([r.grad for r in used], axis=0)
        vec, adam = adam_step(theta.to_vector(), grad, adam, config, adam.t + 1,
                              lr=config.lr_at(step))
        theta = theta.from_vector(vec).project()
        row = {
            "epoch": step // config.batches_per_epoch,
            "batch": step % config.batches_per_epoch,
            "loss": float(np.mean([r.loss for r in results])),
            "mean_forward_steps": float(np.mean([r.steps for r in results])),
            "mean_cg_iters": float(np.mean([r.cg_iters for r in results])),
            "skipped": skipped,
            "adjoint_flags": sum(r.flagged for r in used),
        }
        rows.append(row)
        if callback is not None:
            callback(step, theta, adam, row)
    result = TrainResult(theta, adam, rows)
    if validation:
        result.validation_psnr = evaluate(theta, validation, settings)
    return result


def evaluate(theta: ThetaParams, samples: list, settings: IrlsSettings | None = None) -> float:
    """Mean reconstruction PSNR over ``samples``."""
    settings = settings or IrlsSettings.train()
    scores = []
    for s in samples:
        x, _, _ = run_irls(theta.apply_to(s.spec()), initial_estimate(s.A, s.y, s.sigma), settings)
        scores.append(psnr(x, s.clean))
    return float(np.mean(scores))


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# checkpoint layout: one flat LTSR vector
#   [version, family, k, h, w, n_weights, p_raw, gamma, has_p_fixed, p_fixed,
#    step, has_adam, adam_t, filters..., weights..., (m..., v...)]
_HEADER = 13


def save_theta(path, theta: ThetaParams, adam: AdamState | None = None, step: int = 0) -> None:
    k, h, w = theta.filters.shape
    header = [CHECKPOINT_VERSION, _FAMILY_CODE[theta.family], k, h, w, theta.weights.size,
              theta.p_raw, theta.gamma, theta.p_fixed is not None,
              0.0 if theta.p_fixed is None else theta.p_fixed, step, adam is not None,
              0 if adam is None else adam.t]
    parts = [np.asarray(header, dtype=np.float64), theta.filters.ravel(), theta.weights]
    if adam is not None:
        parts += [adam.m, adam.v]
    write_tensor(np.concatenate(parts), path)


def load_checkpoint(path):
    """``(theta, adam_or_None, step)`` from a file written by :func:`save_theta`."""
    data = read_tensor(path)
    if data.ndim != 1 or data.size < _HEADER:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version = int(data[0])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    family = {v: f for f, v in _FAMILY_CODE.items()}.get(int(data[1]))
    if family is None:
        raise ValueError(f"{path}: unknown prior family code {data[1]}")
    k, h, w, nw = (int(v) for v in data[2:6])
    p_raw, gamma = float(data[6]), float(data[7])
    p_fixed = float(data[9]) if data[8] else None
    step, has_adam, t = int(data[10]), bool(data[11]), int(data[12])
    n_theta = k * h * w + nw
    expected = _HEADER + n_theta + (2 * (n_theta + 1) if has_adam else 0)
    if data.size != expected:
        raise ValueError(f"{path}: {data.size} entries, expected {expected}")
    body = data[_HEADER:]
    theta = ThetaParams(body[:k * h * w].reshape(k, h, w), body[k * h * w:n_theta], p_raw,
                        family, gamma, p_fixed)
    adam = None
    if has_adam:
        n = n_theta + 1
        adam = AdamState(body[n_theta:n_theta + n].copy(), body[n_theta + n:].copy(), t)
    return theta, adam, step


def load_theta(path) -> ThetaParams:
    return load_checkpoint(path)[0]
