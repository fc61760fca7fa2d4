"""Shipped images, kernels and masks, and the small benchmark problems built from them."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .irls import ProblemSpec, initial_estimate
from .linops import CFAMask, IdentityOp, LinearOp, SubsampledDFT, ValidConv2D
from .priors import LOWRANK, SPARSE, FilterBank, PriorConfig, gradient_filters
from .tensors_io import read_image, read_tensor

DATA_DIR = Path(__file__).resolve().parent / "data"


def data_path(name: str) -> Path:
    path = DATA_DIR / name
    if not path.exists():
        raise FileNotFoundError(f"no shipped data file {name!r} in {DATA_DIR}")
    return path


def gray32() -> np.ndarray:
    return read_image(data_path("gray32.png"))


def color32() -> np.ndarray:
    return read_image(data_path("color32.png"))


def kernel(name: str) -> np.ndarray:
    return read_tensor(data_path(f"{name}.ltsr"))


def training_crops() -> np.ndarray:
    """Six 16x16 grayscale crops, shape ``(6, 1, 16, 16)``."""
    return read_tensor(data_path("train_crops16.ltsr"))


def noisy(A: LinearOp, x, sigma, seed):
    rng = np.random.default_rng(seed)
    return A.apply(x) + sigma * rng.standard_normal(A.out_shape)


@dataclass
class Fixture:
    name: str
    A: LinearOp
    y: np.ndarray
    sigma: float
    x_true: np.ndarray
    bank: FilterBank
    prior: PriorConfig

    def spec(self, delta: float = 8e-4) -> ProblemSpec:
        return ProblemSpec(self.A, self.y, self.sigma, self.bank, self.prior, delta)

    def x0(self) -> np.ndarray:
        return initial_estimate(self.A, self.y, self.sigma)


# name -> (image, operator factory, prior family)
_PROBLEMS = {
    "deblur-sparse": ("gray", lambda x: ValidConv2D(kernel("motion7"), x.shape), SPARSE),
    "deblur-lowrank": ("color", lambda x: ValidConv2D(kernel("motion7"), x.shape), LOWRANK),
    "demosaick-lowrank": ("color", lambda x: CFAMask(*x.shape[1:]), LOWRANK),
    "fourier-sparse": ("gray", lambda x: SubsampledDFT(read_tensor(data_path("fourier_mask32.ltsr"))),
                       SPARSE),
}

FIXTURE_NAMES = tuple(_PROBLEMS)


def fixture(name: str, sigma: float = 0.01, seed: int = 0, weight: float = 1.0,
            p: float = 1.0) -> Fixture:
    """One of the 32x32 benchmark problems with a gradient-filter (TV) prior."""
    if name not in _PROBLEMS:
        raise KeyError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURE_NAMES)}")
    image, make_op, family = _PROBLEMS[name]
    x = gray32() if image == "gray" else color32()
    A = make_op(x)
    y = noisy(A, x, sigma, seed)
    prior = PriorConfig(family, p, 1e-5, weight)
    return Fixture(name, A, y, sigma, x, FilterBank(gradient_filters()), prior)


TINY_NAMES = ("denoise8", "deblur8", "deblur12", "denoise12")


def tiny_fixture(name: str, seed: int = 0) -> Fixture:
    """Small convex problems (8x8 or 12x12 crops) for gradient checks."""
    crops = training_crops()
    if name == "denoise8":
        x, A, sigma = crops[1, :, 4:12, 4:12], None, 0.05
    elif name == "denoise12":
        x, A, sigma = crops[3, :, 2:14, 2:14], None, 0.05
    elif name == "deblur8":
        x, A, sigma = crops[1, :, 4:12, 4:12], "blur3", 0.02
    elif name == "deblur12":
        x, A, sigma = crops[0, :, 2:14, 2:14], "blur3", 0.02
    else:
        raise KeyError(f"unknown tiny fixture {name!r}; choose from {', '.join(TINY_NAMES)}")
    op = IdentityOp(x.shape) if A is None else ValidConv2D(kernel(A), x.shape)
    y = noisy(op, x, sigma, seed)
    return Fixture(name, op, y, sigma, x, FilterBank(gradient_filters()),
                   PriorConfig(SPARSE, 1.0, 1e-3, 1.0))
