"""Iteratively reweighted least squares image reconstruction with learnable sparse and low-rank priors."""
from .implicit_grad import ThetaParams, backward_pass, fd_gradient
from .irls import IrlsSettings, ProblemSpec, run_irls, wiener_init
from .linops import (CFAMask, Compose, Decimation, IdentityOp, LinearOp, SubsampledDFT,
                     ValidConv2D, adjoint_check, densify)
from .priors import LOWRANK, SPARSE, FilterBank, PriorConfig, gradient_filters
from .tensors_io import psnr, read_image, read_tensor, ssim, write_image, write_tensor
from .training import TrainConfig, load_theta, save_theta, train

__version__ = "0.1.0"

__all__ = [
    "CFAMask", "Compose", "Decimation", "FilterBank", "IdentityOp", "IrlsSettings", "LOWRANK",
    "LinearOp", "PriorConfig", "ProblemSpec", "SPARSE", "SubsampledDFT", "ThetaParams",
    "TrainConfig", "ValidConv2D", "adjoint_check", "backward_pass", "densify", "fd_gradient",
    "gradient_filters", "load_theta", "psnr", "read_image", "read_tensor", "run_irls",
    "save_theta", "ssim", "train", "wiener_init", "write_image", "write_tensor",
]
