"""Train the shipped l1 deblurring bank (data/l1_deblur.ltsr).

Eight 3x3 filters with p = 1, initialised from the non-constant 3x3 DCT
basis and fitted on the 32x32 training crops under the 7x7 motion blur at
noise level 0.01.
"""
import argparse
from pathlib import Path

import numpy as np

from irlsrecon.fixtures import data_path, kernel
from irlsrecon.implicit_grad import ThetaParams
from irlsrecon.tensors_io import read_tensor
from irlsrecon.training import TrainConfig, make_sample_set, save_theta, train

OUT = Path(__file__).resolve().parents[1] / "src" / "irlsrecon" / "data" / "l1_deblur.ltsr"


def dct_bank() -> np.ndarray:
    c = np.array([[1, 1, 1], [1, 0, -1], [1, -2, 1]], dtype=np.float64)
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return np.array([np.outer(c[i], c[j]) for i in range(3) for j in range(3) if i + j > 0])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()
    crops = read_tensor(data_path("train_crops32.ltsr"))
    samples = make_sample_set(crops, kernel("motion7"), (0.01, 0.01), seed=0)
    theta = ThetaParams(dct_bank(), np.ones(8), 0.0, "sparse", 1e-3, p_fixed=1.0)
    config = TrainConfig(epochs=1, batches_per_epoch=args.steps, batch_size=8, seed=0)
    result = train(theta, samples, config,
                   callback=lambda step, th, adam, row: print(step, f"{row['loss']:.3f}", flush=True))
    save_theta(OUT, result.theta)


if __name__ == "__main__":
    main()
