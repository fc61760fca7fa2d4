"""Regenerate the small fixture images/kernels under src/irlsrecon/data.

Images are area-downsampled crops of scikit-image's public-domain sample
pictures; only needed when the shipped files must be rebuilt.
"""
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d
from skimage import data
from skimage.transform import downscale_local_mean

from irlsrecon.tensors_io import ImageMeta, write_image, write_tensor

OUT = Path(__file__).resolve().parents[1] / "src" / "irlsrecon" / "data"


def gaussian_kernel(size, sigma):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def motion_kernel(size):
    """Curved camera-shake path, slightly thickened, cropped to its support."""
    k = np.zeros((size, size))
    t = np.linspace(0, 1, 8 * size)
    ys = (size - 1) * t
    xs = (size - 1) * (0.5 + 0.35 * np.sin(2 * np.pi * t))
    for yy, xx in zip(ys, xs):
        k[int(round(yy)), int(round(xx))] += 1.0
    k = convolve2d(k, np.outer([1, 2, 1], [1, 2, 1]) / 16.0, mode="same")
    rows = np.flatnonzero(k.sum(axis=1) > 1e-3 * k.sum())
    cols = np.flatnonzero(k.sum(axis=0) > 1e-3 * k.sum())
    k = k[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return k / k.sum()


def radial_mask(n, rate, rng):
    """Conjugate-symmetric variable-density mask with the given sampling rate."""
    f = np.fft.fftfreq(n)
    rad = np.hypot(f[:, None], f[None, :])
    prob = np.clip(rate * 6.0 * np.exp(-rad / 0.12), 0, 1)
    mask = rng.random((n, n)) < prob
    mask |= np.roll(mask[::-1, ::-1], 1, axis=(0, 1))
    mask[np.ix_([0, 1, -1], [0, 1, -1])] = True
    return mask.astype(np.float64)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    cam = data.camera() / 255.0
    gray = downscale_local_mean(cam[40:168, 180:308], (4, 4))
    write_image(gray[None], OUT / "gray32.png", ImageMeta(8, 1))
    astro = data.astronaut().transpose(2, 0, 1) / 255.0
    color = np.stack([downscale_local_mean(ch[0:192, 96:288], (6, 6)) for ch in astro])
    write_image(color, OUT / "color32.png", ImageMeta(8, 3))
    crops = []
    for r, c in [(0, 0), (400, 40), (256, 64), (320, 320), (200, 380), (40, 400)]:
        crop = downscale_local_mean(cam[r:r + 64, c:c + 64], (4, 4))
        crops.append(crop)
    write_tensor(np.stack(crops)[:, None], OUT / "train_crops16.ltsr")
    # 32x32 crops for learning deblurring banks; none overlaps the gray32 region
    regions = [(300, 0), (384, 384), (200, 380), (0, 0), (260, 140), (384, 100), (0, 380), (150, 20)]
    crops32 = [downscale_local_mean(cam[r:r + 128, c:c + 128], (4, 4)) for r, c in regions]
    write_tensor(np.stack(crops32)[:, None], OUT / "train_crops32.ltsr")
    write_tensor(gaussian_kernel(5, 1.0), OUT / "gauss5.ltsr")
    write_tensor(gaussian_kernel(9, 2.0), OUT / "gauss9.ltsr")
    # mild blur whose transfer function stays >= 0.2, for well-conditioned tiny problems
    write_tensor(np.array([[0.02, 0.08, 0.02], [0.08, 0.6, 0.08], [0.02, 0.08, 0.02]]),
                 OUT / "blur3.ltsr")
    write_tensor(motion_kernel(7), OUT / "motion7.ltsr")
    write_tensor(radial_mask(32, 0.25, np.random.default_rng(7)), OUT / "fourier_mask32.ltsr")
    write_image(gray[None], OUT / "gray32_16bit.png", ImageMeta(16, 1))


if __name__ == "__main__":
    main()
