"""Regenerates metrics_pair.txt with scikit-image as the reference."""
import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

rng = np.random.default_rng(20240611)
bands, h, w = 3, 24, 20
yy, xx = np.mgrid[0:h, 0:w]
ref = np.stack([
    0.5 + 0.4 * np.sin(xx / (3.0 + b)) * np.cos(yy / (4.0 + b)) for b in range(bands)
])
test = np.clip(ref + rng.normal(0.0, 0.05 + 0.03 * np.arange(bands)[:, None, None], ref.shape), 0, None)
data_range = float(ref.max())

psnr = [peak_signal_noise_ratio(ref[b], test[b], data_range=data_range) for b in range(bands)]
ssim = [
    structural_similarity(ref[b], test[b], gaussian_weights=True, sigma=1.5,
                          use_sample_covariance=False, data_range=data_range)
    for b in range(bands)
]

with open("metrics_pair.txt", "w") as f:
    f.write(f"shape {bands} {h} {w}\n")
    f.write(f"range {data_range!r}\n")
    f.write("reference " + " ".join(repr(float(v)) for v in ref.ravel()) + "\n")
    f.write("test " + " ".join(repr(float(v)) for v in test.ravel()) + "\n")
    f.write("psnr " + " ".join(repr(float(v)) for v in psnr) + "\n")
    f.write("ssim " + " ".join(repr(float(v)) for v in ssim) + "\n")
