"""Image-quality metrics: PSNR and single-scale SSIM.

The SSIM core below is the one code path used both for evaluation and for
the structural term of the training loss (which needs its gradient).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; inf if equal."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 1D Gaussian tap weights."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, k1d):
    """Separable valid-mode correlation of a 2D array with k1d x k1d."""
    n = k1d.size
    h, w = img.shape
    tmp = np.zeros((h, w - n + 1))
    for j in range(n):
        tmp += k1d[j] * img[:, j : j + w - n + 1]
    out = np.zeros((h - n + 1, w - n + 1))
    for i in range(n):
        out += k1d[i] * tmp[i : i + h - n + 1, :]
    return out


def _filter_transpose(fld, k1d, out_shape):
    """Adjoint of _filter_valid: scatter a window field back to image size."""
    n = k1d.size
    h, w = out_shape
    hv, wv = fld.shape
    tmp = np.zeros((h, wv))
    for i in range(n):
        tmp[i : i + hv, :] += k1d[i] * fld
    out = np.zeros((h, w))
    for j in range(n):
        out[:, j : j + wv] += k1d[j] * tmp
    return out


def _ssim_channel(x, y, k1d, want_grad, c1, c2):
    mu_x = _filter_valid(x, k1d)
    mu_y = _filter_valid(y, k1d)
    ex2 = _filter_valid(x * x, k1d)
    ey2 = _filter_valid(y * y, k1d)
    exy = _filter_valid(x * y, k1d)
    var_x = ex2 - mu_x ** 2
    var_y = ey2 - mu_y ** 2
    cov = exy - mu_x * mu_y

    n1 = 2.0 * mu_x * mu_y + c1
    n2 = 2.0 * cov + c2
    d1 = mu_x ** 2 + mu_y ** 2 + c1
    d2 = var_x + var_y + c2
    s_map = (n1 * n2) / (d1 * d2)
    if not want_grad:
        return s_map, None

    # Partials w.r.t. the window statistics of x.
    ds_dmux = 2.0 * mu_y * n2 / (d1 * d2) - s_map * 2.0 * mu_x / d1
    ds_dvarx = -s_map / d2
    ds_dcov = 2.0 * n1 / (d1 * d2)
    # Chain through E[x], E[x^2], E[xy] as the filtered moments.
    d_ex = ds_dmux - 2.0 * mu_x * ds_dvarx - mu_y * ds_dcov
    grad = (
        _filter_transpose(d_ex, k1d, x.shape)
        + 2.0 * x * _filter_transpose(ds_dvarx, k1d, x.shape)
        + y * _filter_transpose(ds_dcov, k1d, x.shape)
    )
    return s_map, grad


def ssim(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA, c1=SSIM_C1, c2=SSIM_C2):
    """Mean SSIM over valid windows, averaged across channels."""
    value, _ = ssim_with_grad(a, b, window=window, sigma=sigma, c1=c1, c2=c2, want_grad=False)
    return value


def ssim_with_grad(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA, c1=SSIM_C1, c2=SSIM_C2, want_grad=True):
    """SSIM(a, b) and (optionally) its gradient w.r.t. image a."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w, nc = a.shape
    if min(h, w) < window:
        raise ValidationError(f"image smaller than SSIM window ({window})")
    k1d = gaussian_window(window, sigma)
    total = 0.0
    grad = np.zeros_like(a) if want_grad else None
    n_windows = (h - window + 1) * (w - window + 1)
    for c in range(nc):
        s_map, g = _ssim_channel(a[..., c], b[..., c], k1d, want_grad, c1, c2)
        total += float(s_map.mean())
        if want_grad:
            grad[..., c] = g / n_windows
    value = total / nc
    if want_grad:
        grad /= nc
    return value, grad


def format_psnr(value):
    """CSV/JSON sentinel formatting: finite values as repr, inf as 'inf'."""
    return "inf" if np.isinf(value) else repr(float(value))


@dataclass
class EvalReport:
    """Per-view PSNR/SSIM over a test split plus aggregate means."""

    view_indices: list = field(default_factory=list)
    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)
    model_size_mb: float = 0.0

    def add(self, view_index, psnr_value, ssim_value):
        self.view_indices.append(int(view_index))
        self.psnr_values.append(float(psnr_value))
        self.ssim_values.append(float(ssim_value))

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr_values)) if self.psnr_values else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim_values)) if self.ssim_values else float("nan")

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("view,psnr,ssim\n")
            for v, p, s in zip(self.view_indices, self.psnr_values, self.ssim_values):
                fh.write(f"{v},{format_psnr(p)},{s!r}\n")
            fh.write(f"mean,{format_psnr(self.mean_psnr)},{self.mean_ssim!r}\n")

    def write_json(self, path):
        payload = {
            "n_views": len(self.view_indices),
            "mean_psnr": format_psnr(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "model_size_mb": self.model_size_mb,
            "per_view": [
                {"view": v, "psnr": format_psnr(p), "ssim": s}
                for v, p, s in zip(self.view_indices, self.psnr_values, self.ssim_values)
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
