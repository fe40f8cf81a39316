"""SSIM / MSE training objective and SSIM / PSNR evaluation metrics.

All functions accept numpy arrays or torch tensors. With tensor inputs the
result is a 0-d tensor that carries gradients; with array inputs a Python
float is returned (computed in float64).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

PSNR_INF = math.inf


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be a positive odd integer")
        if self.ssim_sigma <= 0 or self.data_range <= 0:
            raise ValueError("ssim_sigma and data_range must be positive")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilizers must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**data)


def _pair(y, y_hat):
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    is_tensor = isinstance(y, torch.Tensor) or isinstance(y_hat, torch.Tensor)
    if is_tensor:
        ref = y_hat if isinstance(y_hat, torch.Tensor) else y
        y = torch.as_tensor(y, dtype=ref.dtype, device=ref.device)
        y_hat = torch.as_tensor(y_hat, dtype=ref.dtype, device=ref.device)
    else:
        y = torch.as_tensor(np.asarray(y, dtype=np.float64))
        y_hat = torch.as_tensor(np.asarray(y_hat, dtype=np.float64))
    return y, y_hat, is_tensor


def _out(value: torch.Tensor, is_tensor: bool):
    return value if is_tensor else float(value)


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def effective_window(size: int, height: int, width: int) -> int:
    """Largest odd window not exceeding ``size`` that fits the slice."""
    fit = min(size, height, width)
    return fit if fit % 2 else fit - 1


def _ssim_map(y: torch.Tensor, y_hat: torch.Tensor, config: LossConfig) -> torch.Tensor:
    h, w = y.shape[-2], y.shape[-1]
    size = effective_window(config.ssim_window, h, w)
    if size < 1:
        raise ValueError("slices too small for SSIM")
    g = gaussian_window(size, config.ssim_sigma, y.dtype).to(y.device)
    kh = g.view(1, 1, size, 1)
    kw = g.view(1, 1, 1, size)

    def blur(t):
        return F.conv2d(F.conv2d(t, kh), kw)

    a = y.reshape(-1, 1, h, w)
    b = y_hat.reshape(-1, 1, h, w)
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    c1, c2 = config.c1, config.c2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(y, y_hat, config: LossConfig = LossConfig()):
    """Mean 2-D SSIM over every trailing ``W x H`` slice at valid window positions.

    Leading axes (depth, batch) are treated as independent slices. When a
    slice is smaller than the configured window, the largest odd window that
    fits is used instead.
    """
    y, y_hat, is_tensor = _pair(y, y_hat)
    return _out(_ssim_map(y, y_hat, config).mean(), is_tensor)


def mse(y, y_hat):
    y, y_hat, is_tensor = _pair(y, y_hat)
    return _out(((y - y_hat) ** 2).mean(), is_tensor)


def combined_loss(y, y_hat, config: LossConfig = LossConfig()):
    y, y_hat, is_tensor = _pair(y, y_hat)
    value = config.lambda1 * (1.0 - _ssim_map(y, y_hat, config).mean()) \
        + config.lambda2 * ((y - y_hat) ** 2).mean()
    return _out(value, is_tensor)


def psnr(y, y_hat, data_range: float = 1.0) -> float:
    """PSNR in dB; :data:`PSNR_INF` when the inputs are identical."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = mse(y, y_hat)
    err = float(err)
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(data_range ** 2 / err)
