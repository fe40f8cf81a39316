"""Separable bicubic resampling with the Keys cubic convolution kernel."""

from __future__ import annotations

import numpy as np
import torch

KEYS_A = -0.5


def keys_kernel(x, a: float = KEYS_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_matrix(src: int, dst: int, a: float = KEYS_A) -> np.ndarray:
    """``dst x src`` interpolation matrix using half-pixel centers and clamped edges."""
    if src == dst:
        return np.eye(dst)
    mat = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        s = (i + 0.5) * scale - 0.5
        base = int(np.floor(s))
        t = s - base
        for offset in (-1, 0, 1, 2):
            j = min(max(base + offset, 0), src - 1)
            mat[i, j] += keys_kernel(offset - t, a)
    return mat


def bicubic_resize(values, target: tuple[int, int]):
    """Resize the two trailing axes of ``values`` to ``target``.

    Works on numpy arrays and torch tensors; tensors keep their autograd
    graph. Matching sizes pass through untouched.
    """
    a, b = values.shape[-2], values.shape[-1]
    if a < 2 or b < 2:
        raise ValueError("too small to interpolate")
    w, h = int(target[0]), int(target[1])
    if (a, b) == (w, h):
        return values
    if isinstance(values, torch.Tensor):
        rows = torch.as_tensor(resize_matrix(a, w), dtype=values.dtype, device=values.device)
        cols = torch.as_tensor(resize_matrix(b, h), dtype=values.dtype, device=values.device)
        return torch.einsum("wa,...ab,hb->...wh", rows, values, cols)
    rows, cols = resize_matrix(a, w), resize_matrix(b, h)
    return np.einsum("wa,...ab,hb->...wh", rows, np.asarray(values, dtype=np.float64), cols)
