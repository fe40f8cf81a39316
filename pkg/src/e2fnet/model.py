"""E2fNet: EEG encoder, two-level U-Net and fMRI decoder."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import read_tensor, write_tensor
from .objectives import LossConfig, combined_loss
from .resize import bicubic_resize


@dataclass(frozen=True)
class ArchitectureConfig:
    input_c: int
    out_d: int
    out_w: int
    out_h: int
    input_t: int = 20
    input_f: int = 249
    feature_depth: int = 256
    encoder_depths: tuple[int, ...] = (64, 128, 256)
    encoder_kernels: tuple[tuple[int, int], ...] = ((1, 3), (1, 3), (1, 3))
    encoder_strides: tuple[tuple[int, int], ...] = ((1, 2), (1, 2), (1, 1))
    # None means (N // 2, N // 4)
    decoder_depths: tuple[int, ...] | None = None

    def __post_init__(self):
        # JSON round trips hand us lists
        object.__setattr__(self, "encoder_depths", tuple(int(d) for d in self.encoder_depths))
        object.__setattr__(self, "encoder_kernels", tuple(tuple(int(v) for v in k) for k in self.encoder_kernels))
        object.__setattr__(self, "encoder_strides", tuple(tuple(int(v) for v in s) for s in self.encoder_strides))
        if self.decoder_depths is not None:
            object.__setattr__(self, "decoder_depths", tuple(int(d) for d in self.decoder_depths))

    def validate(self) -> None:
        problems = []
        dims = (self.input_t, self.input_c, self.input_f, self.feature_depth,
                self.out_d, self.out_w, self.out_h)
        if any(d < 1 for d in dims):
            problems.append("all dimensions must be positive")
        if not self.encoder_depths or self.encoder_depths[-1] != self.feature_depth:
            problems.append("last encoder depth must equal feature_depth")
        if not (len(self.encoder_depths) == len(self.encoder_kernels) == len(self.encoder_strides)):
            problems.append("encoder depths, kernels and strides differ in length")
        if any(len(k) != 2 or k[0] != 1 or k[1] <= 1 for k in self.encoder_kernels):
            problems.append("encoder kernels must be (1, k) with k > 1")
        if any(len(s) != 2 or s[0] != 1 or s[1] < 1 for s in self.encoder_strides):
            problems.append("encoder strides must be (1, s) with s >= 1")
        if self.feature_depth < self.out_d:
            problems.append("feature_depth must be >= out_d")
        if any(d < 1 for d in self.decoder_channels):
            problems.append("decoder depths must be positive")
        if problems:
            raise ValueError("invalid architecture: " + "; ".join(problems))

    @property
    def decoder_channels(self) -> tuple[int, ...]:
        if self.decoder_depths is not None:
            return self.decoder_depths
        n = self.feature_depth
        return (max(n // 2, 1), max(n // 4, 1))

    def encoded_freq_extent(self) -> int:
        f = self.input_f
        for (_, k), (_, s) in zip(self.encoder_kernels, self.encoder_strides):
            f = (f + 2 * (k // 2) - k) // s + 1
        return f

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**data)


def _stage(in_ch, out_ch, kernel, stride, padding):
    # bias would be cancelled by the instance norm
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding, bias=False),
        nn.InstanceNorm2d(out_ch),
        nn.SiLU(),
    )


class EEGEncoder(nn.Module):
    """Treats T as channels over the (electrode, frequency) plane.

    Kernels have extent 1 along electrodes, so C is carried through all
    convolutions; only the frequency axis shrinks. The ``N x C x F''`` map
    is then bicubically resized to ``N x W x H``.
    """

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        self.out_size = (config.out_w, config.out_h)
        chans = (config.input_t,) + config.encoder_depths
        self.stages = nn.Sequential(*[
            _stage(chans[i], chans[i + 1], k, s, (0, k[1] // 2))
            for i, (k, s) in enumerate(zip(config.encoder_kernels, config.encoder_strides))
        ])

    def features(self, x):
        return self.stages(x)

    def forward(self, x):
        return bicubic_resize(self.stages(x), self.out_size)


class UNet(nn.Module):
    """Two stride-2 down blocks and two nearest-upsample blocks, all N wide."""

    def __init__(self, n: int):
        super().__init__()
        self.down1 = _stage(n, n, 3, 2, 1)
        self.down2 = _stage(n, n, 3, 2, 1)
        self.up1 = _stage(n, n, 3, 1, 1)
        self.fuse1 = _stage(2 * n, n, 1, 1, 0)
        self.up2 = _stage(n, n, 3, 1, 1)
        self.fuse2 = _stage(2 * n, n, 1, 1, 0)

    def forward(self, x):
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ValueError("spatial size not divisible by 4")
        d1 = self.down1(x)
        d2 = self.down2(d1)
        u1 = self.up1(F.interpolate(d2, scale_factor=2, mode="nearest"))
        u1 = self.fuse1(torch.cat([u1, d1], dim=1))
        u2 = self.up2(F.interpolate(u1, scale_factor=2, mode="nearest"))
        return self.fuse2(torch.cat([u2, x], dim=1))


class FMRIDecoder(nn.Module):
    def __init__(self, n: int, hidden: tuple[int, ...], out_d: int):
        super().__init__()
        chans = (n,) + tuple(hidden)
        self.hidden = nn.Sequential(*[
            _stage(chans[i], chans[i + 1], 3, 1, 1) for i in range(len(hidden))
        ])
        self.out = nn.Conv2d(chans[-1], out_d, 3, padding=1)

    def forward(self, x):
        return torch.sigmoid(self.out(self.hidden(x)))


class E2fNet(nn.Module):
    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = EEGEncoder(config)
        self.unet = UNet(config.feature_depth)
        self.decoder = FMRIDecoder(config.feature_depth, config.decoder_channels, config.out_d)

    def forward(self, x):
        return self.decoder(self.unet(self.encoder(x)))


def init_params(config: ArchitectureConfig, seed: int = 0) -> E2fNet:
    """Build an E2fNet with He-normal conv weights and zero biases."""
    model = E2fNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * np.sqrt(2.0 / fan_in))
    return model


def _raw(x):
    # unwrap EegSpectrogramSample / FmriVolume
    return x.values if hasattr(x, "volume_index") else x


def _as_batch(x, model: nn.Module, expected: tuple[int, ...]) -> torch.Tensor:
    values = _raw(x)
    t = values if isinstance(values, torch.Tensor) else torch.as_tensor(np.asarray(values))
    t = t.to(next(model.parameters()).dtype)
    if t.dim() == len(expected):
        t = t.unsqueeze(0)
    if tuple(t.shape[1:]) != expected:
        raise ValueError(f"input/config mismatch: expected {expected}, got {tuple(t.shape[1:])}")
    return t


def _input_shape(cfg: ArchitectureConfig):
    return (cfg.input_t, cfg.input_c, cfg.input_f)


def _feature_shape(cfg: ArchitectureConfig):
    return (cfg.feature_depth, cfg.out_w, cfg.out_h)


def _unbatch(out: torch.Tensor, single: bool) -> np.ndarray:
    out = out.detach().cpu().numpy()
    return out[0] if single else out


def eeg_encode(x, params: E2fNet) -> np.ndarray:
    shape = _input_shape(params.config)
    batch = _as_batch(x, params, shape)
    with torch.no_grad():
        out = params.encoder(batch)
    return _unbatch(out, _raw(x).ndim == len(shape))


def unet_forward(x_eeg, params: E2fNet) -> np.ndarray:
    t = _raw(x_eeg)
    t = t if isinstance(t, torch.Tensor) else torch.as_tensor(np.asarray(t))
    t = t.to(next(params.parameters()).dtype)
    single = t.dim() == 3
    if single:
        t = t.unsqueeze(0)
    if t.shape[-2] % 4 or t.shape[-1] % 4:
        raise ValueError("spatial size not divisible by 4")
    with torch.no_grad():
        out = params.unet(t)
    return _unbatch(out, single)


def fmri_decode(x_unet, params: E2fNet) -> np.ndarray:
    shape = _feature_shape(params.config)
    batch = _as_batch(x_unet, params, shape)
    with torch.no_grad():
        out = params.decoder(batch)
    return _unbatch(out, _raw(x_unet).ndim == len(shape))


def e2fnet_forward(x, params: E2fNet) -> np.ndarray:
    """Generated volume(s) for one ``T x C x F`` sample or a batch of them."""
    shape = _input_shape(params.config)
    batch = _as_batch(x, params, shape)
    with torch.no_grad():
        out = params(batch)
    return _unbatch(out, _raw(x).ndim == len(shape))


def backward(x, y, params: E2fNet, loss_config=None) -> dict[str, torch.Tensor]:
    """Gradients of the combined SSIM+MSE loss for every named parameter."""
    loss_config = loss_config or LossConfig()
    batch = _as_batch(x, params, _input_shape(params.config))
    cfg = params.config
    target = _as_batch(y, params, (cfg.out_d, cfg.out_w, cfg.out_h))
    params.zero_grad(set_to_none=True)
    y_hat = params(batch)
    if not torch.isfinite(y_hat).all():
        raise FloatingPointError("numerical overflow in forward pass")
    loss = combined_loss(target, y_hat, loss_config)
    loss.backward()
    grads = {}
    for name, p in params.named_parameters():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return grads


def save_checkpoint(params: E2fNet, path) -> None:
    """Write one TensorFile per parameter plus ``config.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, p) in enumerate(params.state_dict().items()):
        fname = f"{i:03d}_{name}.e2f"
        write_tensor(path / fname, p.detach().cpu().numpy())
        entries.append({"name": name, "file": fname, "shape": list(p.shape)})
    doc = {"architecture": params.config.to_dict(), "tensors": entries}
    (path / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_checkpoint(path) -> E2fNet:
    path = Path(path)
    doc = json.loads((path / "config.json").read_text())
    model = E2fNet(ArchitectureConfig.from_dict(doc["architecture"]))
    state = {}
    for entry in doc["tensors"]:
        arr = read_tensor(path / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"checkpoint tensor {entry['name']} has wrong shape")
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model
