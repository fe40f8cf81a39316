"""AdamW training loop with linear warmup, plus a finite-difference gradient check."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import batch as make_batches, stack_pairs
from .model import ArchitectureConfig, E2fNet, backward, init_params, save_checkpoint
from .objectives import LossConfig, combined_loss, psnr, ssim


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 50
    epochs: int = 50
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epsilon: float = 1e-8
    seed: int = 0
    # fixed subset of the training pairs scored after every epoch
    monitor_samples: int = 8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.warmup_steps < 0 or self.weight_decay < 0 or self.epsilon <= 0:
            raise ValueError("warmup_steps, weight_decay >= 0 and epsilon > 0 required")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class OptimState:
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


def lr_at_step(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``learning_rate`` over ``warmup_steps``, constant after."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    if config.warmup_steps == 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, step / config.warmup_steps)


def _named(params) -> dict[str, torch.Tensor]:
    if isinstance(params, nn.Module):
        return dict(params.named_parameters())
    return params


@torch.no_grad()
def adamw_step(params, grads: dict, state: OptimState, config: TrainConfig,
               lr: float | None = None):
    """One decoupled-weight-decay Adam update, applied in place.

    ``params`` is a module or a name -> tensor mapping. Decay is applied
    before the adaptive term. Returns ``(params, state)``.
    """
    named = _named(params)
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    lr = lr_at_step(t, config) if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    bc1, bc2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p in named.items():
        g = grads[name]
        m = state.first_moment.setdefault(name, torch.zeros_like(p))
        v = state.second_moment.setdefault(name, torch.zeros_like(p))
        p.mul_(1 - lr * config.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + config.epsilon))
    return params, state


@dataclass
class TrainingLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        with open(out_dir / "train_log.jsonl", "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(out_dir / "epoch_log.jsonl", "w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _monitor(model: E2fNet, pairs, loss_config: LossConfig) -> dict:
    x, y = stack_pairs(pairs)
    with torch.no_grad():
        y_hat = model(torch.as_tensor(x, dtype=next(model.parameters()).dtype)).double().numpy()
    y = y.astype(np.float64)
    s = [ssim(a, b, loss_config) for a, b in zip(y, y_hat)]
    p = [v for v in (psnr(a, b, loss_config.data_range) for a, b in zip(y, y_hat)) if math.isfinite(v)]
    return {"ssim": float(np.mean(s)), "psnr": float(np.mean(p)) if p else math.inf}


def train(
    dataset: Sequence,
    arch: ArchitectureConfig,
    train_config: TrainConfig = TrainConfig(),
    loss_config: LossConfig = LossConfig(),
    out_dir=None,
    on_batch: Callable[[list], None] | None = None,
    log_every_epoch: bool = True,
) -> tuple[E2fNet, TrainingLog]:
    """Train a fresh E2fNet on ``dataset`` (a sequence of (eeg, fmri) pairs).

    ``on_batch`` sees every batch before its update, which lets callers
    audit exactly what the optimizer was shown.
    """
    if not dataset:
        raise ValueError("empty dataset")
    model = init_params(arch, train_config.seed)
    state = OptimState()
    log = TrainingLog()
    n_mon = min(train_config.monitor_samples, len(dataset))
    mon_idx = np.sort(np.random.default_rng(train_config.seed).choice(len(dataset), n_mon, replace=False))
    monitor = [dataset[i] for i in mon_idx]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(train_config.epochs):
        for chunk in make_batches(dataset, train_config.batch_size, train_config.seed, epoch):
            if on_batch is not None:
                on_batch(chunk)
            x, y = stack_pairs(chunk)
            step = state.step + 1
            try:
                model.zero_grad(set_to_none=True)
                y_hat = model(torch.as_tensor(x))
                loss = combined_loss(torch.as_tensor(y), y_hat, loss_config)
                if not torch.isfinite(loss):
                    raise FloatingPointError("non-finite loss")
                loss.backward()
                grads = {n: p.grad for n, p in model.named_parameters()}
                lr = lr_at_step(step, train_config)
                adamw_step(model, grads, state, train_config, lr)
            except FloatingPointError as exc:
                raise TrainingError(step, str(exc)) from exc
            log.steps.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss.item()})
        if log_every_epoch and n_mon:
            log.epochs.append({"epoch": epoch, "step": state.step, **_monitor(model, monitor, loss_config)})
        if out_dir is not None:
            save_checkpoint(model, out_dir / "checkpoint")
    if out_dir is not None:
        log.write(out_dir)
    return model, log


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.max_rel_error.values())

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if v > self.tolerance}


def grad_check(
    arch: ArchitectureConfig,
    loss_config: LossConfig = LossConfig(),
    seed: int = 0,
    tolerance: float = 1e-3,
    coords_per_layer: int = 20,
    step: float = 1e-3,
    abs_floor: float = 1e-9,
    grad_transform: Callable[[dict], dict] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients with central differences in float64.

    The error for a layer is norm-wise over its sampled coordinates,
    ``||analytic - numeric|| / max(||numeric||, abs_floor)``, so a layer whose
    gradient is off by a factor of two reports 1.0 while the O(step**2)
    truncation on near-zero coordinates does not dominate.
    ``grad_transform`` may alter the analytic gradients before comparison.
    """
    model = init_params(arch, seed).double()
    gen = np.random.default_rng(seed)
    x = gen.uniform(0.0, 1.0, size=(1, arch.input_t, arch.input_c, arch.input_f))
    y = gen.uniform(0.0, 1.0, size=(1, arch.out_d, arch.out_w, arch.out_h))
    grads = backward(x, y, model, loss_config)
    if grad_transform is not None:
        grads = grad_transform(grads)
    xt, yt = torch.as_tensor(x), torch.as_tensor(y)

    def loss_value() -> float:
        with torch.no_grad():
            return float(combined_loss(yt, model(xt), loss_config))

    report = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.numel() == 0:
                continue
            flat = p.view(-1)
            picks = gen.choice(p.numel(), size=min(coords_per_layer, p.numel()), replace=False)
            analytic = grads[name].reshape(-1)[picks].detach().numpy()
            numeric = np.empty(len(picks))
            for j, i in enumerate(picks):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_value()
                flat[i] = orig - step
                down = loss_value()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * step)
            worst = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), abs_floor)
            report[name] = float(worst)
    return GradCheckReport(report, tolerance)
