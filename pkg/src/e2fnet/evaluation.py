"""Leave-one-subject-out and holdout protocols with mean ± std reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .data import stack_pairs
from .model import ArchitectureConfig, E2fNet
from .objectives import LossConfig, psnr, ssim
from .training import TrainConfig, train


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    train_subjects: tuple[str, ...]
    eval_subjects: tuple[str, ...]


def loso_split(subjects: Sequence[str]) -> list[FoldSpec]:
    subjects = list(subjects)
    if len(subjects) < 2:
        raise ValueError("need at least two subjects")
    if len(set(subjects)) != len(subjects):
        raise ValueError("duplicate subject ids")
    return [
        FoldSpec(i, tuple(s for s in subjects if s != held), (held,))
        for i, held in enumerate(subjects)
    ]


def holdout_split(subjects: Sequence[str], n_train: int) -> FoldSpec:
    subjects = list(subjects)
    if n_train < 1:
        raise ValueError("n_train must be positive")
    if n_train >= len(subjects):
        raise ValueError("empty eval set")
    return FoldSpec(0, tuple(subjects[:n_train]), tuple(subjects[n_train:]))


def score_predictions(targets, predictions, loss_config: LossConfig = LossConfig()) -> dict:
    """Per-sample SSIM/PSNR summary with population standard deviations.

    Samples with infinite PSNR (exact reconstructions) are left out of the
    PSNR statistics and counted in ``n_psnr_infinite``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if len(targets) == 0:
        raise ValueError("nothing to score")
    s = np.array([ssim(y, p, loss_config) for y, p in zip(targets, predictions)])
    p_all = [psnr(y, p, loss_config.data_range) for y, p in zip(targets, predictions)]
    p = np.array([v for v in p_all if math.isfinite(v)])
    return {
        "ssim_mean": float(s.mean()),
        "ssim_std": float(s.std()),
        "psnr_mean": float(p.mean()) if p.size else math.inf,
        "psnr_std": float(p.std()) if p.size else 0.0,
        "n_samples": int(len(s)),
        "n_psnr_infinite": int(len(p_all) - p.size),
    }


def predict(params: E2fNet, pairs: Sequence, batch_size: int = 32) -> np.ndarray:
    dtype = next(params.parameters()).dtype
    out = []
    with torch.no_grad():
        for k in range(0, len(pairs), batch_size):
            x, _ = stack_pairs(pairs[k:k + batch_size])
            out.append(params(torch.as_tensor(x).to(dtype)).double().numpy())
    return np.concatenate(out)


def evaluate(params: E2fNet, pairs: Sequence, loss_config: LossConfig = LossConfig()) -> dict:
    if not pairs:
        raise ValueError("no pairs to evaluate")
    cfg = params.config
    want = (cfg.out_d, cfg.out_w, cfg.out_h)
    for i, (x, y) in enumerate(pairs):
        if tuple(y.values.shape) != want or tuple(x.values.shape) != (cfg.input_t, cfg.input_c, cfg.input_f):
            raise ValueError(f"shape mismatch in pair {i} ({x.subject_id}, volume {x.volume_index})")
    targets = np.stack([y.values for _, y in pairs])
    return score_predictions(targets, predict(params, pairs), loss_config)


@dataclass
class MetricsReport:
    per_fold: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    note: str = "aggregate mean/std are taken over fold means (population std)"

    @classmethod
    def from_folds(cls, per_fold: list[dict]) -> "MetricsReport":
        ssim_means = np.array([f["ssim_mean"] for f in per_fold])
        psnr_means = np.array([f["psnr_mean"] for f in per_fold if math.isfinite(f["psnr_mean"])])
        aggregate = {
            "ssim_mean": float(ssim_means.mean()),
            "ssim_std": float(ssim_means.std()),
            "psnr_mean": float(psnr_means.mean()) if psnr_means.size else math.inf,
            "psnr_std": float(psnr_means.std()) if psnr_means.size else 0.0,
        }
        return cls(per_fold, aggregate)

    def to_json(self) -> str:
        # json writes inf as Infinity, which json.loads reads back
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        def pm(mean, std, digits):
            if not math.isfinite(mean):
                return "inf"
            return f"{mean:.{digits}f} ± {std:.{digits}f}"

        rows = [("fold", "n", "SSIM", "PSNR (dB)")]
        for f in self.per_fold:
            rows.append((str(f["fold_index"]), str(f["n_samples"]),
                         pm(f["ssim_mean"], f["ssim_std"], 3), pm(f["psnr_mean"], f["psnr_std"], 3)))
        a = self.aggregate
        rows.append(("mean", "", pm(a["ssim_mean"], a["ssim_std"], 3), pm(a["psnr_mean"], a["psnr_std"], 3)))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = [f"# {self.note}"]
        for r in rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        return "\n".join(lines) + "\n"


def run_cross_validation(
    dataset: Sequence,
    folds: Sequence[FoldSpec],
    arch: ArchitectureConfig,
    train_config: TrainConfig = TrainConfig(),
    loss_config: LossConfig = LossConfig(),
    on_batch: Callable[[FoldSpec, list], None] | None = None,
) -> MetricsReport:
    """Train a fresh model per fold (seed offset by fold index) and score its eval subjects."""
    present = {x.subject_id for x, _ in dataset}
    rows = []
    for fold in folds:
        missing = (set(fold.train_subjects) | set(fold.eval_subjects)) - present
        if missing:
            raise ValueError(f"fold {fold.fold_index}: subjects missing from dataset: {sorted(missing)}")
        train_set = [p for p in dataset if p[0].subject_id in fold.train_subjects]
        eval_set = [p for p in dataset if p[0].subject_id in fold.eval_subjects]
        hook = None if on_batch is None else (lambda chunk, f=fold: on_batch(f, chunk))
        cfg = replace(train_config, seed=train_config.seed + fold.fold_index)
        try:
            model, _ = train(train_set, arch, cfg, loss_config, on_batch=hook, log_every_epoch=False)
            row = evaluate(model, eval_set, loss_config)
        except Exception as exc:
            raise RuntimeError(f"fold {fold.fold_index} failed: {exc}") from exc
        rows.append({"fold_index": fold.fold_index, **row})
    return MetricsReport.from_folds(rows)


class LeakageMonitor:
    """Counts training samples that belong to a fold's evaluation subjects."""

    def __init__(self):
        self.seen = 0
        self.leaked = 0

    def __call__(self, fold: FoldSpec, chunk: list) -> None:
        for x, _ in chunk:
            self.seen += 1
            if x.subject_id in fold.eval_subjects:
                self.leaked += 1
