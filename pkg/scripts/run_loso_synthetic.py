"""Leave-one-subject-out run on synthetic data against two baselines.

For every fold the trained model is compared with its own initialization
and with a constant predictor that outputs the training-set mean volume.
"""

import argparse
import tempfile
import time
from dataclasses import replace

import numpy as np
import torch

from e2fnet.data import SyntheticSpec, generate_synthetic, load_pairs
from e2fnet.evaluation import MetricsReport, evaluate, loso_split, score_predictions
from e2fnet.model import ArchitectureConfig, init_params
from e2fnet.training import TrainConfig, train


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--subjects", type=int, default=4)
    parser.add_argument("--volumes", type=int, default=200)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--features", type=int, default=32, help="feature depth N")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()
    torch.set_num_threads(args.threads)

    with tempfile.TemporaryDirectory() as tmp:
        manifest = generate_synthetic(
            SyntheticSpec(n_subjects=args.subjects, volumes_per_subject=args.volumes, seed=args.seed), tmp)
        pairs = load_pairs(manifest, manifest.subject_ids)
    n = args.features
    arch = ArchitectureConfig(input_c=8, out_d=4, out_w=16, out_h=16, feature_depth=n,
                              encoder_depths=(n // 2, n, n))
    cfg = TrainConfig(epochs=args.epochs, batch_size=16, seed=0)

    rows = []
    for fold in loso_split(manifest.subject_ids):
        start = time.perf_counter()
        train_set = [p for p in pairs if p[0].subject_id in fold.train_subjects]
        eval_set = [p for p in pairs if p[0].subject_id in fold.eval_subjects]
        fold_cfg = replace(cfg, seed=cfg.seed + fold.fold_index)
        model, _ = train(train_set, arch, fold_cfg, log_every_epoch=False)
        row = evaluate(model, eval_set)
        untrained = evaluate(init_params(arch, fold_cfg.seed), eval_set)["ssim_mean"]
        targets = np.stack([y.values for _, y in eval_set])
        mean_volume = np.stack([y.values for _, y in train_set]).mean(axis=0)
        baseline = score_predictions(targets, np.broadcast_to(mean_volume, targets.shape))["ssim_mean"]
        print(f"fold {fold.fold_index} ({fold.eval_subjects[0]}): trained {row['ssim_mean']:.3f}  "
              f"untrained {untrained:.3f}  mean-volume {baseline:.3f}  [{time.perf_counter() - start:.0f}s]")
        rows.append({"fold_index": fold.fold_index, **row})
    print(MetricsReport.from_folds(rows).to_text(), end="")


if __name__ == "__main__":
    main()
