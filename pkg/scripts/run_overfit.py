"""Overfit a small E2fNet on 8 synthetic pairs and print the SSIM trajectory."""

import argparse
import tempfile
import time

import torch

from e2fnet.data import SyntheticSpec, generate_synthetic, load_pairs
from e2fnet.evaluation import evaluate
from e2fnet.model import ArchitectureConfig
from e2fnet.training import TrainConfig, train


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()
    torch.set_num_threads(args.threads)

    with tempfile.TemporaryDirectory() as tmp:
        # 27 volumes with T=20 leave exactly 8 pairs
        manifest = generate_synthetic(SyntheticSpec(n_subjects=1, volumes_per_subject=27, seed=args.seed), tmp)
        pairs = load_pairs(manifest, manifest.subject_ids)
    arch = ArchitectureConfig(input_c=8, out_d=4, out_w=16, out_h=16, feature_depth=32,
                              encoder_depths=(16, 32, 32))
    start = time.perf_counter()
    model, log = train(pairs, arch, TrainConfig(epochs=args.steps, batch_size=8, seed=args.seed))
    for rec in log.epochs[::50]:
        print(f"step {rec['step']:5d}  ssim {rec['ssim']:.4f}  psnr {rec['psnr']:.2f}")
    final = evaluate(model, pairs)
    print(f"final train SSIM {final['ssim_mean']:.4f}, PSNR {final['psnr_mean']:.2f} dB "
          f"({len(pairs)} pairs, {len(log.steps)} steps, {time.perf_counter() - start:.0f}s)")


if __name__ == "__main__":
    main()
