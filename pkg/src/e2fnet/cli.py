"""Command-line entry point: synth-data, preprocess, train, eval, export-slices."""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from .data import DatasetManifest, SyntheticSpec, export_preprocessed, generate_synthetic, load_pairs
from .evaluation import MetricsReport, evaluate, holdout_split, loso_split, predict, run_cross_validation
from .model import ArchitectureConfig, load_checkpoint
from .objectives import LossConfig
from .preprocess import PreprocessConfig
from .training import TrainConfig, TrainingError, train

log = logging.getLogger("e2fnet")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    arch: ArchitectureConfig
    dataset_root: str
    output_dir: str
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    # "loso" or {"holdout": n_train}
    protocol: object = "loso"

    KEYS = {"arch", "dataset_root", "output_dir", "preprocess", "train", "loss", "protocol"}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - cls.KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("arch", "dataset_root", "output_dir"):
            if key not in doc:
                raise ConfigError(f"missing config key {key!r}")
        try:
            pre = dict(doc.get("preprocess", {}))
            pre_unknown = set(pre) - set(PreprocessConfig.__dataclass_fields__)
            if pre_unknown:
                raise ValueError(f"unknown preprocess keys: {sorted(pre_unknown)}")
            cfg = cls(
                arch=ArchitectureConfig.from_dict(doc["arch"]),
                dataset_root=str(doc["dataset_root"]),
                output_dir=str(doc["output_dir"]),
                preprocess=PreprocessConfig(**pre),
                train=TrainConfig.from_dict(doc.get("train", {})),
                loss=LossConfig.from_dict(doc.get("loss", {})),
                protocol=doc.get("protocol", "loso"),
            )
            cfg.arch.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.holdout_n_train()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def holdout_n_train(self) -> int | None:
        if self.protocol == "loso":
            return None
        if isinstance(self.protocol, dict) and set(self.protocol) == {"holdout"}:
            n = self.protocol["holdout"]
            if isinstance(n, int) and n > 0:
                return n
        raise ConfigError('protocol must be "loso" or {"holdout": <positive int>}')

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "dataset_root": self.dataset_root,
            "output_dir": self.output_dir,
            "preprocess": asdict(self.preprocess),
            "train": self.train.to_dict(),
            "loss": self.loss.to_dict(),
            "protocol": self.protocol,
        }


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="e2fnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic paired EEG/fMRI dataset")
    p.add_argument("--subjects", type=_positive_int, default=4)
    p.add_argument("--volumes", type=_positive_int, default=30)
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--context", type=_positive_int, default=20, help="EEG windows per sample (T)")
    p.add_argument("--channels", type=_positive_int, default=8)
    p.add_argument("--depth", type=_positive_int, default=4)
    p.add_argument("--width", type=_positive_int, default=16)
    p.add_argument("--height", type=_positive_int, default=16)
    p.add_argument("--blobs", type=_positive_int, default=3)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("preprocess", help="write preprocessed sample/target tensors")
    p.add_argument("--config", type=Path)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train", help="train on the configured split")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--seed", type=_non_negative_int)

    p = sub.add_parser("eval", help="run the configured evaluation protocol")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--seed", type=_non_negative_int)

    p = sub.add_parser("export-slices", help="write target/generated slices as PGM images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--volume-index", type=_non_negative_int, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; values in [0, 1] map to round(255 * v)."""
    pixels = np.clip(np.rint(255.0 * np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    rows, cols = pixels.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    head = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", data)
    if head is None:
        raise ValueError("not an 8-bit binary PGM")
    cols, rows = int(head.group(1)), int(head.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=rows * cols, offset=head.end()).reshape(rows, cols)


def _load_run(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def _locked(out_dir: Path) -> FileLock:
    out_dir.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out_dir / ".e2fnet.lock"), timeout=0)


def _manifest(cfg: RunConfig) -> DatasetManifest:
    manifest = DatasetManifest.load(cfg.dataset_root)
    if PreprocessConfig(**manifest.preprocess) != cfg.preprocess:
        raise ConfigError("manifest/config mismatch")
    return manifest


def cmd_synth_data(args) -> int:
    spec = SyntheticSpec(
        n_subjects=args.subjects, volumes_per_subject=args.volumes,
        geometry=(args.context, args.channels, 249, args.depth, args.width, args.height),
        blob_count=args.blobs, noise_std=args.noise, seed=args.seed,
    )
    with _locked(args.out):
        manifest = generate_synthetic(spec, args.out)
    print(manifest.root / "manifest.json")
    return 0


def cmd_preprocess(args) -> int:
    if args.config is not None:
        cfg = _load_run(args)
        manifest = _manifest(cfg)
        out = args.out or Path(cfg.output_dir) / "preprocessed"
    else:
        if args.dataset is None or args.out is None:
            raise ConfigError("preprocess needs --config or both --dataset and --out")
        manifest, out = DatasetManifest.load(args.dataset), args.out
    with _locked(out):
        print(export_preprocessed(manifest, out))
    return 0


def _train_subjects(cfg: RunConfig, manifest: DatasetManifest) -> list[str]:
    n_train = cfg.holdout_n_train()
    if n_train is None:
        return manifest.subject_ids
    return list(holdout_split(manifest.subject_ids, n_train).train_subjects)


def cmd_train(args) -> int:
    cfg = _load_run(args)
    manifest = _manifest(cfg)
    out = Path(cfg.output_dir)
    with _locked(out):
        (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        pairs = load_pairs(manifest, _train_subjects(cfg, manifest), cfg.preprocess)
        log.info("training on %d pairs", len(pairs))
        try:
            model, _ = train(pairs, cfg.arch, cfg.train, cfg.loss, out_dir=out)
        except TrainingError as exc:
            print(f"error: training aborted at {exc}", file=sys.stderr)
            return 1
    print(out / "checkpoint")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run(args)
    model = load_checkpoint(args.checkpoint)
    if model.config != cfg.arch:
        raise ConfigError("checkpoint architecture does not match the run config")
    manifest = _manifest(cfg)
    out = Path(cfg.output_dir)
    with _locked(out):
        n_train = cfg.holdout_n_train()
        if n_train is None:
            pairs = load_pairs(manifest, manifest.subject_ids, cfg.preprocess)
            report = run_cross_validation(pairs, loso_split(manifest.subject_ids),
                                          cfg.arch, cfg.train, cfg.loss)
        else:
            fold = holdout_split(manifest.subject_ids, n_train)
            pairs = load_pairs(manifest, fold.eval_subjects, cfg.preprocess)
            report = MetricsReport.from_folds([{"fold_index": 0, **evaluate(model, pairs, cfg.loss)}])
        (out / "report.json").write_text(report.to_json())
        (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_export_slices(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.dataset)
    if args.subject not in manifest.subject_ids:
        raise ConfigError(f"unknown subject {args.subject!r}")
    pairs = [p for p in load_pairs(manifest, [args.subject]) if p[0].volume_index == args.volume_index]
    if not pairs:
        raise ConfigError(f"no generated pair for volume {args.volume_index} of {args.subject}")
    target = pairs[0][1].values
    generated = predict(model, pairs)[0]
    args.out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.subject}_vol{args.volume_index}"
    for d in range(target.shape[0]):
        write_pgm(args.out / f"{stem}_slice{d:02d}_target.pgm", target[d])
        write_pgm(args.out / f"{stem}_slice{d:02d}_generated.pgm", generated[d])
    print(args.out)
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-slices": cmd_export_slices,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("E2F_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Timeout:
        print("error: output directory is locked by another run", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
