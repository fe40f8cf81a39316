"""Tensor files, dataset manifests, batching and the synthetic EEG/fMRI generator."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .preprocess import (
    EegSpectrogramSample,
    FmriVolume,
    PreprocessConfig,
    RawEegRecording,
    RecordingMeta,
    apply_eeg_norm,
    build_pairs,
    eeg_extrema,
)

MAGIC = b"E2F1"

Pair = tuple[EegSpectrogramSample, FmriVolume]


def encode_tensor(values) -> bytes:
    arr = np.asarray(values)
    if arr.ndim < 1 or any(d < 1 for d in arr.shape):
        raise ValueError("tensor must have ndim >= 1 and positive dims")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ValueError("not a tensor file")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * ndim
    if len(buf) < head:
        raise ValueError("corrupt tensor file")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != head + 4 * count:
        raise ValueError("corrupt tensor file")
    return np.frombuffer(buf, dtype="<f4", offset=head, count=count).reshape(dims).astype(np.float32)


def write_tensor(path, values) -> None:
    Path(path).write_bytes(encode_tensor(values))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


@dataclass
class DatasetManifest:
    name: str
    subjects: list[dict]
    preprocess: dict
    eeg_norm: dict
    root: Path = field(default=Path("."), compare=False)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text())
        ids = [s["subject_id"] for s in doc["subjects"]]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate subject ids in manifest")
        return cls(doc["name"], doc["subjects"], doc["preprocess"], doc["eeg_norm"], path.parent)

    def to_json(self) -> str:
        doc = {k: v for k, v in asdict(self).items() if k != "root"}
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self) -> Path:
        path = self.root / "manifest.json"
        path.write_text(self.to_json())
        return path

    @property
    def subject_ids(self) -> list[str]:
        return [s["subject_id"] for s in self.subjects]

    @property
    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(**self.preprocess)

    def entry(self, subject_id: str) -> dict:
        for s in self.subjects:
            if s["subject_id"] == subject_id:
                return s
        raise KeyError(f"unknown subject {subject_id!r}")

    def read_subject(self, subject_id: str) -> tuple[RawEegRecording, list[FmriVolume]]:
        entry = self.entry(subject_id)
        meta = RecordingMeta(**entry["meta"])
        eeg = read_tensor(self.root / entry["eeg_path"]).astype(np.float64)
        volumes = [
            FmriVolume(read_tensor(self.root / entry["fmri_path"].format(index=i)).astype(np.float64),
                       subject_id, i)
            for i in range(entry["n_volumes"])
        ]
        return RawEegRecording(meta, eeg), volumes


def subject_pairs_raw(manifest: DatasetManifest, subject_id: str,
                      config: PreprocessConfig | None = None) -> list[Pair]:
    recording, volumes = manifest.read_subject(subject_id)
    return build_pairs(recording, volumes, config or manifest.preprocess_config)


def load_pairs(manifest: DatasetManifest, subjects: Iterable[str],
               config: PreprocessConfig | None = None) -> list[Pair]:
    """Preprocessed pairs for ``subjects`` in manifest order, then by volume index.

    EEG features are scaled with the extrema stored in the manifest and kept
    as float32.
    """
    if config is not None and config != manifest.preprocess_config:
        raise ValueError("manifest/config mismatch")
    wanted = set(subjects)
    missing = wanted - set(manifest.subject_ids)
    if missing:
        raise KeyError(f"subjects not in manifest: {sorted(missing)}")
    extrema = (manifest.eeg_norm["min"], manifest.eeg_norm["max"])
    out: list[Pair] = []
    for sid in manifest.subject_ids:
        if sid not in wanted:
            continue
        raw = subject_pairs_raw(manifest, sid)
        eeg = apply_eeg_norm([x for x, _ in raw], extrema)
        for x, (_, y) in zip(eeg, raw):
            x.values = x.values.astype(np.float32)
            y.values = y.values.astype(np.float32)
            out.append((x, y))
    return out


def batch(pairs: Sequence, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Shuffle keyed by ``(seed, epoch)`` and cut into batches; the last may be partial."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(len(pairs))
    return [[pairs[i] for i in order[k:k + batch_size]] for k in range(0, len(pairs), batch_size)]


def stack_pairs(pairs: Sequence[Pair]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p[0].values for p in pairs])
    y = np.stack([p[1].values for p in pairs])
    return x, y


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 4
    volumes_per_subject: int = 30
    # (T, C, F, D, W, H)
    geometry: tuple[int, int, int, int, int, int] = (20, 8, 249, 4, 16, 16)
    blob_count: int = 3
    noise_std: float = 0.02
    seed: int = 0
    sampling_rate_hz: float = 250.0
    tr_seconds: float = 2.0
    n_tones: int = 4

    def __post_init__(self):
        object.__setattr__(self, "geometry", tuple(int(g) for g in self.geometry))
        if len(self.geometry) != 6 or any(g < 1 for g in self.geometry):
            raise ValueError("geometry must be six positive integers (T, C, F, D, W, H)")
        if self.n_subjects < 1 or self.volumes_per_subject < 1 or self.blob_count < 1:
            raise ValueError("n_subjects, volumes_per_subject and blob_count must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        window = int(round(self.sampling_rate_hz * self.tr_seconds))
        if window < self.geometry[2] + 1:
            raise ValueError("window shorter than the frequency cutoff")
        if self.n_tones > self.geometry[2] - 1:
            raise ValueError("too many tones for the retained band")

    @property
    def preprocess_config(self) -> PreprocessConfig:
        t, _, f = self.geometry[:3]
        return PreprocessConfig(temporal_context=t, cutoff_bins=f + 1, remove_dc=True)


class BlobForwardModel:
    """Seed-fixed map from blob parameters to volumes and EEG tone amplitudes.

    Each volume is a soft union ``1 - prod(1 - a_i g_i)`` of Gaussian blobs.
    Every electrode carries ``n_tones`` sinusoids at integer frequency bins;
    their amplitudes are a fixed non-negative linear function of the blob
    parameters, so FFT magnitudes recover them exactly in the noiseless case.
    """

    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        _, c, f, d, w, h = spec.geometry
        self.spec = spec
        n_params = 5 * spec.blob_count
        self.bins = np.sort(rng.choice(np.arange(1, f + 1), size=spec.n_tones, replace=False))
        self.mixing = rng.uniform(0.0, 1.0, size=(c, spec.n_tones, n_params)) / n_params
        self.phases = rng.uniform(0.0, 2 * np.pi, size=(c, spec.n_tones))
        self.grid = np.stack(np.meshgrid(
            (np.arange(d) + 0.5) / d, (np.arange(w) + 0.5) / w, (np.arange(h) + 0.5) / h,
            indexing="ij"), axis=-1)

    def sample_params(self, rng: np.random.Generator) -> np.ndarray:
        # per blob: centre (3), width, amplitude, all in [0, 1]
        return rng.uniform(0.0, 1.0, size=(self.spec.blob_count, 5))

    def volume(self, params: np.ndarray) -> np.ndarray:
        keep = np.ones(self.grid.shape[:3])
        for cz, cx, cy, width, amp in params:
            centre = np.array([0.15 + 0.7 * cz, 0.15 + 0.7 * cx, 0.15 + 0.7 * cy])
            sigma = 0.1 + 0.15 * width
            g = np.exp(-np.sum((self.grid - centre) ** 2, axis=-1) / (2 * sigma ** 2))
            keep *= 1.0 - (0.5 + 0.5 * amp) * g
        return 1.0 - keep

    def amplitudes(self, params: np.ndarray) -> np.ndarray:
        return 0.1 + self.mixing @ params.reshape(-1)

    def eeg_window(self, params: np.ndarray, window_length: int) -> np.ndarray:
        n = np.arange(window_length)
        amps = self.amplitudes(params)  # (C, K)
        waves = np.cos(2 * np.pi * self.bins[None, :, None] * n / window_length
                       + self.phases[..., None])
        return np.einsum("ck,ckn->cn", amps, waves)


def generate_synthetic(spec: SyntheticSpec, root, name: str = "synthetic") -> DatasetManifest:
    """Write a synthetic paired dataset under ``root`` and return its manifest.

    The manifest is written last, after every tensor file.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    forward = BlobForwardModel(spec, rng)
    _, c = spec.geometry[:2]
    entries = []
    for s in range(spec.n_subjects):
        sid = f"sub-{s:02d}"
        meta = RecordingMeta(spec.sampling_rate_hz, spec.tr_seconds, c, sid)
        sub_rng = np.random.default_rng([spec.seed, s])
        sub_dir = root / sid
        sub_dir.mkdir(exist_ok=True)
        windows = []
        for v in range(spec.volumes_per_subject):
            params = forward.sample_params(sub_rng)
            write_tensor(sub_dir / f"fmri_{v}.e2f", forward.volume(params))
            windows.append(forward.eeg_window(params, meta.window_length))
        eeg = np.concatenate(windows, axis=1)
        if spec.noise_std > 0:
            eeg = eeg + sub_rng.normal(0.0, spec.noise_std, size=eeg.shape)
        write_tensor(sub_dir / "eeg.e2f", eeg)
        entries.append({
            "subject_id": sid,
            "eeg_path": f"{sid}/eeg.e2f",
            "fmri_path": f"{sid}/fmri_{{index}}.e2f",
            "n_volumes": spec.volumes_per_subject,
            "meta": meta.to_dict(),
        })
    manifest = DatasetManifest(name, entries, asdict(spec.preprocess_config),
                               {"min": 0.0, "max": 1.0}, root)
    manifest.eeg_norm = dataset_eeg_extrema(manifest)
    manifest.save()
    return manifest


def dataset_eeg_extrema(manifest: DatasetManifest) -> dict:
    """Global EEG feature extrema over every subject, scanned one subject at a time."""
    lo, hi = np.inf, -np.inf
    for sid in manifest.subject_ids:
        s_lo, s_hi = eeg_extrema([x for x, _ in subject_pairs_raw(manifest, sid)])
        lo, hi = min(lo, s_lo), max(hi, s_hi)
    if hi == lo:
        raise ValueError("degenerate dataset")
    return {"min": float(lo), "max": float(hi)}


def export_preprocessed(manifest: DatasetManifest, out_dir) -> Path:
    """Write stacked preprocessed inputs/targets per subject and a manifest echo."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = []
    for sid in manifest.subject_ids:
        pairs = load_pairs(manifest, [sid])
        x, y = stack_pairs(pairs)
        (out_dir / sid).mkdir(exist_ok=True)
        write_tensor(out_dir / sid / "eeg_samples.e2f", x)
        write_tensor(out_dir / sid / "fmri_targets.e2f", y)
        subjects.append({
            "subject_id": sid,
            "eeg_samples_path": f"{sid}/eeg_samples.e2f",
            "fmri_targets_path": f"{sid}/fmri_targets.e2f",
            "volume_indices": [p[0].volume_index for p in pairs],
        })
    doc = {"name": manifest.name, "source": str(manifest.root.resolve()),
           "preprocess": manifest.preprocess, "eeg_norm": manifest.eeg_norm,
           "subjects": subjects}
    path = out_dir / "preprocessed.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path
