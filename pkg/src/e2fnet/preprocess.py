"""EEG spectrogram and fMRI volume preprocessing.

Raw EEG (electrodes x samples) is cut into non-overlapping windows of one
TR each, every window is reduced to per-electrode FFT magnitudes, and
``temporal_context`` consecutive windows are stacked into one model input
that is paired with the fMRI volume acquired at the last window.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import fft as spfft


@dataclass(frozen=True)
class RecordingMeta:
    sampling_rate_hz: float
    tr_seconds: float
    n_electrodes: int
    subject_id: str = "sub-00"

    def __post_init__(self):
        if self.sampling_rate_hz <= 0 or self.tr_seconds <= 0:
            raise ValueError("sampling rate and TR must be positive")
        if self.n_electrodes < 1:
            raise ValueError("need at least one electrode")
        if self.window_length < 2:
            raise ValueError("window length must be at least 2 samples")

    @property
    def window_length(self) -> int:
        return int(round(self.sampling_rate_hz * self.tr_seconds))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RawEegRecording:
    meta: RecordingMeta
    samples: np.ndarray  # (C, L)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.meta.n_electrodes:
            raise ValueError(
                f"expected samples of shape ({self.meta.n_electrodes}, L), "
                f"got {self.samples.shape}"
            )


@dataclass
class EegSpectrogramSample:
    values: np.ndarray  # (T, C, F)
    subject_id: str
    volume_index: int


@dataclass
class FmriVolume:
    values: np.ndarray  # (D, W, H)
    subject_id: str = ""
    volume_index: int = 0


@dataclass(frozen=True)
class PreprocessConfig:
    temporal_context: int = 20
    cutoff_bins: int = 250
    remove_dc: bool = True
    alignment: str = "causal-end"

    def __post_init__(self):
        if self.temporal_context < 1 or self.cutoff_bins < 1:
            raise ValueError("temporal_context and cutoff_bins must be positive")
        if self.alignment != "causal-end":
            raise ValueError(f"unsupported alignment {self.alignment!r}")
        if self.feature_dim < 1:
            raise ValueError("no frequency features left after DC removal")

    @property
    def feature_dim(self) -> int:
        return self.cutoff_bins - (1 if self.remove_dc else 0)


def segment_windows(recording: RawEegRecording) -> list[np.ndarray]:
    """Split a recording into non-overlapping ``C x window_length`` windows.

    The trailing remainder shorter than one window is dropped.
    """
    n = recording.meta.window_length
    length = recording.samples.shape[1]
    if length < n:
        raise ValueError("recording too short")
    return [recording.samples[:, i * n:(i + 1) * n] for i in range(length // n)]


def fft_features(window: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Per-electrode DFT magnitudes, truncated to the first ``cutoff_bins`` bins."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] < config.cutoff_bins:
        raise ValueError("window too short for cutoff")
    mags = np.abs(np.fft.fft(window, axis=-1))[..., :config.cutoff_bins]
    if config.remove_dc:
        mags = mags[..., 1:]
    return mags


def stack_temporal_context(
    windows_features: Sequence[np.ndarray],
    config: PreprocessConfig = PreprocessConfig(),
    subject_id: str = "",
) -> list[EegSpectrogramSample]:
    """Stack ``T`` consecutive windows; sample ``j`` targets volume ``j + T - 1``."""
    t = config.temporal_context
    if len(windows_features) < t:
        raise ValueError("insufficient temporal context")
    stacked = np.stack(windows_features)
    return [
        EegSpectrogramSample(stacked[j:j + t].copy(), subject_id, j + t - 1)
        for j in range(len(windows_features) - t + 1)
    ]


def eeg_extrema(samples: Sequence[EegSpectrogramSample]) -> tuple[float, float]:
    if not samples:
        raise ValueError("empty dataset")
    lo = min(float(s.values.min()) for s in samples)
    hi = max(float(s.values.max()) for s in samples)
    return lo, hi


def apply_eeg_norm(
    samples: Sequence[EegSpectrogramSample], extrema: tuple[float, float]
) -> list[EegSpectrogramSample]:
    lo, hi = extrema
    if hi == lo:
        raise ValueError("degenerate dataset")
    scale = hi - lo
    return [
        EegSpectrogramSample((s.values - lo) / scale, s.subject_id, s.volume_index)
        for s in samples
    ]


def normalize_eeg_global(
    samples: Sequence[EegSpectrogramSample],
) -> tuple[list[EegSpectrogramSample], tuple[float, float]]:
    """Min-max scale every sample with the extrema of the whole dataset.

    Returns the scaled samples and the ``(min, max)`` pair so the same map
    can be applied to held-out data.
    """
    extrema = eeg_extrema(samples)
    return apply_eeg_norm(samples, extrema), extrema


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def normalize_fmri_per_volume(volume: FmriVolume) -> FmriVolume:
    values = np.asarray(volume.values, dtype=np.float64)
    return FmriVolume(_minmax(values), volume.subject_id, volume.volume_index)


def dct_downsample_volume(volume: np.ndarray, target_dims: Sequence[int]) -> np.ndarray:
    """Downsample a volume by truncating its orthonormal 3-D DCT-II spectrum.

    The kept low-frequency block is inverted with a DCT-III at the target
    size and the result is min-max normalized.
    """
    volume = np.asarray(volume, dtype=np.float64)
    target = tuple(int(d) for d in target_dims)
    if len(target) != volume.ndim:
        raise ValueError("target rank does not match volume rank")
    if any(t > s for t, s in zip(target, volume.shape)):
        raise ValueError("cannot upsample")
    if any(t < 1 for t in target):
        raise ValueError("target dims must be positive")
    coeffs = spfft.dctn(volume, type=2, norm="ortho")
    kept = coeffs[tuple(slice(0, t) for t in target)]
    return _minmax(spfft.idctn(kept, type=2, norm="ortho"))


def build_pairs(
    recording: RawEegRecording,
    volumes: Sequence[FmriVolume],
    config: PreprocessConfig = PreprocessConfig(),
) -> list[tuple[EegSpectrogramSample, FmriVolume]]:
    """Unnormalized EEG samples paired with per-volume normalized fMRI targets.

    Global EEG normalization needs the whole dataset, so it is left to the
    caller (see :func:`normalize_eeg_global`).
    """
    windows = segment_windows(recording)
    feats = [fft_features(w, config) for w in windows]
    samples = stack_temporal_context(feats, config, recording.meta.subject_id)
    if len(volumes) < len(windows):
        raise ValueError(
            f"alignment mismatch: {len(windows)} windows but {len(volumes)} volumes"
        )
    return [
        (s, normalize_fmri_per_volume(volumes[s.volume_index]))
        for s in samples
    ]
