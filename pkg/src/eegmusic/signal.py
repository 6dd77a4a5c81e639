"""Differential-entropy features of EEG trials.

Each trial is cut into overlapping 3 s segments. Every segment is split into
three non-overlapping 1 s Hann-windowed frames; for each frame and rhythm band
the DFT power inside the band gives a variance estimate, and the Gaussian
differential entropy ``0.5 * ln(2*pi*e*var)`` of that variance is the feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import get_window

VARIANCE_FLOOR = 1e-10


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class BandSpec:
    name: str
    low_hz: float
    high_hz: float

    def check(self, sample_rate: float) -> None:
        if not 0 < self.low_hz < self.high_hz <= sample_rate / 2:
            raise SignalError(
                f"band {self.name} [{self.low_hz}, {self.high_hz}) Hz is outside (0, {sample_rate / 2}] "
                f"for sample rate {sample_rate} Hz")


# gamma keeps the printed 31-50 Hz limits, leaving 30-31 Hz uncovered
DEFAULT_BANDS = (
    BandSpec("theta", 4.0, 7.0),
    BandSpec("alpha", 7.0, 13.0),
    BandSpec("beta", 13.0, 30.0),
    BandSpec("gamma", 31.0, 50.0),
)


@dataclass
class Recording:
    subject_id: int
    trial_id: int
    sample_rate: float
    data: np.ndarray  # channels x samples
    valence: float
    arousal: float

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.sample_rate <= 0:
            raise SignalError(f"sample_rate must be positive, got {self.sample_rate}")
        for name in ("valence", "arousal"):
            r = getattr(self, name)
            if not 1.0 <= r <= 9.0:
                raise SignalError(f"{name} rating {r} outside [1, 9]")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def duration_s(self) -> float:
        return self.data.shape[1] / self.sample_rate


@dataclass
class FeatureMatrix:
    """Channels x (bands * windows) DE values for one segment, band-major."""

    segment_index: int
    values: np.ndarray
    band_names: tuple[str, ...] = field(default=tuple(b.name for b in DEFAULT_BANDS))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def segment_count(n_samples: int, sample_rate: float, window_s: float = 3.0, hop_s: float = 1.0) -> int:
    win = int(round(window_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    if win > n_samples:
        raise SignalError(f"recording of {n_samples} samples is shorter than one {window_s} s window")
    return (n_samples - win) // hop + 1


def segment(recording: Recording, window_s: float = 3.0, hop_s: float = 1.0) -> list[np.ndarray]:
    """Overlapping segments in temporal order, as views of the recording data."""
    rate = recording.sample_rate
    n = segment_count(recording.data.shape[1], rate, window_s, hop_s)
    win = int(round(window_s * rate))
    hop = int(round(hop_s * rate))
    return [recording.data[:, i * hop:i * hop + win] for i in range(n)]


def _frame_power(frames: np.ndarray, sample_rate: float) -> tuple[np.ndarray, np.ndarray]:
    """One-sided variance density per DFT bin for frames along the last axis."""
    n = frames.shape[-1]
    w = get_window("hann", n)  # periodic form
    spec = np.fft.rfft(frames * w, axis=-1)
    power = np.abs(spec) ** 2
    scale = np.full(power.shape[-1], 2.0)
    scale[0] = 1.0
    if n % 2 == 0:
        scale[-1] = 1.0
    power = power * scale / (n * np.sum(w * w))
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    return power, freqs


def _band_masks(freqs: np.ndarray, bands: Sequence[BandSpec]) -> np.ndarray:
    return np.stack([(freqs >= b.low_hz) & (freqs < b.high_hz) for b in bands])


def band_variance(segment_channel: np.ndarray, band: BandSpec, sample_rate: float,
                  n_windows: int = 3) -> np.ndarray:
    """Per-window variance of ``segment_channel`` restricted to ``band``."""
    band.check(sample_rate)
    x = np.asarray(segment_channel, dtype=np.float64)
    frame = int(round(sample_rate))
    if x.shape[-1] != n_windows * frame:
        raise SignalError(f"segment has {x.shape[-1]} samples, expected {n_windows * frame}")
    power, freqs = _frame_power(x.reshape(n_windows, frame), sample_rate)
    mask = _band_masks(freqs, [band])[0]
    return np.maximum(power[:, mask].sum(axis=-1), VARIANCE_FLOOR)


def differential_entropy(variance):
    """Gaussian differential entropy in nats. Accepts scalars or arrays."""
    v = np.asarray(variance, dtype=np.float64)
    if np.any(~(v >= VARIANCE_FLOOR)):
        raise SignalError(f"variance below floor {VARIANCE_FLOOR}: min={v.min()}")
    h = 0.5 * np.log(2.0 * math.pi * math.e * v)
    return float(h) if h.ndim == 0 else h


def extract_features(recording: Recording, bands: Sequence[BandSpec] = DEFAULT_BANDS,
                     window_s: float = 3.0, hop_s: float = 1.0,
                     per_window: bool = True) -> list[FeatureMatrix]:
    """DE features for every segment of ``recording``.

    With ``per_window=False`` the three window values of each band are averaged,
    giving 4 features per channel instead of 12.
    """
    rate = recording.sample_rate
    for b in bands:
        b.check(rate)
    frame = int(round(rate))
    n_windows = int(round(window_s))
    if abs(window_s - n_windows) > 1e-9 or n_windows < 1:
        raise SignalError(f"window_s must be a whole number of seconds, got {window_s}")
    segs = segment(recording, window_s, hop_s)
    if not segs:
        return []
    stack = np.stack(segs)  # S x C x win
    S, C, _ = stack.shape
    frames = stack[:, :, :n_windows * frame].reshape(S, C, n_windows, frame)
    power, freqs = _frame_power(frames, rate)
    masks = _band_masks(freqs, bands)  # B x F
    var = np.einsum("scwf,bf->scbw", power, masks.astype(np.float64))
    var = np.maximum(var, VARIANCE_FLOOR)
    de = differential_entropy(var)  # S x C x B x W
    if not per_window:
        de = de.mean(axis=-1, keepdims=True)
    names = tuple(b.name for b in bands)
    return [FeatureMatrix(i, de[i].reshape(C, -1), names) for i in range(S)]


def feature_array(recording: Recording, **kwargs) -> np.ndarray:
    """Stacked features, segments x channels x features."""
    return np.stack([fm.values for fm in extract_features(recording, **kwargs)])
