"""Discrete audio units at 50 units/s: framewise spectral features plus a
seeded k-means codebook.

Features per 20 ms hop (D=10): log frame energy, spectral centroid
normalized by Nyquist, and 8 log band energies over linear bands. All
computations are deterministic; tokenization assigns each frame to its
nearest center with ties going to the lowest index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, NumericError
from . import serial

UNIT_RATE = 50  # units per second
FEATURE_DIM = 10
N_BANDS = 8
UNITS_MAGIC = b"MECA"
UNITS_VERSION = 1
DEFAULT_LOG_FLOOR = float(np.log(1e-10))


@dataclass(frozen=True)
class AudioFeatureFrames:
    frames: np.ndarray  # (T_a, FEATURE_DIM) float64
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 2 or (arr.size and arr.shape[1] != FEATURE_DIM):
            raise ConfigError(f"features must be (T, {FEATURE_DIM}), got {arr.shape}")
        if arr.size and not np.isfinite(arr).all():
            raise NumericError("non-finite audio features")
        arr.flags.writeable = False
        object.__setattr__(self, "frames", arr)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class UnitCodebook:
    centers: np.ndarray  # (K_a, FEATURE_DIM)

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ConfigError(f"codebook needs K_a >= 2 centers, got shape {c.shape}")
        if not np.isfinite(c).all():
            raise NumericError("non-finite codebook centers")
        c.flags.writeable = False
        object.__setattr__(self, "centers", c)

    @property
    def n_units(self) -> int:
        return self.centers.shape[0]


def extract_features(
    waveform: np.ndarray, sample_rate: int, log_floor: float = DEFAULT_LOG_FLOOR
) -> AudioFeatureFrames:
    """T_a = floor(duration * 50) frames; silence maps every log energy to
    exactly `log_floor`."""
    if sample_rate < 8000:
        raise ConfigError(f"sample_rate must be >= 8 kHz, got {sample_rate}")
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ConfigError(f"waveform must be mono 1-D, got shape {x.shape}")
    n_frames = (x.size * UNIT_RATE) // sample_rate
    if n_frames == 0:
        return AudioFeatureFrames(frames=np.zeros((0, FEATURE_DIM)), sample_rate=sample_rate)
    floor = float(np.exp(log_floor))
    feats = np.empty((n_frames, FEATURE_DIM), dtype=np.float64)
    nyquist = sample_rate / 2.0
    for i in range(n_frames):
        a = (i * sample_rate) // UNIT_RATE
        b = ((i + 1) * sample_rate) // UNIT_RATE
        frame = x[a:b]
        energy = float(np.mean(frame**2))
        feats[i, 0] = np.log(max(energy, floor))
        spec = np.abs(np.fft.rfft(frame)) ** 2
        freqs = np.fft.rfftfreq(frame.size, d=1.0 / sample_rate)
        total = spec.sum()
        feats[i, 1] = float((freqs * spec).sum() / total / nyquist) if total > floor else 0.0
        edges = np.linspace(0.0, nyquist, N_BANDS + 1)
        band_idx = np.minimum(np.searchsorted(edges, freqs, side="right") - 1, N_BANDS - 1)
        for k in range(N_BANDS):
            band = spec[band_idx == k]
            mean_p = float(band.mean()) if band.size else 0.0
            feats[i, 2 + k] = np.log(max(mean_p, floor))
    return AudioFeatureFrames(frames=feats, sample_rate=sample_rate)


def _assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin over ||p||^2 - 2 p.c + ||c||^2; first index wins ties
    d2 = (points**2).sum(axis=1, keepdims=True) - 2.0 * points @ centers.T + (
        centers**2
    ).sum(axis=1)
    return np.argmin(d2, axis=1)


def fit_units(
    feature_sets: list[AudioFeatureFrames],
    n_units: int = 100,
    seed: int = 0,
    max_iters: int = 50,
    return_history: bool = False,
):
    """Seeded Lloyd k-means over pooled frames.

    Initial centers are distinct frames chosen by the seeded generator;
    empty clusters keep their previous center. Stops when assignments are
    stable. The objective history (mean squared distance) is non-increasing.
    """
    if not feature_sets:
        raise ConfigError("empty feature corpus")
    points = np.concatenate([fs.frames for fs in feature_sets if fs.n_frames], axis=0)
    if points.size == 0:
        raise ConfigError("feature corpus has no frames")
    distinct = np.unique(points, axis=0)
    if n_units > distinct.shape[0]:
        raise ConfigError(
            f"K_a={n_units} exceeds the {distinct.shape[0]} distinct feature vectors"
        )
    rng = np.random.default_rng(seed)
    centers = distinct[rng.permutation(distinct.shape[0])[:n_units]].copy()
    history = []
    prev_assign = None
    for _ in range(max_iters):
        assign = _assign(points, centers)
        history.append(float(np.mean(((points - centers[assign]) ** 2).sum(axis=1))))
        for k in range(n_units):
            member = points[assign == k]
            if member.shape[0]:
                centers[k] = member.mean(axis=0)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
    codebook = UnitCodebook(centers=centers)
    return (codebook, history) if return_history else codebook


def tokenize_features(features: AudioFeatureFrames, codebook: UnitCodebook) -> np.ndarray:
    if features.n_frames == 0:
        return np.zeros(0, dtype=np.int64)
    return _assign(features.frames, codebook.centers).astype(np.int64)


def tokenize_audio(
    waveform: np.ndarray, sample_rate: int, codebook: UnitCodebook
) -> np.ndarray:
    """Unit ids at 50/s: len = floor(duration * 50)."""
    return tokenize_features(extract_features(waveform, sample_rate), codebook)


def save_unit_codebook(path: str, codebook: UnitCodebook) -> None:
    header = struct.pack("<III", UNITS_VERSION, codebook.n_units, FEATURE_DIM)
    serial.write_checked(path, UNITS_MAGIC, header, {"centers": codebook.centers})


def load_unit_codebook(path: str) -> UnitCodebook:
    body, off = serial.read_checked(path, UNITS_MAGIC)
    version, n_units, dim = struct.unpack("<III", body[:12])
    if version != UNITS_VERSION:
        raise FormatError(f"unsupported unit codebook version {version}", off)
    arrays = serial.unpack_arrays(body[12:], off + 12)
    centers = arrays["centers"]
    if centers.shape != (n_units, dim):
        raise FormatError(
            f"centers shape {centers.shape} disagrees with header ({n_units}, {dim})", off
        )
    return UnitCodebook(centers=centers)
