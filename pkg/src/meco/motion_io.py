"""Motion file format, dataset manifest, and wave I/O.

Motion file ("MECM"): little-endian binary
    magic "MECM" | u32 version=1 | u32 J | u32 frame_count | f32 frame_rate
    | frame_count x (4 + 6J) f32 frames.

Manifest: JSON lines, one record per sample:
    {"id", "motion_path", "audio_path", "beat_times", "style_id"}.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
from scipy.io import wavfile

from .errors import DataError, FormatError
from .motion import MotionClip, pose_dim
from .serial import read_struct

MOTION_MAGIC = b"MECM"
MOTION_VERSION = 1


def save_motion(path: str, clip: MotionClip) -> None:
    with open(path, "wb") as f:
        f.write(MOTION_MAGIC)
        f.write(struct.pack("<IIIf", MOTION_VERSION, clip.n_joints, clip.n_frames, clip.frame_rate))
        f.write(clip.frames.astype("<f4").tobytes())


def load_motion(path: str, part_masks: dict[str, np.ndarray] | None = None) -> MotionClip:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MOTION_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MOTION_MAGIC!r}", 0)
        version, n_joints, n_frames, frame_rate = read_struct(f, "<IIIf", "motion header")
        if version != MOTION_VERSION:
            raise FormatError(f"unsupported motion file version {version}", 4)
        dim = pose_dim(n_joints)
        want = n_frames * dim * 4
        data = f.read(want)
        if len(data) != want:
            raise FormatError(
                f"truncated frame data: wanted {want} bytes, got {len(data)}",
                20 + len(data),
            )
        extra = f.read(1)
        if extra:
            raise FormatError("trailing bytes after frame data", 20 + want)
    frames = np.frombuffer(data, dtype="<f4").reshape(n_frames, dim)
    return MotionClip(frames=frames.copy(), frame_rate=frame_rate, part_masks=part_masks)


def save_wav(path: str, waveform: np.ndarray, sample_rate: int) -> None:
    wavfile.write(path, sample_rate, np.asarray(waveform, dtype=np.float32))


def load_wav(path: str) -> tuple[np.ndarray, int]:
    """Mono float32 samples in [-1, 1]; accepts int16 or float32 PCM."""
    sample_rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise DataError(f"expected mono audio, got shape {data.shape} in {path}")
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float32)
    else:
        raise DataError(f"unsupported wav sample format {data.dtype} in {path}")
    return data, int(sample_rate)


def write_manifest(path: str, records: list[dict]) -> None:
    required = {"id", "motion_path", "audio_path", "beat_times", "style_id"}
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            missing = required - set(rec)
            if missing:
                raise DataError(f"manifest record missing fields {sorted(missing)}: {rec}")
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path: str) -> list[dict]:
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"bad manifest line {lineno} in {path}: {e}") from e
            records.append(rec)
    return records
