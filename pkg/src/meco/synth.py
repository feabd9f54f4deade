"""Synthetic paired audio-motion dataset generator.

Each sample is a beat-locked gesture clip plus a waveform with click
impulses at the same beat times. Joint angles hold still briefly at every
beat and stroke between beats with a raised-cosine profile, so the mean
angular speed has a clean local minimum at each annotated beat: the beat
extractor in `metrics` recovers the annotations, and an audio->motion model
has a real correlation to learn. Per-style sinusoids in disjoint frequency
bands ride on the strokes (enveloped to vanish at beats) so styles are
separable from joint-angle spectra.

Also provides the deterministic pseudo-English byte corpus used to
pretrain the miniature text model.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .motion import DEFAULT_FPS, MotionClip, default_part_masks, pose_dim
from .motion_io import save_motion, save_wav, write_manifest
from .rotations import rot6d_from_matrix, rotation_about_axis

STYLE_BASE_HZ = 4.5
STYLE_SPACING_HZ = 3.0
STYLE_JITTER_HZ = 0.5


@dataclass
class SynthConfig:
    count: int = 64
    min_duration: float = 4.0  # seconds
    max_duration: float = 8.0
    n_joints: int = 16
    style_count: int = 3
    frame_rate: float = DEFAULT_FPS
    sample_rate: int = 16000
    beat_spacing: tuple[float, float] = (0.4, 1.2)
    hold_halfwidth: float = 0.1  # seconds of stillness on each side of a beat
    stroke_amp: tuple[float, float] = (0.35, 0.8)  # radians
    style_amp: float = 0.12
    click_freq: float = 1000.0
    click_duration: float = 0.06
    click_amp: float = 0.7
    noise_amp: float = 0.01

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.min_duration <= 0 or self.max_duration < self.min_duration:
            raise ConfigError(
                f"bad duration range [{self.min_duration}, {self.max_duration}]"
            )
        if self.n_joints < 3:
            raise ConfigError(f"need at least 3 joints, got {self.n_joints}")
        if self.style_count < 1:
            raise ConfigError(f"style_count must be >= 1, got {self.style_count}")
        top = STYLE_BASE_HZ + STYLE_SPACING_HZ * (self.style_count - 1) + STYLE_JITTER_HZ
        if top > self.frame_rate / 2.0 - 1.0:
            raise ConfigError(
                f"{self.style_count} styles need motion bandwidth {top:.1f} Hz, "
                f"frame rate {self.frame_rate} supports at most "
                f"{self.frame_rate / 2.0 - 1.0:.1f} Hz"
            )
        if self.sample_rate < 8000:
            raise ConfigError(f"sample_rate must be >= 8 kHz, got {self.sample_rate}")


@dataclass(frozen=True)
class PairedSample:
    motion: MotionClip
    waveform: np.ndarray
    sample_rate: int
    beat_times: np.ndarray
    style_id: int
    sample_id: str = ""

    def __post_init__(self):
        wav = np.asarray(self.waveform, dtype=np.float32)
        beats = np.asarray(self.beat_times, dtype=np.float64)
        wav.flags.writeable = False
        beats.flags.writeable = False
        object.__setattr__(self, "waveform", wav)
        object.__setattr__(self, "beat_times", beats)
        motion_dur = self.motion.duration
        audio_dur = wav.size / self.sample_rate
        if abs(motion_dur - audio_dur) > 1.0 / self.motion.frame_rate:
            raise DataError(
                f"motion ({motion_dur:.4f}s) and audio ({audio_dur:.4f}s) durations "
                f"differ by more than one frame"
            )


def style_band(style_id: int) -> tuple[float, float]:
    center = STYLE_BASE_HZ + STYLE_SPACING_HZ * style_id
    return center - STYLE_JITTER_HZ, center + STYLE_JITTER_HZ


def _beat_schedule(rng: np.random.Generator, duration: float, spacing: tuple[float, float]) -> np.ndarray:
    beats = []
    t = float(rng.uniform(*spacing))
    while t < duration - 0.3:
        beats.append(t)
        t += float(rng.uniform(*spacing))
    return np.asarray(beats)


def _keypose_track(
    rng: np.random.Generator,
    frame_times: np.ndarray,
    beats: np.ndarray,
    duration: float,
    amp: float,
    hold: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One joint's stroke angle and its stroke-phase envelope.

    The angle holds a keypose for `hold` seconds on each side of every beat
    and moves between keyposes with a raised cosine, so the derivative is
    exactly zero at each beat. The envelope sin^2(pi*u) is zero with zero
    slope at segment ends; style wobble multiplied by it also vanishes at
    beats.
    """
    bounds = np.concatenate([[0.0], beats, [duration]])
    is_beat = np.zeros(len(bounds), dtype=bool)
    is_beat[1:-1] = True
    poses = rng.uniform(-amp, amp, size=len(bounds))
    angle = np.zeros_like(frame_times)
    env = np.zeros_like(frame_times)
    for s in range(len(bounds) - 1):
        t0 = bounds[s] + (hold if is_beat[s] else 0.0)
        t1 = bounds[s + 1] - (hold if is_beat[s + 1] else 0.0)
        sel = (frame_times >= bounds[s]) & (frame_times < bounds[s + 1])
        if not sel.any():
            continue
        t = frame_times[sel]
        u = np.clip((t - t0) / max(t1 - t0, 1e-9), 0.0, 1.0)
        angle[sel] = poses[s] + (poses[s + 1] - poses[s]) * 0.5 * (1.0 - np.cos(np.pi * u))
        env[sel] = np.sin(np.pi * u) ** 2
    angle[frame_times >= bounds[-1]] = poses[-1]
    return angle, env


def generate_sample(rng: np.random.Generator, config: SynthConfig, style_id: int) -> tuple:
    duration = float(rng.uniform(config.min_duration, config.max_duration))
    n_frames = int(round(duration * config.frame_rate))
    duration = n_frames / config.frame_rate
    frame_times = np.arange(n_frames) / config.frame_rate
    beats = _beat_schedule(rng, duration, config.beat_spacing)

    lo, hi = style_band(style_id)
    frames = np.zeros((n_frames, pose_dim(config.n_joints)), dtype=np.float64)

    # root features: slow, low-amplitude sway in the character-local frame
    phases = rng.uniform(0, 2 * np.pi, size=4)
    frames[:, 0] = 0.04 * np.sin(2 * np.pi * 0.25 * frame_times + phases[0])
    frames[:, 1] = 0.03 * np.sin(2 * np.pi * 0.20 * frame_times + phases[1])
    frames[:, 2] = 0.03 * np.sin(2 * np.pi * 0.17 * frame_times + phases[2])
    frames[:, 3] = 0.9 + 0.02 * np.sin(2 * np.pi * 0.15 * frame_times + phases[3])

    for j in range(config.n_joints):
        amp = float(rng.uniform(*config.stroke_amp))
        angle, env = _keypose_track(rng, frame_times, beats, duration, amp, config.hold_halfwidth)
        freq = float(rng.uniform(lo, hi))
        phase = float(rng.uniform(0, 2 * np.pi))
        wobble = config.style_amp * env * np.sin(2 * np.pi * freq * frame_times + phase)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rots = rotation_about_axis(axis, angle + wobble)
        frames[:, 4 + 6 * j : 4 + 6 * (j + 1)] = rot6d_from_matrix(rots)

    n_samples = int(round(duration * config.sample_rate))
    wav = rng.normal(0.0, config.noise_amp, size=n_samples)
    click_n = int(round(config.click_duration * config.sample_rate))
    click_t = np.arange(click_n) / config.sample_rate
    click = config.click_amp * np.sin(2 * np.pi * config.click_freq * click_t)
    click *= np.hanning(click_n)
    for b in beats:
        start = int(round(b * config.sample_rate))
        stop = min(start + click_n, n_samples)
        wav[start:stop] += click[: stop - start]

    clip = MotionClip(
        frames=frames.astype(np.float32),
        frame_rate=config.frame_rate,
        part_masks=default_part_masks(config.n_joints),
    )
    return clip, wav.astype(np.float32), beats


def synth_generate(seed: int, config: SynthConfig) -> list[PairedSample]:
    """Deterministic dataset: same (seed, config) gives identical bytes."""
    samples = []
    for i in range(config.count):
        rng = np.random.default_rng([seed, i])
        style_id = i % config.style_count
        clip, wav, beats = generate_sample(rng, config, style_id)
        samples.append(
            PairedSample(
                motion=clip,
                waveform=wav,
                sample_rate=config.sample_rate,
                beat_times=beats,
                style_id=style_id,
                sample_id=f"synth_{seed}_{i:04d}",
            )
        )
    return samples


def save_dataset(samples: list[PairedSample], out_dir: str) -> str:
    """Write motion/audio files plus the JSONL manifest; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for s in samples:
        motion_path = os.path.join(out_dir, f"{s.sample_id}.mecm")
        audio_path = os.path.join(out_dir, f"{s.sample_id}.wav")
        save_motion(motion_path, s.motion)
        save_wav(audio_path, s.waveform, s.sample_rate)
        records.append(
            {
                "id": s.sample_id,
                "motion_path": os.path.basename(motion_path),
                "audio_path": os.path.basename(audio_path),
                "beat_times": [float(b) for b in s.beat_times],
                "style_id": s.style_id,
            }
        )
    manifest = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(manifest, records)
    return manifest


def load_dataset(manifest_path: str) -> list[PairedSample]:
    from .motion_io import load_motion, load_wav, read_manifest

    base = os.path.dirname(manifest_path)
    samples = []
    for rec in read_manifest(manifest_path):
        clip = load_motion(os.path.join(base, rec["motion_path"]))
        wav, sr = load_wav(os.path.join(base, rec["audio_path"]))
        samples.append(
            PairedSample(
                motion=clip,
                waveform=wav,
                sample_rate=sr,
                beat_times=np.asarray(rec["beat_times"], dtype=np.float64),
                style_id=int(rec["style_id"]),
                sample_id=str(rec["id"]),
            )
        )
    return samples


_WORDS = (
    "the a this that every some any one time day hand voice sound motion "
    "gesture speaker talker crowd room stage light signal beat rhythm pace "
    "phrase word sentence story answer question idea thought plan walk step "
    "turn wave nod reach point lift drop hold swing lean pause start stop "
    "keep make take give show tell ask move raise lower open close follow "
    "lead meet join leave find lose bright quiet loud slow quick steady "
    "gentle sharp smooth heavy light long short high low early late near far "
    "warm cool clear plain simple small large old new good fine calm busy"
).split()

_CONNECTORS = ("and", "but", "so", "then", "while", "because", "although")

_NAMES = (
    "arden blake casey devon ellis flynn harper indigo jordan kerry lane "
    "morgan noel oakley parker quinn reese sage taylor umber vesper winter"
).split()


def make_text_corpus(seed: int, n_bytes: int = 1_200_000) -> bytes:
    """Deterministic pseudo-English prose for byte-level pretraining.

    Paragraphs reuse a small cast of names and repeat quoted phrases
    verbatim, and lists enumerate numbered items, so a byte model has
    long-range copying structure to learn, not just local statistics.
    """
    if n_bytes < 1:
        raise ConfigError(f"n_bytes must be positive, got {n_bytes}")
    rng = np.random.default_rng(seed)

    def words(n: int) -> str:
        return " ".join(_WORDS[int(k)] for k in rng.integers(0, len(_WORDS), size=n))

    out: list[str] = []
    size = 0
    while size < n_bytes:
        kind = rng.random()
        if kind < 0.3:
            # dialogue paragraph: one speaker, a phrase said then repeated
            name = _NAMES[int(rng.integers(0, len(_NAMES)))]
            phrase = words(int(rng.integers(3, 7)))
            para = []
            for _ in range(int(rng.integers(2, 5))):
                para.append(f"{name} said: '{phrase}'. ")
                filler = words(int(rng.integers(4, 10))).capitalize()
                para.append(f"{filler}. ")
            block = "".join(para) + f"So {name} said '{phrase}' once more.\n\n"
        elif kind < 0.5:
            # numbered list with a recurring head word
            head = _WORDS[int(rng.integers(0, len(_WORDS)))]
            items = [f"{i + 1}. the {head} {words(int(rng.integers(2, 5)))}.\n"
                     for i in range(int(rng.integers(3, 7)))]
            block = f"Notes on the {head}:\n" + "".join(items) + "\n"
        elif kind < 0.75:
            # aligned expansions: spell a word, or dot-separate a code;
            # target position i reads from source position ~c*i
            if rng.random() < 0.5:
                word = _WORDS[int(rng.integers(0, len(_WORDS)))]
                block = f"the word '{word}' is spelt {'-'.join(word)}.\n"
            else:
                code = "".join(
                    chr(ord("a") + int(k)) for k in rng.integers(0, 26, size=int(rng.integers(4, 9)))
                )
                block = f"code {code} reads as {'.'.join(code)}.\n"
        else:
            # plain prose with a connector and a recurring pair of names
            a = _NAMES[int(rng.integers(0, len(_NAMES)))]
            b = _NAMES[int(rng.integers(0, len(_NAMES)))]
            sentences = []
            for _ in range(int(rng.integers(3, 6))):
                mid = _CONNECTORS[int(rng.integers(0, len(_CONNECTORS)))]
                sentences.append(
                    f"{a.capitalize()} {words(int(rng.integers(2, 6)))} {mid} "
                    f"{b} {words(int(rng.integers(2, 6)))}. "
                )
            block = "".join(sentences) + "\n\n"
        out.append(block)
        size += len(block)
    return "".join(out).encode("ascii")[:n_bytes]
