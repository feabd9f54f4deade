"""Inference-time sampling with example-adherence controls.

At each assistant position exactly one body part's motion range is legal;
everything else is masked to -inf. Tokens belonging to the active part's
example set get the bias/decay adjustment

    logits'_i = (logits_i + beta) * gamma^{t_i}

where t_i counts how often token i has already been sampled in this
generation. The adjustment runs on logits shifted so the in-range maximum
is >= 0 (a softmax-invariant shift); without it the multiplicative decay
would reward repetition whenever logits are negative. With beta=0 and
gamma=1 the adjustment is skipped entirely and in-range logits pass
through unchanged.

Long audio is generated in 4 s windows: each new window is prefilled with
the previous window's final three code triplets and its audio window is
advanced by 3.6 s so the prefilled codes line up with their audio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ContractViolationError, DataError, NumericError, ShapeError
from .motion import MotionClip
from .prompts import active_part, build_example_prompt, deinterleave_parts
from .seq_model import SeqModel
from .vocab import MOTION_PART_ORDER, VocabLayout

WINDOW_STEPS = 30
WINDOW_UNITS = 200
OVERLAP_STEPS = 3
HOP_STEPS = WINDOW_STEPS - OVERLAP_STEPS  # 27 new timesteps per extra window
HOP_UNITS = 180  # 4 s - 0.4 s of audio units

MODES = ("greedy", "temperature", "top_k")


@dataclass
class SamplerConfig:
    beta: float = 5.0
    gamma: float = 0.9
    mode: str = "greedy"
    temperature: float = 1.0
    top_k: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in ("temperature", "top_k") and self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.mode == "top_k" and self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")


@dataclass(frozen=True)
class RawExample:
    """Inference-side example that skips re-deduplication of the prompt."""

    tokens: dict[str, tuple[int, ...]]

    @property
    def source_token_set(self) -> dict[str, frozenset[int]]:
        return {p: frozenset(self.tokens.get(p, ())) for p in MOTION_PART_ORDER}

    def total_tokens(self) -> int:
        return sum(len(self.tokens.get(p, ())) for p in MOTION_PART_ORDER)

    def is_empty(self) -> bool:
        return self.total_tokens() == 0


def example_from_codes(
    codes_by_part: dict[str, np.ndarray], dedup: bool = True, seed: int = 0
):
    """User-provided example codes -> prompt example (dedup'd by default)."""
    if dedup:
        return build_example_prompt(codes_by_part, drop_rate=0.0, seed=seed)
    return RawExample(
        tokens={
            p: tuple(int(c) for c in np.asarray(codes_by_part.get(p, ()), dtype=np.int64))
            for p in MOTION_PART_ORDER
        }
    )


class SamplerState:
    """Occurrence counts over sampled motion tokens plus the per-part
    example token sets; owns the generation RNG."""

    def __init__(self, layout: VocabLayout, example, config: SamplerConfig):
        self.layout = layout
        self.counts: dict[int, int] = {}
        self.example_token_set: dict[str, frozenset[int]] = {
            part: frozenset(
                layout.motion_token(part, c) for c in example.tokens.get(part, ())
            )
            for part in MOTION_PART_ORDER
        }
        self.generator = torch.Generator().manual_seed(config.seed)

    def count(self, token: int) -> int:
        return self.counts.get(token, 0)

    def record(self, token: int) -> None:
        if self.layout.is_motion(token):
            self.counts[token] = self.counts.get(token, 0) + 1


def adjust_logits(
    logits: torch.Tensor,
    state: SamplerState,
    config: SamplerConfig,
    part: str,
) -> torch.Tensor:
    """Mask to the active part's range and apply the example bias/decay."""
    layout = state.layout
    logits = torch.as_tensor(logits)
    if logits.shape[-1] != layout.size:
        raise ShapeError(f"logits size {logits.shape[-1]} != vocab size {layout.size}")
    lo, hi = layout.motion_range(part)
    out = torch.full_like(logits, float("-inf"))
    out[lo:hi] = logits[lo:hi]
    if config.beta == 0.0 and config.gamma == 1.0:
        return out
    shift = max(0.0, -float(out[lo:hi].max()))
    out[lo:hi] = out[lo:hi] + shift
    for token in state.example_token_set[part]:
        t = state.count(token)
        out[token] = (out[token] + config.beta) * config.gamma**t
    return out


def select_token(adjusted: torch.Tensor, config: SamplerConfig, generator) -> int:
    """Greedy argmax (ties -> lowest id) or seeded stochastic sampling."""
    if not torch.isfinite(adjusted).any():
        raise ContractViolationError("all logits masked; no legal token at this position")
    if config.mode == "greedy":
        best = adjusted.max()
        return int(torch.nonzero(adjusted == best, as_tuple=True)[0][0])
    logits = adjusted / config.temperature
    if config.mode == "top_k":
        k = min(config.top_k, int(torch.isfinite(logits).sum()))
        thresh = torch.topk(logits, k).values[-1]
        logits = torch.where(logits >= thresh, logits, torch.full_like(logits, float("-inf")))
    probs = torch.softmax(logits, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator))


def sample_step(
    model: SeqModel,
    context: torch.Tensor,
    state: SamplerState,
    config: SamplerConfig,
    part: str,
) -> int:
    """One full-forward sampling step; updates occurrence counts."""
    with torch.no_grad():
        logits = model(torch.as_tensor(context, dtype=torch.long))[-1]
    token = select_token(adjust_logits(logits, state, config, part), config, state.generator)
    state.record(token)
    return token


@dataclass
class SegmentResult:
    tokens: np.ndarray  # (3 * WINDOW_STEPS,) vocab ids
    n_prefilled: int  # prefilled timesteps
    truncated: bool  # example tokens dropped oldest-first to fit context


def _fit_example(
    layout: VocabLayout, example, n_units: int, context: int
) -> tuple[list[int], bool]:
    """System-block vocab ids, truncated oldest-first to fit the context."""
    ids: list[int] = []
    for part in MOTION_PART_ORDER:
        ids.extend(layout.motion_token(part, c) for c in example.tokens.get(part, ()))
    overhead = 7 + n_units + 3 * WINDOW_STEPS  # specials + audio + assistant motion
    allowed = context - overhead
    if allowed < 0:
        raise ConfigError(
            f"context {context} cannot fit even an empty prompt ({overhead} tokens)"
        )
    if len(ids) <= allowed:
        return ids, False
    return ids[len(ids) - allowed :], True


def generate_segment(
    model: SeqModel,
    audio_units: np.ndarray,
    example,
    seed_triplets: list[tuple[int, int, int]],
    config: SamplerConfig,
    state: SamplerState | None = None,
) -> SegmentResult:
    """Generate one 4 s window: 30 interleaved (upper, hands, lower)
    triplets, the first len(seed_triplets) of them prefilled verbatim."""
    layout = model.layout
    units = np.asarray(audio_units, dtype=np.int64)
    if units.size != WINDOW_UNITS:
        raise ShapeError(f"segment needs exactly {WINDOW_UNITS} audio units, got {units.size}")
    if len(seed_triplets) > WINDOW_STEPS:
        raise DataError(
            f"{len(seed_triplets)} prefill timesteps exceed the {WINDOW_STEPS}-step window"
        )
    if state is None:
        state = SamplerState(layout, example, config)
    example_ids, truncated = _fit_example(layout, example, units.size, model.config.context)

    prefix: list[int] = [layout.bos, layout.special("SYS_BEGIN")]
    prefix.extend(example_ids)
    prefix.append(layout.special("SYS_END"))
    prefix.append(layout.special("USER_BEGIN"))
    prefix.extend(layout.audio_token(int(u)) for u in units)
    prefix.append(layout.special("USER_END"))
    prefix.append(layout.special("ASSIST_BEGIN"))
    assistant: list[int] = []
    for upper, hands, lower in seed_triplets:
        for part, code in zip(MOTION_PART_ORDER, (upper, hands, lower)):
            assistant.append(layout.motion_token(part, int(code)))

    with torch.no_grad():
        context = torch.tensor(prefix + assistant, dtype=torch.long)
        logits, cache = model(context, return_cache=True)
        logits = logits[-1]
        while len(assistant) < 3 * WINDOW_STEPS:
            part = active_part(len(assistant))
            token = select_token(
                adjust_logits(logits, state, config, part), config, state.generator
            )
            state.record(token)
            assistant.append(token)
            if len(assistant) == 3 * WINDOW_STEPS:
                break
            logits, cache = model(
                torch.tensor([token], dtype=torch.long), past=cache, return_cache=True
            )
            logits = logits[-1]
    return SegmentResult(
        tokens=np.asarray(assistant, dtype=np.int64),
        n_prefilled=len(seed_triplets),
        truncated=truncated,
    )


@dataclass
class GenerationLog:
    windows: list[dict] = field(default_factory=list)
    audio_padded: bool = False
    motion_timesteps: int = 0


def _silence_unit(unit_codebook, sample_rate: int) -> int:
    from .audio_units import tokenize_audio

    hop = max(1, sample_rate // 50)
    return int(tokenize_audio(np.zeros(hop, dtype=np.float32), sample_rate, unit_codebook)[0])


def initial_pose_triplet(pose: np.ndarray, codecs: dict) -> tuple[int, int, int]:
    """Tokenize a 4-frame hold of the pose into one (upper, hands, lower)
    code triplet for seeding."""
    from .rvq import tokenize_motion

    pose = np.asarray(pose, dtype=np.float32)
    clip = MotionClip(frames=np.repeat(pose[None], 4, axis=0))
    seqs = tokenize_motion(clip, codecs)
    return tuple(int(seqs[p].codes[0]) for p in MOTION_PART_ORDER)


def generate_long(
    model: SeqModel,
    codecs: dict,
    unit_codebook,
    waveform: np.ndarray,
    sample_rate: int,
    example,
    config: SamplerConfig,
    initial_pose: np.ndarray | None = None,
    frame_rate: float = 30.0,
) -> tuple[MotionClip, GenerationLog]:
    """Segmented generation over audio of any length.

    Window k > 0 is prefilled with the last three triplets of the motion so
    far and reads audio units [180k, 180k + 200); units beyond the audio end
    are padded with the silence unit. The assembled code sequence is decoded
    once per part through the base-layer codec.
    """
    from .audio_units import tokenize_audio
    from .rvq import decode_motion, CodeSequence

    layout = model.layout
    log = GenerationLog()
    wav = np.asarray(waveform, dtype=np.float32)
    min_samples = 4 * sample_rate
    if wav.size < min_samples:
        wav = np.concatenate([wav, np.zeros(min_samples - wav.size, dtype=np.float32)])
        log.audio_padded = True
    units = tokenize_audio(wav, sample_rate, unit_codebook)
    orig_units = (np.asarray(waveform).size * 50) // sample_rate
    effective_units = max(int(orig_units), WINDOW_UNITS)
    target_steps = (effective_units * 3) // 20
    n_windows = (
        1
        if target_steps <= WINDOW_STEPS
        else 1 + math.ceil((target_steps - WINDOW_STEPS) / HOP_STEPS)
    )
    silence = _silence_unit(unit_codebook, sample_rate)

    state = SamplerState(layout, example, config)
    acc: dict[str, np.ndarray] = {}
    for k in range(n_windows):
        start = HOP_UNITS * k
        window_units = units[start : start + WINDOW_UNITS]
        if window_units.size < WINDOW_UNITS:
            pad = np.full(WINDOW_UNITS - window_units.size, silence, dtype=np.int64)
            window_units = np.concatenate([window_units, pad])
            log.audio_padded = True
        if k == 0:
            seed_triplets = [initial_pose_triplet(initial_pose, codecs)] if initial_pose is not None else []
        else:
            seed_triplets = [
                tuple(int(acc[p][i]) for p in MOTION_PART_ORDER) for i in range(-OVERLAP_STEPS, 0)
            ]
        seg = generate_segment(model, window_units, example, seed_triplets, config, state)
        raw = deinterleave_parts(seg.tokens)
        codes_k = {p: np.array([layout.motion_code(t)[1] for t in raw[p]]) for p in MOTION_PART_ORDER}
        log.windows.append(
            {
                "window": k,
                "start_unit": int(start),
                "tokens": [int(t) for t in seg.tokens],
                "n_prefilled": seg.n_prefilled,
                "truncated": seg.truncated,
            }
        )
        if k == 0:
            acc = codes_k
        else:
            for p in MOTION_PART_ORDER:
                if not np.array_equal(codes_k[p][:OVERLAP_STEPS], acc[p][-OVERLAP_STEPS:]):
                    raise NumericError("prefill contract violated: overlap codes diverged")
                acc[p] = np.concatenate([acc[p], codes_k[p][OVERLAP_STEPS:]])
    acc = {p: acc[p][:target_steps] for p in MOTION_PART_ORDER}
    log.motion_timesteps = target_steps

    n_joints = (sum(codecs[p].in_dim for p in MOTION_PART_ORDER) - 4) // 6
    seqs = {
        p: CodeSequence(
            body_part=p,
            codes=acc[p],
            layer=0,
            codebook_size=codecs[p].config.codebook_size,
        )
        for p in MOTION_PART_ORDER
    }
    clip = decode_motion(seqs, codecs, frame_rate=frame_rate, n_joints=n_joints)
    if not np.isfinite(clip.frames).all():
        raise NumericError("generated motion contains non-finite frames")
    return clip, log
