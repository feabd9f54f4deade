"""Prompt assembly for the conversation-style template.

Token layout, bit-exact:

    [BOS][SYS_BEGIN] {example: upper block, hands block, lower block}
    [SYS_END][USER_BEGIN] {audio unit tokens} [USER_END]
    [ASSIST_BEGIN] {motion triplets, (upper, hands, lower) per timestep}
    [ASSIST_END]

The motion example is the deduplicated, partially dropped, shuffled set of
the target's codes, per part; the full pre-drop unique set is retained for
the off-example penalty and for sampling-time biasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .vocab import MOTION_PART_ORDER, VocabLayout


@dataclass(frozen=True)
class ExamplePrompt:
    """Per-part example tokens (codebook codes, not vocab ids)."""

    tokens: dict[str, tuple[int, ...]]
    source_token_set: dict[str, frozenset[int]]
    drop_rate: float = 0.0

    def __post_init__(self):
        for part in MOTION_PART_ORDER:
            toks = self.tokens.get(part, ())
            src = self.source_token_set.get(part, frozenset())
            if len(set(toks)) != len(toks):
                raise ConfigError(f"duplicate example tokens in part {part!r}")
            if not set(toks) <= src:
                raise ConfigError(f"example tokens not a subset of source set in {part!r}")

    @classmethod
    def empty(cls) -> "ExamplePrompt":
        return cls(
            tokens={p: () for p in MOTION_PART_ORDER},
            source_token_set={p: frozenset() for p in MOTION_PART_ORDER},
        )

    def total_tokens(self) -> int:
        return sum(len(self.tokens.get(p, ())) for p in MOTION_PART_ORDER)

    def is_empty(self) -> bool:
        return self.total_tokens() == 0


def build_example_prompt(
    codes_by_part: dict[str, np.ndarray],
    drop_rate: float,
    seed: int,
) -> ExamplePrompt:
    """Dedup -> independent per-token drop -> uniform shuffle, per part.

    The source set keeps every unique pre-drop token so the penalty term
    sees the full example even when tokens were dropped.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ConfigError(f"drop_rate must be in [0, 1), got {drop_rate}")
    rng = np.random.default_rng(seed)
    tokens: dict[str, tuple[int, ...]] = {}
    source: dict[str, frozenset[int]] = {}
    for part in MOTION_PART_ORDER:
        codes = np.asarray(codes_by_part.get(part, np.zeros(0, dtype=np.int64)), dtype=np.int64)
        # first-appearance order; the shuffle randomizes it anyway
        _, first_idx = np.unique(codes, return_index=True)
        unique = codes[np.sort(first_idx)]
        source[part] = frozenset(int(c) for c in unique)
        keep = unique[rng.random(unique.size) >= drop_rate]
        keep = keep[rng.permutation(keep.size)]
        tokens[part] = tuple(int(c) for c in keep)
    return ExamplePrompt(tokens=tokens, source_token_set=source, drop_rate=drop_rate)


def interleave_parts(codes_by_part: dict[str, np.ndarray]) -> np.ndarray:
    """Per-timestep triplets in (upper, hands, lower) order."""
    cols = [np.asarray(codes_by_part[p], dtype=np.int64) for p in MOTION_PART_ORDER]
    lengths = {c.size for c in cols}
    if len(lengths) != 1:
        raise ShapeError(f"per-part code lengths disagree: {[c.size for c in cols]}")
    return np.stack(cols, axis=1).reshape(-1)


def deinterleave_parts(tokens: np.ndarray) -> dict[str, np.ndarray]:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size % 3 != 0:
        raise ShapeError(f"interleaved stream length {toks.size} not a multiple of 3")
    trip = toks.reshape(-1, 3)
    return {p: trip[:, i].copy() for i, p in enumerate(MOTION_PART_ORDER)}


def active_part(step_index: int) -> str:
    """Which part's range is legal at the given assistant motion position."""
    return MOTION_PART_ORDER[step_index % 3]


@dataclass(frozen=True)
class PromptTokens:
    """Assembled prompt with the assistant motion span marked."""

    tokens: np.ndarray  # (T,) int64 vocab ids
    assist_start: int  # index of the first motion token
    n_motion: int  # number of motion tokens present

    def motion_positions(self) -> np.ndarray:
        return np.arange(self.assist_start, self.assist_start + self.n_motion)


def example_vocab_ids(layout: VocabLayout, example: ExamplePrompt) -> list[int]:
    ids: list[int] = []
    for part in MOTION_PART_ORDER:
        ids.extend(layout.motion_token(part, c) for c in example.tokens.get(part, ()))
    return ids


def source_vocab_ids(layout: VocabLayout, example: ExamplePrompt) -> frozenset[int]:
    ids = set()
    for part in MOTION_PART_ORDER:
        for c in example.source_token_set.get(part, frozenset()):
            ids.add(layout.motion_token(part, c))
    return frozenset(ids)


def build_prompt(
    layout: VocabLayout,
    example: ExamplePrompt,
    audio_units: np.ndarray,
    motion_codes_by_part: dict[str, np.ndarray] | None = None,
    close_assistant: bool = True,
) -> PromptTokens:
    """Assemble the full template; motion omitted gives a generation prefix."""
    tokens: list[int] = [layout.bos, layout.special("SYS_BEGIN")]
    tokens.extend(example_vocab_ids(layout, example))
    tokens.append(layout.special("SYS_END"))
    tokens.append(layout.special("USER_BEGIN"))
    tokens.extend(layout.audio_token(int(u)) for u in np.asarray(audio_units))
    tokens.append(layout.special("USER_END"))
    tokens.append(layout.special("ASSIST_BEGIN"))
    assist_start = len(tokens)
    n_motion = 0
    if motion_codes_by_part is not None:
        inter = interleave_parts(motion_codes_by_part)
        for i, code in enumerate(inter):
            tokens.append(layout.motion_token(active_part(i), int(code)))
        n_motion = inter.size
        if close_assistant:
            tokens.append(layout.special("ASSIST_END"))
    return PromptTokens(
        tokens=np.asarray(tokens, dtype=np.int64),
        assist_start=assist_start,
        n_motion=n_motion,
    )


def loss_mask(prompt: PromptTokens) -> np.ndarray:
    """True exactly at the supervised (assistant motion) positions."""
    mask = np.zeros(prompt.tokens.size, dtype=bool)
    mask[prompt.assist_start : prompt.assist_start + prompt.n_motion] = True
    return mask


def serialize_prompt(prompt: PromptTokens) -> bytes:
    """Token ids as little-endian u32, for golden-file comparison."""
    return np.asarray(prompt.tokens, dtype="<u4").tobytes()
