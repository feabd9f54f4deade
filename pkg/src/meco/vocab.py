"""Unified token space: text bytes, audio units, three motion-part code
ranges, and special tokens, in that order.

Ranges are contiguous and disjoint by construction and cover
[0, vocab_size). A text-only layout (no audio or motion ranges) is what the
pretrained byte model starts from; vocabulary extension inserts the audio
and motion ranges while the special tokens stay at the tail.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, VocabError

N_TEXT = 256
SPECIALS = (
    "BOS",
    "EOS",
    "SYS_BEGIN",
    "SYS_END",
    "USER_BEGIN",
    "USER_END",
    "ASSIST_BEGIN",
    "ASSIST_END",
    "PAD",
)
MOTION_PART_ORDER = ("upper", "hands", "lower")


@dataclass(frozen=True)
class VocabLayout:
    n_audio: int = 0  # K_a
    n_motion: int = 0  # K, per part

    def __post_init__(self):
        if self.n_audio < 0 or self.n_motion < 0:
            raise ConfigError(
                f"range widths must be non-negative: n_audio={self.n_audio}, "
                f"n_motion={self.n_motion}"
            )

    @property
    def text_range(self) -> tuple[int, int]:
        return 0, N_TEXT

    @property
    def audio_range(self) -> tuple[int, int]:
        return N_TEXT, N_TEXT + self.n_audio

    def motion_range(self, part: str) -> tuple[int, int]:
        if part not in MOTION_PART_ORDER:
            raise ConfigError(f"unknown motion part {part!r}")
        base = N_TEXT + self.n_audio + MOTION_PART_ORDER.index(part) * self.n_motion
        return base, base + self.n_motion

    @property
    def specials_range(self) -> tuple[int, int]:
        base = N_TEXT + self.n_audio + 3 * self.n_motion
        return base, base + len(SPECIALS)

    @property
    def size(self) -> int:
        return self.specials_range[1]

    def special(self, name: str) -> int:
        if name not in SPECIALS:
            raise ConfigError(f"unknown special token {name!r}")
        return self.specials_range[0] + SPECIALS.index(name)

    @property
    def bos(self) -> int:
        return self.special("BOS")

    @property
    def eos(self) -> int:
        return self.special("EOS")

    @property
    def pad(self) -> int:
        return self.special("PAD")

    def audio_token(self, unit: int) -> int:
        if not 0 <= unit < self.n_audio:
            raise VocabError(f"audio unit {unit} outside [0, {self.n_audio})")
        return N_TEXT + unit

    def motion_token(self, part: str, code: int) -> int:
        lo, hi = self.motion_range(part)
        if not 0 <= code < self.n_motion:
            raise VocabError(f"motion code {code} outside [0, {self.n_motion}) for {part}")
        return lo + code

    def motion_code(self, token: int) -> tuple[str, int]:
        for part in MOTION_PART_ORDER:
            lo, hi = self.motion_range(part)
            if lo <= token < hi:
                return part, token - lo
        raise VocabError(f"token {token} is not a motion token")

    def is_motion(self, token: int) -> bool:
        lo = self.motion_range(MOTION_PART_ORDER[0])[0]
        hi = self.motion_range(MOTION_PART_ORDER[-1])[1]
        return lo <= token < hi

    def describe(self, token: int) -> str:
        if 0 <= token < N_TEXT:
            return f"text:{token}"
        lo, hi = self.audio_range
        if lo <= token < hi:
            return f"audio:{token - lo}"
        for part in MOTION_PART_ORDER:
            lo, hi = self.motion_range(part)
            if lo <= token < hi:
                return f"{part}:{token - lo}"
        lo, hi = self.specials_range
        if lo <= token < hi:
            return SPECIALS[token - lo]
        raise VocabError(f"token {token} outside vocabulary of size {self.size}")


def text_layout() -> VocabLayout:
    return VocabLayout(n_audio=0, n_motion=0)
