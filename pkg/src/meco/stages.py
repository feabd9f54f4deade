"""The four training phases of the sequence model.

Stage 0 pretrains a byte-level text model (the stand-in "base LLM").
Stage 1 extends the vocabulary and trains only the token embedding and
output projection on unconditional audio-unit and motion-code streams,
with the backbone frozen. Stage 2 fine-tunes everything on the
speech-to-gesture conversation template with loss only on motion
positions. Stage 3 adds the motion example to the system segment, with
fresh drop/shuffle per sample per epoch, plus the off-example probability
penalty weighted by lambda.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .errors import ConfigError, ContractViolationError, DataError
from .prompts import (
    ExamplePrompt,
    PromptTokens,
    build_example_prompt,
    build_prompt,
    loss_mask,
    source_vocab_ids,
)
from .seq_model import ModelConfig, SeqModel, freeze, frozen_groups, trainable_parameters
from .vocab import MOTION_PART_ORDER, VocabLayout, text_layout

WINDOW_STEPS = 30  # motion timesteps per 4 s training window
WINDOW_UNITS = 200  # audio units per window
HOP_STEPS = 3  # crop offsets move in 3-timestep (0.4 s) increments
HOP_UNITS = 20


@dataclass
class StageConfig:
    stage: int
    lr: float = 5e-5
    batch_size: int = 8
    grad_accum: int = 1
    epochs: int = 40
    lambda_penalty: float = 0.1
    drop_rate_range: tuple[float, float] = (0.0, 0.8)
    warmup_frac: float = 0.1
    seed: int = 0
    freeze_backbone: bool = True  # stage-1 protocol; False is the ablation
    # stage-0 extras
    chunk_len: int = 256
    steps_per_epoch: int = 60
    patience: int = 3
    min_corpus_bytes: int = 1_000_000
    heldout_bytes: int = 65536

    def __post_init__(self):
        if self.stage not in (0, 1, 2, 3):
            raise ConfigError(f"stage must be 0..3, got {self.stage}")
        if self.lambda_penalty < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_penalty}")
        lo, hi = self.drop_rate_range
        if not (0.0 <= lo <= hi < 1.0):
            raise ConfigError(f"drop_rate_range must lie in [0, 1), got {self.drop_rate_range}")
        if self.lr <= 0 or self.batch_size < 1 or self.grad_accum < 1 or self.epochs < 1:
            raise ConfigError("lr, batch_size, grad_accum, epochs must be positive")


@dataclass(frozen=True)
class TokenizedSample:
    sample_id: str
    units: np.ndarray  # (T_a,) raw unit ids
    codes: dict[str, np.ndarray]  # part -> (T_m,) raw codebook codes
    style_id: int = 0

    @property
    def n_steps(self) -> int:
        return min(self.codes[p].size for p in MOTION_PART_ORDER)

    def max_crop(self) -> int:
        """Largest window offset index k such that the 4 s window fits."""
        by_motion = (self.n_steps - WINDOW_STEPS) // HOP_STEPS
        by_audio = (self.units.size - WINDOW_UNITS) // HOP_UNITS
        return min(by_motion, by_audio)

    def crop(self, k: int) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        units = self.units[HOP_UNITS * k : HOP_UNITS * k + WINDOW_UNITS]
        codes = {
            p: self.codes[p][HOP_STEPS * k : HOP_STEPS * k + WINDOW_STEPS]
            for p in MOTION_PART_ORDER
        }
        return units, codes


def prepare_token_dataset(samples, codecs, unit_codebook) -> list[TokenizedSample]:
    """Tokenize paired samples through the codecs and unit codebook."""
    from .audio_units import tokenize_audio
    from .rvq import tokenize_motion

    out = []
    for s in samples:
        units = tokenize_audio(s.waveform, s.sample_rate, unit_codebook)
        codes = {p: seq.codes for p, seq in tokenize_motion(s.motion, codecs).items()}
        ts = TokenizedSample(sample_id=s.sample_id, units=units, codes=codes, style_id=s.style_id)
        if ts.max_crop() < 0:
            raise DataError(
                f"sample {s.sample_id} too short for a 4 s training window "
                f"({ts.n_steps} motion steps, {units.size} units)"
            )
        out.append(ts)
    return out


def _check_sample(ts: TokenizedSample) -> None:
    if ts.units.size == 0 or any(ts.codes[p].size == 0 for p in MOTION_PART_ORDER):
        raise DataError(f"sample {ts.sample_id} missing audio or motion tokens")


def make_schedule(optimizer, total_steps: int, warmup_frac: float):
    warmup = max(1, int(total_steps * warmup_frac))

    def lr_lambda(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, lr_lambda)


def _pad_batch(seqs: list[np.ndarray], masks: list[np.ndarray], pad_id: int):
    width = max(s.size for s in seqs)
    tokens = np.full((len(seqs), width), pad_id, dtype=np.int64)
    sup = np.zeros((len(seqs), width), dtype=bool)
    for i, (s, m) in enumerate(zip(seqs, masks)):
        tokens[i, : s.size] = s
        sup[i, : s.size] = m
    return torch.from_numpy(tokens), torch.from_numpy(sup)


def masked_lm_loss(model: SeqModel, tokens: torch.Tensor, supervised: torch.Tensor):
    """Mean cross-entropy over positions whose mask is True.

    `supervised[i, t]` marks token t of row i as a target to predict from
    its prefix; position 0 can never be supervised.
    """
    logits = model(tokens[:, :-1])
    targets = tokens[:, 1:]
    mask = supervised[:, 1:]
    if not mask.any():
        raise DataError("batch has no supervised positions")
    ce = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
    )
    return (ce * mask.reshape(-1)).sum() / mask.sum(), logits


def penalized_columns(
    layout: VocabLayout, source_ids: frozenset[int] | set[int]
) -> np.ndarray:
    """Motion-range vocab ids outside the example's source set.

    Text, audio, and special tokens are excluded from both the set and its
    complement; they are never legal at motion positions.
    """
    lo = layout.motion_range(MOTION_PART_ORDER[0])[0]
    hi = layout.motion_range(MOTION_PART_ORDER[-1])[1]
    cols = np.arange(lo, hi)
    keep = np.array([c not in source_ids for c in cols], dtype=bool)
    return cols[keep]


def off_example_penalty(
    step_logits: torch.Tensor, source_ids: frozenset[int], layout: VocabLayout
) -> tuple[torch.Tensor, bool]:
    """Softmax mass on motion tokens outside the example set, summed over
    steps. Empty example set defines the penalty as 0 (with a warning flag).
    """
    logits = torch.as_tensor(step_logits)
    if logits.ndim == 1:
        logits = logits[None]
    if not source_ids:
        return logits.new_zeros(()), True
    cols = torch.from_numpy(penalized_columns(layout, source_ids))
    probs = torch.softmax(logits, dim=-1)
    return probs[:, cols].sum(dim=-1).sum(), False


def stage0_pretrain(
    corpus: bytes, model_config: ModelConfig, config: StageConfig
) -> tuple[SeqModel, list[dict]]:
    """Byte-level next-token pretraining with plateau early stopping."""
    if config.stage != 0:
        raise ConfigError(f"expected a stage-0 config, got stage {config.stage}")
    if not corpus:
        raise ConfigError("empty text corpus")
    if len(corpus) < config.min_corpus_bytes:
        raise ConfigError(
            f"corpus has {len(corpus)} bytes, need >= {config.min_corpus_bytes}"
        )
    heldout = corpus[-config.heldout_bytes :]
    train = corpus[: -config.heldout_bytes]
    layout = text_layout()
    torch.manual_seed(config.seed)
    model = SeqModel(model_config, layout, seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    total = config.epochs * config.steps_per_epoch
    sched = make_schedule(opt, total, config.warmup_frac)
    rng = np.random.default_rng(config.seed)
    data = np.frombuffer(train, dtype=np.uint8)
    history: list[dict] = []
    best = float("inf")
    stale = 0
    step = 0
    for epoch in range(config.epochs):
        model.train()
        for _ in range(config.steps_per_epoch):
            starts = rng.integers(0, data.size - config.chunk_len, size=config.batch_size)
            chunk = np.stack([data[s : s + config.chunk_len] for s in starts]).astype(np.int64)
            tokens = np.concatenate(
                [np.full((config.batch_size, 1), layout.bos, dtype=np.int64), chunk], axis=1
            )
            sup = np.ones_like(tokens, dtype=bool)
            sup[:, 0] = False
            loss, _ = masked_lm_loss(
                model, torch.from_numpy(tokens), torch.from_numpy(sup)
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            history.append(
                {"step": step, "loss": float(loss.detach()), "penalty": 0.0, "lr": sched.get_last_lr()[0]}
            )
            step += 1
        ppl = eval_text_perplexity(model, heldout, chunk_len=config.chunk_len)
        history.append({"step": step, "heldout_ppl": ppl, "epoch": epoch})
        if ppl < best * 0.999:
            best = ppl
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.eval()
    return model, history


@torch.no_grad()
def eval_text_perplexity(
    model: SeqModel,
    text: bytes,
    chunk_len: int = 256,
    restrict_to_text: bool = False,
    max_chunks: int = 64,
) -> float:
    """exp(mean byte NLL). With restrict_to_text, the softmax runs over the
    256 byte rows only, making the value comparable across vocab sizes."""
    if not text:
        raise ConfigError("empty evaluation text")
    data = np.frombuffer(text, dtype=np.uint8)
    layout = model.layout
    n_chunks = min(max_chunks, max(1, data.size // chunk_len))
    total_nll = 0.0
    total_count = 0
    model.eval()
    for i in range(n_chunks):
        chunk = data[i * chunk_len : (i + 1) * chunk_len].astype(np.int64)
        if chunk.size == 0:
            break
        tokens = torch.from_numpy(np.concatenate([[layout.bos], chunk]))
        logits = model(tokens)[:-1]
        if restrict_to_text:
            logits = logits[:, :256]
        logp = torch.log_softmax(logits, dim=-1)
        nll = -logp[torch.arange(chunk.size), torch.from_numpy(chunk)]
        total_nll += float(nll.sum())
        total_count += chunk.size
    return float(math.exp(total_nll / total_count))


def _verify_stage1_contract(model: SeqModel, config: StageConfig) -> None:
    frozen = frozen_groups(model)
    if config.freeze_backbone:
        if "backbone" not in frozen:
            raise ContractViolationError(
                "stage 1 requires a frozen backbone; call freeze(model, {'backbone'})"
            )
        if "embedding" in frozen or "output_projection" in frozen:
            raise ContractViolationError(
                "stage 1 trains the token embedding and output projection; they are frozen"
            )
    else:
        if frozen:
            raise ContractViolationError(
                f"unfrozen stage-1 ablation expects all groups trainable, found frozen {sorted(frozen)}"
            )


def _streams_for_stage1(
    layout: VocabLayout, samples: list[TokenizedSample]
) -> list[tuple[np.ndarray, str]]:
    from .prompts import interleave_parts

    streams = []
    for ts in samples:
        _check_sample(ts)
        audio = np.concatenate([[layout.bos], [layout.audio_token(int(u)) for u in ts.units]])
        motion_inter = interleave_parts({p: ts.codes[p][: ts.n_steps] for p in MOTION_PART_ORDER})
        motion = np.concatenate(
            [
                [layout.bos],
                [
                    layout.motion_token(MOTION_PART_ORDER[i % 3], int(c))
                    for i, c in enumerate(motion_inter)
                ],
            ]
        )
        limit = 512
        streams.append((audio[:limit].astype(np.int64), "audio"))
        streams.append((motion[:limit].astype(np.int64), "motion"))
    return streams


def stage1_embed_init(
    model: SeqModel, samples: list[TokenizedSample], config: StageConfig
) -> list[dict]:
    """Unconditional next-token training on audio-only and motion-only
    streams; only new-token embeddings and the output projection move."""
    if config.stage != 1:
        raise ConfigError(f"expected a stage-1 config, got stage {config.stage}")
    _verify_stage1_contract(model, config)
    layout = model.layout
    streams = _streams_for_stage1(layout, samples)
    params = trainable_parameters(model)
    opt = torch.optim.Adam(params, lr=config.lr)
    steps_per_epoch = max(1, math.ceil(len(streams) / config.batch_size))
    sched = make_schedule(opt, config.epochs * steps_per_epoch, config.warmup_frac)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    history = []
    step = 0
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(streams))
        for i in range(0, len(order), config.batch_size):
            batch = [streams[j][0] for j in order[i : i + config.batch_size]]
            masks = []
            for seq in batch:
                m = np.ones(seq.size, dtype=bool)
                m[0] = False
                masks.append(m)
            tokens, sup = _pad_batch(batch, masks, layout.pad)
            loss, _ = masked_lm_loss(model, tokens, sup)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            history.append(
                {"step": step, "loss": float(loss.detach()), "penalty": 0.0, "lr": sched.get_last_lr()[0]}
            )
            step += 1
    model.eval()
    return history


def _verify_all_trainable(model: SeqModel, stage: int) -> None:
    frozen = frozen_groups(model)
    if frozen:
        raise ContractViolationError(
            f"stage {stage} trains all parameters, found frozen groups {sorted(frozen)}"
        )


def _sft_epoch_prompts(
    samples: list[TokenizedSample],
    layout: VocabLayout,
    rng: np.random.Generator,
    config: StageConfig,
    with_example: bool,
) -> list[tuple[PromptTokens, frozenset[int]]]:
    prompts = []
    for ts in samples:
        _check_sample(ts)
        k = int(rng.integers(0, ts.max_crop() + 1))
        units, codes = ts.crop(k)
        if with_example:
            drop = float(rng.uniform(*config.drop_rate_range))
            example = build_example_prompt(codes, drop, seed=int(rng.integers(0, 2**31)))
        else:
            example = ExamplePrompt.empty()
        prompt = build_prompt(layout, example, units, codes)
        prompts.append((prompt, source_vocab_ids(layout, example)))
    return prompts


def _run_sft_stage(
    model: SeqModel,
    samples: list[TokenizedSample],
    config: StageConfig,
    with_example: bool,
) -> list[dict]:
    layout = model.layout
    _verify_all_trainable(model, config.stage)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    steps_per_epoch = max(1, math.ceil(len(samples) / config.batch_size))
    sched = make_schedule(
        opt, config.epochs * steps_per_epoch // config.grad_accum, config.warmup_frac
    )
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    use_penalty = with_example and config.lambda_penalty > 0
    history = []
    step = 0
    model.train()
    opt.zero_grad()
    accumulated = 0
    for _ in range(config.epochs):
        prompts = _sft_epoch_prompts(samples, layout, rng, config, with_example)
        order = rng.permutation(len(prompts))
        for i in range(0, len(order), config.batch_size):
            chunk = [prompts[j] for j in order[i : i + config.batch_size]]
            seqs = [p.tokens for p, _ in chunk]
            masks = [loss_mask(p) for p, _ in chunk]
            tokens, sup = _pad_batch(seqs, masks, layout.pad)
            loss, logits = masked_lm_loss(model, tokens, sup)
            penalty_value = 0.0
            if use_penalty:
                penalty = _batched_penalty(logits, tokens, sup, chunk, layout)
                penalty_value = float(penalty.detach())
                loss = loss + config.lambda_penalty * penalty
            (loss / config.grad_accum).backward()
            accumulated += 1
            if accumulated % config.grad_accum == 0:
                opt.step()
                opt.zero_grad()
                sched.step()
            history.append(
                {
                    "step": step,
                    "loss": float(loss.detach()),
                    "penalty": penalty_value,
                    "lr": sched.get_last_lr()[0],
                }
            )
            step += 1
    if accumulated % config.grad_accum != 0:
        opt.step()
        opt.zero_grad()
    model.eval()
    return history


def _batched_penalty(logits, tokens, sup, chunk, layout: VocabLayout):
    """Mean over supervised positions of off-example motion mass."""
    mask = sup[:, 1:]
    total = logits.new_zeros(())
    count = 0
    for row, (_, source_ids) in enumerate(chunk):
        pos = torch.nonzero(mask[row], as_tuple=True)[0]
        if pos.numel() == 0:
            continue
        value, warned = off_example_penalty(logits[row, pos], source_ids, layout)
        if not warned:
            total = total + value
        count += int(pos.numel())
    return total / max(count, 1)


def stage2_s2g(
    model: SeqModel, samples: list[TokenizedSample], config: StageConfig
) -> list[dict]:
    """Speech-to-gesture SFT: audio as the user query, motion as the
    assistant response, loss only on motion positions."""
    if config.stage != 2:
        raise ConfigError(f"expected a stage-2 config, got stage {config.stage}")
    return _run_sft_stage(model, samples, config, with_example=False)


def stage3_example_train(
    model: SeqModel, samples: list[TokenizedSample], config: StageConfig
) -> list[dict]:
    """Example-conditioned training: fresh Drop&Shuffle&Dedup per sample per
    epoch plus the lambda-weighted off-example penalty."""
    if config.stage != 3:
        raise ConfigError(f"expected a stage-3 config, got stage {config.stage}")
    return _run_sft_stage(model, samples, config, with_example=True)


@torch.no_grad()
def heldout_s2g_loss(
    model: SeqModel,
    samples: list[TokenizedSample],
    with_example: bool = False,
    seed: int = 0,
) -> float:
    """Deterministic held-out conversation loss (crop k=0)."""
    layout = model.layout
    model.eval()
    total, count = 0.0, 0
    for ts in samples:
        units, codes = ts.crop(0)
        if with_example:
            example = build_example_prompt(codes, 0.0, seed=seed)
        else:
            example = ExamplePrompt.empty()
        prompt = build_prompt(layout, example, units, codes)
        tokens = torch.from_numpy(prompt.tokens)
        sup = torch.from_numpy(loss_mask(prompt))
        loss, _ = masked_lm_loss(model, tokens[None], sup[None])
        total += float(loss)
        count += 1
    return total / max(count, 1)


@torch.no_grad()
def heldout_stream_loss(
    model: SeqModel, samples: list[TokenizedSample], kind: str = "motion"
) -> float:
    """Mean next-token loss over stage-1 style unconditional streams."""
    layout = model.layout
    streams = [s for s, k in _streams_for_stage1(layout, samples) if k == kind]
    model.eval()
    total, count = 0.0, 0
    for seq in streams:
        mask = np.ones(seq.size, dtype=bool)
        mask[0] = False
        loss, _ = masked_lm_loss(
            model, torch.from_numpy(seq)[None], torch.from_numpy(mask)[None]
        )
        total += float(loss)
        count += 1
    return total / max(count, 1)


@torch.no_grad()
def example_token_mass(
    model: SeqModel, samples: list[TokenizedSample], seed: int = 0
) -> float:
    """Mean predictive mass on the example's source tokens over supervised
    positions of example-conditioned held-out prompts."""
    layout = model.layout
    model.eval()
    total, count = 0.0, 0
    for ts in samples:
        units, codes = ts.crop(0)
        example = build_example_prompt(codes, 0.0, seed=seed)
        source = source_vocab_ids(layout, example)
        if not source:
            continue
        prompt = build_prompt(layout, example, units, codes)
        tokens = torch.from_numpy(prompt.tokens)
        logits = model(tokens[:-1])
        mask = torch.from_numpy(loss_mask(prompt))[1:]
        pos = torch.nonzero(mask, as_tuple=True)[0]
        probs = torch.softmax(logits[pos], dim=-1)
        cols = torch.tensor(sorted(source), dtype=torch.long)
        total += float(probs[:, cols].sum(dim=-1).mean())
        count += 1
    return total / max(count, 1)
