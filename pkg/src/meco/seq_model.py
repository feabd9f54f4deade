"""Miniature decoder-only autoregressive model over the unified vocabulary.

Pre-norm transformer with learned positional embeddings, untied token
embedding and output projection, and three parameter groups that can be
frozen independently: `embedding` (the token table), `backbone` (positions,
blocks, final norm), and `output_projection`. Supports incremental decoding
through an explicit key/value cache.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, DataError, FormatError, VocabError
from .vocab import VocabLayout
from . import serial

MODEL_MAGIC = b"MECL"
MODEL_VERSION = 1
PARAM_GROUPS = ("embedding", "backbone", "output_projection")


@dataclass
class ModelConfig:
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 4
    context: int = 512
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.context < 512:
            raise ConfigError(f"context must be >= 512, got {self.context}")


class _Block(nn.Module):
    def __init__(self, d: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, mlp_ratio * d)
        self.fc2 = nn.Linear(mlp_ratio * d, d)

    def forward(self, h, past_kv=None):
        b, t, d = h.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(self.ln1(h)).split(d, dim=2)
        q = q.view(b, t, self.n_heads, hd).transpose(1, 2)
        k = k.view(b, t, self.n_heads, hd).transpose(1, 2)
        v = v.view(b, t, self.n_heads, hd).transpose(1, 2)
        if past_kv is not None:
            k = torch.cat([past_kv[0], k], dim=2)
            v = torch.cat([past_kv[1], v], dim=2)
        t_total = k.shape[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        # causal mask: query at absolute position (t_total - t + i) sees keys <= it
        offset = t_total - t
        mask = torch.arange(t_total)[None, :] > (offset + torch.arange(t)[:, None])
        att = att.masked_fill(mask.to(att.device), float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        h = h + self.proj(out)
        h = h + self.fc2(torch.nn.functional.gelu(self.fc1(self.ln2(h))))
        return h, (k, v)


class SeqModel(nn.Module):
    def __init__(self, config: ModelConfig, layout: VocabLayout, seed: int = 0):
        super().__init__()
        self.config = config
        self.layout = layout
        self.seed = seed
        torch.manual_seed(seed)
        d = config.d_model
        self.token_emb = nn.Embedding(layout.size, d)
        self.pos_emb = nn.Embedding(config.context, d)
        self.blocks = nn.ModuleList(
            [_Block(d, config.n_heads, config.mlp_ratio) for _ in range(config.n_layers)]
        )
        self.ln_f = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, layout.size, bias=False)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        backbone = list(self.pos_emb.parameters())
        for blk in self.blocks:
            backbone += list(blk.parameters())
        backbone += list(self.ln_f.parameters())
        return {
            "embedding": list(self.token_emb.parameters()),
            "backbone": backbone,
            "output_projection": list(self.out_proj.parameters()),
        }

    def forward(
        self,
        tokens: torch.Tensor,
        past: list | None = None,
        return_cache: bool = False,
    ):
        """(B, T) or (T,) token ids -> (B, T, V) or (T, V) logits.

        With `past` (a per-layer kv cache) the tokens are treated as the
        continuation; positions advance from the cached length.
        """
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.layout.size):
            raise VocabError(
                f"token id outside vocabulary of size {self.layout.size}"
            )
        offset = past[0][0].shape[2] if past else 0
        t = tokens.shape[1]
        if offset + t > self.config.context:
            raise DataError(
                f"sequence length {offset + t} exceeds context limit {self.config.context}"
            )
        pos = torch.arange(offset, offset + t)
        h = self.token_emb(tokens) + self.pos_emb(pos)[None]
        new_cache = []
        for i, blk in enumerate(self.blocks):
            h, kv = blk(h, past[i] if past else None)
            if return_cache:
                new_cache.append(kv)
        logits = self.out_proj(self.ln_f(h))
        if single:
            logits = logits[0]
        return (logits, new_cache) if return_cache else logits


def freeze(model: SeqModel, groups: set[str] | list[str] | tuple[str, ...]) -> None:
    """Frozen groups take zero updates in any later optimization step."""
    groups = set(groups)
    unknown = groups - set(PARAM_GROUPS)
    if unknown:
        raise ConfigError(f"unknown parameter groups {sorted(unknown)}; valid: {PARAM_GROUPS}")
    for name, params in model.param_groups().items():
        for p in params:
            p.requires_grad_(name not in groups)


def unfreeze_all(model: SeqModel) -> None:
    freeze(model, set())


def trainable_parameters(model: SeqModel) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def frozen_groups(model: SeqModel) -> set[str]:
    out = set()
    for name, params in model.param_groups().items():
        if params and all(not p.requires_grad for p in params):
            out.add(name)
    return out


def extend_vocab(model: SeqModel, new_layout: VocabLayout, seed: int = 0) -> SeqModel:
    """Grow a text-only model's vocabulary, preserving existing rows bitwise.

    Text rows keep their ids; special-token rows move with the tail so the
    layout stays (text, audio, motion x3, specials). Rows for the new audio
    and motion tokens are N(0, 0.02^2) from the given seed. The backbone is
    copied bitwise. Extending to the identical layout is a bitwise copy.
    """
    import copy

    old = model.layout
    if new_layout == old:
        return copy.deepcopy(model)
    if old.n_audio != 0 or old.n_motion != 0:
        raise ConfigError("vocabulary extension expects a text-only base model")
    ext = SeqModel(model.config, new_layout, seed=model.seed)
    backbone_state = {
        k: v
        for k, v in model.state_dict().items()
        if k not in ("token_emb.weight", "out_proj.weight")
    }
    ext.load_state_dict(backbone_state, strict=False)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, target in (
            ("token_emb.weight", ext.token_emb.weight),
            ("out_proj.weight", ext.out_proj.weight),
        ):
            old_w = model.state_dict()[name]
            new_w = torch.empty(new_layout.size, model.config.d_model)
            new_w.normal_(0.0, 0.02, generator=gen)
            new_w[: old.specials_range[0]] = old_w[: old.specials_range[0]]
            new_w[new_layout.specials_range[0] :] = old_w[old.specials_range[0] :]
            target.copy_(new_w)
    return ext


def save_model(path: str, model: SeqModel) -> None:
    header = struct.pack(
        "<IIIIIIII",
        MODEL_VERSION,
        model.layout.n_audio,
        model.layout.n_motion,
        model.config.d_model,
        model.config.n_layers,
        model.config.n_heads,
        model.config.context,
        model.config.mlp_ratio,
    )
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    serial.write_checked(path, MODEL_MAGIC, header, arrays)


def load_model(path: str) -> SeqModel:
    body, off = serial.read_checked(path, MODEL_MAGIC)
    hdr = struct.calcsize("<IIIIIIII")
    version, n_audio, n_motion, d, n_layers, n_heads, context, mlp = struct.unpack(
        "<IIIIIIII", body[:hdr]
    )
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", off)
    layout = VocabLayout(n_audio=n_audio, n_motion=n_motion)
    config = ModelConfig(
        d_model=d, n_layers=n_layers, n_heads=n_heads, context=context, mlp_ratio=mlp
    )
    model = SeqModel(config, layout)
    arrays = serial.unpack_arrays(body[hdr:], off + hdr)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return model
