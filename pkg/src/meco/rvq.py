"""Residual-vector-quantized motion codec, one per body part.

A strided 1-D conv encoder (x4 temporal downsample) produces latents that
pass through a base quantization layer plus Q residual layers; the decoder
mirrors the encoder. Training minimizes L1 reconstruction plus a commitment
term with straight-through gradients, samples the active residual depth
uniformly per step (quantizer dropout, base layer always on), maintains
codebooks by exponential moving average, and reseeds codes unused for too
many steps. Downstream tokenization reads the base layer only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import (
    ConfigError,
    FormatError,
    InvalidCodeError,
    NumericError,
    ShapeError,
)
from .motion import PARTS, MotionClip, clip_from_part_features, default_part_masks
from . import serial

DOWNSAMPLE = 4
CODEC_MAGIC = b"MECQ"
CODEC_VERSION = 1
_PART_CODES = {p: i for i, p in enumerate(PARTS)}


@dataclass
class CodecConfig:
    codebook_size: int = 512  # K
    latent_dim: int = 512  # f
    n_residual_layers: int = 6  # Q
    eta: float = 0.1
    ema_decay: float = 0.99
    reseed_after: int = 256

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ConfigError(f"K must be >= 2, got {self.codebook_size}")
        if self.n_residual_layers < 0:
            raise ConfigError(f"Q must be >= 0, got {self.n_residual_layers}")
        if not 0 < self.ema_decay < 1:
            raise ConfigError(f"ema_decay must be in (0,1), got {self.ema_decay}")


@dataclass
class CodecTrainConfig:
    window: int = 64
    batch_size: int = 32
    steps: int = 800
    lr: float = 4e-4
    window_stride: int = 16
    quantizer_dropout: bool = True
    lr_milestones: tuple[float, ...] = (0.6, 0.85)
    lr_gamma: float = 0.5

    def __post_init__(self):
        if self.window % DOWNSAMPLE != 0:
            raise ConfigError(f"window must be divisible by {DOWNSAMPLE}, got {self.window}")
        if self.steps < 1 or self.batch_size < 1 or self.window_stride < 1:
            raise ConfigError("steps, batch_size, and window_stride must be positive")


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray  # (K, f)
    usage_counts: np.ndarray  # (K,) steps since last use
    layer_index: int

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2 or e.shape[0] < 2:
            raise ConfigError(f"codebook needs K >= 2 entries, got shape {e.shape}")
        if not np.isfinite(e).all():
            raise NumericError(f"non-finite entries in codebook layer {self.layer_index}")


@dataclass(frozen=True)
class CodeSequence:
    body_part: str
    codes: np.ndarray  # (n,) int64 in [0, K)
    layer: int
    codebook_size: int
    padded: bool = False

    def __post_init__(self):
        c = np.asarray(self.codes, dtype=np.int64)
        if c.ndim != 1:
            raise ShapeError(f"codes must be 1-D, got {c.shape}")
        if c.size and (c.min() < 0 or c.max() >= self.codebook_size):
            raise InvalidCodeError(
                f"code out of range [0, {self.codebook_size}) in part {self.body_part}"
            )
        c.flags.writeable = False
        object.__setattr__(self, "codes", c)

    def __len__(self) -> int:
        return self.codes.size


def quantize_nearest(vector, codebook) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest codebook entry by Euclidean distance; ties take the lowest
    index. Accepts (f,) or (n, f); returns (indices, quantized vectors)."""
    vec = torch.as_tensor(vector)
    book = torch.as_tensor(codebook)
    single = vec.ndim == 1
    if single:
        vec = vec[None]
    if vec.shape[1] != book.shape[1]:
        raise ShapeError(f"vector dim {vec.shape[1]} != codebook dim {book.shape[1]}")
    if torch.isnan(vec).any():
        raise NumericError("NaN in quantizer input")
    d2 = (vec**2).sum(1, keepdim=True) - 2.0 * vec @ book.T + (book**2).sum(1)
    idx = torch.argmin(d2, dim=1)
    quant = book[idx]
    if single:
        return idx[0], quant[0]
    return idx, quant


def rvq_encode(
    latents, codebooks, layers_used: int
) -> tuple[list[torch.Tensor], torch.Tensor, torch.Tensor]:
    """Run the residual quantization recurrence r^q = r^{q-1} - zhat^q.

    Returns (per-layer code indices, summed quantization zhat, residual
    norms): norms[q] is the per-vector L2 norm of the residual after layer
    q has been subtracted, shape (layers_used + 1, n).
    """
    z = torch.as_tensor(latents)
    books = torch.as_tensor(codebooks)
    if layers_used >= books.shape[0]:
        raise ConfigError(
            f"layers_used={layers_used} but codec has {books.shape[0]} layers (Q={books.shape[0] - 1})"
        )
    if z.ndim != 2 or z.shape[1] != books.shape[2]:
        raise ShapeError(f"latents {tuple(z.shape)} incompatible with codebooks {tuple(books.shape)}")
    residual = z
    zhat = torch.zeros_like(z)
    codes: list[torch.Tensor] = []
    norms = []
    for q in range(layers_used + 1):
        idx, quant = quantize_nearest(residual, books[q])
        codes.append(idx)
        zhat = zhat + quant
        residual = residual - quant
        norms.append(residual.norm(dim=1))
    return codes, zhat, torch.stack(norms)


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1)
        # residual branch starts as identity for stable early optimization
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return x + self.conv2(torch.relu(self.conv1(x)))


class RvqCodec(nn.Module):
    """Encoder, decoder, and Q+1 EMA codebooks for one body part."""

    def __init__(
        self,
        part: str,
        in_dim: int,
        config: CodecConfig | None = None,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if part not in PARTS:
            raise ConfigError(f"unknown body part {part!r}")
        self.part = part
        self.in_dim = in_dim
        self.config = config or CodecConfig()
        self.seed = seed
        k, f, q = self.config.codebook_size, self.config.latent_dim, self.config.n_residual_layers
        torch.manual_seed(seed)
        self.encoder = nn.Sequential(
            nn.Conv1d(in_dim, f, 3, padding=1),
            nn.Conv1d(f, f, 4, stride=2, padding=1),
            nn.ReLU(),
            _ResBlock(f),
            nn.Conv1d(f, f, 4, stride=2, padding=1),
            nn.ReLU(),
            _ResBlock(f),
            nn.Conv1d(f, f, 3, stride=1, padding=1),
            nn.ReLU(),
            _ResBlock(f),
            nn.Conv1d(f, f, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv1d(f, f, 3, padding=1),
            _ResBlock(f),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv1d(f, f, 3, padding=1),
            nn.ReLU(),
            _ResBlock(f),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv1d(f, f, 3, padding=1),
            nn.ReLU(),
            _ResBlock(f),
            nn.Conv1d(f, in_dim, 3, padding=1),
        )
        self.register_buffer("codebooks", torch.randn(q + 1, k, f) * 0.1)
        self.register_buffer("ema_size", torch.ones(q + 1, k))
        self.register_buffer("ema_sum", self.codebooks.clone())
        self.register_buffer("unused_steps", torch.zeros(q + 1, k, dtype=torch.long))
        self.register_buffer("norm_mean", torch.zeros(in_dim))
        self.register_buffer("norm_std", torch.ones(in_dim))
        self.to(dtype)
        self._reseed_gen = torch.Generator().manual_seed(seed + 0x5EED)

    @property
    def n_layers(self) -> int:
        return self.codebooks.shape[0]

    def codebook(self, layer: int) -> Codebook:
        return Codebook(
            entries=self.codebooks[layer].detach().cpu().numpy().copy(),
            usage_counts=self.unused_steps[layer].cpu().numpy().copy(),
            layer_index=layer,
        )

    def set_normalizer(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.norm_mean.copy_(torch.as_tensor(mean, dtype=self.norm_mean.dtype))
        self.norm_std.copy_(torch.as_tensor(std, dtype=self.norm_std.dtype).clamp_min(1e-6))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.norm_mean) / self.norm_std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.norm_std + self.norm_mean

    def encode_latents(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, in_dim) raw features -> (B, T/4, f) latents."""
        if x.shape[1] % DOWNSAMPLE != 0:
            raise ShapeError(f"input length {x.shape[1]} not divisible by {DOWNSAMPLE}")
        h = self.normalize(x).transpose(1, 2)
        return self.encoder(h).transpose(1, 2)

    def decode_latents_normalized(self, z: torch.Tensor) -> torch.Tensor:
        """(B, n, f) -> (B, 4n, in_dim) in normalized feature space."""
        return self.decoder(z.transpose(1, 2)).transpose(1, 2)

    def decode_latents(self, z: torch.Tensor) -> torch.Tensor:
        return self.denormalize(self.decode_latents_normalized(z))

    def training_loss(
        self, x: torch.Tensor, layers_used: int
    ) -> tuple[torch.Tensor, dict]:
        """L1 reconstruction (normalized space) + eta * commitment, with
        straight-through gradients; returns (loss, aux) where aux carries
        the per-layer assignments and residual inputs for the EMA update."""
        z = self.encode_latents(x)
        flat = z.reshape(-1, z.shape[-1])
        residual = flat
        zhat = torch.zeros_like(flat)
        commit = flat.new_zeros(())
        assignments = []
        for q in range(layers_used + 1):
            idx, quant = quantize_nearest(residual.detach(), self.codebooks[q])
            quant = quant.detach()
            commit = commit + ((residual - quant) ** 2).mean()
            assignments.append((idx, residual.detach().clone()))
            zhat = zhat + quant
            residual = residual - quant
        ste = flat + (zhat - flat).detach()
        recon = self.decode_latents_normalized(ste.reshape(z.shape))
        recon_loss = torch.abs(recon - self.normalize(x)).mean()
        loss = recon_loss + self.config.eta * commit
        aux = {
            "assignments": assignments,
            "recon_l1": float(recon_loss.detach()),
            "commit": float(commit.detach()),
            "layers_used": layers_used,
        }
        return loss, aux

    @torch.no_grad()
    def ema_update(self, aux: dict) -> None:
        decay = self.config.ema_decay
        k = self.config.codebook_size
        eps = 1e-5
        for q, (idx, res_in) in enumerate(aux["assignments"]):
            counts = torch.bincount(idx, minlength=k).to(self.ema_size.dtype)
            sums = torch.zeros_like(self.ema_sum[q])
            sums.index_add_(0, idx, res_in)
            self.ema_size[q].mul_(decay).add_(counts, alpha=1 - decay)
            self.ema_sum[q].mul_(decay).add_(sums, alpha=1 - decay)
            n = self.ema_size[q].sum()
            smoothed = (self.ema_size[q] + eps) / (n + k * eps) * n
            self.codebooks[q].copy_(self.ema_sum[q] / smoothed[:, None])
            used = counts > 0
            self.unused_steps[q][used] = 0
            self.unused_steps[q][~used] += 1
            dead = self.unused_steps[q] >= self.config.reseed_after
            if dead.any():
                pick = torch.randint(
                    0, res_in.shape[0], (int(dead.sum()),), generator=self._reseed_gen
                )
                fresh = res_in[pick]
                self.codebooks[q][dead] = fresh
                self.ema_sum[q][dead] = fresh
                self.ema_size[q][dead] = 1.0
                self.unused_steps[q][dead] = 0
        if not torch.isfinite(self.codebooks).all():
            raise NumericError("codebooks became non-finite during EMA update")

    @torch.no_grad()
    def bootstrap_codebooks(self, x: torch.Tensor) -> None:
        """Initialize each layer's entries from the residual distribution it
        will quantize, using a seeded draw from an init batch."""
        z = self.encode_latents(x).reshape(-1, self.config.latent_dim)
        residual = z
        for q in range(self.n_layers):
            pick = torch.randint(
                0, residual.shape[0], (self.config.codebook_size,), generator=self._reseed_gen
            )
            self.codebooks[q].copy_(residual[pick])
            self.ema_sum[q].copy_(self.codebooks[q])
            self.ema_size[q].fill_(1.0)
            _, quant = quantize_nearest(residual, self.codebooks[q])
            residual = residual - quant

    @torch.no_grad()
    def encode_codes(self, x: torch.Tensor, layers_used: int = 0) -> list[torch.Tensor]:
        """(1, T, in_dim) -> per-layer code tensors of shape (n,)."""
        z = self.encode_latents(x).reshape(-1, self.config.latent_dim)
        codes, _, _ = rvq_encode(z, self.codebooks, layers_used)
        return codes

    @torch.no_grad()
    def decode_codes(self, codes: np.ndarray | torch.Tensor) -> np.ndarray:
        """Base-layer codes (n,) -> raw part features (4n, in_dim)."""
        idx = torch.as_tensor(np.asarray(codes).copy(), dtype=torch.long)
        if idx.numel() == 0:
            return np.zeros((0, self.in_dim), dtype=np.float32)
        if idx.min() < 0 or idx.max() >= self.config.codebook_size:
            raise InvalidCodeError(
                f"code {int(idx.max())} out of range [0, {self.config.codebook_size})"
            )
        z = self.codebooks[0][idx][None]
        out = self.decode_latents(z)[0]
        return out.cpu().numpy().astype(np.float32)


def motion_windows(
    clips: list[MotionClip], part: str, window: int = 64, stride: int = 16
) -> np.ndarray:
    """Sliding 64-frame training windows of one part's features."""
    rows = []
    for clip in clips:
        feats = clip.part_features(part)
        for start in range(0, clip.n_frames - window + 1, stride):
            rows.append(feats[start : start + window])
    if not rows:
        raise ConfigError(f"no {window}-frame windows available for part {part!r}")
    return np.stack(rows)


def train_codec(
    windows: np.ndarray,
    part: str,
    config: CodecConfig | None = None,
    train: CodecTrainConfig | None = None,
    seed: int = 0,
) -> tuple[RvqCodec, list[dict]]:
    """Train one part codec on (num, window, in_dim) feature windows."""
    config = config or CodecConfig()
    train = train or CodecTrainConfig()
    windows = np.asarray(windows, dtype=np.float32)
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ConfigError(f"windows must be a nonempty (num, T, C) array, got {windows.shape}")
    codec = RvqCodec(part=part, in_dim=windows.shape[2], config=config, seed=seed)
    mean = windows.mean(axis=(0, 1))
    std = windows.std(axis=(0, 1))
    codec.set_normalizer(mean, std)
    rng = np.random.default_rng(seed)
    init_idx = rng.integers(0, windows.shape[0], size=min(windows.shape[0], train.batch_size * 4))
    codec.bootstrap_codebooks(torch.from_numpy(windows[init_idx]))
    opt = torch.optim.Adam(
        list(codec.encoder.parameters()) + list(codec.decoder.parameters()), lr=train.lr
    )
    milestones = [max(1, int(m * train.steps)) for m in train.lr_milestones]
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=train.lr_gamma)
    q = config.n_residual_layers
    history = []
    for step in range(train.steps):
        idx = rng.integers(0, windows.shape[0], size=train.batch_size)
        layers_used = int(rng.integers(0, q + 1)) if train.quantizer_dropout else q
        x = torch.from_numpy(windows[idx])
        loss, aux = codec.training_loss(x, layers_used)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        codec.ema_update(aux)
        history.append(
            {
                "step": step,
                "loss": float(loss.detach()),
                "recon_l1": aux["recon_l1"],
                "commit": aux["commit"],
                "layers_used": layers_used,
                "lr": sched.get_last_lr()[0],
            }
        )
    codec.eval()
    return codec, history


@torch.no_grad()
def reconstruction_l1(codec: RvqCodec, windows: np.ndarray, layers_used: int) -> float:
    """Mean absolute reconstruction error in raw feature space."""
    x = torch.from_numpy(np.asarray(windows, dtype=np.float32))
    z = codec.encode_latents(x)
    flat = z.reshape(-1, z.shape[-1])
    _, zhat, _ = rvq_encode(flat, codec.codebooks, layers_used)
    recon = codec.decode_latents(zhat.reshape(z.shape))
    return float(torch.abs(recon - x).mean())


def tokenize_motion(
    clip: MotionClip, codecs: dict[str, RvqCodec]
) -> dict[str, CodeSequence]:
    """Base-layer codes for all three parts at frame_rate/4 tokens/s.

    Clips whose length is not divisible by 4 are padded by repeating the
    last frame; the returned sequences carry a `padded` flag.
    """
    missing = set(PARTS) - set(codecs)
    if missing:
        raise ConfigError(f"missing codecs for parts {sorted(missing)}")
    n = clip.n_frames
    padded = n % DOWNSAMPLE != 0
    if n == 0:
        return {
            p: CodeSequence(
                body_part=p,
                codes=np.zeros(0, dtype=np.int64),
                layer=0,
                codebook_size=codecs[p].config.codebook_size,
            )
            for p in PARTS
        }
    frames = clip.frames
    if padded:
        pad = DOWNSAMPLE - n % DOWNSAMPLE
        frames = np.concatenate([frames, np.repeat(frames[-1:], pad, axis=0)], axis=0)
        clip = MotionClip(frames=frames, frame_rate=clip.frame_rate, part_masks=clip.part_masks)
    out = {}
    for part in PARTS:
        codec = codecs[part]
        feats = torch.from_numpy(clip.part_features(part)[None].copy())
        codes = codec.encode_codes(feats, layers_used=0)[0]
        out[part] = CodeSequence(
            body_part=part,
            codes=codes.cpu().numpy(),
            layer=0,
            codebook_size=codec.config.codebook_size,
            padded=padded,
        )
    return out


def decode_motion(
    codes: dict[str, CodeSequence],
    codecs: dict[str, RvqCodec],
    frame_rate: float,
    n_joints: int,
) -> MotionClip:
    """Pure function of codes: identical codes give bitwise-identical motion."""
    lengths = {p: len(codes[p]) for p in PARTS}
    if len(set(lengths.values())) != 1:
        raise ShapeError(f"per-part code lengths disagree: {lengths}")
    parts = {p: codecs[p].decode_codes(codes[p].codes) for p in PARTS}
    return clip_from_part_features(
        parts, n_joints=n_joints, frame_rate=frame_rate, part_masks=default_part_masks(n_joints)
    )


def save_codec(path: str, codec: RvqCodec) -> None:
    cfg = codec.config
    header = struct.pack(
        "<IBIIIIf",
        CODEC_VERSION,
        _PART_CODES[codec.part],
        cfg.codebook_size,
        cfg.latent_dim,
        cfg.n_residual_layers,
        codec.in_dim,
        cfg.eta,
    )
    arrays = {k: v.detach().cpu().numpy() for k, v in codec.state_dict().items()}
    serial.write_checked(path, CODEC_MAGIC, header, arrays)


def load_codec(path: str) -> RvqCodec:
    body, off = serial.read_checked(path, CODEC_MAGIC)
    hdr = struct.calcsize("<IBIIIIf")
    version, part_code, k, f, q, in_dim, eta = struct.unpack("<IBIIIIf", body[:hdr])
    if version != CODEC_VERSION:
        raise FormatError(f"unsupported codec version {version}", off)
    part = {v: k2 for k2, v in _PART_CODES.items()}.get(part_code)
    if part is None:
        raise FormatError(f"unknown part code {part_code}", off + 4)
    config = CodecConfig(codebook_size=k, latent_dim=f, n_residual_layers=q, eta=float(eta))
    codec = RvqCodec(part=part, in_dim=in_dim, config=config)
    arrays = serial.unpack_arrays(body[hdr:], off + hdr)
    state = {k2: torch.from_numpy(v) for k2, v in arrays.items()}
    codec.load_state_dict(state)
    codec.eval()
    return codec
