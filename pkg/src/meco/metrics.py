"""Evaluation metrics: Fréchet gesture distance, beat constancy, L1
diversity, and text-capability retention.

FGD comes in two flavors: features are either raw pose vectors over fixed
windows ("fgd2") or embeddings from a small temporal autoencoder trained on
real motion ("fgd1").
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NumericError, ShapeError, UndefinedMetricError
from .motion import MotionClip
from .rotations import geodesic_angle
from . import serial

AE_MAGIC = b"MECF"
AE_VERSION = 1


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mu.ndim != 1 or cov.shape != (mu.size, mu.size):
            raise ShapeError(f"moment shapes disagree: mean {mu.shape}, cov {cov.shape}")
        if np.abs(cov - cov.T).max() > 1e-8:
            raise NumericError("covariance not symmetric within 1e-8")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", cov)


@dataclass
class MetricConfig:
    sigma_bc: float = 0.1  # seconds
    fgd_window_frames: int = 1
    ae_feature_dim: int = 32
    ae_window: int = 32  # frames; must be divisible by 4
    beat_smooth_sigma: float = 1.2  # frames
    beat_smooth_window: int = 5  # frames
    beat_prominence: float = 0.05  # fraction of smoothed-signal range

    def __post_init__(self):
        if self.sigma_bc <= 0:
            raise ConfigError(f"sigma_bc must be positive, got {self.sigma_bc}")


def moments_from_features(features: np.ndarray) -> GaussianMoments:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got {x.shape}")
    if x.shape[0] < x.shape[1] + 1:
        raise NumericError(
            f"need at least dim+1 = {x.shape[1] + 1} samples for a full-rank "
            f"covariance, got {x.shape[0]}"
        )
    return GaussianMoments(mean=x.mean(axis=0), cov=np.cov(x, rowvar=False))


def _psd_sqrt(cov: np.ndarray, clamp: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -clamp:
        raise NumericError(
            f"covariance has eigenvalue {vals.min():.3e} below -{clamp:g}; "
            f"condition number {vals.max() / max(abs(vals.min()), 1e-300):.3e}"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fgd_from_moments(
    real: GaussianMoments, gen: GaussianMoments, clamp: float = 1e-6
) -> float:
    """||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2}).

    The cross sqrt is computed through the symmetrized product
    sqrt(S_r) S_g sqrt(S_r), whose eigenvalues are those of S_r S_g; small
    negative eigenvalues are clamped to zero, larger ones raise.
    """
    if real.mean.shape != gen.mean.shape:
        raise ShapeError(
            f"feature dims disagree: {real.mean.shape} vs {gen.mean.shape}"
        )
    s_r = _psd_sqrt(real.cov, clamp)
    inner = s_r @ gen.cov @ s_r
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigh(inner)[0]
    if vals.min() < -clamp:
        raise NumericError(
            f"symmetrized product has eigenvalue {vals.min():.3e} below -{clamp:g}; "
            f"condition number {vals.max() / max(abs(vals.min()), 1e-300):.3e}"
        )
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = real.mean - gen.mean
    value = float(diff @ diff + np.trace(real.cov) + np.trace(gen.cov) - 2.0 * tr_sqrt)
    if value < -clamp:
        raise NumericError(f"fgd evaluated to {value:.3e} < -{clamp:g}")
    return max(value, 0.0)


def fgd(real_features: np.ndarray, gen_features: np.ndarray) -> float:
    return fgd_from_moments(
        moments_from_features(real_features), moments_from_features(gen_features)
    )


def raw_pose_features(clips: list[MotionClip], window_frames: int = 1) -> np.ndarray:
    """FGD2 features: flattened non-overlapping windows of raw pose vectors."""
    if not clips:
        raise UndefinedMetricError("no clips given")
    if window_frames < 1:
        raise ConfigError(f"window_frames must be >= 1, got {window_frames}")
    rows = []
    for clip in clips:
        if clip.n_frames < window_frames:
            raise ShapeError(
                f"window of {window_frames} frames longer than clip ({clip.n_frames})"
            )
        n_win = clip.n_frames // window_frames
        w = clip.frames[: n_win * window_frames].reshape(n_win, -1)
        rows.append(w.astype(np.float64))
    return np.concatenate(rows, axis=0)


class MotionAutoencoder(nn.Module):
    """Temporal conv autoencoder used as the learned FGD feature extractor."""

    def __init__(self, in_dim: int, feature_dim: int = 32, window: int = 32, hidden: int = 64):
        super().__init__()
        if window % 4 != 0:
            raise ConfigError(f"autoencoder window must be divisible by 4, got {window}")
        self.in_dim = in_dim
        self.feature_dim = feature_dim
        self.window = window
        self.hidden = hidden
        self.encoder = nn.Sequential(
            nn.Conv1d(in_dim, hidden, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv1d(hidden, hidden, 4, stride=2, padding=1),
            nn.ReLU(),
        )
        self.to_feature = nn.Linear(hidden, feature_dim)
        self.from_feature = nn.Linear(feature_dim, hidden * (window // 4))
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv1d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv1d(hidden, in_dim, 3, padding=1),
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        h = self.encoder(x.transpose(1, 2)).mean(dim=2)
        return self.to_feature(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.encode(x)
        h = self.from_feature(z).view(x.shape[0], self.hidden, self.window // 4)
        return self.decoder(h).transpose(1, 2)


def _clip_windows(clips: list[MotionClip], window: int, hop: int) -> np.ndarray:
    rows = []
    for clip in clips:
        if clip.n_frames < window:
            raise ShapeError(f"window of {window} frames longer than clip ({clip.n_frames})")
        for start in range(0, clip.n_frames - window + 1, hop):
            rows.append(clip.frames[start : start + window])
    return np.stack(rows).astype(np.float32)


def train_fgd_autoencoder(
    clips: list[MotionClip],
    feature_dim: int = 32,
    window: int = 32,
    hop: int = 10,
    epochs: int = 40,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> tuple[MotionAutoencoder, list[float]]:
    """Train the FGD1 feature extractor on real motion; returns loss history."""
    windows = _clip_windows(clips, window, hop)
    mean = windows.mean(axis=(0, 1))
    std = windows.std(axis=(0, 1)) + 1e-6
    torch.manual_seed(seed)
    model = MotionAutoencoder(in_dim=windows.shape[2], feature_dim=feature_dim, window=window)
    model.norm_mean = torch.from_numpy(mean)
    model.norm_std = torch.from_numpy(std)
    x_all = torch.from_numpy((windows - mean) / std)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(x_all))
        total, count = 0.0, 0
        for i in range(0, len(order), batch_size):
            batch = x_all[order[i : i + batch_size]]
            recon = model(batch)
            loss = torch.mean(torch.abs(recon - batch))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(batch)
            count += len(batch)
        history.append(total / count)
    model.eval()
    return model, history


def autoencoder_features(
    clips: list[MotionClip], model: MotionAutoencoder, hop: int = 10
) -> np.ndarray:
    windows = _clip_windows(clips, model.window, hop)
    x = (torch.from_numpy(windows) - model.norm_mean) / model.norm_std
    with torch.no_grad():
        z = model.encode(x)
    return z.numpy().astype(np.float64)


def save_fgd_autoencoder(path: str, model: MotionAutoencoder) -> None:
    import struct

    header = struct.pack(
        "<IIIII", AE_VERSION, model.in_dim, model.feature_dim, model.window, model.hidden
    )
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    arrays["norm_mean"] = model.norm_mean.numpy()
    arrays["norm_std"] = model.norm_std.numpy()
    serial.write_checked(path, AE_MAGIC, header, arrays)


def load_fgd_autoencoder(path: str) -> MotionAutoencoder:
    import struct

    body, off = serial.read_checked(path, AE_MAGIC)
    version, in_dim, feature_dim, window, hidden = struct.unpack("<IIIII", body[:20])
    if version != AE_VERSION:
        raise serial.FormatError(f"unsupported autoencoder version {version}", off)
    arrays = serial.unpack_arrays(body[20:], off + 20)
    model = MotionAutoencoder(in_dim=in_dim, feature_dim=feature_dim, window=window, hidden=hidden)
    model.norm_mean = torch.from_numpy(arrays.pop("norm_mean"))
    model.norm_std = torch.from_numpy(arrays.pop("norm_std"))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return model


def angular_speed(clip: MotionClip) -> tuple[np.ndarray, np.ndarray]:
    """Mean joint angular speed (rad/frame) between consecutive frames.

    Returns (times, speeds); speed i covers the step frame i -> i+1 and is
    stamped at the midpoint (i + 0.5) / fps.
    """
    if clip.n_frames < 2:
        return np.empty(0), np.empty(0)
    rots = clip.joint_rotmats()
    ang = geodesic_angle(rots[:-1], rots[1:])  # (N-1, J)
    speeds = ang.mean(axis=1)
    times = (np.arange(clip.n_frames - 1) + 0.5) / clip.frame_rate
    return times, speeds


def _gaussian_smooth(x: np.ndarray, sigma: float, window: int) -> np.ndarray:
    radius = window // 2
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(x, radius, mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def extract_gesture_beats(clip: MotionClip, config: MetricConfig | None = None) -> np.ndarray:
    """Beat times (s): local minima of smoothed mean angular speed.

    Plateaus count once (their center); shallow minima below the prominence
    threshold are discarded.
    """
    cfg = config or MetricConfig()
    times, speeds = angular_speed(clip)
    if speeds.size < 3:
        return np.empty(0)
    s = _gaussian_smooth(speeds, cfg.beat_smooth_sigma, cfg.beat_smooth_window)
    span = s.max() - s.min()
    threshold = cfg.beat_prominence * span
    beats = []
    i = 1
    n = len(s)
    while i < n - 1:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        if j == n - 1:
            break
        if s[i - 1] > s[i] and s[j + 1] > s[j]:
            # minimum over the run [i, j]; prominence against the nearest
            # enclosing peaks
            k = i - 1
            while k - 1 >= 0 and s[k - 1] >= s[k]:
                k -= 1
            m = j + 1
            while m + 1 < n and s[m + 1] >= s[m]:
                m += 1
            if min(s[k], s[m]) - s[i] >= threshold:
                beats.append(times[(i + j) // 2])
        i = j + 1
    return np.asarray(beats)


def beat_constancy(
    gesture_beats: np.ndarray, audio_beats: np.ndarray, sigma_bc: float = 0.1
) -> float:
    """Mean over gesture beats of exp(-min_a ||b_g - b_a||^2 / (2 sigma^2))."""
    g = np.asarray(gesture_beats, dtype=np.float64)
    a = np.asarray(audio_beats, dtype=np.float64)
    if g.size == 0 or a.size == 0:
        raise UndefinedMetricError(
            f"beat constancy undefined: {g.size} gesture beats, {a.size} audio beats"
        )
    if sigma_bc <= 0:
        raise ConfigError(f"sigma_bc must be positive, got {sigma_bc}")
    d2 = (g[:, None] - a[None, :]) ** 2
    nearest = d2.min(axis=1)
    return float(np.mean(np.exp(-nearest / (2.0 * sigma_bc**2))))


def joint_positions(clip: MotionClip) -> np.ndarray:
    """Per-frame joint positions (N, 3J): each joint's rotation applied to a
    unit bone, root translation zeroed."""
    rots = clip.joint_rotmats()  # (N, J, 3, 3)
    bone = np.array([0.0, 0.0, 1.0])
    pos = rots @ bone  # (N, J, 3)
    return pos.reshape(clip.n_frames, -1)


def l1_diversity_from_positions(position_seqs: list[np.ndarray]) -> float:
    """(1 / 2N(N-1)) * sum_{i,j} ||p^i - p^j||_1 over all ordered pairs."""
    n = len(position_seqs)
    if n < 2:
        raise ConfigError(f"diversity needs at least 2 clips, got {n}")
    shapes = {p.shape for p in position_seqs}
    if len(shapes) != 1:
        raise ShapeError(f"position sequences have mismatched shapes: {shapes}")
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += 2.0 * float(np.abs(position_seqs[i] - position_seqs[j]).sum())
    return total / (2.0 * n * (n - 1))


def l1_diversity(clips: list[MotionClip]) -> float:
    if len(clips) < 2:
        raise ConfigError(f"diversity needs at least 2 clips, got {len(clips)}")
    lengths = {c.n_frames for c in clips}
    if len(lengths) != 1:
        raise ShapeError(f"clips have mismatched lengths: {sorted(lengths)}")
    return l1_diversity_from_positions([joint_positions(c) for c in clips])


def text_retention(base_model, tuned_model, text: bytes, chunk_len: int = 256) -> dict:
    """Held-out byte perplexity of both models and relative degradation.

    Both perplexities restrict the softmax to the shared text-byte rows so
    the comparison is invariant to vocabulary extension.
    """
    from .stages import eval_text_perplexity

    if not text:
        raise ConfigError("retention corpus is empty")
    ppl_base = eval_text_perplexity(base_model, text, chunk_len=chunk_len, restrict_to_text=True)
    ppl_tuned = eval_text_perplexity(tuned_model, text, chunk_len=chunk_len, restrict_to_text=True)
    return {
        "ppl_base": ppl_base,
        "ppl_tuned": ppl_tuned,
        "degradation": (ppl_tuned - ppl_base) / ppl_base,
    }
