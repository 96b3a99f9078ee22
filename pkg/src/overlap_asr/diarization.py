"""Toy self-attentive end-to-end diarizer with encoder-decoder attractors (EEND-EDA style)."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import SpeakerActivity
from .features import InputError, stack_context
from .training import TrainConfig, fit, length_batches

EPS = 1e-7


@dataclass
class DiarizerConfig:
    input_dim: int = 200
    encoder_blocks: int = 2
    model_dim: int = 64
    attention_heads: int = 4
    ff_dim: int = 128
    attractor_hidden_dim: int = 64
    max_speakers: int = 2
    threshold: float = 0.5
    median_window: int = 11
    subsampling: int = 5
    dropout: float = 0.1
    existence_threshold: float = 0.5

    def __post_init__(self):
        if self.model_dim % self.attention_heads:
            raise InputError("model_dim must be divisible by attention_heads")
        if self.max_speakers < 2:
            raise InputError("max_speakers must be at least 2")
        if not 0 < self.threshold < 1:
            raise InputError("threshold must lie in (0, 1)")


@dataclass
class DiarizerTrainConfig(TrainConfig):
    lr: float = 1e-3
    chunk_frames: int = 500
    batch_size: int = 16
    existence_weight: float = 1.0


@dataclass
class DiarizationResult:
    posteriors: np.ndarray  # N x S, in (0, 1)
    attractor_existence: np.ndarray  # S + 1
    binary_activity: np.ndarray  # N x S
    num_speakers: int = 0
    frame_shift: float = 0.01

    def activity(self) -> SpeakerActivity:
        return SpeakerActivity(self.binary_activity, self.frame_shift)


class EENDEDA(nn.Module):
    def __init__(self, cfg: DiarizerConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.register_buffer("feat_mean", torch.zeros(cfg.input_dim))
        self.register_buffer("feat_std", torch.ones(cfg.input_dim))
        self.proj = nn.Linear(cfg.input_dim, d)
        self.norm = nn.LayerNorm(d)
        layer = nn.TransformerEncoderLayer(d, cfg.attention_heads, cfg.ff_dim, cfg.dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.encoder_blocks, enable_nested_tensor=False)
        h = cfg.attractor_hidden_dim
        self.eda_encoder = nn.LSTM(d, h, batch_first=True)
        self.eda_decoder = nn.LSTM(d, h, batch_first=True)
        self.attractor_proj = nn.Identity() if h == d else nn.Linear(h, d)
        self.existence = nn.Linear(d, 1)

    def set_normalization(self, mean, std):
        self.feat_mean.copy_(torch.as_tensor(mean, dtype=self.feat_mean.dtype))
        self.feat_std.copy_(torch.as_tensor(np.maximum(std, 1e-3), dtype=self.feat_std.dtype))

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """(B, N, input_dim) stacked features -> (B, ceil(N/sub), d) frame embeddings."""
        x = x[:, :: self.cfg.subsampling]
        x = (x - self.feat_mean) / self.feat_std
        return self.encoder(self.norm(self.proj(x)))

    def attractors(self, emb: torch.Tensor, num: int, generator: torch.Generator | None = None):
        """Attractors and existence logits; frame order is shuffled when a generator is given."""
        if generator is not None:
            perm = torch.randperm(emb.shape[1], generator=generator)
            emb = emb[:, perm]
        _, state = self.eda_encoder(emb)
        zeros = emb.new_zeros(emb.shape[0], num, emb.shape[2])
        out, _ = self.eda_decoder(zeros, state)
        att = self.attractor_proj(out)
        return att, self.existence(att).squeeze(-1)

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None):
        """Returns activity logits (B, N', S+1) and existence logits (B, S+1)."""
        emb = self.embed(x)
        att, exist = self.attractors(emb, self.cfg.max_speakers + 1, generator)
        return emb @ att.transpose(1, 2), exist


def _bce(p, y):
    p = p.clamp(EPS, 1 - EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def pit_bce_loss(posteriors, labels):
    """Utterance-level permutation-invariant BCE.

    ``loss = min_pi mean BCE(posteriors[:, pi], labels)``; returns
    ``(loss, pi)`` where column ``pi[j]`` of the posteriors is matched to
    label column ``j``.  Works on numpy arrays or torch tensors.
    """
    as_numpy = not isinstance(posteriors, torch.Tensor)
    p = torch.as_tensor(np.asarray(posteriors, dtype=np.float64)) if as_numpy else posteriors
    y = torch.as_tensor(np.asarray(labels, dtype=np.float64)) if as_numpy else labels.to(p.dtype)
    if p.shape != y.shape or p.dim() != 2:
        raise InputError(f"posterior shape {tuple(p.shape)} does not match labels {tuple(y.shape)}")
    return _pit(lambda perm: _bce(p[:, list(perm)], y).mean(), p.shape[1], as_numpy)


def pit_bce_with_logits(logits: torch.Tensor, labels: torch.Tensor):
    """Same criterion on logits, numerically stable for training."""
    if logits.shape != labels.shape:
        raise InputError("logit and label shapes differ")
    return _pit(lambda perm: F.binary_cross_entropy_with_logits(logits[:, list(perm)], labels), logits.shape[1], False)


def _pit(loss_of, s, as_numpy):
    best, best_perm = None, None
    for perm in itertools.permutations(range(s)):
        loss = loss_of(perm)
        if best is None or float(loss.detach()) < float(best.detach()):
            best, best_perm = loss, perm
    return (float(best), best_perm) if as_numpy else (best, best_perm)


def threshold_activity(posteriors: np.ndarray, threshold: float = 0.5, median_window: int = 11) -> np.ndarray:
    """Binarise at ``threshold`` then median-filter each speaker column (edges replicated)."""
    if median_window < 1 or median_window % 2 == 0:
        raise InputError(f"median window must be a positive odd number, got {median_window}")
    if not 0 < threshold < 1:
        raise InputError("threshold must lie in (0, 1)")
    b = (np.asarray(posteriors) > threshold).astype(np.float64)
    if b.ndim == 1:
        b = b[:, None]
    if median_window == 1:
        return b
    return scipy.ndimage.median_filter(b, size=(median_window, 1), mode="nearest")


def diarization_loss(model: EENDEDA, x: torch.Tensor, labels: list, generator=None,
                     existence_weight: float = 1.0) -> torch.Tensor:
    """PIT BCE over the active speakers of each item plus attractor-existence BCE.

    Args:
        x: (B, N, D) stacked features.
        labels: per item, an (N', n_active) float tensor at the subsampled rate.
    """
    logits, exist = model(x, generator)
    s1 = model.cfg.max_speakers + 1
    act_losses = []
    ex_targets = torch.zeros_like(exist)
    for b, y in enumerate(labels):
        n = y.shape[1]
        ex_targets[b, :n] = 1
        if n:
            loss, _ = pit_bce_with_logits(logits[b, : y.shape[0], :n], y.to(logits.dtype))
            act_losses.append(loss)
    ex_loss = F.binary_cross_entropy_with_logits(exist[:, :s1], ex_targets)
    act = torch.stack(act_losses).mean() if act_losses else exist.new_zeros(())
    return act + existence_weight * ex_loss


def active_label_columns(act: np.ndarray) -> np.ndarray:
    """Keep only speakers that talk at least once, ordered by first activity."""
    cols = [s for s in range(act.shape[1]) if act[:, s].any()]
    cols.sort(key=lambda s: int(np.argmax(act[:, s] > 0)))
    return act[:, cols]


def make_training_windows(features: list, activities: list, cfg: DiarizerConfig, chunk_frames: int):
    """Cut conversations into fixed windows; returns (stacked x, subsampled labels) pairs."""
    items = []
    for x, act in zip(features, activities):
        n = len(x)
        for start in range(0, max(n - chunk_frames // 2, 1), chunk_frames):
            sl = slice(start, min(start + chunk_frames, n))
            xs = x[sl]
            ys = active_label_columns(act[sl][:: cfg.subsampling])
            items.append((xs.astype(np.float32), ys.astype(np.float32)))
    return items


def build_diarizer(cfg: DiarizerConfig, seed: int = 0) -> EENDEDA:
    torch.manual_seed(seed)
    return EENDEDA(cfg)


def train_diarizer(features: list, activities: list, cfg: DiarizerConfig, train_cfg: DiarizerTrainConfig,
                   model: EENDEDA | None = None, state: dict | None = None, on_epoch=None):
    """Train (or fine-tune, when ``model`` is given) on stacked features and binary activities.

    Returns ``(model, state)``; ``state["history"]`` holds the per-step loss.
    """
    if not features:
        raise InputError("training corpus is empty")
    if model is None:
        model = build_diarizer(cfg, train_cfg.seed)
        allx = np.concatenate(features)
        model.set_normalization(allx.mean(0), allx.std(0))
    items = make_training_windows(features, activities, cfg, train_cfg.chunk_frames)
    batches = []
    for idx in length_batches([len(x) for x, _ in items], train_cfg.batch_size):
        # equal lengths inside a batch; items of a different length go to their own batch
        by_len = {}
        for i in idx:
            by_len.setdefault(len(items[i][0]), []).append(i)
        for group in by_len.values():
            x = torch.from_numpy(np.stack([items[i][0] for i in group]))
            batches.append((x, [torch.from_numpy(items[i][1]) for i in group]))

    def loss_fn(m, batch, rng):
        gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
        x, labels = batch
        return diarization_loss(m, x, labels, gen, train_cfg.existence_weight)

    state = fit(model, batches, loss_fn, train_cfg, state, on_epoch)
    model.eval()
    return model, state


@torch.no_grad()
def diarizer_forward(x_stacked: np.ndarray, model: EENDEDA, cfg: DiarizerConfig | None = None,
                     frame_shift: float = 0.01) -> DiarizationResult:
    """Frame-level speaker posteriors, attractor existence and smoothed binary activity."""
    cfg = cfg or model.cfg
    x = np.asarray(x_stacked)
    if x.ndim != 2 or len(x) == 0:
        raise InputError("diarizer input must be a non-empty frames x dims matrix")
    model.eval()
    dtype = next(model.parameters()).dtype
    logits, exist = model(torch.as_tensor(x, dtype=dtype)[None])
    s = cfg.max_speakers
    post = torch.sigmoid(logits[0, :, :s].double()).numpy()
    post = np.repeat(post, cfg.subsampling, axis=0)[: len(x)]
    post = np.clip(post, EPS, 1 - EPS)
    ex = torch.sigmoid(exist[0].double()).numpy()
    n_spk = 0
    while n_spk < s and ex[n_spk] > cfg.existence_threshold:
        n_spk += 1
    binary = threshold_activity(post, cfg.threshold, cfg.median_window)
    binary[:, n_spk:] = 0
    return DiarizationResult(post, ex, binary, n_spk, frame_shift)


def diarize_features(frames: np.ndarray, model: EENDEDA, context: int = 2, frame_shift=0.01) -> DiarizationResult:
    return diarizer_forward(stack_context(frames, context), model, frame_shift=frame_shift)
