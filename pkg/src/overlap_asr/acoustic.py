"""Speaker-activity conditioned acoustic models (ICAM, GFAM), BLSTM baselines and embedding analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .features import InputError
from .training import TrainConfig, fit, length_batches

MODEL_KINDS = ("icam", "gfam", "blstm-iso", "blstm-mix")


@dataclass
class AMConfig:
    input_dim: int = 200
    tdnn_dim: int = 64
    tdnn_context: int = 3
    embedding_dim: int = 100
    blstm_units: int = 64
    blstm_layers: int = 3
    gfam_pre_layers: int = 1
    gfam_post_layers: int = 2
    num_senones: int = 64
    input_context: int = 2
    spk_feat_dim: int = 100

    @classmethod
    def full_scale(cls, num_senones: int = 8776) -> "AMConfig":
        return cls(tdnn_dim=512, blstm_units=512, blstm_layers=6, gfam_pre_layers=2,
                   gfam_post_layers=4, num_senones=num_senones)

    @property
    def receptive_field(self) -> int:
        """One-sided context of the embedding branch in raw frames, input stacking included."""
        return self.input_context + 2 * self.tdnn_context


@dataclass
class AMTrainConfig(TrainConfig):
    lr: float = 1e-4
    batch_size: int = 16
    inactive_as_class0: bool = True


def weighted_average_pool(h, activity):
    """Activity-weighted mean over frames; the zero vector when total weight is zero.

    Accepts (N, D) with (N,) weights or batched (B, N, D) with (B, N).
    numpy in, numpy out.
    """
    as_numpy = not isinstance(h, torch.Tensor)
    ht = torch.as_tensor(np.asarray(h, dtype=np.float64)) if as_numpy else h
    at = torch.as_tensor(np.asarray(activity, dtype=np.float64)) if as_numpy else activity.to(h.dtype)
    if at.shape != ht.shape[:-1]:
        raise InputError(f"activity shape {tuple(at.shape)} does not match features {tuple(ht.shape)}")
    if bool((at < 0).any()):
        raise InputError("pooling weights must be non-negative")
    total = at.sum(-1, keepdim=True)
    # normalise before weighting so tiny weights do not underflow in the product
    weights = at / torch.where(total > 0, total, torch.ones_like(total))
    pooled = (weights.unsqueeze(-1) * ht).sum(-2)
    pooled = torch.where(total > 0, pooled, torch.zeros_like(pooled))
    return pooled.numpy() if as_numpy else pooled


class TDNN(nn.Module):
    """Frame-synchronous 3-tap layer with taps at -context, 0, +context."""

    def __init__(self, dim: int, context: int):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel_size=3, dilation=context, padding=context)

    def forward(self, x):  # (B, N, D)
        return F.relu(self.conv(x.transpose(1, 2)).transpose(1, 2))


class SpeakerEmbedder(nn.Module):
    """Linear -> TDNN -> TDNN -> activity-weighted pooling -> Linear."""

    def __init__(self, cfg: AMConfig):
        super().__init__()
        self.linear = nn.Linear(cfg.input_dim, cfg.tdnn_dim)
        self.tdnn1 = TDNN(cfg.tdnn_dim, cfg.tdnn_context)
        self.tdnn2 = TDNN(cfg.tdnn_dim, cfg.tdnn_context)
        self.out = nn.Linear(cfg.tdnn_dim, cfg.embedding_dim)

    def frame_features(self, x):
        return self.tdnn2(self.tdnn1(self.linear(x)))

    def forward(self, x, activity):
        pooled = weighted_average_pool(self.frame_features(x), activity)
        silent = (activity.sum(-1, keepdim=True) <= 0)
        return torch.where(silent, torch.zeros(1, dtype=x.dtype), self.out(pooled))


class BLSTM(nn.Module):
    def __init__(self, input_dim, units, layers):
        super().__init__()
        self.lstm = nn.LSTM(input_dim, units, num_layers=layers, batch_first=True, bidirectional=True)

    def forward(self, x, lengths=None):
        if lengths is None:
            return self.lstm(x)[0]
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        return pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])[0]


class _AMBase(nn.Module):
    kind = ""

    def __init__(self, cfg: AMConfig):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("feat_mean", torch.zeros(cfg.input_dim))
        self.register_buffer("feat_std", torch.ones(cfg.input_dim))

    def set_normalization(self, mean, std):
        self.feat_mean.copy_(torch.as_tensor(mean, dtype=self.feat_mean.dtype))
        self.feat_std.copy_(torch.as_tensor(np.maximum(std, 1e-3), dtype=self.feat_std.dtype))

    def normalize(self, x, lengths=None):
        x = (x - self.feat_mean) / self.feat_std
        if lengths is not None:
            mask = torch.arange(x.shape[1])[None, :] < lengths[:, None]
            x = x * mask.unsqueeze(-1).to(x.dtype)
        return x


class ICAM(_AMBase):
    """Speaker embedding repeated over frames and concatenated with the input features."""

    kind = "icam"

    def __init__(self, cfg: AMConfig):
        super().__init__(cfg)
        self.embedder = SpeakerEmbedder(cfg)
        self.blstm = BLSTM(cfg.input_dim + cfg.embedding_dim, cfg.blstm_units, cfg.blstm_layers)
        self.output = nn.Linear(2 * cfg.blstm_units, cfg.num_senones)

    def embed(self, x, activity, lengths=None):
        return self.embedder(self.normalize(x, lengths), activity)

    def forward(self, x, activity, lengths=None, return_internals=False):
        xn = self.normalize(x, lengths)
        c = self.embedder(xn, activity)
        joined = torch.cat([xn, c.unsqueeze(1).expand(-1, x.shape[1], -1)], dim=-1)
        h = self.blstm(joined, lengths)
        logp = F.log_softmax(self.output(h), dim=-1)
        if return_internals:
            return logp, {"embedding": c, "blstm_input": joined, "blstm_output": h}
        return logp


class GFAM(_AMBase):
    """Speaker embedding drives a sigmoid mask over the hidden features of the first BLSTM stack."""

    kind = "gfam"

    def __init__(self, cfg: AMConfig):
        super().__init__(cfg)
        self.embedder = SpeakerEmbedder(cfg)
        hid = 2 * cfg.blstm_units
        self.pre = BLSTM(cfg.input_dim, cfg.blstm_units, cfg.gfam_pre_layers)
        self.gate = nn.Linear(hid + cfg.embedding_dim, hid)
        self.post = BLSTM(hid, cfg.blstm_units, cfg.gfam_post_layers)
        self.output = nn.Linear(hid, cfg.num_senones)

    def embed(self, x, activity, lengths=None):
        return self.embedder(self.normalize(x, lengths), activity)

    def forward(self, x, activity, lengths=None, return_internals=False):
        xn = self.normalize(x, lengths)
        c = self.embedder(xn, activity)
        h = self.pre(xn, lengths)
        mask = torch.sigmoid(self.gate(torch.cat([h, c.unsqueeze(1).expand(-1, x.shape[1], -1)], dim=-1)))
        out = self.post(h * mask, lengths)
        logp = F.log_softmax(self.output(out), dim=-1)
        if return_internals:
            return logp, {"embedding": c, "hidden": h, "mask": mask, "blstm_output": out}
        return logp


class BaselineAM(_AMBase):
    """BLSTM stack over features appended with a per-utterance speaker feature."""

    kind = "blstm"

    def __init__(self, cfg: AMConfig, seed: int = 1234):
        super().__init__(cfg)
        g = torch.Generator().manual_seed(seed)
        raw = cfg.input_dim // (2 * cfg.input_context + 1)
        self.register_buffer("spk_proj", torch.randn(raw, cfg.spk_feat_dim, generator=g) / np.sqrt(raw))
        self.blstm = BLSTM(cfg.input_dim + cfg.spk_feat_dim, cfg.blstm_units, cfg.blstm_layers)
        self.output = nn.Linear(2 * cfg.blstm_units, cfg.num_senones)

    def speaker_feature(self, x, lengths=None):
        """Mean of a fixed projection of the centre MFCC frame over the utterance."""
        xn = self.normalize(x, lengths)
        raw = self.spk_proj.shape[0]
        c = self.cfg.input_context
        centre = xn[..., c * raw:(c + 1) * raw] @ self.spk_proj.to(x.dtype)
        n = lengths.to(x.dtype)[:, None] if lengths is not None else torch.full((x.shape[0], 1), x.shape[1], dtype=x.dtype)
        return centre.sum(1) / n

    def forward(self, x, spk_feat=None, lengths=None, return_internals=False):
        if spk_feat is None:
            spk_feat = self.speaker_feature(x, lengths)
        if not torch.isfinite(spk_feat).all():
            raise InputError("speaker feature must be finite")
        xn = self.normalize(x, lengths)
        joined = torch.cat([xn, spk_feat.to(x.dtype).unsqueeze(1).expand(-1, x.shape[1], -1)], dim=-1)
        h = self.blstm(joined, lengths)
        logp = F.log_softmax(self.output(h), dim=-1)
        if return_internals:
            return logp, {"blstm_input": joined, "blstm_output": h}
        return logp


def build_am(kind: str, cfg: AMConfig, seed: int = 0) -> _AMBase:
    if kind not in MODEL_KINDS:
        raise InputError(f"unknown acoustic model kind {kind!r}")
    torch.manual_seed(seed)
    if kind == "icam":
        return ICAM(cfg)
    if kind == "gfam":
        return GFAM(cfg)
    model = BaselineAM(cfg)
    model.kind = kind
    return model


def is_conditioned(model) -> bool:
    return isinstance(model, (ICAM, GFAM))


# ---------------------------------------------------------------------------
# numpy-level forwards


def _single(model, x, *args):
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(np.asarray(x), dtype=dtype)[None],
                    *[torch.as_tensor(np.asarray(a), dtype=dtype)[None] for a in args])
    return out[0].double().exp().numpy()


def speaker_embed(model, x_stacked, activity) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        c = model.embed(torch.as_tensor(np.asarray(x_stacked), dtype=dtype)[None],
                        torch.as_tensor(np.asarray(activity), dtype=dtype)[None])
    return c[0].double().numpy()


def icam_forward(model: ICAM, x_stacked, activity) -> np.ndarray:
    return _single(model, x_stacked, activity)


def gfam_forward(model: GFAM, x_stacked, activity) -> np.ndarray:
    return _single(model, x_stacked, activity)


def baseline_forward(model: BaselineAM, x_stacked, spk_feat=None) -> np.ndarray:
    if spk_feat is None:
        return _single(model, x_stacked)
    return _single(model, x_stacked, spk_feat)


def am_posteriors(model, x_stacked, activity=None) -> np.ndarray:
    """Senone posteriors for one stream; activity is ignored by the baselines."""
    if is_conditioned(model):
        return _single(model, x_stacked, activity)
    return _single(model, x_stacked)


# ---------------------------------------------------------------------------
# training


@dataclass
class AMItem:
    x: np.ndarray  # n x input_dim stacked features
    activity: np.ndarray  # n, conditioning speaker activity
    target: np.ndarray  # n, senone labels
    mask: np.ndarray  # n, frames contributing to the loss


def am_items(examples, kind: str, inactive_as_class0: bool = True, max_frames: int | None = None) -> list:
    """Turn two-channel training examples into per-channel training items.

    ``examples`` yields objects with ``x`` (stacked features), ``activity``
    (n x 2) and ``targets`` (n x 2).  Conditioned models get one item per
    channel; baselines only see frames where the channel's speaker talks.
    """
    items = []
    for ex in examples:
        for s in range(2):
            act = ex.activity[:, s].astype(np.float32)
            tgt = ex.targets[:, s].astype(np.int64)
            if kind in ("icam", "gfam"):
                mask = np.ones(len(tgt), bool) if inactive_as_class0 else act > 0
            else:
                mask = act > 0
            if not mask.any():
                continue
            pieces = [(0, len(tgt))]
            if max_frames and len(tgt) > max_frames:
                pieces = [(i, min(i + max_frames, len(tgt))) for i in range(0, len(tgt), max_frames)]
            for a, b in pieces:
                if mask[a:b].any():
                    items.append(AMItem(ex.x[a:b].astype(np.float32), act[a:b], tgt[a:b], mask[a:b]))
    return items


def _collate(items, idx):
    n = max(len(items[i].target) for i in idx)
    d = items[idx[0]].x.shape[1]
    x = np.zeros((len(idx), n, d), np.float32)
    a = np.zeros((len(idx), n), np.float32)
    y = np.zeros((len(idx), n), np.int64)
    m = np.zeros((len(idx), n), bool)
    lengths = np.zeros(len(idx), np.int64)
    for j, i in enumerate(idx):
        it = items[i]
        k = len(it.target)
        x[j, :k], a[j, :k], y[j, :k], m[j, :k] = it.x, it.activity, it.target, it.mask
        lengths[j] = k
    return tuple(torch.from_numpy(v) for v in (x, a, y, m, lengths))


def am_loss(model, batch) -> torch.Tensor:
    """Masked frame-level cross-entropy."""
    x, a, y, m, lengths = batch
    dtype = next(model.parameters()).dtype
    x = x.to(dtype)
    if is_conditioned(model):
        logp = model(x, a.to(dtype), lengths)
    else:
        logp = model(x, lengths=lengths)
    nll = F.nll_loss(logp.transpose(1, 2), y, reduction="none")
    mf = m.to(dtype)
    return (nll * mf).sum() / mf.sum().clamp(min=1)


def train_am(items: list, kind: str, cfg: AMConfig, train_cfg: AMTrainConfig, model=None,
             state: dict | None = None, on_epoch=None):
    """Adam on masked cross-entropy; returns ``(model, state)``."""
    if not items:
        raise InputError("no acoustic-model training items")
    if model is None:
        model = build_am(kind, cfg, train_cfg.seed)
        allx = np.concatenate([it.x for it in items])
        model.set_normalization(allx.mean(0), allx.std(0))
    batches = [_collate(items, idx) for idx in length_batches([len(it.target) for it in items], train_cfg.batch_size)]
    state = fit(model, batches, lambda m, b, rng: am_loss(m, b), train_cfg, state, on_epoch)
    model.eval()
    return model, state


@torch.no_grad()
def frame_accuracy(model, items) -> tuple:
    """(correct, total) argmax agreement on masked frames."""
    correct = total = 0
    model.eval()
    for idx in length_batches([len(it.target) for it in items], 32):
        x, a, y, m, lengths = _collate(items, idx)
        dtype = next(model.parameters()).dtype
        logp = model(x.to(dtype), a.to(dtype), lengths) if is_conditioned(model) else model(x.to(dtype), lengths=lengths)
        pred = logp.argmax(-1)
        correct += int(((pred == y) & m).sum())
        total += int(m.sum())
    return correct, total


# ---------------------------------------------------------------------------
# embedding analysis


def embedding_cross_correlation(c1, c2) -> float:
    """Normalised inner product <c1, c2> / (|c1| |c2|)."""
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    if c1.shape != c2.shape:
        raise InputError("embeddings must have equal dimensions")
    n1, n2 = np.linalg.norm(c1), np.linalg.norm(c2)
    if n1 == 0 or n2 == 0:
        raise ZeroDivisionError("cross-correlation is undefined for a zero-norm embedding")
    return float(np.clip(np.dot(c1, c2) / (n1 * n2), -1.0, 1.0))


def project_embeddings_2d(embeddings, seed: int = 0) -> np.ndarray:
    """Seeded t-SNE layout of embedding vectors (K x 2)."""
    from sklearn.manifold import TSNE

    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or len(e) < 5:
        raise InputError("need at least 5 embeddings to project")
    perplexity = min(30.0, (len(e) - 1) / 3.0)
    tsne = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed)
    return tsne.fit_transform(e)
