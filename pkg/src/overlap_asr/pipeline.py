"""Glue between corpus, models, decoder and scorer.

The same stacked input features feed both the diarizer and the acoustic
model; transcription differs between ground-truth and automatic activity
only in where the activity matrix comes from.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import acoustic
from .config import AugmentConfig, DecodeConfig, ExperimentConfig
from .corpus import (
    Conversation,
    SpeakerActivity,
    _runs,
    augment_overlap,
    build_senone_targets,
    form_segments,
    perturb_conversation,
)
from .decode import ToyLM, activity_to_segments, build_graph, split_chunks, viterbi_decode
from .diarization import diarizer_forward
from .evaluate import TranscriptEntry
from .features import FeatureConfig, compute_mfcc, stack_context

logger = logging.getLogger(__name__)


@dataclass
class Example:
    x: np.ndarray  # n x stacked dim
    activity: np.ndarray  # n x 2
    targets: np.ndarray  # n x 2
    kind: str


def stacked_features(conv: Conversation, feat_cfg: FeatureConfig) -> np.ndarray:
    return stack_context(compute_mfcc(conv.audio, feat_cfg).frames, feat_cfg.context).astype(np.float32)


def conversation_examples(conv: Conversation, feat_cfg: FeatureConfig, aug: AugmentConfig, rng,
                          x: np.ndarray | None = None) -> list:
    """Natural type-A/B/C segment examples plus augmented type-C overlaps."""
    if x is None:
        x = stacked_features(conv, feat_cfg)
    segments = form_segments(conv.activity, aug.min_silence)
    targets = build_senone_targets(conv, segments)
    out = []
    for seg in segments:
        sl = slice(seg.start_frame, seg.end_frame)
        out.append(Example(x[sl], conv.activity.matrix[sl], targets.labels[sl], seg.kind))
    segs_a = [s for s in segments if s.kind == "A"]
    segs_b = [s for s in segments if s.kind == "B"]
    if segs_a and segs_b and aug.ratio > 0:
        n_aug = int(round(aug.ratio * len(segs_a)))
        for i in range(n_aug):
            seg_a = segs_a[i % len(segs_a)]
            seg_b = segs_b[int(rng.integers(0, len(segs_b)))]
            ex = augment_overlap(conv, seg_a, seg_b, rng, ratio=aug.overlap_range,
                                 hop=feat_cfg.hop, window=feat_cfg.window)
            if ex is None:
                continue
            xa = stack_context(compute_mfcc(ex.audio, feat_cfg).frames, feat_cfg.context).astype(np.float32)
            out.append(Example(xa, ex.activity, ex.targets, "C-aug"))
    return out


def isolated_examples(conv: Conversation, feat_cfg: FeatureConfig) -> list:
    """Per-channel examples on the clean isolated recordings (BLSTM-iso training)."""
    out = []
    for s in range(2):
        x = stack_context(compute_mfcc(conv.channels[s], feat_cfg).frames, feat_cfg.context).astype(np.float32)
        n = min(len(x), conv.num_frames)
        act = np.zeros((n, 2))
        act[:, s] = conv.activity.matrix[:n, s]
        tgt = np.zeros((n, 2), dtype=np.int64)
        tgt[:, s] = np.where(act[:, s] > 0, conv.alignments[:n, s], 0)
        for a, b in _runs(act[:, s] > 0):
            out.append(Example(x[a:b], act[a:b], tgt[a:b], "iso"))
    return out


def am_training_items(convs, kind: str, cfg: ExperimentConfig, seed: int) -> list:
    """Per-channel AM items from a training corpus, with speed perturbation and overlap augmentation."""
    feat = cfg.features
    items = []
    for i, conv in enumerate(convs):
        rng = np.random.default_rng([seed, i, 7])
        variants = [conv] + [perturb_conversation(conv, f, feat) for f in cfg.augment.speed_factors]
        for v in variants:
            if kind == "blstm-iso":
                exs = isolated_examples(v, feat)
            else:
                exs = conversation_examples(v, feat, cfg.augment, rng)
            items.extend(acoustic.am_items(exs, kind, cfg.am_train.inactive_as_class0, cfg.augment.max_item_frames))
    return items


def fit_lm(convs, vocab, k: float) -> ToyLM:
    sentences = [t.tokens for c in convs for spk in c.ref_tokens for t in spk]
    return ToyLM.fit(sentences, vocab, k)


def transcribe(conv_id: str, x: np.ndarray, activity: np.ndarray, model, lexicon: dict, lm: ToyLM,
               dec: DecodeConfig, frame_shift: float = 0.01, graph=None) -> list:
    """Chunked AM scoring, activity segments, Viterbi decoding; one stream per speaker column."""
    activity = (np.asarray(activity) > 0.5).astype(np.float64)
    n = min(len(x), len(activity))
    x, activity = x[:n], activity[:n]
    graph = graph or build_graph(lexicon, lm, dec.lm_weight, dec.insertion_penalty, dec.silence_class)
    size = int(round(dec.chunk_seconds / frame_shift))
    entries = []
    conditioned = acoustic.is_conditioned(model)
    for ci, xc in enumerate(split_chunks(x, frame_shift, dec.chunk_seconds)):
        start = ci * size
        ac = activity[start:start + len(xc)]
        segs = activity_to_segments(ac, dec.min_segment_frames)
        shared = None
        for s in range(ac.shape[1]):
            if not segs[s]:
                continue
            if conditioned:
                post = acoustic.am_posteriors(model, xc, ac[:, s])
            else:
                if shared is None:
                    shared = acoustic.am_posteriors(model, xc)
                post = shared
            logp = np.log(np.maximum(post, 1e-30))
            for a, b in segs[s]:
                toks, score = viterbi_decode(logp[a:b], lexicon, lm, graph=graph)
                entries.append(TranscriptEntry(conv_id, s, start + a, start + b, toks, ci, float(score)))
    return entries


def diarize(x: np.ndarray, diarizer, frame_shift: float = 0.01) -> SpeakerActivity:
    return diarizer_forward(x, diarizer, frame_shift=frame_shift).activity()


def overlapped_frame_accuracy(model, conv: Conversation, x: np.ndarray) -> tuple:
    """(correct, total) argmax accuracy on reference-overlapped frames, both speaker streams."""
    act = conv.activity.matrix
    ov = act.sum(1) > 1
    if not ov.any():
        return 0, 0
    correct = total = 0
    shared = None
    for s in range(2):
        if acoustic.is_conditioned(model):
            post = acoustic.am_posteriors(model, x, act[:, s])
        else:
            shared = acoustic.am_posteriors(model, x) if shared is None else shared
            post = shared
        pred = post.argmax(1)
        correct += int(np.sum(pred[ov] == conv.alignments[ov, s]))
        total += int(ov.sum())
    return correct, total
