"""Toy token decoder: chunking, activity segments, bigram LM and Viterbi search."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import _runs
from .evaluate import TranscriptEntry
from .features import InputError

BOS = "<s>"
EOS = "</s>"


def split_chunks(posteriors: np.ndarray, frame_shift: float = 0.01, chunk_seconds: float = 5.0) -> list:
    """Cut a frames x classes matrix into contiguous equal chunks (last one may be shorter)."""
    size = int(round(chunk_seconds / frame_shift))
    if size <= 0:
        raise InputError("chunk length must be at least one frame")
    return [posteriors[i:i + size] for i in range(0, len(posteriors), size)]


def activity_to_segments(binary_activity: np.ndarray, min_frames: int = 1) -> list:
    """Per-speaker maximal active runs, dropping runs shorter than ``min_frames``."""
    act = np.asarray(binary_activity)
    if act.ndim == 1:
        act = act[:, None]
    out = []
    for s in range(act.shape[1]):
        out.append([(a, b) for a, b in _runs(act[:, s] > 0.5) if b - a >= min_frames])
    return out


class ToyLM:
    """Bigram LM with add-k smoothing over tokens plus the sentence end symbol."""

    def __init__(self, vocab, k: float = 0.5):
        self.vocab = sorted(vocab)
        self.k = k
        self.counts = {}
        self._cache = {}

    @classmethod
    def fit(cls, sentences, vocab, k: float = 0.5) -> "ToyLM":
        lm = cls(vocab, k)
        for sent in sentences:
            seq = [BOS] + list(sent) + [EOS]
            for prev, nxt in zip(seq[:-1], seq[1:]):
                lm.counts.setdefault(prev, Counter())[nxt] += 1
        return lm

    def logprob(self, prev: str, nxt: str) -> float:
        key = (prev, nxt)
        if key not in self._cache:
            c = self.counts.get(prev, Counter())
            outcomes = len(self.vocab) + 1
            self._cache[key] = math.log((c[nxt] + self.k) / (sum(c.values()) + self.k * outcomes))
        return self._cache[key]

    def sentence_logprob(self, tokens) -> float:
        seq = [BOS] + list(tokens) + [EOS]
        return sum(self.logprob(a, b) for a, b in zip(seq[:-1], seq[1:]))

    def to_dict(self) -> dict:
        return {"vocab": self.vocab, "k": self.k,
                "counts": {h: dict(sorted(c.items())) for h, c in sorted(self.counts.items())}}

    @classmethod
    def from_dict(cls, d) -> "ToyLM":
        lm = cls(d["vocab"], d["k"])
        lm.counts = {h: Counter(c) for h, c in d["counts"].items()}
        return lm


@dataclass
class DecodeGraph:
    tokens: list
    senones: np.ndarray  # per state
    trans: np.ndarray  # S x S arc weights, -inf where absent
    init: np.ndarray
    final: np.ndarray
    entry_token: np.ndarray  # token index entered on a non-self arc into this state, or -1


def build_graph(lexicon: dict, lm: ToyLM, lm_weight=1.0, insertion_penalty=0.5,
                silence_class: int | None = 0) -> DecodeGraph:
    tokens = sorted(lexicon)
    for t in tokens:
        if len(lexicon[t]) < 2:
            raise InputError(f"token {t!r} needs at least 2 states")
    first, last = {}, {}
    senones = []
    entry = []
    for i, t in enumerate(tokens):
        first[t] = len(senones)
        for j, s in enumerate(lexicon[t]):
            senones.append(s)
            entry.append(i if j == 0 else -1)
        last[t] = len(senones) - 1
    sil_after = {}
    sil_start = None
    if silence_class is not None:
        sil_start = len(senones)
        senones.append(silence_class)
        entry.append(-1)
        for t in tokens:
            sil_after[t] = len(senones)
            senones.append(silence_class)
            entry.append(-1)
    n = len(senones)
    trans = np.full((n, n), -np.inf)
    init = np.full(n, -np.inf)
    final = np.full(n, -np.inf)
    word = lambda prev, t: lm_weight * lm.logprob(prev, t) - insertion_penalty
    for t in tokens:
        for st in range(first[t], last[t] + 1):
            trans[st, st] = 0.0
            if st < last[t]:
                trans[st, st + 1] = 0.0
        init[first[t]] = word(BOS, t)
        final[last[t]] = lm_weight * lm.logprob(t, EOS)
        for v in tokens:
            trans[last[t], first[v]] = word(t, v)
        if silence_class is not None:
            sa = sil_after[t]
            trans[last[t], sa] = 0.0
            trans[sa, sa] = 0.0
            final[sa] = lm_weight * lm.logprob(t, EOS)
            for v in tokens:
                trans[sa, first[v]] = word(t, v)
    if silence_class is not None:
        init[sil_start] = 0.0
        trans[sil_start, sil_start] = 0.0
        final[sil_start] = lm_weight * lm.logprob(BOS, EOS)
        for v in tokens:
            trans[sil_start, first[v]] = word(BOS, v)
    return DecodeGraph(tokens, np.array(senones), trans, init, final, np.array(entry))


def viterbi_decode(log_posteriors: np.ndarray, lexicon: dict, lm: ToyLM, lm_weight=1.0,
                   insertion_penalty=0.5, silence_class: int | None = 0, graph: DecodeGraph | None = None):
    """Best token sequence under acoustic log-posterior + weighted LM - insertion penalty.

    Tokens are left-to-right state chains with self-loops.  With
    ``silence_class`` set, optional silence may precede, follow or separate
    tokens at no LM cost.  Ties resolve towards lexicographically smaller
    tokens.  Returns ``(tokens, score)``; an empty segment gives ``((), 0.0)``.
    """
    lp = np.asarray(log_posteriors, dtype=np.float64)
    if lp.shape[0] == 0:
        return (), 0.0
    g = graph or build_graph(lexicon, lm, lm_weight, insertion_penalty, silence_class)
    emis = lp[:, g.senones]
    n, s = emis.shape
    bp = np.zeros((n, s), dtype=np.int64)
    score = g.init + emis[0]
    for t in range(1, n):
        cand = score[:, None] + g.trans
        bp[t] = np.argmax(cand, axis=0)
        score = cand[bp[t], np.arange(s)] + emis[t]
    total = score + g.final
    end = int(np.argmax(total))
    best = float(total[end])
    if not np.isfinite(best):
        return (), -math.inf
    path = [end]
    for t in range(n - 1, 0, -1):
        path.append(int(bp[t, path[-1]]))
    path.reverse()
    out = []
    prev = None
    for st in path:
        if g.entry_token[st] >= 0 and st != prev:
            out.append(g.tokens[g.entry_token[st]])
        prev = st
    return tuple(out), best


# ---------------------------------------------------------------------------
# transcript files


def write_trn(path, entries) -> None:
    """One line per (conversation, speaker, chunk): tokens followed by the utterance id."""
    grouped = {}
    for e in entries:
        grouped.setdefault((e.conv_id, e.speaker, e.chunk), []).append(e)
    with open(path, "w") as fh:
        for (conv, spk, chunk), items in sorted(grouped.items()):
            toks = [t for e in sorted(items, key=lambda e: e.start_frame) for t in e.tokens]
            fh.write(f"{' '.join(toks)} ({conv}-spk{spk}-{chunk:03d})\n")


def read_trn(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            text, _, uid = line.rpartition("(")
            out[uid.rstrip(")")] = tuple(text.split())
    return out


def write_transcript_json(path, entries) -> None:
    data = [
        {"conv_id": e.conv_id, "speaker": e.speaker, "chunk": e.chunk, "start": e.start_frame,
         "end": e.end_frame, "tokens": list(e.tokens), "score": round(e.score, 6)}
        for e in sorted(entries, key=lambda e: (e.conv_id, e.speaker, e.start_frame))
    ]
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)


def read_transcript_json(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    return [TranscriptEntry(d["conv_id"], d["speaker"], d["start"], d["end"], tuple(d["tokens"]),
                            d.get("chunk", 0), d.get("score", 0.0)) for d in data]
