"""Diarization error rate, word error rate and the chunked per-speaker scoring protocol."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import SpeakerActivity, _runs
from .features import InputError


@dataclass
class DERReport:
    miss_pct: float
    fa_pct: float
    spkerr_pct: float
    der_pct: float
    scored_time: float
    overlap_included: bool = True
    # raw frame counts; reports are merged by summing these
    scored_frames: float = 0.0
    miss_frames: float = 0.0
    fa_frames: float = 0.0
    spkerr_frames: float = 0.0
    frame_shift: float = 0.01

    @classmethod
    def from_counts(cls, scored, miss, fa, conf, frame_shift, overlap_included=True):
        pct = (lambda x: 100.0 * x / scored) if scored > 0 else (lambda x: 0.0)
        return cls(pct(miss), pct(fa), pct(conf), pct(miss + fa + conf),
                   scored * frame_shift, overlap_included,
                   float(scored), float(miss), float(fa), float(conf), frame_shift)

    def __add__(self, other: "DERReport") -> "DERReport":
        return DERReport.from_counts(
            self.scored_frames + other.scored_frames,
            self.miss_frames + other.miss_frames,
            self.fa_frames + other.fa_frames,
            self.spkerr_frames + other.spkerr_frames,
            self.frame_shift, self.overlap_included)


def collar_mask(ref: np.ndarray, collar_frames: int) -> np.ndarray:
    """True for frames within +-collar of a reference speaker boundary."""
    n = ref.shape[0]
    mask = np.zeros(n, dtype=bool)
    if collar_frames <= 0:
        return mask
    for s in range(ref.shape[1]):
        for a, b in _runs(ref[:, s] > 0):
            for edge in (a, b):
                mask[max(0, edge - collar_frames):min(n, edge + collar_frames)] = True
    return mask


def _pad_columns(m: np.ndarray, k: int) -> np.ndarray:
    if m.shape[1] >= k:
        return m
    return np.concatenate([m, np.zeros((m.shape[0], k - m.shape[1]))], axis=1)


def compute_der(ref: SpeakerActivity, hyp: SpeakerActivity, collar: float = 0.25,
                include_overlap: bool = True) -> DERReport:
    """Frame-level DER with a reference-boundary collar and the best speaker mapping.

    Per scored frame with ``r`` reference and ``h`` hypothesis speakers, of
    which ``c`` agree under the mapping: miss = max(r - h, 0),
    false alarm = max(h - r, 0), confusion = min(r, h) - c.
    """
    if not np.isclose(ref.frame_shift, hyp.frame_shift):
        raise InputError(f"frame shifts differ: {ref.frame_shift} vs {hyp.frame_shift}")
    r = (ref.matrix > 0.5).astype(np.int64)
    h = (hyp.matrix > 0.5).astype(np.int64)
    n = min(len(r), len(h))
    if len(r) != len(h):
        # hypothesis frames past the reference end are scored as silence
        h2 = np.zeros((len(r), h.shape[1]), dtype=np.int64)
        h2[:n] = h[:n]
        h = h2
    k = max(r.shape[1], h.shape[1])
    r = _pad_columns(r, k).astype(np.int64)
    h = _pad_columns(h, k).astype(np.int64)

    keep = ~collar_mask(r, int(round(collar / ref.frame_shift)))
    if not include_overlap:
        keep &= r.sum(1) < 2
    r, h = r[keep], h[keep]
    nr = r.sum(1)
    nh = h.sum(1)
    scored = nr.sum()
    miss = np.maximum(nr - nh, 0).sum()
    fa = np.maximum(nh - nr, 0).sum()
    best = None
    for perm in itertools.permutations(range(k)):
        correct = np.minimum(r, h[:, perm]).sum()
        if best is None or correct > best:
            best = correct
    conf = np.minimum(nr, nh).sum() - best
    return DERReport.from_counts(scored, miss, fa, conf, ref.frame_shift, include_overlap)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; 0 when either column is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xs = x - x.mean()
    ys = y - y.mean()
    den = np.sqrt((xs * xs).sum() * (ys * ys).sum())
    if den == 0:
        return 0.0
    return float((xs * ys).sum() / den)


def resolve_permutation(hyp: np.ndarray, ref: np.ndarray, method: str = "pearson") -> tuple:
    """Map reference speaker i to hypothesis column ``mapping[i]`` by maximum correlation.

    Ties go to the identity mapping (it is tried first and only a strictly
    larger score replaces it).
    """
    hyp = np.asarray(hyp, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if hyp.shape[0] != ref.shape[0]:
        raise InputError("activities must have equal frame counts")
    k = max(hyp.shape[1], ref.shape[1])
    hyp = _pad_columns(hyp, k)
    ref = _pad_columns(ref, k)
    if method == "pearson":
        corr = lambda a, b: pearson(a, b)
    elif method == "inner":
        corr = lambda a, b: float(np.dot(a, b))
    else:
        raise InputError(f"unknown correlation method {method!r}")
    c = np.array([[corr(ref[:, i], hyp[:, j]) for j in range(k)] for i in range(k)])
    best_perm = tuple(range(k))
    best = sum(c[i, best_perm[i]] for i in range(k))
    for perm in itertools.permutations(range(k)):
        score = sum(c[i, perm[i]] for i in range(k))
        if score > best + 1e-12:
            best, best_perm = score, perm
    return best_perm


def intersect_runs(a, b) -> list:
    """Intersection of two sorted lists of half-open intervals."""
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if lo < hi:
            out.append((lo, hi))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def form_scoring_chunks(ref_silence_runs, hyp_silence_runs, min_gap: int, num_frames: int) -> list:
    """Chunks split at the midpoints of common silences lasting at least ``min_gap`` frames.

    Without any qualifying common silence the whole recording is one chunk.
    """
    common = [r for r in intersect_runs(ref_silence_runs, hyp_silence_runs) if r[1] - r[0] >= min_gap]
    cuts = sorted({(a + b) // 2 for a, b in common if 0 < (a + b) // 2 < num_frames})
    bounds = [0] + cuts + [num_frames]
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


@dataclass
class WERCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer_pct(self):
        if self.ref_words == 0:
            return None if self.errors else 0.0
        return 100.0 * self.errors / self.ref_words

    def __add__(self, other):
        return WERCounts(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.ref_words + other.ref_words)


def compute_wer(ref, hyp) -> WERCounts:
    """Unit-cost Levenshtein alignment with S/D/I counts.

    Among minimum-cost alignments, backtracking prefers a match or
    substitution, then deletion, then insertion.  ``wer_pct`` is None when
    the reference is empty but the hypothesis is not.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = n, m
    s = dl = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WERCounts(int(s), dl, ins, n)


# ---------------------------------------------------------------------------
# pipeline scoring


@dataclass(frozen=True)
class TranscriptEntry:
    conv_id: str
    speaker: int
    start_frame: int
    end_frame: int
    tokens: tuple
    chunk: int = 0
    score: float = 0.0


@dataclass
class PipelineReport:
    per_speaker: dict = field(default_factory=dict)  # speaker index -> WERCounts
    der: DERReport | None = None
    der_no_overlap: DERReport | None = None
    conversations: int = 0

    @property
    def aggregate(self) -> WERCounts:
        total = WERCounts()
        for c in self.per_speaker.values():
            total = total + c
        return total

    def to_dict(self) -> dict:
        out = {"conversations": self.conversations, "wer": {}}
        for spk in sorted(self.per_speaker):
            c = self.per_speaker[spk]
            out["wer"][f"spk{spk}"] = dict(asdict(c), wer_pct=_round(c.wer_pct))
        agg = self.aggregate
        out["wer"]["all"] = dict(asdict(agg), wer_pct=_round(agg.wer_pct))
        for name, rep in (("der", self.der), ("der_no_overlap", self.der_no_overlap)):
            if rep is not None:
                out[name] = {k: _round(getattr(rep, k)) for k in
                             ("miss_pct", "fa_pct", "spkerr_pct", "der_pct", "scored_time")}
        return out


def _round(x, nd=1):
    return None if x is None else round(float(x), nd)


def _tokens_in_chunk(items, lo, hi):
    """Concatenate token lists of items whose midpoint lies in [lo, hi)."""
    toks = []
    for start, end, tokens in sorted(items, key=lambda x: (x[0], x[1])):
        mid = (start + end) / 2
        if lo <= mid < hi:
            toks.extend(tokens)
    return toks


def score_conversation(conv, hyp_activity: SpeakerActivity, transcripts, min_gap: float = 0.5,
                       collar: float = 0.25, method: str = "pearson"):
    """Per-speaker WER counts and DER reports for one conversation."""
    ref = conv.activity.matrix
    n = ref.shape[0]
    hyp = hyp_activity.matrix[:n]
    if hyp.shape[0] < n:
        hyp = np.concatenate([hyp, np.zeros((n - hyp.shape[0], hyp.shape[1]))])
    hyp = (hyp > 0.5).astype(float)
    mapping = resolve_permutation(hyp, ref, method)
    ref_sil = _runs(ref.sum(1) == 0)
    hyp_sil = _runs(hyp.sum(1) == 0)
    gap = int(round(min_gap / conv.activity.frame_shift))
    chunks = form_scoring_chunks(ref_sil, hyp_sil, gap, n)
    per_spk = {}
    for s in range(ref.shape[1]):
        ref_items = [(t.start_frame, t.end_frame, t.tokens) for t in conv.ref_tokens[s]]
        hyp_spk = mapping[s] if s < len(mapping) else None
        hyp_items = [(t.start_frame, t.end_frame, t.tokens) for t in transcripts
                     if t.conv_id == conv.conv_id and t.speaker == hyp_spk]
        counts = WERCounts()
        for lo, hi in chunks:
            counts = counts + compute_wer(_tokens_in_chunk(ref_items, lo, hi),
                                          _tokens_in_chunk(hyp_items, lo, hi))
        per_spk[s] = counts
    hyp_act = SpeakerActivity(hyp, conv.activity.frame_shift)
    der = compute_der(conv.activity, hyp_act, collar, include_overlap=True)
    der_no = compute_der(conv.activity, hyp_act, collar, include_overlap=False)
    return per_spk, der, der_no


def score_pipeline(conversations, diar_results: dict, transcripts, min_gap: float = 0.5,
                   collar: float = 0.25, method: str = "pearson") -> PipelineReport:
    """Score a set of conversations; counts and times are summed before percentages.

    Args:
        conversations: reference conversations.
        diar_results: conv_id -> SpeakerActivity used to produce the transcripts.
        transcripts: iterable of TranscriptEntry.
    """
    transcripts = list(transcripts)
    report = PipelineReport()
    for conv in sorted(conversations, key=lambda c: c.conv_id):
        if conv.conv_id not in diar_results:
            raise InputError(f"no diarization output for {conv.conv_id}")
        per_spk, der, der_no = score_conversation(conv, diar_results[conv.conv_id], transcripts,
                                                  min_gap, collar, method)
        for s, c in per_spk.items():
            report.per_speaker[s] = report.per_speaker.get(s, WERCounts()) + c
        report.der = der if report.der is None else report.der + der
        report.der_no_overlap = der_no if report.der_no_overlap is None else report.der_no_overlap + der_no
        report.conversations += 1
    return report


# ---------------------------------------------------------------------------
# report emission


def der_table(rows: dict) -> str:
    """Pretty table with Miss/FA/SE/DER columns; rows maps label -> DERReport."""
    lines = [f"{'System':<34}{'Miss %':>8}{'FA %':>8}{'SE %':>8}{'DER %':>8}"]
    for name, rep in rows.items():
        lines.append(f"{name:<34}{rep.miss_pct:8.1f}{rep.fa_pct:8.1f}{rep.spkerr_pct:8.1f}{rep.der_pct:8.2f}")
    return "\n".join(lines)


def wer_table(rows: dict, columns=("GTS", "diarizer")) -> str:
    """rows maps architecture -> {column: wer_pct}."""
    head = f"{'Architecture':<16}" + "".join(f"{c:>12}" for c in columns)
    lines = [head]
    for arch, vals in rows.items():
        cells = "".join(f"{vals[c]:12.1f}" if vals.get(c) is not None else f"{'-':>12}" for c in columns)
        lines.append(f"{arch:<16}{cells}")
    return "\n".join(lines)


DER_FIELDS = ("system", "condition", "miss_pct", "fa_pct", "spkerr_pct", "der_pct", "scored_time")


def der_csv(rows) -> str:
    """rows: iterable of (system, condition, DERReport)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DER_FIELDS)
    for system, cond, rep in rows:
        w.writerow([system, cond, f"{rep.miss_pct:.1f}", f"{rep.fa_pct:.1f}",
                    f"{rep.spkerr_pct:.1f}", f"{rep.der_pct:.2f}", f"{rep.scored_time:.2f}"])
    return buf.getvalue()


WER_FIELDS = ("system", "speaker", "substitutions", "deletions", "insertions", "ref_words", "wer_pct")


def wer_csv(rows) -> str:
    """rows: iterable of (system, PipelineReport)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(WER_FIELDS)
    for system, rep in rows:
        items = [(f"spk{s}", rep.per_speaker[s]) for s in sorted(rep.per_speaker)]
        items.append(("all", rep.aggregate))
        for name, c in items:
            pct = "" if c.wer_pct is None else f"{c.wer_pct:.1f}"
            w.writerow([system, name, c.substitutions, c.deletions, c.insertions, c.ref_words, pct])
    return buf.getvalue()
