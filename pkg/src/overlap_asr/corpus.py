"""Synthetic two-speaker conversations, segment formation and AM training targets.

The toy "world" replaces real telephone speech: every senone is a pair of
spectral peaks, every speaker warps those peaks by a fixed factor and adds a
harmonic buzz at its own pitch.  Utterances are rendered on a grid of hop-sized
slots so that frame-level alignments and activities are exact by construction.

Timeline convention: slot ``j`` covers samples ``[hop*j, hop*(j+1))``.  Frame
``t`` (window ``[hop*t, hop*t + window)``) is centred in slot ``t + 1`` for the
default 200/80 window/hop, so frame labels are slot labels shifted by one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import (
    FeatureConfig,
    FeatureSequence,
    InputError,
    Waveform,
    compute_mfcc,
    mix_channels,
    read_wav,
    write_wav,
)


# ---------------------------------------------------------------------------
# data types


@dataclass
class SpeakerActivity:
    matrix: np.ndarray
    frame_shift: float = 0.01
    reference: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        if m.ndim != 2:
            raise InputError("activity must be a frames x speakers matrix")
        if np.any(m < 0) or np.any(m > 1) or not np.all(np.isfinite(m)):
            raise InputError("activity values must lie in [0, 1]")
        if self.reference and not np.all((m == 0) | (m == 1)):
            raise InputError("reference activity must be binary")
        self.matrix = m

    @property
    def num_frames(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_speakers(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class Segment:
    start_frame: int
    end_frame: int
    kind: str
    speakers: frozenset

    def __post_init__(self):
        if self.end_frame <= self.start_frame:
            raise InputError(f"empty segment [{self.start_frame}, {self.end_frame})")
        expected = {"A": {0}, "B": {1}, "C": {0, 1}}.get(self.kind)
        if expected is None or set(self.speakers) != expected:
            raise InputError(f"segment kind {self.kind!r} inconsistent with speakers {set(self.speakers)}")

    def __len__(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class TokenSegment:
    start_frame: int
    end_frame: int
    tokens: tuple


@dataclass
class SenoneTargets:
    labels: np.ndarray  # N x 2 int, 0 = channel inactive


@dataclass
class Utterance:
    speaker: int
    tokens: tuple
    slot_states: np.ndarray  # senone per slot
    samples: np.ndarray  # len(slot_states) * hop samples

    @property
    def num_slots(self) -> int:
        return len(self.slot_states)


@dataclass
class Conversation:
    conv_id: str
    channels: list  # isolated per-speaker Waveforms, equal length
    activity: SpeakerActivity
    alignments: np.ndarray  # N x 2 senone indices, 0 outside activity
    ref_tokens: list  # per speaker: list[TokenSegment]
    speakers: tuple = ()
    metadata: dict = field(default_factory=dict)

    @property
    def audio(self) -> Waveform:
        return mix_channels(self.channels[0], self.channels[1])

    @property
    def num_frames(self) -> int:
        return self.activity.num_frames

    def features(self, cfg: FeatureConfig | None = None) -> FeatureSequence:
        return compute_mfcc(self.audio, cfg)


# ---------------------------------------------------------------------------
# generative configuration


@dataclass
class MixtureParams:
    num_turns: int = 8
    mean_gap: float = 2.0  # seconds, exponential
    overlap_prob: float = 0.3
    overlap_ratio: tuple = (0.1, 0.5)
    edge_silence: float = 0.5
    single_speaker: bool = False


@dataclass
class CorpusSpec:
    num_conversations: int = 20
    num_senones: int = 64
    vocab_size: int = 16
    states_per_token: tuple = (2, 4)
    state_duration: tuple = (3, 7)  # slots
    tokens_per_utterance: tuple = (3, 7)
    utterances_per_speaker: int = 6
    num_speakers: int = 12
    min_warp_ratio: float = 1.25
    noise_level: float = 0.002
    world_seed: int = 0
    sample_rate: int = 8000
    hop: int = 80
    window: int = 200
    mixture: MixtureParams = field(default_factory=MixtureParams)


@dataclass
class SpeakerProfile:
    warp: float
    f0: float


class ToyWorld:
    """Everything shared between corpus splits: senone inventory, lexicon, grammar, speakers."""

    def __init__(self, spec: CorpusSpec):
        if spec.num_senones < 2:
            raise InputError("senone inventory needs at least 2 entries (class 0 is reserved)")
        self.spec = spec
        rng = np.random.default_rng(spec.world_seed)
        k = spec.num_senones - 1
        # senone peaks on two geometric grids, 8 steps each
        f1_grid = np.geomspace(260.0, 900.0, 8)
        f2_grid = np.geomspace(1000.0, 2600.0, 8)
        pairs = np.array([(a, b) for a in f1_grid for b in f2_grid])
        if k <= len(pairs):
            chosen = rng.permutation(len(pairs))[:k]
        else:
            chosen = rng.integers(0, len(pairs), size=k)
        self.formants = np.zeros((spec.num_senones, 2))
        self.formants[1:] = pairs[chosen]

        lo, hi = spec.states_per_token
        lengths = rng.integers(lo, hi + 1, size=spec.vocab_size)
        self.tokens = [f"w{i:02d}" for i in range(spec.vocab_size)]
        self.lexicon = {}
        state = 1
        for tok, n in zip(self.tokens, lengths):
            states = []
            for _ in range(n):
                states.append(state)
                state = state % k + 1
            self.lexicon[tok] = tuple(states)

        v = spec.vocab_size
        self.start_probs = rng.dirichlet(np.full(v, 0.5))
        self.transitions = rng.dirichlet(np.full(v, 0.3), size=v)

        warps = np.exp(rng.uniform(np.log(0.75), np.log(1.33), size=spec.num_speakers))
        f0s = rng.uniform(90.0, 250.0, size=spec.num_speakers)
        self.speakers = [SpeakerProfile(float(w), float(f)) for w, f in zip(warps, f0s)]

    # -- sampling -----------------------------------------------------------

    def sample_tokens(self, rng) -> tuple:
        lo, hi = self.spec.tokens_per_utterance
        n = int(rng.integers(lo, hi + 1))
        idx = [int(rng.choice(len(self.tokens), p=self.start_probs))]
        for _ in range(n - 1):
            idx.append(int(rng.choice(len(self.tokens), p=self.transitions[idx[-1]])))
        return tuple(self.tokens[i] for i in idx)

    def sample_speaker_pair(self, rng) -> tuple:
        n = len(self.speakers)
        for _ in range(1000):
            a, b = rng.choice(n, size=2, replace=False)
            ratio = self.speakers[a].warp / self.speakers[b].warp
            if max(ratio, 1 / ratio) >= self.spec.min_warp_ratio:
                return int(a), int(b)
        raise InputError("speaker pool cannot satisfy min_warp_ratio")

    def render_states(self, speaker: int, slot_states, rng, noise=True) -> np.ndarray:
        """Render a per-slot senone sequence for one speaker (phase-continuous tones)."""
        spec = self.spec
        prof = self.speakers[speaker]
        slot_states = np.asarray(slot_states)
        n = len(slot_states) * spec.hop
        per_sample = np.repeat(slot_states, spec.hop)
        nyq = spec.sample_rate / 2 - 100
        out = np.zeros(n)
        t = np.arange(n) / spec.sample_rate
        for j, amp in enumerate((0.30, 0.20)):
            freq = np.minimum(prof.warp * self.formants[per_sample, j], nyq)
            phase = 2 * np.pi * np.cumsum(freq) / spec.sample_rate
            out += amp * np.sin(phase) * (per_sample > 0)
        voiced = per_sample > 0
        for h, amp in ((1, 0.08), (2, 0.05), (3, 0.03)):
            out += amp * np.sin(2 * np.pi * h * prof.f0 * t) * voiced
        if noise and spec.noise_level > 0:
            out += rng.normal(0.0, spec.noise_level, size=n)
        return out

    def sample_utterance(self, speaker: int, rng) -> Utterance:
        tokens = self.sample_tokens(rng)
        lo, hi = self.spec.state_duration
        states = []
        for tok in tokens:
            for s in self.lexicon[tok]:
                states.extend([s] * int(rng.integers(lo, hi + 1)))
        states = np.array(states, dtype=np.int64)
        return Utterance(speaker, tokens, states, self.render_states(speaker, states, rng))

    def utterance_token_spans(self, utt: Utterance):
        """Slot span of each token inside the utterance."""
        spans = []
        pos = 0
        states = utt.slot_states
        for tok in utt.tokens:
            for s in self.lexicon[tok]:
                while pos < len(states) and states[pos] == s:
                    pos += 1
            spans.append(pos)
        return spans


# ---------------------------------------------------------------------------
# mixture simulation


def _check_params(params: MixtureParams):
    lo, hi = params.overlap_ratio
    if not (0 <= lo <= hi <= 0.5):
        raise InputError("overlap_ratio must satisfy 0 <= lo <= hi <= 0.5")
    if not 0 <= params.overlap_prob <= 1:
        raise InputError("overlap_prob must be a probability")
    if params.num_turns < 1:
        raise InputError("need at least one turn")


def simulate_mixture(pool_1, pool_2, params: MixtureParams, rng, conv_id="mix",
                     sample_rate=8000, hop=80, window=200, noise_level=0.0) -> Conversation:
    """Lay out alternating turns drawn from two utterance pools.

    At each turn boundary the next utterance overlaps the previous one with
    probability ``overlap_prob`` (overlap = r * shorter length, r uniform in
    ``overlap_ratio``); otherwise it starts after an exponential gap.
    """
    if not pool_1 or (not pool_2 and not params.single_speaker):
        raise InputError("utterance pools must be non-empty")
    _check_params(params)
    pools = (pool_1, pool_2)
    shift = hop / sample_rate
    edge = int(round(params.edge_silence / shift))
    first = 0 if params.single_speaker else int(rng.integers(0, 2))

    placed = []  # (speaker_channel, start_slot, utterance)
    cursor = edge + 1
    prev_len = None
    own_end = [0, 0]
    for turn in range(params.num_turns):
        spk = first if params.single_speaker else (first + turn) % 2
        utt = pools[spk][int(rng.integers(0, len(pools[spk])))]
        if prev_len is None:
            start = cursor
        elif not params.single_speaker and rng.random() < params.overlap_prob:
            r = rng.uniform(*params.overlap_ratio)
            start = cursor - int(round(r * min(prev_len, utt.num_slots)))
        else:
            start = cursor + int(round(rng.exponential(params.mean_gap) / shift))
        start = max(start, own_end[spk], 1)
        placed.append((spk, start, utt))
        own_end[spk] = start + utt.num_slots
        cursor = start + utt.num_slots
        prev_len = utt.num_slots

    total_slots = max(end for end in own_end) + edge + 1
    n_frames = total_slots - 1  # frames whose window fits inside total_slots slots
    n_samples = hop * (n_frames - 1) + window
    channels = [np.zeros(max(n_samples, total_slots * hop)) for _ in range(2)]
    if noise_level > 0:
        for c in channels:
            c += rng.normal(0.0, noise_level, size=len(c))
    slot_states = np.zeros((total_slots, 2), dtype=np.int64)
    ref_tokens = [[], []]
    for spk, start, utt in placed:
        channels[spk][start * hop:(start + utt.num_slots) * hop] += utt.samples
        slot_states[start:start + utt.num_slots, spk] = utt.slot_states
        ref_tokens[spk].append(TokenSegment(start - 1, start - 1 + utt.num_slots, tuple(utt.tokens)))
    channels = [Waveform(c[:n_samples], sample_rate) for c in channels]
    alignments = slot_states[1:n_frames + 1]
    activity = SpeakerActivity((alignments > 0).astype(float), shift, reference=True)
    act = activity.matrix
    voiced = int(np.sum(act.sum(1) > 0))
    overlap = int(np.sum(act.sum(1) > 1))
    meta = {
        "voiced_frames": voiced,
        "overlap_frames": overlap,
        "overlap_fraction": overlap / voiced if voiced else 0.0,
        "num_frames": int(n_frames),
    }
    for spk in (0, 1):
        ref_tokens[spk].sort(key=lambda s: s.start_frame)
    return Conversation(conv_id, channels, activity, alignments, ref_tokens, metadata=meta)


def expected_overlap_fraction(pool_1, pool_2, params: MixtureParams, sample_rate=8000, hop=80) -> float:
    """Closed-form ratio E[overlap] / E[voiced] for the turn-taking law.

    Valid when no clamping happens (overlap ratios at most 0.5), which
    ``simulate_mixture`` enforces.
    """
    l1 = np.array([u.num_slots for u in pool_1], dtype=float)
    l2 = np.array([u.num_slots for u in pool_2], dtype=float)
    mean_min = np.minimum(l1[:, None], l2[None, :]).mean()
    mean_len = (l1.mean() + l2.mean()) / 2
    mean_r = sum(params.overlap_ratio) / 2
    t = params.num_turns
    ov = (t - 1) * params.overlap_prob * mean_r * mean_min
    return ov / (t * mean_len - ov)


# ---------------------------------------------------------------------------
# segments and targets


def _runs(mask: np.ndarray):
    """Maximal runs of True as (start, end) pairs."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return []
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def form_segments(activity: SpeakerActivity, min_silence: int = 10) -> list:
    """Split binary two-speaker activity into type-A/B/C segments.

    Speech regions are separated by silences of at least ``min_silence``
    frames.  A region containing any overlapped frame becomes one type-C
    segment; other regions are split into maximal single-speaker runs.
    """
    m = activity.matrix
    if m.shape[1] != 2:
        raise InputError(f"form_segments supports exactly 2 speakers, got {m.shape[1]}")
    if not np.all((m == 0) | (m == 1)):
        raise InputError("form_segments needs binary activity")
    a = m.astype(bool)
    voiced = a.any(1)
    both = a.all(1)
    # close silences shorter than min_silence that sit between voiced frames
    bridged = voiced.copy()
    for s, e in _runs(~voiced):
        if s > 0 and e < len(voiced) and e - s < min_silence:
            bridged[s:e] = True
    segments = []
    for s, e in _runs(bridged):
        if both[s:e].any():
            segments.append(Segment(s, e, "C", frozenset({0, 1})))
            continue
        for spk, kind in ((0, "A"), (1, "B")):
            only = a[s:e, spk] & ~a[s:e, 1 - spk]
            for rs, re_ in _runs(only):
                segments.append(Segment(s + rs, s + re_, kind, frozenset({spk})))
    segments.sort(key=lambda g: g.start_frame)
    return segments


def build_senone_targets(conv: Conversation, segments) -> SenoneTargets:
    """Two-channel senone targets; channel s carries speaker s senones only where s is active."""
    act = conv.activity.matrix
    ali = np.asarray(conv.alignments)
    if ali.shape != act.shape:
        raise InputError(f"alignment shape {ali.shape} does not match activity {act.shape}")
    labels = np.zeros(act.shape, dtype=np.int64)
    for seg in segments:
        sl = slice(seg.start_frame, seg.end_frame)
        for spk in seg.speakers:
            labels[sl, spk] = np.where(act[sl, spk] > 0, ali[sl, spk], 0)
    if np.any((act > 0) & (labels == 0) & (ali > 0)):
        uncovered = np.flatnonzero(((act > 0) & (labels == 0)).any(1))
        raise InputError(f"active frames not covered by any segment, e.g. frame {uncovered[0]}")
    return SenoneTargets(labels)


@dataclass
class TrainingExample:
    audio: Waveform
    activity: np.ndarray  # n x 2
    targets: np.ndarray  # n x 2
    kind: str
    overlap_fraction: float = 0.0
    overlap_frames: int = 0


def _excerpt(wave: Waveform, start_frame, n_frames, hop, window) -> np.ndarray:
    start = start_frame * hop
    stop = start + hop * (n_frames - 1) + window
    out = np.zeros(stop - start)
    chunk = wave.samples[start:stop]
    out[: len(chunk)] = chunk
    return out


def segment_example(conv: Conversation, seg: Segment, targets: SenoneTargets,
                    hop=80, window=200) -> TrainingExample:
    n = len(seg)
    audio = _excerpt(conv.audio, seg.start_frame, n, hop, window)
    sl = slice(seg.start_frame, seg.end_frame)
    return TrainingExample(
        Waveform(audio, conv.channels[0].sample_rate),
        conv.activity.matrix[sl].copy(),
        targets.labels[sl].copy(),
        seg.kind,
    )


def augment_overlap(conv: Conversation, seg_a: Segment, seg_b: Segment, rng, u=None,
                    ratio=(0.3, 0.7), hop=80, window=200, min_frames=5):
    """Overlap a type-A and a type-B segment from the same conversation.

    Segment B is shifted so that ``overlap / min(len A, len B)`` equals u,
    with u drawn uniformly from ``ratio``.  The isolated channel audio of
    each segment is used and mixed with the channel-mean rule.  Returns None
    when either segment is too short.
    """
    if seg_a.kind != "A" or seg_b.kind != "B":
        raise InputError("augment_overlap needs a type-A and a type-B segment")
    la, lb = len(seg_a), len(seg_b)
    if la < min_frames or lb < min_frames:
        return None
    if u is None:
        u = float(rng.uniform(*ratio))
    o = int(round(u * min(la, lb)))
    offset = la - o
    n = la + lb - o
    sr = conv.channels[0].sample_rate
    a = _excerpt(conv.channels[0], seg_a.start_frame, la, hop, window)
    b = _excerpt(conv.channels[1], seg_b.start_frame, lb, hop, window)
    length = hop * (n - 1) + window
    buf_a = np.zeros(length)
    buf_b = np.zeros(length)
    buf_a[: len(a)] = a
    buf_b[offset * hop: offset * hop + len(b)] = b
    mixed = mix_channels(Waveform(buf_a, sr), Waveform(buf_b, sr))

    act = np.zeros((n, 2))
    tgt = np.zeros((n, 2), dtype=np.int64)
    act[:la, 0] = conv.activity.matrix[seg_a.start_frame:seg_a.end_frame, 0]
    act[offset:, 1] = conv.activity.matrix[seg_b.start_frame:seg_b.end_frame, 1]
    tgt[:la, 0] = conv.alignments[seg_a.start_frame:seg_a.end_frame, 0]
    tgt[offset:, 1] = conv.alignments[seg_b.start_frame:seg_b.end_frame, 1]
    tgt[act == 0] = 0
    return TrainingExample(mixed, act, tgt, "C", overlap_fraction=u, overlap_frames=o)


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Linear-interpolation resampling to ``round(len / factor)`` samples."""
    if not factor > 0:
        raise InputError(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(round(len(w) / factor))
    pos = np.arange(n_out) * factor
    return Waveform(np.interp(pos, np.arange(len(w)), w.samples), w.sample_rate)


def perturb_conversation(conv: Conversation, factor: float, cfg: FeatureConfig | None = None) -> Conversation:
    """Speed-perturb both channels and remap frame-level labels to the new time axis."""
    if factor == 1.0:
        return conv
    cfg = cfg or FeatureConfig()
    channels = [speed_perturb(c, factor) for c in conv.channels]
    n_new = 1 + (len(channels[0]) - cfg.window) // cfg.hop
    src = np.minimum(np.round(np.arange(n_new) * factor).astype(int), conv.num_frames - 1)
    ali = conv.alignments[src]
    act = SpeakerActivity((ali > 0).astype(float), conv.activity.frame_shift, reference=True)
    scale = lambda f: int(round(f / factor))
    ref = [[TokenSegment(scale(t.start_frame), scale(t.end_frame), t.tokens) for t in spk]
           for spk in conv.ref_tokens]
    meta = dict(conv.metadata, speed_factor=factor)
    return Conversation(f"{conv.conv_id}-sp{factor}", channels, act, ali, ref, conv.speakers, meta)


# ---------------------------------------------------------------------------
# corpus synthesis


def synth_conversation(world: ToyWorld, rng, conv_id: str, params: MixtureParams | None = None) -> Conversation:
    spec = world.spec
    params = params or spec.mixture
    a, b = world.sample_speaker_pair(rng)
    pool_a = [world.sample_utterance(a, rng) for _ in range(spec.utterances_per_speaker)]
    pool_b = [] if params.single_speaker else [world.sample_utterance(b, rng) for _ in range(spec.utterances_per_speaker)]
    conv = simulate_mixture(pool_a, pool_b, params, rng, conv_id=conv_id,
                            sample_rate=spec.sample_rate, hop=spec.hop, window=spec.window,
                            noise_level=spec.noise_level)
    conv.speakers = (a, b)
    return conv


def derive_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Seed for worker/item ``index`` of a run seeded with ``seed``."""
    return np.random.SeedSequence([int(seed), int(index)])


def synth_toy_corpus(spec: CorpusSpec, seed: int, prefix="conv", params: MixtureParams | None = None) -> list:
    """Generate ``spec.num_conversations`` conversations; item i uses seed (seed, i)."""
    if spec.num_senones < 2:
        raise InputError("senone inventory needs at least 2 entries")
    world = ToyWorld(spec)
    convs = []
    for i in range(spec.num_conversations):
        rng = np.random.default_rng(derive_seed(seed, i))
        convs.append(synth_conversation(world, rng, f"{prefix}{i:04d}", params))
    return convs


def overlap_stats(convs) -> dict:
    voiced = sum(int(np.sum(c.activity.matrix.sum(1) > 0)) for c in convs)
    overlap = sum(int(np.sum(c.activity.matrix.sum(1) > 1)) for c in convs)
    frames = sum(c.num_frames for c in convs)
    shift = convs[0].activity.frame_shift if convs else 0.01
    return {
        "num_conversations": len(convs),
        "total_seconds": round(frames * shift, 2),
        "voiced_frames": voiced,
        "overlap_frames": overlap,
        "overlap_pct": round(100.0 * overlap / voiced, 2) if voiced else 0.0,
    }


# ---------------------------------------------------------------------------
# persistence: stereo WAV + JSON sidecar, RTTM


def rle(seq) -> list:
    out = []
    for v in np.asarray(seq).tolist():
        if out and out[-1][0] == v:
            out[-1][1] += 1
        else:
            out.append([v, 1])
    return out


def unrle(pairs) -> np.ndarray:
    return np.concatenate([np.full(n, v, dtype=np.int64) for v, n in pairs]) if pairs else np.zeros(0, np.int64)


def conversation_sidecar(conv: Conversation) -> dict:
    act = conv.activity.matrix
    return {
        "conv_id": conv.conv_id,
        "sample_rate": conv.channels[0].sample_rate,
        "frame_shift": conv.activity.frame_shift,
        "num_frames": conv.num_frames,
        "speakers": [int(s) for s in conv.speakers],
        "activity": [[list(r) for r in _runs(act[:, s] > 0)] for s in range(act.shape[1])],
        "ref_tokens": [
            [{"start": t.start_frame, "end": t.end_frame, "tokens": list(t.tokens)} for t in spk]
            for spk in conv.ref_tokens
        ],
        "alignments": [rle(conv.alignments[:, s]) for s in range(conv.alignments.shape[1])],
        "metadata": conv.metadata,
    }


def save_conversation(conv: Conversation, directory) -> None:
    directory = Path(directory)
    write_wav(directory / f"{conv.conv_id}.wav", conv.channels)
    with open(directory / f"{conv.conv_id}.json", "w") as fh:
        json.dump(conversation_sidecar(conv), fh, indent=1, sort_keys=True)
    write_rttm(directory / f"{conv.conv_id}.rttm", conv.conv_id, conv.activity)


def load_conversation(json_path) -> Conversation:
    json_path = Path(json_path)
    with open(json_path) as fh:
        side = json.load(fh)
    channels = read_wav(json_path.with_suffix(".wav"))
    if len(channels) != 2:
        raise InputError(f"{json_path}: expected a two-channel WAV")
    n = side["num_frames"]
    ali = np.stack([unrle(p) for p in side["alignments"]], axis=1)
    act = np.zeros((n, len(side["activity"])))
    for s, runs in enumerate(side["activity"]):
        for a, b in runs:
            act[a:b, s] = 1
    if ali.shape != act.shape:
        raise InputError(f"{json_path}: alignment/activity length mismatch")
    ref = [[TokenSegment(t["start"], t["end"], tuple(t["tokens"])) for t in spk] for spk in side["ref_tokens"]]
    return Conversation(side["conv_id"], channels,
                        SpeakerActivity(act, side["frame_shift"], reference=True),
                        ali, ref, tuple(side["speakers"]), side.get("metadata", {}))


def load_corpus(directory) -> list:
    paths = sorted(Path(directory).glob("*.json"))
    return [load_conversation(p) for p in paths if not p.name.startswith("_")]


def write_rttm(path, file_id: str, activity: SpeakerActivity, labels=None) -> None:
    m = activity.matrix
    shift = activity.frame_shift
    lines = []
    for s in range(m.shape[1]):
        name = labels[s] if labels else f"spk{s}"
        for a, b in _runs(m[:, s] > 0.5):
            lines.append((a, f"SPEAKER {file_id} 1 {a * shift:.2f} {(b - a) * shift:.2f} <NA> <NA> {name} <NA> <NA>"))
    lines.sort(key=lambda x: x[0])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.writelines(line + "\n" for _, line in lines)


def read_rttm(path, num_frames: int, frame_shift=0.01, speakers=None) -> SpeakerActivity:
    """Parse RTTM SPEAKER lines into a binary frames x speakers matrix."""
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0] != "SPEAKER":
                continue
            rows.append((parts[7], float(parts[3]), float(parts[4])))
    names = list(speakers) if speakers else sorted({r[0] for r in rows})
    m = np.zeros((num_frames, max(len(names), 1)))
    for name, start, dur in rows:
        if name not in names:
            continue
        a = int(round(start / frame_shift))
        b = int(round((start + dur) / frame_shift))
        m[a:min(b, num_frames), names.index(name)] = 1
    return SpeakerActivity(m, frame_shift, reference=True)
