"""Desk-scale end-to-end experiment: synthesize, train, decode, score.

``run_experiment`` is the single entry point used by the CLI, the
experiment script and the acceptance tests.  Everything it returns in the
report is a deterministic function of the config; wall-clock timings are
kept in a separate dict so the report can be compared byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from . import acoustic
from .acoustic import AMConfig, AMTrainConfig
from .config import AugmentConfig, DiarizerDataConfig, ExperimentConfig, config_hash, config_to_dict, dump_config
from .corpus import Conversation, MixtureParams, SpeakerActivity, form_segments, overlap_stats, synth_toy_corpus
from .decode import build_graph, write_transcript_json
from .diarization import DiarizerTrainConfig, diarizer_forward, train_diarizer
from .evaluate import compute_der, score_pipeline
from .pipeline import am_training_items, fit_lm, overlapped_frame_accuracy, stacked_features, transcribe
from .training import epoch_means, save_checkpoint, write_loss_csv

logger = logging.getLogger(__name__)

# offsets that keep the corpora of one run disjoint
TRAIN, EVAL, DIAR_EXTRA, DIAR_SINGLE, ANALYSIS = 1, 2, 3, 4, 5


def corpus_seed(seed: int, split: int) -> int:
    return 1000 * int(seed) + split


def desk_config(seed: int = 0) -> ExperimentConfig:
    """Settings tuned to finish one seed in well under 30 CPU minutes."""
    cfg = ExperimentConfig(seed=seed)
    cfg.corpus.num_conversations = 170
    cfg.corpus.mixture = MixtureParams(num_turns=8, mean_gap=0.4, overlap_prob=1.0,
                                       overlap_ratio=(0.3, 0.5), edge_silence=0.3)
    cfg.eval_conversations = 30
    cfg.diarizer_data = DiarizerDataConfig(
        extra_mixtures=120, single_speaker_fraction=0.15,
        mixture=MixtureParams(num_turns=8, mean_gap=1.0, overlap_prob=0.3, overlap_ratio=(0.1, 0.5),
                              edge_silence=0.3))
    cfg.diarizer_train = DiarizerTrainConfig(epochs=10, lr=1e-3, batch_size=8, chunk_frames=500, seed=seed)
    cfg.am = AMConfig()
    cfg.am_train = AMTrainConfig(epochs=8, lr=3e-3, batch_size=8, seed=seed)
    cfg.augment = AugmentConfig(speed_factors=(), max_item_frames=300)
    cfg.output_dir = f"runs/desk-seed{seed}"
    return cfg


def smoke_config(seed: int = 0) -> ExperimentConfig:
    """A tiny run that exercises every stage in a few seconds."""
    cfg = desk_config(seed)
    cfg.corpus.num_conversations = 6
    cfg.eval_conversations = 3
    cfg.diarizer_data.extra_mixtures = 4
    cfg.diarizer_train.epochs = 1
    cfg.am = AMConfig(tdnn_dim=16, embedding_dim=8, blstm_units=16, blstm_layers=1, gfam_pre_layers=1,
                      gfam_post_layers=1, spk_feat_dim=8)
    cfg.am_train.epochs = 1
    cfg.output_dir = f"runs/smoke-seed{seed}"
    return cfg


# ---------------------------------------------------------------------------
# stages


def make_corpora(cfg: ExperimentConfig) -> dict:
    spec = cfg.corpus
    out = {
        "train": synth_toy_corpus(spec, corpus_seed(cfg.seed, TRAIN), "train"),
        "eval": synth_toy_corpus(dataclasses.replace(spec, num_conversations=cfg.eval_conversations),
                                 corpus_seed(cfg.seed, EVAL), "eval"),
    }
    dd = cfg.diarizer_data
    n_single = int(round(dd.single_speaker_fraction * dd.extra_mixtures))
    n_extra = dd.extra_mixtures - n_single
    out["diar_extra"] = synth_toy_corpus(dataclasses.replace(spec, num_conversations=n_extra),
                                         corpus_seed(cfg.seed, DIAR_EXTRA), "dmix", dd.mixture)
    out["diar_single"] = synth_toy_corpus(dataclasses.replace(spec, num_conversations=n_single),
                                          corpus_seed(cfg.seed, DIAR_SINGLE), "dsgl",
                                          dataclasses.replace(dd.mixture, single_speaker=True))
    out["analysis"] = synth_toy_corpus(dataclasses.replace(spec, num_conversations=1),
                                       corpus_seed(cfg.seed, ANALYSIS), "analysis", cfg.analysis_mixture)
    return out


def train_diarizer_stage(cfg: ExperimentConfig, convs, features=None, model=None, state=None, on_epoch=None):
    features = features or [stacked_features(c, cfg.features) for c in convs]
    return train_diarizer(features, [c.activity.matrix for c in convs], cfg.diarizer, cfg.diarizer_train,
                          model=model, state=state, on_epoch=on_epoch)


def train_am_stage(cfg: ExperimentConfig, kind: str, convs, model=None, state=None, on_epoch=None):
    items = am_training_items(convs, kind, cfg, cfg.seed)
    return acoustic.train_am(items, kind, cfg.am, cfg.am_train, model=model, state=state, on_epoch=on_epoch)


def diarize_all(model, convs, xs, frame_shift) -> dict:
    return {c.conv_id: diarizer_forward(x, model, frame_shift=frame_shift) for c, x in zip(convs, xs)}


def transcribe_all(cfg: ExperimentConfig, model, convs, xs, activities: dict, lexicon, lm, graph=None) -> list:
    """Transcripts for every conversation; ``activities`` maps conv_id to an N x 2 matrix."""
    graph = graph or build_graph(lexicon, lm, cfg.decode.lm_weight, cfg.decode.insertion_penalty,
                                 cfg.decode.silence_class)
    entries = []
    for conv, x in zip(convs, xs):
        entries.extend(transcribe(conv.conv_id, x, activities[conv.conv_id], model, lexicon, lm, cfg.decode,
                                  cfg.features.frame_shift, graph))
    return entries


def all_silence_der(convs, collar: float) -> float:
    """DER of the degenerate hypothesis that nobody ever speaks."""
    total = None
    for c in convs:
        r = compute_der(c.activity, SpeakerActivity(np.zeros_like(c.activity.matrix), c.activity.frame_shift),
                        collar)
        total = r if total is None else total + r
    return total.der_pct


# ---------------------------------------------------------------------------
# embedding analysis


def segment_embeddings(model, conv: Conversation, x: np.ndarray, kinds=("C",), min_silence: int = 10) -> list:
    """(speaker id, channel, embedding) for every channel active inside segments of the given kinds."""
    out = []
    act = conv.activity.matrix
    for seg in form_segments(conv.activity, min_silence):
        if seg.kind not in kinds:
            continue
        sl = slice(seg.start_frame, seg.end_frame)
        for s in range(2):
            if act[sl, s].any():
                out.append((conv.speakers[s], s, acoustic.speaker_embed(model, x[sl], act[sl, s])))
    return out


def loo_nearest_neighbour_accuracy(embeddings: np.ndarray, labels) -> float:
    """Leave-one-out 1-NN accuracy under Euclidean distance."""
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(e) < 2:
        return float("nan")
    d = ((e[:, None, :] - e[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    return float(np.mean(labels[d.argmin(1)] == labels))


def embedding_analysis(model, convs, xs, held_out, min_silence: int = 10) -> dict:
    """Cross-correlation over ``convs``; leave-one-out speaker accuracy on ``held_out = (conv, x)``."""
    xcs = []
    for conv, x in zip(convs, xs):
        # mean embedding per channel over every segment the speaker talks in
        allpts = segment_embeddings(model, conv, x, ("A", "B", "C"), min_silence)
        means = [[p[2] for p in allpts if p[1] == s] for s in range(2)]
        if means[0] and means[1]:
            xcs.append(acoustic.embedding_cross_correlation(np.mean(means[0], 0), np.mean(means[1], 0)))
    conv, x = held_out
    pts = segment_embeddings(model, conv, x, ("C",), min_silence)
    held_acc = loo_nearest_neighbour_accuracy([p[2] for p in pts], [p[0] for p in pts]) if pts else float("nan")
    silence = acoustic.speaker_embed(model, xs[0][:50], np.zeros(min(50, len(xs[0]))))
    return {
        "held_out_conversation": conv.conv_id,
        "held_out_points": len(pts),
        "held_out_loo_accuracy": held_acc,
        "cross_correlation": xcs,
        "fraction_cross_correlation_below_0.5": float(np.mean(np.asarray(xcs) < 0.5)) if xcs else 0.0,
        "silence_embedding_is_zero": bool(np.all(silence == 0)),
    }


# ---------------------------------------------------------------------------
# the whole run


def _r(x, nd=4):
    if x is None:
        return None
    if isinstance(x, float) and np.isnan(x):
        return None
    return round(float(x), nd)


def run_experiment(cfg: ExperimentConfig, out_dir=None, kinds=None) -> tuple:
    """Full desk-scale pipeline for one seed.

    Returns ``(report, timings)``.  When ``out_dir`` is given the config,
    report, checkpoints, loss curves and transcripts are written there.
    """
    torch.set_num_threads(1)
    kinds = tuple(kinds or cfg.am_kinds)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg))
    timings = {}
    t0 = time.perf_counter()

    corpora = make_corpora(cfg)
    train, evals = corpora["train"], corpora["eval"]
    shift = cfg.features.frame_shift
    x_train = [stacked_features(c, cfg.features) for c in train]
    x_eval = [stacked_features(c, cfg.features) for c in evals]
    analysis = (corpora["analysis"][0], stacked_features(corpora["analysis"][0], cfg.features))
    timings["synth_s"] = time.perf_counter() - t0

    report = {
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "corpus": {"train": overlap_stats(train), "eval": overlap_stats(evals),
                   "diarizer_extra": len(corpora["diar_extra"]), "diarizer_single": len(corpora["diar_single"]),
                   "analysis": overlap_stats(corpora["analysis"]),
                   "total_conversations": len(train) + len(evals)},
    }

    t = time.perf_counter()
    diar_convs = train + corpora["diar_extra"] + corpora["diar_single"]
    diar_x = x_train + [stacked_features(c, cfg.features) for c in corpora["diar_extra"] + corpora["diar_single"]]
    diar_model, diar_state = train_diarizer_stage(cfg, diar_convs, diar_x)
    results = diarize_all(diar_model, evals, x_eval, shift)
    # the toy turns are short, so the no-collar DER is reported alongside the collared one
    der = der_no = der_strict = None
    for conv in evals:
        act = results[conv.conv_id].activity()
        a = compute_der(conv.activity, act, cfg.scoring.collar, True)
        b = compute_der(conv.activity, act, cfg.scoring.collar, False)
        c = compute_der(conv.activity, act, 0.0, True)
        der = a if der is None else der + a
        der_no = b if der_no is None else der_no + b
        der_strict = c if der_strict is None else der_strict + c
    fields = ("miss_pct", "fa_pct", "spkerr_pct", "der_pct")
    report["diarizer"] = {
        "der": {k: _r(getattr(der, k), 2) for k in fields},
        "der_no_overlap": {k: _r(getattr(der_no, k), 2) for k in fields},
        "der_no_collar": {k: _r(getattr(der_strict, k), 2) for k in fields},
        "all_silence_der": _r(all_silence_der(evals, cfg.scoring.collar), 2),
        "final_epoch_loss": _r(epoch_means(diar_state["history"])[-1]),
        "speaker_counts": [int(results[c.conv_id].num_speakers) for c in evals],
    }
    timings["diarizer_s"] = time.perf_counter() - t
    if out:
        save_checkpoint(out / "diarizer.pt", "diarizer", diar_model, cfg.diarizer, None,
                        {"config_hash": report["config_hash"], "seed": cfg.seed})
        write_loss_csv(out / "diarizer_loss.csv", diar_state["history"])

    world_lexicon = _lexicon(cfg)
    lm = fit_lm(train, sorted(world_lexicon), cfg.decode.lm_smoothing)
    graph = build_graph(world_lexicon, lm, cfg.decode.lm_weight, cfg.decode.insertion_penalty,
                        cfg.decode.silence_class)
    gts = {c.conv_id: c.activity.matrix for c in evals}
    auto = {cid: r.binary_activity for cid, r in results.items()}
    ref_acts = {c.conv_id: c.activity for c in evals}
    auto_acts = {cid: r.activity() for cid, r in results.items()}

    report["models"] = {}
    for kind in kinds:
        t = time.perf_counter()
        model, state = train_am_stage(cfg, kind, train)
        timings[f"train_{kind}_s"] = time.perf_counter() - t
        t = time.perf_counter()
        correct = total = 0
        for conv, x in zip(evals, x_eval):
            a, b = overlapped_frame_accuracy(model, conv, x)
            correct += a
            total += b
        tr_gts = transcribe_all(cfg, model, evals, x_eval, gts, world_lexicon, lm, graph)
        tr_auto = transcribe_all(cfg, model, evals, x_eval, auto, world_lexicon, lm, graph)
        rep_gts = score_pipeline(evals, ref_acts, tr_gts, cfg.scoring.min_gap, cfg.scoring.collar,
                                 cfg.scoring.correlation)
        rep_auto = score_pipeline(evals, auto_acts, tr_auto, cfg.scoring.min_gap, cfg.scoring.collar,
                                  cfg.scoring.correlation)
        entry = {
            "overlap_frame_accuracy": _r(100.0 * correct / max(total, 1), 2),
            "wer_gts": _r(rep_gts.aggregate.wer_pct, 2),
            "wer_diarizer": _r(rep_auto.aggregate.wer_pct, 2),
            "gts_report": rep_gts.to_dict(),
            "diarizer_report": rep_auto.to_dict(),
            "final_epoch_loss": _r(epoch_means(state["history"])[-1]),
        }
        if acoustic.is_conditioned(model):
            emb = embedding_analysis(model, evals, x_eval, analysis, cfg.augment.min_silence)
            emb["cross_correlation"] = [_r(v) for v in emb["cross_correlation"]]
            entry["embeddings"] = {k: (_r(v) if isinstance(v, float) else v) for k, v in emb.items()}
        report["models"][kind] = entry
        timings[f"eval_{kind}_s"] = time.perf_counter() - t
        logger.info("%s: overlap acc %.2f, WER GTS %s, WER diarizer %s", kind, entry["overlap_frame_accuracy"],
                    entry["wer_gts"], entry["wer_diarizer"])
        if out:
            save_checkpoint(out / f"am-{kind}.pt", kind, model, cfg.am, None,
                            {"config_hash": report["config_hash"], "seed": cfg.seed})
            write_loss_csv(out / f"am-{kind}_loss.csv", state["history"])
            write_transcript_json(out / f"transcripts-{kind}-gts.json", tr_gts)
            write_transcript_json(out / f"transcripts-{kind}-diarizer.json", tr_auto)

    timings["total_s"] = time.perf_counter() - t0
    if out:
        (out / "report.json").write_text(report_json(report))
        (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    return report, timings


def _lexicon(cfg: ExperimentConfig) -> dict:
    from .corpus import ToyWorld

    return ToyWorld(cfg.corpus).lexicon


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def directional_checks(report: dict) -> dict:
    """Directional checks on one seed's report."""
    m = report["models"]
    out = {}
    if "icam" in m and "blstm-mix" in m:
        out["accuracy_margin"] = m["icam"]["overlap_frame_accuracy"] - m["blstm-mix"]["overlap_frame_accuracy"]
    if {"icam", "gfam", "blstm-mix"} <= set(m):
        w = {k: m[k]["wer_gts"] for k in ("icam", "gfam", "blstm-mix")}
        out["wer_ordering"] = w["icam"] <= w["gfam"] < w["blstm-mix"]
    if "icam" in m:
        out["diarizer_gap"] = m["icam"]["wer_diarizer"] - m["icam"]["wer_gts"]
    return out

