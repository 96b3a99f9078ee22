import json

import numpy as np
import pytest

from overlap_asr import acoustic
from overlap_asr.acoustic import AMConfig
from overlap_asr.corpus import form_segments
from overlap_asr.experiment import (
    all_silence_der,
    corpus_seed,
    desk_config,
    directional_checks,
    loo_nearest_neighbour_accuracy,
    make_corpora,
    run_experiment,
    segment_embeddings,
    smoke_config,
)
from overlap_asr.pipeline import stacked_features


def test_loo_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(2, 15))
        e = rng.normal(size=(n, 4))
        lab = rng.integers(0, 3, n)
        hits = 0
        for i in range(n):
            best, arg = np.inf, -1
            for j in range(n):
                if j != i:
                    d = float(np.sum((e[i] - e[j]) ** 2))
                    if d < best:
                        best, arg = d, j
            hits += lab[arg] == lab[i]
        assert loo_nearest_neighbour_accuracy(e, lab) == pytest.approx(hits / n)


def test_loo_undefined_below_two_points():
    assert np.isnan(loo_nearest_neighbour_accuracy(np.zeros((1, 3)), [0]))


def test_split_seeds_are_distinct():
    seeds = {corpus_seed(s, k) for s in range(3) for k in range(1, 6)}
    assert len(seeds) == 15


def test_desk_corpus_meets_size_and_overlap_floor():
    cfg = desk_config(0)
    assert cfg.corpus.num_conversations + cfg.eval_conversations >= 200
    corpora = make_corpora(smoke_config(0))
    assert set(corpora) == {"train", "eval", "diar_extra", "diar_single", "analysis"}
    assert all(c.activity.matrix[:, 1].sum() == 0 for c in corpora["diar_single"])


def test_analysis_conversation_has_many_overlap_segments():
    cfg = desk_config(0)
    conv = make_corpora(smoke_config(0))["analysis"][0]
    kinds = [s.kind for s in form_segments(conv.activity, cfg.augment.min_silence)]
    assert kinds.count("C") >= 5 and kinds.count("A") >= 1 and kinds.count("B") >= 1


def test_segment_embeddings_label_channels():
    corpora = make_corpora(smoke_config(0))
    conv = corpora["analysis"][0]
    cfg = smoke_config(0)
    model = acoustic.build_am("icam", cfg.am, 0)
    pts = segment_embeddings(model, conv, stacked_features(conv, cfg.features), ("C",))
    assert {p[1] for p in pts} == {0, 1}
    assert all(p[0] == conv.speakers[p[1]] for p in pts)
    assert all(p[2].shape == (cfg.am.embedding_dim,) for p in pts)


def test_all_silence_der_is_full_miss():
    convs = make_corpora(smoke_config(0))["eval"]
    assert all_silence_der(convs, 0.0) == pytest.approx(100.0)


def test_directional_checks():
    rep = {"models": {"icam": {"overlap_frame_accuracy": 80.0, "wer_gts": 10.0, "wer_diarizer": 12.5},
                      "gfam": {"overlap_frame_accuracy": 70.0, "wer_gts": 10.0, "wer_diarizer": 13.0},
                      "blstm-mix": {"overlap_frame_accuracy": 60.0, "wer_gts": 20.0, "wer_diarizer": 22.0}}}
    chk = directional_checks(rep)
    assert chk == {"accuracy_margin": 20.0, "wer_ordering": True, "diarizer_gap": 2.5}
    rep["models"]["gfam"]["wer_gts"] = 20.0
    assert directional_checks(rep)["wer_ordering"] is False


def test_smoke_run_writes_consistent_report(tmp_path):
    report, timings = run_experiment(smoke_config(0), tmp_path)
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk == json.loads(json.dumps(report))
    assert set(report["models"]) == {"icam", "gfam", "blstm-mix"}
    assert "embeddings" in report["models"]["icam"] and "embeddings" not in report["models"]["blstm-mix"]
    assert report["models"]["icam"]["embeddings"]["silence_embedding_is_zero"]
    assert timings["total_s"] > 0 and '"total_s"' not in json.dumps(report)
    for kind in report["models"]:
        assert (tmp_path / f"am-{kind}.pt").exists()
