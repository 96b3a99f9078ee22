import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from overlap_asr.corpus import CorpusSpec, synth_toy_corpus
from overlap_asr.diarization import (
    DiarizerConfig,
    DiarizerTrainConfig,
    active_label_columns,
    build_diarizer,
    diarization_loss,
    diarizer_forward,
    pit_bce_loss,
    pit_bce_with_logits,
    threshold_activity,
    train_diarizer,
)
from overlap_asr.features import FeatureConfig, InputError
from overlap_asr.pipeline import stacked_features

from gradcheck import sampled_gradient_errors

TINY = DiarizerConfig(input_dim=20, encoder_blocks=1, model_dim=8, attention_heads=2, ff_dim=16,
                      attractor_hidden_dim=8, dropout=0.0)


def _bce_loop(p, y):
    total = 0.0
    for t in range(p.shape[0]):
        for j in range(p.shape[1]):
            q = min(max(p[t, j], 1e-7), 1 - 1e-7)
            total += -(y[t, j] * np.log(q) + (1 - y[t, j]) * np.log(1 - q))
    return total / p.size


def test_pit_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, s = int(rng.integers(1, 20)), int(rng.integers(1, 4))
        p = rng.uniform(0.01, 0.99, (n, s))
        y = (rng.random((n, s)) < 0.5).astype(float)
        losses = {perm: _bce_loop(p[:, list(perm)], y) for perm in itertools.permutations(range(s))}
        best = min(losses.values())
        loss, perm = pit_bce_loss(p, y)
        assert loss == pytest.approx(best, abs=1e-9)
        assert losses[tuple(perm)] == pytest.approx(best, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (15, 3), elements=st.floats(0.01, 0.99)),
       arrays(np.float64, (15, 3), elements=st.sampled_from([0.0, 1.0])),
       st.permutations(range(3)))
def test_pit_is_permutation_invariant(p, y, perm):
    a, _ = pit_bce_loss(p, y)
    b, _ = pit_bce_loss(p[:, list(perm)], y)
    c, _ = pit_bce_loss(p, y[:, list(perm)])
    assert a == pytest.approx(b, abs=1e-12) and a == pytest.approx(c, abs=1e-12)


def test_pit_logit_form_agrees_with_probability_form():
    rng = np.random.default_rng(1)
    logits = torch.tensor(rng.normal(size=(20, 2)))
    y = torch.tensor((rng.random((20, 2)) < 0.5).astype(float))
    a, pa = pit_bce_with_logits(logits, y)
    b, pb = pit_bce_loss(torch.sigmoid(logits).numpy(), y.numpy())
    assert float(a) == pytest.approx(b, abs=1e-6) and tuple(pa) == tuple(pb)


def test_pit_shape_mismatch():
    with pytest.raises(InputError):
        pit_bce_loss(np.zeros((4, 2)), np.zeros((4, 3)))


def _median_loop(b, w):
    n = len(b)
    half = w // 2
    out = np.zeros_like(b)
    for t in range(n):
        window = [b[min(max(t + k, 0), n - 1)] for k in range(-half, half + 1)]
        out[t] = sorted(window)[half]
    return out


def test_threshold_and_median_match_loop():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = rng.random((int(rng.integers(1, 60)), 2))
        w = int(rng.choice([1, 3, 5, 11]))
        got = threshold_activity(p, 0.5, w)
        for s in range(2):
            assert np.array_equal(got[:, s], _median_loop((p[:, s] > 0.5).astype(float), w))


def test_median_removes_short_blips():
    p = np.zeros((40, 1))
    p[10:13] = 0.9
    p[20:35] = 0.9
    got = threshold_activity(p, 0.5, 11)[:, 0]
    assert got[10:13].sum() == 0 and got[22:33].all()


def test_threshold_rejects_bad_arguments():
    with pytest.raises(InputError):
        threshold_activity(np.zeros((4, 2)), 0.5, 4)
    with pytest.raises(InputError):
        threshold_activity(np.zeros((4, 2)), 1.0, 3)


def test_active_columns_ordered_by_first_activity():
    act = np.zeros((10, 3))
    act[6:, 0] = 1
    act[2:4, 2] = 1
    out = active_label_columns(act)
    assert out.shape == (10, 2)
    assert np.array_equal(out[:, 0], act[:, 2]) and np.array_equal(out[:, 1], act[:, 0])


@pytest.mark.parametrize("n", [1, 4, 5, 6, 37, 100])
def test_output_length_contract(n):
    model = build_diarizer(TINY, 0)
    res = diarizer_forward(np.random.default_rng(n).normal(size=(n, 20)).astype(np.float32), model)
    assert res.posteriors.shape == (n, 2) and res.binary_activity.shape == (n, 2)
    assert ((res.posteriors > 0) & (res.posteriors < 1)).all()
    assert res.attractor_existence.shape == (3,)
    assert set(np.unique(res.binary_activity)) <= {0.0, 1.0}
    assert res.binary_activity[:, res.num_speakers:].sum() == 0


def test_empty_input_rejected():
    with pytest.raises(InputError):
        diarizer_forward(np.zeros((0, 20)), build_diarizer(TINY))


def test_config_validation():
    with pytest.raises(InputError):
        DiarizerConfig(model_dim=10, attention_heads=4)
    with pytest.raises(InputError):
        DiarizerConfig(max_speakers=1)


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = build_diarizer(TINY, 0).double()
    model.train()
    rng = np.random.default_rng(3)
    x = torch.tensor(rng.normal(size=(2, 30, 20)))
    labels = [torch.tensor((rng.random((6, k)) < 0.5).astype(float)) for k in (2, 1)]
    errors = sampled_gradient_errors(model, lambda: diarization_loss(model, x, labels), rng, 20,
                                     must_include=("encoder.", "eda_decoder.", "existence."))
    assert max(e for _, e in errors) < 1e-3, errors


@pytest.fixture(scope="module")
def tiny_corpus():
    spec = CorpusSpec(num_conversations=6)
    convs = synth_toy_corpus(spec, 11)
    feat = FeatureConfig()
    return [stacked_features(c, feat) for c in convs], [c.activity.matrix for c in convs]


def test_training_reduces_loss_and_is_deterministic(tiny_corpus):
    xs, acts = tiny_corpus
    cfg = DiarizerConfig(encoder_blocks=1, model_dim=16, ff_dim=32, attractor_hidden_dim=16, dropout=0.0)
    tcfg = DiarizerTrainConfig(epochs=8, lr=3e-3, batch_size=4, chunk_frames=200, seed=1)
    _, s1 = train_diarizer(xs, acts, cfg, tcfg)
    _, s2 = train_diarizer(xs, acts, cfg, tcfg)
    losses = [h["loss"] for h in s1["history"]]
    k = max(len(losses) // 4, 1)
    assert np.mean(losses[-k:]) < np.mean(losses[:k])
    assert losses == [h["loss"] for h in s2["history"]]


def test_empty_training_corpus_rejected():
    with pytest.raises(InputError):
        train_diarizer([], [], TINY, DiarizerTrainConfig())
