import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from animadapt import data as D
from animadapt.model import resample_features

SMALL = D.CorpusConfig(n_train=2, n_val=1, n_test=1, sentences_per_subject=3, n_vertices=30, seed=7)


@pytest.fixture(scope="module")
def small_corpus():
    return D.generate_corpus(SMALL)


# --- configuration ------------------------------------------------------------------


def test_default_config_structure():
    c = D.CorpusConfig()
    assert c.n_subjects == 12 and c.sentences_per_subject == 40
    assert (c.train_subjects, c.val_subjects, c.test_subjects) == (list(range(8)), [8, 9], [10, 11])
    assert (c.fps, c.feature_rate, c.d_audio, c.n_vertices, c.min_frames, c.max_frames) == (25, 50, 16, 120, 75, 150)


def test_config_round_trip_and_unknown_field():
    assert D.CorpusConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ValueError, match="bogus"):
        D.CorpusConfig.from_dict({**SMALL.to_dict(), "bogus": 1})


@pytest.mark.parametrize("kw", [dict(n_train=0), dict(min_frames=80, max_frames=70), dict(n_test=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        D.CorpusConfig(**kw)


# --- generation ------------------------------------------------------------------------


def test_generation_is_deterministic(small_corpus):
    again = D.generate_corpus(SMALL)
    for a, b in zip(small_corpus.sentences, again.sentences):
        for x, y in zip(a, b):
            assert x.audio.tobytes() == y.audio.tobytes()
            assert x.vertices.tobytes() == y.vertices.tobytes()
    assert small_corpus.neutral.tobytes() == again.neutral.tobytes()


def test_different_seed_changes_corpus(small_corpus):
    other = D.generate_corpus(D.CorpusConfig(**{**SMALL.to_dict(), "seed": 8}))
    assert not np.array_equal(other.sentences[0][0].audio[:10], small_corpus.sentences[0][0].audio[:10])


def test_sentence_shapes_and_bounds(small_corpus):
    for subj in small_corpus.sentences:
        for s in subj:
            T = s.n_frames
            assert SMALL.min_frames <= T <= SMALL.max_frames
            assert s.audio.shape == (2 * T, SMALL.d_audio)
            assert s.vertices.shape == (T, SMALL.n_vertices, 3)
            assert resample_features(s.audio, 50, 25).shape[0] == T
            assert np.all(np.isfinite(s.vertices)) and np.abs(s.vertices).max() <= D.VERTEX_BOUND
            assert s.silence_mask.shape == (T,) and not s.silence_mask.any()


def test_sentences_regenerate_independently(small_corpus):
    teacher = D.make_teacher(SMALL)
    s = D.make_sentence(SMALL, teacher, small_corpus.neutral[2], 2, 1)
    assert s.vertices.tobytes() == small_corpus.sentences[2][1].vertices.tobytes()


def test_audio_is_band_limited_tones_plus_smoothed_noise():
    rng = D.rng_for(0, 99)
    a = D.synth_audio(rng, 4000, D.CorpusConfig())
    power = np.abs(np.fft.rfft(a - a.mean(axis=0), axis=0)) ** 2
    freqs = np.fft.rfftfreq(4000, d=1 / 50)
    # nearly all energy at or below 8 Hz plus the moving-average noise tail
    assert power[freqs <= 8.5].sum() / power.sum() > 0.9
    assert abs(a.std() - np.sqrt(0.5 + 0.09 / 5)) < 0.05


def test_subject_difference_has_rank_two():
    cfg = D.CorpusConfig()
    teacher = D.make_teacher(cfg)
    rng = D.rng_for(1, 123)
    res = resample_features(D.synth_audio(rng, 240, cfg), cfg.feature_rate, cfg.fps)
    diff = teacher.offsets(res, 0) - teacher.offsets(res, 5)
    s = np.linalg.svd(diff, compute_uv=False)
    assert s[0] > 1e-3 and s[1] > 1e-6 * s[0]
    assert s[2] / s[0] < 1e-8


def test_subjects_share_backbone(small_corpus):
    t = small_corpus.teacher
    s0, s1 = small_corpus.sentences[0][0], small_corpus.sentences[1][0]
    res = resample_features(s0.audio, 50, 25)
    np.testing.assert_allclose(small_corpus.offsets(s0), t.offsets(res, 0), rtol=0, atol=1e-10)
    assert not np.allclose(t.offsets(res, 0), t.offsets(res, 1))
    assert s1.subject == 1


# --- concatenation -----------------------------------------------------------------------


def _sent(T, subject=0, value=0.0):
    return D.Sentence(subject, 0, np.full((2 * T, 4), value + 1.0), np.full((T, 5, 3), value),
                      np.zeros(T, dtype=bool))


def test_concat_single_sentence_unchanged():
    s = _sent(10)
    out = D.concat_sentences([s], np.zeros((5, 3)))
    np.testing.assert_array_equal(out.vertices, s.vertices)
    np.testing.assert_array_equal(out.audio, s.audio)
    assert not out.silence_mask.any()


def test_concat_length_and_gaps():
    neutral = np.full((5, 3), -2.0)
    out = D.concat_sentences([_sent(100, value=k) for k in range(10)], neutral)
    assert out.n_frames == 1000 + 9 * 25 == 1225
    assert out.audio.shape[0] == 2 * 1225
    assert out.silence_mask.sum() == 9 * 25
    gap = out.silence_mask
    np.testing.assert_array_equal(out.vertices[gap], np.broadcast_to(neutral, (225, 5, 3)))
    assert np.all(out.audio[200:250] == 0.0) and np.all(out.vertices[100:125] == -2.0)
    assert np.flatnonzero(gap)[:3].tolist() == [100, 101, 102]


def test_concat_rejects_mixed_subjects_and_empty():
    with pytest.raises(ValueError, match="mixed"):
        D.concat_sentences([_sent(5, 0), _sent(5, 1)], np.zeros((5, 3)))
    with pytest.raises(ValueError):
        D.concat_sentences([], np.zeros((5, 3)))


def test_masked_metric_is_length_weighted_mean():
    r = np.random.default_rng(0)
    parts = [_sent(T) for T in (30, 50, 20)]
    for p in parts:
        p.vertices = r.normal(size=p.vertices.shape)
    preds = [p.vertices + r.normal(0, 0.1, p.vertices.shape) for p in parts]
    neutral = np.zeros((5, 3))
    long_gt = D.concat_sentences(parts, neutral)
    long_pred = np.concatenate([preds[0], np.full((25, 5, 3), 9.0), preds[1], np.full((25, 5, 3), 9.0), preds[2]])
    got = D.l2_face(long_pred, long_gt.vertices, long_gt.silence_mask)
    want = sum(D.l2_face(p, s.vertices) * s.n_frames for p, s in zip(preds, parts)) / 100
    assert abs(got - want) < 1e-12


# --- metrics ------------------------------------------------------------------------------


def brute(pred, gt, mask, lip_ids):
    keep = [t for t in range(pred.shape[0]) if not mask[t]]
    face, lip, lmax = [], [], []
    for t in keep:
        row = []
        for v in range(pred.shape[1]):
            d = sum((pred[t, v, c] - gt[t, v, c]) ** 2 for c in range(3)) ** 0.5
            face.append(d)
            if v in lip_ids:
                lip.append(d)
                row.append(d)
        lmax.append(max(row))
    return {"l2_face": sum(face) / len(face), "l2_lip": sum(lip) / len(lip), "lip_max": sum(lmax) / len(lmax)}


def test_metrics_zero_on_identity():
    g = np.random.default_rng(1).normal(size=(4, 6, 3))
    assert D.metrics(g, g, lip_ids=(0, 1)) == {"l2_face": 0.0, "l2_lip": 0.0, "lip_max": 0.0}


def test_metrics_constant_offset():
    g = np.random.default_rng(2).normal(size=(4, 6, 3))
    m = D.metrics(g + 0.25, g, lip_ids=(0, 1))
    for v in m.values():
        assert abs(v - 0.25 * np.sqrt(3)) < 1e-12


def test_metrics_brute_force():
    r = np.random.default_rng(3)
    pred, gt = r.normal(size=(5, 4, 3)), r.normal(size=(5, 4, 3))
    mask = np.array([False, True, False, False, False])
    want = brute(pred, gt, mask, (0, 2))
    got = D.metrics(pred, gt, mask, (0, 2))
    for k in want:
        assert abs(got[k] - want[k]) < 1e-12


def test_metrics_accept_flat_layout():
    r = np.random.default_rng(4)
    pred, gt = r.normal(size=(5, 4, 3)), r.normal(size=(5, 4, 3))
    assert D.l2_face(pred.reshape(5, 12), gt.reshape(5, 12)) == D.l2_face(pred, gt)


def test_metrics_reject_all_masked_and_bad_shapes():
    g = np.zeros((3, 4, 3))
    with pytest.raises(ValueError, match="masked"):
        D.l2_face(g, g, np.ones(3, dtype=bool))
    with pytest.raises(ValueError, match="shape"):
        D.l2_face(g, np.zeros((3, 5, 3)))
    with pytest.raises(ValueError, match="mask length"):
        D.l2_face(g, g, np.zeros(2, dtype=bool))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6, 3), elements=st.floats(-10, 10)),
       arrays(np.float64, (4, 6, 3), elements=st.floats(-10, 10)),
       st.permutations(list(range(6))))
def test_metric_properties(pred, gt, perm):
    lips = (0, 2, 3)
    m = D.metrics(pred, gt, lip_ids=lips)
    assert m["lip_max"] >= m["l2_lip"] - 1e-12
    # reordering vertices with a consistent relabelling of the lip set
    inv = {old: new for new, old in enumerate(perm)}
    m2 = D.metrics(pred[:, perm], gt[:, perm], lip_ids=tuple(inv[i] for i in lips))
    for k in m:
        assert abs(m[k] - m2[k]) < 1e-9


# --- persistence -------------------------------------------------------------------------


def test_corpus_round_trip(tmp_path, small_corpus):
    manifest = D.save_corpus(small_corpus, tmp_path / "c")
    assert json.loads((tmp_path / "c" / "manifest.json").read_text())["config"] == SMALL.to_dict()
    assert len(manifest["files"]) == 1 + 4 * 3
    back = D.load_corpus(tmp_path / "c")
    assert back.config == SMALL
    np.testing.assert_array_equal(back.neutral, small_corpus.neutral)
    for a, b in zip(back.sentences, small_corpus.sentences):
        for x, y in zip(a, b):
            assert (x.subject, x.index) == (y.subject, y.index)
            np.testing.assert_array_equal(x.vertices, y.vertices)
            np.testing.assert_array_equal(x.audio, y.audio)
            np.testing.assert_array_equal(x.silence_mask, y.silence_mask)


def test_save_corpus_is_idempotent(tmp_path, small_corpus):
    D.save_corpus(small_corpus, tmp_path / "a")
    D.save_corpus(D.generate_corpus(SMALL), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_sentence_round_trip_with_neutral(tmp_path):
    s = _sent(6)
    s.silence_mask[2] = True
    D.save_sentence(tmp_path / "s.bin", s, neutral=np.ones((5, 3)))
    back, neutral = D.load_sentence(tmp_path / "s.bin")
    np.testing.assert_array_equal(back.silence_mask, s.silence_mask)
    np.testing.assert_array_equal(neutral, np.ones((5, 3)))
