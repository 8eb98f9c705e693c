import numpy as np
import pytest

from animadapt import lora, numerics as N
from animadapt import model as M
from animadapt.model import ModelConfig, StyleMode
from animadapt.training import loss_and_grad

MODES = [StyleMode.IMITATOR, StyleMode.FACEFORMER]


def tiny(mode, **kw):
    base = dict(d_audio=3, d_model=8, n_heads=2, n_layers=2, n_vertices=4, n_styles=3,
                lip_vertex_ids=(0, 1), d_ff=6, d_motion_hidden=5, style_mode=mode)
    base.update(kw)
    return ModelConfig(**base)


def inputs(config, T, seed=0):
    r = np.random.default_rng(seed)
    return r.uniform(-1, 1, (T, config.d_audio)), r.uniform(-1, 1, (1, config.d_model))


def perturbed(weights, scale=0.3, seed=1):
    """Initial weights with non-trivial norms/biases so every gradient path is exercised."""
    r = np.random.default_rng(seed)
    return {k: v + scale * r.uniform(-1, 1, v.shape) if k.endswith((".g", ".b")) else v
            for k, v in weights.items()}


# --- configuration ------------------------------------------------------------


def test_default_config():
    c = ModelConfig()
    assert (c.d_audio, c.d_model, c.n_heads, c.n_layers, c.n_vertices) == (16, 32, 4, 2, 120)
    assert (c.fps, c.feature_rate, c.n_styles) == (25, 50, 8)
    assert c.out_dim == 360 and c.lip_vertex_ids == tuple(range(24))
    assert c.style_mode is StyleMode.IMITATOR


@pytest.mark.parametrize("kw", [dict(n_heads=5), dict(lip_vertex_ids=(0, 120)), dict(d_model=0),
                                dict(lip_vertex_ids=())])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_config_round_trip():
    c = ModelConfig(style_mode="faceformer", lip_vertex_ids=[3, 4])
    assert ModelConfig.from_dict(c.to_dict()) == c


@pytest.mark.parametrize("mode", MODES)
def test_init_weights_shapes_and_determinism(mode):
    c = ModelConfig(style_mode=mode)
    w = M.init_weights(c, seed=3)
    M.check_weights(w, c)
    w2 = M.init_weights(c, seed=3)
    assert all(np.array_equal(w[k], w2[k]) for k in w)
    assert ("start_token" in w) == (mode is StyleMode.IMITATOR)
    assert ("vertex_enc.W" in w) == (mode is StyleMode.FACEFORMER)
    assert w["style.table"].shape == (8, 32)


def test_check_weights_reports_bad_shape():
    c = ModelConfig()
    w = M.init_weights(c)
    w["motion.out.b"] = np.zeros((1, 3))
    with pytest.raises(N.ShapeError, match="motion.out.b"):
        M.check_weights(w, c)


# --- audio encoder --------------------------------------------------------------


def test_resample_rate_arithmetic():
    assert M.resample_features(np.zeros((100, 2)), 50, 25).shape == (50, 2)
    assert M.resample_features(np.zeros((101, 2)), 50, 25).shape == (50, 2)


def test_resample_preserves_constants():
    x = np.tile([[0.5, -2.0, 7.0]], (37, 1))
    np.testing.assert_array_equal(M.resample_features(x, 50, 25), np.tile(x[:1], (18, 1)))


def test_resample_preserves_linear_ramp():
    n = 90
    x = np.stack([np.arange(n) * 0.25 - 3.0, -np.arange(n) * 1.5], axis=1)
    y = M.resample_features(x, 50, 30)
    t_in = np.arange(y.shape[0]) * 50 / 30
    np.testing.assert_allclose(y[:, 0], t_in * 0.25 - 3.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(y[:, 1], -t_in * 1.5, rtol=0, atol=1e-12)


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros((1, 3)), np.zeros(5)])
def test_resample_rejects_degenerate_input(bad):
    with pytest.raises(ValueError):
        M.resample_features(bad, 50, 25)


def test_encode_audio_constant_in_time():
    c = ModelConfig()
    w = M.init_weights(c)
    out = M.encode_audio(np.tile(np.linspace(-1, 1, 16), (40, 1)), w, c)
    assert out.shape == (20, 32)
    np.testing.assert_array_equal(out, np.tile(out[:1], (20, 1)))


# --- positional term ------------------------------------------------------------


def test_positional_term_at_zero_alternates():
    np.testing.assert_array_equal(M.positional_term(0, 8), [0, 1, 0, 1, 0, 1, 0, 1])


def test_positional_term_closed_form():
    np.testing.assert_allclose(M.positional_term(1, 4), [np.sin(1), np.cos(1), np.sin(0.01), np.cos(0.01)],
                               rtol=0, atol=1e-15)


def test_positional_terms_distinct_and_bounded():
    P = M.positional_term(np.arange(1000), 32)
    assert len({row.tobytes() for row in P}) == 1000
    dist = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
    assert dist[~np.eye(1000, dtype=bool)].min() > 1e-3
    assert np.all(np.linalg.norm(P, axis=1) <= np.sqrt(32) + 1e-12)


def test_positional_term_rejects_negative():
    with pytest.raises(ValueError):
        M.positional_term(-1, 8)


# --- forward / decode -------------------------------------------------------------


@pytest.mark.parametrize("mode", MODES)
def test_decode_is_deterministic(mode):
    c = ModelConfig(style_mode=mode)
    w = M.init_weights(c, seed=1)
    feats, style = inputs(c, 20)
    a = M.decode_sequence(M.project_audio(feats, w), style, w, c)
    b = M.decode_sequence(M.project_audio(feats, w), style, w, c)
    assert a.shape == (20, 360) and a.tobytes() == b.tobytes()


@pytest.mark.parametrize("mode", MODES)
def test_style_width_mismatch_rejected(mode):
    c = tiny(mode)
    w = M.init_weights(c)
    feats, _ = inputs(c, 4)
    with pytest.raises(N.ShapeError, match="style width"):
        M.decode_sequence(M.project_audio(feats, w), np.zeros(7), w, c)


def test_single_frame_imitator_depends_on_frame_zero_only():
    c = tiny(StyleMode.IMITATOR)
    w = M.init_weights(c)
    feats, style = inputs(c, 1)
    out = M.decode_sequence(M.project_audio(feats, w), style, w, c)
    out2 = M.decode_sequence(M.project_audio(feats, w), style, w, c)
    assert out.shape == (1, c.out_dim) and np.array_equal(out, out2)
    w2 = dict(w, start_token=w["start_token"] + np.linspace(-0.3, 0.3, c.d_model))
    assert not np.allclose(M.decode_sequence(M.project_audio(feats, w), style, w2, c), out)


def test_faceformer_autoregressive_equals_teacher_forced_on_own_outputs():
    c = tiny(StyleMode.FACEFORMER)
    w = perturbed(M.init_weights(c, seed=2))
    feats, style = inputs(c, 9)
    auto = M.decode_sequence(M.project_audio(feats, w), style, w, c)
    full, _ = M.forward(w, feats, style, c, prev=M.shift_previous(auto))
    np.testing.assert_allclose(auto, full, rtol=0, atol=1e-12)


def test_imitator_decode_equals_forward():
    c = tiny(StyleMode.IMITATOR)
    w = perturbed(M.init_weights(c, seed=2))
    feats, style = inputs(c, 9)
    full, _ = M.forward(w, feats, style, c)
    np.testing.assert_array_equal(M.decode_sequence(M.project_audio(feats, w), style, w, c), full)


def test_faceformer_self_attention_is_causal():
    c = tiny(StyleMode.FACEFORMER)
    w = perturbed(M.init_weights(c, seed=4))
    feats, style = inputs(c, 8)
    prev = np.random.default_rng(5).uniform(-1, 1, (8, c.out_dim))
    base, _ = M.forward(w, feats, style, c, prev=prev)
    t_prime = 5
    prev2 = prev.copy()
    prev2[t_prime] += 0.5
    out, _ = M.forward(w, feats, style, c, prev=prev2)
    np.testing.assert_array_equal(out[:t_prime], base[:t_prime])
    assert not np.allclose(out[t_prime], base[t_prime])


def test_imitator_self_attention_is_causal(monkeypatch):
    c = tiny(StyleMode.IMITATOR)
    w = perturbed(M.init_weights(c, seed=4))
    feats, style = inputs(c, 8)
    base, _ = M.forward(w, feats, style, c)
    original = M._tokens
    t_prime = 3

    def bumped(*args, **kw):
        x, cache = original(*args, **kw)
        x = x.copy()
        x[t_prime] += np.linspace(-0.5, 0.5, x.shape[1])  # a uniform shift would vanish in layer norm
        return x, cache

    monkeypatch.setattr(M, "_tokens", bumped)
    out, _ = M.forward(w, feats, style, c)
    np.testing.assert_array_equal(out[:t_prime], base[:t_prime])
    assert not np.allclose(out[t_prime:], base[t_prime:])


@pytest.mark.parametrize("mode", MODES)
def test_attention_counter_full_sequence(mode):
    c = tiny(mode)
    w = M.init_weights(c)
    feats, style = inputs(c, 13)
    counter = M.AttentionCounter()
    M.decode_sequence(M.project_audio(feats, w), style, w, c, counter=counter)
    assert counter.per_layer_head() == 13 * 14 // 2
    assert len(counter.counts) == c.n_layers * c.n_heads
    assert counter.total == 13 * 14 // 2 * c.n_layers * c.n_heads


def test_attention_counter_rejects_uneven_counts():
    counter = M.AttentionCounter()
    counter.add(0, 0, 3)
    counter.add(0, 1, 4)
    with pytest.raises(AssertionError):
        counter.per_layer_head()


# --- end-to-end gradients ----------------------------------------------------------


def _loss_fn(w, feats, style, target, config, prev, adaptors, name):
    """Loss and gradient as a function of one named tensor (or the style vector)."""
    def f(x):
        ww, st = dict(w), style
        if name == "style":
            st = x
        elif name.endswith((".lora_A", ".lora_B")):
            layer, part = name.rsplit(".", 1)
            setattr(adaptors[layer], part[-1], x)
        else:
            ww[name] = x
        pred, cache = M.forward(ww, feats, st, config, prev=prev, adaptors=adaptors)
        value, dpred = loss_and_grad(pred, target)
        return value, M.backward(dpred, cache, config)[name]
    return f


@pytest.mark.parametrize("mode", MODES)
def test_end_to_end_gradients(mode):
    c = tiny(mode)
    w = perturbed(M.init_weights(c, seed=6))
    T = 6
    feats, style = inputs(c, T, seed=7)
    r = np.random.default_rng(8)
    target = r.uniform(-1, 1, (T, c.out_dim))
    prev = r.uniform(-1, 1, (T, c.out_dim)) if mode is StyleMode.FACEFORMER else None
    names = sorted(w) + ["style"]
    names.remove("style.table")
    worst = 0.0
    for name in names:
        x = style if name == "style" else w[name]
        worst = max(worst, N.grad_check(_loss_fn(w, feats, style, target, c, prev, None, name), x))
    assert worst < 1e-6


@pytest.mark.parametrize("mode", MODES)
def test_lora_factor_gradients(mode):
    c = tiny(mode)
    w = perturbed(M.init_weights(c, seed=9))
    frozen, ads = lora.attach(w, c, lora.LoraConfig(rank=2, alpha=4.0), seed=1)
    r = np.random.default_rng(10)
    for ad in ads.values():
        ad.B = r.normal(0, 0.1, ad.B.shape)
    T = 10
    feats, style = inputs(c, T, seed=11)
    target = r.uniform(-1, 1, (T, c.out_dim))
    prev = r.uniform(-1, 1, (T, c.out_dim)) if mode is StyleMode.FACEFORMER else None
    worst = 0.0
    for layer in ads:
        for part in ("A", "B"):
            f = _loss_fn(frozen, feats, style, target, c, prev, ads, f"{layer}.lora_{part}")
            worst = max(worst, N.grad_check(f, getattr(ads[layer], part)))
    assert worst < 1e-5


def test_motion_only_backward_matches_full_for_motion_weights():
    c = tiny(StyleMode.IMITATOR)
    w = perturbed(M.init_weights(c, seed=12))
    feats, style = inputs(c, 5)
    target = np.zeros((5, c.out_dim))
    pred, cache = M.forward(w, feats, style, c)
    _, dpred = loss_and_grad(pred, target)
    full = M.backward(dpred, cache, c)
    part = M.backward(dpred, cache, c, motion_only=True)
    for k in ("motion.out.W", "motion.out.b", "motion.hidden.W", "style"):
        np.testing.assert_allclose(part[k], full[k], rtol=1e-13, atol=1e-15)
    assert "dec.0.self.q.W" not in part
