"""Losses, AdamW, base training, subject adaptation strategies and sweeps."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import chunking, data, lora
from . import model as M
from .model import ModelConfig, StyleMode

log = logging.getLogger(__name__)

N_HELD_OUT = 10
MAX_ADAPT_SENTENCES = 30


@dataclass(frozen=True)
class LossConfig:
    lambda_rec: float = 1.0
    lambda_vel: float = 10.0

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_vel < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")


def loss_terms(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(reconstruction MSE, velocity MSE); velocity is 0 for a single frame."""
    if pred.shape != gt.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {gt.shape}")
    d = pred - gt
    rec = float(np.mean(d * d))
    if pred.shape[0] < 2:
        return rec, 0.0
    dv = np.diff(d, axis=0)
    return rec, float(np.mean(dv * dv))


def loss(pred: np.ndarray, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    rec, vel = loss_terms(pred, gt)
    return cfg.lambda_rec * rec + cfg.lambda_vel * vel


def loss_and_grad(pred: np.ndarray, gt: np.ndarray, cfg: LossConfig = LossConfig()):
    if pred.shape != gt.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {gt.shape}")
    T, D = pred.shape
    d = pred - gt
    value = cfg.lambda_rec * float(np.mean(d * d))
    grad = (2.0 * cfg.lambda_rec / d.size) * d
    if T >= 2:
        dv = np.diff(d, axis=0)
        value += cfg.lambda_vel * float(np.mean(dv * dv))
        gv = (2.0 * cfg.lambda_vel / dv.size) * dv
        grad[1:] += gv
        grad[:-1] -= gv
    return value, grad


class AdamW:
    """Adam with decoupled weight decay, updating a dict of arrays in place."""

    def __init__(self, params: Mapping[str, np.ndarray], cfg: OptimizerConfig = OptimizerConfig()):
        self.params = dict(params)
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        cfg = self.cfg
        b1, b2 = cfg.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            p *= 1.0 - cfg.lr * cfg.weight_decay
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# ----------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    resampled: np.ndarray
    target: np.ndarray      # offsets, T x 3V
    subject: int
    index: int


def make_samples(corpus: data.Corpus, sentences: Iterable[data.Sentence]) -> list[Sample]:
    cfg = corpus.config
    return [
        Sample(M.resample_features(s.audio, cfg.feature_rate, cfg.fps), corpus.offsets(s), s.subject, s.index)
        for s in sentences
    ]


def model_config_for(corpus_cfg: data.CorpusConfig, style_mode=StyleMode.IMITATOR, **kw) -> ModelConfig:
    return ModelConfig(
        d_audio=corpus_cfg.d_audio, n_vertices=corpus_cfg.n_vertices, fps=corpus_cfg.fps,
        feature_rate=corpus_cfg.feature_rate, n_styles=corpus_cfg.n_train, style_mode=style_mode, **kw,
    )


def _step_grads(weights, sample: Sample, style, config: ModelConfig, loss_cfg: LossConfig,
                adaptors=None, motion_only=False):
    prev = M.shift_previous(sample.target) if config.style_mode is StyleMode.FACEFORMER else None
    pred, cache = M.forward(weights, sample.resampled, style, config, prev=prev, adaptors=adaptors)
    value, dpred = loss_and_grad(pred, sample.target, loss_cfg)
    return value, M.backward(dpred, cache, config, motion_only=motion_only)


# ----------------------------------------------------------------------------
# base training


@dataclass
class TrainLog:
    epoch_losses: list = field(default_factory=list)
    seconds: float = 0.0


def train_base(
    corpus: data.Corpus,
    config: ModelConfig,
    epochs: int = 200,
    seed: int = 0,
    opt: OptimizerConfig = OptimizerConfig(),
    loss_cfg: LossConfig = LossConfig(),
    subjects: Sequence[int] | None = None,
    sentence_ids: Sequence[int] | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
):
    """Train every weight (style table included) on the train subjects.

    One sentence per step, teacher forcing in FACEFORMER mode, order
    reshuffled each epoch from ``seed``. Returns ``(weights, TrainLog)``.
    """
    subjects = list(corpus.config.train_subjects if subjects is None else subjects)
    if not subjects:
        raise ValueError("train_base needs at least one subject")
    if len(subjects) > config.n_styles:
        raise ValueError("more training subjects than style slots")
    style_slot = {s: k for k, s in enumerate(subjects)}
    ids = range(corpus.config.sentences_per_subject) if sentence_ids is None else sentence_ids
    samples = make_samples(corpus, [corpus.sentences[s][i] for s in subjects for i in ids])
    weights = M.init_weights(config, seed)
    optim = AdamW(weights, opt)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7])))
    tlog = TrainLog()
    t0 = time.perf_counter()
    for epoch in range(epochs):
        total = 0.0
        for j in rng.permutation(len(samples)):
            smp = samples[j]
            slot = style_slot[smp.subject]
            value, grads = _step_grads(weights, smp, weights["style.table"][slot], config, loss_cfg)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, sample {smp.subject}/{smp.index}")
            table_grad = np.zeros_like(weights["style.table"])
            table_grad[slot] = grads.pop("style")[0]
            grads["style.table"] = table_grad
            optim.step(grads)
            total += value
        mean = total / len(samples)
        tlog.epoch_losses.append(mean)
        log.info("epoch %d loss %.6f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    tlog.seconds = time.perf_counter() - t0
    return weights, tlog


# ----------------------------------------------------------------------------
# evaluation


def predict(weights, config: ModelConfig, sample: Sample, style, adaptors=None) -> np.ndarray:
    feats = M.project_audio(sample.resampled, weights)
    return M.decode_sequence(feats, style, weights, config, adaptors)


def evaluate(weights, config: ModelConfig, corpus: data.Corpus, samples: Sequence[Sample], style,
             adaptors=None) -> dict:
    """Vertex metrics over the concatenated frames of ``samples`` (absolute positions)."""
    preds, gts = [], []
    for smp in samples:
        neutral = corpus.neutral[smp.subject].reshape(1, -1)
        preds.append(predict(weights, config, smp, style, adaptors) + neutral)
        gts.append(smp.target + neutral)
    return data.metrics(np.vstack(preds), np.vstack(gts), None, config.lip_vertex_ids)


def best_base_style(weights, config: ModelConfig, corpus: data.Corpus, samples: Sequence[Sample]):
    """Try every training style code; return ``(index, metrics, all_metrics)``.

    The winner minimises lip L2; ties go to the lowest index.
    """
    table = weights["style.table"]
    scores = [evaluate(weights, config, corpus, samples, table[k]) for k in range(table.shape[0])]
    best = min(range(len(scores)), key=lambda k: (scores[k]["l2_lip"], k))
    return best, scores[best], scores


# ----------------------------------------------------------------------------
# adaptation


@dataclass
class AdaptationResult:
    strategy: str
    n_sentences: int
    l2_face: float
    l2_lip: float
    lip_max: float
    seconds: float
    trainable_params: int
    subject: int = -1
    epochs: int = 0
    style_init: int = -1
    co_train_style: bool = False
    extra: dict = field(default_factory=dict)

    ROW_FIELDS = ("strategy", "n_sentences", "l2_face", "l2_lip", "lip_max", "seconds", "trainable_params")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.ROW_FIELDS}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SubjectData:
    """A new subject's adaptation sentences and held-out test sentences."""

    subject: int
    train: list[Sample]
    test: list[Sample]

    @classmethod
    def from_corpus(cls, corpus: data.Corpus, subject: int, sentence_ids: Sequence[int]) -> "SubjectData":
        n_total = corpus.config.sentences_per_subject
        held_out = list(range(n_total - N_HELD_OUT, n_total))
        if not sentence_ids:
            raise ValueError("adaptation needs at least one sentence")
        if len(sentence_ids) > MAX_ADAPT_SENTENCES or set(sentence_ids) & set(held_out):
            raise ValueError("adaptation sentences must come from the first 30, excluding held-out ones")
        sents = corpus.sentences[subject]
        return cls(subject, make_samples(corpus, [sents[i] for i in sentence_ids]),
                   make_samples(corpus, [sents[i] for i in held_out]))


def _fit(weights, config, samples, style_ref: dict, trainable: dict, epochs: int, opt: OptimizerConfig,
         loss_cfg: LossConfig, seed: int, adaptors=None, motion_only=False):
    """Generic adaptation loop; ``style_ref["style"]`` may itself be trainable."""
    optim = AdamW(trainable, opt)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 11])))
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for j in rng.permutation(len(samples)):
            value, grads = _step_grads(weights, samples[j], style_ref["style"], config, loss_cfg,
                                       adaptors, motion_only)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss during adaptation, epoch {epoch}")
            optim.step({k: grads[k] for k in trainable if k in grads})
            total += value
        losses.append(total / len(samples))
    return losses


def _initial_style(weights, config, corpus, subj: SubjectData, style_init):
    if style_init is None:
        style_init, _, _ = best_base_style(weights, config, corpus, subj.train)
    return int(style_init), np.array(weights["style.table"][style_init]).reshape(1, -1)


def adapt_lora(
    weights, config: ModelConfig, corpus: data.Corpus, subj: SubjectData,
    lora_cfg: lora.LoraConfig = lora.LoraConfig(), epochs: int = 50,
    opt: OptimizerConfig = OptimizerConfig(), loss_cfg: LossConfig = LossConfig(),
    seed: int = 0, style_init: int | None = None, co_train_style: bool = False,
):
    """LoRA adaptation with the base frozen.

    The style code starts from the best training style on the adaptation
    sentences (or ``style_init``) and stays fixed unless ``co_train_style``.
    Returns ``(AdaptationResult, adaptors, style)``.
    """
    idx, style = _initial_style(weights, config, corpus, subj, style_init)
    frozen, adaptors = lora.attach(weights, config, lora_cfg, seed)
    trainable = {}
    for name, ad in adaptors.items():
        trainable[name + ".lora_A"] = ad.A
        trainable[name + ".lora_B"] = ad.B
    style_ref = {"style": style}
    if co_train_style:
        trainable["style"] = style
    motion_only = lora_cfg.targets == {lora.LoraTarget.MOTION_DECODER} and (
        not co_train_style or config.style_mode is StyleMode.IMITATOR
    )
    t0 = time.perf_counter()
    losses = _fit(frozen, config, subj.train, style_ref, trainable, epochs, opt, loss_cfg, seed,
                  adaptors, motion_only)
    seconds = time.perf_counter() - t0
    m = evaluate(frozen, config, corpus, subj.test, style, adaptors)
    n_params = lora.count_trainable(adaptors) + (config.d_model if co_train_style else 0)
    res = AdaptationResult(
        "lora", len(subj.train), m["l2_face"], m["l2_lip"], m["lip_max"], seconds, n_params,
        subj.subject, epochs, idx, co_train_style,
        {"rank": lora_cfg.rank, "alpha": lora_cfg.alpha, "targets": lora_cfg.to_dict()["targets"],
         "final_loss": losses[-1] if losses else None},
    )
    return res, adaptors, style


def adapt_imitator_style(
    weights, config: ModelConfig, corpus: data.Corpus, subj: SubjectData, epochs: int = 300,
    opt: OptimizerConfig = OptimizerConfig(), loss_cfg: LossConfig = LossConfig(),
    seed: int = 0, style_init: int | None = None,
):
    """Two stages of ``epochs`` each: the style code, then the final motion layer.

    Returns ``(AdaptationResult, tuned)`` where ``tuned`` holds the updated
    ``style``, ``motion.out.W`` and ``motion.out.b``.
    """
    idx, style = _initial_style(weights, config, corpus, subj, style_init)
    tuned_w = dict(weights)
    tuned_w["motion.out.W"] = np.array(weights["motion.out.W"])
    tuned_w["motion.out.b"] = np.array(weights["motion.out.b"])
    style_ref = {"style": style}
    imitator = config.style_mode is StyleMode.IMITATOR
    t0 = time.perf_counter()
    _fit(tuned_w, config, subj.train, style_ref, {"style": style}, epochs, opt, loss_cfg, seed,
         motion_only=imitator)
    _fit(tuned_w, config, subj.train, style_ref,
         {"motion.out.W": tuned_w["motion.out.W"], "motion.out.b": tuned_w["motion.out.b"]},
         epochs, opt, loss_cfg, seed + 1, motion_only=True)
    seconds = time.perf_counter() - t0
    m = evaluate(tuned_w, config, corpus, subj.test, style)
    n_params = config.d_model + tuned_w["motion.out.W"].size + tuned_w["motion.out.b"].size
    res = AdaptationResult("imitator-style", len(subj.train), m["l2_face"], m["l2_lip"], m["lip_max"],
                           seconds, n_params, subj.subject, epochs, idx)
    tuned = {"style": style, "motion.out.W": tuned_w["motion.out.W"], "motion.out.b": tuned_w["motion.out.b"]}
    return res, tuned


def adapt_style_only(
    weights, config: ModelConfig, corpus: data.Corpus, subj: SubjectData, epochs: int = 300,
    opt: OptimizerConfig = OptimizerConfig(), loss_cfg: LossConfig = LossConfig(),
    seed: int = 0, style_init: int | None = None,
):
    """Optimise only the d_model-wide style vector. Returns ``(AdaptationResult, {"style": ...})``."""
    idx, style = _initial_style(weights, config, corpus, subj, style_init)
    style_ref = {"style": style}
    t0 = time.perf_counter()
    _fit(weights, config, subj.train, style_ref, {"style": style}, epochs, opt, loss_cfg, seed,
         motion_only=config.style_mode is StyleMode.IMITATOR)
    seconds = time.perf_counter() - t0
    m = evaluate(weights, config, corpus, subj.test, style)
    res = AdaptationResult("style-only", len(subj.train), m["l2_face"], m["l2_lip"], m["lip_max"],
                           seconds, config.d_model, subj.subject, epochs, idx)
    return res, {"style": style}


def base_result(weights, config: ModelConfig, corpus: data.Corpus, subj: SubjectData) -> AdaptationResult:
    """The no-adaptation baseline: best training style chosen on the held-out sentences."""
    t0 = time.perf_counter()
    idx, m, _ = best_base_style(weights, config, corpus, subj.test)
    return AdaptationResult("base", 0, m["l2_face"], m["l2_lip"], m["lip_max"],
                            time.perf_counter() - t0, 0, subj.subject, 0, idx)


# ----------------------------------------------------------------------------
# sweeps

RANKS = (1, 2, 4, 8, 16, 32)


def sweep_rank(
    weights, config: ModelConfig, corpus: data.Corpus, ranks: Sequence[int] = RANKS, trials: int = 30,
    seed: int = 0, epochs: int = 50, alpha: float = 8.0, targets=None,
):
    """Random-subset rank sweep. Returns ``(rank -> mean lip L2, per-trial records)``.

    Each trial draws a test subject, a sentence count n in [1, 30] and n of
    that subject's first 30 sentences; every rank adapts on that same subset.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 13])))
    lora_targets = targets or lora.LoraConfig().targets
    records = []
    n_pool = min(MAX_ADAPT_SENTENCES, corpus.config.sentences_per_subject - N_HELD_OUT)
    for trial in range(trials):
        subject = int(rng.choice(corpus.config.test_subjects))
        n = int(rng.integers(1, n_pool + 1))
        ids = sorted(int(i) for i in rng.choice(n_pool, size=n, replace=False))
        subj = SubjectData.from_corpus(corpus, subject, ids)
        style_idx, _, _ = best_base_style(weights, config, corpus, subj.train)
        for r in ranks:
            res, _, _ = adapt_lora(weights, config, corpus, subj, lora.LoraConfig(r, alpha, lora_targets),
                                   epochs=epochs, seed=seed + trial, style_init=style_idx)
            records.append({"trial": trial, "subject": subject, "n_sentences": n, "sentence_ids": ids,
                            "rank": r, "l2_lip": res.l2_lip, "l2_face": res.l2_face,
                            "seconds": res.seconds})
            log.info("trial %d n=%d rank %d lip %.5f", trial, n, r, res.l2_lip)
    table = {r: float(np.mean([x["l2_lip"] for x in records if x["rank"] == r])) for r in ranks}
    return table, records


@dataclass
class LongSentence:
    sentence: data.Sentence
    neutral: np.ndarray
    resampled: np.ndarray


def long_test_sentences(corpus: data.Corpus, subjects: Sequence[int] | None = None,
                        gap_seconds: float = 1.0) -> list[LongSentence]:
    cfg = corpus.config
    subjects = cfg.test_subjects if subjects is None else subjects
    n = cfg.sentences_per_subject
    out = []
    for s in subjects:
        sent = data.concat_sentences(corpus.sentences[s][n - N_HELD_OUT:], corpus.neutral[s],
                                     gap_seconds, cfg.fps, cfg.feature_rate)
        res = M.resample_features(sent.audio, cfg.feature_rate, cfg.fps)
        assert res.shape[0] == sent.n_frames
        out.append(LongSentence(sent, corpus.neutral[s], res))
    return out


BOUNDARY_FRAMES = 5


def boundary_discrepancy(chunked: np.ndarray, full: np.ndarray, K: int, P: int,
                         n_frames: int = BOUNDARY_FRAMES, lip_ids=None) -> list[float]:
    """Per-frame distance between chunked and full outputs over the first frames
    of every keep region after a cut (chunks starting past frame 0)."""
    plan = chunking.plan_chunks(full.shape[0], K, P)
    dist = data._distances(chunked, full)
    if lip_ids is not None:
        dist = dist[:, list(lip_ids)]
    vals = []
    for c in plan.chunks[1:]:
        ks, ke = c.keep
        vals.extend(dist[ks : min(ke, ks + n_frames)].mean(axis=1).tolist())
    return vals


def sweep_chunking(
    weights, config: ModelConfig, longs: Sequence[LongSentence], style,
    Ks: Sequence[int | None], Ps: Sequence[int], adaptors=None, return_preds: bool = False,
):
    """Chunk-size / padding sweep over long sentences.

    ``style`` is one style vector or a list with one per long sentence.
    ``K=None`` is the unchunked baseline. Each row carries masked metrics,
    wall time, closed-form and instrumented attention counts, and the
    boundary discrepancy against the unchunked output. With ``return_preds``
    also returns ``{(K, P): [offsets per long sentence]}``.
    """
    styles = list(style) if isinstance(style, (list, tuple)) else [style] * len(longs)
    full_preds, full_secs = [], []
    for ls, st in zip(longs, styles):
        t0 = time.perf_counter()
        full_preds.append(M.decode_sequence(M.project_audio(ls.resampled, weights), st, weights, config, adaptors))
        full_secs.append(time.perf_counter() - t0)
    rows, all_preds = [], {}
    for K in Ks:
        for P in (Ps if K is not None else [0]):
            preds, gts, masks, boundary, kept = [], [], [], [], []
            counted, full_ops, chunk_ops = 0, 0, 0
            seconds = 0.0
            for ls, st, fp, fs in zip(longs, styles, full_preds, full_secs):
                T = ls.sentence.n_frames
                if K is None:
                    pred, secs = fp, fs
                    f_ops = c_ops = n_cnt = T * (T + 1) // 2
                else:
                    counter = M.AttentionCounter()
                    t0 = time.perf_counter()
                    pred = chunking.chunked_infer(weights, ls.resampled, st, K, P, config, adaptors, counter)
                    secs = time.perf_counter() - t0
                    f_ops, c_ops = chunking.attention_ops(T, K, P)
                    n_cnt = counter.per_layer_head()
                    boundary += boundary_discrepancy(pred, fp, K, P)
                seconds += secs
                counted += n_cnt
                full_ops += f_ops
                chunk_ops += c_ops
                kept.append(pred)
                preds.append(pred + ls.neutral.reshape(1, -1))
                gts.append(ls.sentence.vertices.reshape(T, -1))
                masks.append(ls.sentence.silence_mask)
            m = data.metrics(np.vstack(preds), np.vstack(gts), np.concatenate(masks), config.lip_vertex_ids)
            rows.append({
                "K": K if K is not None else -1, "P": P, **m, "seconds": seconds,
                "attn_full": full_ops, "attn_chunked": chunk_ops, "attn_counted": counted,
                "boundary_discrepancy": float(np.mean(boundary)) if boundary else 0.0,
            })
            all_preds[(rows[-1]["K"], P)] = kept
            log.info("chunk K=%s P=%s l2 %.5f lip %.5f %.3fs", K, P, m["l2_face"], m["l2_lip"], seconds)
    return (rows, all_preds) if return_preds else rows
