"""Seeded synthetic speech/vertex corpus and the vertex-error metrics.

Every random draw comes from numpy's PCG64 generator seeded through
``SeedSequence([master_seed, *stream_key])``. Stream keys:

* ``(0,)``                teacher backbone and shared style basis
* ``(1, subject)``        subject style factor ``U_s``
* ``(3, subject)``        subject neutral pose
* ``(2, subject, index)`` sentence length and audio

so any sentence can be regenerated on its own, and corpora agree across
machines given the same numpy bit generator.

Vertices come from a fixed "teacher": a causal temporal convolution (width 9)
and a 2-layer tanh MLP over the resampled audio. Each subject adds a rank-2
perturbation ``0.1 * [h, 1] @ V @ U_s.T`` to the teacher output, with the
input-side factor ``V`` shared across subjects (its last row acts as the
per-subject bias), so the motion difference between any two subjects has rank
at most 2.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .model import resample_features

CONV_WIDTH = 9
STYLE_RANK = 2
STYLE_SCALE = 0.1
VERTEX_BOUND = 100.0


def rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 8
    n_val: int = 2
    n_test: int = 2
    sentences_per_subject: int = 40
    fps: int = 25
    feature_rate: int = 50
    d_audio: int = 16
    n_vertices: int = 120
    min_frames: int = 75
    max_frames: int = 150
    seed: int = 0
    conv_channels: int = 32
    teacher_hidden: int = 64

    def __post_init__(self):
        for name in ("n_train", "sentences_per_subject", "fps", "feature_rate", "d_audio",
                     "n_vertices", "min_frames", "conv_channels", "teacher_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"CorpusConfig.{name} must be >= 1")
        if self.n_val < 0 or self.n_test < 0:
            raise ValueError("CorpusConfig.n_val and n_test must be >= 0")
        if self.max_frames < self.min_frames:
            raise ValueError("CorpusConfig.max_frames must be >= min_frames")

    @property
    def n_subjects(self) -> int:
        return self.n_train + self.n_val + self.n_test

    @property
    def train_subjects(self) -> list[int]:
        return list(range(self.n_train))

    @property
    def val_subjects(self) -> list[int]:
        return list(range(self.n_train, self.n_train + self.n_val))

    @property
    def test_subjects(self) -> list[int]:
        return list(range(self.n_train + self.n_val, self.n_subjects))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "CorpusConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown CorpusConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sentence:
    subject: int
    index: int
    audio: np.ndarray          # frames_in x d_audio at feature_rate
    vertices: np.ndarray       # T x n_vertices x 3, absolute positions
    silence_mask: np.ndarray   # T booleans, True on silent frames

    @property
    def n_frames(self) -> int:
        return self.vertices.shape[0]


@dataclass
class Teacher:
    conv_w: np.ndarray     # CONV_WIDTH x d_audio x C
    conv_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    style_in: np.ndarray   # (hidden + 1) x STYLE_RANK, shared
    style_out: np.ndarray  # n_subjects x 3V x STYLE_RANK

    def hidden(self, resampled: np.ndarray) -> np.ndarray:
        T = resampled.shape[0]
        k = self.conv_w.shape[0]
        padded = np.vstack([np.zeros((k - 1, resampled.shape[1])), resampled])
        acc = np.zeros((T, self.conv_w.shape[2])) + self.conv_b
        for j in range(k):
            # tap j looks j frames into the past
            acc += padded[k - 1 - j : k - 1 - j + T] @ self.conv_w[j]
        return np.tanh(np.tanh(acc) @ self.w1 + self.b1)

    def backbone(self, resampled: np.ndarray) -> np.ndarray:
        return self.hidden(resampled) @ self.w2 + self.b2

    def style_offset(self, resampled: np.ndarray, subject: int) -> np.ndarray:
        h = self.hidden(resampled)
        h1 = np.hstack([h, np.ones((h.shape[0], 1))])
        return STYLE_SCALE * (h1 @ self.style_in) @ self.style_out[subject].T

    def offsets(self, resampled: np.ndarray, subject: int) -> np.ndarray:
        """Vertex offsets from neutral, T x 3V."""
        return self.backbone(resampled) + self.style_offset(resampled, subject)


@dataclass
class Corpus:
    config: CorpusConfig
    neutral: np.ndarray                  # n_subjects x n_vertices x 3
    sentences: list[list[Sentence]]      # [subject][index]
    teacher: Teacher | None = field(default=None, repr=False)

    def subject(self, s: int) -> list[Sentence]:
        return self.sentences[s]

    def offsets(self, sentence: Sentence) -> np.ndarray:
        """Ground-truth offsets from the subject's neutral pose, flattened to T x 3V."""
        return (sentence.vertices - self.neutral[sentence.subject]).reshape(sentence.n_frames, -1)


def make_teacher(config: CorpusConfig) -> Teacher:
    rng = rng_for(config.seed, 0)
    C, H, out = config.conv_channels, config.teacher_hidden, 3 * config.n_vertices
    conv_w = rng.normal(0.0, 1.0 / np.sqrt(CONV_WIDTH * config.d_audio), (CONV_WIDTH, config.d_audio, C))
    conv_b = rng.normal(0.0, 0.1, (1, C))
    w1 = rng.normal(0.0, 1.0 / np.sqrt(C), (C, H))
    b1 = rng.normal(0.0, 0.1, (1, H))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(H), (H, out))
    b2 = np.zeros((1, out))
    style_in = rng.normal(0.0, 1.0 / np.sqrt(H + 1), (H + 1, STYLE_RANK))
    style_out = np.stack(
        [rng_for(config.seed, 1, s).normal(0.0, 1.0, (out, STYLE_RANK)) for s in range(config.n_subjects)]
    )
    return Teacher(conv_w, conv_b, w1, b1, w2, b2, style_in, style_out)


def synth_audio(rng: np.random.Generator, n_frames: int, config: CorpusConfig) -> np.ndarray:
    """Per channel: three sinusoids (0.5-8 Hz, random phase) plus smoothed noise."""
    t = np.arange(n_frames)[:, None] / config.feature_rate
    freqs = rng.uniform(0.5, 8.0, (3, config.d_audio))
    phases = rng.uniform(0.0, 2.0 * np.pi, (3, config.d_audio))
    tones = sum(np.sin(2.0 * np.pi * freqs[j] * t + phases[j]) for j in range(3)) / np.sqrt(3.0)
    noise = rng.normal(0.0, 0.3, (n_frames, config.d_audio))
    kernel = np.ones(5) / 5.0
    smooth = np.stack([np.convolve(noise[:, c], kernel, mode="same") for c in range(config.d_audio)], axis=1)
    return tones + smooth


def _neutral(config: CorpusConfig, s: int) -> np.ndarray:
    return rng_for(config.seed, 3, s).normal(0.0, 10.0, (config.n_vertices, 3))


def make_sentence(config: CorpusConfig, teacher: Teacher, neutral: np.ndarray, s: int, i: int) -> Sentence:
    rng = rng_for(config.seed, 2, s, i)
    T = int(rng.integers(config.min_frames, config.max_frames + 1))
    frames_in = int(round(T * config.feature_rate / config.fps))
    audio = synth_audio(rng, frames_in, config)
    resampled = resample_features(audio, config.feature_rate, config.fps)
    offsets = teacher.offsets(resampled, s)
    vertices = neutral + offsets.reshape(resampled.shape[0], config.n_vertices, 3)
    if not np.all(np.abs(vertices) <= VERTEX_BOUND):
        raise AssertionError("synthetic vertices exceed VERTEX_BOUND")
    return Sentence(s, i, audio, vertices, np.zeros(vertices.shape[0], dtype=bool))


def generate_corpus(config: CorpusConfig = CorpusConfig()) -> Corpus:
    teacher = make_teacher(config)
    neutral = np.stack([_neutral(config, s) for s in range(config.n_subjects)])
    sentences = [
        [make_sentence(config, teacher, neutral[s], s, i) for i in range(config.sentences_per_subject)]
        for s in range(config.n_subjects)
    ]
    return Corpus(config, neutral, sentences, teacher)


def concat_sentences(
    sentences: Sequence[Sentence],
    neutral: np.ndarray,
    gap_seconds: float = 1.0,
    fps: int = 25,
    feature_rate: int = 50,
) -> Sentence:
    """Join one subject's sentences with silent gaps (zero audio, neutral pose)."""
    if not sentences:
        raise ValueError("concat_sentences needs at least one sentence")
    subjects = {s.subject for s in sentences}
    if len(subjects) > 1:
        raise ValueError(f"concat_sentences got mixed subjects {sorted(subjects)}")
    gap_in = int(round(gap_seconds * feature_rate))
    gap_out = int(round(gap_seconds * fps))
    d_audio = sentences[0].audio.shape[1]
    audio, verts, mask = [], [], []
    for k, s in enumerate(sentences):
        if k:
            audio.append(np.zeros((gap_in, d_audio)))
            verts.append(np.broadcast_to(neutral, (gap_out,) + neutral.shape))
            mask.append(np.ones(gap_out, dtype=bool))
        audio.append(s.audio)
        verts.append(s.vertices)
        mask.append(s.silence_mask)
    return Sentence(sentences[0].subject, -1, np.vstack(audio), np.concatenate(verts), np.concatenate(mask))


# ----------------------------------------------------------------------------
# metrics


def _distances(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"metric shape mismatch: {pred.shape} vs {gt.shape}")
    T = pred.shape[0]
    diff = (pred - gt).reshape(T, -1, 3)
    return np.sqrt((diff * diff).sum(axis=-1))


def _keep(mask, T: int) -> np.ndarray:
    if mask is None:
        return np.ones(T, dtype=bool)
    keep = ~np.asarray(mask, dtype=bool)
    if keep.shape != (T,):
        raise ValueError(f"mask length {keep.shape} != T={T}")
    if not keep.any():
        raise ValueError("every frame is masked; metric undefined")
    return keep


def l2_face(pred, gt, mask=None) -> float:
    d = _distances(pred, gt)
    return float(d[_keep(mask, d.shape[0])].mean())


def l2_lip(pred, gt, mask=None, lip_ids=tuple(range(24))) -> float:
    d = _distances(pred, gt)
    return float(d[_keep(mask, d.shape[0])][:, list(lip_ids)].mean())


def lip_max(pred, gt, mask=None, lip_ids=tuple(range(24))) -> float:
    d = _distances(pred, gt)
    return float(d[_keep(mask, d.shape[0])][:, list(lip_ids)].max(axis=1).mean())


def metrics(pred, gt, mask=None, lip_ids=tuple(range(24))) -> dict:
    return {
        "l2_face": l2_face(pred, gt, mask),
        "l2_lip": l2_lip(pred, gt, mask, lip_ids),
        "lip_max": lip_max(pred, gt, mask, lip_ids),
    }


# ----------------------------------------------------------------------------
# persistence


def _sentence_file(s: int, i: int) -> str:
    return f"s{s:02d}_{i:03d}.bin"


def save_sentence(path, sentence: Sentence, neutral: np.ndarray | None = None) -> str:
    entries = {"audio": sentence.audio, "vertices": sentence.vertices,
               "silence_mask": sentence.silence_mask.astype(np.float64)}
    if neutral is not None:
        entries["neutral"] = neutral
    return container.save(path, entries, meta={"subject": sentence.subject, "index": sentence.index})


def load_sentence(path) -> tuple[Sentence, np.ndarray | None]:
    """Returns the sentence and, when stored, its subject's neutral pose."""
    c = container.load(path)
    sent = Sentence(int(c.meta["subject"]), int(c.meta["index"]), c.entries["audio"],
                    c.entries["vertices"], c.entries["silence_mask"] > 0.5)
    return sent, c.entries.get("neutral")


def save_corpus(corpus: Corpus, out_dir) -> dict:
    """Write manifest.json, neutral.bin and one container per sentence."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = corpus.config
    files = {"neutral.bin": container.save(out / "neutral.bin", {"neutral": corpus.neutral})}
    for subj in corpus.sentences:
        for s in subj:
            name = _sentence_file(s.subject, s.index)
            files[name] = save_sentence(out / name, s, corpus.neutral[s.subject])
    manifest = {
        "format": "animadapt-corpus/1",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "rng": "numpy PCG64, SeedSequence([seed, *stream_key])",
        "splits": {"train": cfg.train_subjects, "val": cfg.val_subjects, "test": cfg.test_subjects},
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(in_dir) -> Corpus:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = CorpusConfig.from_dict(manifest["config"])
    neutral = container.load(d / "neutral.bin").entries["neutral"]
    sentences = [
        [load_sentence(d / _sentence_file(s, i))[0] for i in range(cfg.sentences_per_subject)]
        for s in range(cfg.n_subjects)
    ]
    # the teacher is cheap to rebuild and never stored
    return Corpus(cfg, neutral, sentences, make_teacher(cfg))
