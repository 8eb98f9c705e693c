"""Fixed-context inference over overlapping padded chunks.

A length-T sequence is cut into ceil(T/K) keep regions of K frames. Each chunk
additionally sees up to P frames of padding on either side (truncated at the
sequence ends), is inferred on its own, and contributes only its keep region
to the output.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import AttentionCounter, ModelConfig, decode_sequence, project_audio


@dataclass(frozen=True)
class Chunk:
    cover: tuple[int, int]
    keep: tuple[int, int]

    @property
    def cover_len(self) -> int:
        return self.cover[1] - self.cover[0]


@dataclass(frozen=True)
class ChunkPlan:
    T: int
    K: int
    P: int
    chunks: tuple[Chunk, ...]

    def validate(self) -> None:
        expect = 0
        for c in self.chunks:
            (cs, ce), (ks, ke) = c.cover, c.keep
            assert ks == expect and ke > ks, f"keep regions do not tile [0, T): {c}"
            assert 0 <= cs <= ks and ke <= ce <= self.T, f"keep not inside cover: {c}"
            assert ke - ks <= self.K and ce - cs <= self.K + 2 * self.P, f"chunk too large: {c}"
            assert ks - cs == min(self.P, ks), f"left pad wrong: {c}"
            assert ce - ke == min(self.P, self.T - ke), f"right pad wrong: {c}"
            expect = ke
        assert expect == self.T, "keep regions do not reach T"


def plan_chunks(T: int, K: int, P: int) -> ChunkPlan:
    if K <= 0:
        raise ValueError(f"chunk size K must be positive, got {K}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if P < 0:
        raise ValueError(f"padding P must be >= 0, got {P}")
    chunks = []
    for i in range(math.ceil(T / K)):
        ks, ke = i * K, min((i + 1) * K, T)
        chunks.append(Chunk((max(0, ks - P), min(T, ke + P)), (ks, ke)))
    return ChunkPlan(T, K, P, tuple(chunks))


def attention_ops(T: int, K: int, P: int) -> tuple[int, int]:
    """Causal self-attention score counts per layer per head: (full, chunked)."""
    plan = plan_chunks(T, K, P)
    full = T * (T + 1) // 2
    chunked = sum(c.cover_len * (c.cover_len + 1) // 2 for c in plan.chunks)
    return full, chunked


def seconds_to_frames(seconds: float, fps: int) -> int:
    return int(round(seconds * fps))


def chunked_infer(
    weights: Mapping[str, np.ndarray],
    resampled: np.ndarray,
    style,
    K: int,
    P: int,
    config: ModelConfig,
    adaptors=None,
    counter: AttentionCounter | None = None,
    workers: int = 1,
    order: Sequence[int] | None = None,
) -> np.ndarray:
    """Infer vertex offsets chunk by chunk.

    ``resampled`` is the T x d_audio feature track at the animation frame rate;
    each chunk projects only its covered slice. ``order`` permutes the chunk
    evaluation order and ``workers > 1`` evaluates chunks on a thread pool;
    neither changes the result.
    """
    T = resampled.shape[0]
    plan = plan_chunks(T, K, P)
    plan.validate()
    out = np.empty((T, config.out_dim))
    idx = list(range(len(plan.chunks))) if order is None else list(order)
    if sorted(idx) != list(range(len(plan.chunks))):
        raise ValueError("order must be a permutation of the chunk indices")

    def run(i: int):
        c = plan.chunks[i]
        cs, ce = c.cover
        local = AttentionCounter() if counter is not None else None
        feats = project_audio(resampled[cs:ce], weights)
        pred = decode_sequence(feats, style, weights, config, adaptors, local)
        return i, pred, local

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, idx))
    else:
        results = [run(i) for i in idx]
    for i, pred, local in results:
        c = plan.chunks[i]
        (cs, _), (ks, ke) = c.cover, c.keep
        out[ks:ke] = pred[ks - cs : ke - cs]
        if local is not None:
            for key, n in local.counts.items():
                counter.counts[key] += n
    return out
