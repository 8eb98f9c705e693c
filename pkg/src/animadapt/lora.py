"""Low-rank adaptors for the model's linear layers.

An adaptor on a layer with weight ``W`` (N x M, stored input x output) holds
``A`` (N x r) and ``B`` (M x r) and adds ``(alpha / r) * A @ B.T`` to ``W``.
``A`` starts Gaussian (sigma 0.02) and ``B`` starts at zero, so a freshly
attached model reproduces the base model exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .model import ModelConfig, motion_linear_names, transformer_linear_names
from .numerics import ShapeError

INIT_STD = 0.02


class LoraTarget(str, enum.Enum):
    TRANSFORMER_DECODER = "transformer_decoder"
    MOTION_DECODER = "motion_decoder"


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: frozenset = field(
        default_factory=lambda: frozenset({LoraTarget.TRANSFORMER_DECODER, LoraTarget.MOTION_DECODER})
    )

    def __post_init__(self):
        try:
            targets = frozenset(LoraTarget(t) for t in self.targets)
        except ValueError as e:
            raise ValueError(f"unknown LoRA target: {e}") from None
        object.__setattr__(self, "targets", targets)
        if not targets:
            raise ValueError("LoraConfig.targets must be non-empty")
        if self.rank < 1:
            raise ValueError("LoraConfig.rank must be >= 1")

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "targets": sorted(t.value for t in self.targets)}


@dataclass
class LoraAdaptor:
    target_layer: str
    A: np.ndarray
    B: np.ndarray
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.A @ self.B.T)

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size


def target_layers(config: ModelConfig, targets: Iterable) -> list[str]:
    names = []
    for t in sorted(LoraTarget(t).value for t in targets):
        if t == LoraTarget.TRANSFORMER_DECODER.value:
            names += transformer_linear_names(config)
        else:
            names += motion_linear_names(config)
    return names


def freeze(weights: Mapping[str, np.ndarray]) -> dict:
    """Read-only views of every tensor; writes through them raise."""
    frozen = {}
    for name, w in weights.items():
        v = w.view()
        v.flags.writeable = False
        frozen[name] = v
    return frozen


def attach(weights: Mapping[str, np.ndarray], model_config: ModelConfig, config: LoraConfig, seed: int = 0):
    """Create zero-effect adaptors on every targeted layer.

    Returns ``(frozen_weights, adaptors)`` where ``adaptors`` maps layer name
    to :class:`LoraAdaptor`; pass both to the model's forward functions.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    adaptors = {}
    for name in target_layers(model_config, config.targets):
        key = name + ".W"
        if key not in weights:
            raise KeyError(f"LoRA target layer {name!r} not present in weights")
        N, M = weights[key].shape
        if config.rank > min(N, M):
            raise ValueError(f"rank {config.rank} exceeds min(N, M) = {min(N, M)} for {name}")
        adaptors[name] = LoraAdaptor(
            name, rng.normal(0.0, INIT_STD, (N, config.rank)), np.zeros((M, config.rank)),
            config.rank, float(config.alpha),
        )
    return freeze(weights), adaptors


def merge(weights: Mapping[str, np.ndarray], adaptors: Mapping[str, LoraAdaptor]) -> dict:
    """Fold adaptors into plain weights: W <- W + (alpha/r) A B^T."""
    merged = {name: np.array(w) for name, w in weights.items()}
    for name, ad in adaptors.items():
        W = merged[name + ".W"]
        if ad.A.shape != (W.shape[0], ad.rank) or ad.B.shape != (W.shape[1], ad.rank):
            raise ShapeError(
                f"adaptor {name} shapes A{ad.A.shape} B{ad.B.shape} do not fit W{W.shape}"
            )
        merged[name + ".W"] = W + ad.delta()
    return merged


def count_trainable(adaptors: Mapping[str, LoraAdaptor] | Iterable[LoraAdaptor]) -> int:
    items = adaptors.values() if isinstance(adaptors, Mapping) else adaptors
    return int(sum(a.rank * (a.A.shape[0] + a.B.shape[0]) for a in items))


def adaptor_entries(adaptors: Mapping[str, LoraAdaptor]) -> dict[str, np.ndarray]:
    """Flatten adaptors into container entries ``lora/<layer>/A`` and ``lora/<layer>/B``."""
    out = {}
    for name, ad in adaptors.items():
        out[f"lora/{name}/A"] = ad.A
        out[f"lora/{name}/B"] = ad.B
    return out


def adaptors_from_entries(entries: Mapping[str, np.ndarray], alpha: float) -> dict[str, LoraAdaptor]:
    layers = sorted({k.split("/")[1] for k in entries if k.startswith("lora/")})
    out = {}
    for name in layers:
        A = np.array(entries[f"lora/{name}/A"])
        B = np.array(entries[f"lora/{name}/B"])
        out[name] = LoraAdaptor(name, A, B, A.shape[1], float(alpha))
    return out
