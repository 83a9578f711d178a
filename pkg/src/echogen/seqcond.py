"""Variable-length sequence handling: padding vectors, masked conditioning,
loss masks, and the per-video loss normalizer.

Videos live in fixed-capacity tensors of F frames. A binary padding vector p
marks invalid tail positions (p=1); the loss mask lm = 1 - p excludes them
from every objective. All functions here are pure numpy over immutable inputs;
randomness comes from an explicitly passed generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PaddedVideo",
    "ConditioningSet",
    "LossMask",
    "temporal_normalize",
    "build_masked_conditioning",
    "alpha",
    "interleave_for_upsampling",
]


@dataclass(frozen=True)
class PaddedVideo:
    """Fixed-capacity video: frames (F,C,H,W) plus padding vector p (F,).

    p[i] = 0 marks a valid frame, 1 a zero-padded one. Padded frames are
    all-zero on construction.
    """

    frames: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        p = np.asarray(self.p, dtype=np.int64)
        if frames.ndim != 4:
            raise ValueError(f"frames must be (F,C,H,W), got shape {frames.shape}")
        if p.shape != (frames.shape[0],):
            raise ValueError(f"p length {p.shape} does not match F={frames.shape[0]}")
        if not np.isin(p, (0, 1)).all():
            raise ValueError("p entries must be 0 or 1")
        fv = int(frames.shape[0] - p.sum())
        if not 1 <= fv <= frames.shape[0]:
            raise ValueError("need at least one valid frame")
        if np.any(frames[p == 1]):
            raise ValueError("padded frames must be all-zero on construction")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "p", p)

    @property
    def F(self) -> int:
        return self.frames.shape[0]

    @property
    def f_valid(self) -> int:
        return int(self.F - self.p.sum())


@dataclass(frozen=True)
class ConditioningSet:
    """Conditioning triple: masked video x_m, scalar EF phi, padding vector p.

    phi may be None to request the learned null embedding (unconditional pass
    of classifier-free guidance).
    """

    x_m: np.ndarray
    phi: float | None
    p: np.ndarray

    def __post_init__(self):
        x_m = np.asarray(self.x_m, dtype=np.float64)
        p = np.asarray(self.p, dtype=np.int64)
        if x_m.ndim != 4 or p.shape != (x_m.shape[0],):
            raise ValueError("x_m must be (F,C,H,W) with matching p")
        if self.phi is not None and not 0.0 <= float(self.phi) <= 1.0:
            raise ValueError(f"phi must lie in [0,1], got {self.phi}")
        if np.any(x_m[p == 1]):
            raise ValueError("frames padded per p must be all-zero in x_m")
        object.__setattr__(self, "x_m", x_m)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "phi", None if self.phi is None else float(self.phi))


@dataclass(frozen=True)
class LossMask:
    """Per-frame validity mask lm = 1 - p with a broadcastable view M."""

    lm: np.ndarray
    M: np.ndarray = field(init=False)

    def __post_init__(self):
        lm = np.asarray(self.lm, dtype=np.float64)
        if lm.ndim != 1 or not np.isin(lm, (0.0, 1.0)).all():
            raise ValueError("lm must be a binary vector")
        object.__setattr__(self, "lm", lm)
        object.__setattr__(self, "M", lm.reshape(-1, 1, 1, 1))

    @classmethod
    def from_p(cls, p: np.ndarray) -> "LossMask":
        return cls(1.0 - np.asarray(p, dtype=np.float64))


def temporal_normalize(raw_frames: np.ndarray, F: int) -> PaddedVideo:
    """Fit an f-frame sequence into capacity F.

    Longer sequences are uniformly downsampled with index rule
    round(i*(f-1)/(F-1)), which always keeps the first and last frames;
    shorter ones occupy positions 0..f-1 with a zero tail marked in p.
    """
    raw = np.asarray(raw_frames, dtype=np.float64)
    if raw.ndim != 4 or raw.shape[0] < 1:
        raise ValueError("raw_frames must be a nonempty (f,C,H,W) array")
    if F < 1:
        raise ValueError("capacity F must be >= 1")
    f = raw.shape[0]
    if f > F:
        if F == 1:
            idx = np.array([0])
        else:
            idx = np.round(np.arange(F) * (f - 1) / (F - 1)).astype(int)
        frames = raw[idx]
        p = np.zeros(F, dtype=np.int64)
    else:
        frames = np.zeros((F,) + raw.shape[1:], dtype=np.float64)
        frames[:f] = raw
        p = np.concatenate([np.zeros(f, dtype=np.int64), np.ones(F - f, dtype=np.int64)])
    return PaddedVideo(frames, p)


def build_masked_conditioning(
    x: PaddedVideo, pmf: float, rng: np.random.Generator
) -> np.ndarray:
    """Zero ceil(pmf * f_valid) valid frames of x, never all of them.

    Returns the masked video part of a ConditioningSet. pmf=1.0 is the
    hardest setting: a single uniformly chosen observed frame survives.
    pmf=0 leaves x untouched (reconstruction conditioning).
    """
    if not 0.0 <= pmf <= 1.0:
        raise ValueError(f"pmf must lie in [0,1], got {pmf}")
    valid_idx = np.flatnonzero(x.p == 0)
    n_valid = len(valid_idx)
    n_mask = min(math.ceil(pmf * n_valid), n_valid - 1)
    x_m = x.frames.copy()
    if n_mask > 0:
        masked = rng.choice(valid_idx, size=n_mask, replace=False)
        x_m[masked] = 0.0
    return x_m


def alpha(lm: LossMask, C: int, H: int, W: int) -> float:
    """Per-video loss normalizer 1 / ((sum lm) * C * H * W).

    Makes each video contribute equally to the loss regardless of how many
    frames are valid.
    """
    n = float(lm.lm.sum())
    if n < 1:
        raise ValueError("all-padded video: loss mask selects no frames")
    return 1.0 / (n * C * H * W)


def interleave_for_upsampling(
    x: PaddedVideo, factor: int, F: int
) -> tuple[np.ndarray, np.ndarray]:
    """Spread observed frames at stride `factor`, leaving gaps to synthesize.

    The gap slots are valid in p (the model must fill them) but zero in the
    returned conditioning video. Returns (x_m, p) at capacity F.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    fv = x.f_valid
    span = fv * factor - (factor - 1)
    if span > F:
        raise ValueError(f"capacity exceeded: need {span} slots, have {F}")
    shape = (F,) + x.frames.shape[1:]
    x_m = np.zeros(shape, dtype=np.float64)
    p = np.ones(F, dtype=np.int64)
    observed = np.flatnonzero(x.p == 0)
    for k, src in enumerate(observed):
        x_m[k * factor] = x.frames[src]
    p[:span] = 0
    return x_m, p
