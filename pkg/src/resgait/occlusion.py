"""Deterministic synthetic occlusions with ground-truth labels.

Four occlusion families: static horizontal bands (TOP, BOTTOM, MIDDLE) and a
laterally MOVING vertical mask. Occluded pixels are set to background (0).
Magnitude is a fraction of frame height (static kinds) or frame width
(MOVING). Everything is a pure function of its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from enum import Enum

import numpy as np

from .data import SilhouetteSequence

DEFAULT_MAX_MAGNITUDE = 0.6
MIN_MAGNITUDE = 0.1

# Reference clip length used to center a MOVING bar's sweep when sampling.
SWEEP_WINDOW = 8

_SALT_SPEC = 201


class OcclusionKind(Enum):
    NONE = "none"
    TOP = "top"
    BOTTOM = "bottom"
    MIDDLE = "middle"
    MOVING = "moving"


# Stable classification indices; index 0 is reserved for NONE, indices past
# the configured kinds stay unused.
_CLASS_ORDER = [
    OcclusionKind.NONE,
    OcclusionKind.TOP,
    OcclusionKind.BOTTOM,
    OcclusionKind.MIDDLE,
    OcclusionKind.MOVING,
]


def occlusion_class_index(kind: OcclusionKind, class_count: int = 6) -> int:
    """Map a kind to its stable class index (NONE=0, TOP=1, ..., MOVING=4)."""
    if class_count < len(_CLASS_ORDER):
        raise ValueError(f"class_count {class_count} < number of configured kinds {len(_CLASS_ORDER)}")
    try:
        return _CLASS_ORDER.index(kind)
    except ValueError:
        raise ValueError(f"unknown occlusion kind: {kind!r}") from None


def kind_from_class_index(index: int) -> OcclusionKind:
    if not 0 <= index < len(_CLASS_ORDER):
        raise ValueError(f"no occlusion kind for class index {index}")
    return _CLASS_ORDER[index]


@dataclass
class OcclusionSpec:
    """Type, magnitude, and motion parameters of one synthetic occlusion.

    anchor is the start row (MIDDLE) or start column at t=0 (MOVING), in
    pixels; speed is signed px/frame and nonzero only for MOVING.
    """

    kind: OcclusionKind
    magnitude: float
    anchor: int = 0
    speed: float = 0.0
    rng_seed: int = 0
    max_magnitude: float = DEFAULT_MAX_MAGNITUDE

    def validate(self, hw: tuple[int, int]) -> None:
        h, w = hw
        if self.kind == OcclusionKind.NONE:
            if self.magnitude != 0.0:
                raise ValueError("NONE occlusion must have magnitude 0")
            return
        if not 0.0 < self.magnitude <= self.max_magnitude:
            raise ValueError(
                f"magnitude {self.magnitude} outside (0, {self.max_magnitude}] for kind {self.kind.value}"
            )
        if self.kind == OcclusionKind.MIDDLE:
            if self.anchor < 0 or self.anchor + math.ceil(self.magnitude * h) > h:
                raise ValueError(f"MIDDLE band [{self.anchor}, +{self.magnitude:.3f}*H) exceeds frame height {h}")
        if self.kind == OcclusionKind.MOVING:
            width = math.ceil(self.magnitude * w)
            if not 1 <= width <= w:
                raise ValueError(f"MOVING mask width {width} outside [1, {w}]")
            if self.speed == 0.0:
                raise ValueError("MOVING occlusion requires nonzero speed")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OcclusionSpec":
        d = dict(d)
        d["kind"] = OcclusionKind(d["kind"])
        return cls(**d)


@dataclass
class OcclusionLabel:
    """Ground truth for occlusion supervision: class index and level."""

    class_index: int
    level: float


def sample_occlusion_spec(
    rng_seed: int,
    allowed_kinds,
    max_magnitude: float = DEFAULT_MAX_MAGNITUDE,
    hw: tuple[int, int] = (64, 64),
) -> OcclusionSpec:
    """Draw one occlusion spec uniformly over the allowed kinds.

    Magnitude is uniform over the pixel-observable grid inside
    (0.1, max_magnitude]; MOVING speed is uniform over [-3, 3] px/frame
    excluding 0. Deterministic in rng_seed.

    Anchors are uniform over the kind's well-posed range: a MIDDLE band stays
    clear of both frame edges (else it is indistinguishable from TOP/BOTTOM
    and the type label becomes noise), and a MOVING bar is anchored so its
    sweep across the reference clip window stays centered on the subject
    (else fast bars exit after a frame or two, and off-center bars never
    overlap the subject, leaving near-holistic clips labeled as occluded).
    """
    kinds = sorted(set(allowed_kinds), key=_CLASS_ORDER.index)
    if not kinds:
        raise ValueError("allowed_kinds must be non-empty")
    if not 0.0 < max_magnitude <= 1.0:
        raise ValueError(f"max_magnitude must be in (0, 1], got {max_magnitude}")
    h, w = hw
    rng = np.random.default_rng([rng_seed, _SALT_SPEC])
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == OcclusionKind.NONE:
        return OcclusionSpec(OcclusionKind.NONE, 0.0, rng_seed=rng_seed, max_magnitude=max_magnitude)
    # Magnitudes land on the pixel grid of the masked axis: the mask covers a
    # whole number of rows/columns, so an off-grid magnitude differs from the
    # on-grid one only in the label, never in the pixels.
    denom = w if kind == OcclusionKind.MOVING else h
    lo = math.floor(MIN_MAGNITUDE * denom) + 1
    hi = math.floor(max_magnitude * denom)
    if hi < lo:  # frame too small for any on-grid magnitude in range
        magnitude = float(max_magnitude - rng.uniform(0.0, max_magnitude - MIN_MAGNITUDE))
    else:
        magnitude = float(int(rng.integers(lo, hi + 1)) / denom)
    anchor = 0
    speed = 0.0
    if kind == OcclusionKind.MIDDLE:
        band = math.ceil(magnitude * h)
        margin = max(1, min(round(0.2 * h), (h - band) // 2))
        lo, hi = margin, h - band - margin
        if lo > hi:  # band fills the frame; fall back to the full range
            lo, hi = 0, h - band
        anchor = int(rng.integers(lo, hi + 1))
    elif kind == OcclusionKind.MOVING:
        width = math.ceil(magnitude * w)
        sign = -1.0 if rng.integers(2) == 0 else 1.0
        speed = float(sign * (3.0 - rng.uniform(0.0, 3.0)))  # magnitude in (0, 3]
        # center of the bar's sweep over SWEEP_WINDOW frames lands on the
        # frame center (where preprocessing puts the subject), plus jitter
        mid = w / 2.0 - width / 2.0 - speed * (SWEEP_WINDOW - 1) / 2.0
        anchor = int(round(mid)) + int(rng.integers(-3, 4))
    return OcclusionSpec(kind, magnitude, anchor=anchor, speed=speed, rng_seed=rng_seed, max_magnitude=max_magnitude)


def apply_occlusion(seq: SilhouetteSequence, spec: OcclusionSpec) -> tuple[SilhouetteSequence, OcclusionLabel]:
    """Mask a sequence per spec and return it with its ground-truth label.

    Static kinds zero ceil(magnitude*H) rows in every frame; MOVING zeroes a
    ceil(magnitude*W)-wide column band whose position advances by `speed`
    px/frame and may exit the frame. NONE is the identity.
    """
    h, w = seq.frame_shape
    spec.validate((h, w))
    label = OcclusionLabel(class_index=occlusion_class_index(spec.kind), level=spec.magnitude)
    if spec.kind == OcclusionKind.NONE:
        return (
            SilhouetteSequence(seq.frames.copy(), seq.subject_id, seq.sequence_id, occlusion=spec),
            label,
        )

    frames = seq.frames.copy()
    if spec.kind == OcclusionKind.TOP:
        frames[:, : math.ceil(spec.magnitude * h), :] = 0
    elif spec.kind == OcclusionKind.BOTTOM:
        frames[:, h - math.ceil(spec.magnitude * h) :, :] = 0
    elif spec.kind == OcclusionKind.MIDDLE:
        band = math.ceil(spec.magnitude * h)
        frames[:, spec.anchor : spec.anchor + band, :] = 0
    elif spec.kind == OcclusionKind.MOVING:
        width = math.ceil(spec.magnitude * w)
        for t in range(frames.shape[0]):
            start = int(round(spec.anchor + spec.speed * t))
            lo, hi = max(start, 0), min(start + width, w)
            if lo < hi:
                frames[t, :, lo:hi] = 0
    return SilhouetteSequence(frames, seq.subject_id, seq.sequence_id, occlusion=spec), label
