"""Silhouette dataset generation, loading, preprocessing, and frame sampling.

Datasets live on disk as ``<root>/<subject_id>/<sequence_id>/frame_0000.png``
with a ``manifest.json`` at the root. Frames are single-channel 8-bit PNGs
holding binary silhouettes (0 = background, 255 = foreground); in memory a
sequence is a ``(n, H, W)`` uint8 array with values in {0, 1}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from PIL import Image

if TYPE_CHECKING:
    from .occlusion import OcclusionSpec

FRAME_HEIGHT = 64
FRAME_WIDTH = 64

# Salt constants keep the derived RNG streams (identity parameters, per-sequence
# jitter) independent of each other for the same dataset seed.
_SALT_IDENTITY = 101
_SALT_PARAMS = 102
_SALT_SEQUENCE = 103

_RENDER_SIZE = 96
_BODY_HEIGHT = 76.0

MANIFEST_NAME = "manifest.json"
FRAME_PATTERN = "frame_{:04d}.png"


@dataclass
class SilhouetteSequence:
    """Ordered binary silhouette frames with identity labels.

    ``frames`` is a ``(n, H, W)`` uint8 array with values in {0, 1}.
    ``occlusion`` carries the ground-truth spec when a synthetic occlusion
    was applied.
    """

    frames: np.ndarray
    subject_id: str
    sequence_id: str
    occlusion: "OcclusionSpec | None" = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be a non-empty (n, H, W) array, got shape {self.frames.shape}")
        if self.frames.max(initial=0) > 1:
            raise ValueError("frames must be binary with values in {0, 1}")
        if not self.subject_id or not self.sequence_id:
            raise ValueError("subject_id and sequence_id must be non-empty")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class ManifestEntry:
    subject_id: str
    sequence_id: str
    frame_count: int
    path: str  # relative to the dataset root


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    seed: int
    height: int = FRAME_HEIGHT
    width: int = FRAME_WIDTH
    params: dict = field(default_factory=dict)

    def subjects(self) -> dict[str, list[ManifestEntry]]:
        """Entries grouped by subject, sequence order as listed."""
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            out.setdefault(e.subject_id, []).append(e)
        return out

    def save(self) -> Path:
        payload = {
            "format_version": 1,
            "seed": self.seed,
            "height": self.height,
            "width": self.width,
            "params": self.params,
            "entries": [
                {
                    "subject_id": e.subject_id,
                    "sequence_id": e.sequence_id,
                    "frame_count": e.frame_count,
                    "path": e.path,
                }
                for e in self.entries
            ],
        }
        path = Path(self.root) / MANIFEST_NAME
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    payload = json.loads(path.read_text())
    entries = [ManifestEntry(**e) for e in payload["entries"]]
    return DatasetManifest(
        root=root,
        entries=entries,
        seed=payload["seed"],
        height=payload["height"],
        width=payload["width"],
        params=payload.get("params", {}),
    )


def split_train_holdout(
    manifest: DatasetManifest, holdout_seqs: int
) -> tuple[dict[str, list[ManifestEntry]], dict[str, list[ManifestEntry]]]:
    """Per subject: all but the last `holdout_seqs` sequences train, the rest are held out."""
    if holdout_seqs < 0:
        raise ValueError("holdout_seqs must be >= 0")
    train: dict[str, list[ManifestEntry]] = {}
    held: dict[str, list[ManifestEntry]] = {}
    for subject, seqs in sorted(manifest.subjects().items()):
        seqs = sorted(seqs, key=lambda e: e.sequence_id)
        if holdout_seqs >= len(seqs):
            raise ValueError(
                f"subject {subject} has {len(seqs)} sequences; cannot hold out {holdout_seqs} and still train"
            )
        split = len(seqs) - holdout_seqs
        train[subject] = seqs[:split]
        held[subject] = seqs[split:]
    return train, held


@dataclass
class SyntheticIdentitySpec:
    """Body-shape and gait parameters that define one synthetic walker."""

    identity_seed: int
    limb_ratios: tuple[float, float, float, float]  # thigh, shin, upper arm, forearm
    stride_period: float  # frames per gait cycle
    body_width_ratio: float
    arm_swing_amplitude: float  # radians

    def __post_init__(self):
        if len(self.limb_ratios) != 4 or not all(0.8 <= r <= 1.2 for r in self.limb_ratios):
            raise ValueError(f"limb ratios must be 4 scalars in [0.8, 1.2], got {self.limb_ratios}")
        if not 16 <= self.stride_period <= 40:
            raise ValueError(f"stride period must be in [16, 40], got {self.stride_period}")
        if not 0.8 <= self.body_width_ratio <= 1.2:
            raise ValueError(f"body width ratio must be in [0.8, 1.2], got {self.body_width_ratio}")
        if not 0.1 <= self.arm_swing_amplitude <= 0.6:
            raise ValueError(f"arm swing amplitude must be in [0.1, 0.6], got {self.arm_swing_amplitude}")


def identity_spec_from_seed(identity_seed: int) -> SyntheticIdentitySpec:
    """Deterministically draw identity parameters from a 64-bit seed."""
    rng = np.random.default_rng([identity_seed, _SALT_PARAMS])
    return SyntheticIdentitySpec(
        identity_seed=identity_seed,
        limb_ratios=tuple(rng.uniform(0.8, 1.2, size=4).tolist()),
        stride_period=float(rng.uniform(16.0, 40.0)),
        body_width_ratio=float(rng.uniform(0.8, 1.2)),
        arm_swing_amplitude=float(rng.uniform(0.1, 0.6)),
    )


def _capsule(xx, yy, p0, p1, radius):
    """Boolean mask of pixels within `radius` of segment p0-p1."""
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    len2 = dx * dx + dy * dy
    if len2 == 0.0:
        cx, cy = p0
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
    t = np.clip(((xx - p0[0]) * dx + (yy - p0[1]) * dy) / len2, 0.0, 1.0)
    cx = p0[0] + t * dx
    cy = p0[1] + t * dy
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius


@dataclass
class _GaitStyle:
    """Per-sequence rendering jitter; defaults give the canonical rendering."""

    phase0: float = 0.0
    leg_amplitude: float = 0.55
    knee_amplitude: float = 0.70
    thickness: float = 1.0

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "_GaitStyle":
        return cls(
            phase0=float(rng.uniform(0.0, 1.0)),
            leg_amplitude=float(rng.uniform(0.52, 0.60)),
            knee_amplitude=float(rng.uniform(0.62, 0.78)),
            thickness=float(rng.uniform(0.95, 1.05)),
        )


def render_walker_frame(spec: SyntheticIdentitySpec, t: int, style: _GaitStyle | None = None) -> np.ndarray:
    """Rasterize one articulated-walker frame on the working canvas.

    The figure is a lateral-view walker: head disk, torso capsule, two
    two-segment legs with feet, and two two-segment arms, all driven by a
    sinusoidal gait cycle of ``spec.stride_period`` frames. Returns a binary
    uint8 array of shape (_RENDER_SIZE, _RENDER_SIZE), not yet normalized.
    """
    style = style or _GaitStyle()
    size = _RENDER_SIZE
    b = _BODY_HEIGHT
    r1, r2, r3, r4 = spec.limb_ratios
    wr = spec.body_width_ratio
    th = style.thickness

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phi = 2.0 * np.pi * (t / spec.stride_period + style.phase0)

    x_mid = size / 2.0
    y_top = 8.0 + 0.012 * b * np.cos(2.0 * phi)  # vertical bob, double frequency

    head_r = 0.075 * b
    head_c = (x_mid, y_top + head_r)
    shoulder = (x_mid, y_top + 0.18 * b)
    hip = (x_mid, y_top + 0.50 * b)

    thigh_len = 0.245 * b * r1
    shin_len = 0.245 * b * r2
    upper_len = 0.17 * b * r3
    fore_len = 0.15 * b * r4

    mask = (xx - head_c[0]) ** 2 + (yy - head_c[1]) ** 2 <= head_r * head_r
    mask |= _capsule(xx, yy, shoulder, hip, 0.09 * b * wr * th)

    for side_phase in (0.0, np.pi):
        leg_phi = phi + side_phase
        thigh_ang = style.leg_amplitude * np.sin(leg_phi)
        bend = style.knee_amplitude * max(0.0, np.sin(leg_phi + 0.9))
        shin_ang = thigh_ang - bend
        knee = (hip[0] + thigh_len * np.sin(thigh_ang), hip[1] + thigh_len * np.cos(thigh_ang))
        ankle = (knee[0] + shin_len * np.sin(shin_ang), knee[1] + shin_len * np.cos(shin_ang))
        foot = (ankle[0] + 0.06 * b * np.cos(shin_ang), ankle[1] + 0.06 * b * np.sin(shin_ang))
        mask |= _capsule(xx, yy, hip, knee, 0.050 * b * wr * th)
        mask |= _capsule(xx, yy, knee, ankle, 0.036 * b * th)
        mask |= _capsule(xx, yy, ankle, foot, 0.030 * b * th)

        arm_ang = spec.arm_swing_amplitude * np.sin(leg_phi + np.pi)
        fore_ang = arm_ang + 0.45
        elbow = (shoulder[0] + upper_len * np.sin(arm_ang), shoulder[1] + upper_len * np.cos(arm_ang))
        wrist = (elbow[0] + fore_len * np.sin(fore_ang), elbow[1] + fore_len * np.cos(fore_ang))
        mask |= _capsule(xx, yy, shoulder, elbow, 0.030 * b * th)
        mask |= _capsule(xx, yy, elbow, wrist, 0.026 * b * th)

    return mask.astype(np.uint8)


def render_canonical_frame(spec: SyntheticIdentitySpec, hw: tuple[int, int] = (FRAME_HEIGHT, FRAME_WIDTH)) -> np.ndarray:
    """Phase-zero preprocessed frame of an identity; used to compare identities."""
    raw = render_walker_frame(spec, t=0, style=_GaitStyle())
    return preprocess_frames([raw], hw)[0]


def render_sequence(
    spec: SyntheticIdentitySpec,
    num_frames: int,
    rng: np.random.Generator,
    hw: tuple[int, int] = (FRAME_HEIGHT, FRAME_WIDTH),
) -> np.ndarray:
    """Render a walking sequence with per-sequence style jitter, preprocessed to hw."""
    style = _GaitStyle.sample(rng)
    raw = [render_walker_frame(spec, t, style) for t in range(num_frames)]
    return np.stack(preprocess_frames(raw, hw))


def _resize_binary(frame: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    img = Image.fromarray((frame > 0).astype(np.uint8) * 255, mode="L")
    img = img.resize((hw[1], hw[0]), Image.BILINEAR)
    return (np.asarray(img) >= 128).astype(np.uint8)


def preprocess_frames(raw_frames, hw: tuple[int, int] = (FRAME_HEIGHT, FRAME_WIDTH)) -> list[np.ndarray]:
    """Crop each frame to its foreground box, center it, and resize to hw.

    The crop is embedded centered in a square canvas before resizing so the
    subject keeps its aspect ratio and lands centered in the output. Frames
    with no foreground become all-zero frames of the target size.
    """
    out = []
    for frame in raw_frames:
        frame = np.asarray(frame)
        fg = frame > 0
        if not fg.any():
            out.append(np.zeros(hw, dtype=np.uint8))
            continue
        rows = np.flatnonzero(fg.any(axis=1))
        cols = np.flatnonzero(fg.any(axis=0))
        crop = fg[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
        side = max(crop.shape)
        canvas = np.zeros((side, side), dtype=np.uint8)
        oy = (side - crop.shape[0]) // 2
        ox = (side - crop.shape[1]) // 2
        canvas[oy : oy + crop.shape[0], ox : ox + crop.shape[1]] = crop
        out.append(_resize_binary(canvas, hw))
    return out


def sample_frames(seq: SilhouetteSequence, n: int, rng: np.random.Generator | None = None) -> SilhouetteSequence:
    """Return a fixed-length clip of exactly n frames in original order.

    Sequences of length >= n yield a contiguous window: start index 0 when
    rng is None (evaluation), a seeded-random start otherwise (training).
    Shorter sequences are repeated cyclically until length n.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    length = len(seq)
    if length >= n:
        start = 0 if rng is None else int(rng.integers(0, length - n + 1))
        frames = seq.frames[start : start + n]
    else:
        idx = np.arange(n) % length
        frames = seq.frames[idx]
    return SilhouetteSequence(
        frames=frames.copy(),
        subject_id=seq.subject_id,
        sequence_id=seq.sequence_id,
        occlusion=seq.occlusion,
    )


def generate_synthetic_dataset(
    num_subjects: int,
    seqs_per_subject: int,
    frames_per_seq: int,
    seed: int,
    out_root: str | Path,
    hw: tuple[int, int] = (FRAME_HEIGHT, FRAME_WIDTH),
) -> DatasetManifest:
    """Render a procedural walking dataset to disk and write its manifest.

    Pure function of (parameters, seed): repeated calls write byte-identical
    frames. Each subject gets its own identity parameters; each sequence gets
    its own phase/amplitude jitter.
    """
    if num_subjects < 2:
        raise ValueError(f"num_subjects must be >= 2 for retrieval, got {num_subjects}")
    if seqs_per_subject < 1 or frames_per_seq < 1:
        raise ValueError("seqs_per_subject and frames_per_seq must be positive")
    if seed < 0:
        raise ValueError(f"seed must be a nonnegative 64-bit integer, got {seed}")

    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset root {out_root}: {exc}") from exc

    entries = []
    for si in range(num_subjects):
        subject_id = f"s{si:04d}"
        identity_seed = int(np.random.default_rng([seed, si, _SALT_IDENTITY]).integers(2**62))
        spec = identity_spec_from_seed(identity_seed)
        for qi in range(seqs_per_subject):
            sequence_id = f"seq{qi:02d}"
            rng = np.random.default_rng([seed, si, qi, _SALT_SEQUENCE])
            frames = render_sequence(spec, frames_per_seq, rng, hw)
            rel = f"{subject_id}/{sequence_id}"
            seq_dir = out_root / rel
            seq_dir.mkdir(parents=True, exist_ok=True)
            for t in range(frames_per_seq):
                img = Image.fromarray(frames[t] * 255, mode="L")
                img.save(seq_dir / FRAME_PATTERN.format(t))
            entries.append(ManifestEntry(subject_id, sequence_id, frames_per_seq, rel))

    manifest = DatasetManifest(
        root=out_root,
        entries=entries,
        seed=seed,
        height=hw[0],
        width=hw[1],
        params={
            "num_subjects": num_subjects,
            "seqs_per_subject": seqs_per_subject,
            "frames_per_seq": frames_per_seq,
        },
    )
    manifest.save()
    return manifest


def load_sequence(path: str | Path, expect_dims: tuple[int, int] = (FRAME_HEIGHT, FRAME_WIDTH)) -> SilhouetteSequence:
    """Load one sequence directory of frame images, binarized at half intensity."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ValueError(f"empty sequence: no frame images under {path}")
    frames = []
    for f in files:
        arr = np.asarray(Image.open(f).convert("L"))
        if arr.shape != expect_dims:
            raise ValueError(f"frame dimension mismatch in {f}: got {arr.shape}, expected {expect_dims}")
        frames.append((arr >= 127.5).astype(np.uint8))
    return SilhouetteSequence(
        frames=np.stack(frames),
        subject_id=path.parent.name,
        sequence_id=path.name,
    )


class SequenceStore:
    """Caching loader for a manifest's sequences."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def frames(self, subject_id: str, sequence_id: str) -> np.ndarray:
        key = (subject_id, sequence_id)
        if key not in self._cache:
            seq = load_sequence(
                Path(self.manifest.root) / subject_id / sequence_id,
                expect_dims=(self.manifest.height, self.manifest.width),
            )
            self._cache[key] = seq.frames
        return self._cache[key]

    def sequence(self, entry: ManifestEntry) -> SilhouetteSequence:
        return SilhouetteSequence(
            frames=self.frames(entry.subject_id, entry.sequence_id).copy(),
            subject_id=entry.subject_id,
            sequence_id=entry.sequence_id,
        )
