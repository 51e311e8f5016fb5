"""Three-stage training orchestration.

Stage 1 fits the occlusion evaluator on synthetically occluded clips with
known type/level ground truth. Stage 2 fits the holistic gait network with
batch-hard triplet + cross-entropy losses and records the holistic retrieval
upper bound. Stage 3 freezes both and fits only the restoration network (and
a fresh classifier head) on the integrated feature f = G + alpha * R.

Every stage is deterministic in (manifest, config): parameter init is seeded
through torch, all sampling through per-iteration numpy generators.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import evaluation
from .backbone import BnneckHead, GaitBackbone, ResidualBackbone
from .checkpoint import load_checkpoint, module_checksum, save_checkpoint
from .data import (
    DatasetManifest,
    ManifestEntry,
    SequenceStore,
    load_manifest,
    sample_frames,
    split_train_holdout,
)
from .occlusion import (
    DEFAULT_MAX_MAGNITUDE,
    OcclusionKind,
    OcclusionSpec,
    apply_occlusion,
    occlusion_class_index,
    sample_occlusion_spec,
)
from .oem import ALPHA_MODES, OcclusionEvaluator, oem_batch_loss

ALL_OCCLUSION_KINDS = ("top", "bottom", "middle", "moving")

_SALT_BATCH = 301
_SALT_STAGE1 = 311
_SALT_STAGE1_EVAL = 312
_SALT_STAGE2 = 321
_SALT_STAGE3 = 331
_SALT_ADAPT = 341


class TrainingDivergence(RuntimeError):
    """A loss or embedding went non-finite; training aborts immediately."""


class FrozenParameterError(RuntimeError):
    """A parameter that was contractually frozen changed during training."""


def seed_everything(seed: int) -> None:
    random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(1)


def _check_kinds(kinds) -> tuple[str, ...]:
    kinds = tuple(kinds)
    for name in kinds:
        kind = OcclusionKind(name)
        if kind is OcclusionKind.NONE:
            raise ValueError("NONE is mixed in via none_prob, not listed as a kind")
    return kinds


@dataclass
class Stage1Config:
    """Occlusion evaluator training.

    Defaults to Adam: the evaluator trunk has no normalization layers and the
    0.1-weighted classification term starves plain SGD at desk-scale budgets.
    """

    seed: int = 0
    iterations: int = 1600
    batch_clips: int = 12
    frames_per_clip: int = 6
    optimizer: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 1.0
    kinds: tuple[str, ...] = ALL_OCCLUSION_KINDS
    none_prob: float = 0.2
    max_magnitude: float = DEFAULT_MAX_MAGNITUDE
    alpha_mode: str = "severity"
    class_count: int = 6
    holdout_seqs: int = 2
    eval_clips_per_entry: int = 2
    eval_frames: int = 12

    def __post_init__(self):
        _validate_common(self)
        self.kinds = _check_kinds(self.kinds)
        if self.batch_clips < 2:
            raise ValueError("batch must hold at least two clips")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha mode must be one of {ALPHA_MODES}")
        if self.eval_frames < 1:
            raise ValueError("eval_frames must be positive")

    @property
    def milestones(self) -> list[int]:
        return _milestones(self.iterations)


@dataclass
class Stage2Config:
    """Holistic gait network training; kinds non-empty turns this into the
    occlusion-retrained baseline."""

    seed: int = 1
    iterations: int = 250
    p: int = 8
    k: int = 4
    frames_per_clip: int = 30
    margin: float = 0.2
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 0.1
    kinds: tuple[str, ...] = ()
    none_prob: float = 0.2
    max_magnitude: float = DEFAULT_MAX_MAGNITUDE
    embed_dim: int = 64
    holdout_seqs: int = 2
    eval_seed: int = 97

    def __post_init__(self):
        _validate_common(self)
        _validate_pk(self)
        self.kinds = _check_kinds(self.kinds)

    @property
    def milestones(self) -> list[int]:
        return _milestones(self.iterations)


@dataclass
class Stage3Config:
    """Restoration network training with frozen evaluator and gait network.

    restore_weight scales an L2 pull of the integrated feature toward the
    frozen gait embedding of the same clip before occlusion (available here
    because occlusions are synthesized). Trained with triplet + xe alone the
    residual drifts into corrections keyed to the occlusion kinds it saw,
    which are destructive on unseen kinds; the restoration target keeps it
    pointed at the clean feature.
    """

    seed: int = 2
    iterations: int = 200
    p: int = 8
    k: int = 4
    frames_per_clip: int = 30
    margin: float = 0.2
    lambda3: float = 1.0
    restore_weight: float = 1.0
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 0.1
    kinds: tuple[str, ...] = ALL_OCCLUSION_KINDS
    none_prob: float = 0.2
    max_magnitude: float = DEFAULT_MAX_MAGNITUDE
    oem_frame_stride: int = 4
    warm_start_residual: bool = False
    holdout_seqs: int = 2

    def __post_init__(self):
        _validate_common(self)
        _validate_pk(self)
        self.kinds = _check_kinds(self.kinds)
        if not self.kinds:
            raise ValueError("stage 3 needs at least one occlusion kind")
        if self.oem_frame_stride < 1:
            raise ValueError("oem_frame_stride must be >= 1")
        if self.restore_weight < 0:
            raise ValueError("restore_weight must be >= 0")

    @property
    def milestones(self) -> list[int]:
        return _milestones(self.iterations)


def _validate_common(cfg) -> None:
    if cfg.iterations < 0:
        raise ValueError("iterations must be >= 0")
    if cfg.optimizer not in ("sgd", "adam"):
        raise ValueError("optimizer must be 'sgd' or 'adam'")
    if cfg.lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0.0 <= cfg.none_prob <= 1.0:
        raise ValueError("none_prob must lie in [0, 1]")
    if not 0.0 < cfg.max_magnitude <= 1.0:
        raise ValueError("max_magnitude must lie in (0, 1]")
    if cfg.holdout_seqs < 0:
        raise ValueError("holdout_seqs must be >= 0")


def _validate_pk(cfg) -> None:
    if cfg.p < 2 or cfg.k < 2:
        raise ValueError("triplet mining needs p >= 2 subjects and k >= 2 clips each")
    if getattr(cfg, "margin", 1.0) <= 0:
        raise ValueError("margin must be positive")


def _milestones(iterations: int) -> list[int]:
    return [max(1, math.ceil(iterations * 0.5)), max(1, math.ceil(iterations * 0.75))]


def config_from_dict(cls, data: dict):
    """Build a stage config from a plain dict, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    data = dict(data)
    if "kinds" in data:
        data["kinds"] = tuple(data["kinds"])
    return cls(**data)


@dataclass
class StageArtifacts:
    stage: int
    checkpoint_path: Path
    log_path: Path
    metrics: dict
    checksums: dict
    file_hash: str
    history: list = field(default_factory=list)


def _as_manifest(manifest) -> DatasetManifest:
    if isinstance(manifest, (str, Path)):
        return load_manifest(manifest)
    return manifest


def split_entries(manifest, holdout_seqs: int) -> tuple[dict[str, list[ManifestEntry]], dict[str, list[ManifestEntry]]]:
    return split_train_holdout(_as_manifest(manifest), holdout_seqs)


@dataclass
class ClipBatch:
    clips: np.ndarray  # (B, T, H, W) float32
    subject_ids: list[str]
    entries: list[ManifestEntry]
    class_indices: np.ndarray  # int64, NONE where no occlusion was applied
    levels: np.ndarray  # float32
    holistic: np.ndarray | None = None  # pre-occlusion frames, kept on request

    def clip_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.clips)

    def holistic_tensor(self) -> torch.Tensor:
        if self.holistic is None:
            raise ValueError("batch was assembled without keep_holistic")
        return torch.from_numpy(self.holistic)


def _draw_spec(rng: np.random.Generator, kinds, none_prob: float, max_magnitude: float, hw) -> OcclusionSpec:
    spec_seed = int(rng.integers(2**62))
    if not kinds or rng.random() < none_prob:
        return OcclusionSpec(kind=OcclusionKind.NONE, magnitude=0.0, rng_seed=spec_seed, max_magnitude=max_magnitude)
    allowed = {OcclusionKind(name) for name in kinds}
    return sample_occlusion_spec(spec_seed, allowed, max_magnitude=max_magnitude, hw=hw)


def _assemble(
    store: SequenceStore,
    picks: list[tuple[str, ManifestEntry]],
    frames_per_clip: int,
    rng: np.random.Generator,
    kinds=(),
    none_prob: float = 0.0,
    max_magnitude: float = DEFAULT_MAX_MAGNITUDE,
    keep_holistic: bool = False,
) -> ClipBatch:
    clips, subjects, entries, classes, levels, raws = [], [], [], [], [], []
    for subject, entry in picks:
        seq = store.sequence(entry)
        clip = sample_frames(seq, frames_per_clip, rng)
        spec = _draw_spec(rng, kinds, none_prob, max_magnitude, clip.frame_shape)
        if keep_holistic:
            raws.append(clip.frames.astype(np.float32))
        clip, label = apply_occlusion(clip, spec)
        clips.append(clip.frames.astype(np.float32))
        subjects.append(subject)
        entries.append(entry)
        classes.append(label.class_index)
        levels.append(label.level)
    return ClipBatch(
        clips=np.stack(clips),
        subject_ids=subjects,
        entries=entries,
        class_indices=np.asarray(classes, dtype=np.int64),
        levels=np.asarray(levels, dtype=np.float32),
        holistic=np.stack(raws) if keep_holistic else None,
    )


def make_pk_batch(
    manifest,
    p: int,
    k: int,
    rng_seed: int,
    frames_per_clip: int = 30,
    store: SequenceStore | None = None,
    groups: dict[str, list[ManifestEntry]] | None = None,
    kinds=(),
    none_prob: float = 0.0,
    max_magnitude: float = DEFAULT_MAX_MAGNITUDE,
    keep_holistic: bool = False,
) -> ClipBatch:
    """Identity-balanced batch: p distinct subjects, k clips each.

    Subjects are drawn uniformly without replacement; a subject's sequences
    are drawn without replacement when it has at least k, with replacement
    otherwise. Deterministic in rng_seed (keep_holistic retains the
    pre-occlusion frames without consuming any extra draws).
    """
    manifest = _as_manifest(manifest)
    if groups is None:
        groups, _ = split_entries(manifest, 0)
    store = store or SequenceStore(manifest)
    subjects = sorted(groups)
    if p > len(subjects):
        raise ValueError(f"batch needs {p} subjects but only {len(subjects)} are available")
    rng = np.random.default_rng([rng_seed, _SALT_BATCH])
    chosen = rng.choice(len(subjects), size=p, replace=False)
    picks: list[tuple[str, ManifestEntry]] = []
    for si in chosen:
        subject = subjects[si]
        seqs = groups[subject]
        replace = len(seqs) < k
        idx = rng.choice(len(seqs), size=k, replace=replace)
        picks.extend((subject, seqs[qi]) for qi in idx)
    return _assemble(store, picks, frames_per_clip, rng, kinds, none_prob, max_magnitude, keep_holistic)


def _uniform_clip_batch(
    store: SequenceStore,
    entries: list[tuple[str, ManifestEntry]],
    count: int,
    frames_per_clip: int,
    rng: np.random.Generator,
    kinds,
    none_prob: float,
    max_magnitude: float,
) -> ClipBatch:
    idx = rng.integers(0, len(entries), size=count)
    picks = [entries[i] for i in idx]
    return _assemble(store, picks, frames_per_clip, rng, kinds, none_prob, max_magnitude)


def triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor, margin: float = 0.2) -> torch.Tensor:
    """Batch-hard triplet margin loss on Euclidean distances.

    Per anchor: hardest (farthest) positive minus easiest (nearest) negative
    plus margin, hinged at zero, averaged over all anchors.
    """
    if embeddings.dim() != 2:
        raise ValueError(f"expected (B, d) embeddings, got {tuple(embeddings.shape)}")
    if labels.shape[0] != embeddings.shape[0]:
        raise ValueError("labels and embeddings disagree on batch size")
    uniq, counts = torch.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("triplet loss needs at least two subjects in the batch")
    if counts.min() < 2:
        raise ValueError("every subject in the batch needs at least two clips")
    prod = embeddings @ embeddings.t()
    sq = prod.diagonal().unsqueeze(0)
    dist = torch.sqrt(torch.clamp(sq + sq.t() - 2.0 * prod, min=1e-12))
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=embeddings.device)
    d_pos = dist.masked_fill(~(same & ~eye), float("-inf")).max(dim=1).values
    d_neg = dist.masked_fill(same, float("inf")).min(dim=1).values
    return F.relu(d_pos - d_neg + margin).mean()


def _finite_or_abort(value: torch.Tensor, what: str, iteration: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDivergence(f"{what} became non-finite at iteration {iteration}")


class _CsvLog:
    def __init__(self, path: Path, columns: list[str]):
        self.path = path
        self.columns = columns
        self.rows: list[dict] = []
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(columns)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt_cell(row[c]) for c in self.columns])


def _fmt_cell(value):
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


def _make_optimizer(params, cfg):
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=cfg.milestones, gamma=cfg.decay_factor)
    return opt, sched


def _flat_entries(groups: dict[str, list[ManifestEntry]]) -> list[tuple[str, ManifestEntry]]:
    return [(subject, entry) for subject in sorted(groups) for entry in groups[subject]]


def _arch_meta(manifest: DatasetManifest, cfg, embed_dim: int | None = None) -> dict:
    arch = {
        "input_hw": [manifest.height, manifest.width],
        "max_magnitude": cfg.max_magnitude,
    }
    if embed_dim is not None:
        arch["embed_dim"] = embed_dim
    return arch


def train_stage1(manifest, config: Stage1Config, out_dir, store: SequenceStore | None = None) -> StageArtifacts:
    """Stage 1: occlusion type/level supervision on synthetically occluded clips."""
    manifest = _as_manifest(manifest)
    out_dir = Path(out_dir)
    store = store or SequenceStore(manifest)
    train_groups, held_groups = split_entries(manifest, config.holdout_seqs)
    entries = _flat_entries(train_groups)
    hw = (manifest.height, manifest.width)

    seed_everything(config.seed)
    model = OcclusionEvaluator(
        class_count=config.class_count,
        input_hw=hw,
        max_magnitude=config.max_magnitude,
        alpha_mode=config.alpha_mode,
    )
    opt, sched = _make_optimizer(model.parameters(), config)
    log = _CsvLog(out_dir / "stage1_log.csv", ["iteration", "loss", "loss_cls", "loss_reg", "lr"])

    model.train()
    for it in range(config.iterations):
        rng = np.random.default_rng([config.seed, _SALT_STAGE1, it])
        batch = _uniform_clip_batch(
            store, entries, config.batch_clips, config.frames_per_clip, rng,
            config.kinds, config.none_prob, config.max_magnitude,
        )
        _, logits, raw = model(batch.clip_tensor())
        total, cls, reg = oem_batch_loss(
            logits, raw,
            torch.from_numpy(batch.class_indices),
            torch.from_numpy(batch.levels),
            config.lambda1, config.lambda2,
        )
        _finite_or_abort(total, "stage-1 loss", it)
        opt.zero_grad()
        total.backward()
        opt.step()
        sched.step()
        log.append({
            "iteration": it, "loss": total.item(), "loss_cls": cls.item(),
            "loss_reg": reg.item(), "lr": opt.param_groups[0]["lr"],
        })

    metrics = evaluate_oem(model, store, held_groups, config)
    ckpt_path = out_dir / "oem.ckpt"
    meta = {
        "stage": 1,
        "arch": _arch_meta(manifest, config) | {"class_count": config.class_count, "alpha_mode": config.alpha_mode},
        "config": dataclasses.asdict(config),
        "kinds": list(config.kinds),
        "metrics": metrics,
    }
    file_hash = save_checkpoint(ckpt_path, {"oem": model}, meta)
    return StageArtifacts(
        stage=1, checkpoint_path=ckpt_path, log_path=log.path, metrics=metrics,
        checksums={"oem": module_checksum(model)}, file_hash=file_hash, history=log.rows,
    )


def evaluate_oem(model: OcclusionEvaluator, store: SequenceStore, held_groups, config: Stage1Config) -> dict:
    """Held-out type accuracy and level MAE, class-balanced by round-robin kinds.

    Clips are eval_frames long: longer than the training window, so the
    temporal mean sees more gait phases, but short enough that a fast MOVING
    bar has not left the frame.
    """
    cycle = [None, *config.kinds]  # None stands for the unoccluded class
    entries = _flat_entries(held_groups)
    hits, abs_errs = [], []
    i = 0
    for subject, entry in entries:
        for _ in range(config.eval_clips_per_entry):
            rng = np.random.default_rng([config.seed, _SALT_STAGE1_EVAL, i])
            seq = store.sequence(entry)
            clip = sample_frames(seq, config.eval_frames)
            kind_name = cycle[i % len(cycle)]
            spec = _draw_spec(
                rng, () if kind_name is None else (kind_name,),
                none_prob=1.0 if kind_name is None else 0.0,
                max_magnitude=config.max_magnitude, hw=clip.frame_shape,
            )
            clip, label = apply_occlusion(clip, spec)
            out = model.assess(clip.frames)
            hits.append(int(np.argmax(out.class_logits)) == label.class_index)
            abs_errs.append(abs(out.raw_level - label.level))
            i += 1
    return {
        "type_accuracy": float(np.mean(hits)),
        "level_mae": float(np.mean(abs_errs)),
        "clips": len(hits),
    }


def train_stage2(manifest, config: Stage2Config, out_dir, store: SequenceStore | None = None) -> StageArtifacts:
    """Stage 2: holistic gait network with triplet + cross-entropy losses.

    Logs the held-out holistic Rank-1, which downstream protocols use as the
    holistic upper bound.
    """
    manifest = _as_manifest(manifest)
    out_dir = Path(out_dir)
    store = store or SequenceStore(manifest)
    train_groups, held_groups = split_entries(manifest, config.holdout_seqs)
    subjects = sorted(train_groups)
    label_of = {s: i for i, s in enumerate(subjects)}
    hw = (manifest.height, manifest.width)

    seed_everything(config.seed)
    model = GaitBackbone(input_hw=hw, embed_dim=config.embed_dim)
    head = BnneckHead(config.embed_dim, num_classes=len(subjects))
    opt, sched = _make_optimizer(list(model.parameters()) + list(head.parameters()), config)
    log = _CsvLog(out_dir / "stage2_log.csv", ["iteration", "loss", "loss_triplet", "loss_xe", "lr"])

    model.train()
    head.train()
    for it in range(config.iterations):
        batch = make_pk_batch(
            manifest, config.p, config.k, rng_seed=_mix(config.seed, _SALT_STAGE2, it),
            frames_per_clip=config.frames_per_clip, store=store, groups=train_groups,
            kinds=config.kinds, none_prob=config.none_prob if config.kinds else 0.0,
            max_magnitude=config.max_magnitude,
        )
        labels = torch.tensor([label_of[s] for s in batch.subject_ids])
        g = model(batch.clip_tensor())
        _finite_or_abort(g, "stage-2 embeddings", it)
        tri = triplet_loss(g, labels, config.margin)
        xe = F.cross_entropy(head(g), labels)
        total = tri + xe
        _finite_or_abort(total, "stage-2 loss", it)
        opt.zero_grad()
        total.backward()
        opt.step()
        sched.step()
        log.append({
            "iteration": it, "loss": total.item(), "loss_triplet": tri.item(),
            "loss_xe": xe.item(), "lr": opt.param_groups[0]["lr"],
        })

    model.eval()
    head.eval()
    gallery_e, probe_e = evaluation.balanced_split(held_groups, config.eval_seed)
    embed = evaluation.gait_embedder(model)
    gallery = evaluation.holistic_records(embed, store, gallery_e, config.frames_per_clip)
    probes = evaluation.holistic_records(embed, store, probe_e, config.frames_per_clip)
    result = evaluation.rank_retrieval(gallery, probes, ks=(1, 5))
    metrics = {
        "holistic_rank1": result.ranks[1],
        "holistic_rank5": result.ranks[5],
        "eval_seed": config.eval_seed,
    }

    ckpt_path = out_dir / ("gait.ckpt" if not config.kinds else "gait_occluded.ckpt")
    meta = {
        "stage": 2,
        "arch": _arch_meta(manifest, config, embed_dim=config.embed_dim),
        "config": dataclasses.asdict(config),
        "num_subjects": len(subjects),
        "holistic_upper_bound": result.ranks[1],
        "metrics": metrics,
    }
    file_hash = save_checkpoint(ckpt_path, {"gait": model, "head": head}, meta)
    return StageArtifacts(
        stage=2, checkpoint_path=ckpt_path, log_path=log.path, metrics=metrics,
        checksums={"gait": module_checksum(model)}, file_hash=file_hash, history=log.rows,
    )


def _mix(*parts: int) -> int:
    """Fold seed parts into one 63-bit value for APIs that take a single seed."""
    return int(np.random.default_rng(list(parts)).integers(2**62))


def _load_frozen(oem_path, gait_path) -> tuple[OcclusionEvaluator, GaitBackbone, dict, dict]:
    oem_ckpt = load_checkpoint(oem_path)
    gait_ckpt = load_checkpoint(gait_path)
    oem_arch = oem_ckpt.meta["arch"]
    gait_arch = gait_ckpt.meta["arch"]
    oem = OcclusionEvaluator(
        class_count=oem_arch["class_count"],
        input_hw=tuple(oem_arch["input_hw"]),
        max_magnitude=oem_arch["max_magnitude"],
        alpha_mode=oem_arch["alpha_mode"],
    )
    oem_ckpt.load_into("oem", oem)
    gait = GaitBackbone(input_hw=tuple(gait_arch["input_hw"]), embed_dim=gait_arch["embed_dim"])
    gait_ckpt.load_into("gait", gait)
    for module in (oem, gait):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
    return oem, gait, oem_ckpt.meta, gait_ckpt.meta


def _run_stage3_loop(
    manifest: DatasetManifest,
    config: Stage3Config,
    out_dir: Path,
    oem: OcclusionEvaluator,
    gait: GaitBackbone,
    frn: ResidualBackbone,
    head: BnneckHead,
    store: SequenceStore,
    log_name: str,
    salt: int,
) -> _CsvLog:
    train_groups, _ = split_entries(manifest, config.holdout_seqs)
    label_of = {s: i for i, s in enumerate(sorted(train_groups))}
    frozen_before = {"oem": module_checksum(oem), "gait": module_checksum(gait)}
    assert all(not p.requires_grad for p in oem.parameters())
    assert all(not p.requires_grad for p in gait.parameters())

    opt, sched = _make_optimizer(list(frn.parameters()) + list(head.parameters()), config)
    log = _CsvLog(out_dir / log_name, ["iteration", "loss", "loss_triplet", "loss_xe", "loss_restore", "lr"])

    restoring = config.restore_weight > 0
    frn.train()
    head.train()
    for it in range(config.iterations):
        batch = make_pk_batch(
            manifest, config.p, config.k, rng_seed=_mix(config.seed, salt, it),
            frames_per_clip=config.frames_per_clip, store=store, groups=train_groups,
            kinds=config.kinds, none_prob=config.none_prob, max_magnitude=config.max_magnitude,
            keep_holistic=restoring,
        )
        labels = torch.tensor([label_of[s] for s in batch.subject_ids])
        clips = batch.clip_tensor()
        with torch.no_grad():
            o, _, raw = oem(clips[:, :: config.oem_frame_stride])
            alphas = oem.alphas(raw)
            g = gait(clips)
            g_clean = gait(batch.holistic_tensor()) if restoring else None
        r = frn(clips, o)
        f = g + alphas.unsqueeze(1) * r
        _finite_or_abort(f, "stage-3 features", it)
        tri = triplet_loss(f, labels, config.margin)
        xe = F.cross_entropy(head(f), labels)
        # per-sample squared distance, not per-element: keeps the term on the
        # same footing as the triplet/xe losses regardless of embed_dim
        rec = (f - g_clean).pow(2).sum(dim=1).mean() if restoring else torch.zeros(())
        total = tri + config.lambda3 * xe + config.restore_weight * rec
        _finite_or_abort(total, "stage-3 loss", it)
        opt.zero_grad()
        total.backward()
        opt.step()
        sched.step()
        log.append({
            "iteration": it, "loss": total.item(), "loss_triplet": tri.item(),
            "loss_xe": xe.item(), "loss_restore": rec.item(), "lr": opt.param_groups[0]["lr"],
        })

    after = {"oem": module_checksum(oem), "gait": module_checksum(gait)}
    if after != frozen_before:
        raise FrozenParameterError(f"frozen module changed during training: before={frozen_before} after={after}")
    return log


def train_stage3(
    manifest,
    config: Stage3Config,
    out_dir,
    oem_path,
    gait_path,
    store: SequenceStore | None = None,
) -> StageArtifacts:
    """Stage 3: train only the restoration network and a fresh head on f = G + alpha * R."""
    manifest = _as_manifest(manifest)
    out_dir = Path(out_dir)
    store = store or SequenceStore(manifest)
    oem, gait, oem_meta, gait_meta = _load_frozen(oem_path, gait_path)
    hw = (manifest.height, manifest.width)
    embed_dim = gait.embed_dim
    train_groups, _ = split_entries(manifest, config.holdout_seqs)

    seed_everything(config.seed)
    frn = ResidualBackbone(input_hw=hw, embed_dim=embed_dim)
    if config.warm_start_residual:
        frn.warm_start_from(gait)
    head = BnneckHead(embed_dim, num_classes=len(train_groups))

    log = _run_stage3_loop(manifest, config, out_dir, oem, gait, frn, head, store, "stage3_log.csv", _SALT_STAGE3)

    frozen = {"oem": module_checksum(oem), "gait": module_checksum(gait)}
    ckpt_path = out_dir / "bundle.ckpt"
    meta = {
        "stage": 3,
        "arch": {
            "input_hw": [manifest.height, manifest.width],
            "embed_dim": embed_dim,
            "class_count": oem.class_count,
            "max_magnitude": oem.max_magnitude,
            "alpha_mode": oem.alpha_mode,
        },
        "config": dataclasses.asdict(config),
        "stage3_kinds": sorted(config.kinds),
        "none_prob": config.none_prob,
        "frozen_checksums": frozen,
        "holistic_upper_bound": gait_meta.get("holistic_upper_bound"),
        "holistic_metrics": gait_meta.get("metrics"),
        "oem_metrics": oem_meta.get("metrics"),
    }
    metrics = {"iterations": config.iterations, "final_loss": log.rows[-1]["loss"] if log.rows else None}
    file_hash = save_checkpoint(ckpt_path, {"oem": oem, "gait": gait, "residual": frn, "head": head}, meta)
    return StageArtifacts(
        stage=3, checkpoint_path=ckpt_path, log_path=log.path, metrics=metrics,
        checksums=frozen | {"residual": module_checksum(frn)}, file_hash=file_hash, history=log.rows,
    )


def adapt_residual(
    manifest,
    config: Stage3Config,
    out_dir,
    bundle_path,
    store: SequenceStore | None = None,
) -> StageArtifacts:
    """Fine-tune an existing bundle's restoration network on new occlusion kinds.

    The evaluator and gait network stay frozen; the restoration network and
    head continue from the bundle's weights. config.kinds names the new kinds.
    """
    manifest = _as_manifest(manifest)
    out_dir = Path(out_dir)
    store = store or SequenceStore(manifest)
    bundle = load_checkpoint(bundle_path)
    arch = bundle.meta["arch"]
    hw = tuple(arch["input_hw"])

    oem = OcclusionEvaluator(
        class_count=arch["class_count"], input_hw=hw,
        max_magnitude=arch["max_magnitude"], alpha_mode=arch["alpha_mode"],
    )
    gait = GaitBackbone(input_hw=hw, embed_dim=arch["embed_dim"])
    frn = ResidualBackbone(input_hw=hw, embed_dim=arch["embed_dim"])
    bundle.load_into("oem", oem)
    bundle.load_into("gait", gait)
    bundle.load_into("residual", frn)
    head_arrays = bundle.module_arrays("head")
    head = BnneckHead(arch["embed_dim"], num_classes=head_arrays["classifier.weight"].shape[0])
    bundle.load_into("head", head)
    for module in (oem, gait):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)

    seed_everything(config.seed)
    log = _run_stage3_loop(manifest, config, out_dir, oem, gait, frn, head, store, "adapt_log.csv", _SALT_ADAPT)

    frozen = {"oem": module_checksum(oem), "gait": module_checksum(gait)}
    ckpt_path = out_dir / "adapted.ckpt"
    meta = {
        "stage": 3,
        "arch": dict(arch),
        "config": dataclasses.asdict(config),
        "stage3_kinds": bundle.meta.get("stage3_kinds", []),
        "adapted_kinds": sorted(config.kinds),
        "adapted_from_checksums": dict(bundle.meta.get("checksums", {})),
        "none_prob": config.none_prob,
        "frozen_checksums": frozen,
        "holistic_upper_bound": bundle.meta.get("holistic_upper_bound"),
    }
    metrics = {"iterations": config.iterations, "final_loss": log.rows[-1]["loss"] if log.rows else None}
    file_hash = save_checkpoint(ckpt_path, {"oem": oem, "gait": gait, "residual": frn, "head": head}, meta)
    return StageArtifacts(
        stage=3, checkpoint_path=ckpt_path, log_path=log.path, metrics=metrics,
        checksums=frozen | {"residual": module_checksum(frn)}, file_hash=file_hash, history=log.rows,
    )
