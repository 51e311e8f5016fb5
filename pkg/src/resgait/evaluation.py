"""Evaluation protocols and metrics.

Covers balanced gallery/probe splitting, rank-k retrieval, verification
(TAR at a fixed FAR budget), relative performance against the holistic upper
bound, holistic retention, zero-shot generalization to unseen occlusion
kinds, post-fine-tuning adaptation, and multi-seed statistics. Every protocol
is a pure function of (checkpoint, manifest, seed).
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import EmbeddingRecord, InferenceBundle
from .data import DatasetManifest, ManifestEntry, SequenceStore, load_manifest, sample_frames, split_train_holdout
from .occlusion import OcclusionKind, OcclusionSpec, apply_occlusion, sample_occlusion_spec

DEFAULT_KS = (1, 5, 20)
DEFAULT_EVAL_KINDS = ("top", "bottom", "middle", "moving")

_SALT_SPLIT = 401
_SALT_PROBE_SPEC = 402
_SALT_SEED_DERIVE = 403


class ProvenanceError(ValueError):
    """The checkpoint was not trained under the occlusion set a protocol requires."""


def _ensure_manifest(manifest) -> DatasetManifest:
    if isinstance(manifest, (str, Path)):
        return load_manifest(manifest)
    return manifest


def _ensure_bundle(bundle) -> InferenceBundle:
    if isinstance(bundle, (str, Path)):
        return InferenceBundle.load(bundle)
    return bundle


def _group_entries(source) -> dict[str, list[ManifestEntry]]:
    if isinstance(source, DatasetManifest):
        groups = source.subjects()
    elif isinstance(source, dict):
        groups = source
    else:
        groups = {}
        for entry in source:
            groups.setdefault(entry.subject_id, []).append(entry)
    return {s: sorted(groups[s], key=lambda e: e.sequence_id) for s in sorted(groups)}


def balanced_split(source, rng_seed: int) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """One gallery and one probe sequence per subject, drawn deterministically.

    Extra sequences beyond two are left unused. Errors if any subject has a
    single sequence.
    """
    groups = _group_entries(source)
    rng = np.random.default_rng([rng_seed, _SALT_SPLIT])
    gallery, probes = [], []
    for subject, seqs in groups.items():
        if len(seqs) < 2:
            raise ValueError(f"subject {subject} has a single sequence; balanced split needs at least two")
        perm = rng.permutation(len(seqs))
        gallery.append(seqs[perm[0]])
        probes.append(seqs[perm[1]])
    return gallery, probes


@dataclass
class RetrievalResult:
    ranks: dict[int, float]
    num_probes: int
    num_gallery: int
    distances: np.ndarray | None = None  # (num_probes, num_gallery) when retained


def rank_retrieval(
    gallery: list[EmbeddingRecord],
    probes: list[EmbeddingRecord],
    ks=DEFAULT_KS,
    keep_distances: bool = False,
) -> RetrievalResult:
    """Rank-k accuracy by ascending Euclidean distance over the gallery.

    A probe scores a rank-k hit iff any of its k nearest gallery entries
    shares its subject.
    """
    if not gallery or not probes:
        raise ValueError("gallery and probe sets must be non-empty")
    g = np.stack([r.embedding for r in gallery]).astype(np.float64)
    p = np.stack([r.embedding for r in probes]).astype(np.float64)
    if g.shape[1] != p.shape[1]:
        raise ValueError(f"embedding dimensions differ: gallery {g.shape[1]} vs probe {p.shape[1]}")
    gallery_subjects = [r.subject_id for r in gallery]
    subject_ids = {s: i for i, s in enumerate(sorted(set(gallery_subjects)))}
    for r in probes:
        if r.subject_id not in subject_ids:
            raise ValueError(f"probe subject {r.subject_id} absent from gallery")
    gsub = np.array([subject_ids[s] for s in gallery_subjects])
    psub = np.array([subject_ids[r.subject_id] for r in probes])

    dists = np.sqrt(np.maximum(((p[:, None, :] - g[None, :, :]) ** 2).sum(axis=2), 0.0))
    order = np.argsort(dists, axis=1, kind="stable")
    match = gsub[order] == psub[:, None]
    ranks = {int(k): float(match[:, :k].any(axis=1).mean()) for k in sorted(ks)}
    return RetrievalResult(
        ranks=ranks,
        num_probes=len(probes),
        num_gallery=len(gallery),
        distances=dists if keep_distances else None,
    )


@dataclass
class VerificationResult:
    tar: float
    threshold: float | None
    far_target: float
    achieved_far: float
    roc: list[tuple[float, float]]  # (FAR, TAR) at each candidate threshold


def verification_tar_at_far(genuine_distances, impostor_distances, far_target: float = 0.01) -> VerificationResult:
    """TAR at the largest observed threshold whose empirical FAR stays within budget.

    A pair is accepted when its distance is <= threshold; candidates are the
    observed distances themselves.
    """
    genuine = np.asarray(genuine_distances, dtype=np.float64).ravel()
    impostor = np.asarray(impostor_distances, dtype=np.float64).ravel()
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("need at least one genuine and one impostor distance")
    if not 0.0 <= far_target <= 1.0:
        raise ValueError("far_target must lie in [0, 1]")
    candidates = np.unique(np.concatenate([genuine, impostor]))
    imp_sorted = np.sort(impostor)
    gen_sorted = np.sort(genuine)
    imp_counts = np.searchsorted(imp_sorted, candidates, side="right")
    gen_counts = np.searchsorted(gen_sorted, candidates, side="right")
    fars = imp_counts / impostor.size
    tars = gen_counts / genuine.size
    budget = math.floor(far_target * impostor.size + 1e-9)
    valid = np.nonzero(imp_counts <= budget)[0]
    roc = [(float(f), float(t)) for f, t in zip(fars, tars)]
    if valid.size == 0:
        return VerificationResult(tar=0.0, threshold=None, far_target=far_target, achieved_far=0.0, roc=roc)
    best = int(valid[-1])
    return VerificationResult(
        tar=float(tars[best]),
        threshold=float(candidates[best]),
        far_target=far_target,
        achieved_far=float(fars[best]),
        roc=roc,
    )


def relative_performance(occluded_acc: float, holistic_acc: float) -> float:
    """Occluded accuracy normalized by the holistic accuracy, same units."""
    if holistic_acc <= 0:
        raise ValueError("holistic accuracy must be positive")
    return occluded_acc / holistic_acc


def format_mean_std(mean: float, std: float) -> str:
    """Percent string in the reporting convention, e.g. '40.72 ± 1.14'."""
    return f"{mean * 100:.2f} ± {std * 100:.2f}"


def gait_embedder(model: torch.nn.Module):
    """Embeds (B, T, H, W) clips through a bare gait network; alpha is 0."""

    @torch.no_grad()
    def embed_many(clips: np.ndarray):
        model.eval()
        out = model(torch.from_numpy(np.ascontiguousarray(clips, dtype=np.float32)))
        return out.numpy(), np.zeros(len(clips))

    return embed_many


def bundle_embedder(bundle: InferenceBundle):
    def embed_many(clips: np.ndarray):
        out = bundle.embed_batch(clips)
        return out["f"], out["alpha"]

    return embed_many


def bundle_gait_embedder(bundle: InferenceBundle):
    def embed_many(clips: np.ndarray):
        return bundle.embed_gait_batch(clips), np.zeros(len(clips))

    return embed_many


def _entry_clips(store: SequenceStore, entries, frames_per_clip: int, specs=None) -> np.ndarray:
    clips = []
    for i, entry in enumerate(entries):
        clip = sample_frames(store.sequence(entry), frames_per_clip)
        if specs is not None:
            clip, _ = apply_occlusion(clip, specs[i])
        clips.append(clip.frames.astype(np.float32))
    return np.stack(clips)


def _records(embed_many, entries, clips: np.ndarray, specs=None, batch_size: int = 16) -> list[EmbeddingRecord]:
    records = []
    for start in range(0, len(entries), batch_size):
        chunk = clips[start:start + batch_size]
        vectors, alphas = embed_many(chunk)
        for j, entry in enumerate(entries[start:start + batch_size]):
            spec = specs[start + j] if specs is not None else None
            extra = {}
            if spec is not None:
                extra = {"kind": spec.kind.value, "level": spec.magnitude}
            records.append(
                EmbeddingRecord(
                    subject_id=entry.subject_id,
                    sequence_id=entry.sequence_id,
                    embedding=np.asarray(vectors[j], dtype=np.float64),
                    alpha=float(alphas[j]),
                    extra=extra,
                )
            )
    return records


def holistic_records(embed_many, store, entries, frames_per_clip: int) -> list[EmbeddingRecord]:
    return _records(embed_many, entries, _entry_clips(store, entries, frames_per_clip))


def draw_probe_specs(count: int, kinds, max_magnitude: float, rng_seed: int, hw) -> list[OcclusionSpec]:
    """One occlusion spec per probe, each from an independent derived seed."""
    allowed = {OcclusionKind(k) for k in kinds}
    specs = []
    for i in range(count):
        spec_seed = int(np.random.default_rng([rng_seed, i, _SALT_PROBE_SPEC]).integers(2**62))
        specs.append(sample_occlusion_spec(spec_seed, allowed, max_magnitude=max_magnitude, hw=hw))
    return specs


def occluded_records(
    embed_many, store, entries, frames_per_clip: int, kinds, max_magnitude: float, rng_seed: int, hw
) -> tuple[list[EmbeddingRecord], list[OcclusionSpec]]:
    specs = draw_probe_specs(len(entries), kinds, max_magnitude, rng_seed, hw)
    clips = _entry_clips(store, entries, frames_per_clip, specs)
    return _records(embed_many, entries, clips, specs), specs


def genuine_impostor_distances(result: RetrievalResult, gallery, probes) -> tuple[np.ndarray, np.ndarray]:
    """Split the probe-gallery distance matrix into genuine and impostor pairs."""
    if result.distances is None:
        raise ValueError("retrieval result was built without keep_distances")
    gsub = np.array([r.subject_id for r in gallery])
    psub = np.array([r.subject_id for r in probes])
    same = psub[:, None] == gsub[None, :]
    return result.distances[same], result.distances[~same]


@dataclass
class EvalReport:
    """One protocol's results: a JSON-safe payload plus a plain-text table."""

    protocol: str
    payload: dict
    table_rows: list[tuple[str, str]] = dataclasses.field(default_factory=list)

    def to_dict(self) -> dict:
        return _jsonable({"protocol": self.protocol, "results": self.payload})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def format_table(self) -> str:
        rows = self.table_rows or [(k, str(v)) for k, v in _flatten(self.payload)]
        width = max(len(k) for k, _ in rows) if rows else 0
        lines = [f"protocol: {self.protocol}", ""]
        lines += [f"{k.ljust(width)}  {v}" for k, v in rows]
        return "\n".join(lines) + "\n"

    def save(self, out_dir, basename: str) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{basename}.json"
        txt_path = out_dir / f"{basename}.txt"
        json_path.write_text(self.to_json())
        txt_path.write_text(self.format_table())
        return json_path, txt_path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def _flatten(d: dict, prefix: str = "") -> list[tuple[str, object]]:
    rows = []
    for key in sorted(d):
        value = d[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(_flatten(value, name + "."))
        else:
            rows.append((name, value))
    return rows


def _pct(x: float) -> str:
    return f"{x * 100:.2f}"


def _rank_rows(prefix: str, ranks: dict[int, float]) -> list[tuple[str, str]]:
    return [(f"{prefix}rank-{k}", _pct(v)) for k, v in sorted(ranks.items())]


def _rp_values(ranks: dict[int, float], holistic_metrics: dict | None) -> dict[str, float]:
    if not holistic_metrics:
        return {}
    rp = {}
    for k, acc in ranks.items():
        bound = holistic_metrics.get(f"holistic_rank{k}")
        if bound:
            rp[f"rank{k}"] = relative_performance(acc, bound)
    return rp


def _eval_entries(manifest: DatasetManifest, holdout_seqs: int) -> dict[str, list[ManifestEntry]]:
    _, held = split_train_holdout(manifest, holdout_seqs)
    return held


def occluded_eval(
    bundle,
    manifest,
    seed: int,
    kinds=DEFAULT_EVAL_KINDS,
    ks=DEFAULT_KS,
    holdout_seqs: int = 2,
    frames_per_clip: int = 30,
    far_target: float = 0.01,
    protocol_name: str = "occluded",
    store: SequenceStore | None = None,
    gallery_cache: dict | None = None,
) -> EvalReport:
    """Occluded probes against a holistic gallery, via the full pipeline.

    Reports rank-k retrieval, TAR@FAR verification over all probe-gallery
    pairs, and relative performance against the recorded holistic bound.
    """
    bundle = _ensure_bundle(bundle)
    manifest = _ensure_manifest(manifest)
    store = store or SequenceStore(manifest)
    held = _eval_entries(manifest, holdout_seqs)
    gallery_entries, probe_entries = balanced_split(held, seed)
    hw = (manifest.height, manifest.width)
    embed = bundle_embedder(bundle)

    gallery = _cached_holistic(embed, store, gallery_entries, frames_per_clip, gallery_cache)
    probes, specs = occluded_records(embed, store, probe_entries, frames_per_clip, kinds, bundle_max_magnitude(bundle), seed, hw)
    result = rank_retrieval(gallery, probes, ks=ks, keep_distances=True)
    genuine, impostor = genuine_impostor_distances(result, gallery, probes)
    verification = verification_tar_at_far(genuine, impostor, far_target)

    rp = _rp_values(result.ranks, bundle.meta.get("holistic_metrics"))
    payload = {
        "retrieval": {f"rank{k}": v for k, v in result.ranks.items()},
        "verification": {
            "tar": verification.tar,
            "far_target": verification.far_target,
            "achieved_far": verification.achieved_far,
            "threshold": verification.threshold,
            "roc": verification.roc,
        },
        "rp": rp,
        "holistic_upper_bound": bundle.holistic_upper_bound,
        "kinds": sorted(OcclusionKind(k).value for k in kinds),
        "seed": seed,
        "num_probes": result.num_probes,
        "num_gallery": result.num_gallery,
        "alpha_mean": float(np.mean([r.alpha for r in probes])),
    }
    rows = _rank_rows("", result.ranks)
    rows.append((f"tar@far={far_target:g}", _pct(verification.tar)))
    rows += [(f"rp.{k}", f"{v:.2f}") for k, v in sorted(rp.items())]
    rows.append(("mean alpha (probes)", f"{payload['alpha_mean']:.3f}"))
    return EvalReport(protocol=protocol_name, payload=payload, table_rows=rows)


def bundle_max_magnitude(bundle: InferenceBundle) -> float:
    return float(bundle.meta.get("arch", {}).get("max_magnitude", 0.6))


def _cached_holistic(embed, store, entries, frames_per_clip, cache: dict | None) -> list[EmbeddingRecord]:
    if cache is None:
        return holistic_records(embed, store, entries, frames_per_clip)
    missing = [e for e in entries if (e.subject_id, e.sequence_id) not in cache]
    if missing:
        for record, entry in zip(holistic_records(embed, store, missing, frames_per_clip), missing):
            cache[(entry.subject_id, entry.sequence_id)] = record
    return [cache[(e.subject_id, e.sequence_id)] for e in entries]


def hpr_eval(
    bundle,
    manifest,
    seed: int,
    ks=DEFAULT_KS,
    holdout_seqs: int = 2,
    frames_per_clip: int = 30,
    store: SequenceStore | None = None,
) -> EvalReport:
    """Holistic retention: the full pipeline on unoccluded data vs the upper bound."""
    bundle = _ensure_bundle(bundle)
    manifest = _ensure_manifest(manifest)
    store = store or SequenceStore(manifest)
    held = _eval_entries(manifest, holdout_seqs)
    gallery_entries, probe_entries = balanced_split(held, seed)
    embed = bundle_embedder(bundle)
    gallery = holistic_records(embed, store, gallery_entries, frames_per_clip)
    probes = holistic_records(embed, store, probe_entries, frames_per_clip)
    result = rank_retrieval(gallery, probes, ks=ks)
    upper = bundle.holistic_upper_bound
    delta = None if upper is None else result.ranks[1] - upper
    payload = {
        "retrieval": {f"rank{k}": v for k, v in result.ranks.items()},
        "holistic_upper_bound": upper,
        "hpr_delta": delta,
        "seed": seed,
        "alpha_mean": float(np.mean([r.alpha for r in probes])),
        "num_probes": result.num_probes,
    }
    rows = _rank_rows("", result.ranks)
    if upper is not None:
        rows.append(("upper bound rank-1", _pct(upper)))
        rows.append(("hpr delta (points)", f"{delta * 100:+.2f}"))
    rows.append(("mean alpha (probes)", f"{payload['alpha_mean']:.3f}"))
    return EvalReport(protocol="holistic", payload=payload, table_rows=rows)


def per_kind_eval(
    bundle: InferenceBundle,
    store: SequenceStore,
    gallery_entries,
    probe_entries,
    kinds,
    seed: int,
    frames_per_clip: int,
    hw,
    ks=(1, 5),
    with_baseline: bool = True,
) -> dict[str, dict]:
    """Occluded retrieval restricted to one kind at a time, on shared clips.

    The baseline view embeds the identical occluded clips through the gait
    network alone.
    """
    embed_full = bundle_embedder(bundle)
    embed_base = bundle_gait_embedder(bundle)
    gallery_full = holistic_records(embed_full, store, gallery_entries, frames_per_clip)
    gallery_base = holistic_records(embed_base, store, gallery_entries, frames_per_clip) if with_baseline else None
    out: dict[str, dict] = {}
    for j, kind in enumerate(sorted(OcclusionKind(k).value for k in kinds)):
        specs = draw_probe_specs(len(probe_entries), (kind,), bundle_max_magnitude(bundle), seed + j + 1, hw)
        clips = _entry_clips(store, probe_entries, frames_per_clip, specs)
        probes_full = _records(embed_full, probe_entries, clips, specs)
        result = rank_retrieval(gallery_full, probes_full, ks=ks)
        entry = {f"rank{k}": v for k, v in result.ranks.items()}
        entry["alpha_mean"] = float(np.mean([r.alpha for r in probes_full]))
        if with_baseline:
            probes_base = _records(embed_base, probe_entries, clips, specs)
            base = rank_retrieval(gallery_base, probes_base, ks=ks)
            entry.update({f"baseline_rank{k}": v for k, v in base.ranks.items()})
        out[kind] = entry
    return out


def generalizability_eval(
    bundle,
    manifest,
    seed: int,
    eval_kinds=("middle", "moving"),
    expected_training_kinds=("bottom", "top"),
    holdout_seqs: int = 2,
    frames_per_clip: int = 30,
    store: SequenceStore | None = None,
) -> EvalReport:
    """Zero-shot occluded retrieval on kinds the restoration stage never saw."""
    bundle = _ensure_bundle(bundle)
    manifest = _ensure_manifest(manifest)
    trained = sorted(bundle.trained_kinds)
    if trained != sorted(expected_training_kinds):
        raise ProvenanceError(
            f"checkpoint was trained on kinds {trained}, protocol requires exactly {sorted(expected_training_kinds)}"
        )
    overlap = set(trained) & {OcclusionKind(k).value for k in eval_kinds}
    if overlap:
        raise ProvenanceError(f"evaluation kinds {sorted(overlap)} were seen in training; not zero-shot")
    store = store or SequenceStore(manifest)
    held = _eval_entries(manifest, holdout_seqs)
    gallery_entries, probe_entries = balanced_split(held, seed)
    hw = (manifest.height, manifest.width)
    per_kind = per_kind_eval(bundle, store, gallery_entries, probe_entries, eval_kinds, seed, frames_per_clip, hw)
    payload = {
        "per_kind": per_kind,
        "trained_kinds": trained,
        "seed": seed,
        "num_probes": len(probe_entries),
    }
    rows = []
    for kind, entry in sorted(per_kind.items()):
        rows.append((f"{kind}.rank-1", _pct(entry["rank1"])))
        rows.append((f"{kind}.baseline rank-1", _pct(entry["baseline_rank1"])))
    return EvalReport(protocol="generalize", payload=payload, table_rows=rows)


def adaptability_eval(
    bundle_path,
    manifest,
    finetune_config,
    out_dir,
    seed: int,
    eval_kinds=("middle", "moving"),
    holdout_seqs: int = 2,
    frames_per_clip: int = 30,
    store: SequenceStore | None = None,
) -> EvalReport:
    """Fine-tune the restoration network on new kinds, then evaluate on them.

    finetune_config.kinds names the new kinds. The zero-shot numbers of the
    original bundle on the same split are reported alongside; adapted falling
    below zero-shot is logged as a warning, not a failure.
    """
    from .training import adapt_residual

    manifest = _ensure_manifest(manifest)
    store = store or SequenceStore(manifest)
    held = _eval_entries(manifest, holdout_seqs)
    gallery_entries, probe_entries = balanced_split(held, seed)
    hw = (manifest.height, manifest.width)

    original = InferenceBundle.load(bundle_path)
    zero_shot = per_kind_eval(
        original, store, gallery_entries, probe_entries, eval_kinds, seed, frames_per_clip, hw, with_baseline=False
    )
    artifacts = adapt_residual(manifest, finetune_config, out_dir, bundle_path, store=store)
    adapted = InferenceBundle.load(artifacts.checkpoint_path)
    per_kind = per_kind_eval(
        adapted, store, gallery_entries, probe_entries, eval_kinds, seed, frames_per_clip, hw, with_baseline=False
    )
    for kind, entry in per_kind.items():
        entry["zero_shot_rank1"] = zero_shot[kind]["rank1"]
        if entry["rank1"] < entry["zero_shot_rank1"]:
            warnings.warn(
                f"adapted rank-1 on {kind} ({entry['rank1']:.3f}) fell below zero-shot "
                f"({entry['zero_shot_rank1']:.3f})",
                stacklevel=2,
            )
    payload = {
        "per_kind": per_kind,
        "finetune_iterations": finetune_config.iterations,
        "finetune_kinds": sorted(finetune_config.kinds),
        "seed": seed,
        "num_probes": len(probe_entries),
    }
    rows = []
    for kind, entry in sorted(per_kind.items()):
        rows.append((f"{kind}.rank-1 (adapted)", _pct(entry["rank1"])))
        rows.append((f"{kind}.rank-1 (zero-shot)", _pct(entry["zero_shot_rank1"])))
    return EvalReport(protocol="adapt", payload=payload, table_rows=rows)


def derive_seeds(base_seed: int, count: int) -> list[int]:
    rng = np.random.default_rng([base_seed, _SALT_SEED_DERIVE])
    return [int(v) for v in rng.integers(2**62, size=count)]


def multi_seed_eval(
    bundle,
    manifest,
    seeds,
    kinds=DEFAULT_EVAL_KINDS,
    holdout_seqs: int = 2,
    frames_per_clip: int = 30,
    store: SequenceStore | None = None,
) -> EvalReport:
    """Repeat the occluded protocol per seed; report mean ± sample std of Rank-1."""
    bundle = _ensure_bundle(bundle)
    manifest = _ensure_manifest(manifest)
    store = store or SequenceStore(manifest)
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("multi-seed evaluation needs at least two seeds")
    cache: dict = {}
    per_seed = {}
    for s in seeds:
        report = occluded_eval(
            bundle, manifest, s, kinds=kinds, ks=(1,), holdout_seqs=holdout_seqs,
            frames_per_clip=frames_per_clip, store=store, gallery_cache=cache,
        )
        per_seed[s] = report.payload["retrieval"]["rank1"]
    values = np.array([per_seed[s] for s in seeds], dtype=np.float64)
    mean = float(values.mean())
    std = float(values.std(ddof=1))
    formatted = format_mean_std(mean, std)
    payload = {
        "per_seed": {str(s): per_seed[s] for s in seeds},
        "seeds": seeds,
        "mean": mean,
        "std": std,
        "std_over_mean": std / mean if mean > 0 else None,
        "formatted": formatted,
        "kinds": sorted(OcclusionKind(k).value for k in kinds),
    }
    rows = [("rank-1 over seeds", formatted), ("seeds", str(len(seeds)))]
    if mean > 0:
        rows.append(("std / mean", f"{std / mean:.4f}"))
    return EvalReport(protocol="multi-seed", payload=payload, table_rows=rows)


def save_roc_plot(roc_points, chosen, path) -> Path:
    """Step plot of (FAR, TAR) candidates with the chosen operating point marked."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fars = [p[0] for p in roc_points]
    tars = [p[1] for p in roc_points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(fars, tars, where="post")
    if chosen is not None:
        ax.plot([chosen[0]], [chosen[1]], marker="o", color="crimson")
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("true accept rate")
    ax.set_xscale("symlog", linthresh=1e-3)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "resgait"})
    plt.close(fig)
    return path


def save_retention_plot(values: dict[str, float], upper_bound: float | None, path) -> Path:
    """Bar chart of holistic Rank-1 per method against the upper bound line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(values)
    heights = [values[n] * 100 for n in names]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(names, heights, color="#4878a8")
    if upper_bound is not None:
        ax.axhline(upper_bound * 100, color="crimson", linestyle="--", label="holistic upper bound")
        ax.legend()
    ax.set_ylabel("holistic rank-1 (%)")
    ax.set_ylim(0, 102)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "resgait"})
    plt.close(fig)
    return path
