"""Batch assembly, triplet loss, stage configs, and the three training stages."""

import math

import numpy as np
import pytest
import torch

from helpers import sampled_fd_check
from resgait.backbone import BnneckHead, GaitBackbone, ResidualBackbone
from resgait.checkpoint import load_checkpoint, read_meta
from resgait.oem import OcclusionEvaluator
from resgait.training import (
    ALL_OCCLUSION_KINDS,
    Stage1Config,
    Stage2Config,
    Stage3Config,
    config_from_dict,
    make_pk_batch,
    train_stage1,
    train_stage3,
    adapt_residual,
    triplet_loss,
)


def test_triplet_hand_oracle():
    # 1-D embeddings: subjects A at {0, 1}, B at {2, 3}. Batch-hard per anchor:
    # anchors 0 and 3 have pos 1 / neg 2 (hinge 0), anchors 1 and 2 have
    # pos 1 / neg 1 (hinge 0.2); mean = 0.1.
    emb = torch.tensor([[0.0], [1.0], [2.0], [3.0]])
    labels = torch.tensor([0, 0, 1, 1])
    assert triplet_loss(emb, labels, margin=0.2).item() == pytest.approx(0.1, abs=1e-7)


def test_triplet_collapsed_embeddings_cost_the_margin():
    emb = torch.ones(6, 4)
    labels = torch.tensor([0, 0, 0, 1, 1, 1])
    assert triplet_loss(emb, labels, margin=0.2).item() == pytest.approx(0.2, abs=1e-6)


def test_triplet_separated_clusters_cost_nothing():
    emb = torch.tensor([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]])
    labels = torch.tensor([0, 0, 1, 1])
    assert triplet_loss(emb, labels, margin=0.2).item() == 0.0


def test_triplet_matches_brute_force():
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(12, 5))
    labels = np.repeat(np.arange(4), 3)

    per_anchor = []
    for i in range(len(emb)):
        dists = np.linalg.norm(emb - emb[i], axis=1)
        pos = max(dists[j] for j in range(len(emb)) if labels[j] == labels[i] and j != i)
        neg = min(dists[j] for j in range(len(emb)) if labels[j] != labels[i])
        per_anchor.append(max(0.0, pos - neg + 0.2))
    expected = float(np.mean(per_anchor))

    got = triplet_loss(torch.from_numpy(emb), torch.from_numpy(labels), margin=0.2)
    assert got.item() == pytest.approx(expected, rel=1e-5)


def test_triplet_rejects_degenerate_batches():
    with pytest.raises(ValueError, match="two subjects"):
        triplet_loss(torch.randn(4, 3), torch.tensor([0, 0, 0, 0]))
    with pytest.raises(ValueError, match="two clips"):
        triplet_loss(torch.randn(3, 3), torch.tensor([0, 0, 1]))


def test_make_pk_batch_composition(tiny_manifest, tiny_store):
    batch = make_pk_batch(tiny_manifest, p=3, k=2, rng_seed=5, frames_per_clip=6, store=tiny_store)
    assert batch.clips.shape == (6, 6, 64, 64)
    counts = {}
    for s in batch.subject_ids:
        counts[s] = counts.get(s, 0) + 1
    assert len(counts) == 3
    assert all(c == 2 for c in counts.values())
    assert (batch.class_indices == 0).all()  # no occlusion requested
    assert (batch.levels == 0.0).all()


def test_make_pk_batch_is_deterministic(tiny_manifest, tiny_store):
    a = make_pk_batch(tiny_manifest, 2, 2, rng_seed=9, frames_per_clip=5, store=tiny_store)
    b = make_pk_batch(tiny_manifest, 2, 2, rng_seed=9, frames_per_clip=5, store=tiny_store)
    assert np.array_equal(a.clips, b.clips)
    assert a.subject_ids == b.subject_ids
    c = make_pk_batch(tiny_manifest, 2, 2, rng_seed=10, frames_per_clip=5, store=tiny_store)
    assert not np.array_equal(a.clips, c.clips)


def test_make_pk_batch_resamples_short_subjects(tiny_manifest, tiny_store):
    batch = make_pk_batch(tiny_manifest, p=2, k=6, rng_seed=1, frames_per_clip=4, store=tiny_store)
    for subject in set(batch.subject_ids):
        seqs = [e.sequence_id for e in batch.entries if e.subject_id == subject]
        assert len(seqs) == 6
        assert len(set(seqs)) <= 4  # only 4 sequences exist, so some repeat


def test_make_pk_batch_rejects_oversized_p(tiny_manifest, tiny_store):
    with pytest.raises(ValueError, match="subjects"):
        make_pk_batch(tiny_manifest, p=5, k=2, rng_seed=0, store=tiny_store)


def test_make_pk_batch_occlusion_mix(tiny_manifest, tiny_store):
    classes = []
    for seed in range(25):
        batch = make_pk_batch(
            tiny_manifest, 2, 2, rng_seed=seed, frames_per_clip=4, store=tiny_store,
            kinds=ALL_OCCLUSION_KINDS, none_prob=0.2,
        )
        classes.extend(batch.class_indices.tolist())
    classes = np.asarray(classes)
    none_frac = (classes == 0).mean()
    assert 0.05 < none_frac < 0.45  # none_prob=0.2 with sampling noise
    assert set(classes.tolist()) == {0, 1, 2, 3, 4}


def test_milestones_follow_the_half_and_three_quarter_rule():
    cfg = Stage2Config(iterations=250)
    assert cfg.milestones == [125, 188]
    cfg = Stage1Config(iterations=7)
    assert cfg.milestones == [math.ceil(3.5), math.ceil(5.25)]


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict(Stage1Config, {"iterations": 5, "turbo": True})


def test_config_from_dict_converts_kinds():
    cfg = config_from_dict(Stage3Config, {"kinds": ["top", "bottom"]})
    assert cfg.kinds == ("top", "bottom")


def test_configs_validate_inputs():
    with pytest.raises(ValueError):
        Stage1Config(iterations=-1)
    with pytest.raises(ValueError):
        Stage2Config(p=1)
    with pytest.raises(ValueError):
        Stage3Config(kinds=("sideways",))
    with pytest.raises(ValueError):
        Stage1Config(none_prob=1.5)
    with pytest.raises(ValueError):
        Stage2Config(optimizer="adagrad")
    assert Stage2Config(optimizer="adam").optimizer == "adam"


def test_stage1_is_reproducible(tmp_path, tiny_manifest, tiny_store):
    cfg = Stage1Config(iterations=3, batch_clips=4, frames_per_clip=4)
    a = train_stage1(tiny_manifest, cfg, tmp_path / "a", store=tiny_store)
    b = train_stage1(tiny_manifest, cfg, tmp_path / "b", store=tiny_store)
    assert a.file_hash == b.file_hash
    assert a.metrics == b.metrics


def test_stage1_artifacts(micro_run, micro_configs):
    art = micro_run["stage1"]
    assert art.checkpoint_path.name == "oem.ckpt"
    assert art.log_path.exists()
    assert len(art.history) == micro_configs["stage1"].iterations
    assert set(art.metrics) == {"type_accuracy", "level_mae", "clips"}
    meta = read_meta(art.checkpoint_path)
    assert meta["stage"] == 1
    assert meta["checksums"]["oem"] == art.checksums["oem"]


def test_stage2_artifacts(micro_run):
    art = micro_run["stage2"]
    assert art.checkpoint_path.name == "gait.ckpt"
    meta = read_meta(art.checkpoint_path)
    assert meta["stage"] == 2
    assert meta["holistic_upper_bound"] == art.metrics["holistic_rank1"]
    assert 0.0 <= art.metrics["holistic_rank1"] <= 1.0


def test_stage3_freezes_oem_and_gait(micro_run):
    meta = read_meta(micro_run["stage3"].checkpoint_path)
    assert meta["frozen_checksums"]["oem"] == micro_run["stage1"].checksums["oem"]
    assert meta["frozen_checksums"]["gait"] == micro_run["stage2"].checksums["gait"]
    assert meta["stage3_kinds"] == ["bottom", "middle", "moving", "top"]


def test_stage3_requires_prerequisites(tmp_path, tiny_manifest, micro_configs):
    with pytest.raises(FileNotFoundError):
        train_stage3(
            tiny_manifest, micro_configs["stage3"], tmp_path,
            oem_path=tmp_path / "missing_oem.ckpt",
            gait_path=tmp_path / "missing_gait.ckpt",
        )


def test_adapt_keeps_frozen_parts_and_tunes_residual(tmp_path, tiny_manifest, tiny_store, micro_run):
    bundle_path = micro_run["stage3"].checkpoint_path
    before = load_checkpoint(bundle_path)
    cfg = Stage3Config(iterations=2, p=2, k=2, frames_per_clip=4, kinds=("middle",), oem_frame_stride=2)
    art = adapt_residual(tiny_manifest, cfg, tmp_path, bundle_path, store=tiny_store)
    after = load_checkpoint(art.checkpoint_path)
    assert after.checksum("oem") == before.checksum("oem")
    assert after.checksum("gait") == before.checksum("gait")
    assert after.checksum("residual") != before.checksum("residual")
    assert after.meta["adapted_kinds"] == ["middle"]
    assert after.meta["stage3_kinds"] == before.meta["stage3_kinds"]


def test_zero_iteration_adapt_is_an_exact_no_op(tmp_path, tiny_manifest, tiny_store, micro_run):
    bundle_path = micro_run["stage3"].checkpoint_path
    before = load_checkpoint(bundle_path)
    cfg = Stage3Config(iterations=0, p=2, k=2, frames_per_clip=4, kinds=("middle",))
    art = adapt_residual(tiny_manifest, cfg, tmp_path, bundle_path, store=tiny_store)
    after = load_checkpoint(art.checkpoint_path)
    for name in ("oem", "gait", "residual", "head"):
        assert after.checksum(name) == before.checksum(name)


def test_restoration_loss_gradients_match_finite_differences():
    torch.manual_seed(7)
    hw = (16, 16)
    oem = OcclusionEvaluator(input_hw=hw).double()
    gait = GaitBackbone(input_hw=hw, embed_dim=8).double()
    frn = ResidualBackbone(input_hw=hw, embed_dim=8).double()
    head = BnneckHead(8, num_classes=2).double()
    for module in (oem, gait):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)

    rng = np.random.default_rng(8)
    clips = torch.from_numpy(rng.integers(0, 2, size=(4, 2, *hw)).astype(np.float64))
    labels = torch.tensor([0, 0, 1, 1])

    def loss_fn():
        with torch.no_grad():
            o, _, raw = oem(clips)
            alphas = oem.alphas(raw)
            g = gait(clips)
        r = frn(clips, o)
        f = g + alphas.unsqueeze(1) * r
        return triplet_loss(f, labels, 0.2) + torch.nn.functional.cross_entropy(head(f), labels)

    params = list(frn.parameters()) + [p for p in head.parameters() if p.requires_grad]
    err = sampled_fd_check(loss_fn, params, samples_per_tensor=6, seed=9)
    assert err < 1e-4
