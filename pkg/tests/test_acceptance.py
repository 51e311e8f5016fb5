"""Acceptance gate: eleven numbered criteria, one printed verdict line each.

The expensive artifacts (50-identity dataset, the three training stages, the
restricted-kind training variant) are session fixtures shared across
criteria. Every criterion asserts its quality targets and its wall-clock
budget; verdict lines bypass capture so the gate is readable straight off a
plain ``pytest -v`` run.

Budgets are enforced as measured here, single CPU core, no accelerator.
"""

import json
import math
import os
import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from helpers import sampled_fd_check
from resgait.backbone import (
    BnneckHead,
    EmbeddingRecord,
    GaitBackbone,
    InferenceBundle,
    ResidualBackbone,
    integrate,
)
from resgait.data import SequenceStore, generate_synthetic_dataset, sample_frames
from resgait.evaluation import (
    adaptability_eval,
    derive_seeds,
    generalizability_eval,
    hpr_eval,
    multi_seed_eval,
    occluded_eval,
    rank_retrieval,
    relative_performance,
)
from resgait.oem import OcclusionEvaluator, oem_batch_loss
from resgait.training import (
    Stage1Config,
    Stage2Config,
    Stage3Config,
    train_stage1,
    train_stage2,
    train_stage3,
    triplet_loss,
)


def _verdict(capsys, num: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {num:02d}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num}: {detail}"


# --- session fixtures -------------------------------------------------------

@pytest.fixture(scope="session")
def accept_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def dataset50(accept_dir):
    manifest = generate_synthetic_dataset(50, 6, 60, 1, accept_dir / "data")
    return manifest


@pytest.fixture(scope="session")
def store50(dataset50):
    return SequenceStore(dataset50)


@pytest.fixture(scope="session")
def stage1(dataset50, store50, accept_dir):
    t0 = time.perf_counter()
    art = train_stage1(dataset50, Stage1Config(), accept_dir / "run", store=store50)
    return art, time.perf_counter() - t0


@pytest.fixture(scope="session")
def stage2(dataset50, store50, accept_dir):
    t0 = time.perf_counter()
    art = train_stage2(dataset50, Stage2Config(), accept_dir / "run", store=store50)
    return art, time.perf_counter() - t0


@pytest.fixture(scope="session")
def stage3_all(dataset50, store50, accept_dir, stage1, stage2):
    t0 = time.perf_counter()
    art = train_stage3(
        dataset50, Stage3Config(), accept_dir / "run",
        stage1[0].checkpoint_path, stage2[0].checkpoint_path, store=store50,
    )
    return art, time.perf_counter() - t0


@pytest.fixture(scope="session")
def stage3_topbottom(dataset50, store50, accept_dir, stage1, stage2):
    t0 = time.perf_counter()
    art = train_stage3(
        dataset50, Stage3Config(kinds=("top", "bottom")), accept_dir / "run_tb",
        stage1[0].checkpoint_path, stage2[0].checkpoint_path, store=store50,
    )
    return art, time.perf_counter() - t0


@pytest.fixture(scope="session")
def bundle_all(stage3_all):
    return InferenceBundle.load(stage3_all[0].checkpoint_path)


# --- 1: metric-formula reproduction -----------------------------------------

# Occluded accuracy and parenthesized RP, per published column.
RANK1_COLUMN = [(7.6, 0.11), (17.12, 0.24), (18.22, 0.26), (22.72, 0.32), (40.84, 0.58)]
RANK5_COLUMN = [(15.71, 0.19), (31.43, 0.37), (34.94, 0.41), (40.84, 0.48), (57.25, 0.68)]


def _common_denominator(column) -> tuple[float, float]:
    """Grid-search the holistic accuracy that reproduces every RP in a column."""
    accs = np.array([a for a, _ in column])
    rps = np.array([r for _, r in column])
    grid = np.arange(30.0, 120.0, 0.01)
    errs = np.abs(accs[:, None] / grid[None, :] - rps[:, None]).max(axis=0)
    best = int(np.argmin(errs))
    return float(grid[best]), float(errs[best])


def test_c01_relative_performance_reproduces_published_column(capsys):
    t0 = time.perf_counter()
    details = []
    ok = True
    for name, column in (("rank1", RANK1_COLUMN), ("rank5", RANK5_COLUMN)):
        denom, _ = _common_denominator(column)
        worst = max(abs(relative_performance(acc, denom) - rp) for acc, rp in column)
        ok = ok and worst <= 0.01 + 1e-12
        details.append(f"{name}: denom {denom:.2f}, max err {worst:.4f}")
    wall = time.perf_counter() - t0
    ok = ok and wall < 1.0
    _verdict(capsys, 1, ok, f"{'; '.join(details)}; wall {wall:.3f}s (< 1s)")


# --- 2: retrieval oracle equivalence ----------------------------------------

def _euclid(a, b) -> float:
    acc = 0.0
    for x, y in zip(a, b):
        acc += (x - y) ** 2
    return math.sqrt(acc)


def _brute_force_hits(gal_vecs, gal_subj, probe_vecs, probe_subj, ks):
    hits = {k: [] for k in ks}
    for v, subj in zip(probe_vecs, probe_subj):
        d = [(_euclid(v, g), i) for i, g in enumerate(gal_vecs)]
        order = [i for _, i in sorted(d, key=lambda t: (t[0], t[1]))]
        for k in ks:
            hits[k].append(any(gal_subj[i] == subj for i in order[:k]))
    return {k: float(np.mean(v)) for k, v in hits.items()}


def test_c02_rank_retrieval_matches_brute_force_on_1000_instances(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(12345)
    ks = (1, 5, 20)
    mismatches = 0
    for _ in range(1000):
        n_subj = int(rng.integers(2, 21))
        n_gal = int(rng.integers(n_subj, 101))
        n_probe = int(rng.integers(1, 31))
        dim = int(rng.integers(1, 9))
        gal_subj = [f"s{i}" for i in range(n_subj)] + [f"s{rng.integers(n_subj)}" for _ in range(n_gal - n_subj)]
        probe_subj = [f"s{rng.integers(n_subj)}" for _ in range(n_probe)]
        gal_vecs = rng.normal(size=(n_gal, dim))
        probe_vecs = rng.normal(size=(n_probe, dim))
        gallery = [EmbeddingRecord(s, f"g{i}", v.astype(np.float32)) for i, (v, s) in enumerate(zip(gal_vecs, gal_subj))]
        probes = [EmbeddingRecord(s, f"p{i}", v.astype(np.float32)) for i, (v, s) in enumerate(zip(probe_vecs, probe_subj))]
        got = rank_retrieval(gallery, probes, ks=ks).ranks
        want = _brute_force_hits(
            [g.embedding.astype(np.float64) for g in gallery], gal_subj,
            [p.embedding.astype(np.float64) for p in probes], probe_subj, ks,
        )
        if any(got[k] != want[k] for k in ks):
            mismatches += 1
    wall = time.perf_counter() - t0
    ok = mismatches == 0 and wall < 30.0
    _verdict(capsys, 2, ok, f"1000 instances, {mismatches} mismatches; wall {wall:.1f}s (< 30s)")


# --- 3: gradient correctness -------------------------------------------------

def test_c03_analytic_gradients_match_finite_differences(capsys):
    t0 = time.perf_counter()
    hw = (16, 16)
    rng = np.random.default_rng(8)

    torch.manual_seed(2)
    oem = OcclusionEvaluator(input_hw=hw).double()
    clips = torch.from_numpy(rng.integers(0, 2, size=(3, 2, *hw)).astype(np.float64))
    classes = torch.tensor([1, 0, 3])
    levels = torch.tensor([0.4, 0.0, 0.25], dtype=torch.float64)

    def oam_loss():
        _, logits, raw = oem(clips)
        total, _, _ = oem_batch_loss(logits, raw, classes, levels, lambda1=0.1, lambda2=1.0)
        return total

    err_oam = sampled_fd_check(oam_loss, list(oem.parameters()), samples_per_tensor=8, seed=4)

    torch.manual_seed(3)
    emb = torch.from_numpy(rng.normal(size=(8, 4))).requires_grad_(True)
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
    err_tri = sampled_fd_check(lambda: triplet_loss(emb, labels, 0.2), [emb], samples_per_tensor=20, seed=5)

    torch.manual_seed(7)
    oem2 = OcclusionEvaluator(input_hw=hw).double()
    gait = GaitBackbone(input_hw=hw, embed_dim=8).double()
    frn = ResidualBackbone(input_hw=hw, embed_dim=8).double()
    head = BnneckHead(8, num_classes=2).double()
    for module in (oem2, gait):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
    clips2 = torch.from_numpy(rng.integers(0, 2, size=(4, 2, *hw)).astype(np.float64))
    labels2 = torch.tensor([0, 0, 1, 1])

    def frn_loss():
        with torch.no_grad():
            o, _, raw = oem2(clips2)
            alphas = oem2.alphas(raw)
            g = gait(clips2)
        r = frn(clips2, o)
        f = g + alphas.unsqueeze(1) * r
        return triplet_loss(f, labels2, 0.2) + torch.nn.functional.cross_entropy(head(f), labels2)

    params = list(frn.parameters()) + [p for p in head.parameters() if p.requires_grad]
    err_frn = sampled_fd_check(frn_loss, params, samples_per_tensor=6, seed=9)

    wall = time.perf_counter() - t0
    ok = max(err_oam, err_tri, err_frn) < 1e-4 and wall < 120.0
    _verdict(
        capsys, 3, ok,
        f"rel err: evaluator loss {err_oam:.2e}, triplet {err_tri:.2e}, "
        f"restoration loss {err_frn:.2e} (all < 1e-4); wall {wall:.1f}s (< 2min)",
    )


# --- 4: stage-1 quality -------------------------------------------------------

def test_c04_stage1_heldout_quality(capsys, stage1):
    art, wall = stage1
    acc = art.metrics["type_accuracy"]
    mae = art.metrics["level_mae"]
    ok = acc >= 0.95 and mae <= 0.05 and wall < 600.0
    _verdict(
        capsys, 4, ok,
        f"type accuracy {acc:.3f} (>= 0.95), level MAE {mae:.4f} (<= 0.05); "
        f"wall {wall:.0f}s (< 10min)",
    )


# --- 5: stage-2 upper bound ---------------------------------------------------

def test_c05_stage2_holistic_upper_bound(capsys, stage2):
    art, wall = stage2
    rank1 = art.metrics["holistic_rank1"]
    ok = rank1 >= 0.90 and wall < 1200.0
    _verdict(capsys, 5, ok, f"holistic rank-1 {rank1:.3f} (>= 0.90); wall {wall:.0f}s (< 20min)")


# --- 6: occlusion recovery ordering -------------------------------------------

def test_c06_occluded_recovery_beats_frozen_baseline(capsys, dataset50, store50, stage2, stage3_all, bundle_all):
    t0 = time.perf_counter()
    baseline = InferenceBundle.load(stage2[0].checkpoint_path)
    full_rank1 = occluded_eval(bundle_all, dataset50, seed=11, store=store50).payload["retrieval"]["rank1"]
    base_rank1 = occluded_eval(baseline, dataset50, seed=11, store=store50).payload["retrieval"]["rank1"]
    eval_wall = time.perf_counter() - t0
    wall = stage3_all[1] + eval_wall
    margin = (full_rank1 - base_rank1) * 100
    ok = margin >= 10.0 and wall < 1800.0
    _verdict(
        capsys, 6, ok,
        f"occluded rank-1 {full_rank1 * 100:.2f} vs frozen-backbone {base_rank1 * 100:.2f}, "
        f"margin {margin:+.2f} points (>= 10); stage-3 {stage3_all[1]:.0f}s + eval {eval_wall:.0f}s (< 30min)",
    )


# --- 7: holistic retention ----------------------------------------------------

def test_c07_holistic_retention_and_alpha_zero_bitwise(capsys, dataset50, store50, bundle_all):
    t0 = time.perf_counter()
    # Same split seed as the stage-2 upper-bound evaluation, so the delta
    # isolates the model change rather than gallery/probe reassignment.
    report = hpr_eval(bundle_all, dataset50, seed=97, store=store50)
    delta = report.payload["hpr_delta"]

    entries = [e for e in dataset50.entries][:100]
    assert len(entries) == 100
    exact = 0
    for entry in entries:
        clip = sample_frames(store50.sequence(entry), 12).frames.astype(np.float32)
        with torch.no_grad():
            batch = torch.from_numpy(clip).unsqueeze(0)
            g = bundle_all.gait(batch).numpy()[0]
            o, _, _ = bundle_all.oem(batch)
            r = bundle_all.residual(batch, o).numpy()[0]
        f = integrate(g, r, 0.0)
        exact += int(f.tobytes() == g.tobytes())
    wall = time.perf_counter() - t0
    ok = delta >= -0.02 and exact == 100 and wall < 300.0
    _verdict(
        capsys, 7, ok,
        f"holistic rank-1 delta vs upper bound {delta * 100:+.2f} points (>= -2); "
        f"f == G bitwise at alpha=0 on {exact}/100 clips; wall {wall:.0f}s (< 5min)",
    )


# --- 8: freezing contract ------------------------------------------------------

def test_c08_frozen_checksums_identical_across_stage3_runs(capsys, stage1, stage2, stage3_all, stage3_topbottom):
    oem_sum = stage1[0].checksums["oem"]
    gait_sum = stage2[0].checksums["gait"]
    ok = True
    details = []
    for name, (art, _) in (("all-kinds", stage3_all), ("top/bottom", stage3_topbottom)):
        frozen = art.checksums
        same = frozen["oem"] == oem_sum and frozen["gait"] == gait_sum
        ok = ok and same
        details.append(f"{name}: {'unchanged' if same else 'MUTATED'}")
    _verdict(capsys, 8, ok, f"evaluator+backbone checksums after stage 3 ({'; '.join(details)})")


# --- 9: generalizability / adaptability ----------------------------------------

def test_c09_zero_shot_and_adaptation_ordering(capsys, dataset50, store50, accept_dir, stage3_topbottom):
    t0 = time.perf_counter()
    bundle_tb = InferenceBundle.load(stage3_topbottom[0].checkpoint_path)
    gen = generalizability_eval(bundle_tb, dataset50, seed=17, store=store50)
    finetune = Stage3Config(kinds=("middle", "moving"), iterations=60, seed=19)
    adapt = adaptability_eval(
        stage3_topbottom[0].checkpoint_path, dataset50, finetune, accept_dir / "run_adapt",
        seed=17, store=store50,
    )
    eval_wall = time.perf_counter() - t0
    wall = stage3_topbottom[1] + eval_wall

    details = []
    ok = wall < 1800.0
    for kind in ("middle", "moving"):
        g = gen.payload["per_kind"][kind]
        a = adapt.payload["per_kind"][kind]
        zero_beats_base = g["rank1"] > g["baseline_rank1"]
        adapted_holds = a["rank1"] >= a["zero_shot_rank1"]
        ok = ok and zero_beats_base and adapted_holds
        details.append(
            f"{kind}: zero-shot {g['rank1'] * 100:.1f} vs baseline {g['baseline_rank1'] * 100:.1f}, "
            f"adapted {a['rank1'] * 100:.1f}"
        )
    _verdict(
        capsys, 9, ok,
        f"{'; '.join(details)}; top/bottom stage-3 {stage3_topbottom[1]:.0f}s + evals {eval_wall:.0f}s (< 30min)",
    )


# --- 10: multi-seed stability ----------------------------------------------------

def test_c10_multi_seed_stability(capsys, dataset50, store50, bundle_all):
    t0 = time.perf_counter()
    report = multi_seed_eval(bundle_all, dataset50, derive_seeds(0, 10), store=store50)
    wall = time.perf_counter() - t0
    ratio = report.payload["std_over_mean"]
    formatted = report.payload["formatted"]
    ok = (
        ratio is not None and ratio <= 0.10
        and re.fullmatch(r"\d+\.\d{2} ± \d+\.\d{2}", formatted) is not None
        and wall < 900.0
    )
    ratio_str = "n/a" if ratio is None else f"{ratio:.4f}"
    _verdict(
        capsys, 10, ok,
        f"10-seed rank-1 {formatted}, std/mean {ratio_str} (<= 0.10); wall {wall:.0f}s (< 15min)",
    )


# --- 11: end-to-end determinism ---------------------------------------------------

_PIPELINE_CONFIGS = {
    "cfg1.json": {"iterations": 6, "batch_clips": 6, "frames_per_clip": 5},
    "cfg2.json": {"iterations": 6, "p": 3, "k": 2, "frames_per_clip": 8},
    "cfg3.json": {"iterations": 5, "p": 3, "k": 2, "frames_per_clip": 8, "oem_frame_stride": 2},
}


def _cli(*args) -> None:
    env = {k: v for k, v in os.environ.items() if k != "RG_GAIT_SEED"}
    proc = subprocess.run(
        [sys.executable, "-m", "resgait.cli", *args],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0, f"resgait {' '.join(args)}\n{proc.stdout}{proc.stderr}"


def _run_pipeline(root: Path) -> None:
    data, run, rep = root / "data", root / "run", root / "rep"
    for name, cfg in _PIPELINE_CONFIGS.items():
        (root / name).write_text(json.dumps(cfg))
    _cli("gen-data", "--subjects", "6", "--seqs", "4", "--frames", "18", "--seed", "5", "--out", str(data))
    for stage, cfg in (("1", "cfg1.json"), ("2", "cfg2.json"), ("3", "cfg3.json")):
        _cli("train", "--stage", stage, "--data", str(data), "--out", str(run), "--config", str(root / cfg))
    _cli(
        "eval", "--protocol", "occluded", "--bundle", str(run / "bundle.ckpt"),
        "--data", str(data), "--out", str(rep), "--seed", "3", "--frames", "8",
    )


def _tree_bytes(root: Path) -> dict[str, bytes]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and not path.name.startswith("run_metadata"):
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


def test_c11_pipeline_reruns_are_byte_identical(capsys, tmp_path):
    t0 = time.perf_counter()
    _run_pipeline(tmp_path / "a")
    _run_pipeline(tmp_path / "b")
    a = _tree_bytes(tmp_path / "a")
    b = _tree_bytes(tmp_path / "b")
    wall = time.perf_counter() - t0
    same_names = sorted(a) == sorted(b)
    diff = [name for name in a if same_names and a[name] != b[name]]
    ok = same_names and not diff
    _verdict(
        capsys, 11, ok,
        f"two gen->train(1,2,3)->eval runs, {len(a)} files compared byte-wise"
        + ("" if ok else f", differing: {diff[:5]}")
        + f"; wall {wall:.0f}s",
    )
