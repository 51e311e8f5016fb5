"""Shared fixtures: a small rendered dataset and micro-trained checkpoints.

Session-scoped so the expensive work (rendering, short training runs) happens
once per pytest invocation.
"""

import pytest

from resgait.data import SequenceStore, generate_synthetic_dataset
from resgait.training import (
    Stage1Config,
    Stage2Config,
    Stage3Config,
    train_stage1,
    train_stage2,
    train_stage3,
)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    return generate_synthetic_dataset(
        num_subjects=4, seqs_per_subject=4, frames_per_seq=14, seed=7, out_root=root
    )


@pytest.fixture(scope="session")
def tiny_store(tiny_manifest):
    return SequenceStore(tiny_manifest)


@pytest.fixture(scope="session")
def micro_configs():
    return {
        "stage1": Stage1Config(
            iterations=8, batch_clips=8, frames_per_clip=6, holdout_seqs=2
        ),
        "stage2": Stage2Config(iterations=8, p=3, k=2, frames_per_clip=8, holdout_seqs=2),
        "stage3": Stage3Config(
            iterations=6, p=3, k=2, frames_per_clip=8, oem_frame_stride=2, holdout_seqs=2
        ),
    }


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory, tiny_manifest, tiny_store, micro_configs):
    """All three stages trained for a handful of iterations on the tiny dataset."""
    out = tmp_path_factory.mktemp("micro_run")
    s1 = train_stage1(tiny_manifest, micro_configs["stage1"], out, store=tiny_store)
    s2 = train_stage2(tiny_manifest, micro_configs["stage2"], out, store=tiny_store)
    s3 = train_stage3(
        tiny_manifest,
        micro_configs["stage3"],
        out,
        oem_path=s1.checkpoint_path,
        gait_path=s2.checkpoint_path,
        store=tiny_store,
    )
    return {"out": out, "stage1": s1, "stage2": s2, "stage3": s3}
