"""Command-line entry point: dataset generation, stage training, evaluation.

Exit codes: 0 success, 2 usage error, 3 missing prerequisite, 4 runtime
failure. Every run writes a resolved-config snapshot into the output
directory; wall-clock timestamps and host info are quarantined in a separate
run-metadata file so all scientific outputs stay byte-comparable.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

from . import evaluation, training
from .data import MANIFEST_NAME, SequenceStore, generate_synthetic_dataset, load_manifest

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_PREREQUISITE = 3
EXIT_RUNTIME = 4

_STAGE_CONFIGS = {1: training.Stage1Config, 2: training.Stage2Config, 3: training.Stage3Config}


def _env_seed() -> int | None:
    raw = os.environ.get("RG_GAIT_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ValueError(f"RG_GAIT_SEED must be an integer, got {raw!r}") from exc


def _resolve_seed(cli_seed, config_data: dict, default: int) -> int:
    """Precedence: --seed flag, then config file, then RG_GAIT_SEED, then default."""
    if cli_seed is not None:
        return int(cli_seed)
    if "seed" in config_data:
        return int(config_data["seed"])
    env = _env_seed()
    if env is not None:
        return env
    return default


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return data


def _write_snapshot(out_dir: Path, name: str, payload: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}_config.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def _write_run_metadata(out_dir: Path, name: str, args_namespace) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"run_metadata_{name}.json"
    payload = {
        "timestamp": datetime.datetime.now().isoformat(),
        "host": platform.node(),
        "command": name,
        "argv": sys.argv[1:],
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(b"\0")
        h.update(path.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


def _parse_kinds(raw: str | None, default):
    if raw is None:
        return tuple(default)
    kinds = tuple(k.strip() for k in raw.split(",") if k.strip())
    if not kinds:
        raise ValueError("--kinds was given but named no occlusion kinds")
    return kinds


def cmd_gen_data(args) -> int:
    out_root = Path(args.out)
    seed = _resolve_seed(args.seed, {}, default=1)
    before = _tree_digest(out_root) if (out_root / MANIFEST_NAME).is_file() else None
    manifest = generate_synthetic_dataset(
        num_subjects=args.subjects,
        seqs_per_subject=args.seqs,
        frames_per_seq=args.frames,
        seed=seed,
        out_root=out_root,
    )
    after = _tree_digest(out_root)
    _write_snapshot(out_root, "gen_data", {
        "subjects": args.subjects, "seqs": args.seqs, "frames": args.frames, "seed": seed,
    })
    _write_run_metadata(out_root, "gen_data", args)
    status = "reproduced (byte-identical)" if before == after else "written"
    print(f"dataset {status}: {len(manifest.entries)} sequences under {out_root}")
    return EXIT_OK


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    data = _load_config_file(args.config)
    cls = _STAGE_CONFIGS[args.stage]
    data["seed"] = _resolve_seed(args.seed, data, default=cls().seed)
    config = training.config_from_dict(cls, data)
    manifest = load_manifest(args.data)
    store = SequenceStore(manifest)
    name = f"train_stage{args.stage}"
    _write_snapshot(out_dir, name, {"stage": args.stage} | dataclasses.asdict(config))
    _write_run_metadata(out_dir, name, args)

    if args.stage == 1:
        artifacts = training.train_stage1(manifest, config, out_dir, store=store)
        m = artifacts.metrics
        print(f"stage 1 complete: type_accuracy={m['type_accuracy']:.3f} level_mae={m['level_mae']:.4f}")
    elif args.stage == 2:
        artifacts = training.train_stage2(manifest, config, out_dir, store=store)
        m = artifacts.metrics
        print(f"stage 2 complete: holistic rank-1 {m['holistic_rank1'] * 100:.2f} (upper bound)")
    else:
        oem_path = Path(args.oem) if args.oem else out_dir / "oem.ckpt"
        gait_path = Path(args.gait) if args.gait else out_dir / "gait.ckpt"
        for path in (oem_path, gait_path):
            if not path.is_file():
                raise FileNotFoundError(path)
        artifacts = training.train_stage3(manifest, config, out_dir, oem_path, gait_path, store=store)
        print(f"stage 3 complete: bundle at {artifacts.checkpoint_path}")
    print(f"checkpoint {artifacts.checkpoint_path} sha256 {artifacts.file_hash}")
    return EXIT_OK


def _eval_snapshot(args, seed: int, kinds, extra: dict | None = None) -> dict:
    payload = {
        "protocol": args.protocol,
        "seed": seed,
        "kinds": sorted(kinds),
        "frames_per_clip": args.frames,
        "holdout_seqs": args.holdout,
    }
    return payload | (extra or {})


def cmd_eval(args) -> int:
    bundle_path = Path(args.bundle)
    if not bundle_path.is_file():
        raise FileNotFoundError(bundle_path)
    manifest = load_manifest(args.data)
    store = SequenceStore(manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_data = _load_config_file(args.config)
    seed = _resolve_seed(args.seed, config_data, default=0)
    name = f"eval_{args.protocol.replace('-', '_')}"
    common = dict(holdout_seqs=args.holdout, frames_per_clip=args.frames, store=store)

    if args.protocol in ("occluded", "verification"):
        kinds = _parse_kinds(args.kinds, evaluation.DEFAULT_EVAL_KINDS)
        report = evaluation.occluded_eval(
            bundle_path, manifest, seed, kinds=kinds, protocol_name=args.protocol, **common
        )
        ver = report.payload["verification"]
        chosen = (ver["achieved_far"], ver["tar"]) if ver["threshold"] is not None else None
        evaluation.save_roc_plot(ver["roc"], chosen, out_dir / f"{name}_roc.png")
    elif args.protocol == "holistic":
        report = evaluation.hpr_eval(bundle_path, manifest, seed, **common)
        upper = report.payload["holistic_upper_bound"]
        evaluation.save_retention_plot(
            {"pipeline": report.payload["retrieval"]["rank1"]}, upper, out_dir / f"{name}_retention.png"
        )
        kinds = ()
    elif args.protocol == "generalize":
        kinds = _parse_kinds(args.kinds, ("middle", "moving"))
        report = evaluation.generalizability_eval(bundle_path, manifest, seed, eval_kinds=kinds, **common)
    elif args.protocol == "adapt":
        kinds = _parse_kinds(args.kinds, ("middle", "moving"))
        config_data.setdefault("kinds", list(kinds))
        config_data.setdefault("iterations", 60)
        config_data["seed"] = seed
        finetune = training.config_from_dict(training.Stage3Config, config_data)
        report = evaluation.adaptability_eval(
            bundle_path, manifest, finetune, out_dir, seed, eval_kinds=finetune.kinds, **common
        )
        kinds = finetune.kinds
    else:  # multi-seed
        kinds = _parse_kinds(args.kinds, evaluation.DEFAULT_EVAL_KINDS)
        seeds = evaluation.derive_seeds(seed, args.seeds)
        report = evaluation.multi_seed_eval(bundle_path, manifest, seeds, kinds=kinds, **common)
        print(f"rank-1 over {args.seeds} seeds: {report.payload['formatted']}")

    extra = {"seeds": args.seeds} if args.protocol == "multi-seed" else None
    _write_snapshot(out_dir, name, _eval_snapshot(args, seed, kinds, extra))
    _write_run_metadata(out_dir, name, args)
    json_path, txt_path = report.save(out_dir, f"{name}_report")
    print(report.format_table())
    print(f"report written to {json_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resgait",
        description="Occlusion-robust gait recognition: synthetic data, staged training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a deterministic synthetic silhouette dataset")
    gen.add_argument("--subjects", type=int, required=True)
    gen.add_argument("--seqs", type=int, required=True, help="sequences per subject")
    gen.add_argument("--frames", type=int, required=True, help="frames per sequence")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", required=True, help="dataset output directory")
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="run one training stage")
    train.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    train.add_argument("--data", required=True, help="dataset root (with manifest)")
    train.add_argument("--out", required=True, help="artifact output directory")
    train.add_argument("--config", default=None, help="JSON file of stage config overrides")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--oem", default=None, help="stage-1 checkpoint (stage 3; default OUT/oem.ckpt)")
    train.add_argument("--gait", default=None, help="stage-2 checkpoint (stage 3; default OUT/gait.ckpt)")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="run an evaluation protocol on a trained bundle")
    ev.add_argument(
        "--protocol",
        choices=("occluded", "holistic", "verification", "generalize", "adapt", "multi-seed"),
        required=True,
    )
    ev.add_argument("--bundle", required=True, help="checkpoint to evaluate")
    ev.add_argument("--data", required=True, help="dataset root (with manifest)")
    ev.add_argument("--out", required=True, help="report output directory")
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--seeds", type=int, default=10, help="seed count for multi-seed")
    ev.add_argument("--kinds", default=None, help="comma-separated occlusion kinds")
    ev.add_argument("--frames", type=int, default=30, help="frames per evaluation clip")
    ev.add_argument("--holdout", type=int, default=2, help="held-out sequences per subject")
    ev.add_argument("--config", default=None, help="JSON fine-tune config (adapt protocol)")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING_PREREQUISITE
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
