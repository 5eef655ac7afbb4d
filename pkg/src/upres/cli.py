"""Command-line entry points.

Failures print one machine-readable JSON error object to stderr and exit 1;
argparse usage problems exit 2.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from pathlib import Path

from . import dataset as ds
from . import degrade, metrics
from .errors import UpresError
from .gateway import InferenceGateway, default_mock_backend
from .imaging import load_image, save_png
from .pipeline import BRANCHES, BRANCH_WITH_LORA, BRANCH_WITHOUT_LORA, PipelineEngine, Stage1Config, Stage2Config
from .prompts import build_caption, build_prompt, facts_from_dict
from .service import ServiceConfig, load_config, serve
from .store import JobStore


def _print_json(doc, out=None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _read_facts(path: str):
    return facts_from_dict(json.loads(Path(path).read_text()))


# -- serve ----------------------------------------------------------------------


def cmd_serve(args) -> int:
    config = load_config(Path(args.config) if args.config else None)
    if args.store:
        config.store_path = Path(args.store)
    if args.backends:
        from .gateway import BackendDescriptor

        config.backends = [
            BackendDescriptor.from_dict(b) for b in json.loads(Path(args.backends).read_text())
        ]
    if args.console_dist:
        config.console_dist = Path(args.console_dist)
    serve(config, host=args.host, port=args.port)
    return 0


# -- reconstruct -------------------------------------------------------------------


def _pick_sharpest(store: JobStore, refs) -> str:
    scored = metrics.compare_report(
        [(c.hash, load_image(store.get_blob(c.hash))) for c in refs]
    )
    return scored.scores[0].candidate_id


def cmd_reconstruct_run(args) -> int:
    image_bytes = Path(args.input).read_bytes()
    facts = _read_facts(args.facts)
    store = JobStore(args.store)
    gateway = InferenceGateway()
    backend = default_mock_backend()
    gateway.register(backend)
    engine = PipelineEngine(store, gateway, backend_id=backend.id)
    if args.no_lora_branch:
        stage2_branches = (BRANCH_WITHOUT_LORA,)
    elif args.lora_branch:
        stage2_branches = (BRANCH_WITH_LORA,)
    else:
        stage2_branches = BRANCHES
    stage1 = Stage1Config(seed=args.seed, target_side=args.target_side)
    stage2 = Stage2Config(seed=args.seed)
    job = engine.create_job(
        image_bytes, facts, stage1=stage1, stage2=stage2, stage2_branches=stage2_branches
    )
    engine.preprocess(job.id)
    engine.run_stage1(job.id)
    stage1_refs = [c for refs in job.stage_candidates(1).values() for c in refs]
    control = _pick_sharpest(store, stage1_refs)
    engine.run_stage2(job.id, control)
    stage2_refs = [c for refs in job.stage_candidates(2).values() for c in refs]
    final_hash = _pick_sharpest(store, stage2_refs)
    final = next(c for c in stage2_refs if c.hash == final_hash)
    engine.select_candidate(job.id, 2, final.branch, final.hash)
    out_path = Path(args.out) if args.out else Path(args.input).with_suffix(".reconstructed.png")
    out_path.write_bytes(store.get_blob(final.hash))
    _print_json(
        {
            "job_id": job.id,
            "state": job.state.value,
            "control_candidate": control,
            "selected": job.selection,
            "output": str(out_path),
            "stage1_candidates": len(stage1_refs),
            "stage2_candidates": len(stage2_refs),
        }
    )
    return 0


# -- fixtures -----------------------------------------------------------------------


def cmd_fixture_make(args) -> int:
    if args.input:
        gt = load_image(Path(args.input).read_bytes())
    else:
        from .service import _synthetic_ground_truth

        gt = _synthetic_ground_truth(args.synthetic_side, args.seed)
    if args.spec:
        spec = degrade.DegradationSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        spec = degrade.broadcast_cutout_spec(seed=args.seed, orders=args.orders)
    degraded, manifest = degrade.synthesize_fixture(gt, spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ground_truth.png").write_bytes(save_png(gt))
    (out_dir / "degraded.png").write_bytes(save_png(degraded))
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _print_json({"out_dir": str(out_dir), "output_size": manifest["output_size"]})
    return 0


# -- scoring -------------------------------------------------------------------------


def cmd_score(args) -> int:
    gt = load_image(Path(args.gt).read_bytes()) if args.gt else None
    candidates = []
    for spec in args.candidate:
        cid, _, path = spec.rpartition("=")
        path = Path(path)
        candidates.append((cid or path.stem, load_image(path.read_bytes())))
    report = metrics.compare_report(candidates, ground_truth=gt)
    _print_json(report.to_dict(), args.out)
    return 0


# -- dataset ---------------------------------------------------------------------------


def cmd_dataset_validate(args) -> int:
    report = ds.validate_captions(
        Path(args.captions).read_bytes(), args.root, check_decode=not args.no_decode_check
    )
    _print_json(report.to_dict(), args.out)
    return 0 if report.ok else 1


def cmd_dataset_buckets(args) -> int:
    cfg = ds.BucketConfig(max_reso=args.max_reso, dim_step=args.dim_step)
    dims = []
    for text in args.dims:
        w, _, h = text.partition("x")
        dims.append((int(w), int(h)))
    assigned = ds.assign_buckets(dims, cfg)
    _print_json(
        [
            {"width": w, "height": h, "bucket_width": bw, "bucket_height": bh}
            for (w, h), (bw, bh) in zip(dims, assigned)
        ],
        args.out,
    )
    return 0


def cmd_dataset_manifest(args) -> int:
    dataset = ds.load_caption_dataset(Path(args.captions).read_bytes(), args.root)
    aug = ds.AugmentConfig(flip_aug=args.flip, num_repeats=args.repeats)
    rows = ds.expand_manifest(dataset, aug, seed=args.seed)
    _print_json([r.to_dict() for r in rows], args.out)
    return 0


def cmd_dataset_emit(args) -> int:
    if args.kind == "toml":
        text = ds.emit_dataset_toml(
            ds.BucketConfig(max_reso=args.max_reso, dim_step=args.dim_step),
            ds.AugmentConfig(flip_aug=args.flip, num_repeats=args.repeats),
            image_dir=args.image_dir,
            metadata_file=args.metadata_file,
        )
    else:
        overrides = json.loads(Path(args.config).read_text()) if args.config else {}
        text = ds.render_train_command(ds.TrainRunConfig(**overrides))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_dataset_plan(args) -> int:
    plan = ds.training_plan(
        args.images,
        ds.AugmentConfig(num_repeats=args.repeats),
        args.batch,
        args.gpus,
        args.accum,
        args.epochs,
    )
    _print_json(plan.to_dict(), args.out)
    return 0


# -- prompts ------------------------------------------------------------------------------


def cmd_prompt_build(args) -> int:
    facts = _read_facts(args.facts)
    print(build_caption(facts) if args.caption else build_prompt(facts))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="upres", description="Broadcast cutout reconstruction orchestrator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the control service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--store", help="store directory (overrides config)")
    p.add_argument("--backends", help="backend registry JSON file")
    p.add_argument("--console-dist", help="built console directory to mount at /ui")
    p.set_defaults(func=cmd_serve)

    rec = sub.add_parser("reconstruct", help="reconstruction jobs").add_subparsers(
        dest="subcommand", required=True
    )
    p = rec.add_parser("run", help="full two-stage run against the mock backend")
    p.add_argument("--input", required=True, help="cutout PNG/JPEG")
    p.add_argument("--facts", required=True, help="scene facts JSON file")
    p.add_argument("--out", help="output PNG path")
    p.add_argument("--store", default="./upres-store")
    p.add_argument("--seed", type=int, default=None, help="fixed seed for both stages")
    p.add_argument("--target-side", type=int, default=1024)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--no-lora-branch", action="store_true", help="stage 2 without LoRA only")
    group.add_argument("--lora-branch", action="store_true", help="stage 2 with LoRA only")
    p.set_defaults(func=cmd_reconstruct_run)

    fix = sub.add_parser("fixture", help="degradation fixtures").add_subparsers(
        dest="subcommand", required=True
    )
    p = fix.add_parser("make", help="degrade a ground truth into a test fixture")
    p.add_argument("--input", help="ground-truth image (>= 256x256); omit for synthetic")
    p.add_argument("--synthetic-side", type=int, default=1024)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--orders", type=int, default=2, choices=(1, 2))
    p.add_argument("--spec", help="degradation spec JSON file")
    p.set_defaults(func=cmd_fixture_make)

    p = sub.add_parser("score", help="score candidates against an optional ground truth")
    p.add_argument("--gt", help="ground-truth image")
    p.add_argument("--candidate", action="append", required=True, help="[id=]path, repeatable")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    data = sub.add_parser("dataset", help="caption dataset tooling").add_subparsers(
        dest="subcommand", required=True
    )
    p = data.add_parser("validate")
    p.add_argument("--captions", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--no-decode-check", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset_validate)

    p = data.add_parser("buckets")
    p.add_argument("--dims", action="append", required=True, help="WxH, repeatable")
    p.add_argument("--max-reso", type=int, default=1024)
    p.add_argument("--dim-step", type=int, default=64)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset_buckets)

    p = data.add_parser("manifest")
    p.add_argument("--captions", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--flip", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset_manifest)

    p = data.add_parser("emit")
    p.add_argument("--kind", choices=("toml", "args"), required=True)
    p.add_argument("--image-dir", default="/workspace/imgs")
    p.add_argument("--metadata-file", default="/workspace/captions_kohya.json")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--flip", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--max-reso", type=int, default=1024)
    p.add_argument("--dim-step", type=int, default=64)
    p.add_argument("--config", help="TrainRunConfig overrides JSON (kind=args)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset_emit)

    p = data.add_parser("plan")
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--gpus", type=int, default=2)
    p.add_argument("--accum", type=int, default=1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset_plan)

    pr = sub.add_parser("prompt", help="prompt templating").add_subparsers(
        dest="subcommand", required=True
    )
    p = pr.add_parser("build")
    p.add_argument("--facts", required=True)
    p.add_argument("--caption", action="store_true", help="dataset caption instead of the prompt")
    p.set_defaults(func=cmd_prompt_build)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UpresError as exc:
        code = type(exc).__name__
        payload = {"error": {"code": code, "message": str(exc)}}
        if hasattr(exc, "findings"):
            payload["error"]["findings"] = exc.findings
        print(json.dumps(payload), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": {"code": "FileNotFound", "message": str(exc)}}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
