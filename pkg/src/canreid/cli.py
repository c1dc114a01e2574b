"""Command line: synth, train, eval, gradcheck, inspect."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradcheck
from .blob import BlobError
from .data import ManifestError, generate_synthetic, load_manifest
from .evaluation import cosine_distance_matrix, write_rank_lists
from .model import CheckpointError, load_checkpoint, model_meta
from .train import TrainConfig, TrainingDiverged, evaluate_checkpoint, train


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def cmd_synth(args) -> int:
    m = generate_synthetic(args.out, args.ids, args.per_id, args.height, args.width,
                           args.seed, args.noise, args.cams)
    counts = {s: len(m.split(s)) for s in ("train", "query", "gallery")}
    print(json.dumps({"out": str(args.out), "records": len(m), **counts}))
    return 0


def cmd_train(args) -> int:
    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg.update(_parse_set(args.set))
    for key in ("epochs", "seed", "max_steps"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    config = TrainConfig.from_dict(cfg)
    manifest = load_manifest(args.data)
    result = train(config, manifest, args.out)
    summary = {"checkpoint": str(result.checkpoint), "steps": len(result.log.steps)}
    if result.report is not None:
        summary["report"] = result.report.to_dict()
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.data)
    report = evaluate_checkpoint(args.checkpoint, manifest, args.max_rank)
    print(report.to_json())
    if args.rank_csv:
        from .data import ImageStore
        from .model import inference_descriptor

        model = load_checkpoint(args.checkpoint)
        store = ImageStore(manifest, model.backbone.input_h, model.backbone.input_w, dtype=model.dtype)
        q, g = manifest.split("query"), manifest.split("gallery")
        meta = lambda idx: ([manifest.records[i].person_id for i in idx],  # noqa: E731
                            [manifest.records[i].camera_id for i in idx])
        dm = cosine_distance_matrix(inference_descriptor(model, store.batch(q)),
                                    inference_descriptor(model, store.batch(g)), meta(q), meta(g))
        write_rank_lists(args.rank_csv, dm, args.max_rank)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.check_ops(args.trials, args.seed)
    results["composite_loss_toy_model"] = max(gradcheck.check_model_loss(args.seed).values())
    ok = True
    for name, err in results.items():
        passed = err < gradcheck.TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:28s} max_rel_err={err:.3e}")
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    meta = model_meta(model)
    n_params = sum(p.size for p in model.parameters())
    print(f"checkpoint: {args.checkpoint}")
    print(f"branches: {meta['branches']}  collaborative_attention: {meta['collaborative_attention']}")
    print(f"backbone: {meta['backbone']}  output map: {model.backbone.output_hw}")
    print(f"streams: {model.num_streams} ({sum(model.stream_is_local)} local) x {model.embed_dim}"
          f" -> descriptor {model.descriptor_dim}")
    for name in model.stream_names:
        print(f"  {name}")
    print(f"parameters: {len(model.parameters())} tensors, {n_params} values, dtype {meta['dtype']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canreid", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic identity dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--ids", type=int, default=16)
    s.add_argument("--per-id", type=int, default=8)
    s.add_argument("--height", type=int, default=96)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--cams", type=int, default=2)
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--data", required=True, help="dataset directory or manifest.jsonl")
    t.add_argument("--out", required=True, help="run directory for logs and checkpoints")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (value parsed as JSON)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--max-rank", type=int, default=10)
    e.add_argument("--rank-csv", help="also write per-query rank lists")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="summarise a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ManifestError, BlobError, CheckpointError, TrainingDiverged, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
