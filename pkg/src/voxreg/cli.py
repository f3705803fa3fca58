"""Command line driver: ``voxreg {synth,detect,train,register,eval}``.

Every command reads and validates its configuration before writing any
output. Exit status is 0 on success, 2 for invalid arguments or config and
1 for runtime failures, with a one-line message on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .descriptor.network import WeightsFormatError, load_weights, save_weights
from .descriptor.training import DatasetError, synthesize_training_set, train
from .detect import write_corners_jsonl, write_corners_ply
from .pipeline import (BACKENDS, ConfigError, PipelineConfig, evaluate_dirs, pyramid_and_corners, register_grids,
                       result_json)
from .synth import pair_from_document, save_pair_truth
from .volume import GridFormatError, load_grid, save_grid


class UsageError(Exception):
    pass


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.from_dict()
    over: dict = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "backend", None) is not None:
        over.setdefault("descriptor", {})["backend"] = args.backend
    if getattr(args, "weights", None) is not None:
        over.setdefault("descriptor", {})["weights"] = args.weights
    return cfg.replace(**over) if over else cfg


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


def cmd_synth(args) -> None:
    doc = _read_json(args.pair)
    seed = args.seed if args.seed is not None else 0
    try:
        spec, pair = pair_from_document(doc, seed)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{args.pair}: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_grid(pair.grid_a, out / "grid_a.vgrd", {"name": "grid_a", "source": str(args.pair), "notes": "scene frame"})
    save_grid(pair.grid_b, out / "grid_b.vgrd", {"name": "grid_b", "source": str(args.pair), "notes": "moved frame"})
    save_pair_truth(pair, out / "truth.json", {"seed": seed})
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_detect(args) -> None:
    cfg = _config(args)
    g = load_grid(args.grid)
    try:
        _, corners = pyramid_and_corners(g, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_corners_ply(corners, out / "corners.ply")
    write_corners_jsonl(corners, out / "corners.jsonl")
    print(f"{len(corners)} corners", file=sys.stderr)


def cmd_train(args) -> None:
    cfg = _config(args)
    grids = [load_grid(p) for p in args.grids]
    d = cfg.data
    tr = d["train"]
    ds = synthesize_training_set(grids, int(d["descriptor"]["s"]), float(d["descriptor"]["angle_step"]), cfg.harris(),
                                 int(d["volume"]["levels"]), tr["max_corners_per_scene"], int(d["seed"]))
    net, losses = train(ds, int(tr["iterations"]), int(tr["batch_size"]), float(tr["margin"]), float(tr["lr"]),
                        int(d["seed"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(net, out)
    loss_path = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def cmd_register(args) -> None:
    cfg = _config(args)
    net = None
    if cfg.data["descriptor"]["backend"] == "network":
        if cfg.data["descriptor"]["weights"] is None:
            raise UsageError("the network backend needs --weights or descriptor.weights")
        net = load_weights(cfg.data["descriptor"]["weights"])
    ga, gb = load_grid(args.grid_a), load_grid(args.grid_b)
    run = register_grids(ga, gb, cfg, net)
    text = result_json(run.document(cfg))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args) -> None:
    for p in (args.results, args.truths):
        if not Path(p).is_dir():
            raise UsageError(f"{p} is not a directory")
    text = json.dumps(evaluate_dirs(args.results, args.truths), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxreg", description="Register overlapping 3D density grids.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, backend: bool = False):
        sp.add_argument("--config", help="pipeline config JSON (missing keys take defaults)")
        sp.add_argument("--seed", type=int)
        if backend:
            sp.add_argument("--backend", choices=BACKENDS)
            sp.add_argument("--weights", help="descriptor network weights (network backend)")

    sp = sub.add_parser("synth", help="render an overlapping grid pair with ground truth")
    sp.add_argument("pair", help="pair description JSON")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("detect", help="multi-scale Harris corners of a grid")
    sp.add_argument("grid")
    sp.add_argument("--out", required=True, help="output directory")
    common(sp)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("train", help="train the descriptor network on scene grids")
    sp.add_argument("grids", nargs="+")
    sp.add_argument("--out", required=True, help="weights file")
    sp.add_argument("--loss-csv", help="loss history CSV (default: next to the weights)")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("register", help="estimate the transform taking grid b into grid a")
    sp.add_argument("grid_a")
    sp.add_argument("grid_b")
    sp.add_argument("--out", help="result JSON (default: stdout)")
    common(sp, backend=True)
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("eval", help="score result JSONs against ground truth")
    sp.add_argument("results")
    sp.add_argument("truths")
    sp.add_argument("--out", help="report JSON (default: stdout)")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"voxreg {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, GridFormatError, WeightsFormatError, DatasetError, ValueError) as exc:
        print(f"voxreg {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
