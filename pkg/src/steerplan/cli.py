"""Command-line harness: dataset generation, training, evaluation,
equivariance audits, size-generalization sweeps, and ASCII rendering.

Subcommands: gen-data | train | eval | equiv-check | generalize | render.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from .datasets import (Dataset, derived_seed, generate_dataset, read_dataset, write_dataset)
from .estimator import GridPathPlanner, TrainingDivergedError
from .groups import GROUP_TOKENS, group_from_token
from .metrics import (MetricsRow, append_metrics_row, evaluate_model, evaluate_oracle,
                      format_metrics_row, write_metrics_csv)
from .planner import (build_spatial_mdp, equivariance_audit, exact_value_iteration,
                      extract_policy, load_checkpoint, save_checkpoint, symvin_forward,
                      vin_forward)

POLICY_GLYPHS = {0: "^", 1: "<", 2: "v", 3: ">"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steerplan",
                                     description="Symmetric differentiable planning on 2D grids")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_model_flags(p):
        p.add_argument("--model", choices=("vin", "symvin"), default="symvin")
        p.add_argument("--group", choices=GROUP_TOKENS, default="d4")
        p.add_argument("--k", type=int, default=30, help="value-iteration depth K")
        p.add_argument("--f", type=int, default=3, help="transition kernel size F")
        p.add_argument("--cq", type=int, default=16,
                       help="Q fibers (desk-scale default 16; the full-scale setting is 100)")
        p.add_argument("--hidden", type=int, default=150, help="input head channels")
        p.add_argument("--rho-q", choices=("regular", "trivial"), default="regular",
                       help="fiber representation of the Q/V fields (symvin)")
        p.add_argument("--equiv-head", action="store_true",
                       help="steerable policy head (required for exact output equivariance)")
        p.add_argument("--padding", choices=("zero", "circular"), default=None,
                       help="default: zero for nav2d, circular for manip2d")

    p = sub.add_parser("gen-data", help="generate train/val/test dataset files")
    p.add_argument("--task", choices=("nav2d", "manip2d"), default="nav2d")
    p.add_argument("--size", type=int, default=15, help="map size (bins for manip2d)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--density", type=float, default=0.3, help="obstacle density (nav2d)")
    p.add_argument("--counts", default="1000,200,200", help="train,val,test sample counts")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a planner on a generated dataset")
    p.add_argument("--task", choices=("nav2d", "manip2d"), default=None,
                   help="default: the dataset's task")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="run directory for CSV and checkpoints")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", default=None, help="training-state file from a previous run")
    common_model_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the exact oracle)")
    p.add_argument("--data", required=True, help="dataset file, e.g. .../test.bin")
    p.add_argument("--checkpoint", required=True, help="checkpoint path, or 'oracle'")
    p.add_argument("--k", type=int, default=None, help="iteration override for other map sizes")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--out", default=None, help="append the metrics row to this CSV")

    p = sub.add_parser("equiv-check", help="commutative-diagram audit of a checkpoint")
    p.add_argument("--data", required=True, help="dataset file providing audit maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--maps", type=int, default=8)
    p.add_argument("--group", choices=GROUP_TOKENS, default=None,
                   help="audit group (default: the model's group, or d4 for vin)")
    p.add_argument("--out", default=None, help="write the per-element CSV here")

    p = sub.add_parser("generalize", help="evaluate one checkpoint across map sizes")
    p.add_argument("--task", choices=("nav2d", "manip2d"), default="nav2d")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sizes", default="15,28", help="comma-separated test map sizes")
    p.add_argument("--maps", type=int, default=200, help="freshly generated maps per size")
    p.add_argument("--seed", type=int, default=0, help="evaluation map seed")
    p.add_argument("--density", type=float, default=0.3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--out", default=None)

    p = sub.add_parser("render", help="ASCII panel of a map and its planned actions")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint", default=None, help="default: exact oracle policy")
    return parser


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    counts = [int(c) for c in args.counts.split(",")]
    if len(counts) != 3:
        raise SystemExit("--counts needs three values: train,val,test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, count in zip(("train", "val", "test"), counts):
        samples = generate_dataset(args.task, args.size, count, args.seed, split, args.density)
        manifest = {"task": args.task, "size": args.size, "count": count,
                    "seed": args.seed, "density": args.density, "split": split}
        write_dataset(samples, out / f"{split}.bin", args.task, manifest)
        print(f"wrote {split}: {count} maps -> {out / (split + '.bin')}")
    return 0


def _dataset_padding(task: str, flag: str | None) -> str:
    if flag is not None:
        return flag
    return "circular" if task == "manip2d" else "zero"


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    train_set = read_dataset(data_dir / "train.bin")
    val_set = read_dataset(data_dir / "val.bin")
    task = args.task or train_set.task
    padding = _dataset_padding(task, args.padding)
    torus = task == "manip2d"

    from .metrics import samples_to_arrays
    X, y = samples_to_arrays(train_set.samples)
    Xv, yv = samples_to_arrays(val_set.samples)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    write_metrics_csv([], csv_path)

    est = GridPathPlanner(model=args.model, group=args.group, k=args.k, f=args.f,
                          cq=args.cq, hidden=args.hidden, rho_q=args.rho_q,
                          equiv_head=args.equiv_head, padding=padding, torus=torus,
                          lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                          seed=args.seed)

    def on_row(row):
        mrow = MetricsRow(row["epoch"], row["split"], row["loss"], row["success_rate"],
                          row["spl"], row["wall_seconds"])
        append_metrics_row(mrow, csv_path)
        print(format_metrics_row(mrow))

    resume_state = None
    if args.resume is not None:
        resume_state = load_training_state(args.resume)

    try:
        est.fit(X, y, validation_data=(Xv, yv), epoch_callback=on_row,
                resume_state=resume_state, eval_train_subset=200)
    except TrainingDivergedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3

    save_checkpoint(est.best_model_, out / "best.ckpt")
    save_checkpoint(est.model_, out / "last.ckpt")
    save_training_state(est.training_state_, out / "last.state.npz")
    print(f"best val success {est.best_val_success_:.2f}% at epoch {est.best_epoch_}")
    print(f"checkpoints: {out / 'best.ckpt'}, {out / 'last.ckpt'}")
    return 0


def save_training_state(state: dict, path) -> None:
    arrays = {f"param_{i}": v for i, v in enumerate(state["param_values"])}
    arrays.update({f"moment_{i}": v for i, v in enumerate(state["moments"])})
    np.savez(path, epoch=np.int64(state["epoch"]), **arrays)


def load_training_state(path) -> dict:
    with np.load(path) as blob:
        n = sum(1 for k in blob.files if k.startswith("param_"))
        return {"param_values": [blob[f"param_{i}"] for i in range(n)],
                "moments": [blob[f"moment_{i}"] for i in range(n)],
                "epoch": int(blob["epoch"])}


def cmd_eval(args) -> int:
    ds = read_dataset(args.data)
    H = ds.samples[0].map.shape[0]
    if args.checkpoint == "oracle":
        stats = evaluate_oracle(ds.samples, torus=ds.torus)
    else:
        model = load_checkpoint(args.checkpoint)
        if model.size and model.size != H and args.k is None:
            raise SystemExit(
                f"dataset maps are {H}x{H} but the model was trained at size {model.size}; "
                "pass an explicit --k override")
        stats = evaluate_model(model, ds.samples, torus=ds.torus, batch_size=args.batch,
                               k_override=args.k)
    row = MetricsRow(0, "test", stats["loss"], stats["success_rate"], stats["spl"], 0.0)
    print(format_metrics_row(row))
    if args.out:
        header = not Path(args.out).exists()
        append_metrics_row(row, args.out, write_header=header)
    return 0


def cmd_equiv_check(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.group is not None:
        group = group_from_token(args.group)
    elif model.group is not None:
        group = model.group
    else:
        group = group_from_token("d4")
    forward = symvin_forward if model.variant == "symvin" else vin_forward
    ds = read_dataset(args.data)
    maps = [s.map for s in ds.samples[:args.maps]]

    worst: dict[str, float] = {}
    for m in maps:
        for g, dev in equivariance_audit(lambda mm: forward(model, mm), m, group).items():
            key = repr(g)
            worst[key] = max(worst.get(key, 0.0), dev)
    rows = [("element", "max_deviation")]
    rows += [(key, repr(val)) for key, val in worst.items()]
    rows.append(("aggregate", repr(max(worst.values()))))

    sink = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(sink)
        writer.writerows(rows)
    finally:
        if args.out:
            sink.close()
    if not args.out:
        sys.stdout.flush()
    return 0


def cmd_generalize(args) -> int:
    model = load_checkpoint(args.checkpoint)
    sizes = [int(s) for s in args.sizes.split(",")]
    torus = args.task == "manip2d"
    rows = [("size", "k", "success_rate", "spl")]
    for size in sizes:
        k = math.ceil(math.sqrt(2.0) * size)
        samples = generate_dataset(args.task, size, args.maps, args.seed, "eval", args.density)
        stats = evaluate_model(model, samples, torus=torus, batch_size=args.batch,
                               k_override=k)
        rows.append((str(size), str(k), repr(stats["success_rate"]), repr(stats["spl"])))
        print(f"size {size:3d} (K={k}): success {stats['success_rate']:6.2f}% "
              f"spl {stats['spl']:6.2f}%")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(rows)
    return 0


def render_panel(m, policy) -> str:
    """Obstacles '#', goal 'G', actions rendered as direction glyphs."""
    H, W = m.shape
    lines = []
    for i in range(H):
        chars = []
        for j in range(W):
            if (i, j) == m.goal:
                chars.append("G")
            elif m.occupancy[i, j]:
                chars.append("#")
            else:
                chars.append(POLICY_GLYPHS[int(policy[i, j])])
        lines.append("".join(chars))
    return "\n".join(lines)


def cmd_render(args) -> int:
    ds = read_dataset(args.data)
    if not 0 <= args.index < len(ds.samples):
        raise SystemExit(f"index {args.index} out of range for {len(ds.samples)} samples")
    m = ds.samples[args.index].map
    if args.checkpoint is None:
        mdp = build_spatial_mdp(m, torus=ds.torus)
        _, _, policy = exact_value_iteration(mdp)
    else:
        model = load_checkpoint(args.checkpoint)
        forward = symvin_forward if model.variant == "symvin" else vin_forward
        policy = extract_policy(forward(model, m))
    print(render_panel(m, policy))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "equiv-check": cmd_equiv_check,
        "generalize": cmd_generalize,
        "render": cmd_render,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
