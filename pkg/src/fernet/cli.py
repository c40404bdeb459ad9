"""Command-line interface: prepare, register, train, eval, opcount, gradcheck.

Thread count is pinned before numpy loads (default 1 for bitwise
reproducibility), so this module defers all heavy imports into the
command handlers.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _configure_threads(argv) -> int:
    """Pin BLAS thread pools before numpy is imported.

    Precedence: --threads flag, then FERNET_THREADS, then 1.  Has no
    effect on numpy instances already imported into this process.
    """
    value = os.environ.get("FERNET_THREADS", "").strip() or None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
    try:
        threads = int(value) if value else 1
    except ValueError:
        raise SystemExit(f"error: --threads expects an integer, got {value!r}")
    if threads < 1:
        raise SystemExit(f"error: --threads must be >= 1, got {threads}")
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(threads)
    return threads


# ---------------------------------------------------------------------------
# Command handlers (heavy imports stay inside)
# ---------------------------------------------------------------------------

def _print_counts(manifest) -> None:
    from . import data as data_mod

    codes = data_mod.LABEL_CODES
    table = manifest.counts()
    width = max([len("Database")] + [len(db) for db in table])
    header = "Database".ljust(width) + "".join(f"{c:>7}" for c in codes) + f"{'total':>8}"
    print(header)
    for db in sorted(table):
        row = table[db]
        total = sum(row.values())
        print(db.ljust(width) + "".join(f"{row[c]:>7}" for c in codes) + f"{total:>8}")
    usage_totals = {}
    for u in manifest.usages:
        if u:
            usage_totals[u] = usage_totals.get(u, 0) + 1
    if usage_totals:
        summary = ", ".join(f"{u}={n}" for u, n in sorted(usage_totals.items()))
        print(f"predefined usage: {summary}")


def cmd_prepare(args) -> int:
    from . import data as data_mod

    parts = []
    if args.fer2013:
        if not os.path.exists(args.fer2013):
            print(f"error: no such file: {args.fer2013}", file=sys.stderr)
            return 2
        parts.append(data_mod.load_fer2013_csv(args.fer2013))
    for manifest_path in args.manifest or []:
        if not os.path.exists(manifest_path):
            print(f"error: no such file: {manifest_path}", file=sys.stderr)
            return 2
        parts.append(data_mod.load_manifest(manifest_path))
    if not parts:
        print("error: provide --fer2013 and/or --manifest", file=sys.stderr)
        return 2
    manifest = parts[0] if len(parts) == 1 else data_mod.DatasetManifest.merge(parts)
    data_mod.save_prepared(manifest, args.out)
    print(f"prepared {len(manifest)} samples -> {args.out}")
    _print_counts(manifest)
    return 0


def cmd_register(args) -> int:
    import numpy as np
    from PIL import Image

    from . import data as data_mod
    from .errors import FernetError

    extensions = {".png", ".jpg", ".jpeg", ".bmp", ".pgm"}
    image_files = sorted(
        f for f in os.listdir(args.images)
        if os.path.splitext(f)[1].lower() in extensions
    )
    if not image_files:
        print(f"error: no images found in {args.images}", file=sys.stderr)
        return 2

    landmark_sets = {}
    warnings = []
    for fname in image_files:
        stem = os.path.splitext(fname)[0]
        lm_path = os.path.join(args.landmarks, stem + ".txt")
        try:
            landmark_sets[fname] = data_mod.load_landmarks(lm_path)
        except (FernetError, OSError) as exc:
            warnings.append(f"{fname}: {exc}")
    if not landmark_sets:
        print("error: no usable landmark files", file=sys.stderr)
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
        return 2

    mean = data_mod.mean_shape(list(landmark_sets.values()))
    os.makedirs(args.out, exist_ok=True)
    registered = 0
    for fname, landmarks in landmark_sets.items():
        try:
            with Image.open(os.path.join(args.images, fname)) as img:
                gray = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
            out = data_mod.register_image(gray, landmarks, mean,
                                          out_size=(args.size, args.size),
                                          margin=args.margin)
            out8 = np.rint(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)
            stem = os.path.splitext(fname)[0]
            Image.fromarray(out8, mode="L").save(os.path.join(args.out, stem + ".png"))
            registered += 1
        except (FernetError, OSError) as exc:
            warnings.append(f"{fname}: {exc}")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"registered {registered} images -> {args.out} "
          f"({len(warnings)} skipped)")
    return 0 if registered else 2


def _composition_line(tag, manifest) -> str:
    table = manifest.counts()
    parts = ", ".join(f"{db}={sum(row.values())}" for db, row in sorted(table.items()))
    return f"{tag}: {len(manifest)} samples ({parts})"


def _run_one_training(net, train_set, val_set, cfg, sched, history_path, verbose):
    from . import optim

    def on_iteration(iteration, loss, epoch, lr):
        if verbose:
            print(f"iter {iteration} epoch {epoch} lr {lr:.6f} loss {loss:.6f}")

    def on_epoch(epoch, top1, top2):
        if top1 is not None:
            print(f"epoch {epoch} val_top1 {top1:.2f} val_top2 {top2:.2f}")

    net, history = optim.train(net, train_set, val_set, cfg, sched,
                               on_iteration=on_iteration, on_epoch=on_epoch)
    history.write_csv(history_path)
    return net, history


def cmd_train(args) -> int:
    from . import data as data_mod
    from . import evaluation, nn, optim
    from .ioutil import atomic_write_text

    manifest = data_mod.load_prepared(args.data)
    os.makedirs(args.out, exist_ok=True)

    if args.protocol == "crossdb" and not args.eval_db:
        print("error: --protocol crossdb requires --eval-db", file=sys.stderr)
        return 2
    epochs = args.epochs
    if epochs is None:
        epochs = 100 if args.protocol == "crossdb" else 200

    cfg = optim.TrainConfig(
        batch_size=args.batch_size, epochs=epochs,
        bias_lr_multiplier=args.bias_lr_multiplier,
        momentum=args.momentum, weight_decay=args.weight_decay,
        seed=args.seed, dtype=args.precision,
        augment=not args.no_augment,
    )
    config = nn.default_config(in_channels=1, width_divisor=args.width_divisor)

    def make_schedule(train_size):
        max_iter = cfg.epochs * math.ceil(train_size / cfg.batch_size)
        return optim.LrSchedule(base_lr=args.base_lr, max_iter=max_iter,
                                power=args.power, policy=args.lr_policy,
                                gamma=args.gamma,
                                step_size=args.step_size or 0)

    def run(tag, train_set, val_set, test_set, fold_seed, ckpt, hist):
        print(_composition_line(f"{tag} train", train_set))
        print(_composition_line(f"{tag} val", val_set))
        print(_composition_line(f"{tag} test", test_set))
        net = nn.build_network(config, seed=fold_seed, dtype=cfg.dtype,
                               bias_lr_multiplier=cfg.bias_lr_multiplier)
        fold_cfg = optim.TrainConfig(
            batch_size=cfg.batch_size, epochs=cfg.epochs,
            bias_lr_multiplier=cfg.bias_lr_multiplier, momentum=cfg.momentum,
            weight_decay=cfg.weight_decay, seed=fold_seed, dtype=cfg.dtype,
            augment=cfg.augment)
        net, _ = _run_one_training(net, train_set, val_set, fold_cfg,
                                   make_schedule(len(train_set)),
                                   os.path.join(args.out, hist), args.verbose)
        optim.save_checkpoint(net, os.path.join(args.out, ckpt))
        metrics = evaluation.evaluate(net, test_set, views=args.views,
                                      batch_size=cfg.batch_size)
        print(f"{tag} test top1 {metrics.top1:.2f} top2 {metrics.top2:.2f}")
        return metrics

    if args.protocol == "kfold":
        split = data_mod.kfold_subject_split(manifest, k=args.k, seed=args.seed)
        fold_metrics = []
        for i, fold in enumerate(split.folds):
            metrics = run(
                f"fold {i}",
                manifest.subset(fold.train_indices),
                manifest.subset(fold.val_indices),
                manifest.subset(fold.test_indices),
                args.seed + i,
                f"fold{i}.ckpt", f"fold{i}_history.csv")
            fold_metrics.append(metrics)
        final = evaluation.aggregate_folds(fold_metrics)
    elif args.protocol == "crossdb":
        train_all, test_set = data_mod.cross_db_split(manifest, args.eval_db)
        train_set, val_set = _carve_validation(train_all, args.val_fraction,
                                               args.seed)
        final = run("crossdb", train_set, val_set, test_set, args.seed,
                    "model.ckpt", "history.csv")
    else:  # predefined
        roles = {u: manifest.usage_indices(u) for u in ("train", "val", "test")}
        for u, idx in roles.items():
            if len(idx) == 0:
                print(f"error: predefined protocol needs usage={u} samples",
                      file=sys.stderr)
                return 2
        final = run("predefined",
                    manifest.subset(roles["train"]),
                    manifest.subset(roles["val"]),
                    manifest.subset(roles["test"]),
                    args.seed, "model.ckpt", "history.csv")

    report = evaluation.format_report(final, title=f"{args.protocol} evaluation "
                                                   f"(views={args.views})")
    atomic_write_text(os.path.join(args.out, "metrics.txt"), report)
    atomic_write_text(os.path.join(args.out, "metrics.csv"),
                      evaluation.flat_report(final))
    print(report, end="")
    return 0


def _carve_validation(train_all, fraction, seed):
    """Split a held-in validation set off the training data by subject."""
    import numpy as np

    from . import data as data_mod

    subjects = sorted(set(train_all.subjects))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    n_val = max(1, int(round(fraction * len(subjects))))
    val_subjects = {subjects[i] for i in order[:n_val]}
    val_idx = [i for i, s in enumerate(train_all.subjects) if s in val_subjects]
    train_idx = [i for i, s in enumerate(train_all.subjects) if s not in val_subjects]
    if not train_idx:
        from .errors import DataError
        raise DataError("validation carve-out consumed every training subject")
    return train_all.subset(np.array(train_idx)), train_all.subset(np.array(val_idx))


def cmd_eval(args) -> int:
    from . import data as data_mod
    from . import evaluation, optim
    from .ioutil import atomic_write_text

    if not os.path.exists(args.checkpoint):
        print(f"error: no such checkpoint: {args.checkpoint}", file=sys.stderr)
        return 2
    net = optim.load_checkpoint(args.checkpoint)
    manifest = data_mod.load_prepared(args.data)
    if args.usage:
        idx = manifest.usage_indices(args.usage)
        manifest = manifest.subset(idx)
    metrics = evaluation.evaluate(net, manifest, views=args.views)
    report = evaluation.format_report(metrics, title=f"Evaluation (views={args.views})")
    print(report, end="")
    if args.out:
        atomic_write_text(args.out, evaluation.flat_report(metrics))
        print(f"wrote {args.out}")
    return 0


def cmd_opcount(args) -> int:
    from . import nn

    config = nn.default_config(in_channels=args.channels,
                               width_divisor=args.width_divisor)
    counts = nn.count_operations(config)
    show_reference = args.width_divisor == 1
    print(f"Per-layer multiply-accumulates, {args.channels}-channel "
          f"{config.input_size[0]}x{config.input_size[1]} input")
    header = f"{'layer':<14}{'MACs':>14}"
    if show_reference:
        header += f"{'published':>14}{'deviation':>12}"
    print(header)
    for name, macs in counts.per_layer:
        if macs == 0:
            continue
        line = f"{name:<14}{macs:>14,}"
        if show_reference and name in nn.STOCK_REFERENCE_MACS:
            ref = nn.STOCK_REFERENCE_MACS[name]
            deviation = 100.0 * (macs - ref) / ref
            line += f"{ref:>14,}{deviation:>+11.1f}%"
        print(line)
    print(f"{'total':<14}{counts.total:>14,}")
    if show_reference:
        print(f"published total is ~{nn.STOCK_REFERENCE_TOTAL:,} "
              "(order-of-magnitude reference)")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    records = gradcheck.run_all(step=args.step, seed=args.seed)
    failed = [r for r in records if not r.passed]
    for record in records:
        print(record)
    if failed:
        print(f"{len(failed)} of {len(records)} checks failed", file=sys.stderr)
        return 1
    print(f"all {len(records)} gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fernet",
        description="Facial expression recognition: training, evaluation, "
                    "and preprocessing tools.")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (default 1; or FERNET_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest CSV/manifest sources into a "
                                       "prepared dataset directory")
    p.add_argument("--fer2013", help="path to the FER2013 release CSV")
    p.add_argument("--manifest", action="append",
                   help="manifest CSV (path,label,subject_id,database_id,usage); "
                        "repeatable")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("register", help="align faces to the mean landmark shape")
    p.add_argument("--images", required=True, help="directory of input images")
    p.add_argument("--landmarks", required=True,
                   help="directory of 49-point sidecar files (<stem>.txt)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=48, help="output side length")
    p.add_argument("--margin", type=float, default=0.25,
                   help="bounding-box margin fraction")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("train", help="train under a protocol and write "
                                     "checkpoints, history, and metrics")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--protocol", required=True,
                   choices=("kfold", "crossdb", "predefined"))
    p.add_argument("--k", type=int, default=5, help="fold count (kfold)")
    p.add_argument("--eval-db", help="held-out database id (crossdb)")
    p.add_argument("--epochs", type=int, default=None,
                   help="default 200 (kfold/predefined) or 100 (crossdb)")
    p.add_argument("--batch-size", type=int, default=250)
    p.add_argument("--base-lr", type=float, default=0.01)
    p.add_argument("--power", type=float, default=0.5,
                   help="polynomial decay exponent")
    p.add_argument("--lr-policy", choices=("poly", "fixed", "step", "exp"),
                   default="poly")
    p.add_argument("--gamma", type=float, default=0.1,
                   help="decay factor for step/exp policies")
    p.add_argument("--step-size", type=int, default=None,
                   help="iterations per step-policy drop")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--bias-lr-multiplier", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width-divisor", type=int, default=1,
                   help="divide all channel counts (1, 2, 4, 8, 16)")
    p.add_argument("--precision", choices=("float32", "float64"),
                   default="float32")
    p.add_argument("--no-augment", action="store_true",
                   help="disable per-epoch crop/flip view sampling")
    p.add_argument("--val-fraction", type=float, default=0.1,
                   help="subject fraction carved out for validation (crossdb)")
    p.add_argument("--views", type=int, choices=(1, 11), default=1,
                   help="test-time view mode")
    p.add_argument("--verbose", action="store_true",
                   help="print every iteration's loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a prepared dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--views", type=int, choices=(1, 11), default=1)
    p.add_argument("--usage", choices=("train", "val", "test"),
                   help="restrict to samples with this predefined usage")
    p.add_argument("--out", help="write metric,value report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("opcount", help="per-layer multiply-accumulate table")
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--width-divisor", type=int, default=1)
    p.set_defaults(func=cmd_opcount)

    p = sub.add_parser("gradcheck", help="finite-difference check of every "
                                         "backward pass")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _configure_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import DivergenceError, FernetError
    try:
        return args.func(args) or 0
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FernetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
