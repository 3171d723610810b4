"""Command-line entry points: train | eval | cv | synth | inspect.

Exit codes: 0 success, 1 user/input error, 2 numeric failure. Every command
is deterministic given its flags; seeds are flags, never wall-clock. Flags
override values from an optional ``--config`` key=value file.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import (
    ClassSet,
    l2_normalize_classes,
    parse_class_embeddings,
    parse_image_features,
    parse_split,
    serialize_class_embeddings,
    serialize_image_features,
    serialize_split,
    apply_zscore,
    fit_zscore,
    subset_classes,
    subset_images,
)
from .errors import FormatError, NumericError, ValidationError
from .evaluation import (
    evaluate_zero_shot,
    evaluate_zero_shot_fused,
    top_items_per_matrix,
    write_matrix_top_csv,
    write_per_class_csv,
    write_predictions_csv,
)
from .fileio import atomic_write_text
from .loss import empirical_risk
from .persistence import load_model, save_model
from .selection import (
    PruneConfig,
    cross_validate_k,
    train_with_pruning,
    write_cv_table,
    write_prune_history,
)
from .synthesis import PlantedSpec, generate_planted, write_truth_csv
from .trainer import RANKING_SAMPLED, MAX_VIOLATOR, TrainConfig, train

DEFAULT_GRID = "2,4,6,8,10"


class _Parser(argparse.ArgumentParser):
    """argparse treats flag mistakes as exit 2; our contract says exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _load_config_file(path) -> dict[str, str]:
    overrides = {}
    for lineno, raw in enumerate(_read(path).splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key=value, got '{line}'")
        key, value = line.split("=", 1)
        overrides[key.strip().replace("-", "_")] = value.strip()
    return overrides


def _apply_config_defaults(parser: argparse.ArgumentParser, overrides: dict[str, str]):
    known = {a.dest: a for a in parser._actions}
    for key, raw in overrides.items():
        if key == "config":
            continue
        if key not in known:
            raise ValidationError(f"unknown config key '{key}'")
        action = known[key]
        if isinstance(action, argparse._StoreTrueAction):
            action.default = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                action.default = action.type(raw)
            except ValueError:
                raise ValidationError(
                    f"config key '{key}': cannot convert '{raw}'"
                ) from None
        else:
            action.default = raw
        action.required = False


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="latem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    commands: dict[str, argparse.ArgumentParser] = {}

    def add_data_flags(p, with_split=True):
        p.add_argument("--features", required=True, help="image features csv")
        p.add_argument("--classes", required=True, help="class embeddings csv")
        if with_split:
            p.add_argument("--split", required=True, help="zero-shot split file")

    p = sub.add_parser("train", help="train a model and save it")
    add_data_flags(p)
    p.add_argument("--k", type=int, default=None, help="number of latent matrices")
    p.add_argument("--eta", type=float, required=True, help="constant learning rate")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--loss-variant",
        choices=[RANKING_SAMPLED, MAX_VIOLATOR],
        default=RANKING_SAMPLED,
    )
    p.add_argument("--include-val", action="store_true",
                   help="train on the union of [train] and [val] classes")
    p.add_argument("--prune", action="store_true", help="select K by pruning")
    p.add_argument("--k-init", type=int, default=16)
    p.add_argument("--prune-period", type=int, default=5)
    p.add_argument("--support-fraction", type=float, default=0.05)
    p.add_argument("--cumulative-support", action="store_true",
                   help="prune on cumulative instead of per-window counts")
    p.add_argument("--prune-history-out", default=None,
                   help="also write the prune history as csv")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--config", default=None, help="key=value defaults file")
    commands["train"] = p

    p = sub.add_parser("eval", help="zero-shot evaluation of a saved model")
    add_data_flags(p)
    p.add_argument("--model", default=None, help="model file")
    p.add_argument("--late-fusion", default=None,
                   help="comma-separated model files; --classes then takes a "
                        "matching comma-separated list of embedding files")
    p.add_argument("--out-dir", default=".", help="directory for report csvs")
    p.add_argument("--config", default=None)
    commands["eval"] = p

    p = sub.add_parser("cv", help="cross-validate the number of matrices")
    add_data_flags(p)
    p.add_argument("--grid", default=DEFAULT_GRID, help="comma-separated K values")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extra-folds", type=int, default=0,
                   help="additional random zero-shot folds to average over")
    p.add_argument("--out", required=True, help="output table csv")
    p.add_argument("--config", default=None)
    commands["cv"] = p

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    p.add_argument("--k-star", type=int, default=4)
    p.add_argument("--dx", type=int, default=16)
    p.add_argument("--dy", type=int, default=8)
    p.add_argument("--train-classes", type=int, default=40)
    p.add_argument("--test-classes", type=int, default=10)
    p.add_argument("--images-per-class", type=int, default=50)
    p.add_argument("--sigma", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    commands["synth"] = p

    p = sub.add_parser("inspect", help="per-matrix top-ranked image retrieval")
    add_data_flags(p, with_split=False)
    p.add_argument("--model", required=True)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--config", default=None)
    commands["inspect"] = p

    return parser, commands


def cmd_train(args) -> int:
    images = parse_image_features(_read(args.features))
    classes = l2_normalize_classes(parse_class_embeddings(_read(args.classes)))
    split = parse_split(_read(args.split))
    train_ids = set(split.train_classes)
    if args.include_val:
        train_ids |= set(split.val_classes)
    imgs = subset_images(images, train_ids)
    if imgs.n == 0:
        raise ValidationError("no images belong to the training classes")
    stats = fit_zscore(imgs, train_ids)
    imgs_n = apply_zscore(imgs, stats)
    cls = subset_classes(classes, train_ids)
    if args.prune:
        prune_cfg = PruneConfig(args.k_init, args.prune_period, args.support_fraction)
        cfg = TrainConfig(
            k=args.k_init, eta=args.eta, seed=args.seed,
            epochs=args.epochs, loss_variant=args.loss_variant,
        )
        model = train_with_pruning(
            prune_cfg, cfg, imgs_n, cls,
            norm_stats=stats, cumulative=args.cumulative_support,
        )
        if args.prune_history_out:
            write_prune_history(model.metadata["prune_history"], args.prune_history_out)
    else:
        if args.k is None:
            raise ValidationError("--k is required unless --prune is given")
        cfg = TrainConfig(
            k=args.k, eta=args.eta, seed=args.seed,
            epochs=args.epochs, loss_variant=args.loss_variant,
        )
        model = train(cfg, imgs_n, cls, norm_stats=stats)
    model.metadata["cli"] = {
        "features": str(args.features),
        "classes": str(args.classes),
        "split": str(args.split),
        "k": args.k,
        "eta": args.eta,
        "epochs": args.epochs,
        "seed": args.seed,
        "loss_variant": args.loss_variant,
        "include_val": bool(args.include_val),
        "prune": bool(args.prune),
        "k_init": args.k_init,
        "prune_period": args.prune_period,
        "support_fraction": args.support_fraction,
        "cumulative_support": bool(args.cumulative_support),
        "out": str(args.out),
    }
    save_model(model, args.out)
    risk = empirical_risk(model, imgs_n, cls)
    print(f"final empirical risk: {risk!r}")
    print(f"model written to {args.out} (K={model.k})")
    return 0


def _reorder_classes(cs: ClassSet, order: tuple[str, ...]) -> ClassSet:
    rows = [cs.index_of(cid) for cid in order]
    return ClassSet(order, cs.embeddings[rows], cs.source_tag)


def cmd_eval(args) -> int:
    images = parse_image_features(_read(args.features))
    split = parse_split(_read(args.split))
    test_ids = split.test_classes
    test_imgs = subset_images(images, test_ids)
    if test_imgs.n == 0:
        raise ValidationError("no images belong to the test classes")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.late_fusion:
        model_paths = [p for p in args.late_fusion.split(",") if p]
        class_paths = [p for p in args.classes.split(",") if p]
        if len(model_paths) != len(class_paths):
            raise ValidationError(
                f"{len(model_paths)} fused models but {len(class_paths)} class files"
            )
        models = [load_model(p) for p in model_paths]
        classsets = []
        for path in class_paths:
            cs = subset_classes(
                l2_normalize_classes(parse_class_embeddings(_read(path))), test_ids
            )
            classsets.append(cs)
        order = classsets[0].class_ids
        classsets = [classsets[0]] + [_reorder_classes(cs, order) for cs in classsets[1:]]
        report = evaluate_zero_shot_fused(models, test_imgs, classsets)
    else:
        if args.model is None:
            raise ValidationError("either --model or --late-fusion is required")
        model = load_model(args.model)
        classes = l2_normalize_classes(parse_class_embeddings(_read(args.classes)))
        report = evaluate_zero_shot(model, test_imgs, subset_classes(classes, test_ids))
    write_per_class_csv(report, out_dir / "per_class.csv")
    write_predictions_csv(report, out_dir / "predictions.csv")
    print(f"average per-class top-1 accuracy: {report.accuracy!r}")
    return 0


def cmd_cv(args) -> int:
    images = parse_image_features(_read(args.features))
    classes = l2_normalize_classes(parse_class_embeddings(_read(args.classes)))
    split = parse_split(_read(args.split))
    if not split.val_classes:
        raise ValidationError("cross-validation requires a non-empty [val] partition")
    grid = [int(tok) for tok in args.grid.split(",") if tok.strip()]
    if not grid:
        raise ValidationError("empty cross-validation grid")
    available = set(split.train_classes) | set(split.val_classes)
    imgs = subset_images(images, available)
    cls = subset_classes(classes, available)
    base = TrainConfig(k=grid[0], eta=args.eta, seed=args.seed, epochs=args.epochs)
    extra = ()
    if args.extra_folds > 0:
        from .data import make_random_splits

        counts = (len(split.train_classes), len(split.val_classes), 0)
        extra = make_random_splits(cls, counts, args.seed, args.extra_folds)
    best_k, table = cross_validate_k(grid, base, imgs, cls, split, extra_folds=extra)
    write_cv_table(table, args.out)
    print(f"selected K: {best_k}")
    return 0


def cmd_synth(args) -> int:
    spec = PlantedSpec(
        k_star=args.k_star,
        d_x=args.dx,
        d_y=args.dy,
        n_train_classes=args.train_classes,
        n_test_classes=args.test_classes,
        images_per_class=args.images_per_class,
        noise_sigma=args.sigma,
        seed=args.seed,
    )
    images, classes, split, truth = generate_planted(spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "features.csv", serialize_image_features(images))
    atomic_write_text(out_dir / "classes.csv", serialize_class_embeddings(classes))
    atomic_write_text(out_dir / "split.txt", serialize_split(split))
    write_truth_csv(truth, out_dir / "truth.csv")
    print(
        f"wrote {images.n} images over {classes.n} classes "
        f"(K*={spec.k_star}, sigma={spec.noise_sigma}) to {out_dir}"
    )
    return 0


_GNUPLOT_TEMPLATE = """\
# histogram of achieved scores per matrix, from {csv}
set datafile separator ","
set style fill solid 0.6
set xlabel "score"
set ylabel "count"
binwidth = {binwidth!r}
bin(x) = binwidth * floor(x / binwidth)
plot for [k=0:{kmax}] "{csv}" every ::1 \\
     using (bin(($1 == k) ? $4 : 1/0)):(1.0) \\
     smooth freq with boxes title sprintf("matrix %d", k)
"""


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    images = parse_image_features(_read(args.features))
    classes = l2_normalize_classes(parse_class_embeddings(_read(args.classes)))
    if model.norm_stats is not None:
        images = apply_zscore(images, model.norm_stats)
    groups = top_items_per_matrix(model, images, classes, args.top)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_matrix_top_csv(groups, out_dir / "matrix_top.csv")
    scores = [s for members in groups.values() for _, s in members]
    spread = (max(scores) - min(scores)) if len(scores) > 1 else 1.0
    binwidth = spread / 20.0 if spread > 0 else 1.0
    atomic_write_text(
        out_dir / "matrix_top.gp",
        _GNUPLOT_TEMPLATE.format(csv="matrix_top.csv", kmax=model.k - 1, binwidth=binwidth),
    )
    for k in sorted(groups):
        print(f"matrix {k}: {len(groups[k])} ranked images")
    return 0


_HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "synth": cmd_synth,
    "inspect": cmd_inspect,
}


def _peek_config(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        parser, commands = build_parser()
        cfg_path = _peek_config(argv)
        if cfg_path is not None and argv and argv[0] in commands:
            _apply_config_defaults(commands[argv[0]], _load_config_file(cfg_path))
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        return _HANDLERS[args.command](args)
    except (FormatError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def app() -> None:
    raise SystemExit(main())
