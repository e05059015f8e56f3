"""Command-line entry point for the full workflow: data generation,
training, evaluation, the two-stage pipeline, benchmarking, heatmaps, and
bin histograms.

Exit codes: 0 success, 1 runtime failure (training divergence included),
2 usage error.  Reports go to stdout; artifacts only to flagged paths.
The SWPNET_SEED environment variable overrides the default of every --seed
flag; an explicit flag wins over the environment.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


class UsageError(ValueError):
    pass


def _env_seed(default: int = 0) -> int:
    try:
        return int(os.environ.get("SWPNET_SEED", default))
    except ValueError:
        return default


def _add_seed(parser, default: int = 0):
    parser.add_argument("--seed", type=int, default=_env_seed(default),
                        help="global rng seed (env SWPNET_SEED overrides this default)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swpnet",
        description="Residual networks with spatially-weighted pooling and "
                    "binned-box localisation, at desk scale.",
        epilog="exit codes: 0 success, 1 runtime failure, 2 usage error")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen-data", formatter_class=fmt,
                       help="render a synthetic glyph dataset with exact boxes")
    p.add_argument("--classes", type=int, default=4, help="number of glyph classes")
    p.add_argument("--per-class", type=int, default=25, help="images per class")
    p.add_argument("--canvas", type=int, default=256, help="square canvas side in pixels")
    p.add_argument("--out-dir", required=True, help="output directory for images and manifest")
    p.add_argument("--margin", type=float, default=0.25, help="similarity margin between classes")
    p.add_argument("--scale-min", type=float, default=0.45, help="min glyph width fraction")
    p.add_argument("--scale-max", type=float, default=0.70, help="max glyph width fraction")
    p.add_argument("--jitter", type=float, default=0.10, help="centre jitter fraction")
    p.add_argument("--clutter", type=int, default=3, help="background clutter shapes per image")
    p.add_argument("--split", default="train", help="split tag written to the manifest")
    _add_seed(p)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train a classifier or localiser and write a checkpoint")
    p.add_argument("--task", choices=("cls", "loc"), default="cls", help="training task")
    p.add_argument("--arch", type=int, choices=(18, 34, 50), default=50, help="depth variant")
    p.add_argument("--width", type=float, default=1.0, help="channel width multiplier")
    p.add_argument("--swp", action="store_true",
                   help="use a spatially-weighted pooling head (warns on --task loc)")
    p.add_argument("--swp-masks", type=int, default=9, help="mask count for the SWP head")
    p.add_argument("--fc-nodes", type=int, default=1024, help="hidden nodes behind the SWP head")
    p.add_argument("--input-size", type=int, default=224, help="network input side in pixels")
    p.add_argument("--manifest", required=True, help="training manifest path")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--resume", default=None, help="checkpoint to continue training from")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--batch-size", type=int, default=8, help="minibatch size")
    p.add_argument("--lr", type=float, default=0.01, help="learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--weight-decay", type=float, default=1e-4, help="L2 weight decay")
    p.add_argument("--scale-min", type=float, default=0.8, help="augmentation min rescale")
    p.add_argument("--scale-max", type=float, default=1.3, help="augmentation max rescale")
    p.add_argument("--early-stop", type=float, default=None,
                   help="stop once train accuracy reaches this percentage")
    _add_seed(p)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="evaluate a checkpoint on a manifest (top-k or per-output bins)")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--manifest", required=True, help="eval manifest path")
    p.add_argument("--batch-size", type=int, default=32, help="eval batch size")
    p.add_argument("--raw", action="store_true",
                   help="localisation eval on raw resized images instead of centre crops")

    p = sub.add_parser("pipeline", formatter_class=fmt,
                       help="two-stage localise-then-classify evaluation")
    p.add_argument("--loc", required=True, help="localiser checkpoint")
    p.add_argument("--cls", required=True, help="classifier checkpoint")
    p.add_argument("--manifest", required=True, help="eval manifest path")
    p.add_argument("--oracle", action="store_true",
                   help="replace the localiser with ground-truth boxes")
    p.add_argument("--batch-size", type=int, default=32, help="eval batch size")

    p = sub.add_parser("bench", formatter_class=fmt,
                       help="inference throughput over synthetic in-memory batches")
    p.add_argument("--ckpt", required=True, help="model checkpoint (classifier stage)")
    p.add_argument("--loc-ckpt", default=None, help="optional localiser checkpoint (bench the pipeline)")
    p.add_argument("--batches", default="1,32", help="comma-separated batch sizes")
    p.add_argument("--images", type=int, default=10000, help="images per measurement")
    _add_seed(p)

    p = sub.add_parser("heatmap", formatter_class=fmt,
                       help="export SWP output heatmaps as binary graymaps")
    p.add_argument("--ckpt", required=True, help="checkpoint with an SWP head")
    p.add_argument("--manifest", required=True, help="manifest providing input images")
    p.add_argument("--out-dir", required=True, help="directory for .pgm files")
    p.add_argument("--limit", type=int, default=4, help="number of images to export")
    p.add_argument("--rows", type=int, default=None, help="heatmap grid rows (default: mask count)")
    p.add_argument("--cols", type=int, default=None, help="heatmap grid cols (default: channels)")

    p = sub.add_parser("analyze-bins", formatter_class=fmt,
                       help="bin-occupancy histograms of manifest boxes (CSV per output)")
    p.add_argument("--manifest", required=True, help="manifest path")
    p.add_argument("--out-prefix", required=True, help="output prefix for the four CSV files")
    p.add_argument("--preprocess", action="store_true",
                   help="apply train-time rescale+crop before binning")
    p.add_argument("--crop", type=int, default=224, help="crop size when --preprocess is set")
    p.add_argument("--scale-min", type=float, default=0.8, help="min rescale when --preprocess is set")
    p.add_argument("--scale-max", type=float, default=1.3, help="max rescale when --preprocess is set")
    _add_seed(p)

    return parser


# -- command bodies -----------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .datasynth import generate_dataset, manifest_path

    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    if args.per_class < 1:
        raise UsageError("--per-class must be at least 1")
    manifest = generate_dataset(args.classes, args.per_class, args.canvas, args.out_dir,
                                similarity_margin=args.margin, seed=args.seed, split=args.split,
                                scale_range=(args.scale_min, args.scale_max),
                                center_jitter=args.jitter, clutter=args.clutter)
    print(f"manifest: {manifest_path(args.out_dir, args.split)}")
    print(f"classes: {manifest.n_classes}  images: {len(manifest)}")
    return 0


def _train_preprocess(args):
    from .datasynth import PreprocessConfig

    eval_scale = max(args.input_size, round(args.input_size * 256 / 224))
    return PreprocessConfig(crop_size=args.input_size, eval_scale=eval_scale,
                            scale_range=(args.scale_min, args.scale_max), seed=args.seed)


def cmd_train(args) -> int:
    from .datasynth import load_manifest
    from .models import (ModelConfig, build_localisation_model, build_model,
                         load_checkpoint, save_checkpoint)
    from .swp import SWPSpec
    from .models import feature_map_extent
    from .training import (TrainConfig, history_to_csv, train_classifier, train_localiser)

    if args.swp and args.task == "loc":
        print("warning: an SWP head on the localiser reduced accuracy in earlier runs; "
              "proceeding anyway", file=sys.stderr)

    manifest = load_manifest(args.manifest)
    if args.resume:
        model = load_checkpoint(args.resume)
        if (model.config.head == "loc_head") != (args.task == "loc"):
            raise UsageError(f"--resume checkpoint head {model.config.head!r} "
                             f"does not fit task {args.task!r}")
    else:
        if args.task == "loc":
            config = ModelConfig(depth_variant=args.arch, num_classes=manifest.n_classes,
                                 width_multiplier=args.width, input_size=args.input_size,
                                 head="loc_head")
            extent = feature_map_extent(config)
            swp = SWPSpec(args.swp_masks, extent, extent) if args.swp else None
            model = build_localisation_model(config, seed=args.seed, swp_spec=swp,
                                             fc_nodes=args.fc_nodes)
        else:
            head = "swp_head" if args.swp else "plain_avgpool_fc"
            config = ModelConfig(depth_variant=args.arch, num_classes=manifest.n_classes,
                                 width_multiplier=args.width, input_size=args.input_size,
                                 head=head)
            extent = feature_map_extent(config)
            swp = SWPSpec(args.swp_masks, extent, extent) if args.swp else None
            model = build_model(config, seed=args.seed, swp_spec=swp, fc_nodes=args.fc_nodes)

    train_config = TrainConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                               batch_size=args.batch_size, max_epochs=args.epochs, seed=args.seed,
                               early_stop_accuracy=args.early_stop)
    preprocess = _train_preprocess(args)
    if args.task == "loc":
        history = train_localiser(model, manifest, train_config, preprocess)
    else:
        history = train_classifier(model, manifest, train_config, preprocess)

    save_checkpoint(model, args.out)
    history_path = Path(str(args.out) + ".history.csv")
    if args.resume and history_path.exists():
        old = history_path.read_text(encoding="utf-8").rstrip("\n").splitlines()
        body = [f"{h.epoch},{h.steps},{h.loss!r},{h.accuracy!r},{h.lr!r}" for h in history]
        history_path.write_text("\n".join(old + body) + "\n", encoding="utf-8")
    else:
        history_to_csv(history, history_path)
    last = history[-1]
    print(f"checkpoint: {args.out}")
    print(f"epochs: {last.epoch + 1}  steps: {last.steps}  "
          f"loss: {last.loss:.4f}  accuracy: {last.accuracy:.2f}%")
    return 0


def cmd_eval(args) -> int:
    from .datasynth import load_manifest
    from .evaluation import evaluate_localisation, evaluate_topk
    from .models import load_checkpoint

    model = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    if model.config.head == "loc_head":
        mode = "none" if args.raw else "center"
        report, stats = evaluate_localisation(model, manifest, preprocess=mode,
                                              batch_size=args.batch_size)
        print(report.summary())
        print(stats.summary())
    else:
        report = evaluate_topk(model, manifest, batch_size=args.batch_size)
        print(report.summary())
    return 0


def cmd_pipeline(args) -> int:
    from .datasynth import load_manifest
    from .evaluation import TwoStagePipeline, evaluate_topk
    from .models import load_checkpoint

    loc_model = None if args.oracle else load_checkpoint(args.loc)
    cls_model = load_checkpoint(args.cls)
    manifest = load_manifest(args.manifest)
    pipeline = TwoStagePipeline(loc_model, cls_model)
    report = evaluate_topk(pipeline, manifest, batch_size=args.batch_size)
    print(report.summary())
    return 0


def cmd_bench(args) -> int:
    from .evaluation import TwoStagePipeline, bench_fps
    from .models import load_checkpoint

    try:
        batch_sizes = tuple(int(tok) for tok in args.batches.split(",") if tok)
    except ValueError as err:
        raise UsageError(f"--batches must be comma-separated integers: {err}") from err
    if not batch_sizes or any(b < 1 for b in batch_sizes):
        raise UsageError("--batches needs at least one positive batch size")
    cls_model = load_checkpoint(args.ckpt)
    target = cls_model
    if args.loc_ckpt:
        target = TwoStagePipeline(load_checkpoint(args.loc_ckpt), cls_model)
    report = bench_fps(target, batch_sizes=batch_sizes, n_images=args.images, seed=args.seed)
    print(report.summary())
    return 0


def cmd_heatmap(args) -> int:
    from .autodiff import Tensor
    from .datasynth import center_crop_transform, load_image, load_manifest, to_network_input
    from .evaluation import default_eval_config
    from .models import load_checkpoint
    from .swp import swp_heatmap_export

    model = load_checkpoint(args.ckpt)
    if model.config.head != "swp_head":
        raise UsageError("--ckpt must carry an SWP head")
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = default_eval_config(model.config.input_size)
    k = model.head.swp.spec.num_masks
    written = []
    for rec in manifest.records[:args.limit]:
        crop = center_crop_transform(load_image(rec), cfg)[0]
        vec = model.swp_vector(Tensor(to_network_input([crop]))).data[0]
        rows = args.rows or k
        cols = args.cols or (vec.size // rows)
        path = out_dir / (Path(rec.path).stem + ".pgm")
        swp_heatmap_export(vec, (rows, cols), path)
        written.append(path)
    for path in written:
        print(f"heatmap: {path}")
    return 0


def cmd_analyze_bins(args) -> int:
    from .binning import LOCATION_BINS, SIZE_BINS
    from .datasynth import PreprocessConfig, bin_histogram, load_manifest, save_histograms

    manifest = load_manifest(args.manifest)
    preprocess = None
    if args.preprocess:
        eval_scale = max(args.crop, round(args.crop * 256 / 224))
        preprocess = PreprocessConfig(crop_size=args.crop, eval_scale=eval_scale,
                                      scale_range=(args.scale_min, args.scale_max), seed=args.seed)
    counts = bin_histogram(manifest, LOCATION_BINS, SIZE_BINS, preprocess=preprocess)
    paths = save_histograms(counts, args.out_prefix)
    for key, path in zip(("cx", "cy", "w", "h"), paths):
        print(f"{key}: {path} (total {int(counts[key].sum())})")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "bench": cmd_bench,
    "heatmap": cmd_heatmap,
    "analyze-bins": cmd_analyze_bins,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 2
    except Exception as err:  # runtime failures map to exit 1
        print(f"error: {err}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
