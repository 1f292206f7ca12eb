"""Command-line entry point.

Subcommands cover the full experiment lifecycle::

    tilevote synth  --out data --seed 0            # synthetic dataset
    tilevote split  --data data --val 8 --test 8 --out run   # manifest
    tilevote tile   --data data --manifest run/manifest.csv --grid 6x7 --out tiles
    tilevote train  --tiles tiles --out run/6x7
    tilevote eval   --tiles tiles --run run/6x7 --evaluator knn --vote probability --out run/6x7/eval
    tilevote cv     --tiles tiles --manifest run/manifest.csv --folds 5 --out run/cv
    tilevote cam    --tiles tiles --run run/6x7 --out run/6x7/cam
    tilevote sweep  --data data --manifest run/manifest.csv --out run/sweep

Settings resolve in three layers: built-in defaults, then ``--config FILE``
(flat key=value), then explicit flags. Every command writes its resolved
config next to its outputs, so a run can be repeated from that file alone.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence during training, 5 missing prerequisite artifact.
"""

import argparse
import os
import sys
from dataclasses import replace

from . import __version__
from .config import (
    EVALUATOR_CHOICES,
    VOTE_CHOICES,
    ExperimentConfig,
    load_config,
    write_resolved,
)
from .datasets import (
    CLASS_NAMES,
    SplitManifest,
    SynthConfig,
    assert_leak_free,
    load_source_image,
    load_tile_split,
    make_folds,
    scan_dataset,
    stratified_split,
    tile_dataset,
    write_synthetic_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    MissingArtifactError,
    TileVoteError,
)
from .knn import build_index, load_embeddings
from .model import load_checkpoint
from .pipeline import (
    SWEEP_GRIDS,
    export_train_embeddings,
    run_cv_summary_line,
    run_sweep,
    score_tiles,
    vote,
    write_report,
    write_tile_report,
)
from .saliency import METHODS, cam_stats, grad_cam, save_cam_stats, save_overlay_png, score_cam
from .trainer import normalize, run_cv, train

CKPT_NAME = "best.ckpt"
EMBED_NAME = "train_embeddings.csv"


# ---------------------------------------------------------------------------
# Plumbing
# ---------------------------------------------------------------------------

def _require_file(path, hint: str = "") -> str:
    if not os.path.isfile(path):
        raise MissingArtifactError(path, hint)
    return str(path)


def _require_dir(path, hint: str = "") -> str:
    if not os.path.isdir(path):
        raise MissingArtifactError(path, hint)
    return str(path)


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    for field_name, attr in (("grid", "grid"), ("seed", "seed"),
                             ("evaluator", "evaluator"), ("vote", "vote"),
                             ("data_root", "data"), ("out_dir", "out")):
        v = getattr(args, attr, None)
        if v is not None:
            overrides[field_name] = v
    return replace(cfg, **overrides) if overrides else cfg


def _out_dir(cfg: ExperimentConfig) -> str:
    if not cfg.out_dir:
        raise ConfigError("an output directory is required (--out DIR)")
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def _data_root(cfg: ExperimentConfig) -> str:
    if not cfg.data_root:
        raise ConfigError("a dataset root is required (--data DIR)")
    return _require_dir(cfg.data_root, "generate one with `tilevote synth`")


def _load_run(run_dir: str):
    """Checkpoint + normalization stats from a training output directory."""
    _require_dir(run_dir, "train first with `tilevote train`")
    ckpt = load_checkpoint(_require_file(os.path.join(run_dir, CKPT_NAME),
                                         "train first with `tilevote train`"))
    model = ckpt.to_model()
    try:
        mean = float(ckpt.metadata["norm_mean"])
        std = float(ckpt.metadata["norm_std"])
    except KeyError as e:
        raise DataError(f"checkpoint metadata lacks normalization stats ({e})") from None
    return ckpt, model, mean, std


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    sc = SynthConfig(images_per_class=args.images_per_class,
                     image_size=(args.height, args.width), seed=cfg.seed)
    written = write_synthetic_dataset(sc, out)
    write_resolved(cfg, out)
    print(f"wrote {len(written)} images ({args.images_per_class} per class, "
          f"{args.width}x{args.height}) under {out}")
    return 0


def cmd_split(cfg: ExperimentConfig, args) -> int:
    data = _data_root(cfg)
    out = _out_dir(cfg)
    ids_by_class = scan_dataset(data)
    manifest = stratified_split(ids_by_class, (None, args.val, args.test), cfg.seed)
    assert_leak_free(manifest)
    path = os.path.join(out, "manifest.csv")
    manifest.save_csv(path)
    write_resolved(cfg, out)
    counts = manifest.counts()
    print(f"manifest: {path}")
    print("  " + "  ".join(f"{s}={counts.get(s, 0)}" for s in ("train", "val", "test")))
    return 0


def cmd_tile(cfg: ExperimentConfig, args) -> int:
    data = _data_root(cfg)
    out = _out_dir(cfg)
    manifest = SplitManifest.load_csv(_require_file(args.manifest,
                                                    "create one with `tilevote split`"))
    counts = tile_dataset(manifest, data, cfg.grid_spec(), out)
    write_resolved(cfg, out)
    print(f"tiled {cfg.grid} -> {out}: "
          + "  ".join(f"{s}={n}" for s, n in sorted(counts.items())))
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    tiles_root = _require_dir(args.tiles, "create tiles with `tilevote tile`")
    out = _out_dir(cfg)
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    tr = load_tile_split(tiles_root, "train", model_cfg.input_size)
    va = load_tile_split(tiles_root, "val", model_cfg.input_size)
    res = train(model_cfg, train_cfg, tr, va, out_dir=out, quiet=not args.verbose)
    model = res.best.to_model()
    export_train_embeddings(model, tr, res.norm_mean, res.norm_std,
                            os.path.join(out, EMBED_NAME))
    write_resolved(cfg, out)
    print(f"best epoch {res.best_epoch}: val_acc={res.best_val_acc:.4f} "
          f"val_loss={res.best_val_loss:.4f} "
          f"({'early stop' if res.stopped_early else 'epoch budget'}; "
          f"checkpoint {res.checkpoint_path})")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    _, model, mean, std = _load_run(args.run)
    # scoring the test split must touch neither training nor validation
    # images: the kNN route reads the exported embedding dump instead.
    tiles = load_tile_split(_require_dir(args.tiles), args.split, model.config.input_size)
    index = None
    if cfg.evaluator == "knn":
        dump = _require_file(os.path.join(args.run, EMBED_NAME),
                             "re-run `tilevote train` to export training embeddings")
        ids, labels, emb = load_embeddings(dump)
        index = build_index(emb, labels, ids)
    ts = score_tiles(model, tiles, mean, std, cfg.evaluator, index=index, k=cfg.knn_k)
    if cfg.vote == "none":
        report = write_tile_report(ts, out)
        what = f"per-tile ({len(ts.tile_ids)} tiles)"
    else:
        report = write_report(vote(ts, cfg.vote), out)
        what = f"{cfg.vote} vote ({report.n_images} images)"
    write_resolved(cfg, out)
    print(f"{cfg.evaluator} {what}: accuracy={report.accuracy:.4f} "
          f"macro_f1={report.macro_f1:.4f}")
    return 0


def cmd_cv(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    tiles_root = _require_dir(args.tiles, "create tiles with `tilevote tile`")
    manifest = SplitManifest.load_csv(_require_file(args.manifest,
                                                    "create one with `tilevote split`"))
    model_cfg = cfg.model_config()
    folds = make_folds(manifest, k=args.folds, seed=cfg.seed)
    folds.save_csv(os.path.join(out, "fold_assignment.csv"))
    tr = load_tile_split(tiles_root, "train", model_cfg.input_size)
    results, mean_acc, std_acc = run_cv(model_cfg, cfg.train_config(), tr, folds,
                                        out_dir=out, quiet=not args.verbose)
    write_resolved(cfg, out)
    print(run_cv_summary_line(results, mean_acc, std_acc))
    return 0


def cmd_cam(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    _, model, mean, std = _load_run(args.run)
    tiles = load_tile_split(_require_dir(args.tiles), args.split, model.config.input_size)
    methods = list(METHODS) if args.method == "both" else [args.method]
    n = len(tiles) if args.limit is None else min(args.limit, len(tiles))
    stats = []
    for i in range(n):
        raw = tiles.x[i]
        xn = normalize(raw, mean, std, model.config.np_dtype)
        tape = model.forward(xn)
        for method in methods:
            sal = grad_cam(tape) if method == "grad_cam" else score_cam(model, xn)
            save_overlay_png(raw, sal, os.path.join(out, f"{tiles.tile_ids[i]}_{method}.png"))
            stats.append(cam_stats(tiles.tile_ids[i], sal))
    save_cam_stats(stats, os.path.join(out, "cam_stats.csv"))
    write_resolved(cfg, out)
    print(f"wrote {len(stats)} overlays for {n} tiles ({', '.join(methods)}) under {out}")
    return 0


class _ImageStore:
    """Lazy source-image loader so a sweep never holds a whole split in memory."""

    def __init__(self, root, manifest: SplitManifest):
        self._root = root
        self._label = {sid: label for sid, label, _ in manifest.entries}

    def __getitem__(self, sid: str):
        return load_source_image(self._root, sid, self._label[sid])


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    data = _data_root(cfg)
    out = _out_dir(cfg)
    manifest = SplitManifest.load_csv(_require_file(args.manifest,
                                                    "create one with `tilevote split`"))
    grids = [g.strip() for g in args.grids.split(",")] if args.grids else list(SWEEP_GRIDS)
    rows = run_sweep(manifest, _ImageStore(data, manifest), grids,
                     cfg.model_config(), cfg.train_config(), knn_k=cfg.knn_k,
                     out_dir=out, quiet=not args.verbose)
    write_resolved(cfg, out)
    print(f"{'grid':>7s}  {'fc_acc':>7s} {'fc_maj':>7s} {'fc_prob':>7s}"
          f"  {'knn_acc':>7s} {'knn_maj':>7s} {'knn_prob':>8s}")
    for r in rows:
        print(f"{r.grid:>7s}  {r.fc_acc:7.4f} {r.fc_maj:7.4f} {r.fc_prob:7.4f}"
              f"  {r.knn_acc:7.4f} {r.knn_maj:7.4f} {r.knn_prob:8.4f}")
    print(f"sweep table: {os.path.join(out, 'sweep.csv')}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, *, data=False, evaluator=False, grid=False):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="master random seed")
    p.add_argument("--out", help="output directory")
    if data:
        p.add_argument("--data", help="dataset root (class-named subdirectories of PNGs)")
    if grid:
        p.add_argument("--grid", help="tiling grid as RxC, e.g. 6x7")
    if evaluator:
        p.add_argument("--evaluator", choices=EVALUATOR_CHOICES,
                       help="tile scorer: dense head (fc) or embedding kNN")
        p.add_argument("--vote", choices=VOTE_CHOICES,
                       help="image-level aggregation; 'none' reports per-tile only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilevote",
        description="Tile-based classification of grayscale images: tiling, "
                    "CNN embeddings, kNN/dense evaluation, vote aggregation, "
                    "and class-evidence maps.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    _add_common(p)
    p.add_argument("--images-per-class", type=int, default=56)
    p.add_argument("--width", type=int, default=800)
    p.add_argument("--height", type=int, default=600)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a stratified train/val/test manifest")
    _add_common(p, data=True)
    p.add_argument("--val", type=int, required=True, help="validation images per class")
    p.add_argument("--test", type=int, required=True, help="test images per class")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("tile", help="cut manifest images into grid tiles on disk")
    _add_common(p, data=True, grid=True)
    p.add_argument("--manifest", required=True, help="split manifest CSV")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="train the classifier on a tile directory")
    _add_common(p, grid=True)
    p.add_argument("--tiles", required=True, help="tile directory from `tilevote tile`")
    p.add_argument("--verbose", action="store_true", help="per-epoch progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split and aggregate to image level")
    _add_common(p, evaluator=True, grid=True)
    p.add_argument("--tiles", required=True, help="tile directory from `tilevote tile`")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="k-fold cross-validation on the training split")
    _add_common(p, grid=True)
    p.add_argument("--tiles", required=True, help="tile directory from `tilevote tile`")
    p.add_argument("--manifest", required=True, help="split manifest CSV")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("cam", help="render class-evidence overlays for tiles")
    _add_common(p)
    p.add_argument("--tiles", required=True, help="tile directory from `tilevote tile`")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--method", default="both", choices=METHODS + ("both",))
    p.add_argument("--limit", type=int, default=8, help="number of tiles to render")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("sweep", help="train and evaluate across grid configurations")
    _add_common(p, data=True)
    p.add_argument("--manifest", required=True, help="split manifest CSV")
    p.add_argument("--grids", help="comma-separated RxC list "
                                   "(default: the standard ladder incl. no tiling)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        return args.func(cfg, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    except FileNotFoundError as e:
        print(f"error: missing prerequisite artifact: {e.filename}", file=sys.stderr)
        return 5
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except TileVoteError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
