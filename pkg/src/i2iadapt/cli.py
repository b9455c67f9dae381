"""Command-line surface: train, eval, translate, presets, export-embeddings.

Exit codes: 0 ok, 1 configuration error, 2 data/IO error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .autodiff import NumericError
from .config import ConfigError, load_config, parse_dataset_config
from .data import DataError
from .eval_export import (CheckpointError, METRICS_HEADER, export_csv,
                          export_image_grid, load_checkpoint)
from .losses import preset_table

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _cmd_train(args) -> int:
    from .runner import train_run
    cfg = load_config(args.config)
    summary = train_run(cfg)
    print(f"run complete: {summary['steps']} steps -> {summary['run_dir']}")
    print(f"final target accuracy {summary['final']['target_accuracy']:.4f}  "
          f"probe {summary['final']['probe']:.4f}")
    return EXIT_OK


def _load_run(args):
    from .runner import build_datasets, restore_bundle
    ck = load_checkpoint(args.checkpoint)
    bundle = restore_bundle(ck)
    data = build_datasets(parse_dataset_config(args.dataset))
    return ck, bundle, data


def _cmd_eval(args) -> int:
    from .runner import evaluate
    ck, bundle, data = _load_run(args)
    src_rep, tgt_rep = evaluate(bundle, data, step=int(ck.meta["train_state"]["step"]))
    print(src_rep.format_table())
    print()
    print(tgt_rep.format_table())
    out = Path(args.out or Path(args.checkpoint).parent)
    rows = [{"step": rep.step, "split": rep.split, "accuracy": rep.overall_accuracy,
             "probe": rep.probe_accuracy} for rep in (src_rep, tgt_rep)]
    export_csv(rows, out / "eval_metrics.csv", METRICS_HEADER)
    return EXIT_OK


def _cmd_translate(args) -> int:
    from .runner import translate_images
    ck, bundle, data = _load_run(args)
    images = data.src_test.images if args.direction in ("x2y", "identity", "cycle") \
        else data.tgt_test.images
    images = images[:args.count]
    if images.ndim != 4:
        raise DataError("translate needs an image dataset")
    out = Path(args.out or Path(args.checkpoint).parent)
    grid = translate_images(bundle, images, args.direction)
    export_image_grid(grid, out / f"translate_{args.direction}.pgm")
    export_image_grid(images, out / f"translate_{args.direction}_inputs.pgm")
    print(f"wrote {out / f'translate_{args.direction}.pgm'}")
    return EXIT_OK


def _cmd_export_embeddings(args) -> int:
    from .runner import export_embeddings
    ck, bundle, data = _load_run(args)
    out = Path(args.out or Path(args.checkpoint).parent)
    export_embeddings(bundle, data, out / "embeddings.csv")
    print(f"wrote {out / 'embeddings.csv'}")
    return EXIT_OK


def _cmd_presets(args) -> int:
    print(preset_table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="i2iadapt",
                                description="domain adaptation via latent alignment and image translation")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training config")
    t.add_argument("--config", required=True, help="experiment YAML")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="dataset-block YAML")
    e.add_argument("--out", default=None)
    e.set_defaults(fn=_cmd_eval)

    tr = sub.add_parser("translate", help="export translated-image grids")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--direction", default="x2y", choices=("x2y", "y2x", "identity", "cycle"))
    tr.add_argument("--count", type=int, default=32)
    tr.add_argument("--out", default=None)
    tr.set_defaults(fn=_cmd_translate)

    x = sub.add_parser("export-embeddings", help="PCA-project latents to CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--dataset", required=True)
    x.add_argument("--out", default=None)
    x.set_defaults(fn=_cmd_export_embeddings)

    pr = sub.add_parser("presets", help="print the preset/coefficient matrix")
    pr.set_defaults(fn=_cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
