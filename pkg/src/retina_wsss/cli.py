"""Command-line entry point: ``retina-wsss <command>``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import TrainConfig
from .errors import ConfigError, WSSSError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _gammas(text: str) -> tuple[float, float, float]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return values


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW or N, got {text!r}") from None
    return (dims[0], dims[0]) if len(dims) == 1 else dims[:2]


def cmd_train(args) -> int:
    cfg = TrainConfig.read(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.repeat < 1:
        raise ConfigError("--repeat must be at least 1")
    base_out = Path(cfg.paths.output)
    summaries = []
    for k in range(args.repeat):
        run_cfg = TrainConfig.from_dict(cfg.to_dict())
        run_cfg.seed = cfg.seed + k
        if args.repeat > 1:
            run_cfg.paths.output = str(base_out / f"run_{k:02d}_seed{run_cfg.seed}")
        if args.experiment:
            metrics = pipeline.run_experiment(run_cfg, figures=not args.no_figures)
            summaries.append({"seed": run_cfg.seed, "output": run_cfg.paths.output, **metrics})
        else:
            res = pipeline.train(run_cfg, keep_model=False)
            if not args.no_figures:
                from . import plotting

                plotting.loss_curves(res.history, res.output / "figures" / "loss.png")
            summaries.append({"seed": run_cfg.seed, "checkpoint": str(res.checkpoint), "log": str(res.log),
                              "loss_first": res.history[0]["total"], "loss_last": res.history[-1]["total"]})
    if args.repeat > 1:
        # every run is reported; choosing among them is left to the user
        pipeline.write_json(base_out / "runs.json", {"runs": summaries})
    print(json.dumps(summaries if args.repeat > 1 else summaries[0], indent=2, sort_keys=True))
    return 0


def cmd_pseudo(args) -> int:
    written = pipeline.pseudo(args.ckpt, args.data, args.lam, args.out, gammas=args.gamma,
                              embeddings=args.embeddings, dump_cams=args.dump_cams)
    print(f"wrote {len(written)} pseudo labels to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    class_names = None
    if args.data is not None:
        from .dataset_io import DatasetManifest

        class_names = DatasetManifest.read(args.data).classes
    metrics = pipeline.evaluate_dirs(args.pred, args.gt, class_names=class_names)
    pipeline.write_json(args.out, metrics)
    print(f"mIoU {metrics['miou']:.4f} over {metrics['num_images']} images")
    return 0


def cmd_sweep(args) -> int:
    result = pipeline.sweep_checkpoint(args.ckpt, args.data, gammas=args.gamma, embeddings=args.embeddings)
    out = Path(args.out)
    pipeline.write_json(out, result.to_dict())
    if not args.no_figures:
        from . import plotting

        plotting.sweep_curve(result, out.with_suffix(".png"))
    print(f"best lambda {result.best_lambda:.2f} mIoU {result.best_miou:.4f}")
    return 0


def cmd_analyze_text(args) -> int:
    report = pipeline.analyze_text(args.captions, args.out, embeddings=args.embeddings,
                                   manifest_path=args.manifest, figures=not args.no_figures)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    from .synthetic import write_dataset

    path = write_dataset(args.out, n=args.n, size=args.size, seed=args.seed)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="retina-wsss",
                     description="Weakly supervised OCT lesion segmentation from image-level labels.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--repeat", type=int, default=1, help="train N runs with consecutive seeds")
    p.add_argument("--experiment", action="store_true",
                   help="after training, sweep the threshold, export pseudo labels and write metrics.json")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo", help="generate pseudo labels from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--lambda", dest="lam", type=float, required=True, help="background threshold in [0, 1]")
    p.add_argument("--gamma", type=_gammas, help="fusion weights for CAM, stage-3 SIM, stage-4 SIM")
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", help="embedding cache for descriptions (cache-mode checkpoints)")
    p.add_argument("--dump-cams", action="store_true")
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("evaluate", help="micro mIoU of predicted label maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="manifest supplying class names")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="sweep the background threshold against ground truth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=_gammas)
    p.add_argument("--embeddings")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-text", help="word histograms and sliding-window caption similarity")
    p.add_argument("--captions", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="supplies groups, volume ids and slice indices")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_analyze_text)

    p = sub.add_parser("synth", help="write the synthetic toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--size", type=_size, default=(256, 256))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except WSSSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
