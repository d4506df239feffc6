"""Command-line entry point: ``ucascade <stage> --config run.yaml``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

import argparse
import logging
import os
import sys

from .config import ExperimentConfig, dump_config, load_config
from .errors import UcascadeError

STAGES = ["generate", "train-seg", "train-detect", "extract-candidates", "evaluate", "report", "run"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser():
    p = _Parser(prog="ucascade", description="Two-stage Bayesian nodule detection experiment on synthetic phantoms.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "generate": "write phantom volumes and the split file",
        "train-seg": "train the 2D segmentation U-Net",
        "train-detect": "train one 3D detector variant",
        "extract-candidates": "MC-segment all volumes and crop candidate cubes",
        "evaluate": "MC-evaluate both detectors and the ensemble, write the report",
        "report": "print the metric table of a finished run",
        "run": "all stages in order",
    }
    for name in STAGES:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", help="YAML config file (defaults apply to omitted keys)")
        sp.add_argument("--output-dir", help="override output_dir from the config")
        if name == "train-detect":
            sp.add_argument("--variant", choices=["1ch", "3ch"], required=True)
    sub.add_parser("config", help="print the default config as YAML")
    return p


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.output_dir:
        cfg.output_dir = args.output_dir
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    from . import experiment, report

    try:
        if args.command == "config":
            sys.stdout.write(dump_config(ExperimentConfig()))
            return 0
        cfg = _config(args)
        experiment.worker_count()
        if args.command == "generate":
            print(experiment.cmd_generate(cfg))
        elif args.command == "train-seg":
            _, hist = experiment.cmd_train_seg(cfg)
            print(f"best val dice {max(h['val_dice'] for h in hist):.4f}")
        elif args.command == "train-detect":
            _, hist = experiment.cmd_train_detect(cfg, args.variant)
            print(f"best val loss {min(h['val_loss'] for h in hist):.4f}")
        elif args.command == "extract-candidates":
            cands, stats = experiment.cmd_extract_candidates(cfg)
            print(f"{len(cands)} candidates; " + ", ".join(
                f"{k} recall {v['recall']:.3f}" for k, v in stats.items()))
        elif args.command in ("evaluate", "run"):
            rep = (experiment.run_all if args.command == "run" else experiment.cmd_evaluate)(cfg)
            print(report.format_table(rep))
        elif args.command == "report":
            lay = experiment.Layout(cfg.output_dir)
            if not os.path.exists(lay.manifest) or not os.path.exists(os.path.join(lay.report, "metrics.csv")):
                raise experiment.DataError(f"no run found in {cfg.output_dir}")
            print(report.format_table(report.load_report(lay.report)))
    except UcascadeError as exc:
        print(f"ucascade: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
