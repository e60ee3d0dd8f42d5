"""``gqa`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 staging error (a stage run before its prerequisites).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PROFILES, make_config
from .distort import ALL_TYPES, BASE_TYPES
from .errors import ConfigError, DataError, GQAError
from .metrics import METRIC_IDS

log = logging.getLogger("gqa")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which collides with the data-error code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_experiment_args(p, checkpoint=False, subset=None):
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    p.add_argument("--config", type=Path, help="YAML or JSON config file")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--uniform-weights", action="store_true", help="ablation: plain mean over patch indices")
    p.add_argument("--no-patching", action="store_true", help="ablation: one whole-cloud sample instead of patches")
    if checkpoint:
        p.add_argument("--checkpoint", type=Path, help="checkpoint from the previous stage")
    if subset:
        p.add_argument("--subset", choices=["all", "train", "test"], default=subset)


def build_parser():
    parser = _Parser(prog="gqa", description="Geometry quality assessment of colourless point clouds.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("refs", help="write synthetic normalised reference clouds")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--points", type=int, default=6000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("synth", help="generate distorted ranked lists and a manifest")
    p.add_argument("--refs", type=Path, required=True, help="directory of .ply/.xyz reference clouds")
    p.add_argument("--types", type=_csv_list, default=list(BASE_TYPES),
                   help=f"comma-separated distortion types (of {', '.join(ALL_TYPES)})")
    p.add_argument("--levels", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="lrl")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("pmos", help="attach pseudo-MOS labels to a manifest")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--normal-k", type=int, default=16)

    p = sub.add_parser("metric", help="full-reference metric rankings and NDCG")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--metrics", type=_csv_list, default=["po2po_mse"],
                   help=f"comma-separated metric ids (of {', '.join(METRIC_IDS)}) or 'all'")
    p.add_argument("--normal-k", type=int, default=16)
    p.add_argument("--out", type=Path, default=Path("runs"))

    _add_experiment_args(sub.add_parser("pretrain", help="distortion-level classification pre-training"))
    _add_experiment_args(sub.add_parser("train", help="listMLE rank training of the heads"), checkpoint=True)
    _add_experiment_args(sub.add_parser("finetune", help="pseudo-MOS regression of the heads"), checkpoint=True)
    _add_experiment_args(sub.add_parser("rank", help="rank lists with a trained model"), checkpoint=True,
                         subset="all")
    _add_experiment_args(sub.add_parser("score", help="score items against pseudo-MOS"), checkpoint=True,
                         subset="test")
    p = sub.add_parser("eval", help="model and metric NDCG summary with figure")
    _add_experiment_args(p, checkpoint=True, subset="all")
    p.add_argument("--no-figures", action="store_true")
    return parser


def _config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.uniform_weights:
        overrides["uniform_weights"] = True
    if args.no_patching:
        overrides["no_patching"] = True
    return make_config(args.profile, overrides, args.config)


def _print_table(table):
    dtypes = sorted({t for by_type in table.values() for t in by_type if t != "MEAN"}) + ["MEAN"]
    width = max(len(m) for m in table) + 2
    print("method".ljust(width) + " ".join(t.rjust(7) for t in dtypes))
    for method, by_type in table.items():
        print(method.ljust(width) + " ".join(f"{by_type.get(t, float('nan')):7.4f}" for t in dtypes))


def _print_report(report):
    print(" ".join(f"{k}={v:.4f}" for k, v in report.items()))


def run(args) -> int:
    from . import pipeline

    cmd = args.command
    if cmd == "refs":
        paths = pipeline.write_references(args.out, args.count, args.points, args.seed)
        print(f"wrote {len(paths)} references to {args.out}")
    elif cmd == "synth":
        path, counts = pipeline.synth(args.refs, args.types, args.levels, args.seed, args.out, args.name)
        for dtype, n in counts.items():
            print(f"{dtype}: {n} lists")
        print(f"manifest: {path}")
    elif cmd == "pmos":
        manifest = pipeline.compute_pmos(args.manifest, args.normal_k)
        n = sum(len(lst.levels) for lst in manifest.lists)
        print(f"pseudo-MOS written for {n} items")
    elif cmd == "metric":
        metrics = list(METRIC_IDS) if args.metrics == ["all"] else [m.lower() for m in args.metrics]
        unknown = [m for m in metrics if m not in METRIC_IDS]
        if unknown:
            raise ConfigError(f"unknown metric(s) {', '.join(unknown)}")
        args.out.mkdir(parents=True, exist_ok=True)
        _, table = pipeline.metric_rankings(args.manifest, metrics, args.out, args.normal_k)
        _print_table(table)
    else:
        cfg = _config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"{cmd}_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
        if cmd == "pretrain":
            path, rep = pipeline.run_pretrain(args.manifest, cfg, args.out)
            print(f"train accuracy {rep['train_accuracy']:.4f}  test accuracy {rep['test_accuracy']:.4f}  "
                  f"chance {rep['chance']:.4f}")
            print(f"checkpoint: {path}")
        elif cmd == "train":
            path, rep = pipeline.run_train(args.manifest, cfg, args.checkpoint, args.out)
            print(f"NDCG train {rep['ndcg_train']:.4f} (before {rep['ndcg_train_before']:.4f})  "
                  f"held-out {rep['ndcg_test']:.4f}")
            print(f"checkpoint: {path}")
        elif cmd == "finetune":
            path, rep = pipeline.run_finetune(args.manifest, cfg, args.checkpoint, args.out)
            for split in ("train", "test"):
                if rep["after"][split]:
                    print(f"{split}: ", end="")
                    _print_report(rep["after"][split])
            print(f"checkpoint: {path}")
        elif cmd == "rank":
            table, _ = pipeline.run_rank(args.manifest, cfg, args.checkpoint, args.out, args.subset)
            _print_table(table)
        elif cmd == "score":
            report, _ = pipeline.run_score(args.manifest, cfg, args.checkpoint, args.out, args.subset)
            _print_report(report)
        elif cmd == "eval":
            table = pipeline.run_eval(args.manifest, cfg, args.checkpoint, args.out, args.subset,
                                      figures=not args.no_figures)
            _print_table(table)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return run(args)
    except GQAError as exc:
        print(f"gqa {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"gqa {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
