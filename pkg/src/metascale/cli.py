"""Command-line entry point.

Verbs: meta-train, grid-search, make-domains, eval, report. The output
directory comes from --out or, when that is absent, the METASCALE_OUT
environment variable. Exit codes: 0 success, 1 validation error (bad
arguments or config), 2 runtime failure (I/O, numeric blowup, rejected
clustering, corrupt artifacts).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .autodiff import NumericOverflowError
from .clustering import ClusteringError, query_mean_features
from .harness import (ConfigError, RunArtifactError, apply_overrides, eval_run,
                      grid_search_pexplore, load_config, report, run)
from .letor import LetorParseError, parse_letor

FORMAT_VERSION = 1


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; we reserve 2 for runtime."""

    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="metascale",
                     description="Meta-learned gradient scaling experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="path to the experiment config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed list with one seed")
        p.add_argument("--out", default=None,
                       help="output directory (or set METASCALE_OUT)")
        p.add_argument("--p-explore", type=float, default=None, dest="p_explore",
                       help="override the exploration probability")

    common(sub.add_parser("meta-train", help="run the full experiment"))
    common(sub.add_parser("grid-search",
                          help="run at each p_explore in [0,1] step 0.1"))
    common(sub.add_parser("make-domains",
                          help="cluster a LETOR file into pseudo-domains"))
    pe = sub.add_parser("eval", help="re-score persisted checkpoints")
    pe.add_argument("--out", default=None, help="run directory to evaluate")
    pr = sub.add_parser("report", help="aggregate runs into tables and figures")
    pr.add_argument("run_dirs", nargs="+", help="completed run directories")
    pr.add_argument("--out", default=None,
                    help="where to write the report (or METASCALE_OUT)")
    return parser


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("METASCALE_OUT")
    if not out:
        raise ConfigError("out: pass --out or set METASCALE_OUT")
    return Path(out)


def _load(args):
    config = load_config(args.config)
    return apply_overrides(config, seed=args.seed, p_explore=args.p_explore)


def _cmd_meta_train(args) -> None:
    summary = run(_load(args), _out_dir(args))
    agg = summary["aggregate"]["best_heldout"]
    hw = f" +- {agg['half_width']:.4f}" if agg["half_width"] is not None else ""
    print(f"runs: {len(summary['runs'])}")
    print(f"best heldout reward: {agg['mean']:.4f}{hw} (n={agg['n']})")


def _cmd_grid_search(args) -> None:
    result = grid_search_pexplore(_load(args), _out_dir(args))
    for row in result["rows"]:
        hw = f" +- {row['half_width']:.4f}" if row["half_width"] is not None else ""
        print(f"p_explore={row['p_explore']:<4g} heldout={row['mean_heldout']:.4f}{hw}")
    print(f"best p_explore: {result['best_p_explore']:g}")


def _cmd_make_domains(args) -> None:
    from .episodes import build_letor_domains
    from .harness import LetorSource

    config = _load(args)
    if not isinstance(config.source, LetorSource):
        raise ConfigError("config.source.kind: make-domains needs a letor source")
    records = parse_letor(Path(config.source.path).read_text())
    partition = build_letor_domains(records, k=config.source.k_domains,
                                    threshold=config.source.silhouette_threshold,
                                    seed=config.meta_policy.seed)
    qids, _ = query_mean_features(records)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"format_version": FORMAT_VERSION, "k": partition.k,
               "silhouette": partition.silhouette,
               "domains": {str(qid): int(lab)
                           for qid, lab in zip(qids, partition.labels)}}
    (out / "domains.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"{len(qids)} queries -> {partition.k} domains "
          f"(silhouette {partition.silhouette:.4f})")


def _cmd_eval(args) -> None:
    result = eval_run(_out_dir(args))
    for row in result["runs"]:
        metrics = " ".join(f"{k}={v:.4f}" for k, v in sorted(row["test_metrics"].items()))
        print(f"combo={row['combo']} seed={row['seed']} {metrics} "
              f"(drift {row['max_drift']:.2e})")
    print(f"max drift vs stored metrics: {result['max_drift']:.2e}")


def _cmd_report(args) -> None:
    print(report(args.run_dirs, _out_dir(args)))


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"meta-train": _cmd_meta_train, "grid-search": _cmd_grid_search,
                   "make-domains": _cmd_make_domains, "eval": _cmd_eval,
                   "report": _cmd_report}[args.verb]
        handler(args)
        return 0
    except (_UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RunArtifactError, ClusteringError, NumericOverflowError,
            LetorParseError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
