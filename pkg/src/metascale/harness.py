"""Experiment runner: config validation, runs, persistence, grid search.

A run executes meta_train for every (dataset combination x seed) pair and
writes four artifacts into the output directory: config.json (the exact
effective config), metrics.jsonl (one line per meta-epoch per run),
summary.json (per-run results plus aggregate confidence intervals), and
metrics.csv (flat plot-ready table). Checkpoints of the best learner
parameters land under checkpoints/. Everything is deterministic given the
config, down to the bytes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .episode_learners import DualAffinityFactory, MlpFactory, QuadraticFactory
from .episodes import (DomainSplitSpec, EpisodeCounts, MetaSet, RecordSet,
                       SyntheticFamilySpec, build_letor_domains, letor_record_set,
                       make_meta_set, synth_tasks)
from .learners import load_checkpoint, save_checkpoint
from .letor import parse_letor
from .objectives import confidence_interval
from .policy import MetaPolicyConfig, RunRecord, meta_train
from .seeding import substream

FORMAT_VERSION = 1
SOURCE_KINDS = ("letor", "synthetic")
LEARNER_KINDS = ("quadratic", "mlp", "dual_affinity")


class ConfigError(ValueError):
    """Invalid configuration; message starts with the offending field path."""


class RunArtifactError(RuntimeError):
    """Missing or inconsistent files in a run directory."""


def check(condition: bool, path: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{path}: {message}")


# ---------------------------------------------------------------------------
# Configuration

@dataclass(frozen=True)
class LetorSource:
    path: str
    k_domains: int = 10
    silhouette_threshold: float = 0.5

    def to_json_dict(self) -> dict:
        return {"kind": "letor", "path": self.path, "k_domains": self.k_domains,
                "silhouette_threshold": self.silhouette_threshold}


@dataclass(frozen=True)
class SyntheticSource:
    spec: SyntheticFamilySpec
    n_tasks: int = 20

    def to_json_dict(self) -> dict:
        return {"kind": "synthetic", "n_tasks": self.n_tasks, **self.spec.to_json_dict()}


@dataclass(frozen=True)
class LearnerConfig:
    kind: str
    hidden_layers: int = 1
    activation: str = "tanh"
    chunk_size: int = 2
    semantic_features: int | None = None
    attribute_trainable: bool = True

    def to_json_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "mlp":
            d.update(hidden_layers=self.hidden_layers, activation=self.activation)
        if self.kind == "dual_affinity":
            d.update(chunk_size=self.chunk_size, semantic_features=self.semantic_features,
                     activation=self.activation,
                     attribute_trainable=self.attribute_trainable)
        return d


@dataclass(frozen=True)
class EpisodeConfig:
    k: int = 5
    counts: EpisodeCounts = EpisodeCounts()
    n_per_batch: int | None = None
    domain_split: DomainSplitSpec = DomainSplitSpec()

    def to_json_dict(self) -> dict:
        return {"k": self.k, **self.counts.to_json_dict(),
                "n_per_batch": self.n_per_batch,
                "domain_split": self.domain_split.to_json_dict()}


@dataclass(frozen=True)
class ExperimentConfig:
    source: LetorSource | SyntheticSource
    learner: LearnerConfig
    episodes: EpisodeConfig
    meta_policy: MetaPolicyConfig
    combos: int = 5
    seeds: tuple[int, ...] = (0,)

    def to_json_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION,
                "source": self.source.to_json_dict(),
                "learner": self.learner.to_json_dict(),
                "episodes": self.episodes.to_json_dict(),
                "meta_policy": self.meta_policy.to_json_dict(),
                "combos": self.combos,
                "seeds": list(self.seeds)}


def _check_int(d: dict, key: str, path: str, minimum: int, default: int) -> int:
    v = d.get(key, default)
    check(isinstance(v, int) and not isinstance(v, bool) and v >= minimum,
          f"{path}.{key}", f"must be an integer >= {minimum}")
    return v


def _parse_source(d, path: str):
    check(isinstance(d, dict), path, "must be an object")
    kind = d.get("kind")
    check(kind in SOURCE_KINDS, f"{path}.kind", f"must be one of {SOURCE_KINDS}")
    if kind == "letor":
        src_path = d.get("path")
        check(isinstance(src_path, str) and src_path != "", f"{path}.path",
              "must be a non-empty string")
        check(Path(src_path).is_file(), f"{path}.path", f"file not found: {src_path}")
        k = _check_int(d, "k_domains", path, 2, 10)
        thr = d.get("silhouette_threshold", 0.5)
        check(isinstance(thr, (int, float)) and -1 <= thr <= 1,
              f"{path}.silhouette_threshold", "must be a number in [-1, 1]")
        return LetorSource(src_path, k, float(thr))
    n_tasks = _check_int(d, "n_tasks", path, 1, 20)
    spec_fields = {k: v for k, v in d.items() if k not in ("kind", "n_tasks")}
    try:
        spec = SyntheticFamilySpec.from_json_dict(spec_fields)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return SyntheticSource(spec, n_tasks)


def _parse_learner(d, path: str, source) -> LearnerConfig:
    check(isinstance(d, dict), path, "must be an object")
    kind = d.get("kind")
    check(kind in LEARNER_KINDS, f"{path}.kind", f"must be one of {LEARNER_KINDS}")
    if kind == "quadratic":
        check(isinstance(source, SyntheticSource)
              and source.spec.family == "quadratic_bowl",
              f"{path}.kind", "quadratic learner requires a quadratic_bowl source")
        return LearnerConfig(kind)
    activation = d.get("activation", "tanh")
    check(activation in ("sigmoid", "tanh"), f"{path}.activation",
          "must be 'sigmoid' or 'tanh'")
    if kind == "mlp":
        check(not (isinstance(source, SyntheticSource)
                   and source.spec.family == "quadratic_bowl"),
              f"{path}.kind", "mlp learner needs classification or ranking data")
        hidden = _check_int(d, "hidden_layers", path, 1, 1)
        return LearnerConfig(kind, hidden_layers=hidden, activation=activation)
    chunk = _check_int(d, "chunk_size", path, 1, 2)
    sem = d.get("semantic_features")
    if sem is not None:
        check(isinstance(sem, int) and sem >= chunk, f"{path}.semantic_features",
              f"must be an integer >= chunk_size ({chunk}) or null")
    trainable = d.get("attribute_trainable", True)
    check(isinstance(trainable, bool), f"{path}.attribute_trainable", "must be a boolean")
    ok_source = isinstance(source, LetorSource) or (
        isinstance(source, SyntheticSource)
        and source.spec.family == "two_group_attributes")
    check(ok_source, f"{path}.kind",
          "dual_affinity learner needs letor or two_group_attributes data")
    return LearnerConfig(kind, chunk_size=chunk, semantic_features=sem,
                         activation=activation, attribute_trainable=trainable)


def _parse_episodes(d, path: str) -> EpisodeConfig:
    check(isinstance(d, dict), path, "must be an object")
    k = _check_int(d, "k", path, 1, 5)
    counts = EpisodeCounts(_check_int(d, "train_shots", path, 1, 5),
                           _check_int(d, "heldout", path, 1, 15),
                           _check_int(d, "test", path, 1, 15))
    check(counts.train_shots % k == 0, f"{path}.train_shots",
          f"must be a multiple of k={k}")
    n_per_batch = d.get("n_per_batch")
    if n_per_batch is not None:
        check(isinstance(n_per_batch, int) and n_per_batch >= 1,
              f"{path}.n_per_batch", "must be a positive integer or null")
    ds = d.get("domain_split", {})
    check(isinstance(ds, dict), f"{path}.domain_split", "must be an object")
    split = DomainSplitSpec.from_json_dict(ds)
    check(min(split.train_domains, split.val_domains, split.test_domains) >= 1,
          f"{path}.domain_split", "every split needs at least one domain")
    return EpisodeConfig(k, counts, n_per_batch, split)


def parse_config(d: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a config JSON object; errors name the failing field path."""
    check(isinstance(d, dict), "config", "must be a JSON object")
    known = {"format_version", "source", "learner", "episodes", "meta_policy",
             "combos", "seeds"}
    for key in d:
        check(key in known, f"config.{key}", "unknown key")
    version = d.get("format_version", FORMAT_VERSION)
    check(version == FORMAT_VERSION, "config.format_version",
          f"unsupported version {version}")
    raw_source = d.get("source")
    check(raw_source is not None, "config.source", "missing")
    if (base_dir is not None and isinstance(raw_source, dict)
            and raw_source.get("kind") == "letor"
            and isinstance(raw_source.get("path"), str)
            and not Path(raw_source["path"]).is_absolute()):
        raw_source = {**raw_source, "path": str(base_dir / raw_source["path"])}
    source = _parse_source(raw_source, "config.source")
    learner = _parse_learner(d.get("learner", {"kind": "mlp"}), "config.learner", source)
    episodes = _parse_episodes(d.get("episodes", {}), "config.episodes")
    meta_policy = MetaPolicyConfig.from_json_dict(d.get("meta_policy", {}),
                                                  path="config.meta_policy")
    combos = _check_int(d, "combos", "config", 1, 5)
    seeds = d.get("seeds", [0])
    check(isinstance(seeds, list) and len(seeds) > 0
          and all(isinstance(s, int) and not isinstance(s, bool) and s >= 0
                  for s in seeds),
          "config.seeds", "must be a non-empty list of non-negative integers")
    check(len(set(seeds)) == len(seeds), "config.seeds", "must not repeat seeds")
    return ExperimentConfig(source, learner, episodes, meta_policy, combos, tuple(seeds))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON: {exc}") from exc
    return parse_config(data, base_dir=path.parent)


def apply_overrides(config: ExperimentConfig, seed: int | None = None,
                    p_explore: float | None = None) -> ExperimentConfig:
    """Apply CLI overrides: --seed replaces the seed list, --p-explore the schedule."""
    mp = config.meta_policy
    if seed is not None:
        check(seed >= 0, "seed", "must be a non-negative integer")
        config = dataclasses.replace(config, seeds=(seed,))
        mp = dataclasses.replace(mp, seed=seed)
    if p_explore is not None:
        check(0.0 <= p_explore <= 1.0, "p_explore", "must lie in [0, 1]")
        mp = dataclasses.replace(mp, p_explore=p_explore)
    return dataclasses.replace(config, meta_policy=mp)


def config_hash(config_json: dict) -> str:
    canonical = json.dumps(config_json, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Data and factory wiring

def build_record_set(config: ExperimentConfig, combo: int) -> RecordSet:
    """Materialize the records for one dataset combination.

    Synthetic sources draw a fresh task family per combination from a
    derived seed; a LETOR file is parsed and clustered once, with the
    combination only affecting the later domain split.
    """
    source = config.source
    if isinstance(source, SyntheticSource):
        combo_seed = int(substream(source.spec.seed, "combo_data", combo)
                         .integers(0, 2 ** 63 - 1))
        spec = dataclasses.replace(source.spec, seed=combo_seed)
        return synth_tasks(spec, source.n_tasks)
    records = parse_letor(Path(source.path).read_text())
    partition = build_letor_domains(records, k=source.k_domains,
                                    threshold=source.silhouette_threshold,
                                    seed=config.meta_policy.seed)
    return letor_record_set(records, partition)


def build_meta_set(config: ExperimentConfig, record_set: RecordSet,
                   combo: int) -> MetaSet:
    ep = config.episodes
    return make_meta_set(record_set, k=ep.k, counts=ep.counts,
                         combo_seed=(config.meta_policy.seed, "combo", combo),
                         n_per_batch=ep.n_per_batch,
                         domain_split=ep.domain_split)


def make_factory(config: ExperimentConfig):
    lc = config.learner
    if lc.kind == "quadratic":
        assert isinstance(config.source, SyntheticSource)
        return QuadraticFactory(n_groups=config.source.spec.n_groups)
    if lc.kind == "mlp":
        return MlpFactory(hidden_layers=lc.hidden_layers, activation=lc.activation)
    return DualAffinityFactory(chunk_size=lc.chunk_size,
                               semantic_features=lc.semantic_features,
                               activation=lc.activation,
                               attribute_trainable=lc.attribute_trainable)


# ---------------------------------------------------------------------------
# Run execution and persistence

def _json_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _aggregate(runs: list[dict]) -> dict:
    """Mean with a 99% CI for best_heldout and every shared final test metric."""
    out: dict = {}

    def summarize(values: list[float]) -> dict:
        if len(values) >= 2:
            ci = confidence_interval(values)
            return {"mean": ci.mean, "half_width": ci.half_width, "n": ci.n_runs}
        return {"mean": float(values[0]), "half_width": None, "n": 1}

    out["best_heldout"] = summarize([r["best_heldout"] for r in runs])
    metric_keys = set(runs[0]["final_test_metrics"])
    for r in runs[1:]:
        metric_keys &= set(r["final_test_metrics"])
    for key in sorted(metric_keys):
        out[f"test_{key}"] = summarize([r["final_test_metrics"][key] for r in runs])
    return out


def run(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """Execute all (combo x seed) runs and persist every artifact.

    Returns the summary dict (also written to summary.json).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_json = config.to_json_dict()
    (out / "config.json").write_text(json.dumps(cfg_json, indent=2, sort_keys=True) + "\n")
    factory = make_factory(config)

    jsonl_lines: list[str] = []
    csv_rows: list[dict] = []
    run_blocks: list[dict] = []
    n_lambda = factory.n_groups
    for combo in range(config.combos):
        record_set = build_record_set(config, combo)
        meta_set = build_meta_set(config, record_set, combo)
        (out / f"meta_set_combo{combo}.json").write_text(
            json.dumps(meta_set.manifest, indent=2, sort_keys=True) + "\n")
        for seed in config.seeds:
            record = meta_train(config.meta_policy, factory, meta_set,
                                seed=(seed, "combo", combo))
            for er in record.epochs:
                entry = {"format_version": FORMAT_VERSION, "combo": combo,
                         "seed": seed, **er.to_json_dict()}
                jsonl_lines.append(_json_line(entry))
                row = {"combo": combo, "seed": seed, "epoch": er.epoch,
                       "explored": int(er.explored), "failed": int(er.failed),
                       "lr": er.hyper["lr"], "decay": er.hyper["decay"],
                       "width": er.hyper["width"],
                       "heldout_accuracy": er.heldout_accuracy,
                       "reward": er.reward, "test_metric": er.test_metric,
                       "best_heldout_so_far": er.best_heldout_so_far}
                for i in range(n_lambda):
                    row[f"lambda_{i}"] = er.lambdas[i]
                csv_rows.append(row)
            block = {"combo": combo, "seed": seed, **record.to_json_dict()}
            block.pop("epochs")
            run_blocks.append(block)
            if record.best_params is not None:
                save_checkpoint(out / "checkpoints" / f"combo{combo}_seed{seed}",
                                record.best_params)

    (out / "metrics.jsonl").write_text("\n".join(jsonl_lines) + "\n")
    _write_csv(out / "metrics.csv", csv_rows)
    summary = {"format_version": FORMAT_VERSION, "config": cfg_json,
               "config_hash": config_hash(cfg_json), "runs": run_blocks,
               "aggregate": _aggregate(run_blocks)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    fields = list(rows[0].keys())
    lines = [",".join(fields)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in (row[f] for f in fields)))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# p_explore grid search

def grid_search_pexplore(config: ExperimentConfig, out_dir: str | Path,
                         lo: float = 0.0, hi: float = 1.0,
                         step: float = 0.1) -> dict:
    """Run the full experiment at each p_explore on the grid; rank by heldout.

    Writes one run directory per grid point plus grid_search.json and
    grid_search.csv (rows sorted by mean heldout, best first).
    """
    check(step > 0, "grid.step", "must be positive")
    n_steps = round((hi - lo) / step)
    check(abs(lo + n_steps * step - hi) < 1e-9, "grid.step",
          f"step {step} does not divide the range [{lo}, {hi}]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_steps + 1):
        p = round(lo + i * step, 10)
        point_cfg = apply_overrides(config, p_explore=p)
        label = f"p_{p:g}"
        summary = run(point_cfg, out / label)
        agg = summary["aggregate"]["best_heldout"]
        rows.append({"p_explore": p, "mean_heldout": agg["mean"],
                     "half_width": agg["half_width"], "n_runs": agg["n"],
                     "dir": label})
    ranked = sorted(rows, key=lambda r: (-r["mean_heldout"], r["p_explore"]))
    result = {"format_version": FORMAT_VERSION, "rows": ranked,
              "best_p_explore": ranked[0]["p_explore"]}
    (out / "grid_search.json").write_text(
        json.dumps(result, indent=2, sort_keys=True) + "\n")
    csv_rows = [{k: ("" if r[k] is None else r[k]) for k in
                 ("p_explore", "mean_heldout", "half_width", "n_runs", "dir")}
                for r in ranked]
    _write_csv(out / "grid_search.csv", csv_rows)
    from .reporting import plot_grid_search
    plot_grid_search(sorted(rows, key=lambda r: r["p_explore"]),
                     out / "grid_search.png")
    return result


# ---------------------------------------------------------------------------
# Re-evaluating persisted checkpoints

def eval_run(run_dir: str | Path) -> dict:
    """Rebuild each combo's meta-set, load its checkpoint, re-score test/heldout.

    Confirms persisted learner parameters reproduce the stored final metrics.
    """
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.is_file():
        raise RunArtifactError(f"no summary.json in {run_dir}")
    summary = json.loads(summary_path.read_text())
    config = parse_config(summary["config"], base_dir=run_dir)
    factory = make_factory(config)
    rows = []
    for block in summary["runs"]:
        combo, seed = block["combo"], block["seed"]
        ckpt_dir = run_dir / "checkpoints" / f"combo{combo}_seed{seed}"
        if not (ckpt_dir / "params.json").is_file():
            raise RunArtifactError(f"missing checkpoint {ckpt_dir}")
        record_set = build_record_set(config, combo)
        meta_set = build_meta_set(config, record_set, combo)
        hyper_d = block["best_hyper"]
        from .policy import HyperChoice
        hyper = HyperChoice(lr=float(hyper_d["lr"]), decay=float(hyper_d["decay"]),
                            width=int(hyper_d["width"]), indices={})
        learner = factory.build(meta_set, hyper,
                                substream((seed, "combo", combo), "final"))
        learner.restore(load_checkpoint(ckpt_dir))
        heldout = learner.evaluate("heldout")
        test = learner.evaluate("test")
        stored = block["final_test_metrics"]
        drift = max((abs(test.metrics[k] - stored[k]) for k in stored), default=0.0)
        rows.append({"combo": combo, "seed": seed,
                     "heldout_metrics": heldout.metrics, "test_metrics": test.metrics,
                     "stored_test_metrics": stored, "max_drift": drift})
    result = {"format_version": FORMAT_VERSION, "runs": rows,
              "max_drift": max((r["max_drift"] for r in rows), default=0.0)}
    (run_dir / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# Reporting across runs

def report(run_dirs: list[str | Path], out_dir: str | Path) -> str:
    """Aggregate completed runs into a comparison table, CSV, and figures.

    Recomputes every confidence interval from the per-run values and
    refuses to report if a stored aggregate disagrees beyond 1e-9.
    """
    from .reporting import render_report
    if not run_dirs:
        raise RunArtifactError("report needs at least one run directory")
    summaries = []
    for d in sorted(str(p) for p in run_dirs):
        path = Path(d) / "summary.json"
        if not path.is_file():
            raise RunArtifactError(f"no summary.json in {d}")
        summary = json.loads(path.read_text())
        _verify_aggregate(summary, d)
        summaries.append((Path(d).name, Path(d), summary))
    return render_report(summaries, Path(out_dir))


def _verify_aggregate(summary: dict, label: str) -> None:
    runs = summary.get("runs", [])
    if not runs:
        raise RunArtifactError(f"{label}: summary has no runs")
    fresh = _aggregate(runs)
    stored = summary.get("aggregate", {})
    if set(fresh) != set(stored):
        raise RunArtifactError(f"{label}: aggregate keys changed")
    for key, val in fresh.items():
        for field in ("mean", "half_width"):
            a, b = val[field], stored[key][field]
            if (a is None) != (b is None):
                raise RunArtifactError(f"{label}: aggregate {key}.{field} mismatch")
            if a is not None and abs(a - b) > 1e-9:
                raise RunArtifactError(
                    f"{label}: stored aggregate {key}.{field}={b} but recomputed {a}")
