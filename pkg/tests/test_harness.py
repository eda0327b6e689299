"""Config validation, artifact layout, re-evaluation, reporting, CLI codes."""
import json

import numpy as np
import pytest

from metascale.cli import main
from metascale.harness import (ConfigError, RunArtifactError, apply_overrides,
                               config_hash, eval_run, grid_search_pexplore,
                               load_config, parse_config, report, run)
from metascale.letor import generate_letor_fixture


def _quad_config(**overrides):
    cfg = {
        "source": {"kind": "synthetic", "family": "quadratic_bowl", "dimension": 8,
                   "noise": 0.1, "seed": 7, "n_tasks": 24},
        "learner": {"kind": "quadratic"},
        "episodes": {"k": 4, "train_shots": 8, "heldout": 8, "test": 8},
        "meta_policy": {"meta_epochs": 3, "seed": 3},
        "combos": 2,
        "seeds": [0, 1],
    }
    cfg.update(overrides)
    return cfg


# -- validation ------------------------------------------------------------------

def test_parse_config_round_trips_to_json():
    config = parse_config(_quad_config())
    again = parse_config(config.to_json_dict())
    assert again == config


@pytest.mark.parametrize("mutate,path_fragment", [
    (lambda d: d.pop("source"), "config.source"),
    (lambda d: d.__setitem__("bogus", 1), "config.bogus"),
    (lambda d: d.__setitem__("format_version", 2), "format_version"),
    (lambda d: d.__setitem__("seeds", []), "config.seeds"),
    (lambda d: d.__setitem__("seeds", [1, 1]), "config.seeds"),
    (lambda d: d.__setitem__("seeds", [-1]), "config.seeds"),
    (lambda d: d.__setitem__("combos", 0), "config.combos"),
    (lambda d: d["source"].__setitem__("kind", "csv"), "config.source.kind"),
    (lambda d: d["learner"].__setitem__("kind", "tree"), "config.learner.kind"),
    (lambda d: d["episodes"].__setitem__("train_shots", 7), "train_shots"),
    (lambda d: d["meta_policy"].__setitem__("p_explore", 1.5), "meta_policy"),
    (lambda d: d["meta_policy"].__setitem__("lambda_grid", [2.0, 1.0]), "meta_policy"),
])
def test_parse_config_errors_name_field_paths(mutate, path_fragment):
    cfg = _quad_config()
    mutate(cfg)
    with pytest.raises(ConfigError) as exc_info:
        parse_config(cfg)
    assert path_fragment in str(exc_info.value)


def test_learner_source_compatibility_enforced():
    cfg = _quad_config(learner={"kind": "mlp"})
    with pytest.raises(ConfigError, match="mlp"):
        parse_config(cfg)
    cfg = _quad_config(learner={"kind": "dual_affinity"})
    with pytest.raises(ConfigError, match="dual_affinity"):
        parse_config(cfg)
    blobs = _quad_config()
    blobs["source"] = {"kind": "synthetic", "family": "gaussian_blobs",
                       "dimension": 4, "noise": 0.3, "seed": 0, "n_tasks": 20}
    blobs["learner"] = {"kind": "quadratic"}
    with pytest.raises(ConfigError, match="quadratic"):
        parse_config(blobs)


def test_letor_path_resolved_against_config_dir(tmp_path):
    (tmp_path / "data.letor").write_text(generate_letor_fixture(20, 6, 4, seed=0))
    cfg = {
        "source": {"kind": "letor", "path": "data.letor", "k_domains": 3,
                   "silhouette_threshold": 0.0},
        "learner": {"kind": "mlp"},
        "episodes": {"k": 2, "train_shots": 2, "heldout": 4, "test": 4,
                     "domain_split": {"train_domains": 1, "val_domains": 1,
                                      "test_domains": 1}},
        "meta_policy": {"meta_epochs": 2, "seed": 0},
        "combos": 1, "seeds": [0],
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    config = load_config(path)
    assert config.source.path == str(tmp_path / "data.letor")


def test_load_config_missing_and_invalid(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)


def test_apply_overrides():
    config = parse_config(_quad_config())
    tweaked = apply_overrides(config, seed=9, p_explore=0.7)
    assert tweaked.seeds == (9,)
    assert tweaked.meta_policy.seed == 9
    assert tweaked.meta_policy.p_explore == 0.7
    assert config.seeds == (0, 1)  # original untouched
    with pytest.raises(ConfigError):
        apply_overrides(config, p_explore=1.2)
    with pytest.raises(ConfigError):
        apply_overrides(config, seed=-4)


def test_config_hash_ignores_key_order_but_not_values():
    a = parse_config(_quad_config()).to_json_dict()
    b = json.loads(json.dumps(a, sort_keys=True))
    assert config_hash(a) == config_hash(b)
    b["combos"] = 3
    assert config_hash(a) != config_hash(b)


# -- run artifacts ------------------------------------------------------------------

@pytest.fixture(scope="module")
def quad_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("quadrun")
    config = parse_config(_quad_config())
    summary = run(config, out)
    return config, out, summary


def test_run_writes_expected_files(quad_run):
    _, out, _ = quad_run
    for name in ("config.json", "metrics.jsonl", "metrics.csv", "summary.json",
                 "meta_set_combo0.json", "meta_set_combo1.json"):
        assert (out / name).is_file(), name
    assert (out / "checkpoints" / "combo1_seed1" / "params.bin").is_file()


def test_metrics_jsonl_line_count_and_shape(quad_run):
    config, out, _ = quad_run
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == config.meta_policy.meta_epochs * config.combos * len(config.seeds)
    entry = json.loads(lines[0])
    assert entry["format_version"] == 1
    assert {"combo", "seed", "epoch", "explored", "lambdas", "hyper", "reward",
            "test_metric", "best_heldout_so_far", "failed"} <= set(entry)
    # sorted keys, compact separators
    assert lines[0] == json.dumps(entry, sort_keys=True, separators=(",", ":"))


def test_summary_blocks_one_per_combo_seed(quad_run):
    config, _, summary = quad_run
    assert len(summary["runs"]) == config.combos * len(config.seeds)
    pairs = {(r["combo"], r["seed"]) for r in summary["runs"]}
    assert pairs == {(c, s) for c in range(2) for s in (0, 1)}
    agg = summary["aggregate"]["best_heldout"]
    assert agg["n"] == 4
    values = [r["best_heldout"] for r in summary["runs"]]
    assert agg["mean"] == pytest.approx(np.mean(values))
    assert summary["config_hash"] == config_hash(summary["config"])


def test_metrics_csv_has_lambda_columns(quad_run):
    config, out, _ = quad_run
    header, *rows = (out / "metrics.csv").read_text().splitlines()
    cols = header.split(",")
    assert cols[:5] == ["combo", "seed", "epoch", "explored", "failed"]
    assert [c for c in cols if c.startswith("lambda_")] == [f"lambda_{i}" for i in range(4)]
    assert len(rows) == config.meta_policy.meta_epochs * 4


def test_rerun_is_byte_identical(quad_run, tmp_path):
    config, out, _ = quad_run
    run(config, tmp_path)
    assert (tmp_path / "metrics.jsonl").read_bytes() == (out / "metrics.jsonl").read_bytes()
    assert (tmp_path / "summary.json").read_bytes() == (out / "summary.json").read_bytes()


def test_eval_run_reproduces_stored_metrics(quad_run):
    _, out, _ = quad_run
    result = eval_run(out)
    assert result["max_drift"] == 0.0
    assert (out / "eval.json").is_file()


def test_eval_run_requires_artifacts(tmp_path):
    with pytest.raises(RunArtifactError):
        eval_run(tmp_path)


# -- report -----------------------------------------------------------------------

def test_report_permutation_invariant(quad_run, tmp_path):
    config, out, _ = quad_run
    second = tmp_path / "second"
    run(config, second)
    rep_a = tmp_path / "rep_a"
    rep_b = tmp_path / "rep_b"
    table_a = report([out, second], rep_a)
    table_b = report([second, out], rep_b)
    assert table_a == table_b
    assert (rep_a / "report.csv").read_bytes() == (rep_b / "report.csv").read_bytes()
    for name in ("report.txt", "report.csv", "report.json",
                 "heldout_curves.png", "test_metrics.png"):
        assert (rep_a / name).is_file(), name


def test_report_rejects_tampered_aggregate(quad_run, tmp_path):
    config, _, _ = quad_run
    rundir = tmp_path / "tampered"
    run(config, rundir)
    summary = json.loads((rundir / "summary.json").read_text())
    summary["aggregate"]["best_heldout"]["mean"] += 0.25
    (rundir / "summary.json").write_text(json.dumps(summary))
    with pytest.raises(RunArtifactError, match="recomputed"):
        report([rundir], tmp_path / "rep")


def test_report_needs_at_least_one_run(tmp_path):
    with pytest.raises(RunArtifactError):
        report([], tmp_path)


# -- p_explore grid -----------------------------------------------------------------

def test_grid_search_small_range(tmp_path):
    config = parse_config(_quad_config(combos=1, seeds=[0, 1],
                                       meta_policy={"meta_epochs": 3, "seed": 3}))
    result = grid_search_pexplore(config, tmp_path, lo=0.0, hi=0.2, step=0.1)
    assert [r["p_explore"] for r in sorted(result["rows"], key=lambda r: r["p_explore"])] \
        == [0.0, 0.1, 0.2]
    means = [r["mean_heldout"] for r in result["rows"]]
    assert means == sorted(means, reverse=True)
    assert result["best_p_explore"] == result["rows"][0]["p_explore"]
    for label in ("p_0", "p_0.1", "p_0.2"):
        assert (tmp_path / label / "summary.json").is_file()
    assert (tmp_path / "grid_search.csv").is_file()
    assert (tmp_path / "grid_search.png").is_file()


def test_grid_search_step_must_divide_range(tmp_path):
    config = parse_config(_quad_config())
    with pytest.raises(ConfigError, match="step"):
        grid_search_pexplore(config, tmp_path, lo=0.0, hi=1.0, step=0.3)


# -- CLI ----------------------------------------------------------------------------

def _write_config(tmp_path, cfg=None):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg or _quad_config(combos=1, seeds=[0])))
    return path


def test_cli_meta_train_success(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    code = main(["meta-train", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert code == 0
    assert "best heldout reward" in capsys.readouterr().out
    assert (tmp_path / "run" / "metrics.jsonl").is_file()


def test_cli_seed_and_p_explore_overrides(tmp_path):
    cfg = _write_config(tmp_path)
    code = main(["meta-train", "--config", str(cfg), "--seed", "5",
                 "--p-explore", "0.9", "--out", str(tmp_path / "run")])
    assert code == 0
    written = json.loads((tmp_path / "run" / "config.json").read_text())
    assert written["seeds"] == [5]
    assert written["meta_policy"]["p_explore"] == 0.9


def test_cli_env_var_output_dir(tmp_path, monkeypatch):
    cfg = _write_config(tmp_path)
    monkeypatch.setenv("METASCALE_OUT", str(tmp_path / "envrun"))
    assert main(["meta-train", "--config", str(cfg)]) == 0
    assert (tmp_path / "envrun" / "summary.json").is_file()


def test_cli_validation_failures_exit_1(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["meta-train", "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "x")]) == 1
    assert main(["meta-train", "--config", str(cfg)]) == 1  # no --out anywhere
    assert main(["meta-train", "--config", str(cfg), "--p-explore", "7",
                 "--out", str(tmp_path / "x")]) == 1
    assert main(["no-such-verb"]) == 1
    capsys.readouterr()


def test_cli_runtime_failures_exit_2(tmp_path, capsys):
    # unclusterable letor data trips the silhouette threshold at runtime
    letor = tmp_path / "flat.letor"
    rng = np.random.default_rng(0)
    lines = []
    qid = 1
    for q in range(30):
        for d in range(4):
            feats = " ".join(f"{i + 1}:{v!r}" for i, v in
                             enumerate(np.round(rng.normal(size=4), 6)))
            lines.append(f"{int(rng.integers(0, 3))} qid:{qid} {feats}")
        qid += 1
    letor.write_text("\n".join(lines) + "\n")
    cfg = {
        "source": {"kind": "letor", "path": str(letor), "k_domains": 5,
                   "silhouette_threshold": 0.9},
        "learner": {"kind": "mlp"},
        "episodes": {"k": 2, "train_shots": 2, "heldout": 4, "test": 4},
        "meta_policy": {"meta_epochs": 2, "seed": 0},
        "combos": 1, "seeds": [0],
    }
    path = _write_config(tmp_path, cfg)
    assert main(["make-domains", "--config", str(path),
                 "--out", str(tmp_path / "dom")]) == 2
    err = capsys.readouterr().err
    assert "runtime error" in err


def test_cli_eval_and_report(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    rundir = tmp_path / "run"
    assert main(["meta-train", "--config", str(cfg), "--out", str(rundir)]) == 0
    assert main(["eval", "--out", str(rundir)]) == 0
    assert "max drift" in capsys.readouterr().out
    assert main(["report", str(rundir), "--out", str(tmp_path / "rep")]) == 0
    out = capsys.readouterr().out
    assert "best_heldout" in out
    assert (tmp_path / "rep" / "test_metrics.png").is_file()


def test_cli_make_domains_success(tmp_path, capsys):
    letor = tmp_path / "ok.letor"
    letor.write_text(generate_letor_fixture(30, 6, 5, seed=2, n_clusters=4))
    cfg = {
        "source": {"kind": "letor", "path": str(letor), "k_domains": 4,
                   "silhouette_threshold": 0.2},
        "learner": {"kind": "mlp"},
        "episodes": {"k": 2, "train_shots": 2, "heldout": 4, "test": 4},
        "meta_policy": {"seed": 0},
        "combos": 1, "seeds": [0],
    }
    path = _write_config(tmp_path, cfg)
    assert main(["make-domains", "--config", str(path),
                 "--out", str(tmp_path / "dom")]) == 0
    payload = json.loads((tmp_path / "dom" / "domains.json").read_text())
    assert payload["k"] == 4
    assert len(payload["domains"]) == 30
    assert "silhouette" in capsys.readouterr().out
