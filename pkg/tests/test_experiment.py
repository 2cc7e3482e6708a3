"""Tests for experiment orchestration, run artifacts, reports and the CLI."""
import dataclasses
import json
import os

import pytest
import yaml

from fedseqrec.cli import apply_overrides, build_parser, main
from fedseqrec.data import ScenarioConfig, save_datasets
from fedseqrec.exceptions import ConfigError
from fedseqrec.experiment import (
    ExperimentConfig,
    build_datasets,
    derive_run_seeds,
    emit_report,
    load_config,
    prepare_output_dir,
    preset,
    resolved_settings,
    run_experiment,
    save_config,
    sweep,
    _write_csv,
)
from fedseqrec.federation import ModelConfig, TrainConfig, VARIANTS

from conftest import TINY_SCENARIO

TINY_MODEL = ModelConfig(embed_dim=8, num_gnn_layers=1, num_attn_layers=1, num_heads=2)
TINY_TRAIN = TrainConfig(rounds=1, local_epochs=1, patience=2, batch_size=16,
                         lr=1e-3, dropout=0.0, negatives_per_eval=20, seed=0)


def tiny_experiment(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(
        name="tiny",
        scenario=dataclasses.replace(TINY_SCENARIO),
        model=dataclasses.replace(TINY_MODEL),
        train=dataclasses.replace(TINY_TRAIN),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


# ---------------------------------------------------------------------------
# Config round trips and validation
# ---------------------------------------------------------------------------

def test_config_dict_round_trip_restores_types():
    cfg = tiny_experiment(variant="no_contrast", repeats=2)
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert isinstance(back.scenario.seq_len_range, tuple)
    assert isinstance(back.train.weights.beta, float)


def test_config_yaml_file_round_trip(tmp_path):
    cfg = tiny_experiment()
    path = str(tmp_path / "config.yaml")
    save_config(path, cfg)
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    assert raw["scenario"]["users"] == TINY_SCENARIO.users
    assert load_config(path) == cfg


@pytest.mark.parametrize("mutate,message", [
    (lambda c: setattr(c, "variant", "bogus"), "unknown variant"),
    (lambda c: setattr(c, "repeats", 0), "repeats"),
    (lambda c: setattr(c, "data_path", "also.json"), "exactly one"),
    (lambda c: setattr(c, "scenario", None), "exactly one"),
    (lambda c: setattr(c, "sweep_param", "lr"), "sweep_param"),
    (lambda c: setattr(c, "sweep_values", [1.0]), "go together"),
])
def test_config_validation_errors(mutate, message):
    cfg = tiny_experiment()
    mutate(cfg)
    with pytest.raises(ConfigError, match=message):
        cfg.validate()


def test_sweep_values_must_be_non_empty():
    cfg = tiny_experiment()
    cfg.sweep_param, cfg.sweep_values = "beta", []
    with pytest.raises(ConfigError, match="non-empty"):
        cfg.validate()


# ---------------------------------------------------------------------------
# Resolved settings and presets
# ---------------------------------------------------------------------------

def test_resolved_settings_isolate_the_ablated_flags():
    cfg = tiny_experiment()
    full = resolved_settings(cfg, "full")
    no_contrast = resolved_settings(cfg, "no_contrast")
    diff = {k for k in full if full[k] != no_contrast[k]}
    assert diff == {"variant", "weights.lambda_"}
    assert no_contrast["weights.lambda_"] == 0.0

    no_dis = resolved_settings(cfg, "no_disentangle")
    diff = {k for k in full if full[k] != no_dis[k]}
    assert diff == {"variant", "weights.beta", "weights.gamma", "weights.lambda_"}

    local = resolved_settings(cfg, "local_only")
    assert local["federate"] is False and local["weights.beta"] == 0.0

    mono = resolved_settings(cfg, "fedavg_monolithic")
    assert mono["monolithic"] is True


def test_presets_are_valid_configs():
    names = ("desk", "ablation", "fusion_probe", "homogeneous",
             "alpha_sweep", "beta_sweep", "protocol")
    for name in names:
        cfg = preset(name)
        cfg.validate()
        assert cfg.name == name
    assert preset("ablation").variant == "all"
    assert preset("ablation").repeats == 5
    assert preset("homogeneous").scenario.heterogeneity == 0.0
    assert preset("protocol").train.negatives_per_eval == 999
    assert preset("alpha_sweep").sweep_param == "alpha"
    with pytest.raises(ConfigError, match="unknown preset"):
        preset("imaginary")


def test_derive_run_seeds_deterministic_and_distinct():
    seeds = derive_run_seeds(0, 5)
    assert seeds == derive_run_seeds(0, 5)
    assert len(set(seeds)) == 5
    assert derive_run_seeds(0, 3) == seeds[:3]
    assert derive_run_seeds(1, 5) != seeds
    assert all(0 <= s < 2**32 for s in seeds)


# ---------------------------------------------------------------------------
# Data materialization
# ---------------------------------------------------------------------------

def test_build_datasets_regenerates_synthetic_per_seed():
    cfg = tiny_experiment()
    a1 = build_datasets(cfg, 123)
    a2 = build_datasets(cfg, 123)
    b = build_datasets(cfg, 456)
    assert [d.domain_name for d in a1] == [d.domain_name for d in a2]
    u = sorted(a1[0].train)[0]
    assert a1[0].train[u].items == a2[0].train[u].items
    assert any(a1[0].train[x].items != b[0].train[x].items
               for x in sorted(set(a1[0].train) & set(b[0].train)))


def test_build_datasets_loads_dataset_file(tmp_path, tiny_datasets):
    path = str(tmp_path / "data.json")
    save_datasets(path, tiny_datasets)
    cfg = tiny_experiment()
    cfg.scenario, cfg.data_path = None, path
    loaded = build_datasets(cfg, 999)  # seed irrelevant for file data
    assert [d.domain_name for d in loaded] == [d.domain_name for d in tiny_datasets]
    u = sorted(tiny_datasets[0].train)[0]
    assert loaded[0].train[u].items == tiny_datasets[0].train[u].items


def test_build_datasets_raw_dir_needs_domains(tmp_path):
    cfg = tiny_experiment()
    cfg.scenario, cfg.data_path = None, str(tmp_path)
    with pytest.raises(ConfigError, match="domain name list"):
        build_datasets(cfg, 0)


# ---------------------------------------------------------------------------
# Run directories and artifacts
# ---------------------------------------------------------------------------

def test_prepare_output_dir_never_clobbers(tmp_path):
    first = prepare_output_dir(str(tmp_path), "job")
    second = prepare_output_dir(str(tmp_path), "job")
    assert first != second
    assert os.path.isdir(first) and os.path.isdir(second)
    assert os.path.basename(second) == "job-1"


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("runs"))
    out = run_experiment(tiny_experiment(), output_root=root)
    return out


def test_run_writes_self_describing_artifacts(tiny_run):
    out_dir = tiny_run["output_dir"]
    seed = derive_run_seeds(TINY_TRAIN.seed, 1)[0]
    expected = [
        "config.yaml", "seeds.json", "resolved.json",
        f"history_full_{seed}.jsonl", f"eval_full_{seed}.json",
        f"checkpoint_full_{seed}.npz",
        "summary.csv", "summary.md", "validation_mrr.png", "fusion_probe.png",
        "rounds.csv",
    ]
    for fname in expected:
        assert os.path.exists(os.path.join(out_dir, fname)), fname

    with open(os.path.join(out_dir, "seeds.json")) as fh:
        assert json.load(fh) == [seed]
    reloaded = load_config(os.path.join(out_dir, "config.yaml"))
    assert reloaded.scenario.users == TINY_SCENARIO.users

    results = tiny_run["results"]
    assert list(results) == ["full"]
    row = results["full"][0]
    assert row["seed"] == seed and row["rounds_run"] == 1
    assert set(row["test"]) == {"both", "shared", "exclusive"}
    assert 0 < row["test"]["both"]["average"]["mrr"] <= 1


def test_history_file_is_json_lines_per_round(tiny_run):
    out_dir = tiny_run["output_dir"]
    seed = derive_run_seeds(TINY_TRAIN.seed, 1)[0]
    with open(os.path.join(out_dir, f"history_full_{seed}.jsonl")) as fh:
        lines = [json.loads(line) for line in fh]
    clients = [rec["client"] for rec in lines]
    assert clients == sorted(c for c in clients if c != "_average") + ["_average"]
    assert all(rec["round"] == 0 for rec in lines)  # rounds are 0-indexed
    per_client = [rec for rec in lines if rec["client"] != "_average"]
    assert all("total" in rec["train"] for rec in per_client)
    assert all("mrr" in rec["valid"] for rec in per_client)


def test_reports_are_reproduced_byte_for_byte(tiny_run):
    out_dir = tiny_run["output_dir"]
    paths = [os.path.join(out_dir, name) for name in ("summary.csv", "rounds.csv", "summary.md")]
    before = [open(p, "rb").read() for p in paths]
    for p in paths:
        os.remove(p)
    emit_report(out_dir)
    after = [open(p, "rb").read() for p in paths]
    assert before == after


def test_summary_csv_covers_domains_fusions_and_average(tiny_run):
    out_dir = tiny_run["output_dir"]
    with open(os.path.join(out_dir, "summary.csv")) as fh:
        header = fh.readline().strip().split(",")
        rows = [dict(zip(header, line.strip().split(","))) for line in fh]
    assert header[:4] == ["variant", "seed", "fusion", "domain"]
    assert {r["fusion"] for r in rows} == {"both", "shared", "exclusive"}
    domains = {r["domain"] for r in rows}
    assert "_average" in domains and len(domains) == TINY_SCENARIO.num_domains + 1


def test_report_on_empty_dir_fails(tmp_path):
    with pytest.raises(ConfigError, match="no evaluation files"):
        emit_report(str(tmp_path))


def test_run_experiment_rejects_sweep_configs(tmp_path):
    cfg = tiny_experiment()
    cfg.sweep_param, cfg.sweep_values = "beta", [1.0]
    with pytest.raises(ConfigError, match="sweep entry point"):
        run_experiment(cfg, output_root=str(tmp_path))


def test_write_csv_refuses_empty_and_keeps_column_order(tmp_path):
    with pytest.raises(ValueError, match="empty CSV"):
        _write_csv(str(tmp_path / "x.csv"), [])
    path = str(tmp_path / "y.csv")
    _write_csv(path, [{"b": 1, "a": 0.5}, {"a": 2, "c": True}])
    lines = open(path).read().splitlines()
    assert lines[0] == "b,a,c"  # first-seen order, not alphabetical
    assert lines[1] == "1,0.500000,"
    assert lines[2] == ",2,True"


def test_sweep_writes_grid_rows_and_plot(tmp_path):
    cfg = tiny_experiment()
    cfg.sweep_param, cfg.sweep_values = "beta", [0.0, 2.0]
    out = sweep(cfg, output_root=str(tmp_path))
    out_dir = out["output_dir"]
    assert os.path.basename(out_dir) == "tiny-sweep-beta"
    assert os.path.exists(os.path.join(out_dir, "sweep.csv"))
    assert os.path.exists(os.path.join(out_dir, "sweep.png"))
    values = {row["value"] for row in out["rows"]}
    assert values == {0.0, 2.0}
    avg_rows = [r for r in out["rows"] if r["domain"] == "_average"]
    assert len(avg_rows) == 2  # one per swept value at one seed
    assert all(0 < r["mrr"] <= 1 for r in avg_rows)


def test_sweep_requires_a_parameter(tmp_path):
    with pytest.raises(ConfigError, match="sweep needs"):
        sweep(tiny_experiment(), output_root=str(tmp_path))


# ---------------------------------------------------------------------------
# Configuration overrides
# ---------------------------------------------------------------------------

def test_apply_overrides_coerces_by_current_type():
    cfg = tiny_experiment()
    apply_overrides(cfg, [
        "train.lr=0.01",
        "train.rounds=7",
        "train.restore_best=false",
        "train.weights.beta=3.5",
        "scenario.seq_len_range=8,12",
        "variant=no_contrast",
        "name=renamed",
    ])
    assert cfg.train.lr == 0.01 and isinstance(cfg.train.lr, float)
    assert cfg.train.rounds == 7 and isinstance(cfg.train.rounds, int)
    assert cfg.train.restore_best is False
    assert cfg.train.weights.beta == 3.5
    assert cfg.scenario.seq_len_range == (8, 12)
    assert cfg.variant == "no_contrast"
    assert cfg.name == "renamed"


def test_apply_overrides_rejects_bad_entries():
    with pytest.raises(ConfigError, match="path=value"):
        apply_overrides(tiny_experiment(), ["train.lr"])
    with pytest.raises(ConfigError, match="no config field"):
        apply_overrides(tiny_experiment(), ["train.learning_rate=0.1"])
    with pytest.raises(ConfigError, match="no config section"):
        apply_overrides(tiny_experiment(), ["optimizer.lr=0.1"])
    with pytest.raises(ConfigError, match="expected a boolean"):
        apply_overrides(tiny_experiment(), ["train.restore_best=perhaps"])


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

TINY_CLI_OVERRIDES = [
    "--set", f"scenario.num_domains={TINY_SCENARIO.num_domains}",
    "--set", f"scenario.users={TINY_SCENARIO.users}",
    "--set", f"scenario.shared_factors={TINY_SCENARIO.shared_factors}",
    "--set", f"scenario.exclusive_factors={TINY_SCENARIO.exclusive_factors}",
    "--set", f"scenario.vocab_per_domain={TINY_SCENARIO.vocab_per_domain}",
    "--set", "model.embed_dim=8",
    "--set", "model.num_gnn_layers=1",
    "--set", "model.num_attn_layers=1",
    "--set", "train.rounds=1",
    "--set", "train.local_epochs=1",
    "--set", "train.batch_size=16",
    "--set", "train.negatives_per_eval=20",
]


def test_parser_knows_all_verbs():
    parser = build_parser()
    assert parser.parse_args(["run"]).verb == "run"
    assert parser.parse_args(["sweep", "--param", "beta"]).param == "beta"
    assert parser.parse_args(["report", "somewhere"]).run_dir == "somewhere"
    assert parser.parse_args(["oracle-check"]).verb == "oracle-check"


def test_cli_oracle_check_passes(capsys):
    assert main(["oracle-check"]) == 0
    out = capsys.readouterr().out
    assert "oracle checks passed" in out
    assert "FAIL" not in out


def test_cli_run_then_report(tmp_path, capsys):
    code = main(["run", "--output-root", str(tmp_path), "--no-checkpoints",
                 *TINY_CLI_OVERRIDES])
    assert code == 0
    run_dir = capsys.readouterr().out.strip().splitlines()[-1]
    assert os.path.isdir(run_dir)
    assert os.path.exists(os.path.join(run_dir, "summary.csv"))
    assert not any(f.startswith("checkpoint_") for f in os.listdir(run_dir))

    assert main(["report", run_dir]) == 0
    assert capsys.readouterr().out.strip() == run_dir


def test_cli_run_from_config_file(tmp_path, capsys):
    cfg_path = str(tmp_path / "cfg.yaml")
    save_config(cfg_path, tiny_experiment())
    code = main(["run", "--config", cfg_path, "--output-root", str(tmp_path),
                 "--no-checkpoints", "--variant", "local_only"])
    assert code == 0
    run_dir = capsys.readouterr().out.strip().splitlines()[-1]
    assert os.path.basename(run_dir).startswith("tiny-local_only")


def test_cli_errors_exit_with_code_2(tmp_path, capsys):
    assert main(["run", "--preset", "not-a-preset"]) == 2
    assert "unknown preset" in capsys.readouterr().err
    assert main(["run", "--set", "train.learning_rate=1"]) == 2
    assert "no config field" in capsys.readouterr().err
    assert main(["report", str(tmp_path)]) == 2
    assert "no evaluation files" in capsys.readouterr().err


def test_cli_sweep_verb(tmp_path, capsys):
    code = main(["sweep", "--output-root", str(tmp_path),
                 "--param", "tau", "--values", "0.5",
                 *TINY_CLI_OVERRIDES])
    assert code == 0
    run_dir = capsys.readouterr().out.strip().splitlines()[-1]
    assert os.path.exists(os.path.join(run_dir, "sweep.csv"))


def test_variants_tuple_matches_cli_surface():
    assert VARIANTS == ("full", "no_contrast", "no_disentangle",
                        "local_only", "fedavg_monolithic")
