"""Experiment orchestration: configs, presets, runs, sweeps and reports.

A run directory is self-describing: the resolved config, the derived seeds,
one JSON-lines history and one evaluation JSON per (variant, seed), final
checkpoints, and CSV/Markdown/PNG reports derived purely from those files —
so ``report`` can be re-run at any time and reproduces its tables
byte-for-byte.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import statistics

import numpy as np
import yaml

from .checkpoint import save_run_checkpoint
from .data import (
    DomainDataset,
    ScenarioConfig,
    generate_synthetic,
    ingest_scenario,
    load_datasets,
    preprocess,
)
from .disentangle import LossWeights
from .evaluation import evaluate_clients
from .exceptions import ConfigError
from .federation import (
    VARIANTS,
    ModelConfig,
    TrainConfig,
    resolve_variant,
    run_variant,
)
from .utils import derive_seed

logger = logging.getLogger(__name__)

FUSION_MODES = ("both", "shared", "exclusive")
SWEEPABLE = ("alpha", "beta", "gamma", "lambda_", "tau")


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run.

    Exactly one data source must be set: ``scenario`` (synthetic generator)
    or ``data_path`` (a dataset JSON file or a directory of raw interaction
    logs named after ``domains``). ``variant`` may also be ``"all"`` to run
    every variant on the same data and seeds.
    """

    name: str = "desk"
    variant: str = "full"
    repeats: int = 1
    scenario: ScenarioConfig | None = dataclasses.field(default_factory=ScenarioConfig)
    data_path: str | None = None
    domains: list[str] | None = None
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    sweep_param: str | None = None
    sweep_values: list[float] | None = None

    def validate(self) -> None:
        if self.variant not in VARIANTS + ("all",):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if (self.scenario is None) == (self.data_path is None):
            raise ConfigError("set exactly one of scenario / data_path")
        if self.scenario is not None:
            self.scenario.validate()
        self.model.validate()
        self.train.validate()
        if self.sweep_param is not None and self.sweep_param not in SWEEPABLE:
            raise ConfigError(f"sweep_param must be one of {SWEEPABLE}")
        if (self.sweep_param is None) != (self.sweep_values is None):
            raise ConfigError("sweep_param and sweep_values go together")
        if self.sweep_values is not None and not self.sweep_values:
            raise ConfigError("sweep_values must be non-empty")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["scenario"] is not None:
            d["scenario"]["seq_len_range"] = list(d["scenario"]["seq_len_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        scenario = d.get("scenario")
        if scenario is not None:
            scenario = dict(scenario)
            if "seq_len_range" in scenario:
                scenario["seq_len_range"] = tuple(scenario["seq_len_range"])
            d["scenario"] = ScenarioConfig(**scenario)
        train = dict(d.get("train", {}))
        if "weights" in train:
            train["weights"] = LossWeights(**train["weights"])
        d["train"] = TrainConfig(**train)
        d["model"] = ModelConfig(**d.get("model", {}))
        cfg = cls(**d)
        cfg.validate()
        return cfg


def save_config(path: str, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(yaml.safe_load(fh))


def resolved_settings(cfg: ExperimentConfig, variant: str) -> dict:
    """Flat dict of every setting a variant actually trains with.

    Diffing two variants' resolved settings shows exactly which flags an
    ablation flips — nothing else about the runs may differ.
    """
    spec = resolve_variant(variant, cfg.train.weights)
    out = {
        "variant": variant,
        "monolithic": spec.monolithic,
        "federate": spec.federate,
    }
    out.update({f"weights.{k}": v for k, v in dataclasses.asdict(spec.weights).items()})
    train = dataclasses.asdict(cfg.train)
    train.pop("weights")
    out.update({f"train.{k}": v for k, v in train.items()})
    out.update({f"model.{k}": v for k, v in dataclasses.asdict(cfg.model).items()})
    return out


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def preset(name: str) -> ExperimentConfig:
    """Named starting configurations for the CLI."""
    if name == "desk":
        return ExperimentConfig(name="desk")
    if name == "ablation":
        return ExperimentConfig(name="ablation", variant="all", repeats=5)
    if name == "fusion_probe":
        return ExperimentConfig(name="fusion_probe", variant="full", repeats=5)
    if name == "homogeneous":
        return ExperimentConfig(
            name="homogeneous",
            variant="all",
            repeats=5,
            scenario=ScenarioConfig(heterogeneity=0.0),
        )
    if name == "alpha_sweep":
        return ExperimentConfig(
            name="alpha_sweep", repeats=3, sweep_param="alpha",
            sweep_values=[0.1, 0.5, 1.0, 1.5, 2.0],
        )
    if name == "beta_sweep":
        return ExperimentConfig(
            name="beta_sweep", repeats=3, sweep_param="beta",
            sweep_values=[0.5, 1.0, 2.0, 3.0, 4.0],
        )
    if name == "protocol":
        # the full-scale evaluation protocol: more rounds, larger batches,
        # 999 sampled negatives per ranking instance
        cfg = ExperimentConfig(name="protocol")
        cfg.train = TrainConfig(
            rounds=40, local_epochs=3, patience=5, batch_size=256,
            lr=1e-3, dropout=0.3, negatives_per_eval=999,
        )
        return cfg
    raise ConfigError(f"unknown preset {name!r}; available: desk, ablation, fusion_probe, "
                      "homogeneous, alpha_sweep, beta_sweep, protocol")


# ---------------------------------------------------------------------------
# Data and seeds
# ---------------------------------------------------------------------------

def derive_run_seeds(base_seed: int, repeats: int) -> list[int]:
    """The deterministic per-repeat seeds of a run."""
    return [derive_seed(base_seed, "repeat", i) for i in range(repeats)]


def build_datasets(cfg: ExperimentConfig, run_seed: int) -> list[DomainDataset]:
    """Materialize the scenario for one repeat.

    Synthetic scenarios are regenerated with the repeat's seed (so repeats
    are statistically independent); file-backed data is fixed and only the
    training randomness varies across repeats.
    """
    if cfg.scenario is not None:
        return generate_synthetic(dataclasses.replace(cfg.scenario, seed=run_seed))
    if cfg.data_path.endswith(".json"):
        return load_datasets(cfg.data_path)
    if not cfg.domains:
        raise ConfigError("raw data ingestion needs the domain name list")
    return [preprocess(ds) for ds in ingest_scenario(cfg.data_path, cfg.domains)]


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def prepare_output_dir(root: str | None, name: str) -> str:
    root = root or os.environ.get("FEDSEQREC_OUTPUT_ROOT", "runs")
    os.makedirs(root, exist_ok=True)
    candidate = os.path.join(root, name)
    suffix = 0
    while os.path.exists(candidate):
        suffix += 1
        candidate = os.path.join(root, f"{name}-{suffix}")
    os.makedirs(candidate)
    return candidate


def _write_history(path: str, history: list[dict]) -> None:
    """One JSON line per round per client, plus one cross-domain average line."""
    with open(path, "w") as fh:
        for record in history:
            for cid in sorted(record["train"]):
                line = {
                    "round": record["round"],
                    "client": cid,
                    "train": record["train"][cid],
                    "valid": record["valid"].get(cid, {}),
                }
                fh.write(json.dumps(line, sort_keys=True) + "\n")
            fh.write(json.dumps(
                {"round": record["round"], "client": "_average", "valid": record["avg_valid"]},
                sort_keys=True,
            ) + "\n")


def run_experiment(
    cfg: ExperimentConfig,
    output_root: str | None = None,
    write_checkpoints: bool = True,
) -> dict:
    """Execute a full experiment and write its artifact directory.

    Returns ``{"output_dir": ..., "results": {variant: [per-seed dict]}}``
    where each per-seed dict carries the seed, the early-stopped round
    count, and the test metrics for every fusion mode.
    """
    cfg.validate()
    if cfg.sweep_param is not None:
        raise ConfigError("this config declares a sweep; use the sweep entry point")
    out_dir = prepare_output_dir(output_root, f"{cfg.name}-{cfg.variant}")
    save_config(os.path.join(out_dir, "config.yaml"), cfg)
    seeds = derive_run_seeds(cfg.train.seed, cfg.repeats)
    with open(os.path.join(out_dir, "seeds.json"), "w") as fh:
        json.dump(seeds, fh)

    variants = list(VARIANTS) if cfg.variant == "all" else [cfg.variant]
    with open(os.path.join(out_dir, "resolved.json"), "w") as fh:
        json.dump({v: resolved_settings(cfg, v) for v in variants}, fh, indent=2, sort_keys=True)

    results: dict[str, list[dict]] = {v: [] for v in variants}
    for seed in seeds:
        datasets = build_datasets(cfg, seed)
        for variant in variants:
            train_cfg = dataclasses.replace(cfg.train, seed=seed)
            logger.info("running %s seed %d", variant, seed)
            clients, state, history = run_variant(datasets, cfg.model, train_cfg, variant)
            _write_history(os.path.join(out_dir, f"history_{variant}_{seed}.jsonl"), history)
            evals = {}
            for fusion in FUSION_MODES:
                res = evaluate_clients(
                    clients, "test", fusion=fusion,
                    k=train_cfg.eval_k, negatives=train_cfg.negatives_per_eval,
                    seed=train_cfg.seed,
                )
                evals[fusion] = res.to_dict()
            with open(os.path.join(out_dir, f"eval_{variant}_{seed}.json"), "w") as fh:
                json.dump(evals, fh, indent=2, sort_keys=True)
            if write_checkpoints:
                save_run_checkpoint(
                    os.path.join(out_dir, f"checkpoint_{variant}_{seed}.npz"), state, clients
                )
            results[variant].append({
                "seed": seed,
                "rounds_run": len(history),
                "test": evals,
            })
    emit_report(out_dir)
    return {"output_dir": out_dir, "results": results}


def sweep(cfg: ExperimentConfig, output_root: str | None = None) -> dict:
    """Grid over one objective weight; each value runs all repeats.

    Writes ``sweep.csv`` (one row per value/seed/domain) and a curve plot of
    the cross-domain average test MRR against the swept value.
    """
    cfg.validate()
    if cfg.sweep_param is None:
        raise ConfigError("sweep needs sweep_param and sweep_values")
    out_dir = prepare_output_dir(output_root, f"{cfg.name}-sweep-{cfg.sweep_param}")
    save_config(os.path.join(out_dir, "config.yaml"), cfg)
    seeds = derive_run_seeds(cfg.train.seed, cfg.repeats)

    rows: list[dict] = []
    for value in cfg.sweep_values:
        weights = dataclasses.replace(cfg.train.weights, **{cfg.sweep_param: value})
        for seed in seeds:
            datasets = build_datasets(cfg, seed)
            train_cfg = dataclasses.replace(cfg.train, seed=seed, weights=weights)
            logger.info("sweep %s=%s seed %d", cfg.sweep_param, value, seed)
            clients, _state, history = run_variant(datasets, cfg.model, train_cfg, cfg.variant)
            res = evaluate_clients(
                clients, "test", fusion="both",
                k=train_cfg.eval_k, negatives=train_cfg.negatives_per_eval, seed=train_cfg.seed,
            )
            for domain in sorted(res.per_domain):
                rows.append({
                    "param": cfg.sweep_param, "value": value, "seed": seed,
                    "domain": domain, "rounds_run": len(history), **res.per_domain[domain],
                })
            rows.append({
                "param": cfg.sweep_param, "value": value, "seed": seed,
                "domain": "_average", "rounds_run": len(history), **res.average,
            })
    _write_csv(os.path.join(out_dir, "sweep.csv"), rows)
    _plot_sweep(out_dir, rows, cfg.sweep_param)
    return {"output_dir": out_dir, "rows": rows}


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(x)
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def _write_csv(path: str, rows: list[dict]) -> None:
    """CSV with stable column order and fixed float formatting.

    Writing the same rows always produces identical bytes; '\\n' endings on
    every platform.
    """
    if not rows:
        raise ValueError(f"refusing to write empty CSV {path}")
    fields: list[str] = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _run_files(run_dir: str) -> tuple[list[tuple[str, int, str]], list[tuple[str, int, str]]]:
    evals, histories = [], []
    for fname in sorted(os.listdir(run_dir)):
        if fname.startswith("eval_") and fname.endswith(".json"):
            stem = fname[len("eval_"):-len(".json")]
            variant, seed = stem.rsplit("_", 1)
            evals.append((variant, int(seed), os.path.join(run_dir, fname)))
        elif fname.startswith("history_") and fname.endswith(".jsonl"):
            stem = fname[len("history_"):-len(".jsonl")]
            variant, seed = stem.rsplit("_", 1)
            histories.append((variant, int(seed), os.path.join(run_dir, fname)))
    return evals, histories


def emit_report(run_dir: str) -> None:
    """(Re)generate summary.csv, rounds.csv, summary.md and plots from a run dir.

    Purely a function of the history/eval files, so repeated invocations
    rewrite identical CSV bytes.
    """
    eval_files, history_files = _run_files(run_dir)
    if not eval_files:
        raise ConfigError(f"{run_dir}: no evaluation files to report on")

    summary_rows: list[dict] = []
    for variant, seed, path in eval_files:
        with open(path) as fh:
            evals = json.load(fh)
        for fusion in sorted(evals):
            res = evals[fusion]
            for domain in sorted(res["per_domain"]):
                summary_rows.append({
                    "variant": variant, "seed": seed, "fusion": fusion,
                    "domain": domain, **res["per_domain"][domain],
                })
            summary_rows.append({
                "variant": variant, "seed": seed, "fusion": fusion,
                "domain": "_average", **res["average"],
            })
    summary_rows.sort(key=lambda r: (r["variant"], r["seed"], r["fusion"], r["domain"]))
    _write_csv(os.path.join(run_dir, "summary.csv"), summary_rows)

    round_rows: list[dict] = []
    for variant, seed, path in history_files:
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                row = {"variant": variant, "seed": seed,
                       "round": rec["round"], "client": rec["client"]}
                for k, v in rec.get("train", {}).items():
                    row[f"train_{k}"] = v
                for k, v in rec.get("valid", {}).items():
                    row[f"valid_{k}"] = v
                round_rows.append(row)
    if round_rows:
        round_rows.sort(key=lambda r: (r["variant"], r["seed"], r["round"], r["client"]))
        _write_csv(os.path.join(run_dir, "rounds.csv"), round_rows)

    _write_markdown(run_dir, summary_rows)
    _plot_validation(run_dir, round_rows)
    _plot_fusion(run_dir, summary_rows)


def _aggregate(rows: list[dict], keys: tuple[str, ...], metric: str) -> dict[tuple, tuple[float, float]]:
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        if metric in row:
            groups.setdefault(tuple(row[k] for k in keys), []).append(row[metric])
    return {
        k: (statistics.mean(v), statistics.stdev(v) if len(v) > 1 else 0.0)
        for k, v in groups.items()
    }


def _write_markdown(run_dir: str, summary_rows: list[dict]) -> None:
    metrics = [k for k in summary_rows[0] if k not in ("variant", "seed", "fusion", "domain")]
    lines = ["# Run summary", ""]
    lines.append("Test-split ranking quality, mean ± std over seeds (fusion = both).")
    lines.append("")
    variants = sorted({r["variant"] for r in summary_rows})
    domains = sorted({r["domain"] for r in summary_rows})
    for variant in variants:
        rows = [r for r in summary_rows if r["variant"] == variant and r["fusion"] == "both"]
        lines.append(f"## {variant}")
        lines.append("")
        lines.append("| domain | " + " | ".join(metrics) + " |")
        lines.append("|" + "---|" * (len(metrics) + 1))
        for domain in domains:
            stats = []
            for metric in metrics:
                agg = _aggregate([r for r in rows if r["domain"] == domain], ("domain",), metric)
                if (domain,) in agg:
                    mean, std = agg[(domain,)]
                    stats.append(f"{mean:.4f} ± {std:.4f}")
                else:
                    stats.append("—")
            label = "average" if domain == "_average" else domain
            lines.append(f"| {label} | " + " | ".join(stats) + " |")
        lines.append("")
    fusions = sorted({r["fusion"] for r in summary_rows})
    if len(fusions) > 1:
        lines.append("## Fusion probing (cross-domain average MRR)")
        lines.append("")
        lines.append("| variant | " + " | ".join(fusions) + " |")
        lines.append("|" + "---|" * (len(fusions) + 1))
        for variant in variants:
            cells = []
            for fusion in fusions:
                rows = [r for r in summary_rows
                        if r["variant"] == variant and r["fusion"] == fusion
                        and r["domain"] == "_average"]
                agg = _aggregate(rows, ("fusion",), "mrr")
                if (fusion,) in agg:
                    mean, std = agg[(fusion,)]
                    cells.append(f"{mean:.4f} ± {std:.4f}")
                else:
                    cells.append("—")
            lines.append(f"| {variant} | " + " | ".join(cells) + " |")
        lines.append("")
    with open(os.path.join(run_dir, "summary.md"), "w") as fh:
        fh.write("\n".join(lines))


def _matplotlib():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _plot_validation(run_dir: str, round_rows: list[dict]) -> None:
    rows = [r for r in round_rows if r["client"] == "_average" and "valid_mrr" in r]
    if not rows:
        return
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(7, 4))
    curves: dict[tuple, list[tuple[int, float]]] = {}
    for r in rows:
        curves.setdefault((r["variant"], r["seed"]), []).append((r["round"], r["valid_mrr"]))
    for (variant, seed), pts in sorted(curves.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], alpha=0.7,
                label=f"{variant} / seed {seed}")
    ax.set_xlabel("round")
    ax.set_ylabel("avg validation MRR")
    ax.set_title("Validation MRR per round")
    if len(curves) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(run_dir, "validation_mrr.png"), dpi=120)
    plt.close(fig)


def _plot_fusion(run_dir: str, summary_rows: list[dict]) -> None:
    fusions = sorted({r["fusion"] for r in summary_rows})
    variants = sorted({r["variant"] for r in summary_rows})
    if len(fusions) < 2:
        return
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(fusions)
    for fi, fusion in enumerate(fusions):
        means = []
        for variant in variants:
            vals = [r["mrr"] for r in summary_rows
                    if r["variant"] == variant and r["fusion"] == fusion
                    and r["domain"] == "_average"]
            means.append(float(np.mean(vals)) if vals else 0.0)
        xs = [i + fi * width for i in range(len(variants))]
        ax.bar(xs, means, width=width, label=fusion)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(variants))])
    ax.set_xticklabels(variants, rotation=20, fontsize=8)
    ax.set_ylabel("test MRR (avg over domains, seeds)")
    ax.set_title("Branch fusion probing")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(run_dir, "fusion_probe.png"), dpi=120)
    plt.close(fig)


def _plot_sweep(run_dir: str, rows: list[dict], param: str) -> None:
    avg = [r for r in rows if r["domain"] == "_average"]
    if not avg:
        return
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(6, 4))
    values = sorted({r["value"] for r in avg})
    means = [float(np.mean([r["mrr"] for r in avg if r["value"] == v])) for v in values]
    for r in avg:
        ax.scatter(r["value"], r["mrr"], color="gray", s=12, alpha=0.6)
    ax.plot(values, means, marker="o", color="crimson")
    ax.set_xlabel(param)
    ax.set_ylabel("test MRR (avg)")
    ax.set_title(f"Sweep over {param}")
    fig.tight_layout()
    fig.savefig(os.path.join(run_dir, "sweep.png"), dpi=120)
    plt.close(fig)
