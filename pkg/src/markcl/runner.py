"""Experiment execution and result files.

Each seed writes ``seed_<s>/`` with ``summary.json``, ``acc_matrix.csv``,
``events.jsonl``, ``meta.jsonl``, ``config.echo``, ``model.ckpt``,
``analysis_<name>.json`` and ``timing.json``. Everything except
``timing.json`` is a pure function of the echoed config. Output is staged in
a sibling temporary directory and moved into place only when every seed
has finished, so a failed run leaves nothing behind.
"""
import hashlib
import json
import math
import os
import shutil
import tempfile
import time

import numpy as np

from . import analysis
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import ConfigError, MetricError
from .model import model_from_tensors, param_digest, read_embeddings
from .scenario import (
    RawDataset,
    gen_synthetic,
    load_cifar100,
    load_idx,
    scenario_from_tensors,
    scenario_to_tensors,
    split_tasks,
    standardize,
)
from .training import Variant, task_data, train_sequence

CHECKPOINT_NAME = "model.ckpt"


# -- scenario -----------------------------------------------------------------

def _data_path(cfg, name):
    path = name if os.path.isabs(name) else os.path.join(cfg.data_dir, name)
    if not os.path.exists(path):
        raise ConfigError(f"data file not found: {path}", path=cfg.path)
    return path


def build_scenario(cfg: ExperimentConfig, seed):
    """The task sequence for ``seed`` and, for the lookup extractor, its embedding table."""
    source = cfg["scenario.source"]
    if source == "synthetic":
        sc = gen_synthetic(cfg["scenario.tasks"], cfg["scenario.classes_per_task"], cfg["scenario.input_shape"],
                           cfg["scenario.separation"], cfg["scenario.noise"], seed,
                           cfg["scenario.samples_per_class"])
        if cfg["scenario.order"] == "shuffled":
            raw = _raw_from_scenario(sc)
            sc = split_tasks(raw, cfg["scenario.tasks"], seed, "shuffled")
    else:
        if source == "idx":
            raw = load_idx(_data_path(cfg, cfg["scenario.train_images"]), _data_path(cfg, cfg["scenario.train_labels"]))
            if cfg["scenario.test_images"] and cfg["scenario.test_labels"]:
                test = load_idx(_data_path(cfg, cfg["scenario.test_images"]), _data_path(cfg, cfg["scenario.test_labels"]))
                raw = RawDataset.concat(raw, test)
        else:
            raw = load_cifar100(_data_path(cfg, cfg["scenario.cifar_train"]))
            if cfg["scenario.cifar_test"]:
                raw = RawDataset.concat(raw, load_cifar100(_data_path(cfg, cfg["scenario.cifar_test"])))
        sc = split_tasks(raw, cfg["scenario.tasks"], seed, cfg["scenario.order"])
    if cfg["scenario.standardize"]:
        sc = standardize(sc)
    table = None
    if cfg["arch.fe_variant"] == "external_embedding":
        if not cfg["scenario.embeddings"]:
            raise ConfigError("arch.fe_variant = external_embedding needs scenario.embeddings", path=cfg.path)
        table = read_embeddings(_data_path(cfg, cfg["scenario.embeddings"]))
    return sc, table


def _raw_from_scenario(sc):
    n = sum(len(t.labels) for t in sc)
    x = np.zeros((n,) + sc.input_shape, np.float32)
    y = np.zeros(n, np.int64)
    for t in sc:
        x[t.sample_ids] = t.inputs
        y[t.sample_ids] = np.asarray(t.global_classes)[t.labels]
    return RawDataset(x, y)


# -- state packing ------------------------------------------------------------

def pack_state(result, scenario, include_scenario):
    tensors = dict(result.model.named_tensors())
    tensors["run.seed"] = np.array([result.seed], np.float32)
    # correct-prediction counts are exact in float32, unlike the accuracies themselves
    n_test = np.array([len(t.splits["test"]) for t in scenario], np.float64)
    correct = np.rint(result.acc_matrix * n_test[None, :])
    tensors["run.acc_correct"] = np.where(np.isnan(result.acc_matrix), -1.0, correct).astype(np.float32)
    for i, snap in enumerate(result.kb_snapshots):
        for name, arr in snap.items():
            tensors[f"run.kb_snapshot{i}.{name}"] = arr
    if include_scenario:
        tensors.update(scenario_to_tensors(scenario))
    return tensors


def unpack_state(tensors, cfg: ExperimentConfig):
    """(model, scenario, acc_matrix, seed, snapshots) from checkpoint tensors."""
    seed = int(tensors["run.seed"][0])
    if "scenario.task0.inputs" in tensors:
        scenario = scenario_from_tensors(tensors)
        table = None
        if cfg["arch.fe_variant"] == "external_embedding":
            table = build_scenario(cfg, seed)[1]
    else:
        scenario, table = build_scenario(cfg, seed)
    arch = cfg.arch_config(scenario.input_shape)
    model_part = {k: v for k, v in tensors.items() if not k.startswith(("run.", "scenario."))}
    model = model_from_tensors(arch, model_part, table)
    correct = tensors["run.acc_correct"].astype(np.float64)
    n_test = np.array([len(t.splits["test"]) for t in scenario], np.float64)
    acc = np.where(correct < 0, np.nan, correct / n_test[None, :])
    snaps, i = [], 0
    while any(k.startswith(f"run.kb_snapshot{i}.") for k in tensors):
        prefix = f"run.kb_snapshot{i}."
        snaps.append({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        i += 1
    return model, scenario, acc, seed, snaps


# -- payloads -----------------------------------------------------------------

def _clean(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def summary_payload(result, cfg_seed: ExperimentConfig):
    m = result.acc_matrix
    try:
        b, defined = analysis.bwt(m), True
    except MetricError:
        b, defined = 0.0, False
    snap_digest = hashlib.sha256()
    for snap in result.kb_snapshots:
        snap_digest.update(param_digest(snap).encode())
    return {
        "variant": result.variant,
        "seed": result.seed,
        "n_tasks": int(m.shape[0]),
        "acc": analysis.avg_accuracy(m),
        "bwt": b,
        "bwt_defined": defined,
        "acc_matrix": m.tolist(),
        "params": result.counts,
        "config_hash": cfg_seed.digest(),
        "snapshots_digest": snap_digest.hexdigest(),
        "model_digest": param_digest(result.model.named_tensors()),
        "diagnostics": result.diagnostics,
    }


def acc_matrix_csv(m) -> str:
    rows = []
    for row in m:
        rows.append(",".join("" if math.isnan(v) else repr(float(v)) for v in row))
    return "\n".join(rows) + "\n"


def run_analyses(result, scenario, cfg: ExperimentConfig):
    """Learning curves plus every analysis enabled in ``cfg``."""
    split = "test" if "test" in cfg["run.eval_splits"] else cfg["run.eval_splits"][0]
    out = {"curves": {phase: analysis.learning_curve(result.events, phase, split)
                      for phase in sorted({e["phase"] for e in result.events})}}
    if cfg["analysis.updates"]:
        tau = cfg["analysis.tau"]
        out["updates"] = {"tau": tau, "fractions": analysis.update_fractions(result.kb_snapshots, tau)}
    if cfg["analysis.retrain"]:
        out["retrain"] = _retrain_report(result.model, scenario, cfg, result.acc_matrix, result.seed)
    if cfg["analysis.critical"]:
        out["critical"] = critical_report(result.model, scenario, cfg)
    return out


def _retrain_report(model, scenario, cfg, acc, seed):
    gains = analysis.retrain_gain(model, scenario, cfg.train_config(), acc, seed)
    valid = [g for g in gains if not math.isnan(g)]
    return {"gains": gains, "mean_gain": float(np.mean(valid)) if valid else float("nan")}


def critical_report(model, scenario, cfg):
    datas = task_data(scenario, model)
    reports = [analysis.critical_dimensions(model, d, "test", cfg["analysis.critical_threshold"])
               for d in datas if model.task(d.task.task_id).mask is not None]
    return {"reports": reports, "shared": analysis.shared_critical_modules(reports)}


def emit_results(result, scenario, cfg_seed: ExperimentConfig, directory, analyses, wall_clock):
    """Write every per-seed file into ``directory`` (which must exist)."""
    def write(name, text):
        atomic_write(os.path.join(directory, name), text.encode("utf-8"))

    write("summary.json", canonical_json(summary_payload(result, cfg_seed)))
    write("acc_matrix.csv", acc_matrix_csv(result.acc_matrix))
    write("events.jsonl", "".join(json.dumps(_clean(e), sort_keys=True) + "\n" for e in result.events))
    write("meta.jsonl", "".join(json.dumps(_clean(e), sort_keys=True) + "\n" for e in result.meta_log))
    write("config.echo", cfg_seed.to_text())
    for name, report in analyses.items():
        write(f"analysis_{name}.json", canonical_json(report))
    write("timing.json", canonical_json({"wall_clock_seconds": wall_clock}))
    save_checkpoint(pack_state(result, scenario, cfg_seed["scenario.source"] == "synthetic"),
                    os.path.join(directory, CHECKPOINT_NAME))


def aggregate_payload(summaries):
    accs = [s["acc"] for s in summaries]
    bwts = [s["bwt"] for s in summaries]
    return {
        "variant": summaries[0]["variant"],
        "seeds": [s["seed"] for s in summaries],
        "acc": {"values": accs, "mean": float(np.mean(accs)), "std": float(np.std(accs))},
        "bwt": {"values": bwts, "mean": float(np.mean(bwts)), "std": float(np.std(bwts)),
                "defined": all(s["bwt_defined"] for s in summaries)},
    }


# -- staging ------------------------------------------------------------------

class Staging:
    """Collect output in a temporary sibling of ``out`` and move it in on success."""

    def __init__(self, out):
        self.out = os.path.abspath(out)
        parent = os.path.dirname(self.out)
        os.makedirs(parent, exist_ok=True)
        self.dir = tempfile.mkdtemp(prefix=".stage-", dir=parent)

    def __enter__(self):
        return self.dir

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                os.makedirs(self.out, exist_ok=True)
                for entry in sorted(os.listdir(self.dir)):
                    dest = os.path.join(self.out, entry)
                    if os.path.isdir(dest):
                        shutil.rmtree(dest)
                    elif os.path.exists(dest):
                        os.unlink(dest)
                    os.replace(os.path.join(self.dir, entry), dest)
        finally:
            shutil.rmtree(self.dir, ignore_errors=True)
        return False


def seed_config(cfg: ExperimentConfig, seed, variant=None):
    changes = {"scenario.seeds": (seed,)}
    if variant is not None:
        changes["run.variant"] = variant
    return cfg.override(**changes)


def run_one(cfg_seed: ExperimentConfig, directory, log=None):
    """Train one seed/variant and write its files; returns the summary payload."""
    seed = cfg_seed.seeds[0]
    start = time.perf_counter()
    scenario, table = build_scenario(cfg_seed, seed)
    arch = cfg_seed.arch_config(scenario.input_shape)
    result = train_sequence(scenario, cfg_seed.train_config(), arch, cfg_seed["run.variant"], seed, table)
    analyses = run_analyses(result, scenario, cfg_seed)
    os.makedirs(directory, exist_ok=True)
    emit_results(result, scenario, cfg_seed, directory, analyses, time.perf_counter() - start)
    summary = summary_payload(result, cfg_seed)
    if log is not None:
        log(f"{summary['variant']} seed {seed}: acc {summary['acc']:.4f} bwt {summary['bwt']:+.4f}")
    return summary


def run(cfg: ExperimentConfig, log=None):
    """Train every configured seed into ``run.out``; returns the aggregate payload."""
    with Staging(cfg["run.out"]) as stage:
        summaries = [run_one(seed_config(cfg, s), os.path.join(stage, f"seed_{s}"), log) for s in cfg.seeds]
        agg = aggregate_payload(summaries)
        atomic_write(os.path.join(stage, "aggregate.json"), canonical_json(agg).encode())
    return agg


def ablate(cfg: ExperimentConfig, log=None):
    """Run all variants on the same seeds (and therefore the same data)."""
    table = []
    with Staging(cfg["run.out"]) as stage:
        for variant in Variant:
            vdir = os.path.join(stage, variant.value)
            summaries = [run_one(seed_config(cfg, s, variant.value), os.path.join(vdir, f"seed_{s}"), log)
                         for s in cfg.seeds]
            agg = aggregate_payload(summaries)
            atomic_write(os.path.join(vdir, "aggregate.json"), canonical_json(agg).encode())
            table.append(agg)
        lines = ["variant,acc_mean,acc_std,bwt_mean,bwt_std"]
        lines += [f"{a['variant']},{a['acc']['mean']!r},{a['acc']['std']!r},{a['bwt']['mean']!r},{a['bwt']['std']!r}"
                  for a in table]
        atomic_write(os.path.join(stage, "ablation.csv"), ("\n".join(lines) + "\n").encode())
        atomic_write(os.path.join(stage, "ablation.json"), canonical_json({"variants": table}).encode())
    return table


def analyze(kind, checkpoint_path, cfg: ExperimentConfig):
    """Run one analysis on a saved model; returns the report."""
    model, scenario, acc, seed, snaps = unpack_state(load_checkpoint(checkpoint_path), cfg)
    if kind == "critical":
        return critical_report(model, scenario, cfg)
    if kind == "updates":
        tau = cfg["analysis.tau"]
        return {"tau": tau, "fractions": analysis.update_fractions(snaps, tau)}
    if kind == "retrain":
        return _retrain_report(model, scenario, cfg, acc, seed)
    raise ConfigError(f"unknown analysis {kind!r}")
