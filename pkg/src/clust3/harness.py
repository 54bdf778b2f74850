"""File-level pipeline steps behind the command line: data, training, adaptation, reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .adapt import build_stream, prepare, run_ttt, summarize
from .data import Dataset, corrupt_images, CorruptionSpec, fig1_rows, generate_dataset, load_dataset, save_dataset
from .errors import ContractError
from .nn import ModelBundle
from .train import evaluate, joint_train

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("corruption", "severity", "checkpoint", "method", "seed", "accuracy", "lim_before", "lim_after")
FIG1_COLUMNS = ("K", "source_bits", "target_bits", "delta_mi_bits")
ABLATE_COLUMNS = ("grid", "cell", "layers", "clusters", "heads", "seed", "source_acc",
                  "unadapted_acc", "ptbn_acc", "adapted_max_acc", "gain")

ABLATION_GRIDS = {
    "layers": [{"projector_layers": l} for l in ((1,), (2,), (1, 2), (1, 2, 3, 4))],
    "k": [{"clusters": k} for k in (2, 5, 10, 20, 50, 100)],
    "heads": [{"heads": h} for h in (1, 5, 10, 15, 20)],
}


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, (tuple, list)):
        return "-".join(str(x) for x in v)
    return str(v)


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_run_config(out_dir, cfg, source_path=None):
    """Resolved config, its hash, and a verbatim copy of the input file if there was one."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if source_path is not None:
        (out_dir / "config.input.json").write_bytes(Path(source_path).read_bytes())
    (out_dir / "config.json").write_text(config_mod.dumps(cfg))
    (out_dir / "config.sha256").write_text(config_mod.content_hash(cfg) + "\n")


def for_seed(cfg, seed):
    """Copy of ``cfg`` whose training and corruption randomness follow ``seed``."""
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=int(seed)), seeds=(int(seed),))


# ---------------------------------------------------------------------------


def gen_data(cfg, out_dir, source_path=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = generate_dataset(cfg.dataset)
    save_dataset(out_dir / "train.bin", train)
    save_dataset(out_dir / "test.bin", test)
    write_run_config(out_dir, cfg, source_path)
    return out_dir / "train.bin", out_dir / "test.bin"


def load_data(data_dir):
    data_dir = Path(data_dir)
    return load_dataset(data_dir / "train.bin"), load_dataset(data_dir / "test.bin")


def train_run(cfg, data_dir, out_dir, seed=None, source_path=None):
    """Train one model; writes ``model.ckpt``, ``train_log.jsonl`` and the resolved config."""
    seed = cfg.seeds[0] if seed is None else seed
    cfg = for_seed(cfg, seed)
    train, test = load_data(data_dir)
    out_dir = Path(out_dir)
    write_run_config(out_dir, cfg, source_path)
    log_path = out_dir / "train_log.jsonl"
    log_path.write_text("")
    model = ModelBundle(cfg.model, seed=seed)
    model, log = joint_train(model, train, test, cfg.train, checkpoint_path=out_dir / "model.ckpt", log_path=log_path)
    return model, log


def load_run(run_dir):
    run_dir = Path(run_dir)
    cfg = config_mod.load(run_dir / "config.json")
    model = ModelBundle(cfg.model, seed=cfg.train.seed)
    model.load(run_dir / "model.ckpt")
    return cfg, model


def adapt_run(cfg, run_dir, data_dir, out_dir=None):
    """Adapt the trained model of ``run_dir`` on the corrupted test stream.

    The model layout comes from the run's own config; adaptation settings,
    corruptions and seed come from ``cfg`` (defaulting to the run config).
    """
    run_cfg, model = load_run(run_dir)
    cfg = cfg or run_cfg
    seed = run_cfg.train.seed
    out_dir = Path(out_dir or Path(run_dir) / "adapt")
    out_dir.mkdir(parents=True, exist_ok=True)
    _, test = load_data(data_dir)
    stream = build_stream(test, cfg.corruptions, cfg.adapt.severities, seed,
                          cfg.adapt.batch_size, cfg.adapt.max_batches)
    prepare(model)
    result = run_ttt(model, stream, cfg.adapt, seed=seed)
    write_csv(out_dir / "results.csv", result.rows, RESULT_COLUMNS)
    summary = {"seed": seed, "config_sha256": config_mod.content_hash(cfg), "methods": summarize(result.rows)}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


def eval_run(cfg, run_dir, data_dir, out_path=None):
    """Eval-mode accuracy of a trained model on the clean and corrupted test sets."""
    run_cfg, model = load_run(run_dir)
    cfg = cfg or run_cfg
    _, test = load_data(data_dir)
    report = {"clean": evaluate(model, test).accuracy}
    for kind in cfg.corruptions:
        if kind == "clean":
            continue
        for sev in cfg.adapt.severities:
            ds = Dataset(corrupt_images(test.images, CorruptionSpec(kind, sev, run_cfg.train.seed)), test.labels,
                         test.num_classes)
            report[f"{kind}@{sev}"] = evaluate(model, ds).accuracy
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def fig1(out_path, ks=(2, 5, 10, 20), n=100_000, seed=1, shift_std=1.5):
    rows = fig1_rows(ks, n, seed, shift_std)
    if out_path is not None:
        write_csv(out_path, rows, FIG1_COLUMNS)
    return rows


# ---------------------------------------------------------------------------
# ablation grid


def _ablate_cell(args):
    cfg, grid, index, change, seed, data_dir = args
    model_cfg = dataclasses.replace(cfg.model, **change)
    cfg = for_seed(dataclasses.replace(cfg, model=model_cfg), seed)
    train, test = load_data(data_dir)
    model = ModelBundle(cfg.model, seed=seed)
    model, _ = joint_train(model, train, test, cfg.train)
    stream = build_stream(test, cfg.corruptions, cfg.adapt.severities, seed, cfg.adapt.batch_size,
                          cfg.adapt.max_batches)
    adapt_cfg = dataclasses.replace(cfg.adapt, methods=("source", "ptbn", "clust3"))
    summary = summarize(run_ttt(model, stream, adapt_cfg, seed=seed).rows)
    adapted = summary["clust3"]["mean_accuracy"]
    unadapted = summary["source"]["mean_accuracy"]
    return {
        "grid": grid, "cell": index, "layers": cfg.model.projector_layers, "clusters": cfg.model.clusters,
        "heads": cfg.model.heads, "seed": seed, "source_acc": evaluate(model, test).accuracy,
        "unadapted_acc": unadapted, "ptbn_acc": summary["ptbn"]["mean_accuracy"],
        "adapted_max_acc": adapted, "gain": adapted - unadapted,
    }


def worker_count():
    try:
        return max(1, int(os.environ.get("CLUST3_THREADS", "1")))
    except ValueError:
        return 1


def ablate(cfg, grid, data_dir, out_path):
    """Train and adapt one model per grid cell and seed; one CSV row each."""
    if grid not in ABLATION_GRIDS:
        raise ContractError(f"unknown grid {grid!r}; expected one of {sorted(ABLATION_GRIDS)}")
    jobs = [(cfg, grid, i, change, seed, str(data_dir))
            for i, change in enumerate(ABLATION_GRIDS[grid]) for seed in cfg.seeds]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablate_cell, jobs))
    else:
        rows = [_ablate_cell(job) for job in jobs]
    rows.sort(key=lambda r: (r["cell"], r["seed"]))
    if out_path is not None:
        write_csv(out_path, rows, ABLATE_COLUMNS)
    return rows


# ---------------------------------------------------------------------------
# report


def report(inputs, out_path=None):
    """Markdown tables of existing result CSVs; values are aggregated, never recomputed."""
    sections = []
    for path in inputs:
        rows = read_csv(path)
        if not rows:
            continue
        name = Path(path).name
        if set(RESULT_COLUMNS) <= set(rows[0]):
            sections.append(_results_table(name, rows))
        else:
            cols = list(rows[0])
            lines = [f"### {name}", "", "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
            lines += ["| " + " | ".join(r[c] for c in cols) + " |" for r in rows]
            sections.append("\n".join(lines))
    text = "\n\n".join(sections) + "\n"
    if out_path is not None:
        Path(out_path).write_text(text)
    return text


def _results_table(name, rows):
    headline = [r for r in rows if r["checkpoint"] == "max"
                or (r["method"] in ("source", "ptbn") and r["checkpoint"] == "0")]
    methods = sorted({r["method"] for r in headline}, key=lambda m: ("source", "ptbn", "tent", "clust3").index(m))
    cells = {}
    for r in headline:
        cells.setdefault((r["corruption"], r["severity"]), {}).setdefault(r["method"], []).append(float(r["accuracy"]))
    lines = [f"### {name}", "", "| corruption | severity | " + " | ".join(methods) + " |",
             "|---|---|" + "---|" * len(methods)]
    means = {m: [] for m in methods}
    for (kind, sev), per in cells.items():
        vals = []
        for m in methods:
            v = float(np.mean(per[m])) if m in per else float("nan")
            means[m].append(v)
            vals.append(f"{100 * v:.2f}")
        lines.append(f"| {kind} | {sev} | " + " | ".join(vals) + " |")
    lines.append("| **mean** | | " + " | ".join(f"{100 * np.mean(means[m]):.2f}" for m in methods) + " |")
    return "\n".join(lines)
