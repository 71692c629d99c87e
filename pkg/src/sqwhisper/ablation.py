"""Fixed ablation grids run at desk scale, tabulated as token-error-rate deltas."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .train import corpus_config, run_experiment
from .mixsim import build_corpus

SUITES = {
    "queries": [(f"queries={n}", {"num_queries": n}) for n in (1, 2, 4, 8, 16)],
    "contrastive": [("alpha=20", {"alpha": 20.0}), ("alpha=0", {"alpha": 0.0})],
    "prompt_scheme": [
        ("enc+dec", {"enc_prompt": True, "dec_prompt": True}),
        ("enc", {"enc_prompt": True, "dec_prompt": False}),
        ("dec", {"enc_prompt": False, "dec_prompt": True}),
        ("none", {"enc_prompt": False, "dec_prompt": False}),
    ],
    "mismatch": [("matched+mismatched", {"eval_mismatch": True})],
}


def suite_cells(name: str, base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    try:
        cells = SUITES[name]
    except KeyError:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}") from None
    return [(label, base.replace(sqformer=True, **changes)) for label, changes in cells]


def _row(label: str, seed: int, summary: dict) -> dict:
    return {"cell": label, "seed": seed, "ter": summary["ter"],
            "ter_mismatched": summary.get("ter_mismatched"),
            "prompt_separation": summary.get("prompt_separation"),
            "trainable_params": summary["params"]["trainable"]}


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def ablation_suite(name: str, base: ExperimentConfig, seeds=(0,), out_dir: str | Path | None = None,
                   cache: dict | None = None, verbose: bool = False) -> dict:
    """Run every cell of suite ``name`` for each seed.

    ``cache`` maps a config digest to an earlier run summary so cells shared
    between suites are trained once.
    """
    cache = {} if cache is None else cache
    rows = []
    for seed in seeds:
        corpus = None
        for label, cfg in suite_cells(name, base):
            cfg = cfg.replace(seed=seed)
            key = cfg.digest()
            if key not in cache:
                if corpus is None:
                    corpus = build_corpus(corpus_config(cfg))
                run_dir = Path(out_dir) / f"{label}-seed{seed}" if out_dir is not None else None
                cache[key] = run_experiment(cfg, run_dir, source=corpus)
            rows.append(_row(label, seed, cache[key]))
            if verbose:
                print(json.dumps(rows[-1]), flush=True)
    labels = [label for label, _ in SUITES[name]]
    cells = {}
    for label in labels:
        sel = [r for r in rows if r["cell"] == label]
        cells[label] = {"ter": _mean([r["ter"] for r in sel]),
                        "ter_mismatched": _mean([r["ter_mismatched"] for r in sel]),
                        "prompt_separation": _mean([r["prompt_separation"] for r in sel]),
                        "runs": len(sel)}
    ref = cells[labels[0]]["ter"]
    for label in labels:
        cells[label]["ter_delta"] = cells[label]["ter"] - ref
    report = {"suite": name, "seeds": list(seeds), "reference": labels[0], "cells": cells, "rows": rows}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(json.dumps(report, indent=2))
    return report


def format_table(report: dict) -> str:
    lines = [f"suite: {report['suite']}  seeds: {report['seeds']}",
             f"{'cell':<20} {'TER':>8} {'delta':>8} {'TER-mm':>8} {'sep':>8}"]

    def fmt(v):
        return f"{v:8.4f}" if v is not None else f"{'-':>8}"

    for label, c in report["cells"].items():
        lines.append(f"{label:<20} {fmt(c['ter'])} {fmt(c['ter_delta'])} {fmt(c['ter_mismatched'])} "
                     f"{fmt(c['prompt_separation'])}")
    return "\n".join(lines)
