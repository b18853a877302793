"""Ablation grids: adapter-placement rows and component-combination rows.

Every cell trains a fresh model on the same dataset with the same seed, so
rows differ only in the setting under study. Published-run reference values
are carried along purely as layout annotations; they come from full-scale
runs on licensed data and are never asserted against desk-scale results.
"""

import dataclasses
import json
import re

from .adapters import AdapterSpec
from .config import RunConfig, adapters_from_list
from .metrics import evaluate_reports
from .model import build_model
from .training import decode_samples, fit

LORA_RANK = 4

ADAPTER_ROW_LABELS = (
    "LoRA(Llama2)",
    "LoRA(embedding)",
    "LoRA(x_proj)",
    "LoRA(dt_proj)",
    "LoRA(in_proj)",
    "LoRA(out_proj)",
    "LoRA_p(Z)",
    "LoRA_p(dt)",
    "LoRA_p(B)",
    "LoRA_p(C)",
    "LoRA_p(X)",
)

_LM_MATRICES = ("lm_q", "lm_k", "lm_v", "lm_o")


def _adapter_row_specs(label, r=LORA_RANK):
    if label == "LoRA(Llama2)":
        return [{"target": t, "r": r} for t in _LM_MATRICES]
    match = re.fullmatch(r"LoRA_p\((\w+)\)", label)
    if match:
        slc = match.group(1)
        target = "in_proj" if slc in ("X", "Z") else "x_proj"
        return [{"target": target, "slice": slc, "r": r}]
    match = re.fullmatch(r"LoRA\((\w+)\)", label)
    if match:
        return [{"target": match.group(1), "r": r}]
    raise ValueError(f"unknown adapter row {label!r}")


COMPONENT_ROWS = (
    ("#01", "FT", "L2"),
    ("#02", "FT", "L2+LoRA"),
    ("#03", "FT", "L2+HDL"),
    ("#04", "LoRA_P(X)", "L2"),
    ("#05", "LoRA_P(X)", "L2+LoRA"),
    ("#06", "LoRA_P(X)", "L2+HDL"),
)

# Published full-scale results, shown as annotations only:
# columns B1, B2, B3, B4, R-L, M, C.
REFERENCE_ADAPTER_ROWS = {
    "LoRA(Llama2)":    (0.479, 0.320, 0.233, 0.177, 0.386, 0.212, 0.489),
    "LoRA(embedding)": (0.463, 0.302, 0.218, 0.167, 0.379, 0.207, 0.530),
    "LoRA(x_proj)":    (0.457, 0.301, 0.226, 0.162, 0.383, 0.205, 0.473),
    "LoRA(dt_proj)":   (0.458, 0.300, 0.212, 0.161, 0.378, 0.203, 0.485),
    "LoRA(in_proj)":   (0.444, 0.288, 0.205, 0.152, 0.368, 0.194, 0.431),
    "LoRA(out_proj)":  (0.456, 0.297, 0.211, 0.156, 0.374, 0.199, 0.451),
    "LoRA_p(Z)":       (0.466, 0.302, 0.213, 0.163, 0.381, 0.204, 0.467),
    "LoRA_p(dt)":      (0.458, 0.299, 0.221, 0.157, 0.387, 0.197, 0.484),
    "LoRA_p(B)":       (0.462, 0.307, 0.208, 0.165, 0.384, 0.201, 0.472),
    "LoRA_p(C)":       (0.473, 0.303, 0.217, 0.154, 0.379, 0.209, 0.466),
    "LoRA_p(X)":       (0.485, 0.311, 0.223, 0.169, 0.388, 0.216, 0.474),
}

REFERENCE_COMPONENT_ROWS = {
    "#01": (0.480, 0.322, 0.226, 0.175, 0.383, 0.215, 0.478),
    "#02": (0.473, 0.311, 0.216, 0.171, 0.384, 0.210, 0.483),
    "#03": (0.489, 0.324, 0.231, 0.182, 0.391, 0.219, 0.490),
    "#04": (0.475, 0.309, 0.211, 0.161, 0.372, 0.208, 0.464),
    "#05": (0.471, 0.313, 0.216, 0.158, 0.374, 0.210, 0.461),
    "#06": (0.487, 0.325, 0.222, 0.167, 0.385, 0.226, 0.476),
}

GRID_NAMES = ("adapters", "components")


def _slugify(label):
    return re.sub(r"[^a-z0-9]+", "_", label.lower()).strip("_")


def _with(cfg, **changes):
    return dataclasses.replace(cfg, **changes)


def _run_cell(label, run_cfg, dataset, out_dir, eval_limit, log_stream):
    cell_dir = out_dir / "cells" / _slugify(label)
    model = build_model(run_cfg, len(dataset.vocab))
    manifest = fit(model, dataset, run_cfg, cell_dir, log_stream=log_stream)
    test = dataset.split("test")
    if eval_limit:
        test = test[:eval_limit]
    preds = decode_samples(model, test, dataset.vocab,
                           run_cfg.train.max_report_len)
    report = evaluate_reports(preds, [s.report for s in test])
    return {
        "label": label,
        "metrics": report.to_dict(),
        "trainable": manifest["trainable"]["trainable"],
        "data_order_hash": manifest["data_order_hash"],
    }


def run_adapter_grid(base_cfg, dataset, out_dir, eval_limit=16, log_stream=None):
    """One row per adapter placement; encoder and LM bases stay frozen."""
    rows = []
    for label in ADAPTER_ROW_LABELS:
        cfg = _with(
            base_cfg,
            visual_mode="cross_attn",
            adapters=adapters_from_list(_adapter_row_specs(label), "adapters"),
            tuning=_with(base_cfg.tuning, encoder="frozen", lm="frozen",
                         gate_scalars=True),
        )
        row = _run_cell(label, cfg, dataset, out_dir, eval_limit, log_stream)
        row["reference"] = REFERENCE_ADAPTER_ROWS[label]
        rows.append(row)
    return rows


def _component_cell_config(base_cfg, ssm_mode, lm_mode):
    if ssm_mode == "FT":
        encoder_tuning = "full"
        adapters = ()
    else:
        encoder_tuning = "frozen"
        adapters = (AdapterSpec("in_proj", slice="X", r=LORA_RANK),)
    if lm_mode == "L2":
        visual_mode = "prefix"
        hybrid = ()
    elif lm_mode == "L2+LoRA":
        visual_mode = "prefix"
        hybrid = ()
        adapters = adapters + tuple(
            AdapterSpec(t, r=LORA_RANK) for t in _LM_MATRICES
        )
    else:  # L2+HDL
        visual_mode = "cross_attn"
        hybrid = base_cfg.lm.hybrid_indices
    return _with(
        base_cfg,
        visual_mode=visual_mode,
        lm=_with(base_cfg.lm, hybrid_indices=tuple(hybrid)),
        adapters=adapters,
        tuning=_with(base_cfg.tuning, encoder=encoder_tuning, lm="frozen",
                     gate_scalars=True),
    )


def run_component_grid(base_cfg, dataset, out_dir, eval_limit=16, log_stream=None):
    """The 6-row grid: {FT, LoRA_P(X)} x {L2, L2+LoRA, L2+HDL}."""
    rows = []
    for label, ssm_mode, lm_mode in COMPONENT_ROWS:
        cfg = _component_cell_config(base_cfg, ssm_mode, lm_mode)
        row = _run_cell(f"{label} {ssm_mode} {lm_mode}", cfg, dataset, out_dir,
                        eval_limit, log_stream)
        row["label"] = label
        row["setting"] = f"{ssm_mode} + {lm_mode}"
        row["reference"] = REFERENCE_COMPONENT_ROWS[label]
        rows.append(row)
    return rows


_METRIC_KEYS = ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "meteor", "cider")
_HEADER = ("B1", "B2", "B3", "B4", "R-L", "M", "C")


def format_grid(rows, title):
    """Aligned table of desk-scale results with published values underneath."""
    lines = [
        f"# {title}",
        "# desk-scale synthetic-corpus results; published full-scale values",
        "# are appended per row as layout reference only (different data).",
    ]
    label_w = max(len(r.get("setting", r["label"])) for r in rows)
    label_w = max(label_w, len("setting"))
    head = "setting".ljust(label_w + 2) + "".join(h.rjust(8) for h in _HEADER)
    head += "trainable".rjust(12)
    lines.append(head)
    lines.append("-" * len(head))
    for r in rows:
        name = r.get("setting", r["label"])
        vals = "".join(f"{r['metrics'][k]:8.3f}" for k in _METRIC_KEYS)
        lines.append(f"{name.ljust(label_w + 2)}{vals}{r['trainable']:12d}")
        ref = "".join(f"{v:8.3f}" for v in r["reference"])
        lines.append(f"{('  published').ljust(label_w + 2)}{ref}")
    return "\n".join(lines)


def write_grid_outputs(rows, out_dir, grid_name, title):
    table = format_grid(rows, title)
    (out_dir / f"{grid_name}_grid.json").write_text(
        json.dumps(rows, sort_keys=True, indent=1) + "\n"
    )
    (out_dir / f"{grid_name}_grid.txt").write_text(table + "\n")
    return table


def run_grid(grid_name, base_cfg, dataset, out_dir, eval_limit=16,
             log_stream=None):
    if grid_name == "adapters":
        rows = run_adapter_grid(base_cfg, dataset, out_dir, eval_limit, log_stream)
        title = "adapter placement grid (11 settings)"
    elif grid_name == "components":
        rows = run_component_grid(base_cfg, dataset, out_dir, eval_limit, log_stream)
        title = "component grid: {FT, LoRA_P(X)} x {L2, L2+LoRA, L2+HDL}"
    else:
        raise ValueError(f"unknown grid {grid_name!r}; choose from {GRID_NAMES}")
    table = write_grid_outputs(rows, out_dir, grid_name, title)
    return rows, table
