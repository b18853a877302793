"""Command-line surface: gen-data, train, generate, eval, ablate.

Exit codes: 0 success, 2 configuration/validation problems, 3 numeric
failures. The RRG_THREADS environment variable caps BLAS/OpenMP threads and
is applied before numpy is imported, so all heavy imports stay inside the
command handlers.
"""

import argparse
import dataclasses
import json
import os
import pathlib
import sys

THREADS_ENV = "RRG_THREADS"

_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_env():
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return
    if not value.isdigit() or int(value) < 1:
        from .errors import ConfigurationError

        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    for var in _BLAS_VARS:
        os.environ.setdefault(var, value)


def _canonical_json_line(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def _load_config(path, seed=None, out=None):
    from .config import load_run_config

    cfg = load_run_config(path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
    if out is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(out))
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    from .data import SyntheticSpec, generate, verify_labels
    from .errors import ConfigurationError

    fields = {}
    if args.config:
        raw = json.loads(pathlib.Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{args.config}: expected a JSON object")
        allowed = {"n_samples", "image_size", "seed", "split_ratios", "noise_scale",
                   "max_findings"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigurationError(f"{args.config}: unknown keys {sorted(unknown)}")
        fields.update(raw)
        if "split_ratios" in fields:
            fields["split_ratios"] = tuple(fields["split_ratios"])
    if args.seed is not None:
        fields["seed"] = args.seed
    spec = SyntheticSpec(**fields)
    dataset = generate(spec, pathlib.Path(args.out))
    verify_labels(dataset)
    sizes = {name: len(rows) for name, rows in dataset.splits.items()}
    print(json.dumps({"out": args.out, "splits": sizes,
                      "vocab_size": len(dataset.vocab)}, sort_keys=True))
    return 0


def cmd_train(args):
    from .data import load
    from .model import build_model
    from .training import MANIFEST_NAME, fit

    cfg = _load_config(args.config, args.seed, args.out)
    dataset = load(pathlib.Path(cfg.dataset))
    out_dir = pathlib.Path(cfg.out_dir)
    model = build_model(cfg, vocab_size=len(dataset.vocab))
    manifest = fit(model, dataset, cfg, out_dir)
    last = manifest["history"][-1] if manifest["history"] else {}
    print(json.dumps({
        "out_dir": str(out_dir),
        "manifest": str(out_dir / MANIFEST_NAME),
        "checkpoint": str(out_dir / manifest["checkpoint"]),
        "steps": manifest["steps"],
        "val_nll": last.get("val_nll"),
        "val_bleu4": last.get("val_bleu4"),
        "trainable": manifest["trainable"]["trainable"],
    }, sort_keys=True))
    return 0


def _restore_from_run(cfg):
    from .checkpoint import restore_model
    from .data import Vocab
    from .errors import ContractError
    from .model import build_model
    from .training import BEST_CHECKPOINT

    ckpt = pathlib.Path(cfg.out_dir) / BEST_CHECKPOINT
    if not ckpt.exists():
        raise ContractError(f"no checkpoint at {ckpt}; run train first")
    # peek at the header for the vocabulary, then rebuild and load
    from .checkpoint import load_checkpoint

    header, _ = load_checkpoint(ckpt)
    tokens = header.get("extra", {}).get("vocab")
    if not tokens:
        raise ContractError(f"{ckpt}: checkpoint carries no vocabulary")
    vocab = Vocab.from_tokens(tokens)
    model = build_model(cfg, vocab_size=len(vocab))
    restore_model(ckpt, model)
    return model, vocab


def cmd_generate(args):
    from .data import load
    from .training import decode_samples

    cfg = _load_config(args.config, args.seed)
    model, vocab = _restore_from_run(cfg)

    if args.image:
        from .data import ReportSample, read_image_file

        images = read_image_file(pathlib.Path(args.image))
        samples = [
            ReportSample(id=f"image{i:05d}", image=img, report="", labels=[])
            for i, img in enumerate(images)
        ]
    else:
        dataset = load(pathlib.Path(cfg.dataset))
        samples = dataset.split(args.split)

    preds = decode_samples(model, samples, vocab, cfg.train.max_report_len)
    out_path = pathlib.Path(args.out) if args.out else None
    lines = [
        _canonical_json_line({"id": s.id, "prediction": p})
        for s, p in zip(samples, preds)
    ]
    if out_path:
        out_path.write_text("".join(lines))
    else:
        sys.stdout.write("".join(lines))
    return 0


def _read_jsonl(path, value_keys):
    from .errors import ContractError

    rows = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if "id" not in rec:
                raise ContractError(f"{path}:{lineno}: missing id")
            for key in value_keys:
                if key in rec:
                    rows[rec["id"]] = rec[key]
                    break
            else:
                raise ContractError(
                    f"{path}:{lineno}: missing any of {sorted(value_keys)}"
                )
    return rows


def cmd_eval(args):
    from .errors import ContractError
    from .metrics import evaluate_reports, format_table

    preds = _read_jsonl(args.predictions, ("prediction",))
    refs = _read_jsonl(args.references, ("reference", "report"))
    missing = sorted(set(refs) - set(preds))
    surplus = sorted(set(preds) - set(refs))
    if missing or surplus:
        raise ContractError(
            f"id mismatch: missing predictions for {missing[:5]}, "
            f"unmatched predictions {surplus[:5]}"
        )
    ids = sorted(preds)
    report = evaluate_reports([preds[i] for i in ids], [refs[i] for i in ids])
    record = report.to_dict()
    print(format_table([("eval", record)]))
    ce_line = {k: record[k] for k in ("ce_precision", "ce_recall", "ce_f1")}
    print(json.dumps(ce_line, sort_keys=True))
    if args.out:
        pathlib.Path(args.out).write_text(
            json.dumps(record, sort_keys=True, indent=1) + "\n"
        )
    return 0


def cmd_ablate(args):
    from .ablate import run_grid
    from .data import load

    cfg = _load_config(args.config, args.seed, args.out)
    dataset = load(pathlib.Path(cfg.dataset))
    out_dir = pathlib.Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, table = run_grid(args.grid, cfg, dataset, out_dir,
                        eval_limit=args.eval_limit, log_stream=None)
    print(table)
    return 0


# ---------------------------------------------------------------------------
# Wiring
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rrg", description="Report-generation research harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--config", help="JSON file of generator settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the config output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="greedy-decode reports from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", default="test")
    p.add_argument("--image", help="flat binary image file instead of a split")
    p.add_argument("--out", help="write predictions JSONL here (default stdout)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("predictions", help="JSONL of {id, prediction}")
    p.add_argument("references", help="JSONL of {id, reference} or {id, report}")
    p.add_argument("--out", help="write the metric record JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, choices=("adapters", "components"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="override the config output directory")
    p.add_argument("--eval-limit", type=int, default=16,
                   help="test samples decoded per cell (0 = whole split)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    from .errors import (
        ConfigurationError,
        ContractError,
        CorruptionError,
        DimensionError,
        NumericError,
        VocabularyError,
    )

    try:
        _apply_thread_env()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigurationError, ContractError, CorruptionError, DimensionError,
            VocabularyError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
