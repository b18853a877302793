"""Run configuration: a fixed JSON schema validated before any compute.

Every section rejects unknown keys and reports errors with the full field
path (e.g. ``train.epochs: expected positive integer``) so a bad config
fails fast at the CLI boundary with exit code 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .adapters import AdapterSpec
from .encoder import EncoderConfig
from .errors import ConfigurationError

VISUAL_MODES = ("cross_attn", "prefix", "none")
TUNING_MODES = ("full", "frozen")


@dataclass(frozen=True)
class LmSettings:
    """Language-model hyperparameters; vocabulary size is bound at build time."""

    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    hybrid_indices: tuple[int, ...] = (0, 2)
    max_seq_len: int = 192
    gate_per_channel: bool = False
    separate_cross_query: bool = False

    def to_dict(self) -> dict:
        return {
            "d": self.d, "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_ff": self.d_ff, "hybrid_indices": list(self.hybrid_indices),
            "max_seq_len": self.max_seq_len, "gate_per_channel": self.gate_per_channel,
            "separate_cross_query": self.separate_cross_query,
        }


@dataclass(frozen=True)
class TuningConfig:
    encoder: str = "frozen"
    lm: str = "full"
    gate_scalars: bool = True  # False pins every warm-up scalar at its current value

    def to_dict(self) -> dict:
        return {"encoder": self.encoder, "lm": self.lm, "gate_scalars": self.gate_scalars}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip_norm: float | None = 1.0
    seed: int = 0
    validate_every: float = 1.0  # fraction of an epoch between validation passes
    max_report_len: int = 100
    val_decode_limit: int = 16  # greedy decodes per validation pass (0 = whole split)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "weight_decay": self.weight_decay,
            "betas": list(self.betas), "grad_clip_norm": self.grad_clip_norm,
            "seed": self.seed, "validate_every": self.validate_every,
            "max_report_len": self.max_report_len, "val_decode_limit": self.val_decode_limit,
        }


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    out_dir: str = "runs/out"
    visual_mode: str = "cross_attn"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lm: LmSettings = field(default_factory=LmSettings)
    adapters: tuple[AdapterSpec, ...] = ()
    tuning: TuningConfig = field(default_factory=TuningConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset, "out_dir": self.out_dir,
            "visual_mode": self.visual_mode, "encoder": self.encoder.to_dict(),
            "lm": self.lm.to_dict(),
            "adapters": [
                {"target": a.target, "slice": a.slice, "r": a.r, "alpha": a.alpha}
                for a in self.adapters
            ],
            "tuning": self.tuning.to_dict(), "train": self.train.to_dict(),
        }


def _require_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigurationError(f"{path}: expected an object, got {type(value).__name__}")
    return value


def _reject_unknown(d: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigurationError(f"{path}: unknown key(s) {', '.join(unknown)}")


def _pos_int(d: dict, key: str, default, path: str, minimum: int = 1):
    v = d.get(key, default)
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise ConfigurationError(f"{path}.{key}: expected integer >= {minimum}, got {v!r}")
    return v


def _number(d: dict, key: str, default, path: str, minimum: float | None = None):
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError(f"{path}.{key}: expected a number, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigurationError(f"{path}.{key}: must be >= {minimum}, got {v!r}")
    return float(v)


def _boolean(d: dict, key: str, default, path: str):
    v = d.get(key, default)
    if not isinstance(v, bool):
        raise ConfigurationError(f"{path}.{key}: expected true/false, got {v!r}")
    return v


def _string(d: dict, key: str, default, path: str, choices: tuple[str, ...] | None = None):
    v = d.get(key, default)
    if not isinstance(v, str):
        raise ConfigurationError(f"{path}.{key}: expected a string, got {v!r}")
    if choices and v not in choices:
        raise ConfigurationError(f"{path}.{key}: expected one of {choices}, got {v!r}")
    return v


def encoder_from_dict(d: dict, path: str = "encoder") -> EncoderConfig:
    d = _require_mapping(d, path)
    allowed = {"image_size", "patch_size", "channels", "d_model", "n_blocks",
               "d_state", "dt_rank", "d_conv", "expand"}
    _reject_unknown(d, allowed, path)
    return EncoderConfig(
        image_size=_pos_int(d, "image_size", 64, path),
        patch_size=_pos_int(d, "patch_size", 16, path),
        channels=_pos_int(d, "channels", 1, path),
        d_model=_pos_int(d, "d_model", 32, path),
        n_blocks=_pos_int(d, "n_blocks", 2, path, minimum=0),
        d_state=_pos_int(d, "d_state", 16, path),
        dt_rank=_pos_int(d, "dt_rank", 0, path, minimum=0),
        d_conv=_pos_int(d, "d_conv", 4, path),
        expand=_pos_int(d, "expand", 2, path),
    )


def lm_from_dict(d: dict, path: str = "lm") -> LmSettings:
    d = _require_mapping(d, path)
    allowed = {"d", "n_layers", "n_heads", "d_ff", "hybrid_indices", "max_seq_len",
               "gate_per_channel", "separate_cross_query"}
    _reject_unknown(d, allowed, path)
    idx = d.get("hybrid_indices", [0, 2])
    if not isinstance(idx, list) or any(not isinstance(i, int) or isinstance(i, bool) for i in idx):
        raise ConfigurationError(f"{path}.hybrid_indices: expected a list of integers, got {idx!r}")
    n_layers = _pos_int(d, "n_layers", 4, path)
    if sorted(set(idx)) != sorted(idx):
        raise ConfigurationError(f"{path}.hybrid_indices: duplicates in {idx!r}")
    for i in idx:
        if not (0 <= i < n_layers):
            raise ConfigurationError(f"{path}.hybrid_indices: index {i} outside [0, {n_layers})")
    return LmSettings(
        d=_pos_int(d, "d", 64, path),
        n_layers=n_layers,
        n_heads=_pos_int(d, "n_heads", 4, path),
        d_ff=_pos_int(d, "d_ff", 128, path),
        hybrid_indices=tuple(sorted(idx)),
        max_seq_len=_pos_int(d, "max_seq_len", 192, path),
        gate_per_channel=_boolean(d, "gate_per_channel", False, path),
        separate_cross_query=_boolean(d, "separate_cross_query", False, path),
    )


def adapters_from_list(items, path: str = "adapters") -> tuple[AdapterSpec, ...]:
    if not isinstance(items, list):
        raise ConfigurationError(f"{path}: expected a list, got {type(items).__name__}")
    specs = []
    for i, item in enumerate(items):
        p = f"{path}[{i}]"
        item = _require_mapping(item, p)
        _reject_unknown(item, {"target", "slice", "r", "alpha"}, p)
        target = _string(item, "target", None, p) if "target" in item else None
        if target is None:
            raise ConfigurationError(f"{p}.target: required")
        slc = item.get("slice")
        if slc is not None and not isinstance(slc, str):
            raise ConfigurationError(f"{p}.slice: expected a string or null, got {slc!r}")
        r = _pos_int(item, "r", 8, p)
        alpha = item.get("alpha")
        if alpha is not None:
            alpha = _number(item, "alpha", None, p)
        specs.append(AdapterSpec(target=target, slice=slc, r=r, alpha=alpha))
    return tuple(specs)


def tuning_from_dict(d: dict, path: str = "tuning") -> TuningConfig:
    d = _require_mapping(d, path)
    _reject_unknown(d, {"encoder", "lm", "gate_scalars"}, path)
    return TuningConfig(
        encoder=_string(d, "encoder", "frozen", path, TUNING_MODES),
        lm=_string(d, "lm", "full", path, TUNING_MODES),
        gate_scalars=_boolean(d, "gate_scalars", True, path),
    )


def train_from_dict(d: dict, path: str = "train") -> TrainConfig:
    d = _require_mapping(d, path)
    allowed = {"epochs", "batch_size", "learning_rate", "weight_decay", "betas",
               "grad_clip_norm", "seed", "validate_every", "max_report_len",
               "val_decode_limit"}
    _reject_unknown(d, allowed, path)
    betas = d.get("betas", [0.9, 0.999])
    if (not isinstance(betas, list) or len(betas) != 2
            or any(isinstance(b, bool) or not isinstance(b, (int, float)) for b in betas)
            or not all(0.0 <= b < 1.0 for b in betas)):
        raise ConfigurationError(f"{path}.betas: expected two numbers in [0, 1), got {betas!r}")
    clip = d.get("grad_clip_norm", 1.0)
    if clip is not None:
        clip = _number(d, "grad_clip_norm", 1.0, path)
        if clip <= 0:
            raise ConfigurationError(f"{path}.grad_clip_norm: must be positive or null, got {clip!r}")
    validate_every = _number(d, "validate_every", 1.0, path)
    if not (0.0 < validate_every <= 1.0):
        raise ConfigurationError(f"{path}.validate_every: must be in (0, 1], got {validate_every!r}")
    return TrainConfig(
        epochs=_pos_int(d, "epochs", 2, path),
        batch_size=_pos_int(d, "batch_size", 8, path),
        learning_rate=_number(d, "learning_rate", 1e-3, path, minimum=0.0),
        weight_decay=_number(d, "weight_decay", 0.01, path, minimum=0.0),
        betas=(float(betas[0]), float(betas[1])),
        grad_clip_norm=clip,
        seed=_pos_int(d, "seed", 0, path, minimum=0),
        validate_every=validate_every,
        max_report_len=_pos_int(d, "max_report_len", 100, path),
        val_decode_limit=_pos_int(d, "val_decode_limit", 16, path, minimum=0),
    )


def run_config_from_dict(d: dict) -> RunConfig:
    d = _require_mapping(d, "config")
    allowed = {"dataset", "out_dir", "visual_mode", "encoder", "lm", "adapters",
               "tuning", "train"}
    _reject_unknown(d, allowed, "config")
    return RunConfig(
        dataset=_string(d, "dataset", "", "config"),
        out_dir=_string(d, "out_dir", "runs/out", "config"),
        visual_mode=_string(d, "visual_mode", "cross_attn", "config", VISUAL_MODES),
        encoder=encoder_from_dict(d.get("encoder", {})),
        lm=lm_from_dict(d.get("lm", {})),
        adapters=adapters_from_list(d.get("adapters", [])),
        tuning=tuning_from_dict(d.get("tuning", {})),
        train=train_from_dict(d.get("train", {})),
    )


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}")
    return run_config_from_dict(raw)
