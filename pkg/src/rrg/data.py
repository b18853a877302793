"""Synthetic image/report corpus: generation, on-disk format, vocabulary.

Each sample plants 0-3 visual motifs. Every class has a fixed motif shape and
a home grid cell (jittered a few pixels), and the report is a pure function of
the resulting label vector, so the image->report mapping is learnable by
construction and the keyword labeler reproduces the gold labels exactly.
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, CorruptionError
from .metrics import PATHOLOGY_CLASSES, label_report, tokenize

FIXED_PROMPT = (
    "Generate a comprehensive and detailed diagnosis report for this chest "
    "X-ray image."
)

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"

_SHAPES = ("disc", "hbar", "vbar", "square", "ring", "cross", "wedge")

_ADJECTIVES = (
    "mild", "moderate", "severe", "diffuse", "focal", "patchy", "subtle",
    "extensive", "chronic", "acute", "prominent", "scattered", "dense", "small",
)

_REGIONS = (
    "cardiac silhouette", "left lung", "right lung", "lower zones",
    "left base", "right base", "upper lobes", "apical region",
    "costophrenic angle", "pleural surface", "rib cage", "lung parenchyma",
    "interstitial space", "diaphragmatic contour",
)

_OPENING = "the chest examination demonstrates the following findings ."
_CLOSING = "the remainder of the study is otherwise unremarkable ."

_MAGIC = b"RRGI"
_DTYPE_F32_LE = 1
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FindingClass:
    name: str
    shape: str
    home_cell: int
    adjective: str
    region: str

    def __post_init__(self):
        if self.shape not in _SHAPES:
            raise ConfigurationError(f"unknown motif shape {self.shape!r}")


def default_finding_classes():
    return tuple(
        FindingClass(name, _SHAPES[i % len(_SHAPES)], i, _ADJECTIVES[i], _REGIONS[i])
        for i, name in enumerate(PATHOLOGY_CLASSES)
    )


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 512
    image_size: int = 64
    seed: int = 0
    finding_classes: tuple = field(default_factory=default_finding_classes)
    split_ratios: tuple = (0.7, 0.1, 0.2)
    noise_scale: float = 0.05
    max_findings: int = 3

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be positive")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be at least 16")
        if len(self.split_ratios) != 3 or any(r <= 0 for r in self.split_ratios):
            raise ConfigurationError("split_ratios must be 3 positive numbers")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigurationError("split_ratios must sum to 1")
        names = tuple(fc.name for fc in self.finding_classes)
        if names != PATHOLOGY_CLASSES:
            raise ConfigurationError(
                "finding_classes must cover the canonical pathology classes in order"
            )
        cells = self.image_size // 16
        for fc in self.finding_classes:
            if not 0 <= fc.home_cell < cells * cells:
                raise ConfigurationError(
                    f"home_cell {fc.home_cell} outside the {cells}x{cells} grid"
                )
        if not 0 <= self.max_findings <= len(self.finding_classes):
            raise ConfigurationError("max_findings out of range")

    def to_dict(self):
        return {
            "n_samples": self.n_samples,
            "image_size": self.image_size,
            "seed": self.seed,
            "split_ratios": list(self.split_ratios),
            "noise_scale": self.noise_scale,
            "max_findings": self.max_findings,
            "finding_classes": [
                {"name": fc.name, "shape": fc.shape, "home_cell": fc.home_cell,
                 "adjective": fc.adjective, "region": fc.region}
                for fc in self.finding_classes
            ],
        }


@dataclass
class ReportSample:
    id: str
    image: np.ndarray  # [channels, H, W] float32
    report: str
    labels: list


def split_sizes(n, ratios):
    """Floor train and val counts; the remainder is test."""
    n_train = math.floor(n * ratios[0])
    n_val = math.floor(n * ratios[1])
    return n_train, n_val, n - n_train - n_val


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _render_motif(image, shape, cy, cx, intensity):
    yy, xx = np.ogrid[: image.shape[0], : image.shape[1]]
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        mask = dy * dy + dx * dx <= 25
    elif shape == "hbar":
        mask = (np.abs(dy) <= 2) & (np.abs(dx) <= 6)
    elif shape == "vbar":
        mask = (np.abs(dx) <= 2) & (np.abs(dy) <= 6)
    elif shape == "square":
        mask = (np.abs(dy) <= 4) & (np.abs(dx) <= 4)
    elif shape == "ring":
        r2 = dy * dy + dx * dx
        mask = (r2 >= 9) & (r2 <= 25)
    elif shape == "cross":
        mask = ((np.abs(dx) <= 1) & (np.abs(dy) <= 6)) | (
            (np.abs(dy) <= 1) & (np.abs(dx) <= 6)
        )
    else:  # wedge
        mask = (dy >= 0) & (dy <= 6) & (np.abs(dx) <= dy)
    image[mask] += intensity


def render_report(labels, finding_classes):
    """Report text as a pure function of the label vector."""
    sentences = [_OPENING]
    for fc, positive in zip(finding_classes, labels):
        if positive:
            sentences.append(
                f"there is {fc.adjective} {fc.name} involving the {fc.region} ."
            )
        else:
            sentences.append(f"no evidence of {fc.name} .")
    sentences.append(_CLOSING)
    return " ".join(sentences)


def _make_sample(index, spec, seed_seq):
    rng = np.random.default_rng(seed_seq)
    size = spec.image_size
    cells = size // 16
    image = rng.normal(0.0, spec.noise_scale, size=(size, size))
    n_findings = int(rng.integers(0, spec.max_findings + 1))
    chosen = sorted(
        int(c) for c in rng.choice(len(spec.finding_classes), size=n_findings,
                                   replace=False)
    )
    labels = [False] * len(spec.finding_classes)
    for c in chosen:
        fc = spec.finding_classes[c]
        row, col = divmod(fc.home_cell, cells)
        cy = row * 16 + 8 + int(rng.integers(-3, 4))
        cx = col * 16 + 8 + int(rng.integers(-3, 4))
        _render_motif(image, fc.shape, cy, cx, float(rng.uniform(0.6, 1.0)))
        labels[c] = True
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None, :, :]
    return ReportSample(
        id=f"s{index:05d}",
        image=image,
        report=render_report(labels, spec.finding_classes),
        labels=labels,
    )


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocab:
    """Token table: specials, then prompt tokens, then sorted training tokens."""

    def __init__(self, train_reports):
        tokens = [BOS, EOS, UNK]
        seen = set(tokens)
        for tok in tokenize(FIXED_PROMPT):
            if tok not in seen:
                tokens.append(tok)
                seen.add(tok)
        corpus = sorted({t for rep in train_reports for t in tokenize(rep)})
        tokens.extend(t for t in corpus if t not in seen)
        self.tokens = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_tokens(cls, tokens):
        """Rebuild a vocabulary from a stored token list (e.g. a checkpoint)."""
        vocab = cls.__new__(cls)
        vocab.tokens = list(tokens)
        vocab.token_to_id = {t: i for i, t in enumerate(vocab.tokens)}
        return vocab

    def __len__(self):
        return len(self.tokens)

    @property
    def bos_id(self):
        return self.token_to_id[BOS]

    @property
    def eos_id(self):
        return self.token_to_id[EOS]

    @property
    def unk_id(self):
        return self.token_to_id[UNK]

    def encode(self, text):
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokenize(text)]

    def decode(self, ids):
        specials = {self.bos_id, self.eos_id}
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise ContractError(f"token id {i} outside vocabulary")
        return " ".join(self.tokens[i] for i in ids if i not in specials)


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_image_file(path, images):
    count = len(images)
    channels, height, width = images[0].shape if count else (1, 0, 0)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", count, channels, height, width, _DTYPE_F32_LE))
        for img in images:
            if img.shape != (channels, height, width):
                raise ContractError("inconsistent image shapes within a split")
            fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_image_file(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CorruptionError(f"{path}: bad magic")
    count, channels, height, width, dtype_tag = struct.unpack_from("<IIIII", blob, 4)
    if dtype_tag != _DTYPE_F32_LE:
        raise CorruptionError(f"{path}: unknown dtype tag {dtype_tag}")
    body = blob[24:]
    expected = count * channels * height * width * 4
    if len(body) != expected:
        raise CorruptionError(f"{path}: body is {len(body)} bytes, expected {expected}")
    flat = np.frombuffer(body, dtype="<f4")
    return flat.reshape(count, channels, height, width).astype(np.float32)


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


class Dataset:
    def __init__(self, root, manifest, splits, vocab):
        self.root = root
        self.manifest = manifest
        self.splits = splits
        self.vocab = vocab

    def split(self, name):
        if name not in self.splits:
            raise ContractError(f"unknown split {name!r}")
        return self.splits[name]

    @property
    def data_hash(self):
        joined = "".join(
            self.manifest["checksums"][k] for k in sorted(self.manifest["checksums"])
        )
        return hashlib.sha256(joined.encode()).hexdigest()


def generate(spec, out_dir):
    """Write the corpus under out_dir and return it loaded."""
    out_dir.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_samples)
    samples = [_make_sample(i, spec, children[i]) for i in range(spec.n_samples)]

    n_train, n_val, _ = split_sizes(spec.n_samples, spec.split_ratios)
    split_samples = {
        "train": samples[:n_train],
        "val": samples[n_train : n_train + n_val],
        "test": samples[n_train + n_val :],
    }

    with open(out_dir / "samples.jsonl", "w") as fh:
        for s in samples:
            fh.write(_canonical_json(
                {"id": s.id, "report": s.report, "labels": s.labels}
            ))
    for name, rows in split_samples.items():
        write_image_file(out_dir / f"{name}.bin", [s.image for s in rows])

    files = ["samples.jsonl", "train.bin", "val.bin", "test.bin"]
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "n_samples": spec.n_samples,
        "split_ids": {name: [s.id for s in rows] for name, rows in split_samples.items()},
        "checksums": {f: _sha256(out_dir / f) for f in files},
    }
    with open(out_dir / "manifest.json", "w") as fh:
        fh.write(_canonical_json(manifest))
    return load(out_dir)


def load(root):
    """Load a generated corpus; vocabulary comes from the training split only."""
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorruptionError(
            f"unsupported dataset format version {manifest.get('format_version')!r}"
        )

    for name, want in manifest["checksums"].items():
        path = root / name
        if not path.exists():
            raise CorruptionError(f"missing dataset file {path}")
        got = _sha256(path)
        if got != want:
            raise CorruptionError(f"{path}: checksum mismatch")

    rows = {}
    with open(root / "samples.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            rows[rec["id"]] = rec

    splits = {}
    for name, ids in manifest["split_ids"].items():
        images = read_image_file(root / f"{name}.bin")
        if len(images) != len(ids):
            raise CorruptionError(f"{name}: {len(images)} images for {len(ids)} ids")
        splits[name] = [
            ReportSample(id=i, image=images[k], report=rows[i]["report"],
                         labels=[bool(v) for v in rows[i]["labels"]])
            for k, i in enumerate(ids)
        ]

    vocab = Vocab([s.report for s in splits["train"]])
    return Dataset(root, manifest, splits, vocab)


def verify_labels(dataset):
    """Labeler-on-gold-report must reproduce the stored labels for every sample."""
    for name, rows in dataset.splits.items():
        for s in rows:
            if label_report(s.report) != s.labels:
                raise ContractError(f"label/report inconsistency in sample {s.id}")
    return True
