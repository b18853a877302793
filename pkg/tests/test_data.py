"""Synthetic corpus tests: determinism, consistency, format, learnability."""

import hashlib
import json

import numpy as np
import pytest

from rrg.data import (
    BOS,
    EOS,
    FIXED_PROMPT,
    UNK,
    Dataset,
    FindingClass,
    SyntheticSpec,
    Vocab,
    default_finding_classes,
    generate,
    load,
    render_report,
    split_sizes,
    verify_labels,
)
from rrg.errors import ConfigurationError, ContractError, CorruptionError
from rrg.metrics import PATHOLOGY_CLASSES, label_report, tokenize


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return generate(SyntheticSpec(n_samples=120, seed=7), root)


def _tree_hashes(root):
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.iterdir())
    }


# ---------------------------------------------------------------------------
# Split arithmetic and spec validation
# ---------------------------------------------------------------------------


def test_split_sizes_examples():
    assert split_sizes(100, (0.7, 0.1, 0.2)) == (70, 10, 20)
    assert split_sizes(512, (0.7, 0.1, 0.2)) == (358, 51, 103)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        SyntheticSpec(n_samples=0)
    with pytest.raises(ConfigurationError):
        SyntheticSpec(split_ratios=(0.5, 0.2, 0.2))
    with pytest.raises(ConfigurationError):
        SyntheticSpec(image_size=8)
    with pytest.raises(ConfigurationError):
        FindingClass("edema", "blob", 0, "mild", "left lung")
    classes = list(default_finding_classes())
    classes[0], classes[1] = classes[1], classes[0]
    with pytest.raises(ConfigurationError):
        SyntheticSpec(finding_classes=tuple(classes))
    bad_cell = default_finding_classes()[:13] + (
        FindingClass("hernia", "disc", 16, "small", "diaphragmatic contour"),
    )
    with pytest.raises(ConfigurationError):
        SyntheticSpec(finding_classes=bad_cell)


# ---------------------------------------------------------------------------
# Generation determinism and content
# ---------------------------------------------------------------------------


def test_regeneration_is_byte_identical(tmp_path):
    spec = SyntheticSpec(n_samples=40, seed=0)
    generate(spec, tmp_path / "a")
    generate(spec, tmp_path / "b")
    assert _tree_hashes(tmp_path / "a") == _tree_hashes(tmp_path / "b")


def test_different_seed_changes_the_corpus(tmp_path):
    generate(SyntheticSpec(n_samples=40, seed=0), tmp_path / "a")
    generate(SyntheticSpec(n_samples=40, seed=1), tmp_path / "b")
    assert _tree_hashes(tmp_path / "a") != _tree_hashes(tmp_path / "b")


def test_images_are_normalized_float32(corpus):
    for s in corpus.split("train")[:20]:
        assert s.image.shape == (1, 64, 64)
        assert s.image.dtype == np.float32
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_zero_motif_samples_are_all_negative(corpus):
    blanks = [
        s
        for split in corpus.splits.values()
        for s in split
        if not any(s.labels)
    ]
    assert blanks, "corpus should contain zero-motif samples"
    for s in blanks:
        assert s.report.count("no evidence of") == len(PATHOLOGY_CLASSES)
        assert "there is" not in s.report


def test_positive_class_brightens_its_home_cell(corpus):
    hits = 0
    for s in corpus.split("train"):
        cells = s.image[0].reshape(4, 16, 4, 16).mean(axis=(1, 3)).reshape(-1)
        negatives = [cells[c] for c, pos in enumerate(s.labels) if not pos]
        background = float(np.mean(negatives))
        for c, positive in enumerate(s.labels):
            if positive:
                assert cells[c] > background + 0.04
                hits += 1
    assert hits > 20


def test_report_is_pure_function_of_labels(corpus):
    by_key = {}
    for s in corpus.split("train"):
        key = tuple(s.labels)
        if key in by_key:
            assert s.report == by_key[key]
        else:
            by_key[key] = s.report
    assert len(by_key) > 5


def test_labeler_reproduces_gold_labels(corpus):
    assert verify_labels(corpus)
    sample = corpus.split("test")[0]
    assert label_report(sample.report) == sample.labels


def test_render_report_small_case():
    classes = default_finding_classes()
    labels = [False] * 14
    labels[3] = True  # edema
    text = render_report(labels, classes)
    assert "there is diffuse edema involving the lower zones ." in text
    assert text.count("no evidence of") == 13
    assert text.startswith("the chest examination")
    assert text.endswith("unremarkable .")


def test_reports_fit_the_desk_sequence_budget(corpus):
    longest = max(
        len(tokenize(s.report)) for split in corpus.splits.values() for s in split
    )
    # bos + 13 prompt tokens + report + eos must fit max_seq_len 192
    assert longest + 15 <= 192


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def test_split_sizes_and_disjointness(corpus):
    ids = {name: {s.id for s in rows} for name, rows in corpus.splits.items()}
    assert len(ids["train"]) == 84 and len(ids["val"]) == 12 and len(ids["test"]) == 24
    assert not ids["train"] & ids["val"]
    assert not ids["train"] & ids["test"]
    assert not ids["val"] & ids["test"]
    with pytest.raises(ContractError):
        corpus.split("dev")


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


def test_vocab_layout_and_prompt_coverage(corpus):
    v = corpus.vocab
    assert v.tokens[:3] == [BOS, EOS, UNK]
    prompt_ids = v.encode(FIXED_PROMPT)
    assert v.unk_id not in prompt_ids
    assert 60 <= len(v) <= 150


def test_vocab_excludes_nontraining_tokens():
    v = Vocab(["alpha beta gamma", "beta delta"])
    ids = v.encode("alpha omega")
    assert ids[0] != v.unk_id and ids[1] == v.unk_id
    assert v.decode(ids).split()[1] == UNK


def test_vocab_roundtrip_and_special_stripping(corpus):
    v = corpus.vocab
    report = corpus.split("train")[0].report
    ids = [v.bos_id] + v.encode(report) + [v.eos_id]
    assert v.decode(ids) == " ".join(tokenize(report))
    with pytest.raises(ContractError):
        v.decode([len(v)])


def test_training_reports_encode_without_unk(corpus):
    v = corpus.vocab
    for s in corpus.split("train"):
        assert v.unk_id not in v.encode(s.report)


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------


def test_round_trip_preserves_fields(corpus):
    reloaded = load(corpus.root)
    assert reloaded.manifest == corpus.manifest
    assert reloaded.data_hash == corpus.data_hash
    for name in ("train", "val", "test"):
        for a, b in zip(corpus.split(name), reloaded.split(name)):
            assert a.id == b.id and a.report == b.report and a.labels == b.labels
            np.testing.assert_array_equal(a.image, b.image)


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(ContractError):
        load(tmp_path)


def test_corrupted_image_file_detected(tmp_path):
    generate(SyntheticSpec(n_samples=20, seed=3), tmp_path)
    path = tmp_path / "train.bin"
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptionError):
        load(tmp_path)


def test_truncated_jsonl_detected(tmp_path):
    generate(SyntheticSpec(n_samples=20, seed=3), tmp_path)
    path = tmp_path / "samples.jsonl"
    path.write_bytes(path.read_bytes()[:-40])
    with pytest.raises(CorruptionError):
        load(tmp_path)


def test_unsupported_format_version_rejected(tmp_path):
    generate(SyntheticSpec(n_samples=20, seed=3), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CorruptionError):
        load(tmp_path)


# ---------------------------------------------------------------------------
# Learnability baseline
# ---------------------------------------------------------------------------


def _cell_features(image):
    return image[0].reshape(4, 16, 4, 16).mean(axis=(1, 3)).reshape(-1)


def test_nearest_neighbor_baseline_beats_chance(corpus):
    train = corpus.split("train")
    test = corpus.split("test")
    x_train = np.stack([_cell_features(s.image) for s in train])
    y_train = np.array([s.labels for s in train], dtype=bool)
    x_test = np.stack([_cell_features(s.image) for s in test])
    y_test = np.array([s.labels for s in test], dtype=bool)

    d2 = ((x_test[:, None, :] - x_train[None, :, :]) ** 2).sum(axis=2)
    pred = y_train[np.argmin(d2, axis=1)]
    nn_acc = (pred == y_test).mean()

    majority = y_train.mean(axis=0) > 0.5
    chance_acc = (np.broadcast_to(majority, y_test.shape) == y_test).mean()

    assert nn_acc > chance_acc
    assert nn_acc > 0.9
