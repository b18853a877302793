"""Corpus text-generation metrics and keyword-based clinical-efficacy scoring.

All scorers take pre-tokenized reports (lists of lowercase tokens). The
`evaluate_reports` entry point accepts raw strings and applies `tokenize`.
"""

import math
import string
from collections import Counter, deque
from dataclasses import dataclass

from .errors import ContractError

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5

# Fixed pathology vocabulary: one single-token keyword per class, scored in
# this canonical order everywhere (reports, labels, metric cells).
PATHOLOGY_CLASSES = (
    "cardiomegaly",
    "opacity",
    "lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "effusion",
    "thickening",
    "fracture",
    "emphysema",
    "fibrosis",
    "hernia",
)

NEGATION_CUES = frozenset({"no", "without", "negative"})
NEGATION_WINDOW = 3

_PUNCT_TO_SPACE = str.maketrans({ch: " " for ch in string.punctuation})


def tokenize(text):
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return text.lower().translate(_PUNCT_TO_SPACE).split()


def _check_pairs(candidates, references):
    if len(candidates) != len(references):
        raise ContractError(
            f"paired lists differ in length: {len(candidates)} vs {len(references)}"
        )
    if not candidates:
        raise ContractError("empty corpus")


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def bleu_scores(candidates, references, max_n=4):
    """Corpus BLEU-1..max_n: pooled clipped counts, geometric mean, brevity penalty."""
    _check_pairs(candidates, references)
    matched = [0] * (max_n + 1)
    possible = [0] * (max_n + 1)
    for cand, ref in zip(candidates, references):
        for n in range(1, max_n + 1):
            ref_counts = _ngram_counts(ref, n)
            for gram, cnt in _ngram_counts(cand, n).items():
                matched[n] += min(cnt, ref_counts[gram])
            possible[n] += max(0, len(cand) - n + 1)
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(1, cand_len))
    scores = []
    for order in range(1, max_n + 1):
        if any(matched[n] == 0 or possible[n] == 0 for n in range(1, order + 1)):
            scores.append(0.0)
            continue
        log_mean = sum(
            math.log(matched[n] / possible[n]) for n in range(1, order + 1)
        ) / order
        scores.append(bp * math.exp(log_mean))
    return scores


def bleu_n(candidates, references, n):
    if not 1 <= n <= 4:
        raise ContractError(f"BLEU order must be 1..4, got {n}")
    return bleu_scores(candidates, references, max_n=n)[n - 1]


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def _lcs_length(a, b):
    # rolling single-row dynamic program
    prev = [0] * (len(b) + 1)
    for tok in a:
        cur = [0]
        for j, other in enumerate(b):
            cur.append(prev[j] + 1 if tok == other else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate, reference, beta=ROUGE_BETA):
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    b2 = beta * beta
    return (1 + b2) * recall * precision / (recall + b2 * precision)


def rouge_l(candidates, references):
    """Mean per-pair LCS F-measure, recall-weighted."""
    _check_pairs(candidates, references)
    return sum(rouge_l_pair(c, r) for c, r in zip(candidates, references)) / len(
        candidates
    )


# ---------------------------------------------------------------------------
# METEOR
# ---------------------------------------------------------------------------


def meteor_pair(candidate, reference):
    # greedy alignment: each candidate token takes the leftmost unused
    # occurrence of itself in the reference
    remaining = {}
    for idx, tok in enumerate(reference):
        remaining.setdefault(tok, deque()).append(idx)
    aligned_ref_positions = []
    for tok in candidate:
        queue = remaining.get(tok)
        if queue:
            aligned_ref_positions.append(queue.popleft())
        else:
            aligned_ref_positions.append(None)
    pairs = [
        (ci, ri) for ci, ri in enumerate(aligned_ref_positions) if ri is not None
    ]
    m = len(pairs)
    if m == 0:
        return 0.0
    precision = m / len(candidate)
    recall = m / len(reference)
    f_mean = precision * recall / (
        METEOR_ALPHA * precision + (1 - METEOR_ALPHA) * recall
    )
    chunks = 1
    for (c_prev, r_prev), (c_next, r_next) in zip(pairs, pairs[1:]):
        if c_next != c_prev + 1 or r_next != r_prev + 1:
            chunks += 1
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return f_mean * (1.0 - penalty)


def meteor(candidates, references):
    """Mean per-pair exact-match METEOR."""
    _check_pairs(candidates, references)
    return sum(meteor_pair(c, r) for c, r in zip(candidates, references)) / len(
        candidates
    )


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------


def document_frequencies(references, max_n=4):
    """Per-order n-gram document frequencies over the reference corpus."""
    if len(references) < 2:
        raise ContractError("CIDEr needs at least 2 reference documents for IDF")
    return {
        n: Counter(gram for ref in references for gram in set(_ngram_counts(ref, n)))
        for n in range(1, max_n + 1)
    }


def cider(candidates, references, corpus_stats=None, max_n=4):
    """Mean over pairs of the 10-scaled average TF-IDF n-gram cosine."""
    _check_pairs(candidates, references)
    if corpus_stats is None:
        corpus_stats = document_frequencies(references, max_n)
    log_docs = math.log(len(references))

    def weighted(tokens, n):
        df = corpus_stats[n]
        return {
            gram: cnt * (log_docs - math.log(max(1.0, df[gram])))
            for gram, cnt in _ngram_counts(tokens, n).items()
        }

    total = 0.0
    for cand, ref in zip(candidates, references):
        per_n = 0.0
        for n in range(1, max_n + 1):
            vc = weighted(cand, n)
            vr = weighted(ref, n)
            norm_c = math.sqrt(sum(v * v for v in vc.values()))
            norm_r = math.sqrt(sum(v * v for v in vr.values()))
            if norm_c > 0 and norm_r > 0:
                dot = sum(v * vr.get(g, 0.0) for g, v in vc.items())
                per_n += dot / (norm_c * norm_r)
        total += 10.0 * per_n / max_n
    return total / len(candidates)


# ---------------------------------------------------------------------------
# Clinical efficacy
# ---------------------------------------------------------------------------


def label_report(text):
    """Keyword labels with negation: a class is positive when any mention of
    its keyword lacks a negation cue in the 3 preceding tokens."""
    tokens = tokenize(text) if isinstance(text, str) else list(text)
    labels = [False] * len(PATHOLOGY_CLASSES)
    index = {kw: i for i, kw in enumerate(PATHOLOGY_CLASSES)}
    for pos, tok in enumerate(tokens):
        cls = index.get(tok)
        if cls is None:
            continue
        window = tokens[max(0, pos - NEGATION_WINDOW) : pos]
        if not any(w in NEGATION_CUES for w in window):
            labels[cls] = True
    return labels


def ce_metrics(pred_reports, true_reports, labeler=label_report, average="micro"):
    """Precision/recall/F1 of predicted vs true pathology labels."""
    _check_pairs(pred_reports, true_reports)
    if average not in ("micro", "macro"):
        raise ContractError(f"unknown average {average!r}")
    pred = [labeler(t) for t in pred_reports]
    true = [labeler(t) for t in true_reports]

    def prf(tp, fp, fn):
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return p, r, f

    if average == "micro":
        tp = sum(p and t for row_p, row_t in zip(pred, true) for p, t in zip(row_p, row_t))
        fp = sum(p and not t for row_p, row_t in zip(pred, true) for p, t in zip(row_p, row_t))
        fn = sum(t and not p for row_p, row_t in zip(pred, true) for p, t in zip(row_p, row_t))
        return prf(tp, fp, fn)
    per_class = []
    for c in range(len(PATHOLOGY_CLASSES)):
        tp = sum(row_p[c] and row_t[c] for row_p, row_t in zip(pred, true))
        fp = sum(row_p[c] and not row_t[c] for row_p, row_t in zip(pred, true))
        fn = sum(row_t[c] and not row_p[c] for row_p, row_t in zip(pred, true))
        per_class.append(prf(tp, fp, fn))
    k = len(per_class)
    return tuple(sum(vals[i] for vals in per_class) / k for i in range(3))


# ---------------------------------------------------------------------------
# Bundled report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    bleu: tuple
    rouge_l: float
    meteor: float
    cider: float
    ce_precision: float
    ce_recall: float
    ce_f1: float

    def to_dict(self):
        return {
            "bleu_1": self.bleu[0],
            "bleu_2": self.bleu[1],
            "bleu_3": self.bleu[2],
            "bleu_4": self.bleu[3],
            "rouge_l": self.rouge_l,
            "meteor": self.meteor,
            "cider": self.cider,
            "ce_precision": self.ce_precision,
            "ce_recall": self.ce_recall,
            "ce_f1": self.ce_f1,
        }


def evaluate_reports(predictions, references, average="micro"):
    """Score raw prediction strings against raw reference strings."""
    _check_pairs(predictions, references)
    cand_tokens = [tokenize(p) for p in predictions]
    ref_tokens = [tokenize(r) for r in references]
    b = bleu_scores(cand_tokens, ref_tokens)
    p, r, f1 = ce_metrics(predictions, references, average=average)
    return MetricReport(
        bleu=tuple(b),
        rouge_l=rouge_l(cand_tokens, ref_tokens),
        meteor=meteor(cand_tokens, ref_tokens),
        cider=cider(cand_tokens, ref_tokens),
        ce_precision=p,
        ce_recall=r,
        ce_f1=f1,
    )


DEVIATION_NOTES = (
    "METEOR: exact-match alignment only (no stemming or synonym sets)",
    "CIDEr: plain TF-IDF cosine variant (no length penalty)",
    f"ROUGE-L: beta = {ROUGE_BETA}",
)

_COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "METEOR", "CIDEr")


def format_table(rows, notes=DEVIATION_NOTES):
    """Aligned-column table of (label, MetricReport-or-dict) rows."""
    lines = [f"# {note}" for note in notes]
    label_w = max([len("Model")] + [len(label) for label, _ in rows])
    header = "Model".ljust(label_w) + "".join(c.rjust(9) for c in _COLUMNS)
    lines.append(header)
    lines.append("-" * len(header))
    for label, rep in rows:
        d = rep.to_dict() if isinstance(rep, MetricReport) else dict(rep)
        vals = [d["bleu_1"], d["bleu_2"], d["bleu_3"], d["bleu_4"],
                d["rouge_l"], d["meteor"], d["cider"]]
        lines.append(label.ljust(label_w) + "".join(f"{v:9.3f}" for v in vals))
    return "\n".join(lines)
