"""Teacher-forced training: loss assembly, AdamW, clipping, the fit loop.

All file outputs (checkpoints, manifests) are deterministic functions of
(config, seed, data); timing is logged to stderr only so reruns stay
byte-identical.
"""

import hashlib
import json
import sys
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import save_model
from .data import FIXED_PROMPT
from .errors import ContractError, NumericError
from .metrics import bleu_n, tokenize

MANIFEST_NAME = "train_manifest.json"
BEST_CHECKPOINT = "best.ckpt"


def assemble_sequence(vocab, report):
    """Teacher-forcing arrays for one sample.

    The full sequence is [bos] + prompt + report + [eos]; inputs drop the
    final token, targets drop the first, and the loss mask covers exactly
    the report and eos targets (the model is never penalized on the prompt).
    """
    context = [vocab.bos_id] + vocab.encode(FIXED_PROMPT)
    report_ids = vocab.encode(report)
    tokens = context + report_ids + [vocab.eos_id]
    inputs = np.array(tokens[:-1], dtype=np.int64)
    targets = np.array(tokens[1:], dtype=np.int64)
    mask = np.zeros(len(targets), dtype=np.float64)
    mask[len(context) - 1 :] = 1.0
    return inputs, targets, mask


def masked_logprob_sum(logits, targets, mask):
    """Summed log-probability of masked targets plus the mask count."""
    count = float(mask.sum())
    if count == 0:
        raise ContractError("loss mask selects no positions")
    lp = ad.log_softmax(logits)
    picked = ad.select_columns(lp, targets)
    return ad.sum_all(ad.mul(picked, ad.constant(mask))), count


def nll_loss(logits, targets, mask):
    """Mean negative log-likelihood over masked positions."""
    total, count = masked_logprob_sum(logits, targets, mask)
    return ad.mul_scalar(total, -1.0 / count)


def batch_nll(model, samples, vocab):
    """Global token-mean NLL over a batch of ReportSamples."""
    sums = None
    count = 0.0
    for s in samples:
        inputs, targets, mask = assemble_sequence(vocab, s.report)
        logits = model.logits(inputs, s.image)
        part, n = masked_logprob_sum(logits, targets, mask)
        sums = part if sums is None else ad.add(sums, part)
        count += n
    return ad.mul_scalar(sums, -1.0 / count)


class AdamW:
    """Adam with decoupled weight decay; slot state keyed by parameter name."""

    def __init__(self, named_params, learning_rate=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        lr = self.learning_rate
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_global_norm(named_params, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    grads = []
    for _, p in named_params:
        if p.requires_grad and p.grad is not None:
            grads.append(p.grad)
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def train_step(model, samples, vocab, optimizer, grad_clip_norm=None):
    """One optimizer update on a batch; returns the batch loss."""
    optimizer.zero_grad()
    with Tape() as tape:
        loss = batch_nll(model, samples, vocab)
    tape.backward(loss)
    if grad_clip_norm is not None:
        clip_global_norm(optimizer.params, grad_clip_norm)
    optimizer.step()
    return loss.item()


def evaluate_nll(model, samples, vocab):
    """Token-mean NLL without recording gradients."""
    loss = batch_nll(model, samples, vocab)
    return loss.item()


def decode_samples(model, samples, vocab, max_report_len):
    """Greedy predictions for a list of samples."""
    prompt_ids = vocab.encode(FIXED_PROMPT)
    out = []
    for s in samples:
        ids = model.generate_ids(prompt_ids, s.image, vocab.bos_id, vocab.eos_id,
                                 max_len=max_report_len + 1)
        out.append(vocab.decode(ids[:max_report_len]))
    return out


def _val_bleu4(model, samples, vocab, max_report_len):
    preds = decode_samples(model, samples, vocab, max_report_len)
    cands = [tokenize(p) for p in preds]
    refs = [tokenize(s.report) for s in samples]
    return bleu_n(cands, refs, 4)


def _log(stream, record):
    if stream is not None:
        stream.write(json.dumps(record, sort_keys=True) + "\n")
        stream.flush()


def fit(model, dataset, run_cfg, out_dir, log_stream=sys.stderr):
    """Full training run; writes the best checkpoint and a run manifest.

    Best is the highest validation BLEU-4, ties broken by lower validation
    NLL. Returns the manifest dict.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = run_cfg.train
    vocab = dataset.vocab
    train = dataset.split("train")
    val = dataset.split("val")
    if not train:
        raise ContractError("training split is empty")

    optimizer = AdamW(
        model.named_parameters(),
        learning_rate=cfg.learning_rate,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    shuffle_rng = np.random.default_rng(cfg.seed)

    n_batches = max(1, (len(train) + cfg.batch_size - 1) // cfg.batch_size)
    interval = max(1, round(cfg.validate_every * n_batches))
    decode_limit = cfg.val_decode_limit or len(val)
    val_decode = val[:decode_limit]

    order_hasher = hashlib.sha256()
    history = []
    best = None  # (bleu4, -nll, step)
    step = 0

    def validate(epoch):
        nonlocal best
        val_nll = evaluate_nll(model, val, vocab) if val else float("nan")
        bleu4 = _val_bleu4(model, val_decode, vocab, cfg.max_report_len) if val_decode else 0.0
        history.append({"step": step, "epoch": epoch, "val_nll": val_nll,
                        "val_bleu4": bleu4})
        key = (bleu4, -val_nll if val else 0.0)
        if best is None or key > best[0]:
            best = (key, step)
            save_model(out_dir / BEST_CHECKPOINT, model,
                       extra={"vocab": vocab.tokens, "step": step})
        _log(log_stream, {"event": "val", "step": step, "epoch": epoch,
                          "val_nll": val_nll, "val_bleu4": bleu4,
                          "wall_time": time.time()})

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train))
        order_hasher.update(order.astype("<i8").tobytes())
        for b in range(n_batches):
            batch = [train[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            if not batch:
                continue
            loss = train_step(model, batch, vocab, optimizer, cfg.grad_clip_norm)
            step += 1
            _log(log_stream, {"event": "step", "step": step, "epoch": epoch,
                              "loss": loss, "wall_time": time.time()})
            if b + 1 < n_batches and (b + 1) % interval == 0:
                validate(epoch)
        validate(epoch)

    manifest = {
        "config": run_cfg.to_dict(),
        "data_hash": dataset.data_hash,
        "data_order_hash": order_hasher.hexdigest(),
        "vocab_size": len(vocab),
        "trainable": model.count_trainable(),
        "history": history,
        "best_step": best[1],
        "checkpoint": BEST_CHECKPOINT,
        "steps": step,
    }
    with open(out_dir / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest
