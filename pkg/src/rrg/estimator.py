"""Scikit-learn style facade over the image-to-report pipeline.

``ReportGenerator`` wraps corpus assembly, model construction, and the
training loop behind the estimator API: constructor parameters mirror the
run-config schema, ``fit(X, y)`` trains on images and report strings, and
``predict(X)`` greedy-decodes reports. Checkpoints and the run manifest
land in ``out_dir`` (a temporary directory when unset).
"""

from __future__ import annotations

import hashlib
import pathlib
import tempfile

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import (
    RunConfig,
    TrainConfig,
    adapters_from_list,
    encoder_from_dict,
    lm_from_dict,
    tuning_from_dict,
)
from .data import ReportSample, Vocab
from .metrics import bleu_n, evaluate_reports, label_report, tokenize
from .model import build_model
from .training import decode_samples, fit


class _ArraysAsDataset:
    """Adapter giving in-memory (images, reports) the corpus interface."""

    def __init__(self, train, val, vocab):
        self._splits = {"train": train, "val": val}
        self.vocab = vocab

    def split(self, name):
        return self._splits[name]

    @property
    def data_hash(self):
        h = hashlib.sha256()
        for name in ("train", "val"):
            for s in self._splits[name]:
                h.update(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
                h.update(s.report.encode())
        return h.hexdigest()


def _as_image_list(X):
    images = []
    for i, img in enumerate(X):
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(
                f"X[{i}]: expected an image of shape [channels, H, W] or [H, W], "
                f"got shape {arr.shape}"
            )
        images.append(arr)
    return images


class ReportGenerator(BaseEstimator):
    """Image-to-report generator with the fit/predict interface.

    Parameters mirror the run-config schema: ``encoder``, ``lm``,
    ``tuning`` are dicts (or None for defaults), ``adapters`` a list of
    placement dicts. Scalar parameters feed the training loop. ``score``
    returns corpus BLEU-4, so higher is better.
    """

    def __init__(self, visual_mode="cross_attn", encoder=None, lm=None,
                 adapters=None, tuning=None, epochs=2, batch_size=8,
                 learning_rate=1e-3, weight_decay=0.01, grad_clip_norm=1.0,
                 seed=0, validate_every=1.0, max_report_len=100,
                 val_decode_limit=16, val_fraction=0.1, out_dir=None):
        self.visual_mode = visual_mode
        self.encoder = encoder
        self.lm = lm
        self.adapters = adapters
        self.tuning = tuning
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.seed = seed
        self.validate_every = validate_every
        self.max_report_len = max_report_len
        self.val_decode_limit = val_decode_limit
        self.val_fraction = val_fraction
        self.out_dir = out_dir

    # -- config assembly -----------------------------------------------------

    def _run_config(self, out_dir):
        return RunConfig(
            dataset="",
            out_dir=str(out_dir),
            visual_mode=self.visual_mode,
            encoder=encoder_from_dict(self.encoder or {}),
            lm=lm_from_dict(self.lm or {}),
            adapters=adapters_from_list(list(self.adapters or [])),
            tuning=tuning_from_dict(self.tuning or {}),
            train=TrainConfig(
                epochs=self.epochs,
                batch_size=self.batch_size,
                learning_rate=self.learning_rate,
                weight_decay=self.weight_decay,
                grad_clip_norm=self.grad_clip_norm,
                seed=self.seed,
                validate_every=self.validate_every,
                max_report_len=self.max_report_len,
                val_decode_limit=self.val_decode_limit,
            ),
        )

    def _samples(self, X, y=None):
        images = _as_image_list(X)
        if y is None:
            reports = [""] * len(images)
        else:
            reports = list(y)
            if len(reports) != len(images):
                raise ValueError(
                    f"X and y disagree on length: {len(images)} != {len(reports)}"
                )
        return [
            ReportSample(id=f"sample{i:05d}", image=img, report=rep,
                         labels=label_report(rep))
            for i, (img, rep) in enumerate(zip(images, reports))
        ]

    # -- estimator API ---------------------------------------------------------

    def fit(self, X, y):
        """Train on images X and report strings y; returns self.

        The last ``round(len(X) * val_fraction)`` pairs (at least one) are
        held out for validation; the vocabulary is built from the training
        reports only.
        """
        samples = self._samples(X, y)
        if len(samples) < 2:
            raise ValueError("fit needs at least 2 (image, report) pairs")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(
                f"val_fraction must be in (0, 1), got {self.val_fraction!r}"
            )
        n_val = min(len(samples) - 1, max(1, round(len(samples) * self.val_fraction)))
        train, val = samples[:-n_val], samples[-n_val:]

        out_dir = pathlib.Path(
            self.out_dir if self.out_dir is not None
            else tempfile.mkdtemp(prefix="rrg_fit_")
        )
        config = self._run_config(out_dir)
        vocab = Vocab([s.report for s in train])
        dataset = _ArraysAsDataset(train, val, vocab)
        model = build_model(config, vocab_size=len(vocab))
        manifest = fit(model, dataset, config, out_dir)

        self.model_ = model
        self.vocab_ = vocab
        self.config_ = config
        self.manifest_ = manifest
        self.out_dir_ = str(out_dir)
        return self

    def predict(self, X):
        """Greedy-decoded report strings, one per image."""
        check_is_fitted(self)
        samples = self._samples(X)
        return decode_samples(self.model_, samples, self.vocab_,
                              self.config_.train.max_report_len)

    def score(self, X, y):
        """Corpus BLEU-4 of the predictions against reports y."""
        check_is_fitted(self)
        refs = list(y)
        preds = self.predict(X)
        if len(refs) != len(preds):
            raise ValueError(
                f"X and y disagree on length: {len(preds)} != {len(refs)}"
            )
        return bleu_n([tokenize(p) for p in preds],
                      [tokenize(r) for r in refs], 4)

    def evaluate(self, X, y):
        """Full metric bundle (language overlap plus label P/R/F1) as a dict."""
        check_is_fitted(self)
        return evaluate_reports(self.predict(X), list(y)).to_dict()
