"""Low-rank adapters on linear projection sites.

Three tuning styles are expressible:

* full fine-tuning (no adapters, everything trainable),
* conventional low-rank adaptation of a whole projection matrix,
* partial low-rank adaptation of just the output-row slice that produces one
  named intermediate feature (X, Z, dt, B or C in the state-space blocks).

A site is an ``AdaptableLinear``: a weight (plus optional bias) with named
row slices. Attaching an adapter freezes the base weight and routes the
forward pass through ``W_base @ x`` plus a scatter of ``scale * up @ down``
into the targeted rows, so rows outside the slice are untouched bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, StateError

WHOLE = "__whole__"  # slice key for full-matrix adapters


@dataclass(frozen=True)
class AdapterSpec:
    """One requested adapter: where it goes and its rank/scale.

    ``slice`` is None for whole-matrix adaptation, otherwise a feature name
    the target site must declare (in_proj admits X and Z; x_proj admits
    dt, B and C). ``alpha`` defaults to ``r`` so the update scale is 1.
    """

    target: str
    slice: str | None = None
    r: int = 8
    alpha: float | None = None

    def __post_init__(self):
        if not isinstance(self.r, int) or self.r < 1:
            raise ConfigurationError(f"adapter rank must be a positive integer, got {self.r!r}")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigurationError(f"adapter alpha must be positive, got {self.alpha!r}")

    @property
    def effective_alpha(self) -> float:
        return float(self.r if self.alpha is None else self.alpha)


class LoraAdapter:
    """A rank-r additive update on rows [row_start, row_stop) of a base weight.

    ``up`` starts at zero so a fresh adapter is an exact no-op; ``down`` is
    small uniform. ``merge`` folds the update into the base weight in place,
    ``unmerge`` subtracts it back.
    """

    def __init__(self, site: "AdaptableLinear", spec: AdapterSpec,
                 row_start: int, row_stop: int, rng: np.random.Generator):
        d_in = site.weight.shape[1]
        rows = row_stop - row_start
        if spec.r > min(d_in, rows):
            raise ConfigurationError(
                f"adapter rank {spec.r} exceeds min(d_in={d_in}, slice_rows={rows}) "
                f"on '{site.name}'"
            )
        bound = 1.0 / math.sqrt(d_in)
        self.site = site
        self.spec = spec
        self.row_start = row_start
        self.row_stop = row_stop
        self.scale = spec.effective_alpha / spec.r
        self.down = Tensor(rng.uniform(-bound, bound, size=(spec.r, d_in)), requires_grad=True)
        self.up = Tensor(np.zeros((rows, spec.r)), requires_grad=True)
        self.merged = False

    def delta(self) -> np.ndarray:
        return self.scale * (self.up.data @ self.down.data)

    def merge(self) -> None:
        if self.merged:
            raise StateError(f"adapter on '{self.site.name}' already merged")
        self.site.weight.data[self.row_start : self.row_stop] += self.delta()
        self.merged = True

    def unmerge(self) -> None:
        if not self.merged:
            raise StateError(f"adapter on '{self.site.name}' is not merged")
        self.site.weight.data[self.row_start : self.row_stop] -= self.delta()
        self.merged = False

    def n_params(self) -> int:
        return self.down.size + self.up.size


class AdaptableLinear:
    """y = x W^T (+ b) with optional attached low-rank row adapters."""

    def __init__(self, weight: Tensor, bias: Tensor | None = None,
                 slices: dict[str, tuple[int, int]] | None = None, name: str = ""):
        self.weight = weight
        self.bias = bias
        self.slices = dict(slices or {})
        self.name = name
        self.adapters: list[LoraAdapter] = []
        d_out = weight.shape[0]
        for key, (start, stop) in self.slices.items():
            if not (0 <= start < stop <= d_out):
                raise ConfigurationError(
                    f"slice '{key}' = [{start}, {stop}) out of range for '{name}' "
                    f"with {d_out} output rows"
                )

    def attach(self, spec: AdapterSpec, rng: np.random.Generator) -> LoraAdapter:
        if spec.slice is None:
            start, stop = 0, self.weight.shape[0]
            key = WHOLE
        else:
            if spec.slice not in self.slices:
                raise ConfigurationError(
                    f"site '{self.name}' has no slice '{spec.slice}' "
                    f"(declared: {sorted(self.slices) or 'none'})"
                )
            start, stop = self.slices[spec.slice]
            key = spec.slice
        taken = {a.spec.slice if a.spec.slice is not None else WHOLE for a in self.adapters}
        if key in taken:
            raise ConfigurationError(f"duplicate adapter on '{self.name}' slice '{key}'")
        adapter = LoraAdapter(self, spec, start, stop, rng)
        self.adapters.append(adapter)
        self.weight.requires_grad = False  # base freezes once adapted
        return adapter

    def forward(self, x: Tensor) -> Tensor:
        y = ad.linear(x, self.weight, self.bias)
        for a in self.adapters:
            if a.merged:
                continue
            mid = ad.matmul(x, ad.transpose(a.down))
            delta = ad.mul_scalar(ad.matmul(mid, ad.transpose(a.up)), a.scale)
            y = ad.add_cols(y, delta, a.row_start)
        return y

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        for a in self.adapters:
            tag = a.spec.slice if a.spec.slice is not None else "whole"
            out.append((f"{prefix}.adapter_{tag}.down", a.down))
            out.append((f"{prefix}.adapter_{tag}.up", a.up))
        return out


def count_trainable(named_params: list[tuple[str, Tensor]]) -> dict:
    """Exact parameter accounting from requires_grad flags.

    Returns total, trainable, and a per-top-level-component breakdown (the
    name segment before the first dot).
    """
    total = trainable = 0
    breakdown: dict[str, dict[str, int]] = {}
    for name, p in named_params:
        head = name.split(".", 1)[0]
        slot = breakdown.setdefault(head, {"total": 0, "trainable": 0})
        total += p.size
        slot["total"] += p.size
        if p.requires_grad:
            trainable += p.size
            slot["trainable"] += p.size
    return {"total": total, "trainable": trainable, "by_component": breakdown}
