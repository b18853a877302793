"""Decoder-only language model with optional gated cross-attention layers.

Layers at the configured hybrid indices extend the standard pre-norm decoder
layer with a parallel multi-head cross-attention branch over visual tokens.
The branch is fused into the residual stream as

    x + self_attn(x_n) + (X' * g_d) * g_s

where g_d = tanh(gate(x_n)) is a per-token gate and g_s is a learnable
scalar initialized to zero, so a freshly built model ignores the image
entirely and behaves as a pure text decoder until training opens the gate.
The layer norm feeding self-attention also normalizes the visual tokens
(one shared set of parameters), and the cross-attention queries reuse the
self-attention query projection unless configured otherwise.

Visual tokens can instead be handed in as a sequence prefix (``prefix=``),
in which case they join the self-attention stream and no cross-attention
runs; this exists for comparison runs, not as the primary path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapters import AdaptableLinear
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, VocabularyError

LM_TARGETS = ("lm_q", "lm_k", "lm_v", "lm_o")

_MASK_CACHE: dict[int, np.ndarray] = {}
_NEG = -1e30  # additive mask value; exp underflows to exactly 0 after softmax shift


def causal_mask(n: int) -> np.ndarray:
    mask = _MASK_CACHE.get(n)
    if mask is None:
        mask = np.triu(np.full((n, n), _NEG), k=1)
        _MASK_CACHE[n] = mask
    return mask


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    hybrid_indices: tuple[int, ...] = (0, 2)
    max_seq_len: int = 192
    gate_per_channel: bool = False
    separate_cross_query: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigurationError(f"lm.{name}: expected positive integer, got {v!r}")
        if self.d % self.n_heads != 0:
            raise ConfigurationError(f"lm.d {self.d} not divisible by n_heads {self.n_heads}")
        idx = tuple(self.hybrid_indices)
        if list(idx) != sorted(set(idx)):
            raise ConfigurationError(f"lm.hybrid_indices must be sorted and unique, got {idx}")
        for i in idx:
            if not isinstance(i, int) or not (0 <= i < self.n_layers):
                raise ConfigurationError(
                    f"lm.hybrid_indices: index {i!r} outside [0, {self.n_layers})"
                )
        object.__setattr__(self, "hybrid_indices", idx)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d": self.d, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "d_ff": self.d_ff,
            "hybrid_indices": list(self.hybrid_indices), "max_seq_len": self.max_seq_len,
            "gate_per_channel": self.gate_per_channel,
            "separate_cross_query": self.separate_cross_query,
        }


def _uniform_init(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / math.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                         mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with column-sliced heads; mask is additive."""
    d = q.shape[1]
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(n_heads):
        qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
        kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
        scores = ad.mul_scalar(ad.matmul(qh, ad.transpose(kh)), scale)
        if mask is not None:
            scores = ad.add(scores, ad.constant(mask))
        outs.append(ad.matmul(ad.softmax(scores), vh))
    return ad.concat_cols(outs)


class DecoderLayer:
    """Pre-norm self-attention + feed-forward; hybrid layers add the gated cross branch."""

    def __init__(self, cfg: LmConfig, rng: np.random.Generator, hybrid: bool, name: str):
        d, d_ff = cfg.d, cfg.d_ff
        self.cfg = cfg
        self.hybrid = hybrid
        self.name = name
        self.norm1_gain = Tensor(np.ones(d), requires_grad=True)
        self.norm1_bias = Tensor(np.zeros(d), requires_grad=True)
        self.w_q = AdaptableLinear(Tensor(_uniform_init(rng, (d, d)), requires_grad=True), name=f"{name}.w_q")
        self.w_k = AdaptableLinear(Tensor(_uniform_init(rng, (d, d)), requires_grad=True), name=f"{name}.w_k")
        self.w_v = AdaptableLinear(Tensor(_uniform_init(rng, (d, d)), requires_grad=True), name=f"{name}.w_v")
        self.w_o = AdaptableLinear(Tensor(_uniform_init(rng, (d, d)), requires_grad=True), name=f"{name}.w_o")
        self.norm2_gain = Tensor(np.ones(d), requires_grad=True)
        self.norm2_bias = Tensor(np.zeros(d), requires_grad=True)
        self.ffn1 = AdaptableLinear(Tensor(_uniform_init(rng, (d_ff, d)), requires_grad=True), name=f"{name}.ffn1")
        self.ffn2 = AdaptableLinear(Tensor(_uniform_init(rng, (d, d_ff)), requires_grad=True), name=f"{name}.ffn2")
        if hybrid:
            self.cross_k = AdaptableLinear(Tensor(_uniform_init(rng, (d, d)), requires_grad=True), name=f"{name}.cross_k")
            self.cross_v = AdaptableLinear(Tensor(_uniform_init(rng, (d, d)), requires_grad=True), name=f"{name}.cross_v")
            self.cross_o = AdaptableLinear(Tensor(_uniform_init(rng, (d, d)), requires_grad=True), name=f"{name}.cross_o")
            self.cross_q = (
                AdaptableLinear(Tensor(_uniform_init(rng, (d, d)), requires_grad=True), name=f"{name}.cross_q")
                if cfg.separate_cross_query else None
            )
            gate_out = d if cfg.gate_per_channel else 1
            self.gate_w = Tensor(_uniform_init(rng, (gate_out, d)), requires_grad=True)
            self.gate_b = Tensor(np.zeros(gate_out), requires_grad=True)
            self.g_s = Tensor(np.zeros(1), requires_grad=True)

    def forward(self, x: Tensor, mask: np.ndarray, visual: Tensor | None = None) -> Tensor:
        x_n = ad.layer_norm(x, self.norm1_gain, self.norm1_bias)
        q = self.w_q.forward(x_n)
        attn = multi_head_attention(
            q, self.w_k.forward(x_n), self.w_v.forward(x_n), self.cfg.n_heads, mask
        )
        self_out = self.w_o.forward(attn)
        h = ad.add(x, self_out)
        if self.hybrid and visual is not None:
            if visual.shape[0] < 1:
                raise ContractError("hybrid layer needs at least one visual token")
            # shared normalization: same parameters for text and visual sides
            v_s = ad.layer_norm(visual, self.norm1_gain, self.norm1_bias)
            q_c = self.cross_q.forward(x_n) if self.cross_q is not None else q
            cross = multi_head_attention(
                q_c, self.cross_k.forward(v_s), self.cross_v.forward(v_s),
                self.cfg.n_heads, mask=None,
            )
            x_prime = self.cross_o.forward(cross)
            g_d = ad.tanh(ad.linear(x_n, self.gate_w, self.gate_b))
            gated = ad.mul(x_prime, g_d) if self.cfg.gate_per_channel else ad.scale_rows(x_prime, g_d)
            h = ad.add(h, ad.mul(gated, self.g_s))
        h_n = ad.layer_norm(h, self.norm2_gain, self.norm2_bias)
        ff = self.ffn2.forward(ad.silu(self.ffn1.forward(h_n)))
        return ad.add(h, ff)

    def attention_sites(self) -> dict[str, AdaptableLinear]:
        return {"lm_q": self.w_q, "lm_k": self.w_k, "lm_v": self.w_v, "lm_o": self.w_o}

    def new_param_count(self) -> int:
        """Parameters this layer adds over a standard layer (the cross branch)."""
        if not self.hybrid:
            return 0
        n = self.cross_k.weight.size + self.cross_v.weight.size + self.cross_o.weight.size
        if self.cross_q is not None:
            n += self.cross_q.weight.size
        return n + self.gate_w.size + self.gate_b.size + self.g_s.size

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.norm1_gain", self.norm1_gain), (f"{prefix}.norm1_bias", self.norm1_bias)]
        for tag, site in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)):
            out += site.named_parameters(f"{prefix}.{tag}")
        out += [(f"{prefix}.norm2_gain", self.norm2_gain), (f"{prefix}.norm2_bias", self.norm2_bias)]
        out += self.ffn1.named_parameters(f"{prefix}.ffn1")
        out += self.ffn2.named_parameters(f"{prefix}.ffn2")
        if self.hybrid:
            out += self.cross_k.named_parameters(f"{prefix}.cross_k")
            out += self.cross_v.named_parameters(f"{prefix}.cross_v")
            out += self.cross_o.named_parameters(f"{prefix}.cross_o")
            if self.cross_q is not None:
                out += self.cross_q.named_parameters(f"{prefix}.cross_q")
            out += [(f"{prefix}.gate_w", self.gate_w), (f"{prefix}.gate_b", self.gate_b),
                    (f"{prefix}.g_s", self.g_s)]
        return out


class DecoderLM:
    """Token embedding, layer stack, final norm, vocabulary head."""

    def __init__(self, cfg: LmConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.tok_emb = Tensor(rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, size=(cfg.max_seq_len, cfg.d)), requires_grad=True)
        self.layers = [
            DecoderLayer(cfg, rng, hybrid=(i in cfg.hybrid_indices), name=f"layer{i}")
            for i in range(cfg.n_layers)
        ]
        self.final_gain = Tensor(np.ones(cfg.d), requires_grad=True)
        self.final_bias = Tensor(np.zeros(cfg.d), requires_grad=True)
        self.head = AdaptableLinear(
            Tensor(_uniform_init(rng, (cfg.vocab_size, cfg.d)), requires_grad=True),
            Tensor(np.zeros(cfg.vocab_size), requires_grad=True),
            name="head",
        )

    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ContractError(f"token ids must be a non-empty 1-D array, got shape {ids.shape}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            bad = ids[(ids < 0) | (ids >= self.cfg.vocab_size)][0]
            raise VocabularyError(f"token id {bad} outside vocabulary of {self.cfg.vocab_size}")
        return ids

    def forward(self, ids: np.ndarray, visual: Tensor | None = None,
                prefix: Tensor | None = None) -> Tensor:
        """Logits [len(ids) x vocab]. ``visual`` feeds hybrid layers' cross-attention;
        ``prefix`` rows are prepended to the self-attention stream instead."""
        ids = self._check_ids(ids)
        t = ids.size
        m = 0 if prefix is None else prefix.shape[0]
        if t + m > self.cfg.max_seq_len:
            raise ContractError(
                f"sequence length {t + m} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        h = ad.add(ad.embedding(self.tok_emb, ids), ad.slice_rows(self.pos_emb, 0, t))
        if prefix is not None:
            h = ad.concat_rows([prefix, h])
        mask = causal_mask(t + m)
        for layer in self.layers:
            h = layer.forward(h, mask, visual)
        if prefix is not None:
            h = ad.slice_rows(h, m, m + t)
        h = ad.layer_norm(h, self.final_gain, self.final_bias)
        return self.head.forward(h)

    def greedy_decode(self, context_ids: np.ndarray, eos_id: int, max_len: int,
                      visual: Tensor | None = None, prefix: Tensor | None = None) -> list[int]:
        """Append argmax tokens (ties -> lowest id) until eos or max_len produced."""
        if max_len < 1:
            raise ContractError(f"max_len must be >= 1, got {max_len}")
        ids = list(self._check_ids(context_ids))
        out: list[int] = []
        while len(out) < max_len:
            logits = self.forward(np.asarray(ids), visual, prefix)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            if nxt == eos_id:
                break
            ids.append(nxt)
        return out

    def adapter_sites(self, target: str) -> list[AdaptableLinear]:
        if target not in LM_TARGETS:
            raise ConfigurationError(
                f"unknown LM adapter target '{target}' (valid: {', '.join(LM_TARGETS)})"
            )
        return [layer.attention_sites()[target] for layer in self.layers]

    def new_param_count(self) -> int:
        return sum(layer.new_param_count() for layer in self.layers)

    def named_parameters(self, prefix: str = "lm") -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.tok_emb", self.tok_emb), (f"{prefix}.pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"{prefix}.layer{i}")
        out += [(f"{prefix}.final_gain", self.final_gain), (f"{prefix}.final_bias", self.final_bias)]
        out += self.head.named_parameters(f"{prefix}.head")
        return out
