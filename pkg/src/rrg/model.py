"""The composed image-to-report model: encoder, width bridge, decoder LM.

Visual routing has three modes. ``cross_attn`` feeds bridged visual tokens
to the hybrid layers' cross-attention (the primary path). ``prefix``
prepends them to the text sequence instead. ``none`` ignores the image,
giving a text-only baseline.

Construction is deterministic given (configs, seed): parameters are drawn
from one seeded generator in a fixed order, tuning flags are applied, then
adapters attach in config order (each freezes its base matrix).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .adapters import AdaptableLinear, AdapterSpec, LoraAdapter, count_trainable
from .autodiff import Tensor
from .config import RunConfig
from .encoder import ENCODER_TARGETS, EncoderConfig, VisionEncoder
from .errors import ConfigurationError
from .lm import LM_TARGETS, DecoderLM, LmConfig

# Name fragments of parameters that stay trainable when the LM base is frozen:
# the cross-attention branch, its gates, and the warm-up scalars are new
# capacity added next to the pretrained stack, not part of it.
_LM_NEW_PARAM_MARKS = (".cross_", ".gate_w", ".gate_b", ".g_s")


class ReportModel:
    def __init__(self, encoder_cfg: EncoderConfig, lm_cfg: LmConfig, seed: int = 0,
                 visual_mode: str = "cross_attn"):
        if visual_mode not in ("cross_attn", "prefix", "none"):
            raise ConfigurationError(f"unknown visual_mode '{visual_mode}'")
        rng = np.random.default_rng(seed)
        self.encoder_cfg = encoder_cfg
        self.lm_cfg = lm_cfg
        self.visual_mode = visual_mode
        self.seed = seed
        self.encoder = VisionEncoder(encoder_cfg, rng)
        self.bridge = AdaptableLinear(
            Tensor(rng.uniform(-1.0 / np.sqrt(encoder_cfg.d_model),
                               1.0 / np.sqrt(encoder_cfg.d_model),
                               size=(lm_cfg.d, encoder_cfg.d_model)), requires_grad=True),
            Tensor(np.zeros(lm_cfg.d), requires_grad=True),
            name="bridge",
        )
        self.lm = DecoderLM(lm_cfg, rng)
        self._adapter_rng = rng
        self.adapters: list[LoraAdapter] = []
        self.adapter_specs: list[AdapterSpec] = []

    # -- tuning ------------------------------------------------------------

    def configure_tuning(self, encoder: str = "frozen", lm: str = "full",
                         gate_scalars: bool = True) -> None:
        """Set requires_grad over base parameters.

        ``encoder``/``lm`` are "full" or "frozen". A frozen LM keeps the
        cross-attention additions trainable. The bridge always trains.
        Adapter parameters are never touched here. ``gate_scalars=False``
        pins every warm-up scalar, which makes hybrid layers permanently
        image-blind when they start at zero.
        """
        for mode, which in ((encoder, "encoder"), (lm, "lm")):
            if mode not in ("full", "frozen"):
                raise ConfigurationError(f"tuning.{which}: expected 'full' or 'frozen', got {mode!r}")
        for name, p in self.encoder.named_parameters("encoder"):
            if ".adapter_" not in name:
                p.requires_grad = encoder == "full"
        for name, p in self.lm.named_parameters("lm"):
            if ".adapter_" in name:
                continue
            if any(mark in name for mark in _LM_NEW_PARAM_MARKS):
                p.requires_grad = True
            else:
                p.requires_grad = lm == "full"
        if not gate_scalars:
            for layer in self.lm.layers:
                if layer.hybrid:
                    layer.g_s.requires_grad = False

    def attach_adapter(self, spec: AdapterSpec) -> list[LoraAdapter]:
        """Attach one spec to every site its target addresses (all blocks and
        scan directions for encoder targets, all layers for LM targets)."""
        if spec.target in ENCODER_TARGETS:
            sites = self.encoder.adapter_sites(spec.target)
        elif spec.target in LM_TARGETS:
            if spec.slice is not None:
                raise ConfigurationError(
                    f"adapter slices are not defined for LM target '{spec.target}'"
                )
            sites = self.lm.adapter_sites(spec.target)
        else:
            valid = ", ".join(ENCODER_TARGETS + LM_TARGETS)
            raise ConfigurationError(f"unknown adapter target '{spec.target}' (valid: {valid})")
        created = [site.attach(spec, self._adapter_rng) for site in sites]
        self.adapters.extend(created)
        self.adapter_specs.append(spec)
        return created

    def merge_adapters(self) -> None:
        for a in self.adapters:
            a.merge()

    def unmerge_adapters(self) -> None:
        for a in self.adapters:
            a.unmerge()

    # -- forward -----------------------------------------------------------

    def visual_tokens(self, image: np.ndarray) -> Tensor | None:
        if self.visual_mode == "none":
            return None
        return self.bridge.forward(self.encoder.forward(image))

    def logits(self, ids: np.ndarray, image: np.ndarray | None = None,
               visual: Tensor | None = None) -> Tensor:
        """Token logits for one sample. Pass ``visual`` to reuse a computed
        bridge output (decode loops); otherwise the image is encoded here."""
        if visual is None and image is not None:
            visual = self.visual_tokens(image)
        if self.visual_mode == "prefix":
            return self.lm.forward(ids, prefix=visual)
        if self.visual_mode == "cross_attn":
            return self.lm.forward(ids, visual=visual)
        return self.lm.forward(ids)

    def generate_ids(self, prompt_ids: list[int], image: np.ndarray | None,
                     bos_id: int, eos_id: int, max_len: int) -> list[int]:
        """Greedy-decode report token ids (eos stripped). The image is
        encoded once and reused across decode steps."""
        visual = None if image is None else self.visual_tokens(image)
        context = np.asarray([bos_id] + list(prompt_ids), dtype=np.int64)
        kwargs = {"visual": visual} if self.visual_mode == "cross_attn" else (
            {"prefix": visual} if self.visual_mode == "prefix" else {})
        out = self.lm.greedy_decode(context, eos_id=eos_id, max_len=max_len, **kwargs)
        if out and out[-1] == eos_id:
            out = out[:-1]
        return out

    # -- bookkeeping ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.encoder.named_parameters("encoder")
        out += self.bridge.named_parameters("bridge")
        out += self.lm.named_parameters("lm")
        return out

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def count_trainable(self) -> dict:
        return count_trainable(self.named_parameters())

    def warmup_scalars(self) -> list[float]:
        return [float(l.g_s.data[0]) for l in self.lm.layers if l.hybrid]

    def config_snapshot(self) -> dict:
        return {
            "encoder": self.encoder_cfg.to_dict(),
            "lm": self.lm_cfg.to_dict(),
            "visual_mode": self.visual_mode,
            "seed": self.seed,
            "adapters": [
                {"target": s.target, "slice": s.slice, "r": s.r, "alpha": s.alpha}
                for s in self.adapter_specs
            ],
        }


def build_model(cfg: RunConfig, vocab_size: int) -> ReportModel:
    """Construct, apply tuning, then attach adapters — in that order, so
    adapter bases end frozen regardless of the tuning mode."""
    lm_cfg = LmConfig(vocab_size=vocab_size, **cfg.lm.to_dict())
    model = ReportModel(cfg.encoder, lm_cfg, seed=cfg.train.seed, visual_mode=cfg.visual_mode)
    model.configure_tuning(cfg.tuning.encoder, cfg.tuning.lm, cfg.tuning.gate_scalars)
    for spec in cfg.adapters:
        model.attach_adapter(spec)
    return model
