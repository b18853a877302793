"""Vision encoder: patch embedding plus bidirectional selective-state-space blocks.

An image is cut into non-overlapping patches (row-major over the patch
grid), each patch is affinely projected to ``d_model`` and a learned
position embedding is added. A stack of pre-norm blocks follows; every
block runs the same selective-scan recurrence over the token sequence in
both directions with independent parameters and fuses the two branch
outputs inside one residual. A final layer norm closes the stack.

All projection matrices are ``AdaptableLinear`` sites so low-rank adapters
can target them; the in-projection declares X/Z row slices and the
x-projection declares dt/B/C row slices.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import AdaptableLinear
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError

ENCODER_TARGETS = ("embedding", "in_proj", "x_proj", "dt_proj", "out_proj")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 16
    channels: int = 1
    d_model: int = 32
    n_blocks: int = 2
    d_state: int = 16
    dt_rank: int = 0  # 0 means ceil(d_model / 16)
    d_conv: int = 4
    expand: int = 2

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "d_model", "d_state", "d_conv", "expand"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigurationError(f"encoder.{name}: expected positive integer, got {v!r}")
        if not isinstance(self.n_blocks, int) or self.n_blocks < 0:
            raise ConfigurationError(f"encoder.n_blocks: expected non-negative integer, got {self.n_blocks!r}")
        if not isinstance(self.dt_rank, int) or self.dt_rank < 0:
            raise ConfigurationError(f"encoder.dt_rank: expected non-negative integer, got {self.dt_rank!r}")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"encoder.image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def dt_rank_effective(self) -> int:
        return self.dt_rank if self.dt_rank else math.ceil(self.d_model / 16)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "channels": self.channels, "d_model": self.d_model,
            "n_blocks": self.n_blocks, "d_state": self.d_state,
            "dt_rank": self.dt_rank, "d_conv": self.d_conv, "expand": self.expand,
        }


@dataclass
class VisualFeatures:
    tokens: Tensor  # [n_tokens, d_model]
    provenance: str  # encoder config hash


def _uniform_init(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / math.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape)


class PatchEmbed:
    """Flattened-patch affine projection plus learned position embedding."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size
        self.proj = AdaptableLinear(
            Tensor(_uniform_init(rng, (cfg.d_model, patch_dim)), requires_grad=True),
            Tensor(np.zeros(cfg.d_model), requires_grad=True),
            name="patch_proj",
        )
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(cfg.n_tokens, cfg.d_model)), requires_grad=True)

    def patchify(self, image: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (cfg.channels, cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"image shape {image.shape} does not match configured "
                f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})"
            )
        g, p = cfg.image_size // cfg.patch_size, cfg.patch_size
        # [C, g, p, g, p] -> [g, g, C, p, p] -> [N, C*p*p], row-major patch grid
        return image.reshape(cfg.channels, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(
            cfg.n_tokens, cfg.channels * p * p
        )

    def forward(self, image: np.ndarray) -> Tensor:
        return ad.add(self.proj.forward(ad.constant(self.patchify(image))), self.pos)

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return self.proj.named_parameters(f"{prefix}.proj") + [(f"{prefix}.pos", self.pos)]


class MambaDirection:
    """One scan direction of a block: project, convolve, scan, gate, project out."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, name: str):
        d, di, s, r, k = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.dt_rank_effective, cfg.d_conv
        self.cfg = cfg
        self.in_proj = AdaptableLinear(
            Tensor(_uniform_init(rng, (2 * di, d)), requires_grad=True),
            slices={"X": (0, di), "Z": (di, 2 * di)},
            name=f"{name}.in_proj",
        )
        self.conv_w = Tensor(
            rng.uniform(-1.0 / math.sqrt(k), 1.0 / math.sqrt(k), size=(di, k)), requires_grad=True
        )
        self.x_proj = AdaptableLinear(
            Tensor(_uniform_init(rng, (r + 2 * s, di)), requires_grad=True),
            slices={"dt": (0, r), "B": (r, r + s), "C": (r + s, r + 2 * s)},
            name=f"{name}.x_proj",
        )
        # dt path biased so softplus(bias) starts log-uniform in [0.001, 0.1]
        dt_init = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=di))
        self.dt_proj = AdaptableLinear(
            Tensor(rng.uniform(-1.0 / math.sqrt(r), 1.0 / math.sqrt(r), size=(di, r)), requires_grad=True),
            Tensor(np.log(np.expm1(dt_init)), requires_grad=True),
            name=f"{name}.dt_proj",
        )
        self.a_log = Tensor(
            np.tile(np.log(np.arange(1, s + 1, dtype=np.float64)), (di, 1)), requires_grad=True
        )
        self.d_skip = Tensor(np.ones(di), requires_grad=True)
        self.out_proj = AdaptableLinear(
            Tensor(_uniform_init(rng, (d, di)), requires_grad=True),
            name=f"{name}.out_proj",
        )

    def forward(self, u_norm: Tensor) -> Tensor:
        di, s, r = self.cfg.d_inner, self.cfg.d_state, self.cfg.dt_rank_effective
        xz = self.in_proj.forward(u_norm)
        x = ad.slice_cols(xz, 0, di)
        z = ad.slice_cols(xz, di, 2 * di)
        x = ad.silu(ad.causal_conv1d(x, self.conv_w))
        dbc = self.x_proj.forward(x)
        dt_raw = ad.slice_cols(dbc, 0, r)
        b = ad.slice_cols(dbc, r, r + s)
        c = ad.slice_cols(dbc, r + s, r + 2 * s)
        delta = ad.softplus(self.dt_proj.forward(dt_raw))
        a = ad.neg(ad.exp(self.a_log))
        scanned = ad.selective_scan(x, delta, a, b, c, self.d_skip)
        return self.out_proj.forward(ad.mul(scanned, ad.silu(z)))

    def sites(self) -> dict[str, AdaptableLinear]:
        return {"in_proj": self.in_proj, "x_proj": self.x_proj,
                "dt_proj": self.dt_proj, "out_proj": self.out_proj}

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = self.in_proj.named_parameters(f"{prefix}.in_proj")
        out.append((f"{prefix}.conv_w", self.conv_w))
        out += self.x_proj.named_parameters(f"{prefix}.x_proj")
        out += self.dt_proj.named_parameters(f"{prefix}.dt_proj")
        out += [(f"{prefix}.a_log", self.a_log), (f"{prefix}.d_skip", self.d_skip)]
        out += self.out_proj.named_parameters(f"{prefix}.out_proj")
        return out


class MambaBlock:
    """Pre-norm bidirectional block: u + (fwd(u_n) + rev(bwd(rev(u_n))))."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, name: str):
        self.norm_gain = Tensor(np.ones(cfg.d_model), requires_grad=True)
        self.norm_bias = Tensor(np.zeros(cfg.d_model), requires_grad=True)
        self.fwd = MambaDirection(cfg, rng, f"{name}.fwd")
        self.bwd = MambaDirection(cfg, rng, f"{name}.bwd")

    def forward(self, u: Tensor) -> Tensor:
        u_n = ad.layer_norm(u, self.norm_gain, self.norm_bias)
        y_f = self.fwd.forward(u_n)
        y_b = ad.reverse_rows(self.bwd.forward(ad.reverse_rows(u_n)))
        # branches fused before the residual so direction-swap symmetry is exact
        return ad.add(u, ad.add(y_f, y_b))

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.norm_gain", self.norm_gain), (f"{prefix}.norm_bias", self.norm_bias)]
        out += self.fwd.named_parameters(f"{prefix}.fwd")
        out += self.bwd.named_parameters(f"{prefix}.bwd")
        return out


class VisionEncoder:
    """Patch embedding, block stack, final layer norm."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch = PatchEmbed(cfg, rng)
        self.blocks = [MambaBlock(cfg, rng, f"block{i}") for i in range(cfg.n_blocks)]
        self.final_gain = Tensor(np.ones(cfg.d_model), requires_grad=True)
        self.final_bias = Tensor(np.zeros(cfg.d_model), requires_grad=True)
        payload = json.dumps(cfg.to_dict(), sort_keys=True).encode()
        self.provenance = hashlib.sha256(payload).hexdigest()[:16]

    def forward(self, image: np.ndarray) -> Tensor:
        h = self.patch.forward(image)
        for block in self.blocks:
            h = block.forward(h)
        return ad.layer_norm(h, self.final_gain, self.final_bias)

    def encode(self, image: np.ndarray) -> VisualFeatures:
        return VisualFeatures(tokens=self.forward(image), provenance=self.provenance)

    def adapter_sites(self, target: str) -> list[AdaptableLinear]:
        """All sites a given target name addresses, in deterministic order."""
        if target == "embedding":
            return [self.patch.proj]
        if target not in ENCODER_TARGETS:
            raise ConfigurationError(
                f"unknown encoder adapter target '{target}' (valid: {', '.join(ENCODER_TARGETS)})"
            )
        out = []
        for block in self.blocks:
            for direction in (block.fwd, block.bwd):
                out.append(direction.sites()[target])
        return out

    def named_parameters(self, prefix: str = "encoder") -> list[tuple[str, Tensor]]:
        out = self.patch.named_parameters(f"{prefix}.patch")
        for i, block in enumerate(self.blocks):
            out += block.named_parameters(f"{prefix}.block{i}")
        out += [(f"{prefix}.final_gain", self.final_gain), (f"{prefix}.final_bias", self.final_bias)]
        return out
