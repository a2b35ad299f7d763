"""Full autoencoder: encode, slot attention, select, gated decode."""

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .decoders import GateConfig, GatedMLPDecoder, GatedTransformerDecoder
from .encoder import PatchEncoder, patchify
from .slot_attention import SlotAttention, SlotInit

TARGET_MODES = ("frozen-features", "pixels")
DECODER_KINDS = ("transformer", "mlp")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    d_y: int = 64            # token feature width
    d_u: int = 64            # slot width
    k_max: int = 8
    sa_iters: int = 3
    decoder: str = "transformer"
    dec_layers: int = 4
    dec_heads: int = 4
    dec_mlp_hidden: int = 128
    dec_mlp_layers: int = 3
    target_mode: str = "frozen-features"
    gate: GateConfig = field(default_factory=GateConfig)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch "
                f"{self.patch_size}"
            )
        if self.k_max < 2:
            raise ValueError(f"k_max must be >= 2, got {self.k_max}")
        if self.decoder not in DECODER_KINDS:
            raise ValueError(f"unknown decoder kind: {self.decoder!r}")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"unknown target_mode: {self.target_mode!r}")

    @property
    def num_tokens(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def grid_dims(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def target_dim(self) -> int:
        if self.target_mode == "pixels":
            return 3 * self.patch_size * self.patch_size
        return self.d_y


class SlotAutoencoder(nn.Module):
    """Trainable encoder + slot attention + gated decoder.

    In frozen-features mode a frozen copy of the freshly initialized
    encoder provides the reconstruction targets; in pixels mode the
    targets are the flattened image patches.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PatchEncoder(cfg.patch_size, cfg.d_y, hidden_dim=cfg.d_y)
        if cfg.target_mode == "frozen-features":
            self.target_encoder = copy.deepcopy(self.encoder)
            for p in self.target_encoder.parameters():
                p.requires_grad_(False)
        else:
            self.target_encoder = None

        self.pos_emb = nn.Parameter(torch.randn(1, cfg.num_tokens, cfg.d_y) * 0.02)
        self.input_norm = nn.LayerNorm(cfg.d_y)
        self.input_mlp = nn.Sequential(
            nn.Linear(cfg.d_y, cfg.d_y),
            nn.ReLU(),
            nn.Linear(cfg.d_y, cfg.d_y),
        )
        self.slot_init = SlotInit(cfg.d_u)
        self.slot_attention = SlotAttention(cfg.d_y, cfg.d_u, iters=cfg.sa_iters)
        if cfg.decoder == "transformer":
            self.decoder = GatedTransformerDecoder(
                cfg.d_u, cfg.target_dim, cfg.num_tokens,
                layers=cfg.dec_layers, heads=cfg.dec_heads, cfg=cfg.gate,
            )
        else:
            self.decoder = GatedMLPDecoder(
                cfg.d_u, cfg.target_dim, cfg.num_tokens,
                hidden=cfg.dec_mlp_hidden, layers=cfg.dec_mlp_layers,
                cfg=cfg.gate,
            )

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> token features (B, N, d_y)."""
        return self.encoder(images)

    def targets(self, images: torch.Tensor) -> torch.Tensor:
        """Reconstruction targets; never contributes gradients."""
        with torch.no_grad():
            if self.cfg.target_mode == "pixels":
                return patchify(images, self.cfg.patch_size)
            return self.target_encoder(images)

    def group(self, images: torch.Tensor,
              generator: torch.Generator | None = None,
              slots_init: torch.Tensor | None = None):
        """Encode and run slot attention: returns (slots, attn (B, N, K))."""
        tokens = self.encode(images)
        x = self.input_mlp(self.input_norm(tokens + self.pos_emb))
        if slots_init is None:
            slots_init = self.slot_init(images.shape[0], self.cfg.k_max, generator)
        return self.slot_attention(x, slots_init)

    def decode(self, slots: torch.Tensor, mask=None):
        """Returns (y_hat, decoder attention (B, N, K))."""
        if self.cfg.decoder == "transformer":
            return self.decoder(slots, mask)
        y_hat, alpha, _ = self.decoder(slots, mask)
        return y_hat, alpha.transpose(1, 2)

    def forward(self, images: torch.Tensor, mask=None,
                generator: torch.Generator | None = None):
        """Full pass; returns a dict with targets, slots, attn and y_hat."""
        slots, attn = self.group(images, generator=generator)
        y_hat, dec_attn = self.decode(slots, mask)
        return {
            "targets": self.targets(images),
            "slots": slots,
            "attn": attn,
            "y_hat": y_hat,
            "dec_attn": dec_attn,
        }

    @torch.no_grad()
    def attention_maps(self, images: torch.Tensor,
                       generator: torch.Generator | None = None) -> torch.Tensor:
        """Inference-time token-to-slot attention (B, N, K)."""
        _, attn = self.group(images, generator=generator)
        return attn
