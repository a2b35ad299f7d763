"""Decoders that reconstruct token features from slots, with gates that
suppress unselected slots.

Two variants: a Transformer decoder whose cross-attention layers apply a
multiplicative K/V gate plus an additive log-gate on the logits, and a
spatial-broadcast MLP decoder that fills inactive mixture logits with a
large negative constant before the softmax over slots.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class GateConfig:
    """Gate floors and the logit fill constant.

    eps1: K/V gate value for unselected slots, in (0, 1]. 1 disables g1.
    eps2: logit gate value for unselected slots, in (0, 1]. 1 disables g2.
    neg_const: magnitude of the mixture-logit fill; large enough that
        exp(-neg_const) underflows to exactly 0 in float32/float64.
    d_k: optional explicit key width for the 1/sqrt(d_k) scale; inferred
        from the key tensor when None.
    """

    eps1: float = 1e-3
    eps2: float = 1e-6
    neg_const: float = 1e4
    d_k: int | None = None

    def __post_init__(self):
        if not 0.0 < self.eps1 <= 1.0:
            raise ValueError(f"eps1 must be in (0, 1], got {self.eps1}")
        if not 0.0 < self.eps2 <= 1.0:
            raise ValueError(f"eps2 must be in (0, 1], got {self.eps2}")
        if self.neg_const <= 0.0:
            raise ValueError(f"neg_const must be positive, got {self.neg_const}")


def as_mask_tensor(mask, ref: torch.Tensor) -> torch.Tensor:
    """Coerce a binary mask (tensor or array) to ref's dtype and device."""
    if not torch.is_tensor(mask):
        mask = torch.as_tensor(mask)
    return mask.to(dtype=ref.dtype, device=ref.device)


def build_gates(mask, cfg: GateConfig, ref: torch.Tensor | None = None):
    """Per-slot gates from a binary mask: g = M + (1 - M) * eps.

    Selected slots gate at exactly 1; unselected at eps1 (K/V path) and
    eps2 (logit path).
    """
    m = mask if torch.is_tensor(mask) else torch.as_tensor(mask)
    m = m.to(dtype=ref.dtype, device=ref.device) if ref is not None else m.double()
    g1 = m + (1.0 - m) * cfg.eps1
    g2 = m + (1.0 - m) * cfg.eps2
    return g1, g2


def gated_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                    g1: torch.Tensor | None = None,
                    g2: torch.Tensor | None = None,
                    scale: float | None = None):
    """softmax(q (k*g1)^T * scale + log g2) @ (v*g1).

    q: (..., Nq, d_k); k: (..., K, d_k); v: (..., K, d_v); g1/g2
    broadcastable to (..., K). Returns (output, attention over slots).
    """
    if scale is None:
        scale = k.shape[-1] ** -0.5
    if g1 is not None:
        k = k * g1.unsqueeze(-1)
        v = v * g1.unsqueeze(-1)
    logits = torch.matmul(q, k.transpose(-1, -2)) * scale
    if g2 is not None:
        logits = logits + torch.log(g2).unsqueeze(-2)
    if not torch.isfinite(logits).all():
        raise RuntimeError("non-finite attention logits in gated attention")
    attn = torch.softmax(logits, dim=-1)
    return torch.matmul(attn, v), attn


def masked_mixture(logits: torch.Tensor, mask, neg_const: float = 1e4) -> torch.Tensor:
    """Mixture weights over slots with inactive logits filled by -neg_const.

    logits: (..., K, N); mask: broadcastable to (..., K). The softmax
    runs over the slot axis; inactive entries are zeroed exactly after
    the softmax. Rejects masks with no active slot.
    """
    m = as_mask_tensor(mask, logits)
    if m.dim() == logits.dim() - 1:
        m = m.unsqueeze(-1)
    if (m.sum(dim=-2) < 1).any():
        raise ValueError("mixture mask with no active slot")
    shifted = logits - (1.0 - m) * neg_const
    alpha = torch.softmax(shifted, dim=-2)
    return alpha * m


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x):
        b, n, d = x.shape
        y, _ = gated_attention(self._split(self.q(x)), self._split(self.k(x)),
                               self._split(self.v(x)))
        return self.out(y.transpose(1, 2).reshape(b, n, d))


class GatedCrossAttention(nn.Module):
    """Multi-head cross-attention from queries to slots with dual gating."""

    def __init__(self, dim: int, heads: int, cfg: GateConfig):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.cfg = cfg
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, slots: torch.Tensor,
                g1: torch.Tensor | None = None,
                g2: torch.Tensor | None = None):
        """x (B, N, d), slots (B, K, d), gates (B, K) -> (out, attn (B, N, K))."""
        b, n, d = x.shape
        heads = self.heads
        q = self.q(x).reshape(b, n, heads, d // heads).transpose(1, 2)
        k = self.k(slots).reshape(b, -1, heads, d // heads).transpose(1, 2)
        v = self.v(slots).reshape(b, -1, heads, d // heads).transpose(1, 2)
        hg1 = g1.unsqueeze(1) if g1 is not None else None   # (B, 1, K)
        hg2 = g2.unsqueeze(1) if g2 is not None else None
        scale = None if self.cfg.d_k is None else self.cfg.d_k ** -0.5
        y, attn = gated_attention(q, k, v, hg1, hg2, scale=scale)
        y = y.transpose(1, 2).reshape(b, n, d)
        return self.out(y), attn.mean(dim=1)                # head-avg (B, N, K)


class DecoderBlock(nn.Module):
    """Pre-norm block: self-attention, gated cross-attention, feed-forward."""

    def __init__(self, dim: int, heads: int, cfg: GateConfig, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.self_attn = SelfAttention(dim, heads)
        self.cross_attn = GatedCrossAttention(dim, heads, cfg)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim),
            nn.ReLU(),
            nn.Linear(ffn_mult * dim, dim),
        )

    def forward(self, x, slots, g1=None, g2=None):
        x = x + self.self_attn(self.norm1(x))
        y, attn = self.cross_attn(self.norm2(x), slots, g1, g2)
        x = x + y
        x = x + self.ffn(self.norm3(x))
        return x, attn


class GatedTransformerDecoder(nn.Module):
    """Learned positional queries decoded against gated slots.

    Every cross-attention layer shares the same per-image (g1, g2). With
    mask=None (or an all-ones mask) the module reduces exactly to the
    ungated decoder.
    """

    def __init__(self, slot_size: int, out_dim: int, num_tokens: int,
                 layers: int = 4, heads: int = 4,
                 cfg: GateConfig | None = None):
        super().__init__()
        self.cfg = cfg or GateConfig()
        self.query_emb = nn.Parameter(torch.randn(1, num_tokens, slot_size) * 0.02)
        self.blocks = nn.ModuleList(
            DecoderBlock(slot_size, heads, self.cfg) for _ in range(layers)
        )
        self.norm = nn.LayerNorm(slot_size)
        self.head = nn.Linear(slot_size, out_dim)

    def forward(self, slots: torch.Tensor, mask=None):
        """slots (B, K, d), mask (B, K) or (K,) binary or None.

        Returns (y_hat (B, N, out_dim), attn (B, N, K) from the last
        cross-attention layer).
        """
        b = slots.shape[0]
        g1 = g2 = None
        if mask is not None:
            m = as_mask_tensor(mask, slots)
            if m.dim() == 1:
                m = m.unsqueeze(0).expand(b, -1)
            g1, g2 = build_gates(m, self.cfg, ref=slots)
        x = self.query_emb.expand(b, -1, -1)
        attn = None
        for block in self.blocks:
            x, attn = block(x, slots, g1, g2)
        return self.head(self.norm(x)), attn


class GatedMLPDecoder(nn.Module):
    """Spatial-broadcast MLP decoder with hard logit gating.

    Each slot is broadcast over the token grid, offset by a learned
    positional embedding and mapped to a per-token feature plus a
    mixture logit. Mixture weights are a softmax over slots with
    inactive logits filled by -neg_const, then zeroed exactly.
    """

    def __init__(self, slot_size: int, out_dim: int, num_tokens: int,
                 hidden: int = 128, layers: int = 3,
                 cfg: GateConfig | None = None):
        super().__init__()
        self.cfg = cfg or GateConfig()
        self.out_dim = out_dim
        self.pos_emb = nn.Parameter(torch.randn(1, 1, num_tokens, slot_size) * 0.02)
        dims = [slot_size] + [hidden] * (layers - 1)
        net = []
        for a, c in zip(dims[:-1], dims[1:]):
            net += [nn.Linear(a, c), nn.ReLU()]
        net.append(nn.Linear(dims[-1], out_dim + 1))
        self.net = nn.Sequential(*net)

    def forward(self, slots: torch.Tensor, mask=None):
        """slots (B, K, d), mask (B, K) / (K,) / None.

        Returns (y_hat (B, N, out_dim), alpha (B, K, N), logits (B, K, N)).
        """
        b, k, _ = slots.shape
        x = slots.unsqueeze(2) + self.pos_emb          # (B, K, N, d)
        x = self.net(x)                                # (B, K, N, out+1)
        per_slot = x[..., : self.out_dim]
        logits = x[..., self.out_dim]                  # (B, K, N)
        if mask is None:
            alpha = torch.softmax(logits, dim=1)
        else:
            m = as_mask_tensor(mask, slots)
            if m.dim() == 1:
                m = m.unsqueeze(0).expand(b, -1)
            alpha = masked_mixture(logits, m, self.cfg.neg_const)
        y_hat = torch.einsum("bkn,bknd->bnd", alpha, per_slot)
        return y_hat, alpha, logits
