"""Iterative slot attention with softmax competition over slots."""

import torch
import torch.nn as nn


class SlotInit(nn.Module):
    """Shared diagonal-Gaussian slot initialization (learned mean/log-sigma)."""

    def __init__(self, slot_size: int):
        super().__init__()
        self.mu = nn.Parameter(torch.zeros(1, 1, slot_size))
        self.log_sigma = nn.Parameter(torch.zeros(1, 1, slot_size))
        nn.init.xavier_uniform_(self.mu)
        nn.init.xavier_uniform_(self.log_sigma)

    def forward(self, batch_size: int, num_slots: int,
                generator: torch.Generator | None = None) -> torch.Tensor:
        noise = torch.randn(
            batch_size, num_slots, self.mu.shape[-1],
            generator=generator, dtype=self.mu.dtype, device=self.mu.device,
        )
        return self.mu + torch.exp(self.log_sigma) * noise


def init_slots(k_max: int, slot_size: int,
               generator: torch.Generator | None = None,
               module: SlotInit | None = None,
               batch_size: int = 1) -> torch.Tensor:
    """Draw (batch_size, k_max, slot_size) slots from a shared Gaussian."""
    module = module if module is not None else SlotInit(slot_size)
    return module(batch_size, k_max, generator=generator)


class SlotAttention(nn.Module):
    """Slots compete for tokens through a softmax normalized over slots.

    Returns the refined slots and the final iteration's token-to-slot
    attention map (rows sum to 1). Dot products are scaled by
    1/sqrt(slot_size); updates go through a GRU plus a residual MLP.
    """

    def __init__(self, input_size: int, slot_size: int,
                 mlp_hidden: int | None = None, iters: int = 3,
                 weight_eps: float = 1e-8):
        super().__init__()
        if iters < 1:
            raise ValueError(f"iters must be >= 1, got {iters}")
        self.iters = iters
        self.slot_size = slot_size
        self.weight_eps = weight_eps
        mlp_hidden = mlp_hidden or 2 * slot_size

        self.norm_inputs = nn.LayerNorm(input_size)
        self.norm_slots = nn.LayerNorm(slot_size)
        self.norm_mlp = nn.LayerNorm(slot_size)
        self.project_q = nn.Linear(slot_size, slot_size, bias=False)
        self.project_k = nn.Linear(input_size, slot_size, bias=False)
        self.project_v = nn.Linear(input_size, slot_size, bias=False)
        self.gru = nn.GRUCell(slot_size, slot_size)
        self.mlp = nn.Sequential(
            nn.Linear(slot_size, mlp_hidden),
            nn.ReLU(),
            nn.Linear(mlp_hidden, slot_size),
        )

    def forward(self, inputs: torch.Tensor, slots_init: torch.Tensor,
                iters: int | None = None):
        """inputs (B, N, d_in), slots_init (B, K, d) -> (slots, attn (B, N, K))."""
        iters = self.iters if iters is None else iters
        if iters < 1:
            raise ValueError(f"iters must be >= 1, got {iters}")
        b, n, _ = inputs.shape
        _, k_slots, d = slots_init.shape

        x = self.norm_inputs(inputs)
        keys = self.project_k(x)        # (B, N, d)
        values = self.project_v(x)      # (B, N, d)
        scale = d ** -0.5

        slots = slots_init
        attn = None
        for _ in range(iters):
            slots_prev = slots
            q = self.project_q(self.norm_slots(slots))          # (B, K, d)
            logits = torch.einsum("bnd,bkd->bnk", keys, q) * scale
            attn = torch.softmax(logits, dim=-1)                # over slots
            # weighted mean over tokens for each slot
            weights = attn + self.weight_eps
            weights = weights / weights.sum(dim=1, keepdim=True)
            updates = torch.einsum("bnk,bnd->bkd", weights, values)
            slots = self.gru(
                updates.reshape(-1, d), slots_prev.reshape(-1, d)
            ).reshape(b, k_slots, d)
            slots = slots + self.mlp(self.norm_mlp(slots))

        if not torch.isfinite(slots).all() or not torch.isfinite(attn).all():
            raise RuntimeError(
                "slot attention produced non-finite activations "
                f"(inputs range [{inputs.min():.3g}, {inputs.max():.3g}])"
            )
        return slots, attn
