"""Patch-local convolutional encoder producing token features."""

import torch
import torch.nn as nn


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Flatten non-overlapping patches: (B, C, H, W) -> (B, N, C*p*p)."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image dims {h}x{w} not divisible by patch {patch_size}")
    ht, wt = h // patch_size, w // patch_size
    x = images.reshape(b, c, ht, patch_size, wt, patch_size)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, ht * wt, c * patch_size * patch_size)


class PatchEncoder(nn.Module):
    """Image -> N token features, with receptive fields confined to patches.

    kernel == stride on the first conv, followed by 1x1 convs only, so a
    perturbation inside one patch changes exactly one token.
    """

    def __init__(self, patch_size: int = 8, out_dim: int = 64,
                 hidden_dim: int = 64, in_channels: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.out_dim = out_dim
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden_dim, patch_size, stride=patch_size),
            nn.ReLU(),
            nn.Conv2d(hidden_dim, hidden_dim, 1),
            nn.ReLU(),
            nn.Conv2d(hidden_dim, out_dim, 1),
        )

    def grid_dims(self, h: int, w: int) -> tuple[int, int]:
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(
                f"image dims {h}x{w} not divisible by patch {self.patch_size}"
            )
        return h // self.patch_size, w // self.patch_size

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, N, out_dim) with N = (H/p)·(W/p)."""
        self.grid_dims(images.shape[-2], images.shape[-1])
        feats = self.net(images)                    # (B, d, Ht, Wt)
        return feats.flatten(2).transpose(1, 2)     # (B, N, d)
