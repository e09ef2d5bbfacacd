"""Part-level attention with learned weighted aggregation.

Feature maps are striped into p horizontal parts, pairwise part affinity
is softmax-normalized per row, and the attention-mixed parts are folded
back onto the globally pooled feature through a residual BatchNorm
branch with a learnable per-part weight vector. The attention map is
p x p per sample, never HW x HW.
"""

import torch
import torch.nn as nn

from .errors import ConfigurationError, NumericalError


def extract_parts(fmap, num_parts):
    """Mean-pool p contiguous horizontal stripes; the first (H mod p)
    stripes get one extra row. Returns (K, p, C)."""
    if fmap.ndim != 4:
        raise ConfigurationError("expected feature map (K, C, H, W)")
    height = fmap.shape[2]
    if num_parts < 1 or height < num_parts:
        raise ConfigurationError(
            "cannot split height %d into %d parts" % (height, num_parts)
        )
    base, extra = divmod(height, num_parts)
    heights = [base + 1] * extra + [base] * (num_parts - extra)
    stripes = torch.split(fmap, heights, dim=2)
    return torch.stack([s.mean(dim=(2, 3)) for s in stripes], dim=1)


class WeightedPartAttention(nn.Module):
    """Per-sample part attention and residual-BatchNorm aggregation.

    Part weights start at zero, so the module initially reproduces the
    batch-normalized pooled feature exactly and grows the part term
    during training.
    """

    def __init__(self, channels, num_parts):
        super().__init__()
        if channels < 2:
            raise ConfigurationError("channels must be >= 2")
        if num_parts < 1:
            raise ConfigurationError("num_parts must be >= 1")
        self.num_parts = num_parts
        self.embed_u = nn.Linear(channels, channels // 2, bias=False)
        self.embed_v = nn.Linear(channels, channels // 2, bias=False)
        self.embed_z = nn.Linear(channels, channels, bias=False)
        self.part_weights = nn.Parameter(torch.zeros(num_parts))
        self.residual_bn = nn.BatchNorm1d(channels)

    def attention(self, parts):
        """Row-stochastic (K, p, p) attention from exponentiated inner
        products of the u/v embeddings, computed max-subtracted."""
        logits = self.embed_u(parts) @ self.embed_v(parts).transpose(1, 2)
        if not torch.isfinite(logits).all():
            bad = (~torch.isfinite(logits)).nonzero(as_tuple=False)
            raise NumericalError("non-finite attention logits at indices %s" % bad.tolist()[:8])
        shifted = logits - logits.max(dim=-1, keepdim=True).values
        weights = shifted.exp()
        return weights / weights.sum(dim=-1, keepdim=True)

    def attend(self, alpha, parts):
        """Attention-weighted mixture of the z-embedded parts, (K, p, C)."""
        return alpha @ self.embed_z(parts)

    def aggregate(self, pooled, attended):
        """Residual BatchNorm of the pooled feature plus the weighted part sum."""
        part_sum = (self.part_weights[None, :, None] * attended).sum(dim=1)
        return self.residual_bn(pooled) + part_sum

    def forward(self, fmap, pooled):
        parts = extract_parts(fmap, self.num_parts)
        alpha = self.attention(parts)
        attended = self.attend(alpha, parts)
        return self.aggregate(pooled, attended), alpha
