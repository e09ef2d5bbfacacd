"""Batch-level graph attention across the two modalities.

Nodes are the pooled features of one training batch; edges connect
same-identity samples (self-loops included), so attention mixes each
sample with its cross-modality siblings. A multi-head layer feeds a
one-head output layer whose node logits drive an auxiliary
classification loss. Training-time only: inference never touches this
branch.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError

LEAKY_SLOPE = 0.2


def build_graph(labels) -> torch.Tensor:
    """Binary (K, K) adjacency: 1 iff labels match; diagonal all ones."""
    if not torch.is_tensor(labels):
        labels = torch.as_tensor(labels)
    if labels.ndim != 1 or labels.numel() < 1:
        raise ContractError("labels must be a non-empty 1-D sequence")
    col = labels.view(-1, 1)
    return (col == col.t()).to(torch.float32)


def attention_coeffs(projected, adjacency, pair_weight, negative_slope=LEAKY_SLOPE):
    """Masked row-softmax attention for one head.

    logit(i, j) = LeakyReLU([projected_i || projected_j] . pair_weight),
    normalized max-subtracted over {j : adjacency[i, j] > 0} and zero
    elsewhere.
    """
    dim = projected.shape[1]
    if pair_weight.numel() != 2 * dim:
        raise ContractError("pair weight must have length %d" % (2 * dim))
    mask = adjacency > 0
    assert bool(mask.diagonal().all()), "every node must at least neighbor itself"
    source = projected @ pair_weight[:dim]
    target = projected @ pair_weight[dim:]
    logits = F.leaky_relu(source[:, None] + target[None, :], negative_slope)
    neg_inf = torch.finfo(logits.dtype).min
    masked = logits.masked_fill(~mask, neg_inf)
    shifted = masked - masked.max(dim=1, keepdim=True).values
    weights = shifted.exp() * mask.to(logits.dtype)
    return weights / weights.sum(dim=1, keepdim=True)


class CrossModalityGraphBranch(nn.Module):
    """Multi-head graph attention over a batch, then a one-head output
    layer producing per-node class logits."""

    def __init__(self, in_dim, head_dim, num_heads, num_classes, negative_slope=LEAKY_SLOPE):
        super().__init__()
        if head_dim < 1 or num_heads < 1:
            raise ConfigurationError("head_dim and num_heads must be >= 1")
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.negative_slope = negative_slope
        self.head_proj = nn.ModuleList(
            nn.Linear(in_dim, head_dim, bias=False) for _ in range(num_heads)
        )
        self.head_pair_weight = nn.ParameterList(
            nn.Parameter(torch.empty(2 * head_dim)) for _ in range(num_heads)
        )
        self.out_proj = nn.Linear(num_heads * head_dim, num_classes, bias=False)
        self.out_pair_weight = nn.Parameter(torch.empty(2 * num_classes))
        for weight in list(self.head_pair_weight) + [self.out_pair_weight]:
            bound = 1.0 / math.sqrt(weight.numel())
            nn.init.uniform_(weight, -bound, bound)

    def head_coeffs(self, node_features, adjacency):
        """Per-head attention coefficient matrices, each (K, K)."""
        return [
            attention_coeffs(proj(node_features), adjacency, weight, self.negative_slope)
            for proj, weight in zip(self.head_proj, self.head_pair_weight)
        ]

    def aggregate(self, node_features, adjacency):
        """Concatenated per-head neighborhood mixtures through ELU, (K, L*d)."""
        mixed = []
        for proj, weight in zip(self.head_proj, self.head_pair_weight):
            projected = proj(node_features)
            alpha = attention_coeffs(projected, adjacency, weight, self.negative_slope)
            mixed.append(alpha @ projected)
        return F.elu(torch.cat(mixed, dim=1))

    def output_layer(self, aggregated, adjacency):
        """One-head attention over the class-logit projection; no activation."""
        projected = self.out_proj(aggregated)
        alpha = attention_coeffs(projected, adjacency, self.out_pair_weight, self.negative_slope)
        return alpha @ projected

    def forward(self, node_features, adjacency):
        return self.output_layer(self.aggregate(node_features, adjacency), adjacency)


def graph_loss(node_logits, labels):
    """Mean negative log-likelihood of the softmaxed node logits at the
    ground-truth classes."""
    num_classes = node_logits.shape[1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError("labels must lie in [0, %d)" % num_classes)
    return F.cross_entropy(node_logits, labels)
