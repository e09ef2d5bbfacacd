"""Training objectives and the dynamic dual-aggregation schedule.

The classifier instance is shared between the identity loss (on the
batch-normalized pooled feature) and the part loss (on the aggregated
part feature), so at part-attention zero-init the two losses coincide.
The triplet loss mines batch-hard positives/negatives over all K
samples, which pools within- and cross-modality pairs.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError

MODES = ("B", "B+P", "B+G", "B+P+G")
DEFAULT_MARGIN = 0.3


def mode_uses_parts(mode: str) -> bool:
    _check_mode(mode)
    return "P" in mode.split("+")

def mode_uses_graph(mode: str) -> bool:
    _check_mode(mode)
    return "G" in mode.split("+")

def _check_mode(mode):
    if mode not in MODES:
        raise ContractError("mode must be one of %s, got %r" % (", ".join(MODES), mode))


def make_classifier(dim, num_classes):
    classifier = nn.Linear(dim, num_classes, bias=False)
    nn.init.normal_(classifier.weight, std=0.001)
    return classifier


def _check_labels(labels, num_classes):
    if labels.numel() == 0:
        raise ContractError("empty label vector")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError("labels must lie in [0, %d)" % num_classes)


def identity_loss(embedded, labels, classifier):
    """Mean cross-entropy of the classified embedding."""
    _check_labels(labels, classifier.out_features)
    return F.cross_entropy(classifier(embedded), labels)


def part_loss(aggregated, labels, classifier):
    """Mean cross-entropy of the classified part-aggregated feature,
    through the same classifier instance as identity_loss."""
    _check_labels(labels, classifier.out_features)
    return F.cross_entropy(classifier(aggregated), labels)


def pairwise_euclidean(features):
    sq = (features * features).sum(dim=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * features @ features.t()
    return d2.clamp(min=1e-12).sqrt()


def hard_triplet_loss(features, labels, margin=DEFAULT_MARGIN):
    """Batch-hard triplet loss with Euclidean distances.

    Per anchor: hardest positive = max distance over same-label others,
    hardest negative = min distance over different-label samples, hinged
    at the margin and averaged over anchors. Mining pools all K samples.
    """
    same = labels.view(-1, 1) == labels.view(1, -1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=features.device)
    if not bool((same & ~eye).any(dim=1).all()):
        raise ContractError("every anchor needs at least one same-label other sample")
    if not bool((~same).any(dim=1).all()):
        raise ContractError("every anchor needs at least one different-label sample")
    dist = pairwise_euclidean(features)
    big = torch.finfo(dist.dtype).max
    d_pos = dist.masked_fill(~(same & ~eye), -big).max(dim=1).values
    d_neg = dist.masked_fill(same, big).min(dim=1).values
    return F.relu(d_pos - d_neg + margin).mean()


def dynamic_weight(mean_part_loss_prev: Optional[float]) -> float:
    """Parameter-free graph-loss weight: 0 on the first epoch, afterwards
    1 / (1 + previous epoch's mean instance-level loss)."""
    if mean_part_loss_prev is None:
        return 0.0
    if mean_part_loss_prev < 0:
        raise ContractError("previous mean loss must be >= 0")
    return 1.0 / (1.0 + mean_part_loss_prev)


def total_loss(mode, loss_base, loss_wp=None, loss_graph=None, graph_weight=0.0):
    """Combine components for the ablation mode.

    B -> L_b; B+P -> L_b + L_wp; B+G -> L_b + w*L_g; B+P+G -> L_b + L_wp + w*L_g.
    """
    _check_mode(mode)
    total = loss_base
    if mode_uses_parts(mode):
        if loss_wp is None:
            raise ContractError("mode %s requires the part loss" % mode)
        total = total + loss_wp
    if mode_uses_graph(mode):
        if loss_graph is None:
            raise ContractError("mode %s requires the graph loss" % mode)
        total = total + graph_weight * loss_graph
    return total


@dataclass
class LossReport:
    """Per-step loss record, serialized to the JSON-lines training log."""
    L_id: float
    L_tri: float
    L_b: float
    L_P: float
    dynamic_weight: float
    L_total: float
    L_wp: Optional[float] = None
    L_g: Optional[float] = None

    def to_dict(self):
        out = {"L_id": self.L_id, "L_tri": self.L_tri, "L_b": self.L_b}
        if self.L_wp is not None:
            out["L_wp"] = self.L_wp
        out["L_P"] = self.L_P
        if self.L_g is not None:
            out["L_g"] = self.L_g
        out["dynamic_weight"] = self.dynamic_weight
        out["L_total"] = self.L_total
        return out

    def is_finite(self):
        values = [self.L_id, self.L_tri, self.L_b, self.L_P, self.dynamic_weight, self.L_total]
        values += [v for v in (self.L_wp, self.L_g) if v is not None]
        return all(torch.isfinite(torch.tensor(values)).tolist())
