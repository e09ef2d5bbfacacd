"""Full trainable network: two-stream backbone, shared embedding,
optional part-attention and graph branches, one shared classifier."""

import torch
import torch.nn as nn

from .backbone import BackboneConfig, FeatureEmbed, TwoStreamBackbone
from .errors import ModelError
from .graph_attention import CrossModalityGraphBranch, build_graph, graph_loss
from .losses import (LossReport, dynamic_weight, hard_triplet_loss, identity_loss,
                     make_classifier, mode_uses_graph, mode_uses_parts, part_loss,
                     total_loss)
from .part_attention import WeightedPartAttention


class CrossModalNet(nn.Module):
    def __init__(self, backbone_config: BackboneConfig, num_classes, mode="B",
                 num_parts=3, graph_heads=4, graph_dim=16, margin=0.3):
        super().__init__()
        self.mode = mode
        self.margin = margin
        self.num_classes = num_classes
        self.backbone = TwoStreamBackbone(backbone_config)
        dim = self.backbone.feature_dim
        self.embed = FeatureEmbed(dim)
        self.classifier = make_classifier(dim, num_classes)
        self.part_attention = (
            WeightedPartAttention(dim, num_parts) if mode_uses_parts(mode) else None
        )
        self.graph_branch = (
            CrossModalityGraphBranch(dim, graph_dim, graph_heads, num_classes)
            if mode_uses_graph(mode) else None
        )

    def features(self, images, visible_mask):
        """Inference representation: the part-aggregated feature when the
        part branch exists, otherwise the batch-normalized pooled feature."""
        fmap = self.backbone(images, visible_mask)
        pooled, embedded = self.embed(fmap)
        if self.part_attention is not None:
            aggregated, _ = self.part_attention(fmap, pooled)
            return aggregated
        return embedded

    def compute_losses(self, images, labels, visible_mask, mean_part_loss_prev=None):
        """One training step's losses. Returns (total tensor, LossReport)."""
        if labels.shape[0] != images.shape[0]:
            raise ModelError("labels length does not match batch size")
        fmap = self.backbone(images, visible_mask)
        pooled, embedded = self.embed(fmap)

        loss_id = identity_loss(embedded, labels, self.classifier)
        loss_tri = hard_triplet_loss(pooled, labels, self.margin)
        loss_base = loss_id + loss_tri

        loss_wp = None
        if self.part_attention is not None:
            aggregated, _ = self.part_attention(fmap, pooled)
            loss_wp = part_loss(aggregated, labels, self.classifier)

        loss_graph = None
        weight = 0.0
        if self.graph_branch is not None:
            node_logits = self.graph_branch(pooled, build_graph(labels))
            loss_graph = graph_loss(node_logits, labels)
            weight = dynamic_weight(mean_part_loss_prev)

        total = total_loss(self.mode, loss_base, loss_wp, loss_graph, weight)
        loss_part_level = loss_base + loss_wp if loss_wp is not None else loss_base
        report = LossReport(
            L_id=loss_id.item(),
            L_tri=loss_tri.item(),
            L_b=loss_base.item(),
            L_wp=loss_wp.item() if loss_wp is not None else None,
            L_P=loss_part_level.item(),
            L_g=loss_graph.item() if loss_graph is not None else None,
            dynamic_weight=weight,
            L_total=total.item(),
        )
        return total, report


def build_model(backbone_config, num_classes, mode, num_parts, graph_heads,
                graph_dim, margin, seed=None):
    """Construct the network; with a seed the parameter initialization is
    reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return CrossModalNet(
        backbone_config, num_classes, mode=mode, num_parts=num_parts,
        graph_heads=graph_heads, graph_dim=graph_dim, margin=margin,
    )
