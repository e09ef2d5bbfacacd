"""Cross-modality retrieval evaluation: feature extraction, Euclidean
distance matrix, CMC rank-k and mAP, for both query directions."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .datagen import INFRARED, VISIBLE, load_image
from .errors import ContractError, ProtocolError

DEFAULT_KS = (1, 5, 10, 20)
DIRECTIONS = ("visible-to-infrared", "infrared-to-visible")


@dataclass
class EvalReport:
    direction: str
    ranks: dict          # k -> accuracy in [0, 1]
    mean_ap: float
    num_query: int
    num_gallery: int

    def to_dict(self):
        return {
            "direction": self.direction,
            "ranks": {str(k): v for k, v in self.ranks.items()},
            "mAP": self.mean_ap,
            "num_query": self.num_query,
            "num_gallery": self.num_gallery,
        }

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def csv_header(self):
        return ["direction", "num_query", "num_gallery"] + \
               ["rank%d" % k for k in sorted(self.ranks)] + ["mAP"]

    def csv_row(self):
        return [self.direction, self.num_query, self.num_gallery] + \
               ["%.6f" % self.ranks[k] for k in sorted(self.ranks)] + ["%.6f" % self.mean_ap]

    def save_csv(self, path):
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(self.csv_header())
            writer.writerow(self.csv_row())


def extract_features(model, manifest, records, batch_size=128) -> np.ndarray:
    """Inference features for the given records, (N, C). Eval mode, no
    augmentation; running statistics make the result independent of the
    batching."""
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            part = records[start:start + batch_size]
            images = []
            for record in part:
                tensor = load_image(record, manifest.root)
                if record.modality != VISIBLE:
                    tensor = tensor.repeat(3, 1, 1)
                images.append(tensor)
            images = (torch.stack(images) - 0.5) / 0.5
            mask = torch.tensor([r.modality == VISIBLE for r in part], dtype=torch.bool)
            chunks.append(model.features(images, mask).double().numpy())
    return np.concatenate(chunks, axis=0)


def distance_matrix(query, gallery) -> np.ndarray:
    """Euclidean distances (N_q, N_g), computed per query row from exact
    differences (no quadratic-expansion cancellation)."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ContractError("query and gallery must be 2-D with a common feature dimension")
    out = np.empty((query.shape[0], gallery.shape[0]))
    for i in range(query.shape[0]):
        diff = gallery - query[i]
        out[i] = np.sqrt((diff * diff).sum(axis=1))
    return out


def _first_hit_positions(distmat, q_labels, g_labels):
    """1-based sorted position of the first same-label gallery item per
    query; ties broken by gallery index (stable sort)."""
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    positions = np.empty(len(q_labels), dtype=np.int64)
    for i in range(len(q_labels)):
        order = np.argsort(distmat[i], kind="stable")
        matches = np.flatnonzero(g_labels[order] == q_labels[i])
        if matches.size == 0:
            raise ProtocolError("query %d has no gallery match" % i)
        positions[i] = matches[0] + 1
    return positions


def cmc(distmat, q_labels, g_labels, ks=DEFAULT_KS) -> dict:
    """rank-k accuracy for each k: fraction of queries whose first correct
    match appears within the top k."""
    positions = _first_hit_positions(distmat, q_labels, g_labels)
    return {int(k): float((positions <= k).mean()) for k in ks}


def mean_average_precision(distmat, q_labels, g_labels) -> float:
    """mAP over queries; AP averages precision at every correct match's
    sorted position."""
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    average_precisions = []
    for i in range(len(q_labels)):
        order = np.argsort(distmat[i], kind="stable")
        hits = (g_labels[order] == q_labels[i])
        relevant = int(hits.sum())
        if relevant == 0:
            raise ProtocolError("query %d has no gallery match" % i)
        cumulative = np.cumsum(hits)
        positions = np.flatnonzero(hits) + 1
        precision_at_hits = cumulative[positions - 1] / positions
        average_precisions.append(precision_at_hits.sum() / relevant)
    return float(np.mean(average_precisions))


def evaluate(model, manifest, direction, ks=DEFAULT_KS) -> EvalReport:
    """Full cross-modality protocol on the manifest's test split: every
    image of the query modality against every image of the other."""
    if direction not in DIRECTIONS:
        raise ProtocolError("direction must be one of %s" % (DIRECTIONS,))
    if manifest.split is None:
        raise ProtocolError("manifest has no train/test split")
    query_modality = VISIBLE if direction == "visible-to-infrared" else INFRARED
    gallery_modality = INFRARED if query_modality == VISIBLE else VISIBLE
    query_records = manifest.records_for(manifest.test_ids, query_modality)
    gallery_records = manifest.records_for(manifest.test_ids, gallery_modality)
    if not query_records or not gallery_records:
        raise ProtocolError("test split is empty on one side of direction %s" % direction)
    query = extract_features(model, manifest, query_records)
    gallery = extract_features(model, manifest, gallery_records)
    distmat = distance_matrix(query, gallery)
    q_labels = [r.identity for r in query_records]
    g_labels = [r.identity for r in gallery_records]
    return EvalReport(
        direction=direction,
        ranks=cmc(distmat, q_labels, g_labels, ks),
        mean_ap=mean_average_precision(distmat, q_labels, g_labels),
        num_query=len(query_records),
        num_gallery=len(gallery_records),
    )
