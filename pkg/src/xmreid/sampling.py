"""Identity-balanced cross-modality batch construction.

A batch holds n distinct identities with m visible and m infrared images
each (K = 2mn slots). Identities short of m images in one modality are
drawn with replacement and the batch is flagged.
"""

from dataclasses import dataclass

import numpy as np

from .datagen import INFRARED, VISIBLE
from .errors import SamplingError

_NS_EPOCH = 10


@dataclass
class BatchIndices:
    record_indices: list   # K indices into the record list, grouped by identity
    labels: list           # identity id per slot
    modality_mask: list    # True = visible, per slot
    with_replacement: bool # some identity had fewer than m images in a modality

    def __len__(self):
        return len(self.record_indices)


def index_by_identity(records):
    """identity -> {modality -> [record index, ...]} in record order."""
    table = {}
    for idx, record in enumerate(records):
        table.setdefault(record.identity, {VISIBLE: [], INFRARED: []})[record.modality].append(idx)
    return table


def _eligible_identities(table):
    return sorted(i for i, pools in table.items() if pools[VISIBLE] and pools[INFRARED])


def _draw_batch(table, identity_ids, m, rng):
    indices, labels, mask = [], [], []
    replaced = False
    for identity in identity_ids:
        for modality in (VISIBLE, INFRARED):
            pool = table[identity][modality]
            if len(pool) >= m:
                picks = rng.choice(len(pool), size=m, replace=False)
            else:
                picks = rng.choice(len(pool), size=m, replace=True)
                replaced = True
            for p in picks:
                indices.append(pool[int(p)])
                labels.append(identity)
                mask.append(modality == VISIBLE)
    return BatchIndices(indices, labels, mask, replaced)


def sample_identity_balanced(train_records, n, m, rng) -> BatchIndices:
    """One batch of n identities drawn without replacement, m images per
    modality each, deterministic given the generator state."""
    if n < 1 or m < 1:
        raise SamplingError("n and m must be >= 1")
    table = index_by_identity(train_records)
    eligible = _eligible_identities(table)
    if len(eligible) < n:
        raise SamplingError(
            "need %d identities with images in both modalities, found %d" % (n, len(eligible))
        )
    chosen = rng.choice(len(eligible), size=n, replace=False)
    return _draw_batch(table, [eligible[int(c)] for c in chosen], m, rng)


def epoch_batches(train_records, n, m, seed, epoch) -> list:
    """floor(N_id / n) batches covering a per-epoch shuffled identity order.

    Reproducible from (seed, epoch); the trailing partial group is dropped.
    """
    if n < 1 or m < 1:
        raise SamplingError("n and m must be >= 1")
    table = index_by_identity(train_records)
    eligible = _eligible_identities(table)
    if len(eligible) < n:
        raise SamplingError(
            "need %d identities with images in both modalities, found %d" % (n, len(eligible))
        )
    rng = np.random.default_rng(np.random.SeedSequence((seed, _NS_EPOCH, epoch)))
    order = rng.permutation(len(eligible))
    batches = []
    for start in range(0, len(eligible) - n + 1, n):
        ids = [eligible[int(i)] for i in order[start:start + n]]
        batches.append(_draw_batch(table, ids, m, rng))
    return batches
