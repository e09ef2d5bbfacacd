"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The end-to-end criteria share six 40-epoch training runs through
module-scoped fixtures; everything is CPU-only and deterministic.
"""

import json
import warnings

import numpy as np
import pytest
import torch

from fdiff import max_relative_error
from oracles import (adjacency_oracle, attended_parts_oracle,
                     batch_hard_triplet_oracle, cmc_oracle, graph_coeffs_oracle,
                     map_oracle, multi_head_aggregate_oracle, part_attention_oracle)
from xmreid.backbone import BackboneConfig
from xmreid.checkpoint import load_checkpoint, load_model
from xmreid.config import load_experiment_config
from xmreid.datagen import GeneratorConfig, generate_dataset, save_manifest, split_train_test
from xmreid.evaluation import cmc, distance_matrix, evaluate
from xmreid.graph_attention import CrossModalityGraphBranch, attention_coeffs, build_graph, graph_loss
from xmreid.losses import (dynamic_weight, hard_triplet_loss, identity_loss,
                           make_classifier, part_loss, total_loss)
from xmreid.model import build_model
from xmreid.part_attention import WeightedPartAttention
from xmreid.sampling import sample_identity_balanced
from xmreid.trainer import Trainer

SEEDS = (1, 2, 3)
EPOCHS = 40


def _verdict(criterion, ok, detail):
    line = "ACCEPTANCE %s: %s (%s)" % (criterion, "PASS" if ok else "FAIL", detail)
    print(line)
    return line


# ---------------------------------------------------------------------------
# shared toy-scale runs (criteria 4, 6, 7, 8)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_manifest(tmp_path_factory):
    # 20 train + 20 test identities, 10 images/identity/modality, 72x36,
    # moderate noise
    root = tmp_path_factory.mktemp("toy_ds")
    config = GeneratorConfig(num_identities=40, images_per_identity_per_modality=10,
                             image_size=(72, 36), stripes=6, noise_level=0.05,
                             clutter_probability=0.1, seed=7)
    manifest = generate_dataset(config, root)
    manifest = split_train_test(manifest, 0.5, seed=7)
    save_manifest(manifest, root / "manifest.json")
    return manifest


@pytest.fixture(scope="module")
def trained_runs(toy_manifest, tmp_path_factory):
    """Final checkpoints and logs for B+P+G and B, three seeds each."""
    root = tmp_path_factory.mktemp("toy_runs")
    runs = {}
    for mode in ("B+P+G", "B"):
        for seed in SEEDS:
            overrides = ["train.epochs=%d" % EPOCHS, "train.seed=%d" % seed,
                         "train.mode=%s" % mode]
            config = load_experiment_config(None, overrides)
            out = root / ("%s_seed%d" % (mode.replace("+", ""), seed))
            runs[(mode, seed)] = Trainer(config, toy_manifest, out).fit()
    return runs


@pytest.fixture(scope="module")
def toy_reports(trained_runs, toy_manifest):
    reports = {}
    for key, result in trained_runs.items():
        model, _, _ = load_model(result.checkpoint_path)
        reports[key] = evaluate(model, toy_manifest, "visible-to-infrared")
    return reports


@pytest.fixture(scope="module")
def chance_level():
    """Random-feature simulation of the cross-modality protocol: 20 test
    identities, 10 gallery images each."""
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(20), 10)
    values = []
    for _ in range(20):
        query = rng.normal(size=(200, 16))
        gallery = rng.normal(size=(200, 16))
        values.append(cmc(distance_matrix(query, gallery), labels, labels, ks=(1,))[1])
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# criterion 1: oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_1_oracle_equivalence():
    worst = 0.0

    # part attention, Eqs. 2-4: alpha and attended parts
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(2, 5))
        channels = int(rng.integers(2, 7)) * 2
        block = WeightedPartAttention(channels, p).double()
        parts = torch.tensor(rng.normal(size=(1, p, channels)))
        alpha = block.attention(parts)
        attended = block.attend(alpha, parts)
        alpha_oracle = part_attention_oracle(
            parts[0].tolist(), block.embed_u.weight.tolist(), block.embed_v.weight.tolist())
        attended_oracle = attended_parts_oracle(
            alpha[0].tolist(), parts[0].tolist(), block.embed_z.weight.tolist())
        worst = max(worst,
                    float(np.abs(alpha[0].detach().numpy() - np.array(alpha_oracle)).max()),
                    float(np.abs(attended[0].detach().numpy() - np.array(attended_oracle)).max()))

    # graph attention coefficients and multi-head aggregation, Eqs. 7-8
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        k = int(rng.integers(2, 7))
        labels = torch.tensor(rng.integers(0, 3, size=k))
        adjacency = build_graph(labels).double()
        branch = CrossModalityGraphBranch(in_dim=4, head_dim=3, num_heads=2,
                                          num_classes=3).double()
        features = torch.tensor(rng.normal(size=(k, 4)))
        for proj, pair in zip(branch.head_proj, branch.head_pair_weight):
            alpha = attention_coeffs(proj(features), adjacency, pair)
            expected = graph_coeffs_oracle(features.tolist(), adjacency.tolist(),
                                           proj.weight.tolist(), pair.tolist())
            worst = max(worst, float(np.abs(alpha.detach().numpy() - np.array(expected)).max()))
        aggregated = branch.aggregate(features, adjacency)
        heads = [(proj.weight.tolist(), pair.tolist())
                 for proj, pair in zip(branch.head_proj, branch.head_pair_weight)]
        expected = multi_head_aggregate_oracle(features.tolist(), adjacency.tolist(), heads)
        worst = max(worst, float(np.abs(aggregated.detach().numpy() - np.array(expected)).max()))

    # batch-hard triplet mining
    for seed in range(100):
        rng = np.random.default_rng(2000 + seed)
        n_ids = int(rng.integers(2, 5))
        features, labels = [], []
        for ident in range(n_ids):
            for _ in range(2):
                features.append(rng.normal(size=3).tolist())
                labels.append(ident)
        loss = hard_triplet_loss(torch.tensor(np.array(features)), torch.tensor(labels), 0.3)
        worst = max(worst, abs(loss.item() - batch_hard_triplet_oracle(features, labels, 0.3)))

    # CMC and mAP
    for seed in range(100):
        rng = np.random.default_rng(3000 + seed)
        n_q, n_g = int(rng.integers(2, 8)), int(rng.integers(3, 11))
        distmat = rng.uniform(size=(n_q, n_g))
        g_labels = rng.integers(0, 3, size=n_g).tolist()
        q_labels = [int(rng.choice(g_labels)) for _ in range(n_q)]
        ks = (1, 3, 5, 10)
        got = cmc(distmat, q_labels, g_labels, ks)
        expected = cmc_oracle(distmat.tolist(), q_labels, g_labels, ks)
        worst = max(worst, max(abs(got[k] - expected[k]) for k in ks))
        from xmreid.evaluation import mean_average_precision
        worst = max(worst, abs(mean_average_precision(distmat, q_labels, g_labels)
                               - map_oracle(distmat.tolist(), q_labels, g_labels)))

    ok = worst < 1e-9
    assert ok, _verdict("1 oracle equivalence", ok, "max abs error %.2e" % worst)
    _verdict("1 oracle equivalence", ok, "max abs error %.2e over 5x100 instances" % worst)


# ---------------------------------------------------------------------------
# criterion 2: gradient verification
# ---------------------------------------------------------------------------

def test_criterion_2_gradient_verification():
    errors = {}

    torch.manual_seed(5)
    block = WeightedPartAttention(8, 3).double()
    with torch.no_grad():
        block.part_weights.normal_()
    fmap = torch.randn(2, 8, 6, 3, dtype=torch.float64)
    head = torch.randn(8, dtype=torch.float64)

    def part_block_loss():
        out, _ = block(fmap, fmap.mean(dim=(2, 3)))
        return (out @ head).sum()

    errors["part_block"] = max_relative_error(part_block_loss, [fmap] + list(block.parameters()))

    torch.manual_seed(6)
    branch = CrossModalityGraphBranch(in_dim=5, head_dim=4, num_heads=2, num_classes=3).double()
    labels6 = torch.tensor([0, 0, 1, 1, 2, 2])
    adjacency = build_graph(labels6).double()
    node_features = torch.randn(6, 5, dtype=torch.float64)

    def graph_branch_loss():
        return graph_loss(branch(node_features, adjacency), labels6)

    errors["graph_branch"] = max_relative_error(graph_branch_loss, [node_features] + list(branch.parameters()))

    torch.manual_seed(7)
    classifier = make_classifier(4, 3).double()
    with torch.no_grad():
        classifier.weight.normal_(std=0.5)
    embedded = torch.randn(6, 4, dtype=torch.float64)
    errors["identity_loss"] = max_relative_error(
        lambda: identity_loss(embedded, labels6, classifier), [embedded, classifier.weight])

    tri_features = torch.randn(6, 4, dtype=torch.float64)
    errors["triplet_loss"] = max_relative_error(
        lambda: hard_triplet_loss(tri_features, labels6, 0.3), [tri_features])

    aggregated = torch.randn(6, 4, dtype=torch.float64)
    errors["part_loss"] = max_relative_error(
        lambda: part_loss(aggregated, labels6, classifier), [aggregated])

    logits = torch.randn(6, 3, dtype=torch.float64)
    errors["graph_loss"] = max_relative_error(
        lambda: graph_loss(logits, labels6), [logits])

    total_in = [torch.randn((), dtype=torch.float64).abs() for _ in range(3)]
    errors["total_loss"] = max_relative_error(
        lambda: total_loss("B+P+G", total_in[0], total_in[1], total_in[2], 0.4), total_in)

    worst = max(errors.values())
    ok = worst < 1e-4
    detail = ", ".join("%s %.1e" % (k, v) for k, v in errors.items())
    assert ok, _verdict("2 gradient verification", ok, detail)
    _verdict("2 gradient verification", ok, detail)


# ---------------------------------------------------------------------------
# criterion 3: structural invariants over 100 random seeds each
# ---------------------------------------------------------------------------

def test_criterion_3_structural_invariants():
    from xmreid.datagen import SampleRecord

    # part attention rows sum to one
    for seed in range(100):
        torch.manual_seed(seed)
        p = 2 + seed % 4
        block = WeightedPartAttention(8, p)
        alpha = block.attention(torch.randn(2, p, 8) * (1 + seed % 7)).detach()
        assert float(alpha.min()) >= 0.0
        assert torch.allclose(alpha.sum(dim=-1), torch.ones(2, p), atol=1e-6)

    # graph coefficients masked-row-stochastic and zero off-mask;
    # adjacency symmetric, binary, reflexive, equal to the label oracle
    for seed in range(100):
        torch.manual_seed(seed)
        k = 2 + seed % 6
        labels = torch.randint(0, 3, (k,))
        adjacency = build_graph(labels)
        assert torch.equal(adjacency, adjacency.t())
        assert bool(adjacency.diagonal().all())
        assert set(adjacency.unique().tolist()) <= {0.0, 1.0}
        assert np.array_equal(adjacency.numpy(), np.array(adjacency_oracle(labels.tolist())))
        branch = CrossModalityGraphBranch(in_dim=4, head_dim=3, num_heads=2, num_classes=3)
        for alpha in branch.head_coeffs(torch.randn(k, 4), adjacency):
            alpha = alpha.detach()
            assert float(alpha.min()) >= 0.0
            assert torch.allclose(alpha.sum(dim=1), torch.ones(k), atol=1e-6)
            assert torch.equal(alpha * (1 - adjacency), torch.zeros(k, k))

    # sampler emits exactly n x (m + m) slots per batch
    records = []
    for ident in range(10):
        for k in range(3):
            records.append(SampleRecord("v%d_%d" % (ident, k), ident, "visible", 0))
            records.append(SampleRecord("i%d_%d" % (ident, k), ident, "infrared", 2))
    for seed in range(100):
        batch = sample_identity_balanced(records, n=4, m=2, rng=np.random.default_rng(seed))
        assert len(batch) == 4 * (2 + 2)
        per_label = {}
        for label, visible in zip(batch.labels, batch.modality_mask):
            per_label.setdefault(label, [0, 0])[0 if visible else 1] += 1
        assert len(per_label) == 4
        assert all(counts == [2, 2] for counts in per_label.values())

    # rank-k monotone nondecreasing in k
    for seed in range(100):
        rng = np.random.default_rng(seed)
        distmat = rng.uniform(size=(5, 8))
        g_labels = rng.integers(0, 3, size=8).tolist()
        q_labels = [int(rng.choice(g_labels)) for _ in range(5)]
        ranks = cmc(distmat, q_labels, g_labels, ks=(1, 2, 4, 8))
        values = [ranks[k] for k in (1, 2, 4, 8)]
        assert values == sorted(values) and values[-1] == 1.0

    _verdict("3 structural invariants", True, "4 invariant families x 100 seeds")


# ---------------------------------------------------------------------------
# criterion 4: schedule reproduction
# ---------------------------------------------------------------------------

def test_criterion_4_schedule_reproduction(trained_runs):
    assert dynamic_weight(0.0) == 1.0
    assert dynamic_weight(1.0) == 0.5

    log_path = trained_runs[("B+P+G", 1)].log_path
    steps, epochs = [], []
    for line in open(log_path):
        record = json.loads(line)
        (steps if "step" in record else epochs).append(record)
    assert len(epochs) == EPOCHS

    worst = 0.0
    for record in steps:
        if record["epoch"] == 1:
            assert record["dynamic_weight"] == 0.0  # first epoch
    for epoch_record in epochs:
        epoch = epoch_record["epoch"]
        values = [s["L_P"] for s in steps if s["epoch"] == epoch]
        mean = sum(values) / len(values)
        worst = max(worst, abs(mean - epoch_record["mean_L_P"]))
        worst = max(worst, abs(dynamic_weight(mean) - epoch_record["dynamic_weight_next"]))
        for step_record in (s for s in steps if s["epoch"] == epoch + 1):
            worst = max(worst, abs(step_record["dynamic_weight"]
                                   - epoch_record["dynamic_weight_next"]))

    # monotone consequence of the schedule: lower mean loss -> higher weight
    for previous, current in zip(epochs, epochs[1:]):
        if current["mean_L_P"] < previous["mean_L_P"]:
            assert current["dynamic_weight_next"] > previous["dynamic_weight_next"]

    ok = worst < 1e-9
    assert ok, _verdict("4 schedule reproduction", ok, "max deviation %.2e" % worst)
    _verdict("4 schedule reproduction", ok,
             "w(0)=1, w(1)=0.5, first epoch 0, log recomputation off by %.2e" % worst)


# ---------------------------------------------------------------------------
# criterion 5: degeneracy chain at part-attention zero-init
# ---------------------------------------------------------------------------

def test_criterion_5_degeneracy_chain():
    model = build_model(BackboneConfig(stage_channels=(4, 8, 8, 16)), 4, "B+P",
                        3, 2, 4, 0.3, seed=11)
    torch.manual_seed(11)
    images = torch.randn(8, 3, 24, 12)
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
    mask = torch.tensor([True, False] * 4)
    fmap = model.backbone(images, mask)
    pooled, _ = model.embed(fmap)
    aggregated, _ = model.part_attention(fmap, pooled)
    exact = torch.equal(aggregated, model.part_attention.residual_bn(pooled))
    _, report = model.compute_losses(images, labels, mask, None)
    gap = abs(report.L_wp - report.L_id)
    ok = exact and gap < 1e-6
    assert ok, _verdict("5 degeneracy chain", ok, "x* exact %s, |L_wp - L_id| %.2e" % (exact, gap))
    _verdict("5 degeneracy chain", ok, "x* = BN(pooled) exactly, |L_wp - L_id| = %.2e" % gap)


# ---------------------------------------------------------------------------
# criteria 6-8: end-to-end learning on the toy task
# ---------------------------------------------------------------------------

def test_criterion_7_chance_baseline(toy_manifest, chance_level):
    values = []
    for seed in range(5):
        model = build_model(BackboneConfig(), len(toy_manifest.train_ids), "B+P+G",
                            3, 4, 16, 0.3, seed=seed)
        report = evaluate(model, toy_manifest, "visible-to-infrared")
        values.append(report.ranks[1])
    mean = float(np.mean(values))
    ok = 0.0 <= mean <= 0.15
    detail = "untrained mean rank-1 %.4f over 5 seeds (sim chance %.4f)" % (mean, chance_level)
    assert ok, _verdict("7 chance baseline", ok, detail)
    _verdict("7 chance baseline", ok, detail)


def test_criterion_6_end_to_end_learning(toy_reports, chance_level):
    rank1 = [toy_reports[("B+P+G", seed)].ranks[1] for seed in SEEDS]
    mean = float(np.mean(rank1))
    ok = mean >= 0.50 and mean >= 10.0 * chance_level
    detail = "mean rank-1 %.4f over seeds %s (threshold 0.50, 10x chance %.3f)" % (
        mean, list(SEEDS), 10.0 * chance_level)
    assert ok, _verdict("6 end-to-end learning", ok, detail)
    _verdict("6 end-to-end learning", ok, detail)


def test_criterion_8_ablation_direction_soft(toy_reports):
    full = float(np.mean([toy_reports[("B+P+G", s)].mean_ap for s in SEEDS]))
    base = float(np.mean([toy_reports[("B", s)].mean_ap for s in SEEDS]))
    ok = full >= base - 0.01
    detail = "mean mAP B+P+G %.4f vs B %.4f" % (full, base)
    if not ok:
        warnings.warn("soft ablation ordering violated: %s" % detail)
    _verdict("8 ablation direction (soft)", ok, detail)


# ---------------------------------------------------------------------------
# criterion 9: determinism and resume
# ---------------------------------------------------------------------------

def test_criterion_9_determinism_and_resume(tiny_dataset, tmp_path, tiny_overrides):
    overrides = tiny_overrides + ["train.epochs=4", "train.checkpoint_every=2"]
    config = load_experiment_config(None, overrides)

    run_a = Trainer(config, tiny_dataset, tmp_path / "a").fit()
    run_b = Trainer(config, tiny_dataset, tmp_path / "b").fit()
    logs_equal = run_a.log_path.read_bytes() == run_b.log_path.read_bytes()
    ckpt_equal = run_a.checkpoint_path.read_bytes() == run_b.checkpoint_path.read_bytes()

    half = load_experiment_config(None, overrides + ["train.epochs=2"])
    partial_dir = tmp_path / "partial"
    Trainer(half, tiny_dataset, partial_dir).fit()
    resumed = Trainer(config, tiny_dataset, partial_dir).fit(
        resume_from=partial_dir / "checkpoint_epoch0002.ckpt")
    _, tensors_a = load_checkpoint(run_a.checkpoint_path)
    _, tensors_r = load_checkpoint(resumed.checkpoint_path)
    resume_equal = set(tensors_a) == set(tensors_r) and all(
        torch.equal(tensors_a[name], tensors_r[name]) for name in tensors_a)

    ok = logs_equal and ckpt_equal and resume_equal
    detail = "log bytes %s, checkpoint bytes %s, resume tensors %s" % (
        logs_equal, ckpt_equal, resume_equal)
    assert ok, _verdict("9 determinism & resume", ok, detail)
    _verdict("9 determinism & resume", ok, detail)
