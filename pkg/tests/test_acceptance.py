"""Acceptance suite: one test per criterion, each printing a PASS/FAIL summary line."""
import time

import numpy as np
import pytest

from canreid import gradcheck
from canreid.data import generate_synthetic
from canreid.evaluation import DistanceMatrix, evaluate
from canreid.losses import batch_hard_triplet
from canreid.model import BackboneConfig, BranchSpec, build_model, collaborative_attention, inference_descriptor
from canreid.nn import adaptive_pool_params
from canreid.train import TrainConfig, train
import oracles

SEEDS = range(5)
VARIANTS = {
    "full": {},
    "no_ca": {"collaborative_attention": False},
    "ce_only": {"use_triplet": False, "use_center": False},
}


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    return generate_synthetic(tmp_path_factory.mktemp("desk"), num_ids=16, per_id=8, h=96, w=32, seed=0)


@pytest.fixture(scope="module")
def desk_runs(desk_data):
    """Default desk config for every (variant, seed); 'full' seed 0 doubles as the overfit run."""
    runs = {}
    for name, override in VARIANTS.items():
        for seed in SEEDS:
            start = time.perf_counter()
            result = train(TrainConfig(seed=seed, **override), desk_data)
            runs[name, seed] = (result, time.perf_counter() - start)
    return runs


def mean_map(runs, name):
    return float(np.mean([runs[name, s][0].report.mAP for s in SEEDS]))


def test_c01_pool_geometry(acceptance):
    start = time.perf_counter()
    ok = True
    for IS in range(1, 65):
        for OS in range(1, IS + 1):
            g = adaptive_pool_params(IS, OS)
            ok &= (OS - 1) * g.stride + g.kernel == IS and g.kernel >= 1 and g.padding == 0
    spots = {(24, 3): (8, 8), (24, 5): (4, 8), (24, 7): (3, 6), (24, 1): (24, 24)}
    for (IS, OS), expected in spots.items():
        g = adaptive_pool_params(IS, OS)
        ok &= (g.stride, g.kernel) == expected
    elapsed = time.perf_counter() - start
    assert acceptance(1, ok and elapsed < 1.0, f"exhaustive 1<=OS<=IS<=64 + spot values, {elapsed:.3f}s (<1s)")


def test_c02_gradient_suite(acceptance):
    start = time.perf_counter()
    results = gradcheck.run_all(trials=100, seed=0)
    elapsed = time.perf_counter() - start
    worst_name = max(results, key=results.get)
    ok = all(err < gradcheck.TOLERANCE for err in results.values()) and elapsed < 60
    assert acceptance(2, ok, f"{len(results)} checks, worst {worst_name}={results[worst_name]:.2e} (<1e-4), "
                             f"{elapsed:.1f}s (<60s)")


def test_c03_stream_census(acceptance):
    model = build_model(BackboneConfig(), BranchSpec((1, 3, 5, 7)), embed_dim=256, num_classes=16)
    fs = model.feature_set()
    desc = inference_descriptor(model, np.random.default_rng(0).standard_normal((3, 96, 32)))
    out = model(np.zeros((1, 3, 96, 32)))
    ok = (fs.num_global, fs.num_local) == (4, 12) and out.features.shape == (16, 1, 256) \
        and desc.shape == (4096,) and abs(np.linalg.norm(desc) - 1) < 1e-12
    assert acceptance(3, ok, f"{fs.num_global} global + {fs.num_local} local streams of "
                             f"{out.features.shape[-1]}, descriptor {desc.shape[0]}")


def test_c04_collaborative_attention_oracle(acceptance):
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    ok = True
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        local = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 9)), n, 1))
        blocks = collaborative_attention(local)
        expected = oracles.adjacent_max(local)
        ok &= len(blocks) == n - 1 and all(np.array_equal(b.data[..., 0, :], e) for b, e in zip(blocks, expected))
    elapsed = time.perf_counter() - start
    assert acceptance(4, ok and elapsed < 5, f"1000 random tensors exact, {elapsed:.2f}s (<5s)")


def test_c05_triplet_oracle(acceptance):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        P, K = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        labels = rng.permutation(np.repeat(rng.choice(100, P, replace=False), K))
        f = rng.standard_normal((P * K, int(rng.integers(1, 9))))
        margin = float(rng.uniform(0, 1))
        worst = max(worst, abs(batch_hard_triplet(f, labels, margin).item() - oracles.triplet(f, labels, margin)))
    elapsed = time.perf_counter() - start
    assert acceptance(5, worst <= 1e-12 and elapsed < 10,
                      f"1000 batches P,K<=4, max |diff|={worst:.1e} (<=1e-12), {elapsed:.2f}s (<10s)")


def test_c06_retrieval_oracle(acceptance):
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    checked, mismatches = 0, 0
    while checked < 500:
        d, qi, qc, gi, gc = oracles.random_retrieval_instance(rng, max_gallery=20)
        expected = oracles.retrieval(d, qi, qc, gi, gc, len(gi))
        try:
            rep = evaluate(DistanceMatrix(d, qi, qc, gi, gc), max_rank=len(gi))
        except ValueError:
            continue
        checked += 1
        mismatches += expected is None or (rep.mAP, rep.cmc) != expected
    elapsed = time.perf_counter() - start
    assert acceptance(6, mismatches == 0 and elapsed < 10,
                      f"{checked} instances, {mismatches} mismatches (exact), {elapsed:.2f}s (<10s)")


def random_floor(manifest, draws=200, seed=0):
    """mAP of a random ranking on the same query/gallery split, averaged by the oracle."""
    rng = np.random.default_rng(seed)
    q, g = manifest.split("query"), manifest.split("gallery")
    meta = lambda idx: ([manifest.records[i].person_id for i in idx],  # noqa: E731
                        [manifest.records[i].camera_id for i in idx])
    (qi, qc), (gi, gc) = meta(q), meta(g)
    return float(np.mean([oracles.retrieval(rng.random((len(q), len(g))), qi, qc, gi, gc, 1)[0]
                          for _ in range(draws)]))


def test_c07_desk_overfit(acceptance, desk_data, desk_runs):
    result, elapsed = desk_runs["full", 0]
    untrained = train(TrainConfig(epochs=0), desk_data).report
    steps = len(result.log.steps)
    rep = result.report
    ok = rep.rank1 == 1.0 and rep.mAP >= 0.95 and steps <= 2000 and elapsed <= 600
    assert acceptance(7, ok, f"rank-1 {rep.rank1:.4f} (==1), mAP {rep.mAP:.4f} (>=0.95), {steps} steps (<=2000), "
                             f"{elapsed:.0f}s (<=600s); untrained mAP {untrained.mAP:.4f}, "
                             f"random floor {random_floor(desk_data):.4f}")


def test_c08_ablation_ca(acceptance, desk_runs):
    with_ca, without = mean_map(desk_runs, "full"), mean_map(desk_runs, "no_ca")
    per_seed = ", ".join(f"{desk_runs['full', s][0].report.mAP:.4f}/{desk_runs['no_ca', s][0].report.mAP:.4f}"
                         for s in SEEDS)
    assert acceptance(8, with_ca >= without,
                      f"mean mAP CA {with_ca:.4f} >= no-CA {without:.4f} over 5 seeds [{per_seed}]")


def test_c09_loss_combination(acceptance, desk_runs):
    full, ce = mean_map(desk_runs, "full"), mean_map(desk_runs, "ce_only")
    lam = TrainConfig().center_weight
    worst = max(abs(s["total"] - (s["ce"] + s["triplet"] + lam * s["center"]))
                for name in VARIANTS for seed in SEEDS for s in desk_runs[name, seed][0].log.steps)
    per_seed = ", ".join(f"{desk_runs['full', s][0].report.mAP:.4f}/{desk_runs['ce_only', s][0].report.mAP:.4f}"
                         for s in SEEDS)
    assert acceptance(9, full >= ce and worst <= 1e-10,
                      f"mean mAP CE+Trip+Center {full:.4f} >= CE-only {ce:.4f} over 5 seeds [{per_seed}]; "
                      f"max |total-(CE+Trip+lambda*C)|={worst:.1e}")


def test_c10_determinism(acceptance, desk_data):
    cfg = TrainConfig(max_steps=10, seed=11)
    a, b = train(cfg, desk_data), train(cfg, desk_data)
    la, lb = a.log.loss_values(), b.log.loss_values()
    ok = len(la) == 10 and la == lb and a.report.to_dict() == b.report.to_dict() and a.report.ap == b.report.ap
    assert acceptance(10, ok, f"10-step losses bit-identical: {la == lb}, final reports identical: "
                              f"{a.report.to_dict() == b.report.to_dict()}")
