"""Acceptance suite: one printed PASS/FAIL line per criterion.

The lines are collected by ``conftest.py`` and repeated in the terminal
summary, so ``pytest -v`` output always ends with the full table.
End-to-end training on the default config is shared by the KNN, freeze and
learning checks. The ablation and sample-count studies take several minutes
each on one CPU.
"""

import dataclasses
import time

import numpy as np
import pytest

from mmretrieval import checkpoint
from mmretrieval.config import RunConfig, text_disambiguating_config
from mmretrieval.data_org import Click, OrgConfig, SyntheticSpec, generate_synthetic, merge_by_clicks, organize
from mmretrieval.experiments import datasets_for, evaluate_state, new_state, prepare, run_ablation, \
    sample_count_study
from mmretrieval.gradcheck import run_grad_checks
from mmretrieval.proxy_loss import LossConfig, ProxyStore, margin_loss, refresh_cache, sharded_logits
from mmretrieval.retrieval_eval import (Judgment, average_precision, embed_samples, identical_at_k,
                                        mean_average_precision, mrr, relevance_at_k)
from mmretrieval.training import TOWER_GROUPS, run_curriculum

import oracles

SEEDS = [0, 1, 2, 3, 4]

GRAD_TOL, GRAD_SECONDS = 1e-4, 10.0
ORACLE_TOL, ORACLE_SECONDS = 1e-10, 5.0
HAND_CASE = 0.1594
HAND_CASE_TOL = 1e-3
FULL_K_TOL = 1e-12
KNN_REL_DEV, KNN_SAVINGS, KNN_SECONDS, KNN_BATCHES = 0.05, 0.80, 60.0, 100
SHARD_TOL, SHARD_SECONDS = 1e-15, 5.0
METRIC_TOL, METRIC_SECONDS = 1e-12, 5.0
MIN_IDENTICAL_AT_1, E2E_SECONDS = 0.90, 600.0
ABLATION_GAP, ABLATION_SECONDS = 0.03, 1800.0
CAPS_SECONDS = 1800.0
ORG_SECONDS = 10.0


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Default config trained for every seed; the tower hash is taken from a
    checkpoint written after the first phase and from the state after the second."""
    cfg = RunConfig()
    t0 = time.perf_counter()
    prepared = prepare(cfg)
    ckpt_dir = tmp_path_factory.mktemp("ckpt")
    states, scores, hashes = {}, {}, {}
    for seed in SEEDS:
        seen = {}

        def on_phase_end(st, i, seed=seed, seen=seen):
            if i == 0:
                path = ckpt_dir / f"seed{seed}_A.ckpt"
                checkpoint.save(path, st)
                seen["A"] = checkpoint.load(path)[0].model.group_hash(TOWER_GROUPS)
            elif i == 1:
                seen["B"] = st.model.group_hash(TOWER_GROUPS)

        state, _ = run_curriculum(new_state(cfg, seed), cfg.plan, datasets_for(cfg, prepared.data.samples, seed),
                                  cfg.train, on_phase_end=on_phase_end)
        states[seed] = state
        scores[seed] = evaluate_state(state, prepared).identical_at_1
        hashes[seed] = seen
    return {"cfg": cfg, "prepared": prepared, "states": states, "scores": scores, "hashes": hashes,
            "seconds": time.perf_counter() - t0}


def test_01_gradients_match_finite_differences(report_line):
    t0 = time.perf_counter()
    results = run_grad_checks(seeds=SEEDS, suites=["fusion", "heads", "margin_loss"], tol=GRAD_TOL, corrupt=None)
    elapsed = time.perf_counter() - t0
    worst = max(r.rel_err for r in results)
    ok = all(r.passed for r in results) and elapsed < GRAD_SECONDS
    report_line(1, ok, f"gradients: {len(results)} checks over fusion/heads/loss, max rel err {worst:.2e} "
                       f"(tol {GRAD_TOL:g}), {elapsed:.1f}s (< {GRAD_SECONDS:g}s)")
    assert ok


def test_02_margin_loss_matches_direct_transcription(report_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    store = ProxyStore(np.array([[1.0, 0.0], [0.0, 1.0]]))
    hand, _ = margin_loss(np.array([[1.0, 0.0]]), [0], store, LossConfig(s=2.0, m=0.5, knn_enabled=False))
    hand_expect = oracles.margin_loss([[1.0, 0.0]], [0], 2.0, 0.5)
    worst = abs(hand.item() - hand_expect)
    for _ in range(49):
        n, c, d = int(rng.integers(1, 7)), int(rng.integers(1, 10)), int(rng.integers(2, 9))
        z, y, store = unit_rows(rng, n, d), rng.integers(0, c, size=n), ProxyStore(unit_rows(rng, c, d))
        s, m = float(rng.uniform(1, 64)), float(rng.uniform(0, 1.5))
        loss, _ = margin_loss(z, y, store, LossConfig(s=s, m=m, knn_enabled=False))
        expect = oracles.margin_loss((z @ store.w.value.T).tolist(), y.tolist(), s, m)
        worst = max(worst, abs(loss.item() - expect) / max(1.0, abs(expect)))
    elapsed = time.perf_counter() - t0
    ok = worst <= ORACLE_TOL and abs(hand.item() - HAND_CASE) <= HAND_CASE_TOL and elapsed < ORACLE_SECONDS
    report_line(2, ok, f"margin loss oracle: 50 instances, max dev {worst:.1e} (tol {ORACLE_TOL:g}); "
                       f"hand case {hand.item():.4f} vs {HAND_CASE}; {elapsed:.2f}s")
    assert ok


def _knn_deviation(state, samples, seed):
    """K=C and K=0.1C against the full loss on fixed embeddings of the training samples."""
    z = embed_samples(state.model, samples)
    labels = np.array([state.label_of[s.category] for s in samples])
    store = state.store
    full_cfg = dataclasses.replace(state.loss_cfg, knn_enabled=False)
    all_cfg = dataclasses.replace(state.loss_cfg, knn_enabled=True, knn_fraction=1.0)
    knn_cfg = dataclasses.replace(state.loss_cfg, knn_enabled=True, knn_fraction=0.1)
    all_cache, knn_cache = refresh_cache(store, all_cfg), refresh_cache(store, knn_cfg)
    rng = np.random.default_rng(seed)
    full_k_dev, rel_devs, full_dots, knn_dots = 0.0, [], 0, 0
    for _ in range(KNN_BATCHES):
        idx = rng.choice(len(samples), size=32, replace=False)
        full, fs = margin_loss(z[idx], labels[idx], store, full_cfg)
        same, _ = margin_loss(z[idx], labels[idx], store, all_cfg, all_cache)
        pruned, ps = margin_loss(z[idx], labels[idx], store, knn_cfg, knn_cache)
        full_k_dev = max(full_k_dev, abs(same.item() - full.item()))
        rel_devs.append(abs(pruned.item() - full.item()) / full.item())
        full_dots += fs.dot_products
        knn_dots += ps.dot_products
    return full_k_dev, float(np.mean(rel_devs)), 1.0 - knn_dots / full_dots


def test_03_knn_pruned_loss_tracks_full_loss(trained, report_line):
    t0 = time.perf_counter()
    samples = trained["prepared"].data.samples
    per_seed = {seed: _knn_deviation(trained["states"][seed], samples, seed) for seed in SEEDS}
    elapsed = time.perf_counter() - t0
    full_k_dev = max(r[0] for r in per_seed.values())
    mean_dev = float(np.mean([r[1] for r in per_seed.values()]))
    savings = min(r[2] for r in per_seed.values())
    ok = full_k_dev <= FULL_K_TOL and mean_dev <= KNN_REL_DEV and savings >= KNN_SAVINGS and elapsed < KNN_SECONDS
    seeds_txt = ", ".join(f"{per_seed[s][1]:.3f}" for s in SEEDS)
    report_line(3, ok, f"KNN softmax: K=C dev {full_k_dev:.1e} (tol {FULL_K_TOL:g}); K=0.1C mean rel dev "
                       f"{mean_dev:.4f} over {KNN_BATCHES} batches x {len(SEEDS)} models [{seeds_txt}] "
                       f"(tol {KNN_REL_DEV}); dot products cut {savings:.1%} (>= {KNN_SAVINGS:.0%}); {elapsed:.1f}s")
    assert ok


def test_04_logits_do_not_depend_on_shard_layout(report_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(13)
    worst, same_keys = 0.0, True
    for _ in range(100):
        c, d = int(rng.integers(1, 40)), int(rng.integers(1, 16))
        w = unit_rows(rng, c, d)
        z = unit_rows(rng, 1, d)[0]
        cand = rng.choice(c, size=int(rng.integers(1, c + 1)), replace=False)
        one, _ = sharded_logits(z, ProxyStore(w, shards=1), cand)
        four, _ = sharded_logits(z, ProxyStore(w, shards=4), cand)
        same_keys &= list(one) == list(four)
        worst = max(worst, max(abs(one[k] - four[k]) for k in one))
    elapsed = time.perf_counter() - t0
    ok = same_keys and worst <= SHARD_TOL and elapsed < SHARD_SECONDS
    report_line(4, ok, f"shard layout: 1 vs 4 shards on 100 cases, max dev {worst:.1e} (tol {SHARD_TOL:g}); "
                       f"{elapsed:.2f}s")
    assert ok


def test_05_frozen_phase_leaves_towers_bit_identical(trained, report_line):
    h = trained["hashes"]
    ok = all(h[s]["A"] == h[s]["B"] for s in SEEDS)
    report_line(5, ok, f"freeze: tower hash after the frozen phase equals the first-phase checkpoint "
                       f"for {sum(h[s]['A'] == h[s]['B'] for s in SEEDS)}/{len(SEEDS)} seeds")
    assert ok


def _metric_instance(rng):
    docs = list(rng.choice(1000, size=int(rng.integers(1, 12)), replace=False))
    results, judgments = {}, {}
    for q in range(int(rng.integers(1, 8))):
        ident = {d for d in docs if rng.random() < 0.2}
        rel = ident | {d for d in docs if rng.random() < 0.3}
        if rng.random() < 0.2:
            rel |= {5000 + q}
        results[q] = [int(x) for x in rng.permutation(docs)]
        judgments[q] = Judgment(ident, rel)
    return results, judgments


def test_06_metrics_match_brute_force_oracles(report_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        results, j = _metric_instance(rng)
        ident = {q: j[q].identical for q in j}
        rel = {q: j[q].relevant for q in j}
        for k in (1, 5, 10):
            worst = max(worst, abs(identical_at_k(results, j, k) - float(oracles.hit_rate(results, ident, k))),
                        abs(relevance_at_k(results, j, k) - float(oracles.hit_rate(results, rel, k))))
        worst = max(worst, abs(mrr(results, j) - float(oracles.mrr(results, ident))))
        aps = [a for a in (oracles.average_precision(r, j[q].relevant, r) for q, r in results.items())
               if a is not None]
        value, _ = mean_average_precision(results, j)
        worst = max(worst, abs(value - (float(sum(aps) / len(aps)) if aps else 0.0)))
    hand_mrr = mrr({0: [10, 1, 2, 3], 1: [1, 2, 3, 10], 2: [1, 2, 3, 4]}, {q: Judgment({10}, set()) for q in range(3)})
    hand_ap = average_precision([5, 6, 7], {5, 7})
    hand_dev = max(abs(hand_mrr - (1 + 0.25 + 0) / 3), abs(hand_ap - (1 + 2 / 3) / 2))
    elapsed = time.perf_counter() - t0
    ok = worst <= METRIC_TOL and hand_dev <= METRIC_TOL and elapsed < METRIC_SECONDS
    report_line(6, ok, f"metrics: 20 instances, max dev {worst:.1e} from exact oracles (tol {METRIC_TOL:g}); "
                       f"MRR hand case {hand_mrr:.4f}, AP hand case {hand_ap:.4f}; {elapsed:.2f}s")
    assert ok


def test_07_default_config_learns_identity(trained, report_line):
    scores = trained["scores"]
    mean = float(np.mean([scores[s] for s in SEEDS]))
    ok = mean >= MIN_IDENTICAL_AT_1 and trained["seconds"] < E2E_SECONDS
    per_seed = ", ".join(f"{scores[s]:.3f}" for s in SEEDS)
    report_line(7, ok, f"end to end: mean Identical@1 {mean:.4f} (>= {MIN_IDENTICAL_AT_1}) over seeds "
                       f"{SEEDS} [{per_seed}]; {trained['seconds']:.0f}s for all seeds")
    assert ok


def test_08_concept_fusion_beats_ablations(report_line):
    t0 = time.perf_counter()
    res = run_ablation(text_disambiguating_config(), seeds=SEEDS)
    elapsed = time.perf_counter() - t0
    means = {v: res[v]["mean"]["identical_at_1"] for v in res}
    gap_avg = means["concept"] - means["average"]
    gap_img = means["concept"] - means["image_only"]
    ok = gap_avg >= ABLATION_GAP and gap_img >= ABLATION_GAP and elapsed < ABLATION_SECONDS
    report_line(8, ok, f"fusion ablation: Identical@1 concept {means['concept']:.4f}, average "
                       f"{means['average']:.4f}, image only {means['image_only']:.4f}; gaps {gap_avg:+.4f} / "
                       f"{gap_img:+.4f} (>= {ABLATION_GAP}); {elapsed:.0f}s")
    assert ok


def test_09_more_samples_per_category_never_hurt(report_line):
    t0 = time.perf_counter()
    caps = [2, 5, 10]
    res = sample_count_study(RunConfig(), caps=caps, seeds=SEEDS)
    elapsed = time.perf_counter() - t0
    means = [res[c]["mean"]["identical_at_1"] for c in caps]
    ok = all(b >= a for a, b in zip(means, means[1:])) and elapsed < CAPS_SECONDS
    trend = " -> ".join(f"{c}: {m:.4f}" for c, m in zip(caps, means))
    report_line(9, ok, f"samples per category: Identical@1 {trend} (non-decreasing); {elapsed:.0f}s")
    assert ok


def test_10_organization_recovers_components_and_products(report_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    graphs_ok = True
    for n in (1, 2, 10, 100, 1000, 10_000):
        edges = rng.integers(0, n, size=(int(rng.integers(0, n + 1)), 2)) if n > 1 else np.zeros((0, 2), int)
        nodes = list(range(n))
        got = merge_by_clicks({i: i for i in nodes}, [Click(int(a), int(b)) for a, b in edges])
        graphs_ok &= got == oracles.bfs_components(nodes, edges.tolist())

    spec = SyntheticSpec(num_products=40, samples_per_product=(10, 14), clicks_per_query=4, click_noise_rate=0.0,
                         family_spread=3.0, sample_noise=0.1, query_shift=0.2, seed=2)
    data = generate_synthetic(spec)
    assignment, _ = organize(data.samples, data.clicks, OrgConfig(eps=5.0))
    clicked = {c.q for c in data.clicks if c.clicked} | {c.d for c in data.clicks if c.clicked}
    product_of = data.truth.product_of
    ids_per_product, products_per_id = {}, {}
    for sid in clicked:
        ids_per_product.setdefault(product_of[sid], set()).add(assignment[sid])
        products_per_id.setdefault(assignment[sid], set()).add(product_of[sid])
    blobs_ok = (all(len(v) == 1 for v in ids_per_product.values())
                and all(len(v) == 1 for v in products_per_id.values()) and len(ids_per_product) == 40)
    elapsed = time.perf_counter() - t0
    ok = graphs_ok and blobs_ok and elapsed < ORG_SECONDS
    report_line(10, ok, f"organization: click merge equals BFS components up to 1e4 nodes ({graphs_ok}); "
                        f"separated blobs give {len(products_per_id)} IDs for 40 products ({blobs_ok}); "
                        f"{elapsed:.1f}s")
    assert ok
