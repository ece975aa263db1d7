"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import itertools
import subprocess
import sys
import time

import numpy as np
import pytest

from eqgraph import (
    BuildParams,
    LabeledMatrix,
    MatchParams,
    WeightedGraph,
    WorldConfig,
    brute_knn,
    build_index,
    build_model,
    cmc_curve,
    correspond_ensembles,
    dissimilarity_matrix,
    exact_path_oracle,
    fiedler_value,
    fiedler_bipartition,
    generate_probe_ensembles,
    generate_world,
    load_model,
    match_ensembles,
    partition_quality,
    refine_assignments,
    rigid_fit,
    roc_curve,
    save_model,
    vr_at_far,
    write_descriptor_records,
)

from conftest import make_descriptor, toy_model


def report(num, name, ok, detail=""):
    print(f"\n[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
    assert ok, f"criterion {num:02d} ({name}): {detail}"


def rank1_rate(matrix, probes, gallery):
    hits = 0
    for i, p in enumerate(probes):
        j = int(np.argmin(matrix[i]))
        hits += gallery[j].subject_id == p.subject_id
    return hits / len(probes)


@pytest.fixture(scope="module")
def cancellation_world():
    # identity components and expression offsets in disjoint subspaces, so
    # the stated exact equalities are attainable (see decisions ledger)
    config = WorldConfig(
        n_identities=20,
        n_expressions=4,
        n_keypoints=10,
        expression_scale=2.0,
        split_subspaces=True,
    )
    collections, truth = generate_world(config, seed=101)
    model = build_model(collections, BuildParams())
    return config, collections, truth, model


def test_criterion_01_expression_cancellation(cancellation_world):
    config, collections, truth, model = cancellation_world
    started = time.monotonic()
    idx = build_index(model)
    gallery = [c.ensembles[0] for c in collections]
    probes = [e for c in collections for e in c.ensembles if not e.is_neutral]
    assert len(probes) == 60

    worst_same = 0.0
    worst_direct = float("inf")
    worst_rel = 0.0
    n_same = n_diff = 0
    for probe in probes:
        for g in gallery:
            result = match_ensembles(probe, g, idx)
            same = probe.subject_id == g.subject_id
            for pair, m in zip(result.correspondence.pairs, result.per_pair):
                direct = float(np.linalg.norm(pair.a.vector - pair.b.vector))
                if same:
                    worst_same = max(worst_same, m)
                    worst_direct = min(worst_direct, direct)
                    n_same += 1
                else:
                    identity_gap = float(
                        np.linalg.norm(
                            truth.identity_of(pair.b.descriptor_id)
                            - truth.identity_of(pair.a.descriptor_id)
                        )
                    )
                    worst_rel = max(worst_rel, abs(m - identity_gap) / identity_gap)
                    n_diff += 1
    elapsed = time.monotonic() - started

    ok = (
        worst_same <= 1e-9
        # offsets have norm == expression_scale up to one float rounding
        and worst_direct >= config.expression_scale * (1.0 - 1e-12)
        and worst_rel <= 1e-6
        and elapsed < 30.0
    )
    report(
        1,
        "expression cancellation (exact)",
        ok,
        f"same-id pairs={n_same} worst m={worst_same:.2e}; min direct={worst_direct:.3f} "
        f"(scale {config.expression_scale}); diff-id pairs={n_diff} worst rel err={worst_rel:.2e}; "
        f"{elapsed:.1f}s",
    )


def test_criterion_02_invariant_vs_plain_gap():
    started = time.monotonic()
    config = WorldConfig(
        n_identities=20,
        n_expressions=4,
        n_keypoints=10,
        identity_separation=1.0,
        identity_scale=1.0 / 6.0,
        expression_scale=2.0,  # 2x the minimum identity separation
        noise_sigma=0.02,  # 0.02x the separation
    )
    collections, truth = generate_world(config, seed=102)
    model = build_model(collections, BuildParams())
    gallery = [c.ensembles[0] for c in collections]
    probes = generate_probe_ensembles(truth, seed=103, expressions=["e001", "e002"])
    assert len(probes) >= 40

    params = MatchParams(top_n=3)  # the ensemble measure wants top_n << pair count
    invariant = rank1_rate(dissimilarity_matrix(probes, gallery, model, params=params), probes, gallery)
    plain = rank1_rate(
        dissimilarity_matrix(probes, gallery, model, params=params, plain=True), probes, gallery
    )
    elapsed = time.monotonic() - started

    ok = invariant >= 0.95 and (invariant - plain) >= 0.20 and elapsed < 60.0
    report(
        2,
        "invariant-vs-plain rank-1 gap",
        ok,
        f"invariant={invariant:.3f} plain={plain:.3f} gap={100 * (invariant - plain):.0f}pp; "
        f"probes={len(probes)}; {elapsed:.1f}s",
    )


def test_criterion_03_heuristic_vs_oracle():
    violations = 0
    equal = 0
    above_direct = 0
    total = 0
    # noiseless worlds whose expression variety fits within the gate
    # candidate count and whose offsets are global (one vector per
    # expression), so the bounded-path optimum sits at proximal gates
    for seed, n_identities, n_keypoints in ((104, 6, 8), (105, 5, 10)):
        config = WorldConfig(
            n_identities=n_identities,
            n_expressions=3,
            n_keypoints=n_keypoints,
            uniform_expression_offsets=True,
        )
        collections, truth = generate_world(config, seed=seed)
        model = build_model(collections, BuildParams())
        assert len(model.equivalence_sets) <= 64
        idx = build_index(model)
        gallery = [c.ensembles[0] for c in collections]
        probes = generate_probe_ensembles(truth, seed=seed + 50, expressions=["e001", "e002"])
        for probe in probes:
            for g in gallery:
                result = match_ensembles(probe, g, idx)
                for pair, m in zip(result.correspondence.pairs, result.per_pair):
                    m_star = exact_path_oracle(pair.a.vector, pair.b.vector, model)
                    direct = float(
                        np.sqrt(np.sum((pair.a.vector - pair.b.vector) ** 2))
                    )
                    total += 1
                    if m < m_star:
                        violations += 1
                    if abs(m - m_star) <= 1e-9:
                        equal += 1
                    if m > direct:
                        above_direct += 1

    ok = total >= 1000 and violations == 0 and equal / total >= 0.80 and above_direct == 0
    report(
        3,
        "heuristic-vs-oracle bounds",
        ok,
        f"pairs={total} violations={violations} equal={equal} ({100 * equal / total:.1f}%) "
        f"above-direct={above_direct}",
    )


def test_criterion_04_rigid_fit_oracle():
    rng = np.random.default_rng(106)
    worst_r = worst_t = 0.0
    invariant_ok = True
    for _ in range(200):
        points = rng.uniform(-50.0, 50.0, size=(20, 3))
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] *= -1
        translation = rng.uniform(-20.0, 20.0, size=3)
        transformed = points @ q.T + translation
        got = rigid_fit(list(zip(points, transformed)))
        worst_r = max(worst_r, float(np.linalg.norm(got.rotation - q)))
        worst_t = max(worst_t, float(np.linalg.norm(got.translation - translation)))
        ortho = float(np.max(np.abs(got.rotation.T @ got.rotation - np.eye(3))))
        det = abs(float(np.linalg.det(got.rotation)) - 1.0)
        invariant_ok = invariant_ok and ortho <= 1e-9 and det <= 1e-9

    ok = worst_r <= 1e-6 and worst_t <= 1e-6 and invariant_ok
    report(
        4,
        "rigid-fit recovery",
        ok,
        f"200 transforms: worst |dR|={worst_r:.2e} worst |dt|={worst_t:.2e} "
        f"invariants={'ok' if invariant_ok else 'violated'}",
    )


def test_criterion_05_spectral_partitioning():
    lambda_ok = True
    for n in range(3, 11):
        verts = [make_descriptor([float(i)], d_id=f"v{i}") for i in range(n)]
        edges = [(i, j, 1.0) for i, j in itertools.combinations(range(n), 2)]
        g = WeightedGraph(tuple(verts), tuple(edges))
        lambda_ok = lambda_ok and abs(fiedler_value(g) - n) <= 1e-9
        lap = g.laplacian()
        lambda_ok = lambda_ok and float(np.max(np.abs(lap.sum(axis=1)))) <= 1e-9

    rng = np.random.default_rng(107)
    splits_ok = 0
    for _ in range(100):
        order = rng.permutation(8)
        verts = [make_descriptor([float(i)], d_id=f"v{i}") for i in range(8)]
        pos = {int(label): i for i, label in enumerate(order)}
        edges = []
        for group in (range(4), range(4, 8)):
            for i, j in itertools.combinations(group, 2):
                edges.append((pos[i], pos[j], 1.0))
        edges.append((pos[0], pos[4], 0.01))
        g = WeightedGraph(tuple(verts), tuple(edges))
        a, b = fiedler_bipartition(g)
        got = {
            frozenset(d.descriptor_id for d in a),
            frozenset(d.descriptor_id for d in b),
        }
        want = {
            frozenset(verts[pos[i]].descriptor_id for i in range(4)),
            frozenset(verts[pos[i]].descriptor_id for i in range(4, 8)),
        }
        splits_ok += got == want

    ok = lambda_ok and splits_ok == 100
    report(
        5,
        "spectral partitioning",
        ok,
        f"K_n connectivity within 1e-9 for n=3..10: {lambda_ok}; "
        f"weak-edge splits {splits_ok}/100",
    )


def test_criterion_06_index_exactness():
    rng = np.random.default_rng(108)
    points = rng.normal(size=(10_000, 20))
    members = [
        (f"d{i:05d}", "En", points[i], True) for i in range(len(points))
    ]
    spec = [("C", [(f"q{i:05d}", [members[i]]) for i in range(len(points))])]
    model = toy_model(spec, [], dim=20)
    idx = build_index(model)

    mismatches = 0
    for q in rng.normal(size=(100, 20)):
        pos, _ = idx.knn(q, 5)
        if list(pos) != list(brute_knn(q, points, 5)):
            mismatches += 1

    ok = mismatches == 0
    report(6, "index exactness vs brute force", ok, f"100 queries, {mismatches} mismatches")


def test_criterion_07_equivalence_set_recovery():
    config = WorldConfig(n_identities=8, n_expressions=4, n_keypoints=10)
    collections, truth = generate_world(config, seed=109)
    clean = partition_quality(build_model(collections, BuildParams()).equivalence_sets, truth)

    noisy_config = WorldConfig(
        n_identities=8,
        n_expressions=4,
        n_keypoints=10,
        noise_sigma=0.05,  # 0.05x the identity separation
        dropout=0.10,
    )
    noisy_collections, noisy_truth = generate_world(noisy_config, seed=110)
    noisy = partition_quality(
        build_model(noisy_collections, BuildParams()).equivalence_sets, noisy_truth
    )

    ok = clean >= 0.99 and noisy >= 0.90
    report(
        7,
        "equivalence-set recovery",
        ok,
        f"noiseless purity={clean:.4f} (>=0.99); noisy+dropout purity={noisy:.4f} (>=0.90)",
    )


def test_criterion_08_determinism_and_persistence(tmp_path):
    config = WorldConfig(n_identities=5, n_expressions=3, n_keypoints=8, noise_sigma=0.02)
    collections, truth = generate_world(config, seed=111)
    world = tmp_path / "world.jsonl"
    write_descriptor_records(world, [e for c in collections for e in c.ensembles])

    outputs = []
    for name in ("m1.eqg", "m2.eqg"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "eqgraph", "build", "--train", str(world), "--out", str(out)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        outputs.append(out.read_bytes())
    builds_identical = outputs[0] == outputs[1]

    model = build_model(collections, BuildParams())
    probes = generate_probe_ensembles(truth, seed=112, expressions=["e001"])
    gallery = [c.ensembles[0] for c in collections]
    before = dissimilarity_matrix(probes, gallery, model)
    path = tmp_path / "direct.eqg"
    save_model(model, path)
    after = dissimilarity_matrix(probes, gallery, load_model(path))
    round_trip_identical = bool(np.array_equal(before, after))

    ok = builds_identical and round_trip_identical
    report(
        8,
        "determinism and persistence",
        ok,
        f"CLI builds byte-identical={builds_identical}; "
        f"save/load matrix bit-identical={round_trip_identical}",
    )


def test_criterion_09_monotone_refinement():
    config = WorldConfig(
        n_identities=10, n_expressions=4, n_keypoints=8, noise_sigma=0.05
    )
    collections, truth = generate_world(config, seed=113)
    model = build_model(collections, BuildParams())
    idx = build_index(model)
    gallery = [c.ensembles[0] for c in collections]
    probes = generate_probe_ensembles(truth, seed=114, expressions=["e001"])

    matches = 0
    violations = 0
    for probe in probes:
        for g in gallery:
            if matches >= 100:
                break
            cset = correspond_ensembles(probe, g, model.params.correspondence)
            _, traces = refine_assignments(probe, g, cset, idx, MatchParams())
            matches += 1
            for trace in traces:
                finite = [v for v in trace if np.isfinite(v)]
                violations += sum(b > a for a, b in zip(finite, finite[1:]))

    ok = matches >= 100 and violations == 0
    report(
        9,
        "monotone refinement traces",
        ok,
        f"matches={matches} trace increases={violations}",
    )


def test_criterion_10_evaluation_sanity():
    rng = np.random.default_rng(115)
    n = 12
    scores = rng.uniform(size=(n, n))
    subjects = tuple(f"s{i}" for i in range(n))
    lm = LabeledMatrix(scores, subjects, subjects)
    rates = cmc_curve(lm, n)
    cmc_ok = all(b >= a for a, b in zip(rates, rates[1:])) and rates[-1] == 1.0

    # hand-computed 2-genuine/2-impostor example
    hand = LabeledMatrix(np.array([[0.1, 0.3], [0.9, 0.4]]), ("a", "b"), ("a", "b"))
    curve = roc_curve(hand)
    point_ok = any(far == 0.5 and vr == 0.5 for far, vr in curve)
    vr_ok = (
        vr_at_far(curve, 0.25) == 0.5
        and vr_at_far(curve, 0.5) == 1.0
        and vr_at_far(np.array([[0.0, 0.5], [0.001, 0.97]]), 0.001) == 0.97
    )

    ok = cmc_ok and point_ok and vr_ok
    report(
        10,
        "evaluation sanity",
        ok,
        f"CMC monotone+final-1={cmc_ok}; threshold-0.3 point={point_ok}; "
        f"vr_at_far conventions={vr_ok}",
    )
