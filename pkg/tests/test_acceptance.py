"""Acceptance gate: one test per release criterion, each printing a pass/fail
line with its runtime against the stated budget.

Run with `pytest tests/test_acceptance.py -v -s`.
"""

import math
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import center_scorer, make_separable_patches


@contextmanager
def criterion(name, budget_s):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {name}: FAIL", file=sys.stderr)
        raise
    elapsed = time.perf_counter() - start
    print(f"ACCEPTANCE {name}: PASS ({elapsed:.2f}s, budget {budget_s}s)")
    assert elapsed < budget_s, f"{name} exceeded its {budget_s}s budget ({elapsed:.1f}s)"


def test_f1_spot_values():
    from mitodet.evaluation import f1_score

    with criterion("f1-spot-values", 1.0):
        breast = f1_score(0.82, 0.88)
        assert abs(breast - 0.849) <= 0.005
        assert round(breast, 2) == 0.85
        melanoma = f1_score(0.83, 0.84)
        assert abs(melanoma - 0.835) <= 0.005


def test_filter_chain_constants():
    from mitodet.proposal import ProposalFilterConfig, filter_proposals

    from test_proposal import proposal_with

    with criterion("filter-chain-constants", 1.0):
        config = ProposalFilterConfig()
        # exactly 0.8 on either quality score: dropped (strict inequality)
        assert filter_proposals([proposal_with(predicted_iou=0.8, n_px=100)], config) == []
        assert filter_proposals([proposal_with(stability=0.8, n_px=100)], config) == []
        assert len(filter_proposals([proposal_with(predicted_iou=0.8001, n_px=100)], config)) == 1
        # area bounds at mpp 0.25: 36 px (2.25 um^2) and 3600 px (225 um^2) kept
        assert len(filter_proposals([proposal_with(n_px=36)], config)) == 1
        assert len(filter_proposals([proposal_with(n_px=3600)], config)) == 1
        # one pixel outside either bound: dropped
        assert filter_proposals([proposal_with(n_px=35)], config) == []
        assert filter_proposals([proposal_with(n_px=3601)], config) == []


def test_nms_and_dedupe_match_brute_force():
    from mitodet.core import Detection
    from mitodet.pipeline import dedupe
    from mitodet.proposal import nms

    from test_proposal import random_blob_proposal, reference_nms

    with criterion("nms-dedupe-oracles", 10.0):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            proposals = [random_blob_proposal(rng) for _ in range(int(rng.integers(2, 51)))]
            ours = {id(p) for p in nms(proposals, 0.5)}
            assert ours == {id(proposals[i]) for i in reference_nms(proposals, 0.5)}

        for seed in range(100):
            rng = np.random.default_rng(10_000 + seed)
            n = int(rng.integers(1, 51))
            centers = rng.random((max(1, n // 5), 2)) * 100
            detections = []
            for _ in range(n):
                c = centers[int(rng.integers(0, len(centers)))]
                xy = c + rng.normal(0, 4, size=2)
                detections.append(
                    Detection(
                        centroid_um=(float(xy[0]), float(xy[1])),
                        score=float(rng.random()),
                    )
                )
            order = sorted(
                range(len(detections)),
                key=lambda i: (-detections[i].score, detections[i].centroid_um),
            )
            kept_ref = []
            for i in order:
                xi, yi = detections[i].centroid_um
                if all(
                    (xi - detections[j].centroid_um[0]) ** 2
                    + (yi - detections[j].centroid_um[1]) ** 2
                    >= 7.5**2
                    for j in kept_ref
                ):
                    kept_ref.append(i)
            assert {id(d) for d in dedupe(detections, 7.5)} == {
                id(detections[i]) for i in kept_ref
            }


def test_matching_and_metrics_oracle():
    from mitodet.evaluation import match

    from test_eval import count_maximum_matchings, detector_instance, max_bipartite_tp

    with criterion("matching-oracle", 30.0):
        unique_seen = 0
        for seed in range(200):
            detections, truths = detector_instance(seed, radius=7.5)
            result = match(detections, truths, 7.5)
            assert result.n_tp + result.n_fp == len(detections)
            assert result.n_tp + result.n_fn == len(truths)
            assert result.n_tp == len(result.pairs)
            optimal = max_bipartite_tp(detections, truths, 7.5)
            adj = [
                [
                    j
                    for j, t in enumerate(truths)
                    if math.hypot(
                        d.centroid_um[0] - t[0], d.centroid_um[1] - t[1]
                    )
                    <= 7.5
                ]
                for d in detections
            ]
            if count_maximum_matchings(adj, len(detections), optimal) == 1:
                unique_seen += 1
                assert result.n_tp == optimal, f"seed {seed}"
        assert unique_seen >= 100


def test_mann_whitney_exact_and_identity():
    from mitodet.evaluation import UMethod, mann_whitney_u

    from test_eval import u_distribution

    with criterion("mann-whitney-oracle", 30.0):
        rng = np.random.default_rng(99)
        cases = 0
        while cases < 200:
            n = int(rng.integers(1, 9))
            m = int(rng.integers(1, 9))
            if n + m > 10:
                continue
            values = rng.choice(100_000, size=n + m, replace=False).astype(float)
            a, b = values[:n].tolist(), values[n:].tolist()
            result = mann_whitney_u(a, b)
            assert result.method == UMethod.EXACT
            dist = u_distribution(n, m)
            total = sum(dist.values())
            le = sum(c for u, c in dist.items() if u <= result.u_statistic)
            ge = sum(c for u, c in dist.items() if u >= result.u_statistic)
            assert result.p_value == pytest.approx(min(1.0, 2.0 * min(le, ge) / total))
            # identity holds on every case, ties or not
            u_ba = mann_whitney_u(b, a).u_statistic
            assert result.u_statistic + u_ba == pytest.approx(n * m)
            cases += 1
        for _ in range(50):
            n = int(rng.integers(1, 20))
            m = int(rng.integers(1, 20))
            a = rng.integers(0, 5, size=n).astype(float).tolist()
            b = rng.integers(0, 5, size=m).astype(float).tolist()
            u_ab = mann_whitney_u(a, b).u_statistic
            u_ba = mann_whitney_u(b, a).u_statistic
            assert u_ab + u_ba == pytest.approx(n * m)


def test_stain_round_trip_and_monte_carlo():
    from mitodet.stain import (
        AugmentConfig,
        deconvolve,
        default_basis,
        perturb_concentrations,
        reconstruct,
    )

    from test_stain import random_unit_basis

    with criterion("stain-round-trip", 10.0):
        rng = np.random.default_rng(0)
        for seed in range(10):
            basis = random_unit_basis(seed)
            od = rng.uniform(0, 3, size=(16, 16, 3))
            assert np.abs(reconstruct(deconvolve(od, basis), basis) - od).max() < 1e-6
        basis = default_basis()
        od = rng.uniform(0, 3, size=(16, 16, 3))
        assert np.abs(reconstruct(deconvolve(od, basis), basis) - od).max() < 1e-6

        config = AugmentConfig(sigma=0.0)
        conc = rng.normal(size=(32, 3))
        assert np.array_equal(
            perturb_concentrations(conc, config, config.make_rng()), conc
        )

        config = AugmentConfig(sigma=0.14, shift_jitter=False, rng_seed=5)
        stream = config.make_rng()
        ones = np.ones(3)
        draws = np.concatenate(
            [perturb_concentrations(ones, config, stream) for _ in range(33_400)]
        )
        assert draws.size >= 100_000
        assert draws.min() >= 0.86 and draws.max() <= 1.14
        assert abs(draws.mean() - 1.0) < 0.01


def test_ransac_recovery_twenty_seeds():
    from mitodet.ihc import AffineTransform, RansacConfig, ransac_fit

    with criterion("ransac-recovery", 30.0):
        truth = AffineTransform.similarity(1.02, np.deg2rad(10.0), 40.0, -15.0)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            src = rng.random((100, 2)) * 500.0
            dst = truth.apply(src)
            out_idx = rng.permutation(100)[:30]
            dst[out_idx] = rng.random((30, 2)) * 500.0
            fit, _ = ransac_fit(src, dst, RansacConfig(rng_seed=seed))
            clean = np.setdiff1d(np.arange(100), out_idx)
            rms = np.sqrt(
                np.mean(np.sum((fit.apply(src[clean]) - dst[clean]) ** 2, axis=1))
            )
            assert rms <= 1e-2, f"seed {seed}: {rms}"


def test_mask_injection_identity_and_gradient():
    import torch

    from mitodet.classifier import build_model

    from test_classifier import TestModel, small_batch

    with criterion("mask-injection-identity", 60.0):
        torch.manual_seed(0)
        model = build_model(64).model
        model.eval()
        rgb, mask = small_batch(n=4)
        with torch.no_grad():
            assert torch.equal(model(rgb, mask), model(rgb, None))

        torch.manual_seed(1)
        fd_model = build_model(64).model.double()
        torch.nn.init.normal_(fd_model.mask_encoder.weight, std=0.05)
        fd_model.eval()
        rgb64, mask64 = rgb.double(), mask.double()
        labels = torch.tensor([0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
        checker = TestModel()
        checker._fd_check(fd_model.mask_encoder.weight, fd_model, rgb64, mask64, labels)
        checker._fd_check(fd_model.backbone.conv1.weight, fd_model, rgb64, mask64, labels)


def test_training_smoke_two_seeds():
    from mitodet.classifier import TrainConfig, split_ids, train

    with criterion("training-smoke", 300.0):
        patches = make_separable_patches(100, seed=1234)  # 200 items
        config = TrainConfig(
            epochs=5,
            batch_size=16,
            micro_batch_size=16,
            seeds=(0, 1),
            patch_size_px=64,
        )
        handles = train(config, patches)
        for handle in handles:
            best = max(e["val_accuracy"] for e in handle.history)
            assert best >= 0.95, f"seed {handle.seed} best acc {best}"
        ids = [p.id for p in patches]
        for seed in (0, 1):
            assert split_ids(ids, seed, 0.1) == split_ids(ids, seed, 0.1)
        assert split_ids(ids, 0, 0.1) != split_ids(ids, 1, 0.1)


def test_end_to_end_planted_objects():
    from mitodet.evaluation import match, precision_recall_f1
    from mitodet.pipeline import run_roi
    from mitodet.proposal import StubBackend

    from test_pipeline import DISKS, planted_roi

    with criterion("end-to-end-planted", 120.0):
        roi, grid = planted_roi()
        detections = run_roi(roi, grid, StubBackend(), center_scorer)
        truths = [(x * 0.25, y * 0.25) for x, y in DISKS]
        result = match(detections, truths, radius_um=7.5)
        precision, recall, _ = precision_recall_f1(result)
        assert precision == 1.0 and recall == 1.0
        seam_um = (1024 * 0.25, 700 * 0.25)
        close = [
            d
            for d in detections
            if math.hypot(d.centroid_um[0] - seam_um[0], d.centroid_um[1] - seam_um[1])
            <= 7.5
        ]
        assert len(close) == 1


def test_event_replay_and_curation_conservation(tmp_path):
    from mitodet.proposal import StubBackend
    from mitodet.review import ReviewStore, Verdict

    from test_curation import TestStandardize
    from test_review import SENIORS, candidate, fresh_store

    with criterion("replay-and-conservation", 30.0):
        store = fresh_store(tmp_path / "store")
        tasks = store.enqueue([candidate(k) for k in range(12)], seed=7)
        for task in tasks[:5]:
            store.submit_label(task.task_id, task.assigned_to, Verdict.MF)
        for task in tasks[5:8]:
            store.submit_label(task.task_id, task.assigned_to, Verdict.NOT_MF)
        store.submit_label(tasks[8].task_id, tasks[8].assigned_to, Verdict.UNCERTAIN)
        store.submit_label(tasks[8].task_id, SENIORS[0], Verdict.MF)
        store.submit_label(tasks[8].task_id, SENIORS[1], Verdict.NOT_MF)
        store.close()
        replayed = ReviewStore(tmp_path / "store")
        assert set(replayed.tasks) == set(store.tasks)
        for task_id, task in store.tasks.items():
            other = replayed.tasks[task_id]
            assert (other.status, other.resolved_verdict, other.assigned_to) == (
                task.status,
                task.resolved_verdict,
                task.assigned_to,
            )
            assert [e.to_json() for e in other.labels] == [e.to_json() for e in task.labels]
        assert [r.id for r in replayed.export_training()] == [
            r.id for r in store.export_training()
        ]

        # curation conservation on fuzzed runs
        TestStandardize().test_conservation_fuzz()
