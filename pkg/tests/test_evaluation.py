"""Metric, benchmark, ROI, and motion-study tests."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose, assert_array_equal

from svrkit.acquisition import PairSet, ParamRanges, SliceProtocol, synthesize_pair
from svrkit.dataio import Volume, make_phantom, make_phantom_series
from svrkit.evaluation import (
    EvalReport,
    PairResult,
    benchmark_runtime,
    count_parameters,
    evaluate,
    motion_study,
    pick_rois,
    plot_study,
    predict_for_pairs,
    select_reference_frames,
)
from svrkit.network import SliceToVolumeRegressor, desk_scale_config

DESK_PROTOCOL = SliceProtocol(24, 6)


def small_pair_set(n_refs: int = 2, n_pairs: int = 5, seed0: int = 0) -> PairSet:
    refs = {
        f"phantom-{s:04d}": make_phantom((24, 32, 32), s)
        for s in range(seed0, seed0 + n_refs)
    }
    ref_list = list(refs.values())
    pairs = [
        synthesize_pair(
            ref_list[i % n_refs], DESK_PROTOCOL, ParamRanges(),
            seed=seed0 + 7000 + i, pair_id=f"ev-{i:04d}",
        )
        for i in range(n_pairs)
    ]
    return PairSet(pairs, refs)


def drifting_series(seed: int, length: int, smooth_sigma: float = 2.5):
    return make_phantom_series(
        (24, 32, 32), seed, length, drift_amplitude=0.04, smooth_sigma=smooth_sigma
    )


class TestEvaluate:
    def test_oracle_scores_zero(self):
        pairs = small_pair_set()
        report = evaluate("oracle", pairs)
        for row in report.rows:
            assert row.d_reg_mm == 0.0
            assert row.e_rot_mse_deg2 == 0.0
            assert row.e_tr_mse_mm2 == 0.0
            assert row.d_init_mm > 0.0

    def test_identity_reproduces_initial_distance_exactly(self):
        pairs = small_pair_set(seed0=5)
        report = evaluate("identity", pairs)
        for row, pair in zip(report.rows, pairs.pairs):
            assert row.d_reg_mm == pair.d_init_mm

    def test_aggregates_recomputable_from_rows(self):
        pairs = small_pair_set(seed0=9)
        report = evaluate("identity", pairs)
        agg = report.aggregate()
        for metric, (mean, std) in agg.items():
            vals = np.array([getattr(r, metric) for r in report.rows])
            assert mean == pytest.approx(float(vals.mean()), abs=1e-9)
            assert std == pytest.approx(float(vals.std()), abs=1e-9)

    def test_aggregate_permutation_invariant(self):
        pairs = small_pair_set(seed0=11)
        report = evaluate("identity", pairs)
        shuffled = EvalReport(
            report.model_id, report.dataset_id, list(reversed(report.rows))
        )
        for metric, (mean, std) in report.aggregate().items():
            other = shuffled.aggregate()[metric]
            assert mean == pytest.approx(other[0], abs=1e-12)
            assert std == pytest.approx(other[1], abs=1e-12)

    def test_rmse_properties(self):
        row = PairResult("p", 1.0, 2.0, 0.49, 0.0016)
        assert row.e_rot_deg == pytest.approx(0.7, rel=1e-12)
        assert row.e_tr_mm == pytest.approx(0.04, rel=1e-12)

    def test_nonzero_model_errors_are_nonnegative(self):
        pairs = small_pair_set(seed0=13)
        torch.manual_seed(0)
        model = SliceToVolumeRegressor(desk_scale_config())
        with torch.no_grad():
            model.head.bias.copy_(torch.tensor([0.5, -0.2, 0.1, 1.0, -1.0, 0.5]))
        report = evaluate(model, pairs)
        for row in report.rows:
            assert row.d_reg_mm > 0.0
            assert row.e_rot_mse_deg2 > 0.0
            assert row.e_tr_mse_mm2 > 0.0

    def test_unknown_mode_rejected(self):
        pairs = small_pair_set(seed0=17)
        with pytest.raises(ValueError, match="predictor mode"):
            evaluate("best-effort", pairs)

    def test_model_shape_mismatch_rejected(self):
        pairs = small_pair_set(seed0=19)
        from svrkit.network import full_scale_config

        torch.manual_seed(0)
        model = SliceToVolumeRegressor(full_scale_config())
        with pytest.raises(ValueError, match="volume shape"):
            evaluate(model, pairs)

    def test_values_unknown_metric(self):
        report = evaluate("identity", small_pair_set(seed0=21))
        with pytest.raises(KeyError):
            report.values("sharpness")


class TestReportCsv:
    def test_layout_and_roundtrip(self, tmp_path):
        pairs = small_pair_set(seed0=23)
        report = evaluate("identity", pairs, model_id="idm", dataset_id="tiny")
        paths = report.to_csv(tmp_path)
        pair_lines = paths[0].read_text().splitlines()
        assert pair_lines[0] == EvalReport.PAIRS_HEADER
        assert len(pair_lines) == 1 + len(report.rows)
        first = pair_lines[1].split(",")
        assert first[0] == report.rows[0].pair_id
        assert float(first[2]) == pytest.approx(report.rows[0].d_reg_mm, abs=1e-6)
        summary_lines = paths[1].read_text().splitlines()
        assert summary_lines[0] == EvalReport.SUMMARY_HEADER
        assert len(summary_lines) == 7  # six metrics
        assert summary_lines[1].startswith("idm,tiny,")

    def test_emission_deterministic(self, tmp_path):
        pairs = small_pair_set(seed0=27)
        report = evaluate("oracle", pairs)
        a = report.to_csv(tmp_path / "a")
        b = report.to_csv(tmp_path / "b")
        assert a[0].read_bytes() == b[0].read_bytes()
        assert a[1].read_bytes() == b[1].read_bytes()


class TestRuntime:
    def test_single_repetition_rejected(self):
        pairs = small_pair_set(seed0=29, n_pairs=2)
        torch.manual_seed(0)
        model = SliceToVolumeRegressor(desk_scale_config())
        with pytest.raises(ValueError, match="at least 2"):
            benchmark_runtime(model, pairs, repetitions=1)

    def test_statistics_consistent(self):
        pairs = small_pair_set(seed0=31, n_pairs=3)
        torch.manual_seed(0)
        model = SliceToVolumeRegressor(desk_scale_config())
        stats = benchmark_runtime(model, pairs, repetitions=5)
        assert stats.repetitions == 5
        assert len(stats.times_s) == 5
        assert stats.mean_s == pytest.approx(float(np.mean(stats.times_s)), rel=1e-9)
        assert stats.median_s == pytest.approx(float(np.median(stats.times_s)), rel=1e-9)
        assert stats.min_s <= stats.median_s <= stats.max_s
        # desk-scale forward stays comfortably under a second on CPU
        assert stats.median_s < 1.0


class TestCountParameters:
    def test_small_conv_closed_form(self):
        conv = torch.nn.Conv2d(2, 4, kernel_size=3, bias=True)
        assert count_parameters(conv) == 2 * 4 * 9 + 4

    def test_attention_adds_weights(self):
        torch.manual_seed(0)
        with_scores = SliceToVolumeRegressor(desk_scale_config(use_attention=True))
        without = SliceToVolumeRegressor(desk_scale_config(use_attention=False))
        assert count_parameters(without) < count_parameters(with_scores)


class TestSelectReferenceFrames:
    def test_all_identity_stable_order(self):
        frames = [np.eye(4)] * 5
        assert select_reference_frames(frames, 3) == [0, 1, 2]

    def test_corrupted_frame_excluded(self):
        frames = [np.eye(4) for _ in range(6)]
        bad = np.eye(4)
        bad[0, 3] = 50.0
        frames[2] = bad
        chosen = select_reference_frames(frames, 5)
        assert 2 not in chosen

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(0)
        frames = []
        for _ in range(12):
            m = np.eye(4)
            m[:3, :3] += rng.normal(scale=0.05, size=(3, 3))
            m[:3, 3] = rng.normal(scale=3.0, size=3)
            frames.append(m)
        want = [
            i
            for i, _ in sorted(
                enumerate(frames),
                key=lambda iv: (float(np.sqrt(((iv[1] - np.eye(4)) ** 2).sum())), iv[0]),
            )
        ][:4]
        assert select_reference_frames(frames, 4) == want

    def test_count_validation(self):
        frames = [np.eye(4)] * 3
        with pytest.raises(ValueError, match="exceeds"):
            select_reference_frames(frames, 4)
        with pytest.raises(ValueError, match="positive"):
            select_reference_frames(frames, 0)


class TestPickRois:
    def test_boxes_fit_interior_and_disjoint(self):
        vol = make_phantom((24, 32, 32), 3)
        rois = pick_rois(vol, count=2, box=6)
        dims = (24, 32, 32)
        margins = tuple(d // 4 for d in dims)
        for roi in rois:
            for (lo, hi), dim, mar in zip(roi, dims, margins):
                assert hi - lo == 6
                assert lo >= mar
                assert hi <= dim - mar
        (a, b) = rois
        overlap = all(a[k][0] < b[k][1] and b[k][0] < a[k][1] for k in range(3))
        assert not overlap

    def test_deterministic(self):
        vol = make_phantom((24, 32, 32), 4)
        assert pick_rois(vol) == pick_rois(vol)

    def test_too_small_volume_rejected(self):
        vol = make_phantom((8, 8, 8), 0)
        with pytest.raises(ValueError, match="does not fit"):
            pick_rois(vol, box=6)


class TestMotionStudy:
    def test_oracle_round_trip_close_to_motion_free(self):
        series = drifting_series(40, 6)
        study = motion_study(series, "oracle", rng_seed=2)
        worst = max(
            float(np.abs(f - a).max()) for f, a in zip(study.free, study.after)
        )
        assert worst < 0.02
        assert study.variance_reduction_fraction() > 0.9

    def test_identity_leaves_corruption_in_place(self):
        series = drifting_series(41, 5)
        study = motion_study(series, "identity", rng_seed=3)
        for br, ar in zip(study.before, study.after):
            assert_array_equal(br, ar)
        assert study.variance_reduction_fraction() == 0.0

    def test_shapes_and_determinism(self):
        series = drifting_series(42, 4)
        study = motion_study(series, "oracle", rng_seed=5)
        assert study.n_frames == 4
        assert study.params_true.shape == (4, 6)
        assert study.params_pred.shape == (4, 6)
        # frames get independent motion draws
        assert not np.allclose(study.params_true[0], study.params_true[1])
        again = motion_study(series, "oracle", rng_seed=5)
        for a, b in zip(study.after, again.after):
            assert_array_equal(a, b)

    def test_artifacts_written(self, tmp_path):
        series = drifting_series(43, 4)
        study = motion_study(series, "oracle", rng_seed=7, out_dir=tmp_path / "run")
        run = tmp_path / "run"
        assert (run / "roi0_series.csv").exists()
        assert (run / "roi1_series.csv").exists()
        assert (run / "roi0_timecourses.png").exists()
        summary = json.loads((run / "study_summary.json").read_text())
        assert summary["n_frames"] == 4
        assert summary["predictor"] == "oracle"
        assert summary["variance_reduction_fraction"] == pytest.approx(
            study.variance_reduction_fraction(), abs=1e-6
        )
        header = (run / "roi0_series.csv").read_text().splitlines()[0]
        assert header == "frame,voxel,free,before,after"

    def test_csv_emission_deterministic(self, tmp_path):
        series = drifting_series(44, 3)
        motion_study(series, "oracle", rng_seed=9, out_dir=tmp_path / "a")
        motion_study(series, "oracle", rng_seed=9, out_dir=tmp_path / "b")
        for name in ("roi0_series.csv", "roi1_series.csv", "study_summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_input_validation(self):
        series = drifting_series(45, 3)
        with pytest.raises(ValueError, match="non-empty"):
            motion_study([], "oracle")
        with pytest.raises(ValueError, match="reference index"):
            motion_study(series, "oracle", reference_index=3)
        odd = make_phantom((16, 16, 16), 0)
        with pytest.raises(ValueError, match="one geometry"):
            motion_study(series + [odd], "oracle")


class TestPredictForPairs:
    def test_identity_and_oracle_shapes(self):
        pairs = small_pair_set(seed0=33, n_pairs=3)
        ident = predict_for_pairs("identity", pairs)
        assert ident.shape == (3, 6)
        assert np.all(ident == 0.0)
        oracle = predict_for_pairs("oracle", pairs)
        truth = np.stack([p.params.as_array() for p in pairs.pairs])
        assert_array_equal(oracle, truth)
