"""Accuracy metrics, runtime measurement, and the motion-correction study.

``evaluate`` scores a pose predictor over a pair set: residual grid distance
after alignment, per-component pose errors, and the initial displacement for
reference.  ``motion_study`` runs the closed loop on a drifting volume
series: corrupt each frame with sampled motion, predict the transform,
resample back through the inverted prediction, and compare voxel time
courses inside fixed regions before and after correction.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from svrkit.acquisition import (
    PairSet,
    ParamRanges,
    SliceProtocol,
    pair_seed,
    synthesize_pair,
)
from svrkit.dataio import Volume
from svrkit.geometry import (
    RigidParams,
    grid_distance,
    invert,
    make_grid,
    resample,
    rigid_about,
)
from svrkit.network import SliceToVolumeRegressor, count_parameters
from svrkit.training import predict_params

__all__ = [
    "PairResult",
    "EvalReport",
    "RuntimeStats",
    "TimeSeriesStudy",
    "evaluate",
    "predict_for_pairs",
    "benchmark_runtime",
    "count_parameters",
    "motion_study",
    "plot_study",
    "pick_rois",
    "select_reference_frames",
]

# per-pair metrics, in report column order
_METRICS = ("d_init_mm", "d_reg_mm", "e_rot_deg", "e_tr_mm", "e_rot_mse_deg2", "e_tr_mse_mm2")


@dataclass(frozen=True)
class PairResult:
    """Alignment errors for one stack/volume pair."""

    pair_id: str
    d_init_mm: float
    d_reg_mm: float
    e_rot_mse_deg2: float
    e_tr_mse_mm2: float

    @property
    def e_rot_deg(self) -> float:
        return math.sqrt(self.e_rot_mse_deg2)

    @property
    def e_tr_mm(self) -> float:
        return math.sqrt(self.e_tr_mse_mm2)


@dataclass
class EvalReport:
    """Per-pair rows plus aggregates; the aggregates are always derivable
    from the rows, never stored separately."""

    model_id: str
    dataset_id: str
    rows: list[PairResult]

    PAIRS_HEADER = "pair_id,d_init_mm,d_reg_mm,e_rot_deg,e_tr_mm,e_rot_mse_deg2,e_tr_mse_mm2"
    SUMMARY_HEADER = "model,dataset,metric,mean,std"

    def values(self, metric: str) -> np.ndarray:
        if metric not in _METRICS:
            raise KeyError(f"unknown metric {metric!r}, want one of {_METRICS}")
        return np.array([getattr(r, metric) for r in self.rows], dtype=np.float64)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """{metric: (mean, population std)} over pairs."""
        out = {}
        for metric in _METRICS:
            vals = self.values(metric)
            out[metric] = (float(vals.mean()), float(vals.std()))
        return out

    def to_csv(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        pair_lines = [self.PAIRS_HEADER]
        for r in self.rows:
            pair_lines.append(
                f"{r.pair_id},{r.d_init_mm:.6f},{r.d_reg_mm:.6f},"
                f"{r.e_rot_deg:.6f},{r.e_tr_mm:.6f},"
                f"{r.e_rot_mse_deg2:.6f},{r.e_tr_mse_mm2:.6f}"
            )
        pairs_path = out_dir / "pairs.csv"
        pairs_path.write_text("\n".join(pair_lines) + "\n")

        summary_lines = [self.SUMMARY_HEADER]
        for metric, (mean, std) in self.aggregate().items():
            summary_lines.append(
                f"{self.model_id},{self.dataset_id},{metric},{mean:.6f},{std:.6f}"
            )
        summary_path = out_dir / "summary.csv"
        summary_path.write_text("\n".join(summary_lines) + "\n")
        return [pairs_path, summary_path]


def _check_model_fits(model: SliceToVolumeRegressor, pair_set: PairSet) -> None:
    geom = pair_set.geometry
    if tuple(model.config.volume_shape) != tuple(geom.shape):
        raise ValueError(
            f"model expects volume shape {model.config.volume_shape} "
            f"but the data is {geom.shape}"
        )
    stack_k = pair_set.pairs[0].stack.data.shape[0]
    if stack_k != model.config.stack_slices:
        raise ValueError(
            f"model expects {model.config.stack_slices} stack slices, data has {stack_k}"
        )


def predict_for_pairs(
    model: SliceToVolumeRegressor | str, pair_set: PairSet
) -> np.ndarray:
    """``(n, 6)`` predicted parameters for every pair.

    ``model`` is either a network or one of two reference predictors:
    ``"identity"`` (always zero motion) and ``"oracle"`` (the ground truth).
    """
    if isinstance(model, str):
        if model == "identity":
            return np.zeros((len(pair_set), 6), dtype=np.float64)
        if model == "oracle":
            return np.stack([p.params.as_array() for p in pair_set.pairs])
        raise ValueError(f"unknown predictor mode {model!r}")
    _check_model_fits(model, pair_set)
    return predict_params(model, pair_set)


def evaluate(
    model: SliceToVolumeRegressor | str,
    test_set: PairSet,
    model_id: str = "model",
    dataset_id: str = "dataset",
) -> EvalReport:
    """Score a predictor on every pair of ``test_set``.

    Per pair: residual grid distance between true and predicted transforms
    (mm), plus mean squared errors over the angle and translation triples.
    The squared errors are kept alongside their roots so both conventions
    are on record.
    """
    preds = predict_for_pairs(model, test_set)
    geom = test_set.geometry
    grid = make_grid(geom).reshape(-1, 3)
    center = geom.center
    rows = []
    for pair, row in zip(test_set.pairs, preds):
        truth = pair.params.as_array()
        d_reg = grid_distance(
            rigid_about(pair.params, center),
            rigid_about(RigidParams.from_array(row), center),
            grid,
        )
        rows.append(
            PairResult(
                pair_id=pair.pair_id,
                d_init_mm=pair.d_init_mm,
                d_reg_mm=d_reg,
                e_rot_mse_deg2=float(np.mean((truth[:3] - row[:3]) ** 2)),
                e_tr_mse_mm2=float(np.mean((truth[3:] - row[3:]) ** 2)),
            )
        )
    return EvalReport(model_id=model_id, dataset_id=dataset_id, rows=rows)


@dataclass(frozen=True)
class RuntimeStats:
    """Per-forward wall-clock statistics, warm-up excluded."""

    mean_s: float
    median_s: float
    min_s: float
    max_s: float
    repetitions: int
    times_s: tuple[float, ...]


def benchmark_runtime(
    model: SliceToVolumeRegressor, pairs: PairSet, repetitions: int = 20
) -> RuntimeStats:
    """Time single-pair forward passes, cycling through ``pairs``.

    One untimed warm-up forward runs first; statistics cover the
    ``repetitions`` timed passes that follow.
    """
    if repetitions < 2:
        raise ValueError("repetitions must be at least 2")
    _check_model_fits(model, pairs)
    model.eval()
    dtype = next(model.parameters()).dtype
    batches = []
    for i in range(min(len(pairs), repetitions)):
        stacks, volumes, _ = pairs.batch_arrays([i])
        batches.append(
            (torch.from_numpy(stacks).to(dtype), torch.from_numpy(volumes).to(dtype))
        )
    times = []
    with torch.no_grad():
        model(*batches[0])  # warm-up, not timed
        for rep in range(repetitions):
            stack_t, volume_t = batches[rep % len(batches)]
            t0 = time.perf_counter()
            model(stack_t, volume_t)
            times.append(time.perf_counter() - t0)
    return RuntimeStats(
        mean_s=float(np.mean(times)),
        median_s=float(statistics.median(times)),
        min_s=float(min(times)),
        max_s=float(max(times)),
        repetitions=repetitions,
        times_s=tuple(times),
    )


def select_reference_frames(transforms, count: int) -> list[int]:
    """Indices of the ``count`` transforms nearest the identity.

    Distance is the Frobenius norm of ``A - I`` over the full homogeneous
    matrix; ties keep the earlier frame.
    """
    mats = [np.asarray(t, dtype=np.float64) for t in transforms]
    if count < 1:
        raise ValueError("count must be positive")
    if count > len(mats):
        raise ValueError(f"count {count} exceeds series length {len(mats)}")
    for m in mats:
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 transforms, got {m.shape}")
    scores = np.array([float(np.linalg.norm(m - np.eye(4))) for m in mats])
    order = np.argsort(scores, kind="stable")
    return [int(i) for i in order[:count]]


ROIBox = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]


def _roi_slices(roi: ROIBox) -> tuple[slice, slice, slice]:
    return tuple(slice(lo, hi) for lo, hi in roi)


def pick_rois(
    volume: Volume,
    count: int = 2,
    box: int = 6,
    margin: tuple[int, int, int] | None = None,
) -> tuple[ROIBox, ...]:
    """Deterministically place ``count`` non-overlapping boxes on the
    strongest image-gradient regions, where motion shows up most.

    ``margin`` keeps boxes away from the faces; the default quarter-dim band
    keeps every box voxel valid after a worst-case motion round trip, where
    samples near the border would blend with the zero background.
    """
    dims = np.asarray(volume.geometry.shape)
    if margin is None:
        margin = tuple(int(d) // 4 for d in dims)
    margin_arr = np.asarray(margin, dtype=int)
    if np.any(dims - 2 * margin_arr < box):
        raise ValueError(
            f"box {box} with margin {tuple(margin)} does not fit in volume {tuple(dims)}"
        )
    grads = np.gradient(volume.data)
    magnitude = np.sqrt(sum(g**2 for g in grads))
    score = ndimage.gaussian_filter(magnitude, sigma=1.0)
    half = box // 2
    # centers must leave room for the box plus the margin on every side
    lo = margin_arr + half
    hi = dims - margin_arr - (box - half)
    mask = np.zeros_like(score, dtype=bool)
    mask[tuple(slice(a, b + 1) for a, b in zip(lo, hi))] = True
    working = np.where(mask, score, -np.inf)
    order = np.argsort(-working, axis=None, kind="stable")
    rois: list[ROIBox] = []
    for flat in order:
        center = np.unravel_index(int(flat), working.shape)
        if not np.isfinite(working[center]):
            break
        start = np.asarray(center) - half
        candidate = tuple((int(s), int(s + box)) for s in start)
        overlaps = any(
            all(a_lo < b_hi and b_lo < a_hi for (a_lo, a_hi), (b_lo, b_hi) in zip(candidate, other))
            for other in rois
        )
        if not overlaps:
            rois.append(candidate)
            if len(rois) == count:
                return tuple(rois)
    raise ValueError("volume too small for that many disjoint boxes")


@dataclass
class TimeSeriesStudy:
    """Voxel time courses in fixed boxes under three conditions: motion-free,
    motion-corrupted, and corrected by the inverted predicted transform."""

    rois: tuple[ROIBox, ...]
    free: list[np.ndarray]  # per ROI: (n_frames, n_voxels)
    before: list[np.ndarray]
    after: list[np.ndarray]
    params_true: np.ndarray  # (n_frames, 6)
    params_pred: np.ndarray

    def __post_init__(self) -> None:
        lengths = {a.shape[0] for seq in (self.free, self.before, self.after) for a in seq}
        lengths |= {self.params_true.shape[0], self.params_pred.shape[0]}
        if len(lengths) != 1:
            raise ValueError(f"conditions disagree on frame count: {sorted(lengths)}")

    @property
    def n_frames(self) -> int:
        return int(self.params_true.shape[0])

    def variance_reduction_fraction(self) -> float:
        """Fraction of ROI voxels whose temporal variance drops after correction."""
        improved = 0
        total = 0
        for br, ar in zip(self.before, self.after):
            var_br = br.var(axis=0)
            var_ar = ar.var(axis=0)
            improved += int(np.sum(var_ar < var_br))
            total += var_br.size
        return improved / total

    def to_csv(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for j, roi in enumerate(self.rois):
            lines = ["frame,voxel,free,before,after"]
            free, before, after = self.free[j], self.before[j], self.after[j]
            for t in range(free.shape[0]):
                for v in range(free.shape[1]):
                    lines.append(
                        f"{t},{v},{free[t, v]:.6f},{before[t, v]:.6f},{after[t, v]:.6f}"
                    )
            path = out_dir / f"roi{j}_series.csv"
            path.write_text("\n".join(lines) + "\n")
            paths.append(path)
        return paths


def _predict_one(
    model: SliceToVolumeRegressor | str,
    pair,
    reference: Volume,
) -> RigidParams:
    if isinstance(model, str):
        if model == "identity":
            return RigidParams()
        if model == "oracle":
            return pair.params
        raise ValueError(f"unknown predictor mode {model!r}")
    dtype = next(model.parameters()).dtype
    stack_t = torch.from_numpy(pair.stack.data[None]).to(dtype)
    volume_t = torch.from_numpy(reference.data[None]).to(dtype)
    model.eval()
    with torch.no_grad():
        pred, _ = model(stack_t, volume_t)
    return RigidParams.from_array(pred.double().numpy()[0])


def motion_study(
    series: list[Volume],
    model: SliceToVolumeRegressor | str,
    rois: tuple[ROIBox, ...] | None = None,
    rng_seed: int = 0,
    protocol: SliceProtocol | None = None,
    ranges: ParamRanges | None = None,
    reference_index: int = 0,
    out_dir: str | Path | None = None,
) -> TimeSeriesStudy:
    """Corrupt each frame of a motion-free series, predict, correct, record.

    Every frame gets independently sampled rigid motion (seeded from
    ``rng_seed`` and the frame index).  The predictor sees the corrupted
    frame's slice stack plus the fixed reference frame, and the correction
    resamples the corrupted frame through the inverse of the prediction.
    With ``out_dir`` set, per-ROI CSVs, line plots, and a JSON summary are
    written there.
    """
    if not series:
        raise ValueError("series must be non-empty")
    geom = series[0].geometry
    for frame in series:
        if tuple(frame.geometry.shape) != tuple(geom.shape):
            raise ValueError("all frames must share one geometry")
    if not 0 <= reference_index < len(series):
        raise ValueError(f"reference index {reference_index} outside series")
    if protocol is None:
        depth = geom.shape[0]
        protocol = SliceProtocol(depth - depth % 6, 6)
    if ranges is None:
        ranges = ParamRanges()
    if rois is None:
        rois = pick_rois(series[reference_index])

    reference = series[reference_index]
    free = [[] for _ in rois]
    before = [[] for _ in rois]
    after = [[] for _ in rois]
    params_true = []
    params_pred = []
    for t, frame in enumerate(series):
        pair = synthesize_pair(
            frame, protocol, ranges,
            seed=pair_seed(rng_seed, t), pair_id=f"frame-{t:04d}", keep_moved=True,
        )
        pred = _predict_one(model, pair, reference)
        corrected = resample(
            pair.moved.data, invert(rigid_about(pred, geom.center)), geom
        )
        params_true.append(pair.params.as_array())
        params_pred.append(pred.as_array())
        for j, roi in enumerate(rois):
            cut = _roi_slices(roi)
            free[j].append(frame.data[cut].ravel())
            before[j].append(pair.moved.data[cut].ravel())
            after[j].append(corrected[cut].ravel())

    study = TimeSeriesStudy(
        rois=tuple(rois),
        free=[np.stack(seq) for seq in free],
        before=[np.stack(seq) for seq in before],
        after=[np.stack(seq) for seq in after],
        params_true=np.stack(params_true),
        params_pred=np.stack(params_pred),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        study.to_csv(out_dir)
        plot_study(study, out_dir)
        summary = {
            "n_frames": study.n_frames,
            "predictor": model if isinstance(model, str) else "network",
            "rng_seed": rng_seed,
            "rois": [[list(pair) for pair in roi] for roi in study.rois],
            "variance_reduction_fraction": round(study.variance_reduction_fraction(), 6),
        }
        (out_dir / "study_summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n"
        )
    return study


def plot_study(
    study: TimeSeriesStudy, out_dir: str | Path, voxels_per_roi: int = 3
) -> list[Path]:
    """One figure per ROI: sampled voxel time courses under all conditions."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    frames = np.arange(study.n_frames)
    for j, roi in enumerate(study.rois):
        n_vox = study.free[j].shape[1]
        picks = np.unique(
            np.linspace(0, n_vox - 1, min(voxels_per_roi, n_vox)).round().astype(int)
        )
        fig, axes = plt.subplots(
            len(picks), 1, figsize=(7, 2.2 * len(picks)), sharex=True, squeeze=False
        )
        for ax, vox in zip(axes[:, 0], picks):
            ax.plot(frames, study.free[j][:, vox], label="motion-free", lw=1.5)
            ax.plot(frames, study.before[j][:, vox], label="corrupted", lw=1.0, ls="--")
            ax.plot(frames, study.after[j][:, vox], label="corrected", lw=1.2)
            ax.set_ylabel(f"voxel {vox}")
        axes[0, 0].legend(loc="upper right", fontsize=8)
        axes[-1, 0].set_xlabel("frame")
        box = " ".join(f"{lo}:{hi}" for lo, hi in roi)
        axes[0, 0].set_title(f"region {j} [{box}]")
        fig.tight_layout()
        path = out_dir / f"roi{j}_timecourses.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths
