"""Supervised pose training: grid-distance loss, Adam loop, lambda sweep.

The loss couples three terms:

* ``l_sim``: mean per-point Euclidean distance (mm) between the reference
  grid moved by the ground-truth transform and by the predicted one.  This
  is numerically the same quantity as the registration error metric, so a
  training curve and an evaluation table speak the same units.
* ``l_ang``: mean squared error over the three rotation angles (deg^2).
* ``l_tr``: mean squared error over the three translations (mm^2).

``total = l_sim + lambda_ang * l_ang + lambda_tr * l_tr``.

Training is deterministic given the seed: model init, shuffling, and batch
assembly all derive from it, and the history CSV is byte-stable across
reruns.  Wall-clock timing lives in a sidecar JSON, never in the CSV.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from svrkit.acquisition import PairSet
from svrkit.geometry import (
    RigidParams,
    grid_distance,
    make_grid,
    rigid_about,
)
from svrkit.network import (
    SliceToVolumeRegressor,
    desk_scale_config,
    load_checkpoint,
    full_scale_config,
    save_checkpoint,
)

__all__ = [
    "LossBreakdown",
    "TrainConfig",
    "HistoryRow",
    "TrainHistory",
    "loss",
    "loss_terms",
    "batch_rotation_matrices",
    "predict_params",
    "validation_d_reg",
    "train",
    "sweep_lambdas",
    "DEFAULT_LAMBDA_GRID",
]

DEFAULT_LAMBDA_GRID: tuple[tuple[float, float], ...] = (
    (1.0, 100.0),
    (10.0, 40.0),
    (10.0, 100.0),
)

_PRESETS = {"full": full_scale_config, "desk": desk_scale_config}

# tiny ridge under the sqrt keeps the gradient finite at zero displacement
_NORM_EPS = 1e-24


@dataclass(frozen=True)
class LossBreakdown:
    """All loss components in their physical units."""

    total: float
    l_sim: float  # mm
    l_ang: float  # deg^2
    l_tr: float  # mm^2
    lambda_ang: float
    lambda_tr: float


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "desk"
    use_attention: bool = True
    lambda_ang: float = 10.0
    lambda_tr: float = 100.0
    learning_rate: float = 5e-4
    batch_size: int = 8
    steps: int = 300
    seed: int = 0
    validate_every: int | None = None  # None: once per epoch

    def __post_init__(self) -> None:
        if self.preset not in _PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}, want one of {set(_PRESETS)}")
        if self.lambda_ang < 0 or self.lambda_tr < 0:
            raise ValueError("lambda weights must be non-negative")
        # zero learning rate is allowed: it freezes the weights by design
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        # zero steps emits the initial checkpoint without any updates
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.validate_every is not None and self.validate_every < 1:
            raise ValueError("validate_every must be positive when set")

    def model_config(self):
        return _PRESETS[self.preset](use_attention=self.use_attention)


@dataclass(frozen=True)
class HistoryRow:
    """One history line; step 0 carries only the initial validation."""

    step: int
    total: float | None
    l_sim: float | None
    l_ang: float | None
    l_tr: float | None
    val_d_reg: float | None


@dataclass
class TrainHistory:
    rows: list[HistoryRow]
    wall_clock_s: float

    CSV_HEADER = "step,total,l_sim,l_ang,l_tr,val_D_reg"

    def validation_curve(self) -> list[tuple[int, float]]:
        return [(r.step, r.val_d_reg) for r in self.rows if r.val_d_reg is not None]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        def cell(value: float | None) -> str:
            return "" if value is None else f"{value:.6f}"

        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.step},{cell(r.total)},{cell(r.l_sim)},"
                f"{cell(r.l_ang)},{cell(r.l_tr)},{cell(r.val_d_reg)}"
            )
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainHistory":
        lines = Path(path).read_text().strip().splitlines()
        if not lines or lines[0] != cls.CSV_HEADER:
            raise ValueError(f"{path}: not a training history CSV")
        rows = []
        for line in lines[1:]:
            step, *cells = line.split(",")
            vals = [None if c == "" else float(c) for c in cells]
            rows.append(HistoryRow(int(step), *vals))
        return cls(rows=rows, wall_clock_s=float("nan"))


def batch_rotation_matrices(angles_deg: torch.Tensor) -> torch.Tensor:
    """Differentiable ``Rz @ Ry @ Rx`` for a batch of angle triples.

    ``angles_deg`` is ``(B, 3)`` ordered (about-x, about-y, about-z); the
    result is ``(B, 3, 3)`` acting on (z, y, x)-ordered vectors, matching
    the numpy implementation in the geometry module.
    """
    rad = angles_deg * (math.pi / 180.0)
    cx, sx = torch.cos(rad[:, 0]), torch.sin(rad[:, 0])
    cy, sy = torch.cos(rad[:, 1]), torch.sin(rad[:, 1])
    cz, sz = torch.cos(rad[:, 2]), torch.sin(rad[:, 2])
    zero = torch.zeros_like(cx)
    one = torch.ones_like(cx)
    # each canonical axis rotation, already permuted into (z, y, x) ordering
    rx = torch.stack(
        [cx, sx, zero, -sx, cx, zero, zero, zero, one], dim=1
    ).reshape(-1, 3, 3)
    ry = torch.stack(
        [cy, zero, -sy, zero, one, zero, sy, zero, cy], dim=1
    ).reshape(-1, 3, 3)
    rz = torch.stack(
        [one, zero, zero, zero, cz, sz, zero, -sz, cz], dim=1
    ).reshape(-1, 3, 3)
    return rz @ ry @ rx


def loss_terms(
    pred: torch.Tensor,
    target: torch.Tensor,
    grid_points: torch.Tensor,
    center: torch.Tensor,
    lambda_ang: float,
    lambda_tr: float,
) -> dict[str, torch.Tensor]:
    """Differentiable loss components for a batch.

    ``pred``/``target`` are ``(B, 6)`` parameter rows, ``grid_points`` is
    ``(N, 3)`` in (z, y, x) mm, ``center`` the rotation centre.  Everything
    is computed in float64 regardless of the model dtype.
    """
    pred = pred.double()
    target = target.double()
    rot_pred = batch_rotation_matrices(pred[:, :3])
    rot_true = batch_rotation_matrices(target[:, :3])
    # translation columns reordered (t_x, t_y, t_z) -> (z, y, x)
    t_pred = pred[:, (5, 4, 3)]
    t_true = target[:, (5, 4, 3)]
    rel = grid_points - center
    disp = torch.einsum("bij,nj->bni", rot_true - rot_pred, rel)
    disp = disp + (t_true - t_pred)[:, None, :]
    l_sim = torch.sqrt((disp**2).sum(dim=-1) + _NORM_EPS).mean()
    l_ang = ((pred[:, :3] - target[:, :3]) ** 2).mean()
    l_tr = ((pred[:, 3:] - target[:, 3:]) ** 2).mean()
    total = l_sim + lambda_ang * l_ang + lambda_tr * l_tr
    return {"total": total, "l_sim": l_sim, "l_ang": l_ang, "l_tr": l_tr}


def loss(
    pred: RigidParams,
    target: RigidParams,
    grid: np.ndarray,
    lambda_ang: float = 10.0,
    lambda_tr: float = 100.0,
    center: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> LossBreakdown:
    """Reporting-side loss for one pair, sharing the metric implementation.

    ``l_sim`` here is exactly the registration error of the same pair: both
    call the one grid-distance function.
    """
    l_sim = grid_distance(rigid_about(target, center), rigid_about(pred, center), grid)
    l_ang = float(np.mean((target.angles_deg() - pred.angles_deg()) ** 2))
    t_pred = np.array([pred.t_x, pred.t_y, pred.t_z])
    t_true = np.array([target.t_x, target.t_y, target.t_z])
    l_tr = float(np.mean((t_true - t_pred) ** 2))
    total = l_sim + lambda_ang * l_ang + lambda_tr * l_tr
    return LossBreakdown(total, l_sim, l_ang, l_tr, lambda_ang, lambda_tr)


def _to_tensor(array: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(array)).to(dtype)


def predict_params(
    model: SliceToVolumeRegressor, pair_set: PairSet, batch_size: int = 16
) -> np.ndarray:
    """Run the model over every pair, returning ``(n, 6)`` float64 predictions."""
    model.eval()
    outputs = []
    model_dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for start in range(0, len(pair_set), batch_size):
            idx = range(start, min(start + batch_size, len(pair_set)))
            stacks, volumes, _ = pair_set.batch_arrays(idx)
            pred, _ = model(_to_tensor(stacks, model_dtype), _to_tensor(volumes, model_dtype))
            outputs.append(pred.double().cpu().numpy())
    out = np.concatenate(outputs, axis=0)
    if not np.isfinite(out).all():
        bad = int(np.sum(~np.isfinite(out).all(axis=1)))
        raise RuntimeError(
            f"model produced non-finite parameters for {bad} of {len(out)} pairs"
        )
    return out


def validation_d_reg(
    model: SliceToVolumeRegressor, pair_set: PairSet, grid: np.ndarray
) -> float:
    """Mean grid distance (mm) between predicted and true motion over a set."""
    preds = predict_params(model, pair_set)
    center = pair_set.geometry.center
    dists = [
        grid_distance(
            rigid_about(pair.params, center),
            rigid_about(RigidParams.from_array(row), center),
            grid,
        )
        for pair, row in zip(pair_set.pairs, preds)
    ]
    return float(np.mean(dists))


def train(
    config: TrainConfig,
    train_set: PairSet,
    val_set: PairSet,
    out_dir: str | Path,
) -> tuple[Path, TrainHistory]:
    """Optimize a freshly built model; returns (best checkpoint path, history).

    Artifacts in ``out_dir``: ``best.npz`` (lowest validation grid distance),
    ``final.npz``, ``history.csv``, ``train_meta.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_config = config.model_config()
    geom = train_set.geometry
    if tuple(model_config.volume_shape) != tuple(geom.shape):
        raise ValueError(
            f"preset {config.preset!r} expects volume shape "
            f"{model_config.volume_shape} but the data is {geom.shape}"
        )
    stack_k = train_set.pairs[0].stack.data.shape[0]
    if stack_k != model_config.stack_slices:
        raise ValueError(
            f"model expects {model_config.stack_slices} stack slices, data has {stack_k}"
        )

    torch.manual_seed(config.seed)
    model = SliceToVolumeRegressor(model_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    grid = make_grid(geom).reshape(-1, 3)
    grid_t = torch.from_numpy(grid)
    center_t = torch.from_numpy(geom.center)

    effective_batch = min(config.batch_size, len(train_set))
    steps_per_epoch = max(1, len(train_set) // effective_batch)
    validate_every = config.validate_every or steps_per_epoch

    started = time.perf_counter()
    rows: list[HistoryRow] = []

    initial_val = validation_d_reg(model, val_set, grid)
    rows.append(HistoryRow(0, None, None, None, None, initial_val))
    best_val, best_step = initial_val, 0
    best_path = save_checkpoint(
        model, out_dir / "best.npz", meta={"step": 0, "val_d_reg": initial_val}
    )

    order = rng.permutation(len(train_set))
    cursor = 0
    for step in range(1, config.steps + 1):
        if cursor + effective_batch > len(order):
            order = rng.permutation(len(train_set))
            cursor = 0
        indices = order[cursor : cursor + effective_batch]
        cursor += effective_batch

        stacks, volumes, params = train_set.batch_arrays(indices)
        model.train()
        pred, _ = model(_to_tensor(stacks, torch.float32), _to_tensor(volumes, torch.float32))
        terms = loss_terms(
            pred, torch.from_numpy(params), grid_t, center_t,
            config.lambda_ang, config.lambda_tr,
        )
        total = terms["total"]
        if not torch.isfinite(total):
            TrainHistory(rows, time.perf_counter() - started).to_csv(out_dir / "history.csv")
            raise RuntimeError(
                f"training diverged: non-finite loss at step {step} "
                f"(l_sim={float(terms['l_sim'].detach()):.3g}, "
                f"l_ang={float(terms['l_ang'].detach()):.3g}, "
                f"l_tr={float(terms['l_tr'].detach()):.3g})"
            )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        val_d = None
        if step % validate_every == 0 or step == config.steps:
            val_d = validation_d_reg(model, val_set, grid)
            if val_d < best_val:
                best_val, best_step = val_d, step
                best_path = save_checkpoint(
                    model, out_dir / "best.npz", meta={"step": step, "val_d_reg": val_d}
                )
        rows.append(
            HistoryRow(
                step,
                float(total.detach()),
                float(terms["l_sim"].detach()),
                float(terms["l_ang"].detach()),
                float(terms["l_tr"].detach()),
                val_d,
            )
        )

    wall = time.perf_counter() - started
    history = TrainHistory(rows, wall)
    history.to_csv(out_dir / "history.csv")
    save_checkpoint(
        model, out_dir / "final.npz", meta={"step": config.steps, "val_d_reg": rows[-1].val_d_reg}
    )
    meta = {
        "config": asdict(config),
        "wall_clock_s": wall,
        "best_step": best_step,
        "best_val_d_reg": best_val,
        "steps_per_epoch": steps_per_epoch,
    }
    (out_dir / "train_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return best_path, history


def _pose_errors(pair_set: PairSet, preds: np.ndarray) -> tuple[float, float]:
    """RMSE of angles (deg) and translations (mm) over a pair set."""
    truth = np.stack([p.params.as_array() for p in pair_set.pairs])
    ang_mse = float(np.mean((truth[:, :3] - preds[:, :3]) ** 2))
    tr_mse = float(np.mean((truth[:, 3:] - preds[:, 3:]) ** 2))
    return math.sqrt(ang_mse), math.sqrt(tr_mse)


def sweep_lambdas(
    grid_cells: tuple[tuple[float, float], ...] | None,
    config: TrainConfig,
    train_set: PairSet,
    val_set: PairSet,
    out_dir: str | Path,
) -> tuple[list[dict], dict]:
    """Train one model per (lambda_ang, lambda_tr) cell and tabulate metrics.

    Returns (rows, selected_row); selection takes the lowest validation grid
    distance, the single number that folds rotation and translation error
    together.  Writes ``sweep.csv`` under ``out_dir``.
    """
    cells = DEFAULT_LAMBDA_GRID if grid_cells is None else tuple(grid_cells)
    if not cells:
        raise ValueError("lambda grid must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = make_grid(train_set.geometry).reshape(-1, 3)
    rows = []
    for lambda_ang, lambda_tr in cells:
        cell_config = TrainConfig(
            preset=config.preset,
            use_attention=config.use_attention,
            lambda_ang=lambda_ang,
            lambda_tr=lambda_tr,
            learning_rate=config.learning_rate,
            batch_size=config.batch_size,
            steps=config.steps,
            seed=config.seed,
            validate_every=config.validate_every,
        )
        cell_dir = out_dir / f"lam_{lambda_ang:g}_{lambda_tr:g}"
        best_path, _ = train(cell_config, train_set, val_set, cell_dir)
        best_model, _ = load_checkpoint(best_path)
        preds = predict_params(best_model, val_set)
        d_reg = validation_d_reg(best_model, val_set, grid)
        e_rot, e_tr = _pose_errors(val_set, preds)
        rows.append(
            {
                "lambda_ang": lambda_ang,
                "lambda_tr": lambda_tr,
                "d_reg_mm": d_reg,
                "e_rot_deg": e_rot,
                "e_tr_mm": e_tr,
            }
        )
    selected = min(rows, key=lambda r: r["d_reg_mm"])
    lines = ["lambda_ang,lambda_tr,d_reg_mm,e_rot_deg,e_tr_mm,selected"]
    for row in rows:
        mark = "1" if row is selected else "0"
        lines.append(
            f"{row['lambda_ang']:g},{row['lambda_tr']:g},{row['d_reg_mm']:.6f},"
            f"{row['e_rot_deg']:.6f},{row['e_tr_mm']:.6f},{mark}"
        )
    (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    return rows, selected
