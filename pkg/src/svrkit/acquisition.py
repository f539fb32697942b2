"""Synthetic motion: sampling rigid perturbations and slicing moved volumes.

A sample pair couples a motion-free reference volume with a small stack of
slices cut from a rigidly moved copy of it.  The stack mimics a multiband
acquisition shot: ``simultaneous`` slices taken at indices spaced ``n /
simultaneous`` apart, so one shot spans the whole head.  The ground-truth
motion parameters and the initial grid displacement are recorded alongside.

The random draw order inside a pair is fixed (six motion parameters, then
the shot index), which makes every pair reproducible from its integer seed
alone.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from svrkit.dataio import Volume, load_volume, save_volume
from svrkit.geometry import (
    IDENTITY,
    RigidParams,
    VolumeGeometry,
    compose_affine,
    grid_distance,
    make_grid,
    resample,
)

__all__ = [
    "ParamRanges",
    "SliceProtocol",
    "SliceStack",
    "SamplePair",
    "PairSet",
    "sample_rigid_params",
    "slice_indices",
    "extract_stack",
    "synthesize_pair",
    "pair_seed",
    "build_dataset",
    "load_manifest",
    "load_dataset",
]


@dataclass(frozen=True)
class ParamRanges:
    """Half-widths of the zero-centred uniform motion distribution.

    Defaults: in-plane translations up to 12 mm, through-plane up to 8.4 mm,
    all rotations up to 5 degrees.
    """

    max_rot_deg: tuple[float, float, float] = (5.0, 5.0, 5.0)
    max_trans_mm: tuple[float, float, float] = (12.0, 12.0, 8.4)  # x, y, z

    def __post_init__(self) -> None:
        if any(r < 0 for r in self.max_rot_deg) or any(t < 0 for t in self.max_trans_mm):
            raise ValueError("motion ranges must be non-negative")


@dataclass(frozen=True)
class SliceProtocol:
    """Multiband slicing description: ``n_slices`` total, ``simultaneous`` per shot."""

    n_slices: int = 60
    simultaneous: int = 6

    def __post_init__(self) -> None:
        if self.simultaneous < 1 or self.n_slices < 1:
            raise ValueError("slice counts must be positive")
        if self.n_slices % self.simultaneous != 0:
            raise ValueError(
                f"n_slices ({self.n_slices}) must be divisible by "
                f"simultaneous ({self.simultaneous})"
            )

    @property
    def n_shots(self) -> int:
        return self.n_slices // self.simultaneous

    def indices(self, shot: int) -> tuple[int, ...]:
        return slice_indices(self.n_slices, shot, self.simultaneous)


def slice_indices(n_slices: int, shot: int, simultaneous: int) -> tuple[int, ...]:
    """Zero-based slice indices of one multiband shot.

    Shot ``i`` collects slices ``i, i + g, ..., i + (simultaneous - 1) * g``
    with gap ``g = n_slices / simultaneous``; valid shots are ``0 <= i < g``.
    """
    if n_slices % simultaneous != 0:
        raise ValueError(f"{n_slices} slices not divisible by {simultaneous}")
    gap = n_slices // simultaneous
    if not 0 <= shot < gap:
        raise ValueError(f"shot must be in [0, {gap}), got {shot}")
    return tuple(shot + k * gap for k in range(simultaneous))


def sample_rigid_params(ranges: ParamRanges, rng: np.random.Generator) -> RigidParams:
    """One uniform draw per parameter, each centred on zero."""
    rx, ry, rz = ranges.max_rot_deg
    tx, ty, tz = ranges.max_trans_mm
    return RigidParams(
        alpha_x=float(rng.uniform(-rx, rx)),
        alpha_y=float(rng.uniform(-ry, ry)),
        alpha_z=float(rng.uniform(-rz, rz)),
        t_x=float(rng.uniform(-tx, tx)),
        t_y=float(rng.uniform(-ty, ty)),
        t_z=float(rng.uniform(-tz, tz)),
    )


@dataclass
class SliceStack:
    """Slices cut from a moved volume: data ``(K, H, W)`` plus their indices."""

    data: np.ndarray
    indices: tuple[int, ...]
    spacing: float

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != len(self.indices):
            raise ValueError(
                f"stack shape {self.data.shape} inconsistent with "
                f"{len(self.indices)} slice indices"
            )


@dataclass
class SamplePair:
    """A training or evaluation example with its full provenance."""

    pair_id: str
    reference_id: str
    seed: int
    params: RigidParams
    stack: SliceStack
    d_init_mm: float
    moved: Volume | None = None

    def manifest_record(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "reference_id": self.reference_id,
            "seed": self.seed,
            "params_deg_mm": [float(v) for v in self.params.as_array()],
            "slice_indices": list(self.stack.indices),
            "d_init_mm": float(self.d_init_mm),
        }


def extract_stack(volume: Volume, indices: tuple[int, ...]) -> SliceStack:
    """Copy the given depth slices out of a volume, bit for bit."""
    depth = volume.geometry.shape[0]
    for idx in indices:
        if not 0 <= idx < depth:
            raise ValueError(f"slice index {idx} outside [0, {depth})")
    data = volume.data[list(indices)].copy()
    return SliceStack(data, tuple(int(i) for i in indices), volume.geometry.spacing)


def synthesize_pair(
    reference: Volume,
    protocol: SliceProtocol,
    ranges: ParamRanges,
    seed: int,
    pair_id: str = "",
    keep_moved: bool = False,
) -> SamplePair:
    """Move the reference by a random rigid transform and slice one shot from it.

    Pure in ``(reference, protocol, ranges, seed)``: the same inputs always
    produce the same pair.
    """
    depth = reference.geometry.shape[0]
    if protocol.n_slices > depth:
        raise ValueError(
            f"protocol expects {protocol.n_slices} slices but the reference "
            f"has depth {depth}"
        )
    # a shorter protocol is centred in the volume, so a 60-slice acquisition
    # sits over the content region of a zero-padded 70-plane reference
    plane_offset = (depth - protocol.n_slices) // 2
    rng = np.random.default_rng(seed)
    params = sample_rigid_params(ranges, rng)
    shot = int(rng.integers(0, protocol.n_shots))
    matrix = compose_affine(params, reference.geometry)
    moved_data = resample(reference.data, matrix, reference.geometry)
    moved = Volume(
        moved_data, reference.geometry, reference.subject_id, reference.time_index
    )
    stack = extract_stack(moved, tuple(plane_offset + i for i in protocol.indices(shot)))
    d_init = grid_distance(matrix, IDENTITY, make_grid(reference.geometry))
    return SamplePair(
        pair_id=pair_id,
        reference_id=reference.subject_id,
        seed=seed,
        params=params,
        stack=stack,
        d_init_mm=d_init,
        moved=moved if keep_moved else None,
    )


def pair_seed(global_seed: int, index: int) -> int:
    """Derive an independent per-item seed from a global seed and an index."""
    seq = np.random.SeedSequence(entropy=global_seed, spawn_key=(index,))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def build_dataset(
    references: list[Volume],
    n_pairs: int,
    out_dir: str | Path,
    protocol: SliceProtocol | None = None,
    ranges: ParamRanges | None = None,
    global_seed: int = 0,
    prefix: str = "pair",
    workers: int = 1,
) -> Path:
    """Synthesize ``n_pairs`` examples and write them under ``out_dir``.

    References are cycled round-robin so every subject contributes equally.
    Each pair gets an independent seed derived from ``global_seed`` and its
    index, recorded in ``manifest.jsonl`` next to the ground-truth motion;
    rebuilding with the same arguments reproduces every byte.

    Layout::

        out_dir/
          manifest.jsonl
          references/<reference_id>.nii
          stacks/<pair_id>.nii

    Returns the manifest path.
    """
    if not references:
        raise ValueError("need at least one reference volume")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    ids = [ref.subject_id for ref in references]
    if len(set(ids)) != len(ids):
        raise ValueError(f"reference subject ids must be unique, got {ids}")
    protocol = protocol or SliceProtocol()
    ranges = ranges or ParamRanges()
    out_dir = Path(out_dir)
    (out_dir / "references").mkdir(parents=True, exist_ok=True)
    (out_dir / "stacks").mkdir(parents=True, exist_ok=True)
    for ref in references:
        save_volume(ref, out_dir / "references" / f"{ref.subject_id}.nii")

    def one(index: int) -> SamplePair:
        reference = references[index % len(references)]
        return synthesize_pair(
            reference,
            protocol,
            ranges,
            seed=pair_seed(global_seed, index),
            pair_id=f"{prefix}-{index:05d}",
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(one, range(n_pairs)))
    else:
        pairs = [one(i) for i in range(n_pairs)]

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for pair in pairs:
            # stack stored as a thin volume: K planes tall
            stack_vol = Volume(
                pair.stack.data, VolumeGeometry(pair.stack.data.shape, pair.stack.spacing)
            )
            save_volume(stack_vol, out_dir / "stacks" / f"{pair.pair_id}.nii")
            fh.write(json.dumps(pair.manifest_record(), sort_keys=True) + "\n")
    return manifest_path


def load_manifest(manifest_path: str | Path) -> list[dict]:
    """Read a dataset manifest back as a list of records."""
    records = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


@dataclass
class PairSet:
    """Pairs plus the reference volumes they point at, ready for batching."""

    pairs: list[SamplePair]
    references: dict[str, Volume]

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValueError("a pair set needs at least one pair")
        missing = {p.reference_id for p in self.pairs} - set(self.references)
        if missing:
            raise ValueError(f"pairs point at unknown references: {sorted(missing)}")
        shapes = {ref.geometry.shape for ref in self.references.values()}
        if len(shapes) != 1:
            raise ValueError(f"references disagree on shape: {shapes}")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def geometry(self):
        return next(iter(self.references.values())).geometry

    def batch_arrays(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacks (B,K,H,W) float32, volumes (B,D,H,W) float32, params (B,6) float64."""
        chosen = [self.pairs[int(i)] for i in indices]
        stacks = np.stack([p.stack.data for p in chosen]).astype(np.float32)
        volumes = np.stack(
            [self.references[p.reference_id].data for p in chosen]
        ).astype(np.float32)
        params = np.stack([p.params.as_array() for p in chosen])
        return stacks, volumes, params


def load_dataset(dataset_dir: str | Path) -> PairSet:
    """Rebuild a :class:`PairSet` from a directory written by :func:`build_dataset`.

    Stored payloads are float32, so reloaded stacks match the synthesized
    ones to float32 precision; parameters and seeds come back exact from the
    manifest.
    """
    dataset_dir = Path(dataset_dir)
    records = load_manifest(dataset_dir / "manifest.jsonl")
    if not records:
        raise ValueError(f"{dataset_dir}: empty manifest")
    references: dict[str, Volume] = {}
    pairs = []
    for rec in records:
        ref_id = rec["reference_id"]
        if ref_id not in references:
            references[ref_id] = load_volume(
                dataset_dir / "references" / f"{ref_id}.nii", subject_id=ref_id
            )
        stack_vol = load_volume(dataset_dir / "stacks" / f"{rec['pair_id']}.nii")
        stack = SliceStack(
            stack_vol.data,
            tuple(int(i) for i in rec["slice_indices"]),
            stack_vol.geometry.spacing,
        )
        pairs.append(
            SamplePair(
                pair_id=rec["pair_id"],
                reference_id=ref_id,
                seed=int(rec["seed"]),
                params=RigidParams.from_array(np.asarray(rec["params_deg_mm"])),
                stack=stack,
                d_init_mm=float(rec["d_init_mm"]),
            )
        )
    return PairSet(pairs, references)
