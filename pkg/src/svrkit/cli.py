"""Command-line entry point: generate | train | evaluate | bench | motion-study.

Each run directory receives a ``config.json`` echo of every resolved
setting; re-running a subcommand with that echo reproduces the run
(CSV artifacts byte for byte).  Values resolve in order: built-in defaults,
then the ``--config`` file, then explicit flags.

Exit codes: 0 success, 2 usage or IO failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

__all__ = ["main", "build_parser", "load_config_file"]

_DESK = {
    "shape": (24, 32, 32),
    "n_slices": 24,
    "simultaneous": 6,
    "counts": (64, 16, 20),
    "refs": (64, 16, 20),
}
_FULL = {
    "shape": (70, 100, 100),
    "n_slices": 60,
    "simultaneous": 6,
    "counts": (2000, 500, 200),
    "refs": (88, 22, 28),
}
_PRESETS = {"desk": _DESK, "full": _FULL}

_SPLITS = ("train", "val", "test")
# disjoint seed banks per split so reference phantoms never leak across
_SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


def _runs_root() -> Path:
    return Path(os.environ.get("RUNS_DIR", "runs"))


def load_config_file(path: str | Path) -> dict:
    """Read a JSON (or, where the interpreter supports it, TOML) config."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError as exc:
            raise ValueError(
                f"{path}: TOML configs need Python 3.11+; use JSON here"
            ) from exc
        return tomllib.loads(text)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data


def _parse_triple(text: str, label: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"{label} wants three comma-separated integers, got {text!r}")
    values = tuple(int(p) for p in parts)
    if any(v < 0 for v in values):
        raise ValueError(f"{label} values must be non-negative, got {text!r}")
    return values


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults < config file < explicit flags, with unknown keys rejected."""
    merged = dict(defaults)
    if args.config is not None:
        file_values = load_config_file(args.config)
        unknown = sorted(set(file_values) - set(defaults))
        if unknown:
            raise ValueError(
                f"unknown config keys {unknown}; this subcommand accepts "
                f"{sorted(defaults)}"
            )
        merged.update(file_values)
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


def _echo_config(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    norm = {
        k: (list(v) if isinstance(v, tuple) else v) for k, v in config.items()
    }
    (out_dir / "config.json").write_text(
        json.dumps(norm, indent=2, sort_keys=True) + "\n"
    )


def _out_dir(config: dict, subcommand: str) -> Path:
    out = config.get("out")
    return Path(out) if out else _runs_root() / subcommand


def _preset_tables(name: str) -> dict:
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}, want one of {sorted(_PRESETS)}")
    return _PRESETS[name]


# ---------------------------------------------------------------- generate


def _load_reference_splits(
    ref_dir: Path, target_shape: tuple[int, int, int], seed: int
) -> dict[str, list]:
    """Read, normalise, and pad real reference volumes, split by subject."""
    from svrkit.dataio import load_volume, preprocess, split_subjects

    if not ref_dir.is_dir():
        raise FileNotFoundError(f"reference directory {ref_dir} does not exist")
    paths = sorted(
        p for p in ref_dir.iterdir()
        if p.name.endswith((".nii", ".nii.gz", ".svrvol"))
    )
    if not paths:
        raise ValueError(f"reference directory {ref_dir} holds no volume files")
    volumes = {}
    for path in paths:
        subject = path.name.split(".")[0]
        volumes[subject] = preprocess(
            load_volume(path, subject_id=subject), target_shape
        )
    manifest = split_subjects(list(volumes), seed=seed)
    return {
        split: [volumes[s] for s in subjects]
        for split, subjects in manifest.subjects.items()
    }


def cmd_generate(args: argparse.Namespace) -> int:
    from svrkit.acquisition import (
        ParamRanges,
        SliceProtocol,
        build_dataset,
        load_manifest,
        pair_seed,
    )
    from svrkit.dataio import make_phantom

    defaults = {
        "preset": "desk",
        "seed": 0,
        "counts": None,
        "refs": None,
        "references": None,
        "workers": 1,
        "out": None,
    }
    config = _resolve(args, defaults)
    preset = _preset_tables(config["preset"])
    counts = config["counts"] or preset["counts"]
    refs = config["refs"] or preset["refs"]
    if isinstance(counts, str):
        counts = _parse_triple(counts, "counts")
    if isinstance(refs, str):
        refs = _parse_triple(refs, "refs")
    counts = tuple(int(c) for c in counts)
    refs = tuple(int(r) for r in refs)
    config["counts"] = counts
    config["refs"] = refs
    out_dir = _out_dir(config, "generate")
    config["out"] = str(out_dir)
    _echo_config(config, out_dir)

    protocol = SliceProtocol(preset["n_slices"], preset["simultaneous"])
    ranges = ParamRanges()
    seed = int(config["seed"])
    loaded_splits = None
    if config["references"]:
        loaded_splits = _load_reference_splits(
            Path(config["references"]), preset["shape"], seed
        )
    summary = {"preset": config["preset"], "seed": seed, "splits": {}}
    for split, n_pairs, n_refs in zip(_SPLITS, counts, refs):
        if n_pairs == 0:
            continue
        offset = _SPLIT_OFFSETS[split]
        if loaded_splits is not None:
            references = loaded_splits.get(split, [])
            n_refs = len(references)
            if not references:
                raise ValueError(f"{split}: no reference subjects landed in this split")
        else:
            if n_refs < 1:
                raise ValueError(
                    f"{split}: need at least one reference for {n_pairs} pairs"
                )
            references = [
                make_phantom(
                    preset["shape"],
                    pair_seed(seed, offset + i),
                    subject_id=f"phantom-{split}-{i:04d}",
                )
                for i in range(n_refs)
            ]
        manifest_path = build_dataset(
            references,
            n_pairs,
            out_dir / split,
            protocol=protocol,
            ranges=ranges,
            global_seed=pair_seed(seed, offset + 999_999),
            prefix=f"{split}-pair",
            workers=int(config["workers"]),
        )
        d_init = [record["d_init_mm"] for record in load_manifest(manifest_path)]
        summary["splits"][split] = {
            "n_pairs": n_pairs,
            "n_references": n_refs,
            "mean_d_init_mm": round(float(np.mean(d_init)), 6),
            "std_d_init_mm": round(float(np.std(d_init)), 6),
        }
        print(
            f"{split}: {n_pairs} pairs from {n_refs} references, "
            f"mean D_init {np.mean(d_init):.2f} mm"
        )
    (out_dir / "dataset_meta.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    print(f"dataset written to {out_dir}")
    return 0


# ------------------------------------------------------------------- train


def cmd_train(args: argparse.Namespace) -> int:
    from svrkit.acquisition import load_dataset
    from svrkit.training import TrainConfig, sweep_lambdas, train

    defaults = {
        "data": None,
        "preset": "desk",
        "seed": 0,
        "steps": 300,
        "batch_size": 8,
        "learning_rate": 5e-4,
        "lambda1": 10.0,
        "lambda2": 100.0,
        "no_attention": False,
        "validate_every": None,
        "sweep": False,
        "out": None,
    }
    config = _resolve(args, defaults)
    if not config["data"]:
        raise ValueError("train needs --data pointing at a generated dataset")
    data_dir = Path(config["data"])
    train_set = load_dataset(data_dir / "train")
    val_set = load_dataset(data_dir / "val")
    out_dir = _out_dir(config, "train")
    config["out"] = str(out_dir)
    _echo_config(config, out_dir)

    train_config = TrainConfig(
        preset=config["preset"],
        use_attention=not config["no_attention"],
        lambda_ang=float(config["lambda1"]),
        lambda_tr=float(config["lambda2"]),
        learning_rate=float(config["learning_rate"]),
        batch_size=int(config["batch_size"]),
        steps=int(config["steps"]),
        seed=int(config["seed"]),
        validate_every=(
            None if config["validate_every"] is None else int(config["validate_every"])
        ),
    )
    if config["sweep"]:
        rows, selected = sweep_lambdas(None, train_config, train_set, val_set, out_dir)
        for row in rows:
            mark = " <- selected" if row is selected else ""
            print(
                f"lambda1={row['lambda_ang']:g} lambda2={row['lambda_tr']:g}: "
                f"D_reg {row['d_reg_mm']:.3f} mm{mark}"
            )
        return 0
    best_path, history = train(train_config, train_set, val_set, out_dir)
    curve = history.validation_curve()
    print(f"best checkpoint: {best_path}")
    print(f"validation D_reg: start {curve[0][1]:.3f} mm, best {min(v for _, v in curve):.3f} mm")
    return 0


# ---------------------------------------------------------------- evaluate


def _load_predictor(config: dict):
    from svrkit.network import load_checkpoint

    predictor = config.get("predictor")
    checkpoint = config.get("checkpoint")
    if predictor and checkpoint:
        raise ValueError("give either a checkpoint or a reference predictor, not both")
    if predictor:
        if predictor not in ("identity", "oracle"):
            raise ValueError(f"unknown predictor {predictor!r}")
        return predictor, predictor
    if not checkpoint:
        raise ValueError("need --checkpoint or --predictor identity|oracle")
    model, _ = load_checkpoint(checkpoint)
    return model, Path(checkpoint).stem


def cmd_evaluate(args: argparse.Namespace) -> int:
    from svrkit.acquisition import load_dataset
    from svrkit.evaluation import evaluate

    defaults = {
        "data": None,
        "split": "test",
        "checkpoint": None,
        "predictor": None,
        "out": None,
    }
    config = _resolve(args, defaults)
    if not config["data"]:
        raise ValueError("evaluate needs --data pointing at a generated dataset")
    if config["split"] not in _SPLITS:
        raise ValueError(f"split must be one of {_SPLITS}")
    model, model_id = _load_predictor(config)
    pair_set = load_dataset(Path(config["data"]) / config["split"])
    out_dir = _out_dir(config, "evaluate")
    config["out"] = str(out_dir)
    _echo_config(config, out_dir)
    report = evaluate(model, pair_set, model_id=model_id, dataset_id=config["split"])
    report.to_csv(out_dir)
    for metric, (mean, std) in report.aggregate().items():
        print(f"{metric}: {mean:.4f} +- {std:.4f}")
    print(f"report written to {out_dir}")
    return 0


# ------------------------------------------------------------------- bench


def cmd_bench(args: argparse.Namespace) -> int:
    from svrkit.acquisition import load_dataset
    from svrkit.evaluation import benchmark_runtime, count_parameters
    from svrkit.network import load_checkpoint

    defaults = {
        "data": None,
        "split": "test",
        "checkpoint": None,
        "reps": 20,
        "out": None,
    }
    config = _resolve(args, defaults)
    if not config["data"]:
        raise ValueError("bench needs --data pointing at a generated dataset")
    if not config["checkpoint"]:
        raise ValueError("bench needs --checkpoint")
    model, _ = load_checkpoint(config["checkpoint"])
    pair_set = load_dataset(Path(config["data"]) / config["split"])
    out_dir = _out_dir(config, "bench")
    config["out"] = str(out_dir)
    _echo_config(config, out_dir)
    stats = benchmark_runtime(model, pair_set, repetitions=int(config["reps"]))
    result = {
        "mean_s": round(stats.mean_s, 6),
        "median_s": round(stats.median_s, 6),
        "min_s": round(stats.min_s, 6),
        "max_s": round(stats.max_s, 6),
        "repetitions": stats.repetitions,
        "parameters": count_parameters(model),
    }
    (out_dir / "bench.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(
        f"forward pass: median {stats.median_s * 1e3:.1f} ms, "
        f"mean {stats.mean_s * 1e3:.1f} ms over {stats.repetitions} reps; "
        f"{result['parameters']:,} parameters"
    )
    return 0


# ------------------------------------------------------------ motion-study


def cmd_motion_study(args: argparse.Namespace) -> int:
    from svrkit.dataio import make_phantom_series
    from svrkit.evaluation import motion_study

    defaults = {
        "preset": "desk",
        "checkpoint": None,
        "predictor": None,
        "frames": 24,
        "seed": 0,
        "series_seed": 0,
        "drift_amplitude": 0.04,
        "smooth_sigma": 2.5,
        "out": None,
    }
    config = _resolve(args, defaults)
    preset = _preset_tables(config["preset"])
    model, _ = _load_predictor(config)
    out_dir = _out_dir(config, "motion-study")
    config["out"] = str(out_dir)
    _echo_config(config, out_dir)
    series = make_phantom_series(
        preset["shape"],
        int(config["series_seed"]),
        int(config["frames"]),
        drift_amplitude=float(config["drift_amplitude"]),
        smooth_sigma=float(config["smooth_sigma"]),
    )
    study = motion_study(series, model, rng_seed=int(config["seed"]), out_dir=out_dir)
    frac = study.variance_reduction_fraction()
    print(
        f"{study.n_frames} frames, {len(study.rois)} regions; "
        f"temporal variance reduced for {frac * 100:.1f}% of region voxels"
    )
    print(f"study written to {out_dir}")
    return 0


# ------------------------------------------------------------------ parser


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; flags override its values")
    sub.add_argument("--out", help="output directory (default: $RUNS_DIR/<subcommand>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svrkit",
        description="Slice-to-volume rigid registration: synthesize motion, "
        "train the pose regressor, and measure alignment quality.",
    )
    subparsers = parser.add_subparsers(dest="subcommand", required=True)

    gen = subparsers.add_parser("generate", help="synthesize a stack/volume dataset")
    _add_common(gen)
    gen.add_argument("--preset", choices=sorted(_PRESETS), help="desk or full scale")
    gen.add_argument("--seed", type=int, help="global generation seed")
    gen.add_argument("--counts", help="train,val,test pair counts (e.g. 64,16,20)")
    gen.add_argument("--refs", help="train,val,test phantom reference counts")
    gen.add_argument(
        "--references",
        help="directory of real reference volumes (.nii/.nii.gz/.svrvol); "
        "phantoms are synthesized when omitted",
    )
    gen.add_argument("--workers", type=int, help="parallel synthesis workers")
    gen.set_defaults(func=cmd_generate)

    tr = subparsers.add_parser("train", help="fit the pose regressor")
    _add_common(tr)
    tr.add_argument("--data", help="dataset directory from `generate`")
    tr.add_argument("--preset", choices=sorted(_PRESETS), help="model scale preset")
    tr.add_argument("--seed", type=int, help="init/shuffle seed")
    tr.add_argument("--steps", type=int, help="optimizer steps (0: just save init)")
    tr.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size")
    tr.add_argument(
        "--learning-rate", dest="learning_rate", type=float, help="Adam learning rate"
    )
    tr.add_argument("--lambda1", type=float, help="angle-error weight")
    tr.add_argument("--lambda2", type=float, help="translation-error weight")
    tr.add_argument(
        "--no-attention",
        dest="no_attention",
        action="store_const",
        const=True,
        help="train the baseline without slice scoring",
    )
    tr.add_argument(
        "--validate-every", dest="validate_every", type=int,
        help="steps between validation passes (default: once per epoch)",
    )
    tr.add_argument(
        "--sweep",
        action="store_const",
        const=True,
        help="train one model per lambda grid cell and pick the best",
    )
    tr.set_defaults(func=cmd_train)

    ev = subparsers.add_parser("evaluate", help="score a predictor on a split")
    _add_common(ev)
    ev.add_argument("--data", help="dataset directory from `generate`")
    ev.add_argument("--split", choices=_SPLITS, help="which split to score")
    ev.add_argument("--checkpoint", help="trained checkpoint (.npz)")
    ev.add_argument(
        "--predictor",
        choices=("identity", "oracle"),
        help="reference predictor instead of a checkpoint",
    )
    ev.set_defaults(func=cmd_evaluate)

    be = subparsers.add_parser("bench", help="time forward passes")
    _add_common(be)
    be.add_argument("--data", help="dataset directory from `generate`")
    be.add_argument("--split", choices=_SPLITS, help="split supplying inputs")
    be.add_argument("--checkpoint", help="trained checkpoint (.npz)")
    be.add_argument("--reps", type=int, help="timed repetitions (min 2)")
    be.set_defaults(func=cmd_bench)

    ms = subparsers.add_parser(
        "motion-study", help="corrupt/correct a drifting series and compare"
    )
    _add_common(ms)
    ms.add_argument("--preset", choices=sorted(_PRESETS), help="series scale preset")
    ms.add_argument("--checkpoint", help="trained checkpoint (.npz)")
    ms.add_argument(
        "--predictor",
        choices=("identity", "oracle"),
        help="reference predictor instead of a checkpoint",
    )
    ms.add_argument("--frames", type=int, help="series length")
    ms.add_argument("--seed", type=int, help="motion sampling seed")
    ms.add_argument(
        "--series-seed", dest="series_seed", type=int, help="phantom series seed"
    )
    ms.add_argument(
        "--drift-amplitude", dest="drift_amplitude", type=float,
        help="intensity drift amplitude",
    )
    ms.add_argument(
        "--smooth-sigma", dest="smooth_sigma", type=float,
        help="phantom edge softness (voxels)",
    )
    ms.set_defaults(func=cmd_motion_study)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
