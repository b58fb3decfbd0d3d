"""Command-line entry point.

Subcommands: phantom, train, segment, evaluate, vote, augment-preview,
metrics. Every run resolves its configuration from (in order of precedence)
command-line flags, an optional YAML config file, and a named profile, then
writes the resolved snapshot next to its outputs for reproducibility.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import metrics as M
from . import phantom as ph
from . import pipeline as pl
from . import train as tr
from .augment import AugmentConfig, apply_transform, sample_augmentation
from .errors import ConfigError, CordsegError, ManifestError
from .mdgru import MDGRUConfig
from .pipeline import GM, WM

PROFILES = {
    "amira": {
        "model": {"in_channels": 8, "hidden_channels": 16, "kernel_size": 7},
        "train": {"iterations": 30000, "validation_interval": 500,
                  "highpass_variance": 10.0},
        "augment": {"deform_std": 15.0, "deform_truncate": 45.0,
                    "safe_margin": 45, "window": [500, 500]},
    },
    "scgm": {
        "model": {"in_channels": 1, "hidden_channels": 16, "kernel_size": 7},
        "train": {"iterations": 100000, "validation_interval": 1000,
                  "highpass_variance": 10.0},
        "augment": {"deform_std": 15.0, "deform_truncate": 45.0,
                    "safe_margin": 200, "window": [200, 200]},
    },
    "phantom": {
        "model": {"in_channels": 8, "hidden_channels": 8, "kernel_size": 5},
        "train": {"iterations": 2000, "validation_interval": 100,
                  "highpass_variance": None},
        "augment": {"deform_std": 4.0, "deform_truncate": 12.0,
                    "safe_margin": 16, "window": [64, 64]},
    },
}


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    loaded = yaml.safe_load(path.read_text())
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return loaded


def _merged_config(profile: str, config_path, overrides: dict) -> dict:
    merged = {k: dict(v) for k, v in PROFILES[profile].items()}
    merged.setdefault("split", {})
    for section, values in _load_config_file(config_path).items():
        merged.setdefault(section, {})
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        merged[section].update(values)
    for section, values in overrides.items():
        merged.setdefault(section, {})
        merged[section].update({k: v for k, v in values.items() if v is not None})
    return merged


def _write_snapshot(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.yaml").write_text(
        yaml.safe_dump(payload, sort_keys=True, default_flow_style=False))


def _auto_split(subjects: list[str]) -> dict[str, list[str]]:
    n_test = max(1, len(subjects) // 4)
    test = subjects[-n_test:]
    rest = subjects[:-n_test]
    val = [rest[-1]] if rest else []
    train = rest[:-1] if len(rest) > 1 else rest
    return {"train": train, "val": val, "test": test}


def _split_from(merged: dict, args, root) -> dict[str, list[str]]:
    section = merged.get("split", {})
    explicit = {k: list(section[k]) for k in ("train", "val", "test")
                if k in section}
    for name in ("train", "val", "test"):
        flag = getattr(args, f"{name}_subjects", None)
        if flag:
            explicit[name] = flag.split(",")
    if explicit:
        return explicit
    subjects = sorted({r.subject for r in pl.read_inventory(Path(root) / "dataset.txt")})
    return _auto_split(subjects)


def _fan_out(fn, items, threads: int) -> list:
    """Apply fn to every item, optionally on a thread pool; results keep the
    submission order so downstream files stay deterministic."""
    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _labels_by_key(directory) -> dict[tuple, Path]:
    directory = Path(directory)
    if not directory.exists():
        raise ManifestError(f"label directory {directory} does not exist")
    out = {}
    for path in sorted(directory.rglob("*.lbl")):
        lm = pl.load_labels(path)
        out[(lm.subject_id, lm.scan_index, lm.slice_index)] = path
    if not out:
        raise ManifestError(f"no .lbl files under {directory}")
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    spec_dict = _load_config_file(args.config).get("phantom", {})
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = ph.PhantomSpec.from_dict(spec_dict) if spec_dict else \
        ph.PhantomSpec(seed=args.seed or 0).validate()
    if args.lobe_scale is not None:
        spec = ph.PhantomSpec.from_dict({**spec.to_dict(), "lobe_scale": args.lobe_scale})
    out = Path(args.out)
    rows = ph.generate_phantom(spec, out, args.subjects, args.scans, args.slices)

    if args.raters > 1:
        all_rows = list(rows)
        for row in rows:
            labels = pl.load_labels(out / row.label_path)
            for rater in range(1, args.raters):
                perturbed = ph.perturb_rater(labels, rater, args.rater_flip,
                                             seed=spec.seed)
                path = row.label_path.replace("_r0", f"_r{rater}")
                pl.save_labels(perturbed, out / path)
                all_rows.append(pl.ManifestRow(row.subject, row.scan,
                                               row.slice_index, rater,
                                               row.image_path, path))
        pl.write_inventory(all_rows, out / "dataset.txt")
        rows = all_rows

    _write_snapshot(out, {"command": "phantom", "spec": spec.to_dict(),
                          "subjects": args.subjects, "scans": args.scans,
                          "slices": args.slices, "raters": args.raters,
                          "rater_flip": args.rater_flip})
    print(f"wrote {len(rows)} slice/label pairs under {out}")
    return 0


def cmd_train(args) -> int:
    merged = _merged_config(args.profile, args.config, {
        "train": {"iterations": args.iterations, "lam": args.lam,
                  "loss_variant": args.variant, "seed": args.seed,
                  "validation_interval": args.validation_interval},
        "model": {},
        "augment": {},
    })
    train_config = tr.TrainConfig.from_dict(merged["train"])
    model_config = MDGRUConfig.from_dict(merged["model"])
    augment_config = AugmentConfig.from_dict(merged["augment"])
    manifest = pl.build_manifest(args.data, _split_from(merged, args, args.data))

    out = Path(args.out)
    _write_snapshot(out, {"command": "train", "data": str(args.data),
                          "model": model_config.to_dict(),
                          "train": train_config.to_dict(),
                          "augment": augment_config.to_dict(),
                          "split": {k: list(v) for k, v in manifest.splits.items()},
                          "rater": args.rater})
    result = tr.train(manifest, train_config, model_config, augment_config,
                      out, rater=args.rater,
                      resume_from=args.resume)
    print(f"final checkpoint: {result.final_checkpoint}")
    if result.best_checkpoint:
        print(f"best checkpoint:  {result.best_checkpoint} "
              f"(mean GM/WM DSC {result.best_score:.4f} "
              f"at iteration {result.best_iteration})")
    if args.plot:
        _plot_curves(out / "training_log.csv", out / "training_curves.png")
    return 0


def _plot_curves(log_path, png_path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        warnings.warn("matplotlib not installed; skipping curve rendering")
        return
    import csv as _csv

    with open(log_path) as fh:
        rows = [r for r in _csv.DictReader(fh) if r["val_gm_dsc"]]
    if not rows:
        return
    its = [int(r["iteration"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    for ax, key, label in zip(axes, ("val_gm_dsc", "val_wm_dsc", "val_ce"),
                              ("GM DSC", "WM DSC", "cross-entropy")):
        ax.plot(its, [float(r[key]) for r in rows])
        ax.set_xlabel("iteration")
        ax.set_title(label)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)


def cmd_segment(args) -> int:
    model = tr.load_model(args.checkpoint)
    inputs: list[Path] = []
    for item in args.input:
        p = Path(item)
        inputs.extend(sorted(p.rglob("*.mcs")) if p.is_dir() else [p])
    if not inputs:
        raise ManifestError("no input slices found")

    reference = _labels_by_key(args.reference) if args.reference else {}
    out = Path(args.out)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "probabilities").mkdir(exist_ok=True)
    (out / "overlays").mkdir(exist_ok=True)

    def process(path):
        slc = pl.load_slice(path)
        probs, labels = tr.segment(model, slc)
        stem = path.stem
        pl.save_labels(labels, out / "labels" / f"{stem}.lbl")
        pl.save_slice(pl.MultiChannelSlice(probs, slc.spacing_mm, slc.subject_id,
                                           slc.scan_index, slc.slice_index),
                      out / "probabilities" / f"{stem}.mcs")
        contours = [(labels.classes == GM, (255, 0, 0)),
                    (labels.classes != 0, (0, 255, 0))]
        key = (slc.subject_id, slc.scan_index, slc.slice_index)
        if key in reference:
            ref = pl.load_labels(reference[key])
            contours += [(ref.classes == GM, (0, 0, 255)),
                         (ref.classes != 0, (255, 0, 255))]
        pl.contour_overlay_png(slc.pixels[:, :, 0], contours,
                               out / "overlays" / f"{stem}.png")

    _fan_out(process, inputs, args.threads)
    _write_snapshot(out, {"command": "segment", "checkpoint": str(args.checkpoint),
                          "inputs": [str(p) for p in inputs],
                          "reference": str(args.reference) if args.reference else None})
    print(f"segmented {len(inputs)} slices into {out}")
    return 0


def _collect_session_maps(label_dir) -> dict[tuple, dict[int, pl.LabelMap]]:
    grouped: dict[tuple, dict[int, pl.LabelMap]] = {}
    for key, path in _labels_by_key(label_dir).items():
        subject, scan, slice_index = key
        grouped.setdefault((subject, slice_index), {})[scan] = pl.load_labels(path)
    return grouped


def cmd_evaluate(args) -> int:
    methods: dict[str, Path] = {}
    for spec in args.auto:
        if "=" in spec:
            name, _, directory = spec.partition("=")
        else:
            name, directory = Path(spec).name, spec
        methods[name] = Path(directory)
    reference = _labels_by_key(args.reference)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    table3: dict[str, dict] = {}
    table1: dict[str, dict] = {}
    for name, directory in methods.items():
        auto = _labels_by_key(directory)
        unmatched = sorted(set(reference) ^ set(auto))
        for key in unmatched:
            warnings.warn(f"{name}: slice {key} present on one side only; skipped")
        keys = sorted(set(reference) & set(auto))
        if not keys:
            raise ManifestError(f"{name}: no overlapping slices with the reference")

        def score(key, auto=auto):
            return M.evaluate_pair(pl.load_labels(auto[key]),
                                   pl.load_labels(reference[key]))

        rows = [r for group in _fan_out(score, keys, args.threads) for r in group]
        M.write_report_csv(rows, out / f"per_slice_{name}.csv")
        table3[name] = M.table3_summary(rows, GM)

        per_class: dict[int, dict] = {}
        sessions = M.session_stats(_collect_session_maps(directory),
                                   repositioned_scan=args.repositioned_scan) \
            if args.sessions else None
        for cls in (GM, WM):
            cls_rows = [r for r in rows if r.cls == cls]
            section = {"accuracy": {
                "dsc": M.mean_std([r.dsc for r in cls_rows]),
                "hd": M.mean_std([r.hd for r in cls_rows]),
            }}
            if sessions is not None:
                section["intra"] = sessions.block("intra", cls)
                section["inter"] = sessions.block("inter", cls)
            per_class[cls] = section
        table1[name] = per_class

        _write_position_series(rows, out / f"by_slice_position_{name}.csv")

    M.write_table3_csv(table3, out / "table3_summary.csv")
    M.write_table1_csv(table1, out / "table1_summary.csv")
    _write_snapshot(out, {"command": "evaluate",
                          "methods": {k: str(v) for k, v in methods.items()},
                          "reference": str(args.reference),
                          "sessions": bool(args.sessions),
                          "repositioned_scan": args.repositioned_scan})
    print(f"evaluation written to {out}")
    return 0


def _write_position_series(rows: list[M.SliceMetrics], path) -> None:
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["slice", "class", "dsc_mean", "dsc_std",
                         "hd_mean", "hd_std", "area_mean", "area_std"])
        positions = sorted({r.slice_index for r in rows})
        for pos in positions:
            for cls in (GM, WM):
                sel = [r for r in rows if r.slice_index == pos and r.cls == cls]
                if not sel:
                    continue
                dsc_m, dsc_s = M.mean_std([r.dsc for r in sel])
                hd_m, hd_s = M.mean_std([r.hd for r in sel])
                ar_m, ar_s = M.mean_std([r.area_mm2 for r in sel])
                writer.writerow([pos, pl.LABEL_NAMES[cls],
                                 f"{dsc_m:.6f}", f"{dsc_s:.6f}",
                                 f"{hd_m:.6f}", f"{hd_s:.6f}",
                                 f"{ar_m:.6f}", f"{ar_s:.6f}"])


def cmd_vote(args) -> int:
    if len(args.inputs) < 2:
        raise ConfigError("vote needs at least two label directories")
    keyed = [_labels_by_key(d) for d in args.inputs]
    common = set(keyed[0])
    for k in keyed[1:]:
        common &= set(k)
    if not common:
        raise ManifestError("no common slices across the input directories")
    out = Path(args.out)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for key in sorted(common):
        maps = [pl.load_labels(k[key]) for k in keyed]
        shapes = {m.classes.shape for m in maps}
        if len(shapes) > 1:
            raise ConfigError(f"slice {key}: inputs disagree on extent {shapes}")
        consensus = M.majority_vote([m.classes for m in maps], args.threshold)
        template = maps[0]
        pl.save_labels(pl.LabelMap(consensus, template.spacing_mm,
                                   template.subject_id, template.scan_index,
                                   template.slice_index, rater=255),
                       out / "labels" / f"{keyed[0][key].stem}_consensus.lbl")
    _write_snapshot(out, {"command": "vote",
                          "inputs": [str(d) for d in args.inputs],
                          "threshold": args.threshold})
    print(f"wrote {len(common)} consensus maps to {out}")
    return 0


def cmd_augment_preview(args) -> int:
    merged = _merged_config(args.profile, args.config, {"augment": {}})
    augment_config = AugmentConfig.from_dict(merged["augment"])
    rows = pl.read_inventory(Path(args.data) / "dataset.txt")
    if not rows:
        raise ManifestError("dataset inventory is empty")
    rng = np.random.default_rng(args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        row = rows[int(rng.integers(len(rows)))]
        slc = pl.load_slice(Path(args.data) / row.image_path)
        lbl = pl.load_labels(Path(args.data) / row.label_path)
        transform = sample_augmentation(rng, augment_config, slc.pixels.shape[:2])
        win_slc, win_lbl = apply_transform(slc, lbl, transform)
        pl.contour_overlay_png(win_slc.pixels[:, :, 0],
                               [(win_lbl.classes == GM, (255, 0, 0)),
                                (win_lbl.classes != 0, (0, 255, 0))],
                               out / f"augmented_{i:03d}.png")
    _write_snapshot(out, {"command": "augment-preview", "data": str(args.data),
                          "count": args.count, "seed": args.seed or 0,
                          "augment": augment_config.to_dict()})
    print(f"wrote {args.count} augmented previews to {out}")
    return 0


def cmd_metrics(args) -> int:
    auto = pl.load_labels(args.auto)
    ref = pl.load_labels(args.reference)
    rows = M.evaluate_pair(auto, ref)
    for row in rows:
        print(f"[{pl.LABEL_NAMES[row.cls]}]")
        for metric in M.TABLE3_METRICS + ("area",):
            value = row.value(metric)
            text = value.reason if isinstance(value, M.Undefined) else f"{value:.6f}"
            print(f"  {metric:>11}: {text}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        M.write_report_csv(rows, out / "pair_metrics.csv")
        _write_snapshot(out, {"command": "metrics", "auto": str(args.auto),
                              "reference": str(args.reference)})
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cordseg",
        description="Gray/white matter segmentation toolkit: phantom data, "
                    "recurrent network training, inference, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for per-slice fan-out")

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--scans", type=int, default=3)
    p.add_argument("--slices", type=int, default=6)
    p.add_argument("--raters", type=int, default=1)
    p.add_argument("--rater-flip", type=float, default=0.1)
    p.add_argument("--lobe-scale", type=float, default=None)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a segmentation model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=sorted(PROFILES), default="phantom")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lam", type=float, help="dice/cross-entropy mixing weight")
    p.add_argument("--variant", choices=["dl", "gdl", "gm_dl"])
    p.add_argument("--validation-interval", type=int)
    p.add_argument("--rater", type=int, default=None)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--train-subjects")
    p.add_argument("--val-subjects")
    p.add_argument("--test-subjects")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment slices with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="manual labels for overlay contours")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score label maps against a reference")
    common(p)
    p.add_argument("--auto", action="append", required=True,
                   metavar="NAME=DIR", help="method label directory (repeatable)")
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sessions", action="store_true",
                   help="compute intra/inter-session precision blocks")
    p.add_argument("--repositioned-scan", type=int, default=3)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("vote", help="majority-vote consensus of label dirs")
    common(p)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=int, default=2,
                   help="votes must strictly exceed this count")
    p.set_defaults(func=cmd_vote)

    p = sub.add_parser("augment-preview", help="render augmented windows")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=sorted(PROFILES), default="phantom")
    p.add_argument("-n", "--count", type=int, default=8)
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("metrics", help="pairwise metrics of two label files")
    common(p)
    p.add_argument("--auto", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as exc:
        print(f"cordseg: configuration error: {exc}", file=sys.stderr)
        return 2
    except CordsegError as exc:
        print(f"cordseg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
