"""Command-line pipeline: phantom dataset generation, preprocessing,
training, evaluation under named perturbation conditions, statistical
comparison, and figure/report emission.

Every command echoes its run manifest (the resolved arguments) into the
output directory and embeds the manifest digest in the CSVs and PNGs it
produces, so artifacts are traceable and runs with identical inputs and
seeds are reproducible byte-for-byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import augment, models, stats, train as train_mod, volio
from .metrics import MetricRecord, dice, psnr3d, read_metric_csv, ssim3d, write_metric_csv

HIST_BINS = np.linspace(-1.0, 1.0, 102)  # 101 bins over signed differences
FIG_DPI = 110


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()

# arguments that do not affect artifact content: left out of the digest so
# identical inputs + seed hash identically wherever the outputs land
_NON_INPUT_ARGS = ("func", "out", "save_pred", "verbose")


def _write_run_manifest(out_dir: Path, command: str, args_dict: dict) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    args = {k: v for k, v in args_dict.items() if k != "func"}
    digest = _digest(
        {"command": command, "args": {k: v for k, v in args.items() if k not in _NON_INPUT_ARGS}}
    )
    manifest = {"command": command, "args": args, "digest": digest}
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return digest


def _savefig(fig, path: Path, digest: str):
    fig.savefig(
        path,
        dpi=FIG_DPI,
        format="png",
        metadata={"Software": "streamfuse", "Description": f"manifest_digest:{digest}"},
    )
    plt.close(fig)


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(args) -> int:
    out = Path(args.out)
    digest = _write_run_manifest(out, "phantom", vars(args))
    level, width = args.window_level, args.window_width
    entries = []
    for i in range(args.count):
        pair = volio.make_phantom_pair(args.seed + i, tuple(args.shape))
        # export the source on the Hounsfield scale so the preprocess windowing
        # path round-trips back to the normalized values
        hu = pair.source.data * width + (level - width / 2.0)
        sid = pair.id
        volio.save_volume(out / f"{sid}_ct.nii.gz", volio.Volume(hu, intensity_units="HU"))
        volio.save_volume(out / f"{sid}_mri.nii.gz", pair.target)
        volio.save_volume(out / f"{sid}_mask.nii.gz", pair.mask)
        entries.append(
            {
                "id": sid,
                "source_path": f"{sid}_ct.nii.gz",
                "target_path": f"{sid}_mri.nii.gz",
                "mask_path": f"{sid}_mask.nii.gz",
            }
        )
    volio.write_manifest(out / "manifest.json", entries)
    print(f"wrote {len(entries)} phantom pairs to {out} (digest {digest[:12]})")
    return 0


# ---------------------------------------------------------------------------
# preprocess


def cmd_preprocess(args) -> int:
    entries = volio.read_manifest(args.manifest)
    if not entries:
        print("no samples in manifest", file=sys.stderr)
        return 2
    out = Path(args.out)
    digest = _write_run_manifest(out, "preprocess", vars(args))
    base = Path(args.manifest).parent
    shape = tuple(args.shape)
    new_entries, errors, provenance = [], [], []
    for e in entries:
        try:
            src = volio.load_volume(base / e["source_path"])
            src.intensity_units = "HU"
            src = volio.hu_window(
                volio.resample_trilinear(src, shape), args.window_level, args.window_width
            )
            tgt = volio.normalize_intensity(
                volio.resample_trilinear(volio.load_volume(base / e["target_path"]), shape)
            )
            entry = {
                "id": e["id"],
                "source_path": f"{e['id']}_ct.nii.gz",
                "target_path": f"{e['id']}_mri.nii.gz",
            }
            volio.save_volume(out / entry["source_path"], src)
            volio.save_volume(out / entry["target_path"], tgt)
            if e.get("mask_path"):
                mask = volio.resample_nearest(volio.load_volume(base / e["mask_path"]), shape)
                mask.data = (mask.data > 0.5).astype(np.float64)
                entry["mask_path"] = f"{e['id']}_mask.nii.gz"
                volio.save_volume(out / entry["mask_path"], mask)
            new_entries.append(entry)
            provenance.append(
                {
                    "id": e["id"],
                    "shape": list(shape),
                    "window_level": args.window_level,
                    "window_width": args.window_width,
                }
            )
        except Exception as exc:  # per-file error report
            errors.append(f"{e.get('id', '?')}: {exc}")
    volio.write_manifest(out / "manifest.json", new_entries)
    (out / "provenance.json").write_text(json.dumps({"digest": digest, "samples": provenance}, indent=2) + "\n")
    if errors:
        for line in errors:
            print(f"error: {line}", file=sys.stderr)
        return 1
    print(f"preprocessed {len(new_entries)} samples into {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    train_samples = volio.load_manifest_samples(args.train_manifest)
    val_samples = volio.load_manifest_samples(args.val_manifest)
    if not train_samples or not val_samples:
        print("no samples in manifest", file=sys.stderr)
        return 2
    out = Path(args.out)
    digest = _write_run_manifest(out, "train", vars(args))
    input_shape = train_samples[0].source.shape
    config = models.ModelConfig(
        variant=args.variant,
        input_shape=input_shape,
        widths=tuple(args.widths),
        crop_shape=tuple(args.crop) if args.crop else None,
        controller_hidden=args.controller_hidden,
    )
    train_mod.set_global_determinism(args.seed)
    model = models.build(config)
    try:
        _, state = train_mod.train(
            model,
            train_samples,
            val_samples,
            epochs=args.epochs,
            lr0=args.lr,
            seed=args.seed,
            out_dir=out,
            log=print if args.verbose else None,
        )
    except train_mod.TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    train_mod.write_history_csv(out / "history.csv", state.batch_rows, manifest_digest=digest)
    print(
        f"trained {args.variant} for {state.epoch} epochs; best val loss "
        f"{state.best_val_loss:.6f} (epoch {state.best_epoch}); checkpoint in {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    if args.condition not in augment.CONDITIONS:
        print(f"unknown condition {args.condition!r}", file=sys.stderr)
        return 2
    samples = volio.load_manifest_samples(args.test_manifest)
    if not samples:
        print("no samples in manifest", file=sys.stderr)
        return 2
    out = Path(args.out)
    digest = _write_run_manifest(out, "eval", vars(args))
    model, meta = models.load_checkpoint(args.checkpoint)
    method = model.config.variant
    rng = augment.RngStream(args.seed)
    records, spec_log, alpha_log = [], [], {}
    pred_dir = Path(args.save_pred) if args.save_pred else None
    for sample in samples:
        src = torch.from_numpy(sample.source.data.astype(np.float32))[None, ..., None]
        tgt = sample.target.data
        perturbed, spec = augment.apply_condition(src, args.condition, rng, model.config.crop_shape)
        spec_log.append({"id": sample.id, "spec": None if spec is None else json.loads(spec.to_json())})
        with torch.no_grad():
            inputs = train_mod._model_inputs(model, perturbed, rng, training=False)
            pred = model(inputs)
        pred_np = pred[0, ..., 0].double().numpy()
        dice_value = None
        if sample.mask is not None and args.dice_interval:
            lo, hi = args.dice_interval
            pred_mask = ((pred_np >= lo) & (pred_np <= hi)).astype(np.float64)
            dice_value = dice(pred_mask, sample.mask.data)
        records.append(
            MetricRecord.from_volumes(
                sample.id, method, args.condition, args.split, pred_np, tgt, dice_value
            )
        )
        if method == "bd" and model.last_alphas is not None:
            alpha_log[sample.id] = [float(a) for a in model.last_alphas[0]]
        if pred_dir is not None:
            volio.save_volume(
                pred_dir / f"{sample.id}.nii.gz", volio.Volume(pred_np, intensity_units="normalized")
            )
    csv_path = out / f"metrics_{method}_{args.condition}.csv"
    write_metric_csv(csv_path, records, manifest_digest=digest)
    (out / "conditions.json").write_text(json.dumps({"digest": digest, "samples": spec_log}, indent=2) + "\n")
    if alpha_log:
        target = pred_dir if pred_dir is not None else out
        target.mkdir(parents=True, exist_ok=True)
        (target / "alphas.json").write_text(json.dumps(alpha_log, indent=2) + "\n")
    print(f"evaluated {len(records)} samples -> {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args) -> int:
    if len(args.csvs) < 2:
        print("compare needs at least two metric CSVs", file=sys.stderr)
        return 2
    out = Path(args.out)
    digest = _write_run_manifest(out, "compare", vars(args))
    records = []
    for path in args.csvs:
        records.extend(read_metric_csv(path))
    by_method: dict[str, dict[str, MetricRecord]] = {}
    conditions, splits = set(), set()
    for r in records:
        by_method.setdefault(r.method, {})[r.sample_id] = r
        conditions.add(r.condition)
        splits.add(r.split)
    if len(by_method) < 2:
        print("compare needs at least two distinct methods", file=sys.stderr)
        return 2
    id_sets = {m: set(d) for m, d in by_method.items()}
    common = set.intersection(*id_sets.values())
    offenders = {m: sorted(ids ^ common) for m, ids in id_sets.items() if ids != common}
    if offenders:
        print(f"sample id mismatch across methods: {offenders}", file=sys.stderr)
        return 2
    ids = sorted(common)
    reports = {}
    for metric, attr in (("psnr", "psnr_db"), ("ssim", "ssim")):
        groups = {
            m: np.array([getattr(by_method[m][i], attr) for i in ids]) for m in by_method
        }
        try:
            report = stats.build_stat_report(groups, metric, reference=args.reference, alpha=args.alpha)
        except stats.StatError as exc:
            print(f"cannot compare {metric}: {exc}", file=sys.stderr)
            return 2
        reports[metric] = report
        (out / f"stats_{metric}.json").write_text(report.to_json() + "\n")
        table = stats.render_table(report)
        header = (
            f"# conditions: {sorted(conditions)} splits: {sorted(splits)} "
            f"digest: {digest}\n"
        )
        (out / f"stats_{metric}.txt").write_text(header + table + "\n")
        print(f"== {metric} ==")
        print(table)
    return 0


# ---------------------------------------------------------------------------
# report figures


def _load_method_volumes(pred_dir: Path, target_dir: Path):
    """pred_dir holds one subdirectory per method with <sample_id>.nii.gz
    files; target_dir holds the matching ground-truth volumes."""
    methods = sorted(p.name for p in pred_dir.iterdir() if p.is_dir())
    if not methods:
        raise FileNotFoundError(f"no method subdirectories under {pred_dir}")
    data = {}
    for method in methods:
        pairs = []
        for pred_path in sorted((pred_dir / method).glob("*.nii.gz")):
            sid = pred_path.name.replace(".nii.gz", "")
            target_path = target_dir / pred_path.name
            if not target_path.exists():
                raise FileNotFoundError(f"no target volume for {method}/{sid}")
            pred = volio.load_volume(pred_path).data
            tgt = volio.load_volume(target_path).data
            if pred.shape != tgt.shape:
                raise volio.ShapeError(f"{method}/{sid}: pred {pred.shape} vs target {tgt.shape}")
            pairs.append((sid, pred, tgt))
        data[method] = pairs
    return data


def cmd_report(args) -> int:
    out = Path(args.out)
    digest = _write_run_manifest(out, "report", vars(args))
    data = _load_method_volumes(Path(args.pred_dir), Path(args.target_dir))
    methods = sorted(data)

    # central-slice |pred - target| heatmaps on one shared color scale
    slices = {}
    for method, pairs in data.items():
        sid, pred, tgt = pairs[0]
        diff = np.abs(pred - tgt)
        idx = diff.shape[2] // 2 if args.slice_index is None else args.slice_index
        slices[method] = diff[:, :, idx]
    vmax = max(float(s.max()) for s in slices.values()) or 1.0
    fig, axes = plt.subplots(1, len(methods), figsize=(3.2 * len(methods), 3.2), squeeze=False)
    for ax, method in zip(axes[0], methods):
        im = ax.imshow(slices[method].T, vmin=0.0, vmax=vmax, cmap="inferno", origin="lower")
        ax.set_title(method)
        ax.axis("off")
    fig.colorbar(im, ax=axes[0], shrink=0.8, label="|pred - target|")
    _savefig(fig, out / "error_heatmaps.png", digest)

    # signed pixel-difference histograms over shared bins
    fig, axes = plt.subplots(1, len(methods), figsize=(3.2 * len(methods), 2.8), squeeze=False)
    for ax, method in zip(axes[0], methods):
        diffs = np.concatenate([(pred - tgt).ravel() for _, pred, tgt in data[method]])
        ax.hist(diffs, bins=HIST_BINS, color="steelblue")
        ax.set_title(method)
        ax.set_xlabel("pixel difference")
    _savefig(fig, out / "difference_histograms.png", digest)

    # PSNR / SSIM boxplots per method
    for metric, fn in (("psnr", lambda p, t: min(psnr3d(p, t), 100.0)), ("ssim", lambda p, t: float(ssim3d(p, t)))):
        values = [[fn(pred, tgt) for _, pred, tgt in data[m]] for m in methods]
        fig, ax = plt.subplots(figsize=(1.2 * len(methods) + 2, 3.2))
        ax.boxplot(values, tick_labels=methods)
        ax.set_ylabel(metric.upper())
        _savefig(fig, out / f"boxplot_{metric}.png", digest)

    # per-sample attention-weight bars when a method logged alphas
    for method in methods:
        alphas_path = Path(args.pred_dir) / method / "alphas.json"
        if not alphas_path.exists():
            continue
        alphas = json.loads(alphas_path.read_text())
        arr = np.array(list(alphas.values()))
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        streams = ["flip", "rot90", "crop", "intensity"]
        ax.bar(streams, arr.mean(axis=0), yerr=arr.std(axis=0), color="slategray", capsize=3)
        ax.set_ylabel("mean attention weight")
        ax.set_title(f"{method}: per-stream attention")
        _savefig(fig, out / f"alphas_{method}.png", digest)

    print(f"figures written to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic paired NIfTI dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--shape", type=int, nargs=3, default=list(volio.DEFAULT_SHAPE))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window-level", type=float, default=40.0)
    p.add_argument("--window-width", type=float, default=80.0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="resample, window (CT) and normalize a dataset")
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--shape", type=int, nargs=3, default=list(volio.DEFAULT_SHAPE))
    p.add_argument("--window-level", type=float, default=40.0)
    p.add_argument("--window-width", type=float, default=80.0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--variant", choices=models.VARIANTS, default="na")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--widths", type=int, nargs=3, default=[64, 128, 256])
    p.add_argument("--crop", type=int, nargs=3, default=None)
    p.add_argument("--controller-hidden", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a perturbation condition")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--condition", default="none", choices=augment.CONDITIONS)
    p.add_argument("--split", default="unseen", choices=("unseen", "predefined"))
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--save-pred", default=None)
    p.add_argument(
        "--dice-interval",
        type=float,
        nargs=2,
        default=list(volio.GRAY_MATTER_INTERVAL),
        help="intensity interval segmenting the predicted volume for Dice against supplied masks",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="statistical comparison across method metric CSVs")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--reference", default=None)
    p.add_argument("--alpha", type=float, default=stats.ALPHA)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="emit heatmap/histogram/boxplot figures")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--target-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slice-index", type=int, default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
