"""Command-line interface.

Subcommands: simulate, train, evaluate, benchmark, spatial-bias, fig1,
render. All randomness flows through explicit seeds (flags or config
files); nothing reads the wall clock, so reruns are bit-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import harness, massuni
from .dlm import (BERNOULLI, GAUSSIAN, DETERMINISTIC, LABELS_ONLY, DlmConfig,
                  calibrate_threshold, infer_substrate, load_checkpoint,
                  save_checkpoint, train)
from .grids import BINARY, REAL, VolumeGrid, load_volume, save_volume
from .metrics import evaluate_masks, surface_voxels
from .simulate import (Blob, Dataset, DeficitSpec, LesionSpec, SubstrateSpec,
                       generate_lesions, make_splits, realize_substrate,
                       simulate_dataset)


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _set_threads(args) -> None:
    if getattr(args, "threads", None):
        import torch
        torch.set_num_threads(args.threads)


# ---------------------------------------------------------------------------
# simulate


def _dataset_spec_from_config(cfg: dict, seed_override=None):
    dims = tuple(cfg["dims"])
    seed = seed_override if seed_override is not None else cfg.get("seed", 0)
    ss = np.random.SeedSequence(entropy=int(seed))
    lesion_seed, deficit_seed = (int(s) for s in ss.generate_state(2, np.uint64))
    lspec = LesionSpec(dims=dims, seed=lesion_seed, **cfg["lesions"])
    subs = []
    for s in cfg["substrates"]:
        subs.append(SubstrateSpec(
            dims=dims,
            blobs=tuple(Blob(**b) for b in s["blobs"]),
            formula=s["formula"],
            threshold=s.get("threshold", 0.5)))
    dspec = DeficitSpec(seed=deficit_seed, **cfg.get("deficit", {}))
    return dims, lspec, subs, dspec, int(seed)


def cmd_simulate(args) -> int:
    if not os.path.exists(args.config):
        return _fail(f"spec file not found: {args.config}")
    cfg = _load_json(args.config)
    dims, lspec, subs, dspec, seed = _dataset_spec_from_config(cfg, args.seed)
    lesions = generate_lesions(lspec)
    grids = [realize_substrate(s)[1] for s in subs]
    ds = simulate_dataset(lesions, grids if len(grids) > 1 else grids[0], dspec)

    os.makedirs(args.out, exist_ok=True)
    split_of = {}
    for name, idx in ds.splits.items():
        for i in idx:
            split_of[int(i)] = name
    files = []
    for i, lesion in enumerate(ds.lesions):
        fname = f"lesion_{i:05d}.vol"
        save_volume(lesion, os.path.join(args.out, fname))
        files.append(fname)
    if len(grids) == 1:
        gt = grids[0]
    else:
        union = grids[0].data.astype(bool) | grids[1].data.astype(bool)
        gt = VolumeGrid.binary(union.astype(np.uint8))
    save_volume(gt, os.path.join(args.out, "ground_truth.vol"))
    with open(os.path.join(args.out, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "source_tag", "split"])
        for i in range(ds.n):
            w.writerow([i, repr(float(ds.labels[i])), int(ds.source_tag[i]),
                        split_of[i]])
    manifest = {
        "spec": cfg,
        "seed": seed,
        "dims": list(dims),
        "label_kind": ds.label_kind,
        "n": ds.n,
        "lesion_files": files,
        "ground_truth": "ground_truth.vol",
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {ds.n} lesions to {args.out}")
    return 0


def load_dataset_dir(path: str) -> Dataset:
    """Rebuild a Dataset from a simulate output directory."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    lesions = [load_volume(os.path.join(path, f)) for f in manifest["lesion_files"]]
    labels = []
    tags = []
    splits = {"train": [], "val": [], "calib": []}
    with open(os.path.join(path, "labels.csv")) as fh:
        for row in csv.DictReader(fh):
            i = int(row["id"])
            labels.append(float(row["label"]))
            tags.append(int(row["source_tag"]))
            splits[row["split"]].append(i)
    return Dataset(
        lesions=lesions,
        labels=np.array(labels),
        label_kind=manifest["label_kind"],
        source_tag=np.array(tags, dtype=np.int64),
        splits={k: np.array(v, dtype=np.intp) for k, v in splits.items()},
    )


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    _set_threads(args)
    if not os.path.isdir(args.data):
        return _fail(f"dataset directory not found: {args.data}")
    ds = load_dataset_dir(args.data)
    overrides = _load_json(args.config) if args.config else {}
    overrides.setdefault("label_kind",
                         BERNOULLI if ds.label_kind == BINARY else GAUSSIAN)
    if args.ablation == "labels_only":
        overrides["elbo_terms"] = LABELS_ONLY
    elif args.ablation == "deterministic":
        overrides["latent_mode"] = DETERMINISTIC
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = DlmConfig(dims=ds.dims, **overrides)
    trained = train(ds, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(trained, os.path.join(args.out, "checkpoint.pt"))
    cols = ["epoch", "train_loss", "label_loglik"]
    if cfg.elbo_terms != LABELS_ONLY:
        cols.append("lesion_loglik")
    if cfg.latent_mode != DETERMINISTIC:
        cols.append("kl")
    cols.append("val_label_loglik")
    with open(os.path.join(args.out, "training_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in trained.log:
            d = rec.to_dict()
            w.writerow([d[c] if c == "epoch" else repr(float(d[c])) for c in cols])
    print(f"best epoch {trained.best_epoch} "
          f"(val label loglik {trained.best_val_label_loglik:.4f})")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    _set_threads(args)
    if not os.path.exists(args.truth):
        return _fail(f"ground truth not found: {args.truth}")
    truth = load_volume(args.truth)
    os.makedirs(args.out, exist_ok=True)
    if args.pred:
        mask = load_volume(args.pred)
        threshold = None
    elif args.model and args.data:
        trained = load_checkpoint(args.model)
        ds = load_dataset_dir(args.data)
        cal = np.asarray(ds.splits["calib"])
        inferred = calibrate_threshold(trained,
                                       [ds.lesions[i] for i in cal],
                                       ds.labels[cal])
        mask = inferred.mask
        threshold = inferred.threshold
        save_volume(inferred.mean_map, os.path.join(args.out, "substrate_mean.vol"))
    else:
        return _fail("need either --pred, or --model with --data")
    save_volume(VolumeGrid.binary(mask.data.astype(np.uint8)),
                os.path.join(args.out, "substrate_mask.vol"))
    report = evaluate_masks(mask.data, truth.data)
    blob = report.to_dict()
    blob["threshold"] = threshold
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"dice {report.dice:.4f}")
    return 0


# ---------------------------------------------------------------------------
# benchmark / spatial-bias / fig1


def cmd_benchmark(args) -> int:
    _set_threads(args)
    if not os.path.exists(args.config):
        return _fail(f"spec file not found: {args.config}")
    with open(args.config) as fh:
        spec = harness.ExperimentSpec.from_json(fh.read())
    if args.seed is not None:
        spec.master_seed = args.seed
    rows = harness.run_experiment(spec)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    harness.write_results_csv(rows, args.out)
    n_excl = sum(r.excluded for r in rows)
    print(f"{len(rows)} rows ({n_excl} excluded) -> {args.out}")
    return 0


def cmd_spatial_bias(args) -> int:
    _set_threads(args)
    if not os.path.exists(args.config):
        return _fail(f"spec file not found: {args.config}")
    cfg = _load_json(args.config)
    dims = tuple(cfg["dims"])
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    lspec = LesionSpec(dims=dims, seed=int(seed), **cfg["lesions"])
    lesions = generate_lesions(lspec)
    if "targets" in cfg:
        targets = [tuple(t) for t in cfg["targets"]]
    else:
        targets = harness.eligible_targets(lesions, stride=cfg.get("stride", 1))
    if cfg.get("max_targets"):
        targets = targets[:cfg["max_targets"]]
    rows = harness.run_spatial_bias(
        lesions, targets,
        methods=tuple(cfg.get("methods", ("vlsm_fisher", "dlm"))),
        master_seed=int(seed),
        n_perm=cfg.get("n_perm", 500),
        dlm_overrides=cfg.get("dlm", {}))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "method", "displacement", "mask_voxels", "wall_secs"])
        for r in rows:
            w.writerow(["x".join(str(c) for c in r.target), r.method,
                        repr(float(r.displacement)), r.mask_voxels,
                        repr(float(r.wall_secs))])
    for method, s in harness.summarize_spatial_bias(rows).items():
        print(f"{method}: displacement {s['mean']:.2f} +/- {s['sd']:.2f} "
              f"(n={s['n']}, empty={s['n_empty']})")
    return 0


def cmd_fig1(args) -> int:
    _set_threads(args)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for lesion_mode in ("simple", "complex"):
        for substrate_mode in ("simple", "complex"):
            panel = harness.run_fig1_replication(lesion_mode, substrate_mode,
                                                 seed=args.seed or 0)
            tag = f"{lesion_mode}_{substrate_mode}"
            save_volume(panel.stat_map.statistic,
                        os.path.join(args.out, f"stat_{tag}.vol"))
            save_volume(panel.stat_map.significant,
                        os.path.join(args.out, f"sig_{tag}.vol"))
            save_volume(panel.ground_truth,
                        os.path.join(args.out, f"gt_{tag}.vol"))
            rows.append([lesion_mode, substrate_mode,
                         repr(float(panel.displacement)), panel.n_significant,
                         repr(float(panel.stat_map.threshold))])
            print(f"{tag}: displacement "
                  f"{panel.displacement:.2f} ({panel.n_significant} voxels)")
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lesion_mode", "substrate_mode", "displacement",
                    "n_significant", "threshold"])
        w.writerows(rows)
    return 0


# ---------------------------------------------------------------------------
# render


def render_pgm(volume: VolumeGrid, slice_axis=None, slice_index=None,
               overlay: VolumeGrid = None) -> str:
    """ASCII P2 graymap of a plane, values scaled to 0..255.

    3D volumes need a slice; the overlay's surface outline is burned in
    at 255.
    """
    data = volume.data
    if data.ndim == 3:
        if slice_axis is None or slice_index is None:
            raise ValueError("3D volumes need --slice-axis and --slice-index")
        if not (0 <= slice_index < data.shape[slice_axis]):
            raise ValueError(f"slice index {slice_index} out of bounds for "
                             f"axis of extent {data.shape[slice_axis]}")
        data = np.take(data, slice_index, axis=slice_axis)
    data = data.astype(np.float64)
    vmax = data.max()
    if vmax > 0:
        img = np.rint(data / vmax * 255).astype(int)
    else:
        img = np.zeros(data.shape, dtype=int)
    if overlay is not None:
        odata = overlay.data
        if odata.ndim == 3:
            odata = np.take(odata, slice_index, axis=slice_axis)
        outline = np.zeros(odata.shape, dtype=bool)
        pts = surface_voxels(odata.astype(bool)).astype(int)
        if len(pts):
            outline[tuple(pts.T)] = True
        if outline.shape != img.shape:
            raise ValueError("overlay shape mismatch")
        img[outline] = 255
    lines = ["P2", f"{img.shape[1]} {img.shape[0]}", "255"]
    for row in img:
        lines.append(" ".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def cmd_render(args) -> int:
    if not os.path.exists(args.input):
        return _fail(f"volume not found: {args.input}")
    volume = load_volume(args.input)
    overlay = load_volume(args.overlay) if args.overlay else None
    try:
        text = render_pgm(volume, args.slice_axis, args.slice_index, overlay)
    except ValueError as e:
        return _fail(str(e))
    with open(args.out, "w") as fh:
        fh.write(text)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ldmap",
        description="Lesion-deficit mapping: simulation, model training, "
                    "mass-univariate baselines, benchmarks and rendering.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=None, help="master seed (default: from config or 0)")
        sp.add_argument("--threads", type=int, default=None, help="torch CPU threads (default: library default)")
        sp.add_argument("--out", required=out_required, help="output path")

    sp = sub.add_parser("simulate", help="generate a dataset on disk")
    sp.add_argument("--config", required=True, help="dataset spec JSON")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="fit the latent-substrate model")
    sp.add_argument("--data", required=True, help="dataset directory from `simulate`")
    sp.add_argument("--config", default=None, help="model config overrides JSON")
    sp.add_argument("--ablation", choices=["labels_only", "deterministic"],
                    default=None, help="objective ablation (default: full)")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score an inferred substrate")
    sp.add_argument("--truth", required=True, help="ground-truth VOL1 mask")
    sp.add_argument("--pred", default=None, help="predicted VOL1 mask")
    sp.add_argument("--model", default=None, help="model checkpoint")
    sp.add_argument("--data", default=None, help="dataset directory (calibration)")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("benchmark", help="run an experiment matrix")
    sp.add_argument("--config", required=True, help="experiment spec JSON")
    common(sp)
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("spatial-bias", help="single-voxel displacement scan")
    sp.add_argument("--config", required=True, help="scan spec JSON")
    common(sp)
    sp.set_defaults(func=cmd_spatial_bias)

    sp = sub.add_parser("fig1", help="four-condition complexity grid")
    common(sp)
    sp.set_defaults(func=cmd_fig1)

    sp = sub.add_parser("render", help="volume slice to ASCII graymap")
    sp.add_argument("--input", required=True, help="VOL1 volume")
    sp.add_argument("--overlay", default=None, help="binary mask drawn as outline")
    sp.add_argument("--slice-axis", type=int, default=None, help="3D: axis to slice")
    sp.add_argument("--slice-index", type=int, default=None, help="3D: slice index")
    common(sp)
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
