"""Command-line interface: one subcommand per pipeline stage.

All stages share a work directory::

    WORKDIR/preprocess/   slice_NNN.std (standardized cache), pores_NNN.pgm
    WORKDIR/superpixels/  tiles.json, sp_NNNN.png (16-bit ids), overlay_NNNN.png
    WORKDIR/train/        last.ckpt, best.ckpt, loss.csv[, labels/]
    WORKDIR/predict/      scores_NNN.npy (raw stitched network scores)
    WORKDIR/postprocess/  labels_NNN.png (three-phase), agg_<method>_NNN.png,
                          thresholds_aggregate.csv[, thresholds_porosity.csv]
    WORKDIR/evaluate/     scores.csv, agreement_NNN.png

Every stage directory holds a ``stage.json`` with the hash of the
configuration that produced it; a stage refuses inputs made under a
different configuration unless ``--force`` is given.

Exit codes: 0 success, 2 usage or configuration error, 3 missing input,
4 invalid data, 5 stale upstream artifact.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datapipe, imageio, metrics, optim, postproc, unet
from .config import ConfigError, RunConfig
from .estimator import SelfAnnotatingSegmenter
from .nn import ShapeError
from .selflabel import fixed_mask_from_binary, normalize_channels
from .slic import SuperpixelMap, boundary_overlay, slic_segment, target_count_from_physical

THREADS_ENV = "SELFSEG_THREADS"
PHASE_NAMES = {0: "aggregate", 1: "mortar", 2: "porosity"}


class StaleArtifactError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# stage bookkeeping

def _stage_dir(workdir, stage):
    return Path(workdir) / stage


def write_stage(workdir, stage, cfg: RunConfig, **info):
    d = _stage_dir(workdir, stage)
    d.mkdir(parents=True, exist_ok=True)
    doc = {"stage": stage, "config_hash": cfg.stage_hash(stage), **info}
    (d / "stage.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def read_stage(workdir, stage, cfg: RunConfig, force=False):
    path = _stage_dir(workdir, stage) / "stage.json"
    if not path.exists():
        raise FileNotFoundError(f"missing {stage} output: {path} (run '{stage}' first)")
    doc = json.loads(path.read_text())
    expected = cfg.stage_hash(stage)
    if doc.get("config_hash") != expected and not force:
        raise StaleArtifactError(
            f"{path} was produced with config hash {doc.get('config_hash')}, current "
            f"configuration gives {expected}; rerun '{stage}' or pass --force")
    return doc


def _slice_name(prefix, i, ext):
    return f"{prefix}_{i:03d}.{ext}"


def load_standardized(workdir, cfg, force=False):
    doc = read_stage(workdir, "preprocess", cfg, force)
    d = _stage_dir(workdir, "preprocess")
    slices, pores = [], []
    for i in range(doc["n_slices"]):
        img, _, _ = imageio.read_cache(d / _slice_name("slice", i, "std"))
        slices.append(img)
        pores.append(imageio.read_pgm(d / _slice_name("pores", i, "pgm")) > 0)
    return doc, np.stack(slices), np.stack(pores)


# --------------------------------------------------------------------------
# subcommands

def cmd_phantom(args, cfg):
    spec = datapipe.PhantomSpec(
        n_slices=args.n_slices, height=args.size, width=args.size, seed=args.seed,
        n_aggregates=args.n_aggregates, n_pores=args.n_pores, noise_std=args.noise,
        mortar_mean=args.mortar_mean, aggregate_mean=args.aggregate_mean,
        smooth_sigma=args.smooth_sigma, brightness_drift=args.drift)
    stack, gt, _ = datapipe.gen_phantom(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files, gts = [], []
    for i, (img, lab) in enumerate(zip(stack.slices, gt)):
        name = _slice_name("slice", i, args.format)
        imageio.write_image(out / name, img)
        gname = _slice_name("gt", i, "png")
        imageio.write_label_image(out / gname, lab)
        files.append(name)
        gts.append(gname)
    imageio.write_manifest(out / "manifest.json", stack.sample_id, files, stack.pixel_size_mm,
                           stack.clip_thresholds,
                           extra={"ground_truth": gts, "classes": PHASE_NAMES})
    print(f"wrote {len(files)} phantom slices to {out}")


def cmd_preprocess(args, cfg):
    raw = imageio.load_stack(args.manifest)
    std, pores = datapipe.preprocess_stack(raw)
    d = _stage_dir(args.workdir, "preprocess")
    d.mkdir(parents=True, exist_ok=True)
    for i, (img, m, s) in enumerate(zip(std.slices, std.means, std.stds)):
        imageio.write_cache(d / _slice_name("slice", i, "std"), img, m, s)
        imageio.write_pgm(d / _slice_name("pores", i, "pgm"), pores[i].astype(np.uint8))
    write_stage(args.workdir, "preprocess", cfg, manifest=str(Path(args.manifest).resolve()),
                n_slices=len(std), shape=list(std.slices.shape[1:]), sample_id=std.sample_id,
                pixel_size_mm=std.pixel_size_mm, means=std.means, stds=std.stds)
    print(f"standardized {len(std)} slices into {d}")


def _n_segments(cfg, tile, pixel_size_mm):
    if cfg.slic.n_segments > 0:
        return cfg.slic.n_segments
    return target_count_from_physical(tile, tile, pixel_size_mm, cfg.slic.target_mm)


def cmd_superpixels(args, cfg):
    pre, slices, _ = load_standardized(args.workdir, cfg, args.force)
    t = cfg.tiling
    h, w = slices.shape[1:]
    specs = [datapipe.tile_positions(h, w, t.tile, t.inset, slice_id=i) for i in range(len(slices))]
    tiles, flat = datapipe.extract_tiles(slices, specs)
    k = _n_segments(cfg, t.tile, pre["pixel_size_mm"])
    maps = [slic_segment(tile, k, cfg.slic.compactness, cfg.slic.iters) for tile in tiles]
    n_train, _ = datapipe.split_counts(len(tiles), (cfg.train.split_train, cfg.train.split_val))
    order = np.random.default_rng(cfg.run.seed).permutation(len(tiles))
    train_ids = set(order[:n_train].tolist())
    d = _stage_dir(args.workdir, "superpixels")
    d.mkdir(parents=True, exist_ok=True)
    records = []
    for j, (spec, sp) in enumerate(zip(flat, maps)):
        name = f"sp_{j:04d}.png"
        imageio.write_png(d / name, sp.ids.astype(np.uint16))
        if args.overlays:
            imageio.write_png(d / f"overlay_{j:04d}.png", boundary_overlay(tiles[j], sp))
        records.append({"tile": j, "slice": spec.slice_id, "row": spec.row, "col": spec.col,
                        "size": spec.size, "tag": spec.tag, "count": sp.count, "map": name,
                        "pool": "train" if j in train_ids else "val"})
    (d / "tiles.json").write_text(json.dumps(records, indent=1) + "\n")
    write_stage(args.workdir, "superpixels", cfg, n_tiles=len(records), n_segments=k,
                n_train=n_train, n_val=len(records) - n_train)
    print(f"{len(records)} tiles ({n_train} train / {len(records) - n_train} val), "
          f"{k} superpixels requested per tile")


def load_tiles(workdir, cfg, force=False):
    """Rebuild training and validation pools from the superpixel stage."""
    _, slices, pores = load_standardized(workdir, cfg, force)
    read_stage(workdir, "superpixels", cfg, force)
    d = _stage_dir(workdir, "superpixels")
    records = json.loads((d / "tiles.json").read_text())
    pools = {}
    for pool in ("train", "val"):
        recs = [r for r in records if r["pool"] == pool]
        if not recs:
            pools[pool] = None
            continue
        specs = [datapipe.TileSpec(r["row"], r["col"], r["size"], r["slice"], r["tag"]) for r in recs]
        images = np.stack([s.crop(slices[s.slice_id]) for s in specs])
        maps = []
        for r in recs:
            ids = imageio.read_png(d / r["map"]).astype(np.int32)
            maps.append(SuperpixelMap(ids, r["count"]))
        fixed = None
        if cfg.label_mode == "SS":
            fixed = np.stack([fixed_mask_from_binary(s.crop(pores[s.slice_id]),
                                                     cfg.postproc.porosity_channel)
                              for s in specs])
        pools[pool] = datapipe.TilePool(images, maps, fixed, specs)
    if pools["train"] is None:
        raise ValueError("superpixel stage assigned no tiles to training")
    return pools["train"], pools["val"]


def estimator_from_config(cfg: RunConfig, checkpoint_dir=None, verbose=False):
    u, t = cfg.unet, cfg.train
    return SelfAnnotatingSegmenter(
        mode=cfg.run.mode, depth=u.depth, base_features=u.base_features, dropout=u.dropout_p,
        dropout_rescale=u.dropout_rescale, lr=t.lr0, lr_min=t.lr_min, momentum=t.momentum,
        batch_size=t.batch_size, max_epochs=t.max_epochs, restart_epochs=t.restart0_epochs,
        restart_mult=t.restart_mult, reset_velocity_on_restart=t.reset_velocity_on_restart,
        validation_split=(t.split_train, t.split_val), n_segments=cfg.slic.n_segments,
        compactness=cfg.slic.compactness, slic_iters=cfg.slic.iters, tile_size=cfg.tiling.tile,
        overlap=cfg.tiling.overlap, dtype=cfg.run.dtype, random_state=cfg.run.seed,
        checkpoint_dir=checkpoint_dir, verbose=verbose)


def cmd_train(args, cfg):
    train_pool, val_pool = load_tiles(args.workdir, cfg, args.force)
    dtype = np.dtype(cfg.run.dtype)
    train_pool.images = train_pool.images.astype(dtype)
    if val_pool is not None:
        val_pool.images = val_pool.images.astype(dtype)
    d = _stage_dir(args.workdir, "train")
    if not args.resume:
        for name in ("last.ckpt", "best.ckpt", "loss.csv"):
            (d / name).unlink(missing_ok=True)
    on_labels = None
    if args.label_snapshots > 0:
        snap = d / "labels"

        def on_labels(iteration, idx, labels):
            if iteration % args.label_snapshots == 0:
                for j, lab in zip(idx, labels):
                    imageio.write_label_image(snap / f"iter{iteration:06d}_tile{int(j):04d}.png", lab)

    est = estimator_from_config(cfg, checkpoint_dir=d, verbose=not args.quiet)
    est.seed_ = cfg.run.seed
    est._fit_pools(train_pool, val_pool, resume=args.resume, on_labels=on_labels)
    write_stage(args.workdir, "train", cfg, best_epoch=est.best_epoch_,
                epochs=len(est.loss_curve_), best_val_loss=est.state_.best_val_loss)
    print(f"trained {len(est.loss_curve_)} epochs; best epoch {est.best_epoch_}")


def cmd_predict(args, cfg):
    _, slices, _ = load_standardized(args.workdir, cfg, args.force)
    read_stage(args.workdir, "train", cfg, args.force)
    ckpt = _stage_dir(args.workdir, "train") / "best.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params, _, _ = unet.load_checkpoint(ckpt)
    d = _stage_dir(args.workdir, "predict")
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(slices):
        scores = datapipe.predict_slice(params, img.astype(params.dtype), cfg.tiling.tile,
                                        cfg.tiling.overlap, cfg.train.batch_size)
        np.save(d / _slice_name("scores", i, "npy"), scores)
    write_stage(args.workdir, "predict", cfg, n_slices=len(slices))
    print(f"predicted {len(slices)} slices into {d}")


def pick_aggregate_channel(y_norm, raw, solid, porosity_channel):
    """Non-porous channel whose argmax region is brightest in the raw slices."""
    candidates = [c for c in range(y_norm.shape[-1]) if c != porosity_channel]
    am = np.asarray(candidates)[np.argmax(y_norm[..., candidates], axis=-1)]
    best, best_mean = candidates[0], -np.inf
    for c in candidates:
        sel = (am == c) & solid
        if sel.any() and raw[sel].mean() > best_mean:
            best, best_mean = c, raw[sel].mean()
    return best


def _knot_curve(values_by_slice, knot_step):
    n = len(values_by_slice)
    knots = sorted(set(range(0, n, knot_step)) | {n - 1})
    taus = [postproc.otsu_threshold(values_by_slice[k]) for k in knots]
    return postproc.ThresholdCurve(knots, taus)


def cmd_postprocess(args, cfg):
    pre, _, pores = load_standardized(args.workdir, cfg, args.force)
    pred = read_stage(args.workdir, "predict", cfg, args.force)
    raw = imageio.load_stack(pre["manifest"])
    pp = cfg.postproc
    pd = _stage_dir(args.workdir, "predict")
    y = np.stack([normalize_channels(np.load(pd / _slice_name("scores", i, "npy")))
                  for i in range(pred["n_slices"])])
    solid = ~pores
    rawf = raw.slices.astype(np.float64)
    pc = pp.porosity_channel
    if pp.aggregate_channel == "auto":
        agg_ch = pick_aggregate_channel(y, rawf, solid, pc)
    else:
        agg_ch = int(pp.aggregate_channel)
    if not 0 <= agg_ch < y.shape[-1] or not 0 <= pc < y.shape[-1]:
        raise ValueError("aggregate/porosity channel index out of range")

    if args.thresholds:
        agg_curve = postproc.read_threshold_csv(args.thresholds)
    else:
        agg_curve = _knot_curve([y[i, ..., agg_ch][solid[i]] for i in range(len(y))], pp.knot_step)
    d = _stage_dir(args.workdir, "postprocess")
    d.mkdir(parents=True, exist_ok=True)
    postproc.write_threshold_csv(d / "thresholds_aggregate.csv", agg_curve)
    # semi-supervised runs reuse the clip masks that fixed the porosity labels
    pore_curve = None
    if cfg.label_mode != "SS":
        pore_curve = _knot_curve([y[i, ..., pc] for i in range(len(y))], pp.knot_step)
        postproc.write_threshold_csv(d / "thresholds_porosity.csv", pore_curve)

    non_pore = [c for c in range(y.shape[-1]) if c != pc]
    for i in range(len(y)):
        if pore_curve is None:
            pore = pores[i]
        else:
            pore = postproc.threshold_channel(y[i, ..., pc], postproc.interp_thresholds(pore_curve, i))
        agg = postproc.threshold_channel(y[i, ..., agg_ch], postproc.interp_thresholds(agg_curve, i))
        agg = postproc.cleanup_aggregates(agg, pp.hole_area, pp.radius, pp.min_object)
        labels = postproc.compose_threephase(agg, pore)
        imageio.write_label_image(d / _slice_name("labels", i, "png"), labels)
        imageio.write_label_image(d / _slice_name("agg_logit-threshold", i, "png"),
                                  (labels == 0).astype(np.uint8))
        am = np.asarray(non_pore)[np.argmax(y[i][..., non_pore], axis=-1)]
        agg_am = postproc.cleanup_aggregates(am == agg_ch, pp.hole_area, pp.radius, pp.min_object)
        imageio.write_label_image(d / _slice_name("agg_direct-argmax", i, "png"),
                                  (agg_am & ~pore).astype(np.uint8))
        tau_raw = postproc.otsu_threshold(rawf[i][solid[i]])
        agg_dt = postproc.direct_threshold_baseline(rawf[i], tau_raw, pp.min_object,
                                                    pp.baseline_hole_area)
        imageio.write_label_image(d / _slice_name("agg_direct-threshold", i, "png"),
                                  (agg_dt & ~pore).astype(np.uint8))
    write_stage(args.workdir, "postprocess", cfg, n_slices=len(y), aggregate_channel=agg_ch)
    print(f"postprocessed {len(y)} slices (aggregate channel {agg_ch}) into {d}")


def cmd_evaluate(args, cfg):
    pre = read_stage(args.workdir, "preprocess", cfg, args.force)
    post = read_stage(args.workdir, "postprocess", cfg, args.force)
    manifest_path = Path(args.gt_manifest or pre["manifest"])
    doc = imageio.read_manifest(manifest_path)
    gt_files = doc.get("ground_truth")
    if not gt_files:
        raise FileNotFoundError(f"{manifest_path} lists no ground-truth images")
    pd = _stage_dir(args.workdir, "postprocess")
    gts = [imageio.read_image(manifest_path.parent / f) == args.gt_class for f in gt_files]
    if len(gts) != post["n_slices"]:
        raise ValueError(f"{len(gts)} ground-truth images for {post['n_slices']} slices")
    preds = {m: [imageio.read_image(pd / _slice_name(f"agg_{m}", i, "png")) > 0
                 for i in range(len(gts))] for m in metrics.METHODS}
    rows = metrics.evaluate_suite(preds, gts, gt_min_area=cfg.postproc.gt_min_object)
    d = _stage_dir(args.workdir, "evaluate")
    metrics.write_scores_csv(d / "scores.csv", rows)
    for i, (p, g) in enumerate(zip(preds["logit-threshold"], gts)):
        imageio.write_png(d / _slice_name("agreement", i, "png"),
                          metrics.agreement_image(p, metrics.clean_ground_truth(g, cfg.postproc.gt_min_object)))
    write_stage(args.workdir, "evaluate", cfg, n_slices=len(gts),
                mean_iou={m: metrics.mean_score(rows, m) for m in metrics.METHODS})
    for m in metrics.METHODS:
        print(f"{m:>17}: mean IoU {metrics.mean_score(rows, m):.4f}  "
              f"F1 {metrics.mean_score(rows, m, 'f1'):.4f}")


# --------------------------------------------------------------------------
# argument parsing

def build_parser():
    parser = argparse.ArgumentParser(prog="selfseg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, func, helptext, workdir=True):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a configuration value (repeatable)")
        if workdir:
            p.add_argument("--workdir", required=True, help="pipeline work directory")
            p.add_argument("--force", action="store_true",
                           help="accept upstream artifacts made under another configuration")
        p.set_defaults(func=func)
        return p

    p = stage("phantom", cmd_phantom, "generate a synthetic three-phase slice stack", workdir=False)
    p.add_argument("--out", required=True)
    p.add_argument("--n-slices", type=int, default=6)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-aggregates", type=int, default=40)
    p.add_argument("--n-pores", type=int, default=25)
    p.add_argument("--noise", type=float, default=0.07)
    p.add_argument("--mortar-mean", type=float, default=0.55)
    p.add_argument("--aggregate-mean", type=float, default=0.65)
    p.add_argument("--smooth-sigma", type=float, default=0.0)
    p.add_argument("--drift", type=float, default=0.0)
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")

    p = stage("preprocess", cmd_preprocess, "clip pores and standardize slices")
    p.add_argument("--manifest", required=True)

    p = stage("superpixels", cmd_superpixels, "tile slices and compute superpixel maps")
    p.add_argument("--overlays", action="store_true", help="also write boundary previews")

    p = stage("train", cmd_train, "train the network on self-generated labels")
    p.add_argument("--resume", action="store_true", help="continue from train/last.ckpt")
    p.add_argument("--label-snapshots", type=int, default=0, metavar="K",
                   help="save dynamic labels every K iterations")
    p.add_argument("--quiet", action="store_true")

    stage("predict", cmd_predict, "stitch full-slice score maps")

    p = stage("postprocess", cmd_postprocess, "threshold, clean up and compose label images")
    p.add_argument("--thresholds", help="CSV of (slice_index, tau) knots for the aggregate channel")

    p = stage("evaluate", cmd_evaluate, "score aggregate masks against ground truth")
    p.add_argument("--gt-manifest", help="manifest listing ground-truth images (default: input manifest)")
    p.add_argument("--gt-class", type=int, default=0, help="aggregate class id in ground truth")
    return parser


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    return n


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_ini(args.config, args.set)
        n_threads = _thread_limit()
        if n_threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=n_threads):
                args.func(args, cfg)
        else:
            args.func(args, cfg)
    except ConfigError as exc:
        print(f"selfseg: configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"selfseg: missing input: {exc}", file=sys.stderr)
        return 3
    except StaleArtifactError as exc:
        print(f"selfseg: stale artifact: {exc}", file=sys.stderr)
        return 5
    except (ValueError, ShapeError, imageio.FormatError) as exc:
        print(f"selfseg: invalid data: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
