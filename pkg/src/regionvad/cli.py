"""Command-line front end: every pipeline stage reads and writes files only."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from regionvad import (__version__, evaluation, formats, gmm, normalcy, regions, scoring,
                       synth)
from regionvad.errors import (FormatError, IncompatibleArtifactError, UndefinedMetricError,
                              ValidationError)

logger = logging.getLogger("regionvad")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class InputError(Exception):
    """Missing or unusable input path."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _existing(path):
    p = Path(path)
    if not p.exists():
        raise InputError(f"input not found: {p}")
    return p


def _em(cfg):
    return gmm.EmConfig(seed=cfg.seed)


def _summary(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _frame_size(cfg, observations):
    if cfg.height > 0 and cfg.width > 0:
        return cfg.height, cfg.width
    if not observations:
        raise ValidationError(["cannot infer the frame size from an empty record file"])
    h = max(math.ceil(o.box.y2) for o in observations)
    w = max(math.ceil(o.box.x2) for o in observations)
    logger.info("frame size inferred from boxes: %dx%d", w, h)
    return h, w


def _load_tracklets(paths, cfg, flow_dir=None):
    obs = []
    for p in paths:
        obs.extend(formats.read_observations(_existing(p), allow_missing_motion=flow_dir is not None))
    if flow_dir is None:
        return obs, normalcy.build_tracklets(obs, cfg.t_w)
    out = []
    by_video = {}
    for o in obs:
        by_video.setdefault(o.video_id, []).append(o)
    for vid, vobs in by_video.items():
        out.extend(normalcy.build_tracklets(vobs, cfg.t_w, formats.FlowDirectory(flow_dir, vid)))
    return obs, out


def _heatmap(cfg, observations, tracklets):
    h, w = _frame_size(cfg, observations)
    hm = regions.ActivityHeatmap(h, w, sigma=cfg.sigma())
    return regions.accumulate_tracklets(hm, tracklets)


def _check_binding(model_set, region_map):
    if model_set.region_map_hash != region_map.content_hash():
        raise IncompatibleArtifactError(
            f"region map hash mismatch: model set expects {model_set.region_map_hash[:12]}..., "
            f"region map is {region_map.content_hash()[:12]}...")


def _write(out_dir, name, writer, *args):
    path = out_dir / name
    writer(path, *args)
    logger.info("wrote %s", path)
    return str(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg, out):
    """Simulate a zoned scene: tracklet records, annotations, true regions."""
    if cfg.layout not in synth.LAYOUTS:
        raise ValidationError([f"unknown layout {cfg.layout!r}; choose from {sorted(synth.LAYOUTS)}"])
    layout = synth.LAYOUTS[cfg.layout]()
    kinds = tuple(k for k in cfg.anomaly_kinds.split(",") if k)
    try:
        spec = synth.AnomalySpec(cfg.anomaly_rate, kinds)
    except ValueError as exc:
        raise ValidationError([str(exc)]) from None
    res = synth.simulate_scene(layout, cfg.n_frames, spec, seed=cfg.seed, video_id=args.video_id)
    files = {
        "tracklets": _write(out, "tracklets.jsonl", formats.write_observations, res.observations),
        "annotations": _write(out, "annotations.jsonl", formats.write_annotations, res.annotations),
    }
    true_map = regions.RegionMap(np.where(res.region_raster < 0, 0, res.region_raster),
                                 max(1, len(layout.zones)), {"source": "simulator"})
    files["true_regions"] = _write(out, "true_regions.pgm", formats.write_region_map, true_map)
    if args.flow:
        formats.write_flow_dir(out / "flow", args.video_id,
                               synth.emit_flow_rasters(res, range(res.n_frames)))
        files["flow"] = str(out / "flow")
    meta = dict(res.config)
    meta["track_kinds"] = {str(k): v for k, v in sorted(res.track_kinds.items())}
    files["scene"] = _write(out, "scene.json", formats.write_document, "scene", {"scene": meta})
    return {"files": files, "n_observations": len(res.observations),
            "n_annotations": len(res.annotations), "n_tracks": len(res.track_kinds),
            "height": layout.height, "width": layout.width}


def cmd_toy(args, cfg, out):
    """Run the tabular rule toy end to end and report its AUC."""
    data = synth.generate_toy(synth.ToyRuleSet(), cfg.n_train, cfg.n_test, seed=cfg.seed)
    model = gmm.select_components_bic(data.train, cfg.k_max, "full", _em(cfg))
    nll = -model.score_samples(data.test)
    auc = evaluation.frame_auc(nll, data.test_labels)
    report = {"auc": auc, "n_train": cfg.n_train, "n_test": cfg.n_test,
              "n_anomalous": int(data.test_labels.sum()), "selected_k": model.n_components,
              "bic_table": model.fit_metadata["bic_table"], "seed": cfg.seed}
    path = _write(out, "toy_report.json", formats.write_metrics, report)
    return {"auc": auc, "selected_k": model.n_components, "files": {"report": path}}


def cmd_discover(args, cfg, out):
    """Discover K regions from tracklet records."""
    obs, trk = _load_tracklets(args.tracklets, cfg, args.flow_dir)
    hm = _heatmap(cfg, obs, trk)
    rmap = regions.discover_regions(hm, cfg.K, cfg.spatial_affinity, cfg.method, cfg.subsample,
                                    cfg.seed, _em(cfg))
    files = {"region_map": _write(out, "region_map.pgm", formats.write_region_map, rmap)}
    (out / "region_map.ppm").write_bytes(regions.render_region_map(rmap))
    files["render"] = str(out / "region_map.ppm")
    return {"K": cfg.K, "k_effective": rmap.K, "mu_kl": rmap.provenance["mu_kl"], "files": files}


def cmd_select_k(args, cfg, out):
    """Choose K by regional model divergence over the candidate list."""
    obs, trk = _load_tracklets(args.tracklets, cfg, args.flow_dir)
    hm = _heatmap(cfg, obs, trk)
    res = regions.select_k(hm, trk, cfg.candidates(), method=cfg.method,
                           spatial_affinity=cfg.spatial_affinity, subsample=cfg.subsample,
                           seed=cfg.seed, em_config=_em(cfg), k_max=cfg.k_max,
                           min_samples=cfg.min_samples)
    table = [{"K": k, "mu_kl": (None if not math.isfinite(v) else v)} for k, v in res.table]
    files = {
        "table": _write(out, "select_k.json", formats.write_document, "select-k",
                        {"best_k": res.best_k, "table": table}),
        "region_map": _write(out, "region_map.pgm", formats.write_region_map,
                             res.region_maps[res.best_k]),
    }
    return {"best_k": res.best_k, "table": table, "files": files}


def cmd_train(args, cfg, out):
    """Train one normalcy model per region."""
    rmap = formats.read_region_map(_existing(args.region_map))
    _, trk = _load_tracklets(args.tracklets, cfg, args.flow_dir)
    grouped = normalcy.group_features(trk, rmap, cfg.encoding)
    ms = normalcy.train_regional_models(grouped, rmap, cfg.k_max, cfg.min_samples, _em(cfg))
    path = _write(out, "models.json", formats.write_model_set, ms)
    return {"regions": [{"label": r.label, "kind": r.kind, "n_train": r.n_train,
                         "n_components": None if r.model is None else r.model.n_components}
                        for r in ms.regions], "files": {"models": path}}


def cmd_score(args, cfg, out):
    """Score tracklets and write frame and tracklet score tables."""
    rmap = formats.read_region_map(_existing(args.region_map))
    ms = formats.read_model_set(_existing(args.models))
    _check_binding(ms, rmap)
    obs, trk = _load_tracklets(args.tracklets, cfg, args.flow_dir)
    bad = [o for o in obs if o.frame >= cfg.n_frames]
    if bad:
        raise ValidationError([f"record at frame {bad[0].frame} exceeds n_frames={cfg.n_frames}"])
    scores = scoring.score_tracklets(ms, rmap, trk)
    videos = sorted({o.video_id for o in obs} | set(args.video_ids or ()))
    pairs = []
    for vid in videos:
        raw = scoring.frame_scores([s for s in scores if s.video_id == vid], cfg.n_frames, vid,
                                   cfg.empty_floor)
        pairs.append((raw, scoring.smooth(raw, cfg.smoothing_sigma)))
    files = {
        "frame_scores": _write(out, "frame_scores.csv", formats.write_frame_scores, pairs),
        "tracklet_scores": _write(out, "tracklet_scores.jsonl", formats.write_tracklet_scores,
                                  scores),
    }
    return {"n_tracklets": len(scores), "videos": videos, "files": files}


def cmd_evaluate(args, cfg, out):
    """Compute frame AUC, RBDC and TBDC from score files and annotations."""
    series = formats.read_frame_scores(_existing(args.scores))
    tscores = formats.read_tracklet_scores(_existing(args.tracklet_scores))
    gt = formats.read_annotations(_existing(args.annotations))
    counts = {vid: len(raw) for vid, (raw, _) in series.items()}
    labels = evaluation.frame_labels(gt, counts)
    videos = sorted(series)
    column = 0 if args.raw else 1
    s = np.concatenate([series[v][column] for v in videos]) if videos else np.empty(0)
    y = np.concatenate([labels[v] for v in videos]) if videos else np.empty(0)
    n_frames = int(sum(counts.values()))
    report = {"n_frames": n_frames, "n_videos": len(videos),
              "score_column": "raw" if args.raw else "smoothed"}
    try:
        report["auc"] = evaluation.frame_auc(s, y)
    except UndefinedMetricError as exc:
        report["auc"], report["auc_error"] = None, str(exc)
    preds = evaluation.predictions_from_scores(tscores)
    for name, fn in (("rbdc", evaluation.rbdc_curve), ("tbdc", evaluation.tbdc_curve)):
        kw = {"iou_threshold": cfg.iou_threshold}
        if name == "tbdc":
            kw["track_fraction"] = cfg.track_fraction
        try:
            curve = fn(preds, gt, max(n_frames, 1), **kw)
            report[name] = curve.area
            report[name + "_curve"] = curve.points()
        except UndefinedMetricError as exc:
            report[name], report[name + "_error"] = None, str(exc)
    path = _write(out, "metrics.json", formats.write_metrics, report)
    return {k: report[k] for k in ("auc", "rbdc", "tbdc")} | {"files": {"metrics": path}}


def cmd_explain(args, cfg, out):
    """List prototypical training events per region."""
    rmap = formats.read_region_map(_existing(args.region_map))
    ms = formats.read_model_set(_existing(args.models))
    _check_binding(ms, rmap)
    _, trk = _load_tracklets(args.tracklets, cfg, args.flow_dir)
    by_region = {r: [] for r in range(rmap.K)}
    for t in trk:
        by_region[normalcy.assign_region(t, rmap)].append(t)
    listing = []
    for r in range(rmap.K):
        items = by_region[r]
        feats = np.array([t.feature.vector(ms.encoding) for t in items]) if items else np.empty((0, 6))
        refs = [{"video_id": t.video_id, "track_id": t.track_id, "start_frame": t.start_frame,
                 "category": t.feature.category} for t in items]
        protos = normalcy.prototypical_events(ms, r, feats, refs)
        listing.append({"region": r, "kind": ms.kind(r), "prototypes": [
            {"component": p.component, "weight": p.weight, "mean": p.mean.tolist(),
             "nearest": p.reference, "mahalanobis": p.distance} for p in protos]})
    path = _write(out, "prototypes.json", formats.write_document, "prototypes",
                  {"regions": listing})
    return {"regions": [{"region": e["region"], "n_prototypes": len(e["prototypes"])}
                        for e in listing], "files": {"prototypes": path}}


def cmd_render(args, cfg, out):
    """Render a region map (and optionally an activity heatmap) as images."""
    rmap = formats.read_region_map(_existing(args.region_map))
    files = {}
    (out / "region_map.ppm").write_bytes(regions.render_region_map(rmap))
    files["region_map"] = str(out / "region_map.ppm")
    if args.tracklets:
        obs, trk = _load_tracklets(args.tracklets, cfg, args.flow_dir)
        hm = regions.ActivityHeatmap(rmap.height, rmap.width, sigma=cfg.sigma())
        regions.accumulate_tracklets(hm, trk)
        mass = hm.data.sum(axis=2)
        scaled = np.zeros_like(mass) if mass.max() <= 0 else mass / mass.max()
        (out / "heatmap.pgm").write_bytes(formats.encode_pgm(np.round(scaled * 255).astype(np.int64)))
        files["heatmap"] = str(out / "heatmap.pgm")
    return {"K": rmap.K, "files": files}


COMMANDS = {
    "simulate": cmd_simulate, "toy": cmd_toy, "discover": cmd_discover,
    "select-k": cmd_select_k, "train": cmd_train, "score": cmd_score,
    "evaluate": cmd_evaluate, "explain": cmd_explain, "render": cmd_render,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_config_flags(p):
    g = p.add_argument_group("configuration (overrides --config)")
    for name, typ in formats.RunConfig.field_types().items():
        flag = "--" + name.replace("_", "-")
        if name == "seed":
            continue
        g.add_argument(flag, dest="cfg_" + name, type=typ, default=None, metavar=typ.__name__.upper())


def build_parser():
    parser = argparse.ArgumentParser(prog="regionvad",
                                     description="Region-aware video anomaly detection pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    inputs = {
        "simulate": [("--video-id", {"default": "scene"}), ("--flow", {"action": "store_true"})],
        "toy": [],
        "discover": [("--tracklets", {"nargs": "+", "required": True})],
        "select-k": [("--tracklets", {"nargs": "+", "required": True})],
        "train": [("--tracklets", {"nargs": "+", "required": True}),
                  ("--region-map", {"required": True})],
        "score": [("--tracklets", {"nargs": "+", "required": True}),
                  ("--region-map", {"required": True}), ("--models", {"required": True}),
                  ("--video-ids", {"nargs": "*"})],
        "evaluate": [("--scores", {"required": True}), ("--tracklet-scores", {"required": True}),
                     ("--annotations", {"required": True}),
                     ("--raw", {"action": "store_true",
                                "help": "evaluate unsmoothed frame scores"})],
        "explain": [("--tracklets", {"nargs": "+", "required": True}),
                    ("--region-map", {"required": True}), ("--models", {"required": True})],
        "render": [("--region-map", {"required": True}), ("--tracklets", {"nargs": "*"})],
    }
    for name, extra in inputs.items():
        p = sub.add_parser(name, help=COMMANDS[name].__doc__)
        p.add_argument("--config", help="flat key=value configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=".", help="output directory (default: current)")
        p.add_argument("--flow-dir", default=None,
                       help="Middlebury flow rasters <dir>/<video>/<frame>.flo for motion features")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, kw in extra:
            p.add_argument(flag, **kw)
        _add_config_flags(p)
    return parser


def effective_config(args):
    values = {}
    if args.config:
        values.update(formats.parse_config_text(_existing(args.config).read_text(encoding="utf-8")))
    for name in formats.RunConfig.field_types():
        v = getattr(args, "cfg_" + name, None)
        if v is not None:
            values[name] = v
    if args.seed is not None:
        values["seed"] = args.seed
    return formats.RunConfig.from_mapping(values)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = effective_config(args)
        out = formats.ensure_dir(args.out_dir)
        formats.write_config(out / f"{args.command}.config.txt", cfg)
        summary = COMMANDS[args.command](args, cfg, out)
    except (InputError, ValidationError, FormatError, IncompatibleArtifactError,
            UndefinedMetricError) as exc:
        logger.error("%s", exc)
        _summary({"command": args.command, "status": "error", "error": str(exc)})
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logger.exception("%s failed", args.command)
        _summary({"command": args.command, "status": "failed", "error": str(exc)})
        return EXIT_RUNTIME
    _summary({"command": args.command, "status": "ok", **summary})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
