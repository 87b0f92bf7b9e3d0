"""Batch command line: ``tlsseg {synth,project,fuse,transfer,eval,merge}``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from ._validation import FormatError
from .config import load_config, parse_override, provenance
from .evaluation import evaluate, load_references, merge_predictions_nms, render_table, save_references, ReferenceSet
from .instances import InstanceSet, load_instances, save_instances
from .label_transfer import export_spheres
from .masks import MaskSet, load_masks, save_masks
from .projection import load_image, save_image
from .scan_io import write_cloud, write_ply
from .synth import save_scene_truth

logger = logging.getLogger("tlsseg")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _ply_comments(prov):
    return ["provenance " + json.dumps(prov, sort_keys=True, separators=(",", ":"))]


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _scan_inputs(config):
    return [*pipeline.station_files(config), config.path("poses")]


# ---------------------------------------------------------------- commands

def cmd_synth(config, args):
    scene, scans = pipeline.simulate(config)
    scans_dir = config.path("scans_dir")
    scans_dir.mkdir(parents=True, exist_ok=True)
    poses = {}
    for station, _ in scans:
        write_ply(scans_dir / f"{station.station_id}.ply", station.xyz, station.intensity)
        poses[station.station_id] = {"origin": station.origin.tolist(), "rotation": station.rotation.reshape(-1).tolist()}
    _write_json(config.path("poses"), poses)
    _write_json(scans_dir / pipeline.SCANNER_FILE, {"native_resolution": pipeline.synthetic_resolution(config)})
    save_scene_truth(scene, Path(config.work_dir) / "scene_truth.json")
    save_references(ReferenceSet(scene.references), config.path("references"))

    # masks are cut from the same images `project` will produce from the written files
    stations, kept = pipeline.prepare_stations(config)
    truths = []
    for (_, truth), idx in zip(scans, kept):
        truth.instance = truth.instance[idx]
        truths.append(truth)
    images = pipeline.project_stations(stations, config, pipeline.native_resolution(config))
    masks = pipeline.oracle_masks(stations, truths, images, config)
    save_masks(masks, config.path("masks_manifest").parent, config.path("masks_manifest").name)
    logger.info("synth: %d heads, %d stations, %d masks", scene.n_heads, len(stations), len(masks))


def cmd_project(config, args):
    stations, _ = pipeline.prepare_stations(config)
    images = pipeline.project_stations(stations, config, pipeline.native_resolution(config))
    prov = provenance(config, _scan_inputs(config))
    for image in images:
        save_image(image, config.path("images_dir"), prov)
        logger.info("project: station %s -> %dx%d", image.station_id, image.height, image.width)


def cmd_fuse(config, args):
    stations, _ = pipeline.prepare_stations(config)
    images_dir = config.path("images_dir")
    images = []
    for s in stations:
        try:
            images.append(load_image(images_dir, s.station_id))
        except FileNotFoundError as exc:
            raise FormatError(f"station {s.station_id}: projected images missing in {images_dir}") from exc
    manifest = config.path("masks_manifest")
    masks = load_masks(manifest, geometry=images_dir) if manifest.exists() else MaskSet()
    if not masks:
        logger.warning("fuse: empty mask set, writing an empty instance set")
    fusion = pipeline.stage_one(stations, images, masks, config)
    inputs = _scan_inputs(config) + sorted(images_dir.glob("*_pixmap.bin"))
    if manifest.exists():
        inputs += [manifest, *sorted(manifest.parent.glob("*.png"))]
    prov = provenance(config, inputs)
    out = config.path("fused_dir")
    save_instances(fusion.instances_, out, prov)
    graph = fusion.graph_
    _write_json(out / "fusion_graph.json", {
        "k": fusion.k_,
        "n_partials": graph.n_nodes,
        "edges": [[i, j, graph.ious[(i, j)], w] for (i, j), w in sorted(graph.weights.items())],
        "clusters": [list(map(int, c)) for c in fusion.clusters_],
        "discarded": [list(map(int, c)) for c in fusion.discarded_],
        "provenance": prov,
    })
    logger.info("fuse: %d instances", len(fusion.instances_))


def cmd_transfer(config, args):
    stations, _ = pipeline.prepare_stations(config)
    fused = config.path("fused_dir")
    instances = load_instances(fused) if (fused / "instances.ply").exists() else InstanceSet()
    if not instances:
        logger.warning("transfer: no fused instances, every point is background")
    labeled, spheres = pipeline.pseudo_label(stations, instances, config)
    inputs = _scan_inputs(config) + sorted(p for p in fused.glob("instances.*"))
    prov = provenance(config, inputs)
    out = config.path("transfer_dir")
    out.mkdir(parents=True, exist_ok=True)
    write_cloud(out / "P_t_labeled.ply", labeled, comments=_ply_comments(prov))
    export_spheres(spheres, out / "spheres", seed=config.seed if config.augment else None, provenance=prov)
    logger.info("transfer: %d points, %d labeled, %d spheres", len(labeled), int((labeled.instance >= 0).sum()), len(spheres))


def cmd_eval(config, args):
    pred_path = Path(args.predictions) if args.predictions else config.path("predictions")
    ref_path = Path(args.refs) if args.refs else config.path("references")
    instances, refs = load_instances(pred_path), load_references(ref_path)
    with pipeline.timed("eval"):
        report = evaluate(instances, refs, config.d_tau, config.d_tau_strict)
    pred_files = [pred_path] if pred_path.is_file() else sorted(pred_path.glob("instances.*"))
    doc = report.to_dict()
    doc["provenance"] = provenance(config, [*pred_files, ref_path])
    out = Path(args.out) if args.out else config.path("eval_dir") / "eval.json"
    _write_json(out, doc)
    print(render_table({pred_path.name or "predictions": report}))


def cmd_merge(config, args):
    a, b = load_instances(args.a), load_instances(args.b)
    with pipeline.timed("merge"):
        merged = merge_predictions_nms(a, b, config.nms_iou, config.nms_score)
    inputs = []
    for p in (Path(args.a), Path(args.b)):
        inputs += [p] if p.is_file() else sorted(p.glob("instances.*"))
    out = Path(args.out) if args.out else Path(config.work_dir) / "merged"
    save_instances(merged, out, provenance(config, inputs))
    logger.info("merge: %d + %d -> %d instances", len(a), len(b), len(merged))


COMMANDS = {"synth": cmd_synth, "project": cmd_project, "fuse": cmd_fuse, "transfer": cmd_transfer,
            "eval": cmd_eval, "merge": cmd_merge}


# ---------------------------------------------------------------- entry point

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--work-dir", help="root directory for default input/output paths")
    common.add_argument("--threads", type=int, help="worker pool cap")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="tlsseg", description="Multi-view instance segmentation of TLS scans.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset (scans, poses, refs, oracle masks)")
    sub.add_parser("project", parents=[common], help="project stations to compressed panoramas")
    sub.add_parser("fuse", parents=[common], help="back-project masks and fuse them into 3D instances")
    sub.add_parser("transfer", parents=[common], help="pseudo-label the merged cloud and export spheres")
    p = sub.add_parser("eval", parents=[common], help="evaluate predictions against point references")
    p.add_argument("--predictions")
    p.add_argument("--refs")
    p.add_argument("--out")
    p = sub.add_parser("merge", parents=[common], help="NMS-merge two prediction sets")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = dict(parse_override(s) for s in args.set)
        if args.work_dir is not None:
            overrides["work_dir"] = str(Path(args.work_dir).resolve())
        for key in ("threads", "seed"):
            if getattr(args, key) is not None:
                overrides[key] = getattr(args, key)
        config = load_config(args.config, overrides)
        with pipeline.timed(f"cmd_{args.command}"):
            COMMANDS[args.command](config, args)
    except (ValueError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except Exception as exc:  # anything else is a runtime failure
        logger.error("runtime error: %s", exc, exc_info=logger.isEnabledFor(logging.DEBUG))
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
