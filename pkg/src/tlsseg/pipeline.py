"""In-memory composition of the stages, shared by the CLI and the tests."""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np

from ._validation import FormatError
from .fusion import MultiViewFusion
from .label_transfer import PseudoLabeler, sample_spheres
from .masks import filter_masks
from .projection import SphericalProjector, backproject_mask
from .scan_io import ScanStation, load_scans, merge_clouds, statistical_outlier_filter
from .synth import SceneSpec, default_station_poses, emit_oracle_masks, generate_scene, simulate_scan

logger = logging.getLogger("tlsseg")

SCANNER_FILE = "scanner.json"


@contextmanager
def timed(module):
    start = time.perf_counter()
    try:
        yield
    finally:
        logger.info("timing module=%s seconds=%.3f", module, time.perf_counter() - start)


def _map(fn, items, threads=1):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def station_files(config):
    paths = sorted(config.path("scans_dir").glob("*.ply"))
    if not paths:
        raise FormatError(f"no station PLY files in {config.path('scans_dir')}")
    return paths


def filter_station(station, config):
    """Optional statistical outlier removal; returns the station and the kept indices."""
    if not config.outlier_filter:
        return station, np.arange(len(station))
    _, keep = statistical_outlier_filter(station.to_cloud(), config.outlier_k, config.outlier_stdev, return_mask=True)
    kept = np.flatnonzero(keep)
    logger.info("station %s: outlier filter removed %d points", station.station_id, len(station) - len(kept))
    return ScanStation(station.station_id, station.origin, station.rotation,
                       station.xyz[kept], station.intensity[kept]), kept


def prepare_stations(config):
    """Load the station files named by the config and apply the outlier filter."""
    with timed("scan_io"):
        stations = load_scans(station_files(config), config.path("poses"))
        filtered = _map(lambda s: filter_station(s, config), stations, config.threads)
    return [s for s, _ in filtered], [k for _, k in filtered]


def native_resolution(config):
    """Config override, then the scanner metadata file next to the scans, else None (estimate)."""
    if config.native_resolution is not None:
        return config.native_resolution
    meta = config.path("scans_dir") / SCANNER_FILE
    if meta.exists():
        return float(json.loads(meta.read_text())["native_resolution"])
    return None


def make_projector(config, stations, resolution=None):
    projector = SphericalProjector(config.d_p, config.r_max, config.lanczos_a, resolution)
    return projector.fit(stations)


def project_stations(stations, config, resolution=None):
    projector = make_projector(config, stations, resolution)
    with timed("projection"):
        return _map(projector.transform, list(stations), config.threads)


def backproject_masks(stations, images, masks):
    """Partial instances for every mask, ordered by (station, modality, mask id)."""
    by_station = {s.station_id: (s, img) for s, img in zip(stations, images)}
    partials = []
    for m in sorted(masks, key=lambda m: m.key):
        if m.station_id not in by_station:
            raise FormatError(f"mask {m.key} references unknown station {m.station_id!r}")
        station, image = by_station[m.station_id]
        p = backproject_mask(image, m, station)
        if p is None:
            logger.debug("mask %s selects no points, skipped", m.key)
            continue
        partials.append(p)
    return partials


def fuse_partials(partials, config, n_stations):
    k = config.k if config.k is not None else n_stations
    with timed("fusion"):
        return MultiViewFusion(k=k, tau=config.tau, w_min=config.w_min, min_support=config.min_support,
                               d_p=config.d_p, knn_mode=config.knn_mode).fit(partials)


def stage_one(stations, images, masks, config):
    """Masks -> fused instances (the fitted fusion estimator)."""
    masks = filter_masks(masks, config.min_confidence, config.classes)
    with timed("backprojection"):
        partials = backproject_masks(stations, images, masks)
    return fuse_partials(partials, config, len(stations))


def pseudo_label(stations, instances, config):
    """Merged target cloud labeled from the fused instances, plus its sphere samples."""
    with timed("label_transfer"):
        target = merge_clouds(stations, config.d_p)
        labeler = PseudoLabeler(config.d_p, True, config.vote_weighting, config.allow_null_vote,
                                config.reset_fraction).fit(instances)
        labeled = labeler.transform(target)
        spheres = sample_spheres(labeled, config.sphere_radius, config.sphere_stride)
    return labeled, spheres


# ---------------------------------------------------------------- synthetic data

def scene_spec(config):
    doc = {"seed": config.seed, **config.scene}
    doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    return SceneSpec(**doc)


def synthetic_resolution(config):
    return config.native_resolution or config.d_p / config.r_max


def simulate(config):
    """Scene, simulated stations (with truth) and oracle masks for the config."""
    spec = scene_spec(config)
    resolution = synthetic_resolution(config)
    with timed("synth"):
        scene = generate_scene(spec)
        scans = [simulate_scan(scene, origin, rotation, resolution, f"s{i:02d}")
                 for i, (origin, rotation) in enumerate(default_station_poses(spec, config.n_stations))]
    return scene, scans


def oracle_masks(stations, truths, images, config):
    masks = []
    with timed("oracle_masks"):
        for station, truth, image in zip(stations, truths, images):
            masks.extend(emit_oracle_masks(station, truth, image, pixel_dropout=config.pixel_dropout,
                                           mask_dropout=config.mask_dropout, spurious_rate=config.spurious_rate,
                                           split_rate=config.split_rate, seed=config.seed))
    return masks


def run_synthetic(config):
    """Whole Stage-I pipeline on a simulated scene, in memory.

    Returns ``(scene, fusion)``, where ``fusion`` is the fitted estimator.
    """
    scene, scans = simulate(config)
    stations = [s for s, _ in scans]
    truths = [t for _, t in scans]
    images = project_stations(stations, config, synthetic_resolution(config))
    masks = oracle_masks(stations, truths, images, config)
    return scene, stage_one(stations, images, masks, config)


__all__ = [
    "timed", "prepare_stations", "native_resolution", "project_stations", "backproject_masks", "fuse_partials",
    "stage_one", "pseudo_label", "scene_spec", "simulate", "oracle_masks", "run_synthetic", "SCANNER_FILE",
]
