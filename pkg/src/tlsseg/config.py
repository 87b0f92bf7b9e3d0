"""Pipeline configuration: one TOML file, sections are cosmetic.

Keys may sit at top level or inside any table (``[projection]``,
``[fusion]``, ...); all tables are flattened into one namespace. Relative
paths resolve against the config file's directory.
"""

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ._validation import ParameterError, check_count, check_positive

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PATH_KEYS = ("work_dir", "scans_dir", "poses", "images_dir", "masks_manifest", "fused_dir", "transfer_dir",
             "predictions", "references", "eval_dir")


@dataclass
class PipelineConfig:
    # projection
    d_p: float = 0.003
    r_max: float = 6.0
    lanczos_a: int = 3
    native_resolution: float | None = None
    # mask intake / fusion
    min_confidence: float = 0.0
    classes: list = field(default_factory=list)
    tau: float = 0.15
    k: int | None = None  # None: number of stations
    knn_mode: str = "union"
    w_min: int = 1
    min_support: int = 3
    outlier_filter: bool = False
    outlier_k: int = 8
    outlier_stdev: float = 3.0
    # label transfer / spheres
    vote_weighting: str = "inverse_distance"
    allow_null_vote: bool = True
    reset_fraction: float = 0.8
    sphere_radius: float = 0.12
    sphere_stride: float | None = None
    augment: bool = True
    # evaluation
    d_tau: float = 0.030
    d_tau_strict: float = 0.010
    nms_iou: float = 0.10
    nms_score: str = "points"
    # synthetic data
    n_stations: int = 6
    pixel_dropout: float = 0.0
    mask_dropout: float = 0.0
    spurious_rate: float = 0.0
    split_rate: float = 0.0
    scene: dict = field(default_factory=dict)
    # runtime
    seed: int = 0
    threads: int = 1
    # paths
    work_dir: str = "."
    scans_dir: str | None = None
    poses: str | None = None
    images_dir: str | None = None
    masks_manifest: str | None = None
    fused_dir: str | None = None
    transfer_dir: str | None = None
    predictions: str | None = None
    references: str | None = None
    eval_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("d_p", "r_max", "sphere_radius", "d_tau", "d_tau_strict", "outlier_stdev"):
            check_positive(getattr(self, name), name)
        for name in ("native_resolution", "sphere_stride"):
            if getattr(self, name) is not None:
                check_positive(getattr(self, name), name)
        for name in ("tau", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ParameterError(f"{name} must lie in (0, 1], got {v}")
        for name in ("lanczos_a", "w_min", "min_support", "outlier_k", "threads", "n_stations"):
            check_count(getattr(self, name), name)
        if self.k is not None:
            check_count(self.k, "k")
        for name in ("min_confidence", "pixel_dropout", "mask_dropout", "spurious_rate", "split_rate", "reset_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")

    # ------------------------------------------------------------ paths
    def path(self, key):
        defaults = {
            "scans_dir": "scans", "poses": "scans/poses.json", "images_dir": "images",
            "masks_manifest": "masks/masks_manifest.json", "fused_dir": "fused", "transfer_dir": "transfer",
            "predictions": "fused", "references": "refs.json", "eval_dir": "eval",
        }
        value = getattr(self, key) or defaults[key]
        p = Path(value)
        return p if p.is_absolute() else Path(self.work_dir) / p

    def digest(self):
        """Hash of all non-path settings."""
        doc = {k: v for k, v in asdict(self).items() if k not in PATH_KEYS and k != "threads"}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _flatten(doc, out=None):
    out = {} if out is None else out
    for key, value in doc.items():
        if isinstance(value, dict) and key != "scene":
            _flatten(value, out)
        else:
            out[key] = value
    return out


def config_from_dict(doc, base_dir="."):
    flat = _flatten(doc)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ParameterError(f"unknown configuration keys: {', '.join(unknown)}")
    for key in PATH_KEYS:
        if flat.get(key) is not None and not Path(flat[key]).is_absolute():
            flat[key] = str(Path(base_dir) / flat[key])
    if "work_dir" not in flat:
        flat["work_dir"] = str(base_dir)
    return PipelineConfig(**flat)


def load_config(path=None, overrides=None):
    doc, base = {}, Path(".")
    if path is not None:
        path = Path(path)
        with open(path, "rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ParameterError(f"{path}: invalid TOML ({exc})") from exc
        base = path.parent
    flat = _flatten(doc)
    flat.update(overrides or {})
    return config_from_dict(flat, base)


def parse_override(text):
    """``key=value`` with the value parsed as a TOML scalar when possible."""
    if "=" not in text:
        raise ParameterError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(config, inputs):
    """Input file hashes (keyed by name relative to the work dir) plus the config hash."""
    base = Path(config.work_dir).resolve()
    entries = {}
    for p in sorted({Path(p).resolve() for p in inputs}):
        try:
            name = str(p.relative_to(base))
        except ValueError:
            name = p.name
        entries[name] = file_digest(p)
    return {"config_sha256": config.digest(), "inputs": entries}
