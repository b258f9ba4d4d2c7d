"""Method comparison sweeps driven by a TOML file.

A config has optional top-level ``seed``, ``seeds`` and ``methods`` keys and
the tables ``[scene]``, ``[noise]``, ``[inference]`` and ``[losses]``.
``[noise].levels`` is a list of inline tables, each one noise level; keys
outside it apply to every level. ``[inference]`` and ``[losses]`` accept
the fields of :class:`~probtri.inference.PtConfig` and
:class:`~probtri.losses.LossConfig`.

Every (noise level, seed) cell gets its own scene seed derived from the
config seed and the cell index, and all methods see the same scene.
"""

from __future__ import annotations

import csv
import io
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ProbTriError
from ..geometry import Intrinsics
from ..inference import PtConfig, extract_pose, run
from ..losses import LossConfig
from .baselines import bundle_adjust, ransac8pt
from .metrics import MetricsReport, evaluate
from .scene import NoiseModel, SceneTruth, gen_scene, render_observations

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

METHODS = ("probabilistic", "ransac8pt", "bundle_adjust", "bundle_adjust_ransac")
CSV_HEADER = ("method", "noise", "seed", "e3d", "e2d", "er", "et")
METRICS = ("e3d", "e2d", "er", "et")


@dataclass(frozen=True)
class SceneSpec:
    cams: int = 4
    joints: int = 17
    frames: int = 20
    image_size: int = 64
    focal: float = 70.0

    @property
    def intrinsics(self) -> Intrinsics:
        c = self.image_size / 2.0
        return Intrinsics(self.focal, self.focal, c, c)


@dataclass(frozen=True)
class NoiseLevel:
    pixel_sigma: float = 0.0
    outlier_rate: float = 0.0
    heatmap_sigma: float = 2.0
    label: str = ""

    @property
    def name(self) -> str:
        return self.label or f"{self.pixel_sigma:g}px/{self.outlier_rate:g}"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    seeds: int = 20
    methods: tuple = ("probabilistic", "ransac8pt", "bundle_adjust")
    scene: SceneSpec = SceneSpec()
    noise: tuple = (NoiseLevel(),)
    inference: PtConfig = PtConfig()
    losses: LossConfig = LossConfig()

    def echo(self) -> dict:
        return {
            "seed": self.seed,
            "seeds": self.seeds,
            "methods": list(self.methods),
            "scene": asdict(self.scene),
            "noise": [asdict(n) for n in self.noise],
            "inference": asdict(self.inference),
            "losses": asdict(self.losses),
        }


@dataclass(frozen=True)
class Record:
    method: str
    noise: str
    seed: int
    metrics: MetricsReport
    level: int = field(default=0, compare=False)


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _line_of(text: str, key: str, section: str | None = None) -> int:
    """1-based line where ``key`` is assigned (inside ``[section]`` if given), 0 if unknown."""
    current = None
    pattern = re.compile(rf"^\s*\"?{re.escape(key)}\"?\s*=|[{{,]\s*{re.escape(key)}\s*=")
    for no, line in enumerate(text.splitlines(), 1):
        head = re.match(r"^\s*\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            continue
        if (section is None or current == section) and pattern.search(line):
            return no
    return 0


def _fail(text: str, msg: str, key: str, section: str | None = None):
    line = _line_of(text, key, section)
    where = f"line {line}: " if line else ""
    raise ConfigError(f"{where}{msg}")


def _build(cls, values: dict, text: str, section: str):
    names = {f.name for f in fields(cls)}
    for key in values:
        if key not in names:
            _fail(text, f"unknown key {key!r} in [{section}]", key, section)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        key = next(iter(values), section)
        raise ConfigError(f"[{section}] at line {_line_of(text, key, section)}: {exc}") from exc


def _inference(values: dict, text: str) -> PtConfig:
    values = dict(values)
    for key in ("local_rot_sigma_deg",):
        if key in values:
            values["local_rot_sigma"] = float(np.deg2rad(values.pop(key)))
    return _build(PtConfig, values, text, "inference")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a sweep config; errors carry the offending line number."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    allowed = {"seed", "seeds", "methods", "scene", "noise", "inference", "losses"}
    for key in data:
        if key not in allowed:
            _fail(text, f"unknown top-level key {key!r}", key)
    for key in ("scene", "noise", "inference", "losses"):
        if not isinstance(data.get(key, {}), dict):
            _fail(text, f"{key!r} must be a table", key)
    methods = tuple(data.get("methods", ExperimentConfig.methods))
    for m in methods:
        if m not in METHODS:
            _fail(text, f"unknown method {m!r}; choose from {', '.join(METHODS)}", "methods")
    seeds = data.get("seeds", 20)
    if not isinstance(seeds, int) or seeds < 1:
        _fail(text, "seeds must be a positive integer", "seeds")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        _fail(text, "seed must be a nonnegative integer", "seed")

    noise = dict(data.get("noise", {}))
    levels = noise.pop("levels", [{}])
    if not isinstance(levels, list) or not levels or not all(isinstance(lv, dict) for lv in levels):
        _fail(text, "levels must be a non-empty array of tables", "levels", "noise")
    built = tuple(_build(NoiseLevel, {**noise, **lv}, text, "noise") for lv in levels)
    for lv in built:
        try:
            NoiseModel(lv.pixel_sigma, lv.outlier_rate, lv.heatmap_sigma)
        except ValueError as exc:
            raise ConfigError(f"[noise] at line {_line_of(text, 'levels', 'noise')}: {exc}") from exc
    if len({lv.name for lv in built}) != len(built):
        _fail(text, "noise levels must have distinct labels", "levels", "noise")

    scene = _build(SceneSpec, data.get("scene", {}), text, "scene")
    if scene.cams < 2 or scene.joints < 1 or scene.frames < 1 or scene.image_size < 8 or scene.focal <= 0:
        _fail(text, "scene needs >= 2 cams, >= 1 joint and frame, image_size >= 8, focal > 0", "cams", "scene")
    return ExperimentConfig(
        seed=seed,
        seeds=seeds,
        methods=methods,
        scene=scene,
        noise=built,
        inference=_inference(data.get("inference", {}), text),
        losses=_build(LossConfig, data.get("losses", {}), text, "losses"),
    )


CONFIG_DIR = Path(__file__).with_name("configs")


def resolve_config(path) -> Path:
    """``path`` itself if it exists, else the shipped config of that file name."""
    path = Path(path)
    if path.exists() or path.parent != Path("."):
        return path
    shipped = CONFIG_DIR / path.name
    return shipped if shipped.exists() else path


def load_config(path) -> ExperimentConfig:
    return parse_config(resolve_config(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def cell_seed(config_seed: int, level: int, index: int) -> int:
    return int(np.random.SeedSequence([config_seed, level, index]).generate_state(1)[0])


def make_scene(spec: SceneSpec, seed: int) -> SceneTruth:
    return gen_scene(spec.cams, spec.joints, spec.frames, seed=seed, intrinsics=spec.intrinsics,
                     width=spec.image_size, height=spec.image_size)


def run_method(method: str, scene: SceneTruth, keypoints, heatmaps, inference: PtConfig, seed: int):
    """``(rig, points, residual_history)`` of one method on one observation set."""
    intr = scene.rig.intrinsics
    if method == "probabilistic":
        res = run(heatmaps, intr, replace(inference, seed=seed))
        return res.map_rig, extract_pose(res), res.mean_residual_history
    if method == "ransac8pt":
        return (*ransac8pt(keypoints, intr), ())
    if method == "bundle_adjust":
        return (*bundle_adjust(keypoints, intr, init="naive", seed=seed), ())
    if method == "bundle_adjust_ransac":
        return (*bundle_adjust(keypoints, intr, init="ransac", seed=seed), ())
    raise ValueError(f"unknown method {method!r}")


def run_cell(cfg: ExperimentConfig, level: int, index: int) -> list:
    seed = cell_seed(cfg.seed, level, index)
    lv = cfg.noise[level]
    scene = make_scene(cfg.scene, seed)
    noise = NoiseModel(lv.pixel_sigma, lv.outlier_rate, lv.heatmap_sigma, seed)
    need_hm = "probabilistic" in cfg.methods
    kp, hm = render_observations(scene, noise, with_heatmaps=need_hm)
    out = []
    for method in cfg.methods:
        try:
            rig, pts, _ = run_method(method, scene, kp, hm, cfg.inference, seed)
            metrics = evaluate(rig, pts, scene)
        except (ProbTriError, ValueError, np.linalg.LinAlgError):
            metrics = MetricsReport.failed()
        if not all(np.isfinite(v) for v in metrics.as_dict().values()):
            metrics = MetricsReport(*(v if np.isfinite(v) else float("inf") for v in metrics.as_dict().values()))
        out.append(Record(method, lv.name, seed, metrics, level))
    return out


def sort_records(records) -> list:
    order = {m: i for i, m in enumerate(METHODS)}
    return sorted(records, key=lambda r: (order.get(r.method, len(order)), r.method, r.level, r.seed))


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> list:
    """One record per (method, noise level, seed), in a scheduling-independent order."""
    if threads < 1:
        raise ValueError("threads must be >= 1")
    cells = [(lv, i) for lv in range(len(cfg.noise)) for i in range(cfg.seeds)]
    if threads > 1:
        cfg = replace(cfg, inference=replace(cfg.inference, threads=1))
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(lambda c: run_cell(cfg, *c), cells))
    else:
        chunks = [run_cell(cfg, *c) for c in cells]
    return sort_records(r for chunk in chunks for r in chunk)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6g}"


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        m = r.metrics
        writer.writerow([r.method, r.noise, r.seed, _fmt(m.e3d), _fmt(m.e2d), _fmt(m.er), _fmt(m.et)])
    return buf.getvalue()


def write_csv(records, path) -> None:
    Path(path).write_bytes(records_to_csv(records).encode("utf-8"))


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [Record(r["method"], r["noise"], int(r["seed"]),
                   MetricsReport(*(float(r[k]) for k in METRICS))) for r in rows]


def aggregate(records) -> dict:
    """``{(method, noise): {metric: {"mean", "median", "n"}}}``."""
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.noise), []).append(r.metrics)
    out = {}
    for key, ms in groups.items():
        out[key] = {}
        for name in METRICS:
            v = np.array([getattr(m, name) for m in ms])
            with np.errstate(invalid="ignore"):
                out[key][name] = {"mean": float(np.mean(v)), "median": float(np.median(v)), "n": len(v)}
    return out


def format_aggregate(agg: dict) -> str:
    lines = ["method,noise,metric,mean,median,n"]
    for (method, noise), stats in agg.items():
        for name in METRICS:
            s = stats[name]
            lines.append(f"{method},{noise},{name},{_fmt(s['mean'])},{_fmt(s['median'])},{s['n']}")
    return "\n".join(lines) + "\n"


def ordering_fraction(records, methods, metric: str, noise: str | None = None,
                      resamples: int = 1000, seed: int = 0) -> float:
    """Fraction of paired bootstrap resamples whose medians are strictly increasing along ``methods``.

    Seeds are resampled jointly, so every method sees the same scenes.
    """
    table = {}
    for r in records:
        if noise is None or r.noise == noise:
            table.setdefault(r.method, {})[(r.noise, r.seed)] = getattr(r.metrics, metric)
    keys = sorted(set.intersection(*(set(table.get(m, {})) for m in methods)))
    if not keys:
        raise ValueError("no cells shared by all methods")
    vals = np.array([[table[m][k] for k in keys] for m in methods])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(keys), (resamples, len(keys)))
    med = np.median(vals[:, idx], axis=2)
    return float(np.mean(np.all(np.diff(med, axis=0) > 0, axis=0)))
