"""Experiment harness: data ingestion, synthetic scenes and file output.

Numbers go to CSV (one ``#``-prefixed line carrying the experiment spec as
JSON, then a header row) and a JSON summary.  SVG rendering is optional
and never the source of any number.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .densify import AugPolicy, ImageAnnotations, apply_policy
from .geometry import Box, MIN_BOX_AREA, Prediction, Target, boxes_to_array, clip, iou, pairwise_iou
from .losses import LossParams, LossVariant, landscape, minimizer
from .matching import CostWeights, count_positives, cost_from_arrays, hungarian, o2m_from_arrays
from .schedule import ScheduleConfig, aug_at

logger = logging.getLogger(__name__)


class LoadError(ValueError):
    """Raised for malformed annotation files; the message names the offending record."""


@dataclass(frozen=True)
class Dataset:
    images: Tuple[ImageAnnotations, ...]
    categories: Dict[int, str]
    provenance: str
    dropped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        for img in self.images:
            for t in img.targets:
                if t.label not in self.categories:
                    raise ValueError(f"image {img.image_id!r}: label {t.label} not in category map")

    def __len__(self) -> int:
        return len(self.images)

    def mean_targets(self) -> float:
        return float(np.mean([len(i) for i in self.images])) if self.images else 0.0


# -- COCO JSON ----------------------------------------------------------------------------------


def _require(record: Mapping, keys: Sequence[str], where: str) -> None:
    if not isinstance(record, Mapping):
        raise LoadError(f"{where}: expected an object, got {type(record).__name__}")
    missing = [k for k in keys if k not in record]
    if missing:
        raise LoadError(f"{where}: missing key(s) {', '.join(missing)}")


def parse_coco(data: Any, source: str = "<memory>") -> Dataset:
    _require(data, ("images", "annotations", "categories"), source)
    categories: Dict[int, str] = {}
    for k, cat in enumerate(data["categories"]):
        _require(cat, ("id",), f"{source}: categories[{k}]")
        categories[int(cat["id"])] = str(cat.get("name", cat["id"]))
    canvases: Dict[Any, Tuple[int, int]] = {}
    order: List[Any] = []
    for k, img in enumerate(data["images"]):
        where = f"{source}: images[{k}]"
        _require(img, ("id", "width", "height"), where)
        w, h = img["width"], img["height"]
        if not (isinstance(w, (int, float)) and isinstance(h, (int, float))) or w <= 0 or h <= 0:
            raise LoadError(f"{where} (id={img['id']!r}): width/height must be positive numbers")
        if img["id"] in canvases:
            raise LoadError(f"{where}: duplicate image id {img['id']!r}")
        canvases[img["id"]] = (int(w), int(h))
        order.append(img["id"])
    per_image: Dict[Any, List[Target]] = {i: [] for i in order}
    dropped = 0
    for k, ann in enumerate(data["annotations"]):
        where = f"{source}: annotations[{k}]"
        _require(ann, ("image_id", "bbox", "category_id"), where)
        if ann.get("id") is not None:
            where += f" (id={ann['id']!r})"
        if ann["image_id"] not in canvases:
            raise LoadError(f"{where}: unknown image_id {ann['image_id']!r}")
        bbox = ann["bbox"]
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise LoadError(f"{where}: bbox must be [x, y, w, h]")
        try:
            x, y, bw, bh = (float(v) for v in bbox)
        except (TypeError, ValueError):
            raise LoadError(f"{where}: bbox values must be numbers") from None
        if not all(math.isfinite(v) for v in (x, y, bw, bh)):
            raise LoadError(f"{where}: bbox has non-finite values")
        if bw < 0 or bh < 0:
            raise LoadError(f"{where}: negative bbox size ({bw}, {bh})")
        label = int(ann["category_id"])
        if label not in categories:
            raise LoadError(f"{where}: category_id {label} not in categories")
        W, H = canvases[ann["image_id"]]
        box = None
        if bw > 0 and bh > 0:
            box = clip(Box.from_corners(x / W, y / H, (x + bw) / W, (y + bh) / H))
        if box is None:
            dropped += 1
            continue
        per_image[ann["image_id"]].append(Target(box, label))
    images = tuple(ImageAnnotations(i, canvases[i], tuple(per_image[i])) for i in order)
    if dropped:
        logger.info("%s: dropped %d invalid boxes", source, dropped)
    return Dataset(images, categories, "coco_json", dropped)


def load_coco(path) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}") from exc
    return parse_coco(data, str(path))


# Saved pixel coordinates are rounded so that save -> load -> save is a fixed point.
PIXEL_DECIMALS = 6


def to_coco(dataset: Dataset) -> Dict[str, Any]:
    """COCO dict with pixel ``[x, y, w, h]`` boxes.  Non-integer image ids are renumbered."""
    images, annotations = [], []
    used = {img.image_id for img in dataset.images if isinstance(img.image_id, int)}
    next_id = max(used, default=-1) + 1
    ann_id = 1
    for img in dataset.images:
        if isinstance(img.image_id, int):
            image_id = img.image_id
        else:
            image_id, next_id = next_id, next_id + 1
        W, H = img.canvas
        images.append({"id": image_id, "width": W, "height": H, "file_name": str(img.image_id)})
        for t in img.targets:
            x0, y0, x1, y1 = t.box.corners
            bbox = [round(v, PIXEL_DECIMALS) for v in (x0 * W, y0 * H, (x1 - x0) * W, (y1 - y0) * H)]
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "bbox": bbox,
                    "area": round(bbox[2] * bbox[3], PIXEL_DECIMALS),
                    "category_id": t.label,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    cats = [{"id": k, "name": v} for k, v in sorted(dataset.categories.items())]
    return {"images": images, "annotations": annotations, "categories": cats}


def save_coco(dataset: Dataset, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(to_coco(dataset), indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror})") from exc
    return path


# -- synthetic scenes -----------------------------------------------------------------------------

SIZE_RANGE = (0.05, 0.3)


def synth_targets(rng: np.random.Generator, n_targets: int, label: int = 0) -> List[Target]:
    sizes = rng.uniform(*SIZE_RANGE, size=(n_targets, 2))
    centers = sizes / 2 + rng.uniform(0.0, 1.0, size=(n_targets, 2)) * (1.0 - sizes)
    return [Target(Box(cx, cy, w, h), label) for (cx, cy), (w, h) in zip(centers, sizes)]


def _jitter(rng: np.random.Generator, box: Box, noise: float) -> Box:
    if noise == 0:
        return box
    dx, dy, sw, sh = rng.normal(0.0, noise, size=4)
    out = clip(Box(box.cx + dx * box.w, box.cy + dy * box.h, box.w * math.exp(sw), box.h * math.exp(sh)))
    return out if out is not None else box


def synth_predictions(
    rng: np.random.Generator,
    targets: Sequence[Target],
    n_preds: int,
    noise: float,
    copy_fraction: float = 0.5,
    n_classes: int = 1,
) -> List[Prediction]:
    """Predictions imitating a partially trained detector.

    Every target first receives one jittered copy (as many as ``n_preds``
    allows); of the remaining slots, ``copy_fraction`` are further copies of
    random targets and the rest uniform distractors.  A copy's confidence
    grows with its IoU to the source box; distractors score low.
    """
    if n_preds < 1:
        raise ValueError(f"n_preds must be >= 1, got {n_preds}")
    preds: List[Prediction] = []
    n_t = len(targets)
    sources: List[Optional[int]] = list(range(min(n_t, n_preds)))
    extra = n_preds - len(sources)
    if extra > 0:
        n_copies = int(round(extra * copy_fraction)) if n_t else 0
        sources += [int(j) for j in rng.integers(0, max(n_t, 1), size=n_copies)]
        sources += [None] * (extra - n_copies)
    for src in sources:
        probs = np.zeros(n_classes)
        if src is None:
            box = synth_targets(rng, 1)[0].box
            probs[0] = rng.uniform(0.01, 0.3)
        else:
            t = targets[src]
            box = _jitter(rng, t.box, noise)
            probs[t.label % n_classes] = min(0.99, (0.2 + 0.75 * iou(box, t.box)) * rng.uniform(0.8, 1.0))
        preds.append(Prediction(box, tuple(float(p) for p in probs)))
    return preds


def synth_scene(n_targets: int, n_preds: int, noise: float, seed) -> Tuple[List[Prediction], List[Target]]:
    """Random targets plus predictions from :func:`synth_predictions`, fully determined by ``seed``."""
    if n_targets < 0:
        raise ValueError(f"n_targets must be >= 0, got {n_targets}")
    rng = np.random.default_rng(seed)
    targets = synth_targets(rng, n_targets)
    return synth_predictions(rng, targets, n_preds, noise), targets


def synth_dataset(n_images: int, seed: int, min_targets: int = 1, max_targets: int = 20) -> Dataset:
    rng = np.random.default_rng([int(seed), 11])
    counts = rng.integers(min_targets, max_targets + 1, size=n_images)
    images = tuple(
        ImageAnnotations(i, (640, 640), tuple(synth_targets(rng, int(n)))) for i, n in enumerate(counts)
    )
    return Dataset(images, {0: "object"}, f"synthetic(seed={seed})")


# -- experiment spec -----------------------------------------------------------------------------------

EXPERIMENT_KINDS = ("match_stats", "landscape", "loss_curves", "densify_stats")


@dataclass(frozen=True)
class MatcherConfig:
    weights: CostWeights = field(default_factory=CostWeights)
    k_max: int = 10
    topk_for_dynamic_k: int = 10


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    seed: int
    out: str = "out"
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    mal: LossParams = field(default_factory=lambda: LossParams.default(LossVariant.MAL))
    vfl: LossParams = field(default_factory=lambda: LossParams.default(LossVariant.VFL))
    fl: LossParams = field(default_factory=lambda: LossParams.default(LossVariant.FL))
    policy: AugPolicy = field(default_factory=AugPolicy)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    n_images: int = 500
    n_preds: int = 100
    noise: float = 0.15
    min_targets: int = 1
    max_targets: int = 20
    batch_size: int = 4
    epochs: Tuple[int, ...] = ()
    p_grid: Tuple[float, ...] = ()
    q_grid: Tuple[float, ...] = ()
    curve_qs: Tuple[float, ...] = (0.05, 0.95)
    svg: bool = False

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.seed is None:
            raise ValueError("experiment seed is mandatory")
        for name in ("epochs", "p_grid", "q_grid", "curve_qs"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("mal", "vfl", "fl"):
            if getattr(self, name).variant.value != name:
                raise ValueError(f"{name} parameters carry variant {getattr(self, name).variant.value!r}")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        for key in ("mal", "vfl", "fl"):
            d[key]["variant"] = getattr(self, key).variant.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentSpec":
        return _build(cls, d)


def _build(cls, d: Mapping[str, Any]):
    """Construct a (nested) dataclass from a plain mapping; unknown keys are rejected."""
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in d.items():
        sub = _NESTED.get(key)
        if sub is not None and isinstance(value, Mapping):
            value = _build(sub, value)
        kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    "matcher": MatcherConfig,
    "weights": CostWeights,
    "mal": LossParams,
    "vfl": LossParams,
    "fl": LossParams,
    "policy": AugPolicy,
    "schedule": ScheduleConfig,
}


# -- output --------------------------------------------------------------------------------------------


def _fmt(v) -> Any:
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]], spec: Optional[Mapping] = None) -> Path:
    """Write a CSV with an optional ``# {spec json}`` first line, then the header row."""
    path = Path(path)
    buf = io.StringIO()
    if spec is not None:
        buf.write("# " + json.dumps(jsonable(spec), sort_keys=True, separators=(",", ":")) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror})") from exc
    return path


def read_csv(path) -> Tuple[Optional[Dict[str, Any]], List[Dict[str, str]]]:
    """Read a file written by :func:`write_csv`; returns ``(spec, rows)``."""
    lines = Path(path).read_text().splitlines()
    spec = None
    if lines and lines[0].startswith("# "):
        spec = json.loads(lines[0][2:])
        lines = lines[1:]
    return spec, list(csv.DictReader(lines))


def write_json(path, obj: Mapping[str, Any]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror})") from exc
    return path


def jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return jsonable(asdict(obj))
    if isinstance(obj, Mapping):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


@dataclass
class StatsReport:
    kind: str
    summary: Dict[str, Any]
    files: List[str] = field(default_factory=list)
    rows: List[Dict[str, Any]] = field(default_factory=list)


# -- match statistics ---------------------------------------------------------------------------------


def _scene_arrays(preds: Sequence[Prediction], targets: Sequence[Target]):
    pb = boxes_to_array([p.box for p in preds])
    tb = boxes_to_array([t.box for t in targets])
    scores = np.array([[p.prob(t.label) for t in targets] for p in preds]).reshape(len(preds), len(targets))
    return pb, scores, tb


def match_counts(preds: Sequence[Prediction], targets: Sequence[Target], matcher: MatcherConfig) -> Tuple[int, int]:
    """``(O2O positives, O2M positives)`` for one image."""
    if not targets:
        return 0, 0
    pb, scores, tb = _scene_arrays(preds, targets)
    cost = cost_from_arrays(pb, scores, tb, matcher.weights)
    o2o = hungarian(cost)
    o2m = o2m_from_arrays(cost, pairwise_iou(pb, tb), matcher.k_max, matcher.topk_for_dynamic_k)
    return count_positives(o2o), count_positives(o2m)


def histogram(values: Sequence[int]) -> Dict[int, int]:
    """Unit-width histogram over ``0..max(values)``."""
    if not len(values):
        return {}
    counts = np.bincount(np.asarray(values, dtype=int))
    return {i: int(c) for i, c in enumerate(counts)}


def run_match_stats(spec: ExperimentSpec, dataset: Optional[Dataset] = None, write: bool = True) -> StatsReport:
    """Positive-count statistics of one-to-one vs one-to-many matching.

    Without a ``dataset`` a synthetic one with ``spec.n_images`` images is
    generated.  Predictions are always synthetic (:func:`synth_predictions`),
    seeded per image from ``spec.seed``.
    """
    if dataset is None:
        dataset = synth_dataset(spec.n_images, spec.seed, spec.min_targets, spec.max_targets)
    rows = []
    for k, img in enumerate(dataset.images):
        rng = np.random.default_rng([int(spec.seed), 23, k])
        n_classes = max(dataset.categories, default=0) + 1
        preds = synth_predictions(rng, img.targets, spec.n_preds, spec.noise, n_classes=n_classes)
        o2o, o2m = match_counts(preds, img.targets, spec.matcher)
        ratio = o2m / o2o if o2o else float("nan")
        rows.append({"image": k, "n_targets": len(img), "o2o": o2o, "o2m": o2m, "ratio": ratio})
    o2o_hist = histogram([r["o2o"] for r in rows])
    o2m_hist = histogram([r["o2m"] for r in rows])
    ratios = np.array([r["ratio"] for r in rows if r["o2o"] > 0])
    summary = {
        "provenance": dataset.provenance,
        "synthetic_predictions": True,
        "n_images": len(rows),
        "mean_o2o": float(np.mean([r["o2o"] for r in rows])) if rows else 0.0,
        "mean_o2m": float(np.mean([r["o2m"] for r in rows])) if rows else 0.0,
        "max_ratio": float(ratios.max()) if ratios.size else 0.0,
        "median_ratio": float(np.median(ratios)) if ratios.size else 0.0,
        "dominance_fraction": float(np.mean([r["o2m"] >= r["o2o"] for r in rows])) if rows else 1.0,
        "o2o_histogram_total": sum(o2o_hist.values()),
        "o2m_histogram_total": sum(o2m_hist.values()),
    }
    report = StatsReport("match_stats", summary, rows=rows)
    if write:
        out = Path(spec.out)
        meta = spec.to_dict()
        cols = ("image", "n_targets", "o2o", "o2m", "ratio")
        report.files.append(str(write_csv(out / "match_stats.csv", cols, ([r[c] for c in cols] for r in rows), meta)))
        top = max(list(o2o_hist) + list(o2m_hist), default=-1)
        hist_rows = ((b, o2o_hist.get(b, 0), o2m_hist.get(b, 0)) for b in range(top + 1))
        report.files.append(str(write_csv(out / "match_histogram.csv", ("positives", "o2o_images", "o2m_images"), hist_rows, meta)))
        ratio_hist = np.bincount(np.floor(ratios).astype(int)) if ratios.size else np.zeros(0, dtype=int)
        report.files.append(
            str(write_csv(out / "match_ratio_histogram.csv", ("ratio_floor", "images"), enumerate(ratio_hist.tolist()), meta))
        )
        report.files.append(str(write_json(out / "match_stats_summary.json", {"spec": meta, "summary": summary})))
        if spec.svg:
            from .svg import histogram_svg

            report.files.append(str(histogram_svg(out / "match_histogram.svg", o2o_hist, o2m_hist)))
    return report


# -- landscapes and curves -----------------------------------------------------------------------------

DEFAULT_P_GRID = tuple(round(0.01 * i, 2) for i in range(1, 100))
DEFAULT_Q_GRID = tuple(round(0.01 * i, 2) for i in range(0, 101))


def _variant_params(spec: ExperimentSpec, name: str) -> LossParams:
    return getattr(spec, LossVariant(name).value)


def loss_curves(spec: ExperimentSpec, p_grid: Sequence[float]) -> Dict[str, np.ndarray]:
    """VFL and MAL as functions of ``p`` (positive label) at each of ``spec.curve_qs``."""
    curves = {}
    mal_params = _variant_params(spec, "mal")
    for q in spec.curve_qs:
        curves[f"vfl_q{q:g}"] = landscape(LossVariant.VFL, spec.vfl, p_grid, [q])[0]
        curves[f"mal_q{q:g}"] = landscape(LossVariant.MAL, mal_params, p_grid, [q])[0]
    return curves


def _curve_summary(spec: ExperimentSpec, p_grid: Sequence[float], curves) -> Dict[str, Any]:
    mal_params = _variant_params(spec, "mal")
    summary: Dict[str, Any] = {"curve_qs": list(spec.curve_qs)}
    for q in spec.curve_qs:
        p_vfl = minimizer(LossVariant.VFL, spec.vfl, q)
        p_mal = minimizer(LossVariant.MAL, mal_params, q)
        vfl, mal_ = curves[f"vfl_q{q:g}"], curves[f"mal_q{q:g}"]
        not_above = [p for p, v, m in zip(p_grid, vfl, mal_) if p >= 0.5 and not m > v]
        summary[f"q{q:g}"] = {
            "vfl_argmin_p": p_vfl,
            "mal_argmin_p": p_mal,
            "argmin_gap": abs(p_vfl - p_mal),
            "mal_above_vfl_for_p_ge_0.5": not not_above,
            "vfl_range": float(np.ptp(vfl)),
            "mal_range": float(np.ptp(mal_)),
        }
    return summary


def _write_curves(spec: ExperimentSpec, report: StatsReport, p_grid, curves) -> None:
    out = Path(spec.out)
    cols = ["p"] + list(curves)
    rows = ([p] + [curves[c][j] for c in curves] for j, p in enumerate(p_grid))
    report.files.append(str(write_csv(out / "loss_curves.csv", cols, rows, spec.to_dict())))
    if spec.svg:
        from .svg import curves_svg

        report.files.append(str(curves_svg(out / "loss_curves.svg", p_grid, curves)))


def run_loss_curves(spec: ExperimentSpec, write: bool = True) -> StatsReport:
    p_grid = spec.p_grid or DEFAULT_P_GRID
    curves = loss_curves(spec, p_grid)
    report = StatsReport("loss_curves", _curve_summary(spec, p_grid, curves))
    report.rows = [{"p": p, **{k: float(v[j]) for k, v in curves.items()}} for j, p in enumerate(p_grid)]
    if write:
        _write_curves(spec, report, p_grid, curves)
        report.files.append(
            str(write_json(Path(spec.out) / "loss_curves_summary.json", {"spec": spec.to_dict(), "summary": report.summary}))
        )
    return report


def run_landscape(spec: ExperimentSpec, write: bool = True, which: Sequence[str] = ("vfl", "mal")) -> StatsReport:
    """Loss surfaces over ``(q, p)`` for each variant in ``which``, plus the 1-D curves.

    Surface CSVs have one row per ``q`` and one column per ``p``.
    """
    p_grid = spec.p_grid or DEFAULT_P_GRID
    q_grid = spec.q_grid or DEFAULT_Q_GRID
    surfaces = {name: landscape(name, _variant_params(spec, name), p_grid, q_grid) for name in which}
    curves = loss_curves(spec, p_grid)
    report = StatsReport("landscape", _curve_summary(spec, p_grid, curves))
    report.rows = [{"p": p, **{k: float(v[j]) for k, v in curves.items()}} for j, p in enumerate(p_grid)]
    if write:
        out = Path(spec.out)
        meta = spec.to_dict()
        header = ["q"] + [f"p={p!r}" for p in p_grid]
        for name, surf in surfaces.items():
            rows = ([q] + list(surf[i]) for i, q in enumerate(q_grid))
            report.files.append(str(write_csv(out / f"landscape_{name}.csv", header, rows, meta)))
            if spec.svg:
                from .svg import heatmap_svg

                report.files.append(str(heatmap_svg(out / f"landscape_{name}.svg", surf, f"{name.upper()} loss")))
        _write_curves(spec, report, p_grid, curves)
        report.files.append(str(write_json(out / "landscape_summary.json", {"spec": meta, "summary": report.summary})))
    return report


# -- densification statistics ---------------------------------------------------------------------------


def densify_epoch(
    dataset: Dataset, policy: AugPolicy, schedule: ScheduleConfig, epoch: int, batch_size: int = 4
) -> List[Tuple[int, int, int, int]]:
    """``(batch, image, targets before, targets after)`` for one simulated epoch."""
    flags = aug_at(epoch, schedule)
    out = []
    images = dataset.images
    n_batches = math.ceil(len(images) / batch_size) if images else 0
    for b in range(n_batches):
        batch = images[b * batch_size : (b + 1) * batch_size]
        aug = apply_policy(batch, policy, flags, batch_index=epoch * n_batches + b)
        for k, (src, dst) in enumerate(zip(batch, aug)):
            out.append((b, b * batch_size + k, len(src), len(dst)))
    return out


def run_densify_stats(
    dataset: Dataset,
    policy: AugPolicy,
    schedule: ScheduleConfig,
    epochs: Optional[Sequence[int]] = None,
    batch_size: int = 4,
    out: Optional[str] = None,
    spec: Optional[ExperimentSpec] = None,
) -> StatsReport:
    """Per-image target counts before and after densification, with schedule gating.

    ``epochs`` defaults to every epoch of ``schedule``.
    """
    if epochs is None or len(epochs) == 0:
        epochs = range(schedule.total_epochs)
    rows = []
    per_epoch = {}
    for e in epochs:
        recs = densify_epoch(dataset, policy, schedule, int(e), batch_size)
        flags = aug_at(int(e), schedule)
        for b, i, before, after in recs:
            rows.append({"epoch": int(e), "dense_o2o_on": flags.dense_o2o_on, "batch": b, "image": i, "before": before, "after": after})
        if recs:
            per_epoch[int(e)] = {
                "dense_o2o_on": flags.dense_o2o_on,
                "mean_before": float(np.mean([r[2] for r in recs])),
                "mean_after": float(np.mean([r[3] for r in recs])),
            }
    summary = {"provenance": dataset.provenance, "epochs": per_epoch}
    report = StatsReport("densify_stats", summary, rows=rows)
    if out is not None:
        meta = spec.to_dict() if spec is not None else {
            "policy": asdict(policy),
            "schedule": asdict(schedule),
            "batch_size": batch_size,
        }
        cols = ("epoch", "dense_o2o_on", "batch", "image", "before", "after")
        report.files.append(str(write_csv(Path(out) / "densify_stats.csv", cols, ([r[c] for c in cols] for r in rows), meta)))
        report.files.append(str(write_json(Path(out) / "densify_stats_summary.json", {"spec": meta, "summary": summary})))
    return report


def densify_dataset(dataset: Dataset, policy: AugPolicy, batch_size: int = 4) -> Dataset:
    """One densification pass over ``dataset`` with dense O2O forced on."""
    from .schedule import AugState

    flags = AugState(True, True)
    images: List[ImageAnnotations] = []
    n_batches = math.ceil(len(dataset.images) / batch_size) if dataset.images else 0
    for b in range(n_batches):
        batch = dataset.images[b * batch_size : (b + 1) * batch_size]
        images.extend(apply_policy(batch, policy, flags, batch_index=b))
    return replace(dataset, images=tuple(images), provenance=f"{dataset.provenance}+densified(seed={policy.seed})")
