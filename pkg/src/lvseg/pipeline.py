"""End-to-end orchestration: classification, seeding, contour evolution, reporting.

A study is a directory holding either slice directories (one per case) or
NIfTI volumes with optional ``*_gt`` label volumes next to them. Every case
is classified slice by slice, seeded, segmented with the parameter set of
its class and, when ground truth exists, scored. Reports are written as
delimited text plus a few PNG figures.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .classifier import CLASS_ORDER, ForestHyper, RandomForestModel, SliceClass
from .errors import (DimensionMismatch, EmptyGrid, EmptyStudy, InvalidSpec, IoFailure,
                     LengthMismatch, LvSegError, MissingLabels)
from .features import WORKING_SIZE, DaisyConfig, keypoint_grid, slice_features
from .lgdacm import LgdParams, ParameterRegistry, segment_slice
from .maskgen import (APICAL_STOP_AREA, MaskgenConfig, component_props, select_lv_mask,
                      sequential_seed_masks, shrink_mask)
from .metrics import METRIC_ROWS, MetricReport, dice, evaluate_masks
from .volume_io import (MANIFEST, CmrVolume, GroundTruthMask, SliceImage, extract_slices,
                        load_ground_truth, load_volume, resize_bilinear)

log = logging.getLogger(__name__)

PROPOSED = "Proposed"
GROUPS = [c.value for c in CLASS_ORDER] + ["Overall"]
METRIC_FIELDS = [f.name for f in fields(MetricReport)]
SEQUENTIAL_SLICES = 3


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    daisy: DaisyConfig = field(default_factory=DaisyConfig)
    forest: ForestHyper = field(default_factory=ForestHyper)
    registry: ParameterRegistry = field(default_factory=ParameterRegistry)
    maskgen: MaskgenConfig = field(default_factory=MaskgenConfig)
    lv_label: int = 3
    seed: int = 0
    working_size: tuple[int, int] = WORKING_SIZE
    init_height: float = 4.0
    roi_margin: int | None = 24
    apical_stop_area: int = APICAL_STOP_AREA

    def __post_init__(self):
        self.working_size = tuple(int(v) for v in self.working_size)
        if len(self.working_size) != 2 or min(self.working_size) < 2:
            raise InvalidSpec(f"bad working size {self.working_size}")
        if self.init_height <= 0:
            raise InvalidSpec("init_height must be positive")
        if not keypoint_grid(self.working_size, self.daisy):
            raise InvalidSpec("DAISY radius leaves no keypoints at the working size")

    def forest_hyper(self) -> ForestHyper:
        return replace(self.forest, seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "daisy": asdict(self.daisy),
            "forest": asdict(self.forest),
            "registry": self.registry.to_dict(),
            "maskgen": asdict(self.maskgen),
            "lv_label": self.lv_label,
            "seed": self.seed,
            "working_size": list(self.working_size),
            "init_height": self.init_height,
            "roi_margin": self.roi_margin,
            "apical_stop_area": self.apical_stop_area,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        try:
            daisy = data.pop("daisy", {})
            maskgen = data.pop("maskgen", {})
            return cls(
                daisy=DaisyConfig(**{k: tuple(v) if isinstance(v, list) else v
                                     for k, v in daisy.items()}),
                forest=ForestHyper(**data.pop("forest", {})),
                registry=ParameterRegistry.from_dict(data.pop("registry"))
                if "registry" in data else ParameterRegistry(),
                maskgen=MaskgenConfig(**{k: tuple(v) if isinstance(v, list) else v
                                         for k, v in maskgen.items()}),
                **data,
            )
        except (TypeError, ValueError) as exc:
            raise InvalidSpec(f"invalid pipeline config: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_config(path: str | Path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    try:
        return PipelineConfig.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"config {path} is not valid JSON: {exc}") from exc


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    try:
        Path(path).write_text(cfg.dumps())
    except OSError as exc:
        raise IoFailure(f"cannot write config {path}: {exc}") from exc


def save_registry(registry: ParameterRegistry, path: str | Path) -> None:
    try:
        Path(path).write_text(json.dumps(registry.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write registry {path}: {exc}") from exc


def load_registry(path: str | Path) -> ParameterRegistry:
    try:
        return ParameterRegistry.from_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise IoFailure(f"cannot read registry {path}: {exc}") from exc
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise InvalidSpec(f"invalid registry file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# datasets


@dataclass
class CaseSource:
    case_id: str
    image: Path
    gt: Path | None


@dataclass
class CaseData:
    case_id: str
    volume: CmrVolume
    slices: list[SliceImage]
    gt: list[GroundTruthMask] | None = None

    @property
    def true_classes(self) -> list[SliceClass] | None:
        if self.volume.labels is None:
            return None
        return [SliceClass.parse(v) for v in self.volume.labels]


def _nifti_stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def discover_cases(root: str | Path) -> list[CaseSource]:
    """Cases under ``root`` in sorted order.

    A slice directory (holding a manifest) is one case and carries its own
    ground truth when ``gt_001.pgm`` exists. NIfTI files pair with a sibling
    ``<stem>_gt.nii[.gz]``; 4-D cine files are skipped.
    """
    root = Path(root)
    if not root.is_dir():
        raise IoFailure(f"dataset directory {root} does not exist")
    if (root / MANIFEST).exists():
        dirs = [root]
    else:
        dirs = sorted(p.parent for p in root.glob(f"*/{MANIFEST}"))
    out = [CaseSource(d.name if d != root else root.name, d,
                      d if (d / "gt_001.pgm").exists() else None) for d in dirs]
    images = sorted(p for p in root.rglob("*.nii*") if _nifti_stem(p) and
                    not _nifti_stem(p).endswith("_gt") and "_4d" not in p.name)
    for img in images:
        stem = _nifti_stem(img)
        gt = next((g for g in (img.with_name(stem + "_gt.nii.gz"), img.with_name(stem + "_gt.nii"))
                   if g.exists()), None)
        out.append(CaseSource(stem, img, gt))
    return out


def working_slices(volume: CmrVolume, size: tuple[int, int]) -> list[SliceImage]:
    out = []
    for s in extract_slices(volume):
        out.append(s if s.shape == tuple(size) else resize_bilinear(s, *size))
    return out


def load_case(src: CaseSource, cfg: PipelineConfig, with_gt: bool = False) -> CaseData:
    volume = load_volume(src.image)
    volume.case_id = src.case_id
    gt = None
    if with_gt and src.gt is not None:
        gt = load_ground_truth(src.gt, cfg.lv_label, size=cfg.working_size,
                               expected_dims=volume.dims)
    return CaseData(src.case_id, volume, working_slices(volume, cfg.working_size), gt)


def read_classes_csv(path: str | Path) -> dict[str, list[SliceClass | None]]:
    """``case_id,p,n,label`` rows into per-case label lists (blank labels stay ``None``)."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    out: dict[str, list] = {}
    try:
        for row in rows:
            n, p = int(row["n"]), int(row["p"])
            labels = out.setdefault(row["case_id"], [None] * n)
            if len(labels) != n or not 1 <= p <= n:
                raise LengthMismatch(f"inconsistent slice count for {row['case_id']}")
            labels[p - 1] = SliceClass.parse(row["label"]) if row["label"] else None
    except (KeyError, ValueError) as exc:
        raise IoFailure(f"{path} is not a case_id,p,n,label table: {exc}") from exc
    return out


def write_classes_csv(path: str | Path, rows: list[tuple[str, int, int, SliceClass | None]]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case_id", "p", "n", "label"])
            for case_id, p, n, label in rows:
                writer.writerow([case_id, p, n, label.value if label else ""])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# phase 1


def expected_feature_dim(cfg: PipelineConfig) -> int:
    return len(keypoint_grid(cfg.working_size, cfg.daisy)) * cfg.daisy.descriptor_length + 1


def run_phase1(volume: CmrVolume, model: RandomForestModel, cfg: PipelineConfig) -> list[SliceClass]:
    if model.feature_dim != expected_feature_dim(cfg):
        raise DimensionMismatch(f"model expects {model.feature_dim} features but the config "
                                f"produces {expected_feature_dim(cfg)}")
    feats = slice_features(extract_slices(volume), cfg.daisy, cfg.working_size)
    return model.predict(np.stack([f.values for f in feats]))


# ---------------------------------------------------------------------------
# phase 2


@dataclass
class SliceRecord:
    case_id: str
    p: int
    n: int
    variant: str
    predicted: SliceClass
    truth: SliceClass | None = None
    not_found: bool = False
    iterations: int = 0
    metrics: MetricReport | None = None

    @property
    def group(self) -> SliceClass:
        return self.truth if self.truth is not None else self.predicted


@dataclass
class CaseResult:
    case_id: str
    records: list[SliceRecord]
    masks: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def variant(self, name: str) -> list[SliceRecord]:
        return [r for r in self.records if r.variant == name]


def selected_masks(slices: list[SliceImage], cfg: PipelineConfig) -> list[np.ndarray | None]:
    """LV masks before shrinking: a joint pick for the first slices, then one
    slice at a time, each guided by the last centroid found."""
    if not slices:
        return []
    head = sequential_seed_masks(slices[:SEQUENTIAL_SLICES], cfg.maskgen)
    masks = list(head.masks)
    prev = next((c for c in reversed(head.centroids) if c is not None), None)
    for s in slices[SEQUENTIAL_SLICES:]:
        m = select_lv_mask(s, prev, cfg.maskgen)
        masks.append(m)
        if m is not None:
            prev = component_props(m).centroid
    return masks


def make_seed(m: np.ndarray, cls: SliceClass, fraction: float, cfg: PipelineConfig) -> np.ndarray:
    # pinholes from thresholding noise would split the eroded seed into fragments
    return shrink_mask(ndimage.binary_fill_holes(m), cls, fraction, cfg.apical_stop_area)


def seed_masks(selected: list[np.ndarray | None], classes: list[SliceClass],
               registry: ParameterRegistry, cfg: PipelineConfig) -> list[np.ndarray | None]:
    return [None if m is None else make_seed(m, c, registry.shrink[c], cfg)
            for m, c in zip(selected, classes)]


def ablation_registries(registry: ParameterRegistry) -> dict[str, ParameterRegistry]:
    """The per-class registry plus one uniform registry per class set."""
    out = {PROPOSED: registry}
    for c in CLASS_ORDER:
        name = registry.names.get(c) or c.value
        out.setdefault(name, registry.uniform(registry.params[c], name))
    return out


def run_phase2(volume: CmrVolume, classes: list[SliceClass], cfg: PipelineConfig,
               gt: list[GroundTruthMask] | None = None,
               registries: dict[str, ParameterRegistry] | None = None,
               slices: list[SliceImage] | None = None,
               truth: list[SliceClass] | None = None, keep_masks: bool = False) -> CaseResult:
    """Seed and segment every slice of one case under each registry.

    Seeds are computed once per registry's shrink targets, so variants that
    share targets (the uniform ablation rows do) see identical seeds. Slices
    without an LV candidate are recorded as not found and score as an empty
    prediction; slices whose ground truth is empty are not scored.
    """
    slices = slices if slices is not None else working_slices(volume, cfg.working_size)
    if len(classes) != len(slices):
        raise LengthMismatch(f"{len(classes)} classes for {len(slices)} slices")
    if gt is not None and len(gt) != len(slices):
        raise LengthMismatch(f"{len(gt)} ground-truth masks for {len(slices)} slices")
    registries = registries or {PROPOSED: cfg.registry}
    selected = selected_masks(slices, cfg)
    seeds_by_shrink: dict[tuple, list] = {}
    result = CaseResult(volume.case_id, [])
    for name, registry in registries.items():
        key = tuple(sorted((c.value, v) for c, v in registry.shrink.items()))
        if key not in seeds_by_shrink:
            seeds_by_shrink[key] = seed_masks(selected, classes, registry, cfg)
        seeds = seeds_by_shrink[key]
        masks = []
        for k, (s, cls, seed) in enumerate(zip(slices, classes, seeds)):
            record = SliceRecord(volume.case_id, s.p, s.n, name, cls,
                                 truth[k] if truth else None, seed is None)
            if seed is None:
                mask = np.zeros(s.shape, dtype=bool)
            else:
                seg = segment_slice(s, seed, cls, registry, init_height=cfg.init_height,
                                    roi_margin=cfg.roi_margin)
                mask, record.iterations = seg.mask, seg.iterations_run
            if gt is not None and gt[k].pixels.any():
                record.metrics = evaluate_masks(mask, gt[k].pixels)
            result.records.append(record)
            masks.append(mask)
        if keep_masks:
            result.masks[name] = masks
    return result


# ---------------------------------------------------------------------------
# studies


@dataclass
class StudyReport:
    records: list[SliceRecord]
    variants: list[str]
    config: dict = field(default_factory=dict)
    failures: list[tuple[str, str]] = field(default_factory=list)
    masks: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def variant_records(self, variant: str = PROPOSED) -> list[SliceRecord]:
        return [r for r in self.records if r.variant == variant]

    def aggregates(self, variant: str = PROPOSED) -> dict[str, dict[str, float]]:
        """Mean of every metric per class and overall, plus the scored-slice count ``n``.

        Classes are ground-truth classes where known. NaN distances (empty
        predictions) are left out, so each mean is weighted by its own count.
        """
        return aggregate_records(self.variant_records(variant))

    def not_found_rate(self, variant: str = PROPOSED) -> float:
        recs = self.variant_records(variant)
        return sum(r.not_found for r in recs) / len(recs) if recs else 0.0

    def coverage(self, variant: str = PROPOSED) -> float:
        """Fraction of slices that were scored against ground truth."""
        recs = self.variant_records(variant)
        return sum(r.metrics is not None for r in recs) / len(recs) if recs else 0.0

    def ablation_table(self) -> list[tuple[str, dict[str, float]]]:
        return [(v, {g: self.aggregates(v)[g]["dice"] for g in GROUPS}) for v in self.variants]


def aggregate_records(records: list[SliceRecord]) -> dict[str, dict[str, float]]:
    out = {}
    for g in GROUPS:
        scored = [r.metrics for r in records
                  if r.metrics is not None and (g == "Overall" or r.group.value == g)]
        row: dict[str, float] = {"n": float(len(scored))}
        for name in METRIC_FIELDS:
            vals = np.array([getattr(m, name) for m in scored], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            row[name] = float(vals.mean()) if len(vals) else math.nan
        out[g] = row
    return out


def resolve_classes(case: CaseData, mode: str, model: RandomForestModel | None,
                    table: dict[str, list] | None, cfg: PipelineConfig) -> list[SliceClass]:
    if mode == "oracle":
        classes = case.true_classes
        if classes is None:
            raise MissingLabels(f"case {case.case_id} has no slice labels for oracle mode")
        return classes
    if mode == "table":
        if table is None or case.case_id not in table:
            raise MissingLabels(f"no classes listed for case {case.case_id}")
        classes = table[case.case_id]
        if len(classes) != len(case.slices) or any(c is None for c in classes):
            raise MissingLabels(f"incomplete class list for case {case.case_id}")
        return classes
    if model is None:
        raise ValueError("predicted-class mode needs a model")
    return run_phase1(case.volume, model, cfg)


def run_study(dataset: str | Path, cfg: PipelineConfig, gt: bool = True, *,
              model: RandomForestModel | None = None, classes: dict[str, list] | None = None,
              oracle: bool = False, ablation: bool = False, workers: int = 1,
              keep_masks: bool = False) -> StudyReport:
    """Run both phases on every case under ``dataset``.

    Classes come from ``classes`` (a per-case table), from the true labels
    (``oracle``), or from ``model``. Cases run in parallel on ``workers``
    threads; output order follows the sorted case list regardless.
    """
    sources = discover_cases(dataset)
    if not sources:
        raise EmptyStudy(f"no cases found under {dataset}")
    mode = "oracle" if oracle else ("table" if classes is not None else "model")
    registries = ablation_registries(cfg.registry) if ablation else {PROPOSED: cfg.registry}

    def one(src: CaseSource):
        try:
            case = load_case(src, cfg, gt)
            cls = resolve_classes(case, mode, model, classes, cfg)
            return run_phase2(case.volume, cls, cfg, case.gt, registries, case.slices,
                              case.true_classes, keep_masks), None
        except LvSegError as exc:
            if exc.exit_code != 2:
                raise
            log.warning("case %s failed: %s", src.case_id, exc)
            return None, (src.case_id, str(exc))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, sources))
    else:
        outcomes = [one(src) for src in sources]
    report = StudyReport([], list(registries), cfg.to_dict())
    for res, failure in outcomes:
        if failure:
            report.failures.append(failure)
            continue
        report.records.extend(res.records)
        if keep_masks:
            report.masks[res.case_id] = res.masks[PROPOSED]
    return report


# ---------------------------------------------------------------------------
# parameter search


GRID_ORDER = ("lambda1", "lambda2", "nu", "shrink")
_LGD_FIELDS = {f.name for f in fields(LgdParams)}


def grid_points(grid: dict[str, list]) -> list[dict]:
    for key, values in grid.items():
        if key != "shrink" and key not in _LGD_FIELDS:
            raise InvalidSpec(f"unknown grid axis {key!r}")
        if len(values) == 0:
            raise EmptyGrid(f"grid axis {key!r} has no values")
    keys = [k for k in GRID_ORDER if k in grid] + sorted(k for k in grid if k not in GRID_ORDER)
    if not keys:
        raise EmptyGrid("grid has no axes")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def load_grid(path: str | Path) -> dict[SliceClass, dict[str, list]]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read grid {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"grid {path} is not valid JSON: {exc}") from exc
    try:
        return {SliceClass.parse(k): dict(v) for k, v in raw.items()}
    except (ValueError, AttributeError) as exc:
        raise InvalidSpec(f"invalid grid file {path}: {exc}") from exc


def grid_search_params(cases: list[CaseData], grids: dict[SliceClass, dict[str, list]],
                       cfg: PipelineConfig, workers: int = 1,
                       scores: dict | None = None) -> ParameterRegistry:
    """Exhaustive per-class search over the Cartesian grid, maximising mean Dice.

    Ties prefer the smaller ``nu`` and then the smaller ``lambda1``; remaining
    ties keep the first point in grid order. Classes without a grid keep the
    config's parameters. Seeds are selected once per case and only re-shrunk
    per grid point. When ``scores`` is a dict it is filled with
    ``{class: [(point, mean dice), ...]}``.
    """
    if not grids:
        raise EmptyGrid("no class grids given")
    points = {c: grid_points(g) for c, g in grids.items()}
    pool = []
    for case in cases:
        truth = case.true_classes
        if truth is None or case.gt is None:
            raise MissingLabels(f"case {case.case_id} needs labels and ground truth for tuning")
        for s, m, g, c in zip(case.slices, selected_masks(case.slices, cfg), case.gt, truth):
            if g.pixels.any():
                pool.append((s, m, g.pixels, c))
    base = cfg.registry
    params, shrink = dict(base.params), dict(base.shrink)

    for cls, pts in points.items():
        members = [(s, m, g) for s, m, g, c in pool if c is cls]
        if not members:
            raise MissingLabels(f"no labelled {cls.value} slices to tune on")

        def score(point, cls=cls, members=members):
            p = replace(base.params[cls], **{k: v for k, v in point.items() if k != "shrink"})
            frac = point.get("shrink", base.shrink[cls])
            total = 0.0
            for s, m, g in members:
                if m is None:
                    continue
                seed = make_seed(m, cls, frac, cfg)
                mask = segment_slice(s, seed, cls, init_height=cfg.init_height,
                                     roi_margin=cfg.roi_margin, params=p).mask
                total += dice(mask, g)
            return p, frac, total / len(members)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                evaluated = list(ex.map(score, pts))
        else:
            evaluated = [score(pt) for pt in pts]
        if scores is not None:
            scores[cls] = [(pt, d) for pt, (_, _, d) in zip(pts, evaluated)]
        best = min(range(len(pts)), key=lambda i: (-evaluated[i][2], evaluated[i][0].nu,
                                                    evaluated[i][0].lambda1, i))
        params[cls], shrink[cls] = evaluated[best][0], evaluated[best][1]
    return ParameterRegistry(params, dict(base.names), shrink)


# ---------------------------------------------------------------------------
# reporting


SLICE_COLUMNS = ["case_id", "p", "n", "variant", "predicted", "truth", "not_found",
                 "iterations"] + METRIC_FIELDS


def _fmt(v: float) -> str:
    return repr(float(v))


def write_slice_csv(path: str | Path, records: list[SliceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SLICE_COLUMNS)
        for r in records:
            row = [r.case_id, r.p, r.n, r.variant, r.predicted.value,
                   r.truth.value if r.truth else "", int(r.not_found), r.iterations]
            row += ([_fmt(getattr(r.metrics, k)) for k in METRIC_FIELDS] if r.metrics
                    else [""] * len(METRIC_FIELDS))
            writer.writerow(row)


def read_slice_csv(path: str | Path) -> list[SliceRecord]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    out = []
    for row in rows:
        metrics = (MetricReport(**{k: float(row[k]) for k in METRIC_FIELDS})
                   if row["dice"] != "" else None)
        out.append(SliceRecord(row["case_id"], int(row["p"]), int(row["n"]), row["variant"],
                               SliceClass.parse(row["predicted"]),
                               SliceClass.parse(row["truth"]) if row["truth"] else None,
                               bool(int(row["not_found"])), int(row["iterations"]), metrics))
    return out


def summary_text(report: StudyReport) -> str:
    lines = []
    w = 34
    lines.append("Dice by class")
    lines.append(f"{'Method':<{w}}" + "".join(f"{g:>14}" for g in GROUPS))
    for variant, row in report.ablation_table():
        label = "Proposed method" if variant == PROPOSED else f"Parameter Set {variant}"
        lines.append(f"{label:<{w}}" + "".join(f"{row[g]:>14.4f}" for g in GROUPS))
    lines.append("")
    agg = report.aggregates(PROPOSED)
    lines.append("Evaluation metrics (proposed method)")
    lines.append(f"{'Metric':<{w}}" + "".join(f"{g:>14}" for g in GROUPS))
    for key, title in METRIC_ROWS.items():
        lines.append(f"{title:<{w}}" + "".join(f"{agg[g][key]:>14.4f}" for g in GROUPS))
    lines.append(f"{'Scored slices':<{w}}" + "".join(f"{int(agg[g]['n']):>14d}" for g in GROUPS))
    lines.append("")
    lines.append(f"NotFound rate: {report.not_found_rate(PROPOSED):.4f}")
    lines.append(f"Ground-truth coverage: {report.coverage(PROPOSED):.4f}")
    for case_id, msg in report.failures:
        lines.append(f"failed case {case_id}: {msg}")
    return "\n".join(lines) + "\n"


def write_summary_csv(path: str | Path, report: StudyReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "group", "n"] + METRIC_FIELDS)
        for v in report.variants:
            agg = report.aggregates(v)
            for g in GROUPS:
                writer.writerow([v, g, int(agg[g]["n"])] + [_fmt(agg[g][k]) for k in METRIC_FIELDS])


def _plot_figures(report: StudyReport, out: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    recs = [r for r in report.variant_records(PROPOSED) if r.metrics is not None]
    if not recs:
        return paths
    names = [c.value for c in CLASS_ORDER]
    data = [[r.metrics.dice for r in recs if r.group is c] for c in CLASS_ORDER]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    keep = [i for i, d in enumerate(data) if d]
    ax.boxplot([data[i] for i in keep], tick_labels=[names[i] for i in keep])
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1.02)
    ax.set_title("Per-slice Dice, proposed method")
    fig.tight_layout()
    paths.append(out / "dice_by_class.png")
    fig.savefig(paths[-1], dpi=120, metadata={"Software": None})
    plt.close(fig)

    if len(report.variants) > 1:
        table = report.ablation_table()
        fig, ax = plt.subplots(figsize=(6, 3.5))
        width = 0.8 / len(table)
        x = np.arange(len(GROUPS))
        for i, (variant, row) in enumerate(table):
            label = variant if variant == PROPOSED else f"Set {variant}"
            ax.bar(x + (i - (len(table) - 1) / 2) * width,
                   [np.nan_to_num(row[g]) for g in GROUPS], width, label=label)
        ax.set_xticks(x, GROUPS)
        ax.set_ylabel("Mean Dice")
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=8, loc="lower left")
        fig.tight_layout()
        paths.append(out / "ablation_dice.png")
        fig.savefig(paths[-1], dpi=120, metadata={"Software": None})
        plt.close(fig)
    return paths


def emit_report(report: StudyReport, path: str | Path, figures: bool = True) -> list[Path]:
    """Write slices.csv, summary.csv, summary.txt, config.json and figures under ``path``."""
    if not report.records:
        raise EmptyStudy("report has no slice results")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_slice_csv(out / "slices.csv", report.records)
        write_summary_csv(out / "summary.csv", report)
        (out / "summary.txt").write_text(summary_text(report))
        (out / "config.json").write_text(json.dumps(report.config, indent=2, sort_keys=True) + "\n")
        written = [out / n for n in ("slices.csv", "summary.csv", "summary.txt", "config.json")]
        if figures:
            written += _plot_figures(report, out)
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}") from exc
    return written
