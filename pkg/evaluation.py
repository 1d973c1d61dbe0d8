"""Episode-level evaluation: IoU metrics, multi-run averaging and the alignment probe.

Per-class IoU is computed from intersection and union counts accumulated
over every episode of a run, then averaged over runs. Segmentors only ever
see support images, support annotations and query images; query masks are
used for scoring alone.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Protocol, Sequence

import numpy as np

import encoder
from annotations import AnnotationConfig, WeakAnnotation, derive_weak, pool_with_weak
from checkpoint import Checkpoint
from encoder import EncoderParams
from episodes import Episode, episode_seed, sample_episode
from prototypes import (MetricConfig, compute_prototypes, downsample_mask, predict_mask, probability_map,
                        upsample_mask)
from shapes import ShapeDatasetConfig
from validation import ShapeError, validate_non_negative, validate_positive, validate_split_part

logger = logging.getLogger(__name__)

THREADS_ENV = "PROTOSEG_THREADS"
ANNOTATION_STREAM = 2
PROBE_STREAM = 3


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 200
    runs: int = 5
    seed: int = 1000
    way: int = 1
    shot: int = 1
    n_query: int = 1
    support_instances: int = 1
    split_part: str = "unseen"
    probe_alignment: bool = False
    probe_episodes: int = 200

    def validate(self) -> "EvalConfig":
        for name in ("episodes", "runs", "way", "shot", "n_query", "support_instances"):
            validate_positive(f"eval.{name}", getattr(self, name))
        validate_non_negative("eval.probe_episodes", self.probe_episodes)
        validate_split_part(self.split_part)
        return self


# Metrics ---------------------------------------------------------------------------

def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if np.shape(pred) != np.shape(gt):
        raise ShapeError(f"Prediction {np.shape(pred)} and ground truth {np.shape(gt)} shapes differ")


def iou(pred: np.ndarray, gt: np.ndarray, label: int) -> float:
    """|pred == label and gt == label| / |pred == label or gt == label|.

    Both sets empty gives 1.0.
    """
    _check_shapes(pred, gt)
    a, b = np.asarray(pred) == label, np.asarray(gt) == label
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean of the foreground IoU (all classes as one) and the background IoU."""
    _check_shapes(pred, gt)
    fg_pred, fg_gt = (np.asarray(pred) > 0).astype(np.uint8), (np.asarray(gt) > 0).astype(np.uint8)
    return (iou(fg_pred, fg_gt, 1) + iou(fg_pred, fg_gt, 0)) / 2.0


@dataclass
class IoUAccumulator:
    """Intersection / union counts per global class id plus foreground / background."""
    intersection: dict[int, int] = field(default_factory=dict)
    union: dict[int, int] = field(default_factory=dict)
    binary_intersection: list[int] = field(default_factory=lambda: [0, 0])
    binary_union: list[int] = field(default_factory=lambda: [0, 0])

    def update(self, pred: np.ndarray, gt: np.ndarray, classes: Sequence[int]) -> "IoUAccumulator":
        """Add one prediction; episode label j counts toward ``classes[j - 1]``."""
        _check_shapes(pred, gt)
        pred, gt = np.asarray(pred), np.asarray(gt)
        for slot, class_id in enumerate(classes, start=1):
            a, b = pred == slot, gt == slot
            self.intersection[class_id] = self.intersection.get(class_id, 0) + int((a & b).sum())
            self.union[class_id] = self.union.get(class_id, 0) + int((a | b).sum())
        for index, (a, b) in enumerate(((pred == 0, gt == 0), (pred > 0, gt > 0))):
            self.binary_intersection[index] += int((a & b).sum())
            self.binary_union[index] += int((a | b).sum())
        return self

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        for class_id in other.union:
            self.intersection[class_id] = self.intersection.get(class_id, 0) + other.intersection[class_id]
            self.union[class_id] = self.union.get(class_id, 0) + other.union[class_id]
        for index in range(2):
            self.binary_intersection[index] += other.binary_intersection[index]
            self.binary_union[index] += other.binary_union[index]
        return self

    def per_class(self) -> dict[int, float]:
        return {c: self.intersection[c] / self.union[c] for c in sorted(self.union) if self.union[c] > 0}

    def mean_iou(self) -> float:
        values = list(self.per_class().values())
        return float(np.mean(values)) if values else 0.0

    def binary_iou(self) -> float:
        parts = [i / u if u else 1.0 for i, u in zip(self.binary_intersection, self.binary_union)]
        return float(np.mean(parts))


@dataclass
class EvalReport:
    per_class: dict[int, float]
    mean_iou: float
    binary_iou: float
    episodes: int
    seeds: list[int]
    run_mean_iou: list[float] = field(default_factory=list)
    proto_align_distance: float | None = None
    annotation: str = "dense"
    way: int = 1
    shot: int = 1
    label: str = "model"

    def as_dict(self) -> dict[str, str]:
        flat = {
            "label": self.label,
            "annotation": self.annotation,
            "way": str(self.way),
            "shot": str(self.shot),
            "episodes": str(self.episodes),
            "runs": str(len(self.seeds)),
            "seeds": " ".join(str(s) for s in self.seeds),
            "mean_iou": f"{self.mean_iou:.6f}",
            "binary_iou": f"{self.binary_iou:.6f}",
        }
        for r, value in enumerate(self.run_mean_iou):
            flat[f"run{r}.mean_iou"] = f"{value:.6f}"
        for class_id, value in self.per_class.items():
            flat[f"class{class_id}.iou"] = f"{value:.6f}"
        if self.proto_align_distance is not None:
            flat["proto_align_distance"] = f"{self.proto_align_distance:.6f}"
        return flat


# Segmentors ------------------------------------------------------------------------

@dataclass(frozen=True)
class SupportView:
    """What a segmentor may see of an episode's support set."""
    classes: tuple[int, ...]
    images: tuple[tuple[np.ndarray, ...], ...]
    annotations: tuple[tuple[WeakAnnotation, ...], ...]

    @property
    def way(self) -> int:
        return len(self.classes)


class Segmentor(Protocol):
    def __call__(self, support: SupportView, query_images: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Predicted episode-label masks at image resolution, one per query image."""
        ...


class PrototypeSegmentor:
    """Masked average pooling + nearest-prototype classification with fixed encoder weights."""

    def __init__(self, params: EncoderParams, metric: MetricConfig = MetricConfig()):
        self.params = params
        self.metric = metric

    def __call__(self, support: SupportView, query_images: Sequence[np.ndarray]) -> list[np.ndarray]:
        features, weak = [], []
        for slot_images, slot_annotations in zip(support.images, support.annotations):
            for image, annotation in zip(slot_images, slot_annotations):
                features.append(encoder.forward(self.params, image))
                weak.append(annotation)
        protos = pool_with_weak(features, weak, support.way)
        masks = []
        for image in query_images:
            probs = probability_map(encoder.forward(self.params, image), protos, self.metric)
            masks.append(upsample_mask(predict_mask(probs), image.shape[1:]))
        return masks


class BackgroundSegmentor:
    """Predicts background everywhere."""

    def __call__(self, support: SupportView, query_images: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [np.zeros(image.shape[1:], dtype=np.uint8) for image in query_images]


class OracleSegmentor:
    """Returns stored ground truth for query images it was built with."""

    def __init__(self, lookup: Mapping[bytes, np.ndarray]):
        self.lookup = dict(lookup)

    @classmethod
    def from_episodes(cls, episodes: Iterable[Episode]) -> "OracleSegmentor":
        return cls({q.image.tobytes(): q.mask for ep in episodes for q in ep.query})

    def __call__(self, support: SupportView, query_images: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [self.lookup[image.tobytes()].copy() for image in query_images]


# Evaluation loop -------------------------------------------------------------------

def eval_workers() -> int:
    """Worker count from PROTOSEG_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"Ignoring non-integer {THREADS_ENV}={raw!r}")
        return 1


def support_view(episode: Episode, annotation: AnnotationConfig = AnnotationConfig()) -> SupportView:
    """Strip an episode to its support side, converting masks to the requested annotation kind."""
    shot = episode.shot
    annotations = tuple(
        tuple(derive_weak(annotation.kind, pair.mask,
                          episode_seed(episode.seed, (c - 1) * shot + k, ANNOTATION_STREAM), annotation)
              for k, pair in enumerate(slot))
        for c, slot in enumerate(episode.support, start=1)
    )
    images = tuple(tuple(pair.image for pair in slot) for slot in episode.support)
    return SupportView(episode.classes, images, annotations)


def run_episodes(classes: Iterable[int], cfg: EvalConfig, run_seed: int,
                 dataset: ShapeDatasetConfig = ShapeDatasetConfig(), grid: int = 1) -> Iterator[Episode]:
    """The episode stream of one evaluation run."""
    pool = tuple(classes)
    for e in range(cfg.episodes):
        yield sample_episode(pool, cfg.way, cfg.shot, cfg.n_query, episode_seed(run_seed, e), dataset,
                             support_instances=cfg.support_instances, grid=grid)


def score_episode(segmentor: Segmentor, episode: Episode,
                  annotation: AnnotationConfig = AnnotationConfig()) -> IoUAccumulator:
    view = support_view(episode, annotation)
    predictions = segmentor(view, [q.image for q in episode.query])
    acc = IoUAccumulator()
    for pred, query in zip(predictions, episode.query):
        acc.update(pred, query.mask, episode.classes)
    return acc


def evaluate_segmentor(segmentor: Segmentor, classes: Iterable[int], cfg: EvalConfig = EvalConfig(),
                       dataset: ShapeDatasetConfig = ShapeDatasetConfig(),
                       annotation: AnnotationConfig = AnnotationConfig(),
                       workers: int | None = None, label: str = "model", grid: int = 1) -> EvalReport:
    """Score a segmentor over ``cfg.runs`` runs of ``cfg.episodes`` episodes.

    Run r uses seed ``cfg.seed + r``; its episode e uses
    ``episode_seed(cfg.seed + r, e)``, so reports for different segmentors
    or annotation kinds are paired episode by episode. ``grid`` is the
    feature stride support shapes must stay visible at.
    """
    cfg.validate()
    annotation.validate()
    classes = tuple(classes)
    workers = workers or eval_workers()
    seeds = [cfg.seed + r for r in range(cfg.runs)]
    per_run = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for run_seed in seeds:
            acc = IoUAccumulator()
            episodes = run_episodes(classes, cfg, run_seed, dataset, grid)
            for part in pool.map(lambda ep: score_episode(segmentor, ep, annotation), episodes):
                acc.merge(part)
            per_run.append(acc)
            logger.info(f"[{label}] run seed {run_seed}: mean IoU {acc.mean_iou():.4f}, "
                        f"binary IoU {acc.binary_iou():.4f}")

    per_class_runs: dict[int, list[float]] = {}
    for acc in per_run:
        for class_id, value in acc.per_class().items():
            per_class_runs.setdefault(class_id, []).append(value)
    per_class = {c: float(np.mean(v)) for c, v in sorted(per_class_runs.items())}
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(per_class=per_class, mean_iou=mean,
                      binary_iou=float(np.mean([a.binary_iou() for a in per_run])),
                      episodes=cfg.episodes, seeds=seeds,
                      run_mean_iou=[a.mean_iou() for a in per_run],
                      annotation=annotation.kind, way=cfg.way, shot=cfg.shot, label=label)


def evaluate(checkpoint: Checkpoint | EncoderParams, classes: Iterable[int], cfg: EvalConfig = EvalConfig(),
             dataset: ShapeDatasetConfig = ShapeDatasetConfig(),
             annotation: AnnotationConfig = AnnotationConfig(),
             metric: MetricConfig = MetricConfig(), workers: int | None = None,
             label: str = "model") -> EvalReport:
    """Evaluate encoder weights on episodes drawn from ``classes``.

    Args:
        checkpoint: Trained checkpoint or raw encoder parameters
        classes: Class ids to sample from, normally the unseen split part
        cfg: Episode counts, runs, seeds and C/K
        dataset: Shape dataset configuration
        annotation: Support annotation kind and its parameters
        metric: Distance and alpha of the metric head
        workers: Thread count, default from PROTOSEG_THREADS
        label: Name used in logs and reports

    Returns:
        EvalReport, with the alignment probe filled in when
        ``cfg.probe_alignment`` is set

    Raises:
        ShapeError: If the dataset image size does not fit the encoder
    """
    params = checkpoint.encoder_params() if isinstance(checkpoint, Checkpoint) else checkpoint
    ds = params.config.downsample_factor
    if dataset.image_size % ds:
        raise ShapeError(f"Image size {dataset.image_size} is not divisible by checkpoint downsample factor {ds}")
    classes = tuple(classes)
    report = evaluate_segmentor(PrototypeSegmentor(params, metric), classes, cfg, dataset, annotation,
                                workers, label, grid=ds)
    if cfg.probe_alignment and cfg.probe_episodes:
        probe = probe_episodes(classes, cfg.way, cfg.shot, cfg.probe_episodes, cfg.seed, dataset, ds)
        report.proto_align_distance = proto_alignment_distance(params, probe)
    return report


# Alignment probe -------------------------------------------------------------------

def probe_episodes(classes: Iterable[int], way: int, shot: int, count: int, seed: int,
                   dataset: ShapeDatasetConfig = ShapeDatasetConfig(), grid: int = 1) -> Iterator[Episode]:
    """Episodes with C * K balanced queries so query pooling mirrors the support side."""
    pool = tuple(classes)
    for e in range(count):
        yield sample_episode(pool, way, shot, way * shot, episode_seed(seed, e, PROBE_STREAM), dataset,
                             balanced_query=True, grid=grid)


def alignment_distances(support, query) -> list[float]:
    """|p_c(support) - p_c(query)| for every class with both prototypes valid."""
    distances = []
    for label in range(1, support.way + 1):
        if support.valid[label] and query.valid[label]:
            diff = support.prototype(label).data - query.prototype(label).data
            distances.append(float(np.sqrt(diff @ diff)))
    return distances


def proto_alignment_distance(params: EncoderParams | Checkpoint, episodes: Iterable[Episode]) -> float:
    """Mean Euclidean distance between support and query prototypes of each class.

    Query prototypes are pooled under the query ground-truth masks. Returns
    NaN when no episode yields a valid pair.
    """
    if isinstance(params, Checkpoint):
        params = params.encoder_params()
    ds = params.config.downsample_factor
    distances: list[float] = []
    for ep in episodes:
        pairs = ep.support_pairs()
        support = compute_prototypes([encoder.forward(params, p.image) for p in pairs],
                                     [downsample_mask(p.mask, ds) for p in pairs], ep.way)
        query = compute_prototypes([encoder.forward(params, q.image) for q in ep.query],
                                   [downsample_mask(q.mask, ds) for q in ep.query], ep.way)
        distances.extend(alignment_distances(support, query))
    if not distances:
        logger.warning("Alignment probe found no class with both prototypes valid")
        return math.nan
    return float(np.mean(distances))


# Reports ---------------------------------------------------------------------------

def format_report(report: EvalReport) -> str:
    lines = [
        f"{report.label}: {report.way}-way {report.shot}-shot, {report.annotation} support annotations",
        f"  runs: {len(report.seeds)} x {report.episodes} episodes (seeds {report.seeds})",
        f"  mean IoU:   {report.mean_iou:.4f}",
        f"  binary IoU: {report.binary_iou:.4f}",
    ]
    if report.run_mean_iou:
        lines.append("  per run:    " + " ".join(f"{v:.4f}" for v in report.run_mean_iou))
    for class_id, value in report.per_class.items():
        lines.append(f"  class {class_id:>2}: {value:.4f}")
    if report.proto_align_distance is not None:
        lines.append(f"  prototype alignment distance: {report.proto_align_distance:.4f}")
    return "\n".join(lines)


def write_report(report: EvalReport, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    """Write ``<stem>.txt`` (human readable) and ``<stem>.kv`` (flat key=value)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text_path, kv_path = out / f"{stem}.txt", out / f"{stem}.kv"
    text_path.write_text(format_report(report) + "\n", encoding="utf-8")
    kv_path.write_text("".join(f"{k}={v}\n" for k, v in report.as_dict().items()), encoding="utf-8")
    return text_path, kv_path


def read_report_kv(path: str | Path) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            entries[key] = value
    return entries
