"""Matched training runs with and without prototype alignment regularization."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from config_manager import RunConfig, echo_config
from evaluation import evaluate, probe_episodes, proto_alignment_distance
from trainer import smoothed, train
from validation import validate_positive

logger = logging.getLogger(__name__)

ABLATION_CSV = "ablation.csv"
SMOOTHING_WINDOW = 200
COLUMNS = ("pair", "seed", "arm", "lambda_par", "mean_iou", "binary_iou", "align_distance", "final_seg_smoothed")


@dataclass(frozen=True)
class ArmResult:
    pair: int
    seed: int
    arm: str
    lambda_par: float
    mean_iou: float
    binary_iou: float
    align_distance: float
    final_seg_smoothed: float


@dataclass
class AblationReport:
    results: list[ArmResult] = field(default_factory=list)
    csv_path: Path | None = None

    def arm(self, name: str) -> list[ArmResult]:
        return [r for r in self.results if r.arm == name]

    def _paired(self, attribute: str) -> list[tuple[float, float]]:
        with_par = {r.pair: getattr(r, attribute) for r in self.arm("par")}
        without = {r.pair: getattr(r, attribute) for r in self.arm("no_par")}
        return [(with_par[p], without[p]) for p in sorted(with_par) if p in without]

    def mean_iou_gain(self) -> float:
        """Mean over pairs of mIoU(with PAR) - mIoU(without)."""
        pairs = self._paired("mean_iou")
        return float(np.mean([a - b for a, b in pairs])) if pairs else 0.0

    def alignment_wins(self) -> int:
        """Pairs where the PAR model has the smaller prototype alignment distance."""
        return sum(a < b for a, b in self._paired("align_distance"))

    def convergence_wins(self) -> int:
        """Pairs where the PAR model ends with the lower smoothed L_seg."""
        return sum(a <= b for a, b in self._paired("final_seg_smoothed"))

    def summary(self) -> str:
        pairs = len(self._paired("mean_iou"))
        lines = [f"{'arm':<8} {'pair':>4} {'seed':>6} {'mIoU':>8} {'bIoU':>8} {'align':>9} {'seg@end':>9}"]
        for r in self.results:
            lines.append(f"{r.arm:<8} {r.pair:>4} {r.seed:>6} {r.mean_iou:>8.4f} {r.binary_iou:>8.4f} "
                         f"{r.align_distance:>9.4f} {r.final_seg_smoothed:>9.4f}")
        for arm in ("par", "no_par"):
            rows = self.arm(arm)
            if rows:
                lines.append(f"{arm:<8} mean mIoU {np.mean([r.mean_iou for r in rows]):.4f}  "
                             f"mean align {np.mean([r.align_distance for r in rows]):.4f}")
        lines.append(f"mIoU gain with PAR: {self.mean_iou_gain():+.4f}; "
                     f"alignment wins {self.alignment_wins()}/{pairs}; "
                     f"convergence wins {self.convergence_wins()}/{pairs}")
        return "\n".join(lines)


def write_ablation_csv(report: AblationReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in report.results:
            writer.writerow([getattr(r, c) for c in COLUMNS])
    return path


def run_par_ablation(run_config: RunConfig, pairs: int = 3, out_dir: str | Path | None = None) -> AblationReport:
    """Train matched lambda > 0 / lambda = 0 models and compare them.

    Pair p trains both arms with seed ``train.seed + p``, evaluates them on
    identical unseen-class episodes and probes prototype alignment on
    identical probe episodes. The PAR arm uses ``train.lambda_par`` (1.0 if
    that is 0).

    Args:
        run_config: Resolved configuration
        pairs: Number of matched seed pairs
        out_dir: If set, each arm trains into ``pair<p>/<arm>`` and the
            comparison is written to ``ablation.csv``

    Returns:
        AblationReport with one row per trained model
    """
    validate_positive("pairs", pairs)
    run_config.validate()
    split = run_config.class_split()
    eval_classes = split.part(run_config.eval.split_part)
    lambda_par = run_config.train.lambda_par or 1.0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        echo_config(run_config, out)

    report = AblationReport()
    for p in range(pairs):
        seed = run_config.train.seed + p
        for arm, lam in (("par", lambda_par), ("no_par", 0.0)):
            cfg = dataclasses.replace(run_config.train, seed=seed, lambda_par=lam)
            arm_dir = out / f"pair{p}" / arm if out is not None else None
            logger.info(f"Ablation pair {p} ({arm}): training with seed {seed}, lambda_par={lam}")
            result = train(cfg, split, run_config.dataset, run_config.encoder, arm_dir, run_config.split)
            params = result.checkpoint.encoder_params()
            ev = evaluate(params, eval_classes, run_config.eval, run_config.dataset,
                          run_config.annotations, cfg.metric(), label=f"pair{p}-{arm}")
            probes = probe_episodes(eval_classes, run_config.eval.way, run_config.eval.shot,
                                    run_config.eval.probe_episodes or 200, run_config.eval.seed,
                                    run_config.dataset, params.config.downsample_factor)
            align = proto_alignment_distance(params, probes)
            seg = smoothed(result.loss_seg, SMOOTHING_WINDOW)
            final_seg = float(seg[-1]) if seg.size else float("nan")
            report.results.append(ArmResult(p, seed, arm, lam, ev.mean_iou, ev.binary_iou, align, final_seg))

    if out is not None:
        report.csv_path = write_ablation_csv(report, out / ABLATION_CSV)
    return report
