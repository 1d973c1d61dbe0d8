"""protoseg command line: dataset dumps, training, evaluation, demos and the PAR ablation.

Exit codes: 0 success, 2 invalid configuration or input, 3 I/O failure,
4 numerical failure (NaN or Inf during training).
"""
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import typer

import encoder
from ablation import AblationReport, run_par_ablation
from annotations import AnnotationConfig
from checkpoint import load_checkpoint
from config_manager import RunConfig, RunConfigManager, echo_config
from episodes import episode_seed, sample_episode
from evaluation import EvalReport, PrototypeSegmentor, evaluate, format_report, support_view, write_report
from pgm_utils import image_to_pgm, load_episode, read_manifest, write_episode, write_manifest, write_pgm
from trainer import TrainResult, check_checkpoint_classes, configs_from_checkpoint, train
from validation import NumericalError, validate_annotation_kind, validate_output_dir, validate_split_part

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_TRAIN = RunConfig().train
_EVAL = RunConfig().eval

app = typer.Typer(help="Few-shot segmentation with prototype alignment on synthetic shapes.",
                  no_args_is_help=True, add_completion=False)


# Commands as plain functions (shared with the MCP server) ------------------------------

def cmd_gen_data(run_config: RunConfig, out_dir: str | Path, episodes: int = 1,
                 split_part: str = "seen", seed: Optional[int] = None) -> List[Path]:
    """Dump ``episodes`` episodes as PGM directories plus a manifest.

    Episode e uses ``episode_seed(seed, e)``, the same stream ``train`` draws
    from, so training from the dump reproduces training from the generator.
    """
    validate_split_part(split_part)
    seed = run_config.train.seed if seed is None else seed
    out = validate_output_dir(out_dir)
    classes = run_config.class_split().part(split_part)
    cfg = run_config.train
    names = []
    for e in range(episodes):
        episode = sample_episode(classes, cfg.way, cfg.shot, cfg.n_query, episode_seed(seed, e),
                                 run_config.dataset, support_instances=cfg.support_instances,
                                 grid=run_config.encoder.downsample_factor)
        name = f"episode_{e:05d}"
        write_episode(episode, out / name)
        names.append(name)
    write_manifest(out, names, [f"split_part = {split_part}", f"seed = {seed}"])
    echo_config(run_config, out)
    logger.info(f"Wrote {episodes} {split_part} episodes to {out}")
    return [out / n for n in names]


def cmd_train(run_config: RunConfig, out_dir: str | Path, data_dir: Optional[str] = None,
              resume: Optional[str] = None, progress: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train and write ``loss.csv``, checkpoints and ``config.ini`` into out_dir."""
    out = validate_output_dir(out_dir)
    echo_config(run_config, out)
    source = None
    if data_dir is not None:
        dirs = read_manifest(data_dir)
        if not dirs:
            raise FileNotFoundError(f"Manifest in {data_dir} lists no episodes")
        if len(dirs) < run_config.train.iterations:
            logger.warning(f"{len(dirs)} episodes on disk for {run_config.train.iterations} iterations; cycling")
        source = lambda i: load_episode(dirs[i % len(dirs)])  # noqa: E731
    checkpoint = load_checkpoint(resume) if resume else None
    return train(run_config.train, run_config.class_split(), run_config.dataset, run_config.encoder, out,
                 run_config.split, resume=checkpoint, episode_source=source, progress=progress)


def cmd_eval(run_config: RunConfig, checkpoint_path: str, out_dir: str | Path,
             init_baseline: bool = False) -> EvalReport:
    """Evaluate a checkpoint (or its untrained initialisation) and write the report files.

    Raises:
        ConfigError: If the configured class split or image size differs
            from the checkpoint's
    """
    ckpt = load_checkpoint(checkpoint_path)
    check_checkpoint_classes(ckpt, run_config.dataset, run_config.split)
    trained, _, _ = configs_from_checkpoint(ckpt)
    if init_baseline:
        params, label = encoder.init_params(ckpt.encoder, run_config.train.seed), "init"
    else:
        params, label = ckpt.encoder_params(), "model"
    classes = run_config.class_split().part(run_config.eval.split_part)
    report = evaluate(params, classes, run_config.eval, run_config.dataset, run_config.annotations,
                      trained.metric(), label=label)
    out = validate_output_dir(out_dir)
    echo_config(run_config, out)
    stem = f"report_{label}_{run_config.annotations.kind}_{run_config.eval.shot}shot"
    write_report(report, out, stem)
    return report


def _label_to_grey(mask: np.ndarray, way: int) -> np.ndarray:
    return (np.asarray(mask, dtype=np.int64) * (255 // max(way, 1))).astype(np.uint8)


def cmd_demo(checkpoint_path: str, episode_dir: str, out_dir: str | Path,
             annotation: AnnotationConfig = AnnotationConfig()) -> List[Path]:
    """Segment every query of a stored episode.

    Writes ``query_{i}_pred.pgm`` (label ids, image resolution) and
    ``query_{i}_compare.pgm``: image, ground truth and prediction side by side.
    """
    ckpt = load_checkpoint(checkpoint_path)
    trained, _, _ = configs_from_checkpoint(ckpt)
    episode = load_episode(episode_dir)
    segmentor = PrototypeSegmentor(ckpt.encoder_params(), trained.metric())
    predictions = segmentor(support_view(episode, annotation), [q.image for q in episode.query])
    out = validate_output_dir(out_dir)
    written = []
    for i, (pred, query) in enumerate(zip(predictions, episode.query)):
        written.append(write_pgm(out / f"query_{i}_pred.pgm", pred))
        panel = np.concatenate([image_to_pgm(query.image), _label_to_grey(query.mask, episode.way),
                                _label_to_grey(pred, episode.way)], axis=1)
        write_pgm(out / f"query_{i}_compare.pgm", panel)
    logger.info(f"Wrote {len(written)} predicted masks to {out}")
    return written


def cmd_ablate(run_config: RunConfig, out_dir: str | Path, pairs: int = 3) -> AblationReport:
    return run_par_ablation(run_config, pairs, validate_output_dir(out_dir))


# typer surface ----------------------------------------------------------------------

def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )


def _resolve(ctx: typer.Context, overrides: Dict[str, Any]) -> RunConfig:
    return RunConfigManager(ctx.obj.get("config")).build(overrides)


def _run(action: Callable[[], Any]) -> Any:
    try:
        return action()
    except NumericalError as e:
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(EXIT_NUMERIC)
    except ValueError as e:
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(EXIT_CONFIG)
    except OSError as e:
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(EXIT_IO)


@app.callback()
def main(ctx: typer.Context,
         config: Optional[str] = typer.Option(None, "--config", "-c",
                                              help="INI config file (default: $PROTOSEG_CONFIG, then ./protoseg.ini)"),
         verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging on stderr")):
    """Few-shot segmentation with prototype alignment on synthetic shapes."""
    _setup_logging(verbose)
    ctx.obj = {"config": config}


@app.command("gen-data")
def gen_data(ctx: typer.Context,
             out_dir: str = typer.Argument(..., help="Directory receiving episode_NNNNN/ folders"),
             episodes: int = typer.Option(1, "--episodes", "-n", help="Number of episodes"),
             split_part: str = typer.Option("seen", "--split", help="seen or unseen"),
             seed: Optional[int] = typer.Option(None, help=f"Master seed (default train.seed = {_TRAIN.seed})"),
             way: Optional[int] = typer.Option(None, help=f"Classes per episode (default {_TRAIN.way})"),
             shots: Optional[int] = typer.Option(None, help=f"Support images per class (default {_TRAIN.shot})"),
             n_query: Optional[int] = typer.Option(None, help=f"Query images (default {_TRAIN.n_query})")):
    """Write synthetic episodes as PGM files."""
    def action():
        run_config = _resolve(ctx, {"train.way": way, "train.shot": shots, "train.n_query": n_query})
        dirs = cmd_gen_data(run_config, out_dir, episodes, split_part, seed)
        typer.echo(f"wrote {len(dirs)} episodes to {out_dir}")
    _run(action)


@app.command("train")
def train_command(ctx: typer.Context,
                  out_dir: str = typer.Argument(..., help="Directory for loss.csv and checkpoints"),
                  iterations: Optional[int] = typer.Option(None, help=f"Training episodes (default {_TRAIN.iterations})"),
                  lr: Optional[float] = typer.Option(None, help=f"Initial learning rate (default {_TRAIN.lr})"),
                  momentum: Optional[float] = typer.Option(None, help=f"SGD momentum (default {_TRAIN.momentum})"),
                  weight_decay: Optional[float] = typer.Option(None, help=f"Weight decay (default {_TRAIN.weight_decay})"),
                  lambda_par: Optional[float] = typer.Option(None, help=f"PAR weight, 0 disables PAR (default {_TRAIN.lambda_par})"),
                  alpha: Optional[float] = typer.Option(None, help=f"Distance multiplier (default {_TRAIN.alpha})"),
                  distance: Optional[str] = typer.Option(None, help=f"cosine or squared_euclidean (default {_TRAIN.distance})"),
                  way: Optional[int] = typer.Option(None, help=f"Classes per episode (default {_TRAIN.way})"),
                  shots: Optional[int] = typer.Option(None, help=f"Support images per class (default {_TRAIN.shot})"),
                  seed: Optional[int] = typer.Option(None, help=f"Master seed (default {_TRAIN.seed})"),
                  hflip: Optional[bool] = typer.Option(None, "--hflip/--no-hflip",
                                                       help=f"Random horizontal flips (default {_TRAIN.hflip_augment})"),
                  checkpoint_every: Optional[int] = typer.Option(None, help="Periodic checkpoint interval, 0 = off"),
                  data_dir: Optional[str] = typer.Option(None, help="Train from a gen-data dump instead of the generator"),
                  resume: Optional[str] = typer.Option(None, help="Checkpoint to resume from")):
    """Episodic training on the seen classes."""
    def action():
        run_config = _resolve(ctx, {
            "train.iterations": iterations, "train.lr": lr, "train.momentum": momentum,
            "train.weight_decay": weight_decay, "train.lambda_par": lambda_par, "train.alpha": alpha,
            "train.distance": distance, "train.way": way, "train.shot": shots, "train.seed": seed,
            "train.hflip_augment": hflip, "train.checkpoint_every": checkpoint_every,
        })
        result = cmd_train(run_config, out_dir, data_dir, resume, progress=typer.echo)
        typer.echo(f"checkpoint at iteration {result.checkpoint.iteration} written to {out_dir}")
    _run(action)


@app.command("eval")
def eval_command(ctx: typer.Context,
                 checkpoint: str = typer.Argument(..., help="Checkpoint file"),
                 out_dir: str = typer.Argument(..., help="Directory for the report files"),
                 episodes: Optional[int] = typer.Option(None, help=f"Episodes per run (default {_EVAL.episodes})"),
                 runs: Optional[int] = typer.Option(None, help=f"Runs with seeds seed..seed+runs-1 (default {_EVAL.runs})"),
                 seed: Optional[int] = typer.Option(None, help=f"Base evaluation seed (default {_EVAL.seed})"),
                 way: Optional[int] = typer.Option(None, help=f"Classes per episode (default {_EVAL.way})"),
                 shots: Optional[int] = typer.Option(None, help=f"Support images per class (default {_EVAL.shot})"),
                 split_part: Optional[str] = typer.Option(None, "--split", help="seen or unseen (default unseen)"),
                 annotation: Optional[str] = typer.Option(None, help="dense, scribble or bbox (default dense)"),
                 probe_alignment: bool = typer.Option(False, "--probe-alignment", help="Also measure prototype alignment"),
                 init_baseline: bool = typer.Option(False, "--init-baseline", help="Evaluate the untrained encoder")):
    """Mean-IoU and binary-IoU over multi-seed evaluation runs."""
    def action():
        if annotation is not None:
            validate_annotation_kind(annotation)
        run_config = _resolve(ctx, {
            "eval.episodes": episodes, "eval.runs": runs, "eval.seed": seed, "eval.way": way,
            "eval.shot": shots, "eval.split_part": split_part, "annotations.kind": annotation,
            "eval.probe_alignment": True if probe_alignment else None,
        })
        report = cmd_eval(run_config, checkpoint, out_dir, init_baseline)
        typer.echo(format_report(report))
    _run(action)


@app.command("demo")
def demo_command(ctx: typer.Context,
                 checkpoint: str = typer.Argument(..., help="Checkpoint file"),
                 episode_dir: str = typer.Argument(..., help="Episode directory written by gen-data"),
                 out_dir: str = typer.Argument(..., help="Directory for predicted masks"),
                 annotation: Optional[str] = typer.Option(None, help="dense, scribble or bbox (default dense)")):
    """Write predicted query masks next to the ground truth."""
    def action():
        run_config = _resolve(ctx, {"annotations.kind": annotation})
        written = cmd_demo(checkpoint, episode_dir, out_dir, run_config.annotations)
        for path in written:
            typer.echo(str(path))
    _run(action)


@app.command("ablate-par")
def ablate_command(ctx: typer.Context,
                   out_dir: str = typer.Argument(..., help="Directory for both arms and ablation.csv"),
                   pairs: int = typer.Option(3, help="Matched seed pairs"),
                   iterations: Optional[int] = typer.Option(None, help=f"Training episodes (default {_TRAIN.iterations})"),
                   episodes: Optional[int] = typer.Option(None, help=f"Eval episodes per run (default {_EVAL.episodes})"),
                   runs: Optional[int] = typer.Option(None, help=f"Eval runs (default {_EVAL.runs})"),
                   seed: Optional[int] = typer.Option(None, help=f"Seed of the first pair (default {_TRAIN.seed})")):
    """Train matched models with and without PAR and compare them."""
    def action():
        run_config = _resolve(ctx, {"train.iterations": iterations, "eval.episodes": episodes,
                                    "eval.runs": runs, "train.seed": seed})
        report = cmd_ablate(run_config, out_dir, pairs)
        typer.echo(report.summary())
    _run(action)


if __name__ == "__main__":
    app()
