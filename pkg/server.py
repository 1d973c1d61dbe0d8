"""MCP server exposing protoseg dataset generation, training and evaluation."""
import asyncio
import logging
import sys
from typing import Optional

from mcp.server.fastmcp import FastMCP

# Configure logging to stderr (CRITICAL: never use stdout for STDIO servers)
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    stream=sys.stderr  # Explicitly use stderr
)

logger = logging.getLogger(__name__)

# Initialize FastMCP server
mcp = FastMCP("protoseg-mcp")

from cli import cmd_ablate, cmd_demo, cmd_eval, cmd_gen_data, cmd_train
from config_manager import RunConfig, get_config_manager
from evaluation import format_report
from resources import register_resources
from validation import NumericalError, validate_annotation_kind, validate_split_part


def _build_config(overrides: dict) -> RunConfig:
    return get_config_manager().build(overrides)


async def _guarded(label: str, fn, *args) -> str:
    """Run a blocking command in a worker thread and turn failures into error strings."""
    try:
        return await asyncio.to_thread(fn, *args)
    except NumericalError as e:
        return f"Error: numerical failure during {label}: {e}"
    except (ValueError, OSError) as e:
        return f"Error: {str(e)}"
    except Exception as e:
        logger.error(f"Unexpected error in {label}: {e}", exc_info=True)
        return f"Error: {str(e)}"


@mcp.tool()
async def generate_episodes(
    out_dir: str,
    episodes: int = 1,
    split_part: str = "seen",
    way: Optional[int] = None,
    shots: Optional[int] = None,
    seed: Optional[int] = None,
) -> str:
    """
    Write synthetic few-shot episodes as PGM image/mask files.

    Args:
        out_dir: Directory receiving one episode_NNNNN folder per episode plus manifest.txt
        episodes: Number of episodes to write
        split_part: "seen" (training classes) or "unseen" (held-out classes)
        way: Classes per episode (default from config)
        shots: Support images per class (default from config)
        seed: Master seed (default train.seed)

    Returns:
        Summary of what was written, or an error message
    """
    try:
        validate_split_part(split_part)
        run_config = _build_config({"train.way": way, "train.shot": shots})
    except ValueError as e:
        return f"Error: {str(e)}"

    def run():
        dirs = cmd_gen_data(run_config, out_dir, episodes, split_part, seed)
        return f"Wrote {len(dirs)} {split_part} episodes to {out_dir}"

    return await _guarded("generate_episodes", run)


@mcp.tool()
async def train_model(
    out_dir: str,
    iterations: Optional[int] = None,
    lambda_par: Optional[float] = None,
    way: Optional[int] = None,
    shots: Optional[int] = None,
    seed: Optional[int] = None,
    resume: Optional[str] = None,
) -> str:
    """
    Train the encoder episodically on the seen classes.

    Args:
        out_dir: Directory for loss.csv, checkpoints and config.ini
        iterations: Number of training episodes (default from config)
        lambda_par: Weight of the prototype alignment loss; 0 disables it
        way: Classes per episode
        shots: Support images per class
        seed: Master seed
        resume: Optional checkpoint path to continue from

    Returns:
        Progress lines and the final checkpoint location, or an error message
    """
    try:
        run_config = _build_config({"train.iterations": iterations, "train.lambda_par": lambda_par,
                                    "train.way": way, "train.shot": shots, "train.seed": seed})
    except ValueError as e:
        return f"Error: {str(e)}"

    def run():
        lines: list[str] = []
        result = cmd_train(run_config, out_dir, resume=resume, progress=lines.append)
        lines.append(f"Checkpoint at iteration {result.checkpoint.iteration} saved in {out_dir}")
        return "\n".join(lines)

    return await _guarded("train_model", run)


@mcp.tool()
async def evaluate_checkpoint(
    checkpoint: str,
    out_dir: str,
    episodes: Optional[int] = None,
    runs: Optional[int] = None,
    shots: Optional[int] = None,
    annotation: str = "dense",
    probe_alignment: bool = False,
    init_baseline: bool = False,
) -> str:
    """
    Evaluate a checkpoint on unseen-class episodes (mean-IoU and binary-IoU).

    Args:
        checkpoint: Checkpoint file written by train_model
        out_dir: Directory for the text and key=value report files
        episodes: Episodes per run
        runs: Number of runs with consecutive seeds
        shots: Support images per class
        annotation: Support annotation kind: dense, scribble or bbox
        probe_alignment: Also report the support/query prototype distance
        init_baseline: Evaluate the untrained encoder instead of the trained one

    Returns:
        Human-readable report, or an error message
    """
    try:
        validate_annotation_kind(annotation)
        run_config = _build_config({"eval.episodes": episodes, "eval.runs": runs, "eval.shot": shots,
                                    "annotations.kind": annotation,
                                    "eval.probe_alignment": probe_alignment})
    except ValueError as e:
        return f"Error: {str(e)}"

    def run():
        return format_report(cmd_eval(run_config, checkpoint, out_dir, init_baseline))

    return await _guarded("evaluate_checkpoint", run)


@mcp.tool()
async def ablate_par(out_dir: str, pairs: int = 3, iterations: Optional[int] = None) -> str:
    """
    Train matched models with and without prototype alignment and compare them.

    Args:
        out_dir: Directory for both arms of every pair and ablation.csv
        pairs: Number of matched seed pairs
        iterations: Training episodes per model

    Returns:
        Comparison table, or an error message
    """
    try:
        run_config = _build_config({"train.iterations": iterations})
    except ValueError as e:
        return f"Error: {str(e)}"

    def run():
        return cmd_ablate(run_config, out_dir, pairs).summary()

    return await _guarded("ablate_par", run)


@mcp.tool()
async def render_demo(checkpoint: str, episode_dir: str, out_dir: str, annotation: str = "dense") -> str:
    """
    Segment the queries of a stored episode and write predicted masks as PGM files.

    Args:
        checkpoint: Checkpoint file
        episode_dir: Episode directory written by generate_episodes
        out_dir: Directory for query_{i}_pred.pgm and query_{i}_compare.pgm
        annotation: Support annotation kind: dense, scribble or bbox

    Returns:
        Paths of the predicted masks, or an error message
    """
    try:
        run_config = _build_config({"annotations.kind": annotation})
    except ValueError as e:
        return f"Error: {str(e)}"

    def run():
        return "\n".join(str(p) for p in cmd_demo(checkpoint, episode_dir, out_dir, run_config.annotations))

    return await _guarded("render_demo", run)


def main():
    """Initialize and run the MCP server."""
    register_resources(mcp)

    # Run the server with STDIO transport
    mcp.run(transport='stdio')


if __name__ == "__main__":
    main()
