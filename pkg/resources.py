"""MCP resources for protoseg."""
import logging

from mcp.server.fastmcp import FastMCP

from checkpoint import describe_checkpoint
from config_manager import RunConfig, get_config_manager, to_ini
from episodes import make_split
from shapes import SHAPE_FAMILIES

logger = logging.getLogger(__name__)


def defaults_text() -> str:
    """Default configuration as INI text."""
    return to_ini(RunConfig())


def shapes_text(num_classes: int = len(SHAPE_FAMILIES)) -> str:
    """Shape families with their class ids and the seen / unseen membership of the configured split."""
    try:
        run_config = get_config_manager().build({})
        split = run_config.class_split()
        num_classes = run_config.dataset.num_classes
    except (ValueError, OSError) as e:
        logger.warning(f"Falling back to the default split: {e}")
        split = make_split(num_classes, 1.0 / 3.0, 0)
    lines = ["Shape classes:"]
    for class_id, family in enumerate(SHAPE_FAMILIES[:num_classes]):
        part = "unseen" if class_id in split.unseen else "seen"
        lines.append(f"  {class_id:>2} {family.name:<15} max rotation {family.max_rotation:>4.0f} deg  [{part}]")
    return "\n".join(lines)


def checkpoint_text(path: str) -> str:
    try:
        info = describe_checkpoint(path)
    except (ValueError, OSError) as e:
        return f"Error: {str(e)}"
    lines = [f"Checkpoint {info['path']}:"]
    for key, value in info.items():
        if key != "path":
            lines.append(f"  {key} = {value}")
    return "\n".join(lines)


def register_resources(mcp: FastMCP) -> None:
    """Register MCP resources with the server."""

    @mcp.resource("protoseg://config/defaults")
    async def get_default_config() -> str:
        """Default protoseg configuration in INI form."""
        return defaults_text()

    @mcp.resource("protoseg://shapes")
    async def get_shapes() -> str:
        """List the synthetic shape classes."""
        return shapes_text()

    @mcp.resource("protoseg://checkpoint/{path}")
    async def get_checkpoint(path: str) -> str:
        """Summarise a checkpoint file.

        Args:
            path: Checkpoint file path
        """
        return checkpoint_text(path)
