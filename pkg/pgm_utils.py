"""Binary PGM (P5, maxval 255) I/O and the on-disk episode directory format.

Episode directory layout (indices are 0-based)::

    support_c{c}_k{k}.pgm       support image of slot c, shot k
    support_c{c}_k{k}_mask.pgm  its mask, pixel value = label id
    query_{i}.pgm / query_{i}_mask.pgm
    meta                        key = value lines: classes, seed, way, shot, n_query

Weak annotation masks use 255 for "unknown".
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from episodes import AnnotatedImage, Episode
from validation import EpisodeError, validate_episode_dir, validate_output_dir

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"


def write_pgm(path: str | Path, array: np.ndarray) -> Path:
    """Write a 2-D uint8-representable array as a binary PGM file.

    Raises:
        EpisodeError: If the array is not 2-D or has values outside [0, 255]
        OSError: If the file cannot be written
    """
    array = np.asarray(array)
    if array.ndim != 2:
        raise EpisodeError(f"PGM data must be 2-D, got shape {array.shape}")
    if array.size and (array.min() < 0 or array.max() > 255):
        raise EpisodeError(f"PGM values must be in [0, 255], got [{array.min()}, {array.max()}]")
    path = Path(path)
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format="PPM")
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM file into a [H, W] uint8 array.

    Raises:
        EpisodeError: If the file is not a greyscale PGM
        OSError: If the file cannot be read
    """
    path = Path(path)
    with Image.open(path) as img:
        if img.mode != "L":
            raise EpisodeError(f"Expected an 8-bit greyscale PGM, got mode {img.mode}: {path}")
        return np.array(img, dtype=np.uint8)


def image_to_pgm(image: np.ndarray) -> np.ndarray:
    """[1, H, W] float image in [0, 1] -> [H, W] uint8."""
    return np.rint(np.clip(image[0], 0.0, 1.0) * 255.0).astype(np.uint8)


def pgm_to_image(data: np.ndarray) -> np.ndarray:
    """[H, W] uint8 -> [1, H, W] float image, the inverse of image_to_pgm on 8-bit images."""
    return (data.astype(np.float64) / 255.0)[None, :, :]


def write_episode(episode: Episode, directory: str | Path) -> Path:
    """Dump one episode into a directory; the output is byte-identical for identical episodes."""
    directory = validate_output_dir(directory)
    for c, slot in enumerate(episode.support):
        for k, pair in enumerate(slot):
            write_pgm(directory / f"support_c{c}_k{k}.pgm", image_to_pgm(pair.image))
            write_pgm(directory / f"support_c{c}_k{k}_mask.pgm", pair.mask)
    for i, pair in enumerate(episode.query):
        write_pgm(directory / f"query_{i}.pgm", image_to_pgm(pair.image))
        write_pgm(directory / f"query_{i}_mask.pgm", pair.mask)
    meta = [
        f"classes = {' '.join(str(c) for c in episode.classes)}",
        f"seed = {episode.seed}",
        f"way = {episode.way}",
        f"shot = {episode.shot}",
        f"n_query = {len(episode.query)}",
    ]
    (directory / "meta").write_text("\n".join(meta) + "\n", encoding="utf-8")
    return directory


def read_meta(directory: Path) -> dict[str, str]:
    meta = {}
    for line in (directory / "meta").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise EpisodeError(f"Malformed meta line {line!r} in {directory}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def load_episode(directory: str | Path) -> Episode:
    """Load an episode written by ``write_episode``.

    Raises:
        EpisodeError: If the directory is malformed
        FileNotFoundError: If the directory or one of its files is missing
    """
    directory = validate_episode_dir(directory)
    meta = read_meta(directory)
    try:
        classes = tuple(int(c) for c in meta["classes"].split())
        way, shot, n_query = int(meta["way"]), int(meta["shot"]), int(meta["n_query"])
        seed = int(meta.get("seed", "0"))
    except (KeyError, ValueError) as e:
        raise EpisodeError(f"Malformed meta in {directory}: {e}")
    if len(classes) != way:
        raise EpisodeError(f"meta lists {len(classes)} classes but way = {way} in {directory}")

    def pair(stem: str) -> AnnotatedImage:
        return AnnotatedImage(pgm_to_image(read_pgm(directory / f"{stem}.pgm")),
                              read_pgm(directory / f"{stem}_mask.pgm"))

    support = tuple(tuple(pair(f"support_c{c}_k{k}") for k in range(shot)) for c in range(way))
    query = tuple(pair(f"query_{i}") for i in range(n_query))
    return Episode(classes, support, query, seed).validate()


def write_manifest(root: str | Path, episode_dirs: Iterable[str], lines: Iterable[str] = ()) -> Path:
    root = Path(root)
    names = list(episode_dirs)
    body = [f"episodes = {len(names)}", *lines, *names]
    path = root / MANIFEST_NAME
    path.write_text("\n".join(body) + "\n", encoding="utf-8")
    return path


def read_manifest(root: str | Path) -> list[Path]:
    """Episode directories listed in a manifest, in order."""
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"Manifest not found: {path}")
    entries = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    dirs = [root / e for e in entries if e and "=" not in e]
    header = next((e for e in entries if e.startswith("episodes")), None)
    if header is None or int(header.split("=", 1)[1]) != len(dirs):
        raise EpisodeError(f"Manifest episode count does not match its entries: {path}")
    return dirs
