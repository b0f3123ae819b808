"""
Utility functions
"""

import hashlib
import os
import random
from pathlib import Path
from typing import Any, Union

import numpy as np
import orjson
import torch

from constants import DETERMINISTIC_ENV
from logging_config import logger

PathLike = Union[str, Path]

JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY


def dump_json(obj: Any, path: PathLike) -> None:
    """
    Write an object as sorted, indented UTF-8 JSON.

    Sorted keys keep the output byte-stable across runs.

    Args:
        obj: JSON-serializable object (dataclasses and numpy values allowed)
        path: Output file path
    """
    logger.debug(f"Writing JSON to {path}")
    with open(path, "wb") as f:
        f.write(orjson.dumps(obj, option=JSON_OPTIONS))
        f.write(b"\n")


def load_json(path: PathLike) -> Any:
    """
    Read a JSON file.

    Args:
        path: Input file path

    Returns:
        Parsed object

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If the file is not valid JSON
    """
    logger.debug(f"Reading JSON from {path}")
    try:
        with open(path, "rb") as f:
            return orjson.loads(f.read())
    except orjson.JSONDecodeError as e:
        logger.error(f"Invalid JSON in {path}: {e}")
        raise ValueError(f"invalid JSON in {path}: {e}") from e


def stable_hash(obj: Any) -> str:
    """Short sha256 of the canonical JSON form of an object."""
    payload = orjson.dumps(obj, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)
    return hashlib.sha256(payload).hexdigest()[:16]


def file_hash(path: PathLike) -> str:
    """sha256 of a file's bytes."""
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch global generators."""
    logger.debug(f"Seeding all generators with {seed}")
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def deterministic_requested() -> bool:
    """Whether the environment forces deterministic mode."""
    return os.environ.get(DETERMINISTIC_ENV, "0").strip() not in {"", "0", "false"}


def configure_determinism(enabled: bool) -> None:
    """
    Switch torch into (or out of) deterministic mode.

    Args:
        enabled: Whether deterministic algorithms are required
    """
    if enabled:
        # Required by cuBLAS for deterministic matmuls on CUDA
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    torch.use_deterministic_algorithms(enabled, warn_only=False)
    torch.backends.cudnn.benchmark = not enabled
    torch.backends.cudnn.deterministic = enabled
    logger.debug(f"Deterministic mode: {enabled}")


def resolve_device(device: str) -> torch.device:
    """
    Map a config device name to a torch device.

    Args:
        device: "cpu" or "accelerator"

    Returns:
        torch.device to run on

    Raises:
        ValueError: If the device name is unknown
    """
    if device == "cpu":
        return torch.device("cpu")
    if device == "accelerator":
        if torch.cuda.is_available():
            return torch.device("cuda")
        if getattr(torch.backends, "mps", None) and torch.backends.mps.is_available():
            return torch.device("mps")
        logger.warning("Accelerator requested but none is available, using CPU")
        return torch.device("cpu")
    logger.error(f"Unknown device {device!r}")
    raise ValueError(f"device must be 'cpu' or 'accelerator', got {device!r}")
