"""Utility functions for the project."""

import dataclasses
import enum
import hashlib
import importlib.metadata
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)


UINT64_MASK = (1 << 64) - 1
UINT32_MASK = (1 << 32) - 1


def splitmix64(value: int) -> int:
    """One round of the SplitMix64 mixing function.

    Args:
        value:
            An unsigned 64-bit integer. Larger integers are truncated.

    Returns:
        The mixed unsigned 64-bit integer.
    """
    z = (value + 0x9E3779B97F4A7C15) & UINT64_MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & UINT64_MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & UINT64_MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Derive an independent child seed from a parent seed and an index.

    Args:
        seed:
            The parent seed.
        index:
            The index of the child, e.g. a patient index.

    Returns:
        The child seed, an unsigned 64-bit integer.
    """
    return splitmix64((seed & UINT64_MASK) ^ splitmix64(index & UINT64_MASK))


def derive_random_state(seed: int, index: int) -> int:
    """Derive a child seed small enough for the `random_state` of scikit-learn.

    Args:
        seed:
            The parent seed.
        index:
            The index of the child.

    Returns:
        The child seed, an unsigned 32-bit integer.

    Examples:
        >>> 0 <= derive_random_state(42, 3) < 2**32
        True
    """
    return derive_seed(seed, index) & UINT32_MASK


def to_jsonable(obj: Any) -> Any:
    """Convert dataclasses, enums, paths and numpy values into plain JSON types.

    Dataclass fields whose metadata sets `serialise` to False are left out.

    Args:
        obj:
            The object to convert.

    Returns:
        An object consisting only of dicts, lists, strings, numbers, booleans and None.
    """
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {
            field.name: to_jsonable(getattr(obj, field.name))
            for field in dataclasses.fields(obj)
            if field.metadata.get("serialise", True)
        }
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, dict):
        return {str(key): to_jsonable(val) for key, val in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(val) for val in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def canonical_json(obj: Any) -> str:
    """Serialise an object as canonical JSON, with sorted keys and no whitespace.

    Args:
        obj:
            The object to serialise.

    Returns:
        The canonical JSON string.
    """
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    """The hexadecimal SHA-256 digest of some bytes."""
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    """The hexadecimal SHA-256 digest of a file.

    Args:
        path:
            Path to the file.

    Returns:
        The digest.
    """
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(path: str | Path, obj: Any) -> None:
    """Write an object as indented UTF-8 JSON, creating parent directories.

    Args:
        path:
            Destination path.
        obj:
            The object to write.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(to_jsonable(obj), f, indent=2)
        f.write("\n")


def get_package_version() -> str:
    """The installed version of the package, or "unknown" if it is not installed."""
    try:
        return importlib.metadata.version("focuskit")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"
