"""Input validation shared by the estimator wrapper and the CLI."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import InputError


def check_byte_stream(X, min_len: int = 2) -> np.ndarray:
    """Coerce ``X`` to a 1-D uint8 array.

    Accepts ``bytes``, ``str`` (UTF-8 encoded), a path to a file, or an
    integer array-like with values in [0, 256).
    """
    if isinstance(X, (bytes, bytearray, memoryview)):
        arr = np.frombuffer(bytes(X), dtype=np.uint8)
    elif isinstance(X, os.PathLike):
        path = Path(X)
        if not path.is_file():
            raise InputError(f"{path} is not a file")
        arr = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    elif isinstance(X, str):
        arr = np.frombuffer(X.encode("utf-8"), dtype=np.uint8)
    else:
        raw = np.asarray(X)
        if raw.ndim != 1:
            raise InputError(f"byte stream must be 1-D, got shape {raw.shape}")
        if raw.size and not np.issubdtype(raw.dtype, np.integer):
            raise InputError(f"byte stream must hold integers, got {raw.dtype}")
        if raw.size and (raw.min() < 0 or raw.max() > 255):
            raise InputError("byte values must lie in [0, 256)")
        arr = raw.astype(np.uint8)
    if arr.size < min_len:
        raise InputError(f"need at least {min_len} bytes, got {arr.size}")
    return arr


def check_contexts(X, vocab: int, ctx: int) -> np.ndarray:
    """Coerce token contexts to an int64 array of shape (n, t) with 1 <= t <= ctx."""
    if isinstance(X, (bytes, bytearray, str)):
        X = check_byte_stream(X, min_len=1)
    arr = np.asarray(X)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InputError(f"contexts must have shape (n_samples, length), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InputError(f"token ids must be integers, got {arr.dtype}")
    if arr.shape[1] > ctx:
        raise InputError(f"context length {arr.shape[1]} exceeds model ctx {ctx}")
    if arr.min() < 0 or arr.max() >= vocab:
        raise InputError(f"token ids must lie in [0, {vocab})")
    return arr.astype(np.int64)
