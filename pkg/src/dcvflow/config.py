"""Process-wide numerics configuration: storage precision and parallelism."""

import os

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}

_state = {
    "precision": "f64",
    "num_threads": os.cpu_count() or 1,
    # im2col buffers above this size are processed in chunks along the
    # leading output axis to bound peak memory at full image resolutions.
    "max_cols_bytes": 256 * 1024 * 1024,
}


def set_precision(name: str) -> None:
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_PRECISIONS)}")
    _state["precision"] = name


def precision() -> str:
    return _state["precision"]


def storage_dtype():
    return _PRECISIONS[_state["precision"]]


def set_num_threads(n: int) -> None:
    if n < 1:
        raise ValueError("num_threads must be >= 1")
    _state["num_threads"] = int(n)


def num_threads() -> int:
    return _state["num_threads"]


def max_cols_bytes() -> int:
    return _state["max_cols_bytes"]
