"""Lossless JSON encoding for (mostly sparse) embedding vectors."""

from __future__ import annotations

import numpy as np


def encode_vector(vec: np.ndarray) -> dict:
    idx = np.flatnonzero(vec)
    return {"dim": int(vec.shape[0]), "idx": idx.tolist(), "val": vec[idx].tolist()}


def decode_vector(data: dict) -> np.ndarray:
    vec = np.zeros(int(data["dim"]), dtype=np.float64)
    if data["idx"]:
        vec[np.asarray(data["idx"], dtype=np.int64)] = np.asarray(data["val"], dtype=np.float64)
    vec.setflags(write=False)
    return vec
