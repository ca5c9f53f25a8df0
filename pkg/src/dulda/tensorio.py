"""``.tensor`` files: one JSON header line followed by raw little-endian f64."""

import json
from pathlib import Path

import numpy as np


def save_tensor(path, array, role="image", seed=None, **extra):
    array = np.ascontiguousarray(array, dtype="<f8")
    header = {"shape": list(array.shape), "dtype": "f64le", "role": role,
              "seed": seed}
    header.update(extra)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(array.tobytes())
    return path


def load_tensor(path, with_header=False):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("dtype") != "f64le":
        raise ValueError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    array = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if with_header:
        return array, header
    return array
