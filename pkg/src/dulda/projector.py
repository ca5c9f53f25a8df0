"""Parallel-beam strip-integral system model for 2D PET.

The system matrix ``A`` maps a square image (row-major, row 0 at the top) to a
sinogram of shape ``(n_angles, n_bins)``.  Views are uniformly spaced over
``[0, pi)``; radial bins are centred on the rotation axis.  Entry
``A[i, j]`` is the area of overlap between detector strip ``i`` and pixel
``j`` divided by the bin width.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from dulda import kernels


@dataclass(frozen=True)
class GridSpec:
    n_pixels_per_side: int = 64
    pixel_size: float = 1.0

    def __post_init__(self):
        if int(self.n_pixels_per_side) != self.n_pixels_per_side or self.n_pixels_per_side < 8:
            raise ValueError("n_pixels_per_side must be an integer >= 8")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")

    @property
    def shape(self):
        return (self.n_pixels_per_side, self.n_pixels_per_side)

    @property
    def n_pixels(self):
        return self.n_pixels_per_side ** 2

    @property
    def fov_radius(self):
        return 0.5 * self.n_pixels_per_side * self.pixel_size


@dataclass(frozen=True)
class SinogramSpec:
    n_angles: int = 90
    n_bins: int = 96
    bin_width: float = 1.0

    def __post_init__(self):
        if int(self.n_angles) != self.n_angles or self.n_angles < 2:
            raise ValueError("n_angles must be an integer >= 2")
        if int(self.n_bins) != self.n_bins or self.n_bins < 1:
            raise ValueError("n_bins must be a positive integer")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")

    @property
    def shape(self):
        return (self.n_angles, self.n_bins)

    @property
    def angles(self):
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    def bin_edges(self):
        return (np.arange(self.n_bins + 1) - 0.5 * self.n_bins) * self.bin_width


def fov_mask(grid):
    """Boolean mask of pixels whose centre lies in the inscribed circle."""
    n = grid.n_pixels_per_side
    coords = (np.arange(n) - 0.5 * (n - 1)) * grid.pixel_size
    rr = coords[:, None] ** 2 + coords[None, :] ** 2
    return rr <= grid.fov_radius ** 2


@dataclass(frozen=True, eq=False)
class SystemModel:
    matrix: sp.csr_matrix
    sensitivity: np.ndarray
    grid: GridSpec
    sino: SinogramSpec

    @property
    def mask(self):
        return self.sensitivity > 0

    @property
    def image_shape(self):
        return self.grid.shape

    @property
    def sino_shape(self):
        return self.sino.shape


def check_geometry(grid, sino):
    if sino.n_bins < grid.n_pixels_per_side:
        raise ValueError("n_bins must be at least n_pixels_per_side")
    if sino.n_bins * sino.bin_width < 2.0 * grid.fov_radius:
        raise ValueError(
            f"field of view (diameter {2 * grid.fov_radius:g}) does not fit the "
            f"sinogram radial extent ({sino.n_bins * sino.bin_width:g})")


def build_system_model(grid=None, sino=None):
    """Build the strip-integral system model for the given geometry."""
    grid = grid or GridSpec()
    sino = sino or SinogramSpec()
    check_geometry(grid, sino)
    mask = fov_mask(grid)
    rows, cols, vals = kernels.strip_triplets(
        grid.n_pixels_per_side, float(grid.pixel_size), sino.angles,
        sino.n_bins, float(sino.bin_width), mask)
    shape = (sino.n_angles * sino.n_bins, grid.n_pixels)
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=shape)
    matrix.sum_duplicates()
    matrix.sort_indices()
    return _assemble(matrix, grid, sino)


def _assemble(matrix, grid, sino):
    sens = np.asarray(matrix.sum(axis=0)).reshape(grid.shape)
    return SystemModel(matrix=matrix, sensitivity=sens, grid=grid, sino=sino)


def _check(arr, shape, what):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ValueError(f"{what} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def forward(model, x, b=None):
    """Expected counts ``A x + b`` as a sinogram."""
    x = _check(x, model.image_shape, "image")
    out = (model.matrix @ x.ravel()).reshape(model.sino_shape)
    if b is not None:
        out = out + _check(b, model.sino_shape, "randoms")
    return out


def backproject(model, s):
    """Adjoint application ``A^T s`` as an image."""
    s = _check(s, model.sino_shape, "sinogram")
    return (model.matrix.T @ s.ravel()).reshape(model.image_shape)


def rotate_image(x, quarter_turns=1):
    """Rotate an image counter-clockwise by multiples of 90 degrees (exact)."""
    return np.rot90(x, quarter_turns, axes=(-2, -1))


def rotate_sinogram(s, quarter_turns=1):
    """Sinogram of the image rotated by ``quarter_turns`` * 90 degrees.

    Requires an even number of views.  Views that wrap past pi come back with
    the radial axis mirrored.
    """
    s = np.asarray(s)
    n_angles = s.shape[0]
    if n_angles % 2:
        raise ValueError("exact sinogram rotation needs an even number of views")
    half = n_angles // 2
    for _ in range(quarter_turns % 4):
        s = np.concatenate([s[half:, ::-1], s[:half]], axis=0)
    return s


def save_system_model(model, path):
    """Write ``<path>.json`` header and ``<path>.bin`` CSR payload."""
    path = Path(path)
    m = model.matrix
    payload = (np.asarray(m.indptr, dtype="<u8").tobytes()
               + np.asarray(m.indices, dtype="<u4").tobytes()
               + np.asarray(m.data, dtype="<f8").tobytes())
    header = {
        "grid": asdict(model.grid),
        "sino": asdict(model.sino),
        "shape": list(m.shape),
        "nnz": int(m.nnz),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "layout": ["row_offsets:u64", "col_indices:u32", "values:f64"],
    }
    path.with_suffix(".bin").write_bytes(payload)
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return path.with_suffix(".json")


def load_system_model(path):
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    payload = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    n_rows, n_cols = header["shape"]
    nnz = header["nnz"]
    o1 = 8 * (n_rows + 1)
    o2 = o1 + 4 * nnz
    indptr = np.frombuffer(payload[:o1], dtype="<u8").astype(np.int64)
    indices = np.frombuffer(payload[o1:o2], dtype="<u4").astype(np.int32)
    data = np.frombuffer(payload[o2:], dtype="<f8").copy()
    matrix = sp.csr_matrix((data, indices, indptr), shape=(n_rows, n_cols))
    return _assemble(matrix, GridSpec(**header["grid"]), SinogramSpec(**header["sino"]))


def cached_system_model(grid, sino, cache_dir=None):
    """Build a model, reusing an on-disk copy in ``cache_dir`` when present."""
    if cache_dir is None:
        return build_system_model(grid, sino)
    key = (f"A_n{grid.n_pixels_per_side}_p{grid.pixel_size:g}_a{sino.n_angles}"
           f"_b{sino.n_bins}_w{sino.bin_width:g}")
    path = Path(cache_dir) / key
    if path.with_suffix(".json").exists():
        try:
            return load_system_model(path)
        except (ValueError, OSError, KeyError):
            pass
    model = build_system_model(grid, sino)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    save_system_model(model, path)
    return model
