"""Procedural brain-like phantoms and Poisson scan simulation.

A phantom is a piecewise-constant composite of ellipses: a gray-matter
cortex ring around a white-matter interior, a few deep gray-matter blobs,
and tumor disks of distinct radii placed inside the white matter.
"""

from dataclasses import dataclass, field

import numpy as np

from dulda.projector import forward

OUTSIDE, GRAY, WHITE, TUMOR0 = 0, 1, 2, 3

DEFAULT_ACTIVITY = {"background": 0.0, "gray": 4.0, "white": 1.0, "tumor": 8.0}


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_background_ellipses: int = 3
    n_tumors: int = 2
    tumor_radius_range: tuple = (2.0, 4.5)
    activity_levels: dict = field(default_factory=lambda: dict(DEFAULT_ACTIVITY))

    def __post_init__(self):
        if self.n_tumors < 0 or self.n_background_ellipses < 0:
            raise ValueError("region counts must be nonnegative")
        lo, hi = self.tumor_radius_range
        if not 0 < lo <= hi:
            raise ValueError("tumor_radius_range must satisfy 0 < lo <= hi")
        missing = set(DEFAULT_ACTIVITY) - set(self.activity_levels)
        if missing:
            raise ValueError(f"activity_levels missing {sorted(missing)}")
        if any(v < 0 for v in self.activity_levels.values()):
            raise ValueError("activities must be nonnegative")


@dataclass(frozen=True)
class ScanSpec:
    total_counts: float = 1e6
    randoms_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not self.total_counts > 0:
            raise ValueError("total_counts must be positive")
        if not 0 <= self.randoms_fraction < 1:
            raise ValueError("randoms_fraction must lie in [0, 1)")


@dataclass
class RoiSpec:
    tumor_masks: list
    background_mask: np.ndarray

    def __post_init__(self):
        masks = [np.asarray(m, dtype=bool) for m in self.tumor_masks]
        bkg = np.asarray(self.background_mask, dtype=bool)
        if not masks or not bkg.any() or not all(m.any() for m in masks):
            raise ValueError("ROI masks must be nonempty")
        union = bkg.copy()
        for m in masks:
            if np.any(union & m):
                raise ValueError("ROI masks must be disjoint")
            union |= m
        self.tumor_masks = masks
        self.background_mask = bkg


def _grid_coords(grid):
    """Pixel-centre coordinates normalised so the FOV radius is 1."""
    n = grid.n_pixels_per_side
    c = (np.arange(n) - 0.5 * (n - 1)) / (0.5 * n)
    return c[None, :], -c[:, None]


def _ellipse(xx, yy, cx, cy, ax, ay, phi):
    cs, sn = np.cos(phi), np.sin(phi)
    u = (xx - cx) * cs + (yy - cy) * sn
    v = -(xx - cx) * sn + (yy - cy) * cs
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def phantom_labels(spec, grid):
    """Integer label map: 0 outside, 1 gray, 2 white, 3+ tumors."""
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 7919]))
    xx, yy = _grid_coords(grid)
    labels = np.zeros(grid.shape, dtype=np.int64)

    ax, ay = 0.70 + 0.08 * rng.random(), 0.82 + 0.08 * rng.random()
    phi = rng.uniform(-0.15, 0.15)
    head = _ellipse(xx, yy, 0.0, 0.0, ax, ay, phi)
    thickness = 0.12 + 0.04 * rng.random()
    inner_ax, inner_ay = ax - thickness, ay - thickness
    inner = _ellipse(xx, yy, 0.0, 0.0, inner_ax, inner_ay, phi)
    labels[head] = GRAY
    labels[inner] = WHITE

    for _ in range(spec.n_background_ellipses):
        r = 0.45 * rng.random()
        t = rng.uniform(0, 2 * np.pi)
        blob = _ellipse(xx, yy, r * inner_ax * np.cos(t), r * inner_ay * np.sin(t),
                        rng.uniform(0.06, 0.14), rng.uniform(0.06, 0.14),
                        rng.uniform(0, np.pi))
        labels[blob & inner] = GRAY

    # tumors: distinct radii, fully inside the white-matter ellipse, no overlap
    # radii are given in pixels of a 64-pixel grid and scale with the grid
    scale = 0.5 * grid.n_pixels_per_side
    zoom = grid.n_pixels_per_side / 64.0
    lo, hi = spec.tumor_radius_range
    if spec.n_tumors == 1:
        radii = [0.5 * (lo + hi)]
    else:
        radii = list(np.linspace(hi, lo, spec.n_tumors))
    placed = []
    for i, rad_px in enumerate(radii):
        # at least sqrt(2)/2 pixel so the disk always covers a pixel centre
        rad = max(rad_px * zoom, 0.75) / scale
        for _ in range(1000):
            t = rng.uniform(0, 2 * np.pi)
            rr = np.sqrt(rng.random()) * 0.85
            cx = rr * (inner_ax - rad) * np.cos(t)
            cy = rr * (inner_ay - rad) * np.sin(t)
            if all(np.hypot(cx - px, cy - py) > rad + pr + 3.0 * zoom / scale for px, py, pr in placed):
                break
        else:  # pragma: no cover - default radii always leave room
            raise RuntimeError("could not place tumor")
        placed.append((cx, cy, rad))
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= rad * rad
        labels[disk & inner] = TUMOR0 + i
    return labels


def make_phantom(spec, grid):
    """Nonnegative piecewise-constant activity image."""
    labels = phantom_labels(spec, grid)
    act = spec.activity_levels
    img = np.full(grid.shape, float(act["background"]))
    img[labels == GRAY] = act["gray"]
    img[labels == WHITE] = act["white"]
    img[labels >= TUMOR0] = act["tumor"]
    return img


def phantom_rois(spec, grid, margin=None):
    """Tumor ROIs and a white-matter background ROI kept ``margin`` pixels away.

    The default margin is 2 pixels on a 64-pixel grid, scaled with the grid.
    """
    if margin is None:
        margin = max(1, round(2 * grid.n_pixels_per_side / 64))
    labels = phantom_labels(spec, grid)
    tumors = [labels == TUMOR0 + i for i in range(spec.n_tumors)]
    near = np.zeros(grid.shape, dtype=bool)
    for m in tumors:
        near |= m
    for _ in range(margin):
        grown = near.copy()
        grown[1:, :] |= near[:-1, :]
        grown[:-1, :] |= near[1:, :]
        grown[:, 1:] |= near[:, :-1]
        grown[:, :-1] |= near[:, 1:]
        near = grown
    background = (labels == WHITE) & ~near
    return RoiSpec(tumor_masks=tumors, background_mask=background)


def count_scale(x_true, model, scan):
    """Factor ``c`` with ``sum(A c x_true) = (1 - randoms_fraction) * total_counts``."""
    trues = forward(model, x_true).sum()
    if not trues > 0:
        raise ValueError("phantom projects to zero counts; cannot scale to total_counts")
    return (1.0 - scan.randoms_fraction) * scan.total_counts / trues


def mean_randoms(model, scan):
    n = model.sino.n_angles * model.sino.n_bins
    return np.full(model.sino_shape, scan.randoms_fraction * scan.total_counts / n)


def simulate_scan(x_true, model, scan, return_scale=False):
    """Poisson sinogram ``y`` and mean randoms ``b`` for a phantom.

    The phantom is rescaled so expected trues and randoms add up to
    ``scan.total_counts``.  With ``return_scale`` the scale factor is also
    returned; ``scale * x_true`` is the truth in reconstruction units.
    """
    x_true = np.asarray(x_true, dtype=np.float64)
    if np.any(x_true < 0):
        raise ValueError("phantom must be nonnegative")
    c = count_scale(x_true, model, scan)
    mean = forward(model, c * x_true) + mean_randoms(model, scan)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(scan.seed), 104729])))
    y = rng.poisson(mean).astype(np.float64)
    b = mean_randoms(model, scan)
    if return_scale:
        return y, b, c
    return y, b


@dataclass
class Sample:
    """One simulated slice: truth in reconstruction units, data and ROIs."""

    index: int
    truth: np.ndarray
    y: np.ndarray
    b: np.ndarray
    rois: RoiSpec
    phantom_seed: int
    noise_seed: int


def simulate_sample(index, model, phantom_seed, noise_seed, scan=None, phantom=None):
    scan = scan or ScanSpec()
    base = phantom or PhantomSpec()
    spec = PhantomSpec(seed=phantom_seed, n_background_ellipses=base.n_background_ellipses,
                       n_tumors=base.n_tumors, tumor_radius_range=base.tumor_radius_range,
                       activity_levels=dict(base.activity_levels))
    x = make_phantom(spec, model.grid)
    y, b, c = simulate_scan(x, model, ScanSpec(scan.total_counts, scan.randoms_fraction,
                                               noise_seed), return_scale=True)
    return Sample(index=index, truth=c * x, y=y, b=b, rois=phantom_rois(spec, model.grid),
                  phantom_seed=phantom_seed, noise_seed=noise_seed)


def simulate_dataset(n, model, seed=0, scan=None, phantom=None, realization=0):
    """``n`` independently seeded slices; ``realization`` only changes the noise."""
    out = []
    for i in range(n):
        p_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        n_seed = int(np.random.SeedSequence([seed, i, realization + 1]).generate_state(1)[0])
        out.append(simulate_sample(i, model, p_seed, n_seed, scan, phantom))
    return out
