"""Label-free training of the regularizer and step sizes.

The loss combines a rotation-equivariance term in the image domain with a
data-consistency term in the measurement domain::

    L_dual = L_image + lam * L_measure
    L_image   = || T f(y) - f(A T f(y) + b) ||^2
    L_measure = || (y + xi) - (A f(y + xi) + b) ||^2

where ``f`` is the unrolled reconstruction and ``T`` a rotation.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from dulda import gradcore as gc
from dulda.regularizer import load_params, save_params
from dulda.solvers import LdaConfig, NonFiniteObjective, lda_reconstruct

log = logging.getLogger(__name__)

LOSS_MODES = ("dual", "image", "measure")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 100
    rotation_set: tuple = (90, 180, 270)
    noise: str = "poisson"  # "poisson", "gaussian" or "none"
    noise_std: float = 1.0
    loss_mode: str = "dual"
    stop_gradient_target: bool = False
    allow_interpolated_rotation: bool = False
    seed: int = 0
    max_retries: int = 5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.noise not in ("poisson", "gaussian", "none"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if not self.rotation_set:
            raise ValueError("rotation_set must be nonempty")
        if not self.allow_interpolated_rotation and any(a % 90 for a in self.rotation_set):
            raise ValueError("rotations must be multiples of 90 degrees "
                             "unless allow_interpolated_rotation is set")


@dataclass
class LossReport:
    l_image: float
    l_measure: float
    l_dual: float
    per_sample: list = field(default_factory=list)


# --- rotations --------------------------------------------------------------

def rotation_operator(n, degrees):
    """Sparse bilinear-interpolation matrix rotating an n x n image CCW."""
    theta = np.deg2rad(degrees)
    c = 0.5 * (n - 1)
    rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    x, y = cc - c, c - rr
    # source point = inverse rotation of the output pixel centre
    xs = np.cos(theta) * x + np.sin(theta) * y
    ys = -np.sin(theta) * x + np.cos(theta) * y
    col_f, row_f = xs + c, c - ys
    r0, c0 = np.floor(row_f).astype(int), np.floor(col_f).astype(int)
    fr, fc = row_f - r0, col_f - c0
    rows, cols, vals = [], [], []
    out_idx = (rr * n + cc).ravel()
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        sr, sc = (r0 + dr).ravel(), (c0 + dc).ravel()
        ok = (sr >= 0) & (sr < n) & (sc >= 0) & (sc < n) & (w.ravel() > 1e-14)
        rows.append(out_idx[ok])
        cols.append((sr * n + sc)[ok])
        vals.append(w.ravel()[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n * n, n * n))


def rotate(x, degrees):
    """Rotate a (possibly taped) image; exact for multiples of 90 degrees."""
    if degrees % 90 == 0:
        return gc.rot90(x, int(degrees // 90) % 4)
    shape = np.shape(gc.value(x))
    return gc.matvec_fixed(rotation_operator(shape[0], degrees), x, shape)


# --- losses -----------------------------------------------------------------

def augment_noise(y, cfg, rng):
    """Return ``max(y + xi, 0)`` for the configured noise model."""
    if cfg.noise == "poisson":
        return rng.poisson(np.maximum(y, 0)).astype(np.float64)
    if cfg.noise == "gaussian":
        return np.maximum(y + rng.normal(0.0, cfg.noise_std, size=y.shape), 0.0)
    return np.asarray(y, dtype=np.float64)


def _recon(y, model, b, params, lda_cfg):
    x, _ = lda_reconstruct(y, model, b, params, lda_cfg, keep_images=False)
    return x


def loss_image(params, y, model, b, lda_cfg, degrees=90, stop_gradient=False):
    x_t = _recon(y, model, b, params, lda_cfg)
    x_tr = rotate(x_t, degrees)
    if stop_gradient:
        x_tr = gc.value(x_tr)
    y_tr = gc.add(gc.matvec_fixed(model.matrix, x_tr, model.sino_shape), b)
    x_back = _recon(y_tr, model, b, params, lda_cfg)
    diff = gc.sub(x_tr, x_back)
    return gc.dot(diff, diff)


def loss_measure(params, y_aug, model, b, lda_cfg):
    x_hat = _recon(y_aug, model, b, params, lda_cfg)
    resid = gc.sub(y_aug, gc.add(gc.matvec_fixed(model.matrix, x_hat, model.sino_shape), b))
    return gc.dot(resid, resid)


def sample_draws(cfg, seed_key, y):
    """Rotation and augmented sinogram for one sample, fixed by ``seed_key``."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, *seed_key]))
    degrees = cfg.rotation_set[int(rng.integers(len(cfg.rotation_set)))]
    return degrees, augment_noise(y, cfg, rng)


def sample_loss(params, sample, model, lda_cfg, cfg, seed_key, with_grad=True):
    """Loss terms for one (y, b) pair; gradients w.r.t. the trainable arrays."""
    y, b = sample
    degrees, y_aug = sample_draws(cfg, seed_key, y)
    tape = gc.Tape() if with_grad else None
    p = params.on_tape(tape)[0] if with_grad else params
    leaves = p.arrays() if with_grad else None
    li = lm = 0.0
    if cfg.loss_mode in ("dual", "image") or not with_grad:
        li = loss_image(p, y, model, b, lda_cfg, degrees, cfg.stop_gradient_target)
    if cfg.loss_mode in ("dual", "measure") or not with_grad:
        lm = loss_measure(p, y_aug, model, b, lda_cfg)
    l_image, l_measure = float(gc.value(li)), float(gc.value(lm))
    l_dual = l_image + cfg.lam * l_measure
    grads = None
    if with_grad:
        if cfg.loss_mode == "dual":
            target = gc.add(li, gc.scale(lm, cfg.lam))
        elif cfg.loss_mode == "image":
            target = li
        else:
            target = lm
        grads = gc.backward(tape, target, leaves)
    return l_image, l_measure, l_dual, grads


def evaluate_losses(params, dataset, model, lda_cfg, cfg, tag=0):
    """Losses over a dataset with draws fixed by ``tag`` (no gradients)."""
    rows = []
    for i, sample in enumerate(dataset):
        li, lm, ld, _ = sample_loss(params, sample, model, lda_cfg, cfg, (tag, i),
                                    with_grad=False)
        rows.append({"l_image": li, "l_measure": lm, "l_dual": ld})
    li = float(np.mean([r["l_image"] for r in rows]))
    lm = float(np.mean([r["l_measure"] for r in rows]))
    return LossReport(l_image=li, l_measure=lm, l_dual=li + cfg.lam * lm, per_sample=rows)


# --- optimisation -----------------------------------------------------------

class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, arrays, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mh = self.m[i] / (1 - self.beta1 ** self.t)
            vh = self.v[i] / (1 - self.beta2 ** self.t)
            out.append(a - lr * mh / (np.sqrt(vh) + self.eps))
        return out

    def state(self):
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state(self, state):
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]
        self.t = int(state["t"])


def batch_gradient(params, batch, model, lda_cfg, cfg, epoch, step):
    """Mean loss report and mean gradient over a batch (ordered reduction)."""
    rows, total = [], None
    for idx, sample in batch:
        li, lm, ld, grads = sample_loss(params, sample, model, lda_cfg, cfg, (1, epoch, idx))
        rows.append({"index": idx, "l_image": li, "l_measure": lm, "l_dual": ld})
        total = grads if total is None else [t + g for t, g in zip(total, grads)]
    n = len(batch)
    li = float(np.mean([r["l_image"] for r in rows]))
    lm = float(np.mean([r["l_measure"] for r in rows]))
    return LossReport(li, lm, li + cfg.lam * lm, rows), [g / n for g in total]


def _copy_state(state):
    return {"m": [a.copy() for a in state["m"]], "v": [a.copy() for a in state["v"]],
            "t": state["t"]}


def _finite(report, grads):
    return math.isfinite(report.l_dual) and all(np.all(np.isfinite(g)) for g in grads)


def train(dataset, model, params0, cfg=None, lda_cfg=None, val=None, checkpoint_dir=None,
          resume=False, on_epoch=None):
    """Adam on the mean batch loss; returns (best params, history).

    ``dataset`` and ``val`` are lists of ``(y, b)`` pairs.  The best
    parameters are chosen by validation ``L_dual`` (training loss when no
    validation set is given); with a validation set the starting parameters
    are scored as well.  With ``checkpoint_dir`` the state is saved
    after every epoch; ``resume=True`` continues from the last checkpoint.
    """
    cfg = cfg or TrainConfig()
    lda_cfg = lda_cfg or LdaConfig(n_phases=params0.n_phases)
    if not dataset:
        raise ValueError("training set is empty")
    params = params0.detached()
    opt = Adam([np.shape(a) for a in params.arrays()], cfg.learning_rate)
    history = []
    best, best_score, start_epoch = params.detached(), math.inf, 0
    if checkpoint_dir is not None and resume and has_checkpoint(checkpoint_dir):
        params, best, best_score, start_epoch, history = load_checkpoint(checkpoint_dir, opt)
    if cfg.epochs == 0:
        return params0.detached(), history
    order_rng_seed = [cfg.seed, 2]
    lr = cfg.learning_rate
    step = len([h for h in history if h.get("kind") == "step"])
    t0 = time.perf_counter()
    snapshot = None
    if val and start_epoch == 0:
        # the starting point competes too, so training never returns worse than it
        best_score = evaluate_losses(params, val, model, lda_cfg, cfg, tag=0).l_dual
        history.append({"kind": "epoch", "epoch": -1, "score": best_score, "wall": 0.0})
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([*order_rng_seed, epoch]))
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [(int(i), dataset[int(i)]) for i in order[start:start + cfg.batch_size]]
            failures = 0
            while True:
                try:
                    report, grads = batch_gradient(params, batch, model, lda_cfg, cfg,
                                                   epoch, step)
                    ok = _finite(report, grads)
                except (NonFiniteObjective, FloatingPointError, ZeroDivisionError):
                    ok = False
                if ok:
                    break
                failures += 1
                if failures >= cfg.max_retries or snapshot is None:
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
                # redo the previous update with half the step
                lr *= 0.5
                log.warning("non-finite loss; redoing last update with learning rate %g", lr)
                prev_arrays, prev_state, prev_grads = snapshot
                opt.load_state(prev_state)
                params = params.with_arrays(opt.step(prev_arrays, prev_grads, lr))
            snapshot = ([np.array(a, copy=True) for a in params.arrays()],
                        _copy_state(opt.state()), grads)
            params = params.with_arrays(opt.step(params.arrays(), grads, lr))
            step += 1
            epoch_losses.append(report.l_dual)
            history.append({"kind": "step", "epoch": epoch, "step": step,
                            "l_image": report.l_image, "l_measure": report.l_measure,
                            "l_dual": report.l_dual, "lr": lr,
                            "wall": time.perf_counter() - t0})
        if val:
            score = evaluate_losses(params, val, model, lda_cfg, cfg, tag=0).l_dual
        else:
            score = float(np.mean(epoch_losses))
        history.append({"kind": "epoch", "epoch": epoch, "score": score,
                        "wall": time.perf_counter() - t0})
        if score < best_score:
            best, best_score = params.detached(), score
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, params, best, best_score, epoch + 1, history, opt)
        if on_epoch is not None:
            on_epoch(epoch, params, score)
        log.info("epoch %d score %.6g", epoch, score)
    return best, history


# --- checkpoints ------------------------------------------------------------

def has_checkpoint(directory):
    return (Path(directory) / "state.json").exists()


def save_checkpoint(directory, params, best, best_score, next_epoch, history, opt):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_params(params, d / "params")
    save_params(best, d / "best")
    moments = opt.state()
    np.savez(d / "optimizer.npz", t=moments["t"],
             **{f"m{i}": a for i, a in enumerate(moments["m"])},
             **{f"v{i}": a for i, a in enumerate(moments["v"])})
    with open(d / "history.jsonl", "w") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
    (d / "state.json").write_text(json.dumps(
        {"next_epoch": next_epoch, "best_score": best_score, "n_arrays": len(moments["m"])},
        indent=2))


def load_checkpoint(directory, opt):
    d = Path(directory)
    state = json.loads((d / "state.json").read_text())
    params = load_params(d / "params")
    best = load_params(d / "best")
    with np.load(d / "optimizer.npz") as z:
        n = state["n_arrays"]
        opt.load_state({"t": int(z["t"]), "m": [z[f"m{i}"] for i in range(n)],
                        "v": [z[f"v{i}"] for i in range(n)]})
    history = [json.loads(line) for line in (d / "history.jsonl").read_text().splitlines()
               if line.strip()]
    return params, best, state["best_score"], state["next_epoch"], history
