"""Poisson reconstruction: MLEM, EM-TV and the unrolled learned descent loop.

All images live on the model grid; pixels outside the field of view (zero
sensitivity) are held at zero.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from dulda import gradcore as gc
from dulda.projector import backproject, forward
from dulda.regularizer import grad_p_smoothed, p_smoothed
from dulda.tensorio import save_tensor


class NonFiniteObjective(FloatingPointError):
    """Raised when the objective stops being finite; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


# --- likelihood -------------------------------------------------------------

def neg_loglik(y, x, model, b):
    """``sum(ybar - y log ybar)`` with ``ybar = A x + b`` and ``0 log 0 = 0``.

    Returns ``inf`` when some ``ybar <= 0`` carries counts.
    """
    y = np.asarray(gc.value(y), dtype=np.float64)
    ybar = forward(model, gc.value(x), b)
    hit = y > 0
    if np.any(ybar[hit] <= 0):
        return np.inf
    return float(np.sum(ybar) - np.sum(y[hit] * np.log(ybar[hit])))


def neg_loglik_grad(y, x, model, b):
    """Gradient of :func:`neg_loglik`: ``A^T 1 - A^T (y / ybar)``.

    Works on arrays or taped values.
    """
    ybar = gc.add(gc.matvec_fixed(model.matrix, x, model.sino_shape), b)
    if not (gc.is_var(y) or gc.is_var(x)):
        ratio = np.divide(gc.value(y), ybar, out=np.zeros(model.sino_shape), where=ybar > 0)
    else:
        ratio = gc.div(y, ybar)
    return gc.sub(model.sensitivity, gc.matvec_fixed(model.matrix.T, ratio, model.image_shape))


def initial_image(model, fill=1.0):
    return np.where(model.mask, float(fill), 0.0)


# --- MLEM -------------------------------------------------------------------

def mlem_step(x, y, model, b):
    """One EM update ``x / A^T 1 * A^T (y / (A x + b))``; zero outside the FOV."""
    x = np.asarray(x, dtype=np.float64)
    ybar = forward(model, x, b)
    ratio = np.divide(y, ybar, out=np.zeros_like(ybar), where=ybar > 0)
    bp = backproject(model, ratio)
    sens = model.sensitivity
    return np.divide(x * bp, sens, out=np.zeros_like(x), where=sens > 0)


def mlem(y, model, b, n_iter=25, x0=None, history=False):
    x = initial_image(model) if x0 is None else np.asarray(x0, dtype=np.float64)
    values = [neg_loglik(y, x, model, b)]
    for _ in range(n_iter):
        x = mlem_step(x, y, model, b)
        if history:
            values.append(neg_loglik(y, x, model, b))
    return (x, values) if history else x


# --- EM-TV ------------------------------------------------------------------

TV_SMOOTHING = 1e-8


def tv_value(x, smoothing=TV_SMOOTHING):
    dx = np.diff(x, axis=1, append=x[:, -1:])
    dy = np.diff(x, axis=0, append=x[-1:, :])
    return float(np.sum(np.sqrt(dx * dx + dy * dy + smoothing)))


def tv_gradient(x, smoothing=TV_SMOOTHING):
    """Gradient of smoothed isotropic TV (forward differences, Neumann edges)."""
    dx = np.diff(x, axis=1, append=x[:, -1:])
    dy = np.diff(x, axis=0, append=x[-1:, :])
    mag = np.sqrt(dx * dx + dy * dy + smoothing)
    px, py = dx / mag, dy / mag
    # negative divergence (adjoint of the forward difference operator)
    g = -px - py
    g[:, 1:] += px[:, :-1]
    g[1:, :] += py[:-1, :]
    return g


def emtv_step(x, y, model, b, penalty=2e-5):
    """MLEM step followed by an EM-weighted TV descent step, clipped at zero.

    The TV weight is ``penalty * sum(y) / mean(sensitivity)``, i.e. the
    penalty is expressed per detected count and per unit of sensitivity.
    """
    x = np.asarray(x, dtype=np.float64)
    x_em = mlem_step(x, y, model, b)
    if penalty == 0:
        return x_em
    sens = model.sensitivity
    weight = penalty * float(np.sum(y)) / float(sens[model.mask].mean())
    precond = np.divide(x, sens, out=np.zeros_like(x), where=sens > 0)
    out = x_em - weight * precond * tv_gradient(x_em)
    return np.maximum(out, 0.0) * model.mask


def emtv(y, model, b, n_iter=25, penalty=2e-5, x0=None):
    x = initial_image(model) if x0 is None else np.asarray(x0, dtype=np.float64)
    for _ in range(n_iter):
        x = emtv_step(x, y, model, b, penalty)
    return x


# --- learned descent --------------------------------------------------------

@dataclass(frozen=True)
class LdaConfig:
    n_phases: int = 4
    max_line_search: int = 10
    shrink: float = 0.5
    eps_shrink: float = 0.9
    sigma_tol: float = 1.0
    eps0: float = 1e-3
    x0_value: float = 1.0

    def __post_init__(self):
        if self.n_phases < 1:
            raise ValueError("n_phases must be >= 1")
        if self.max_line_search < 0:
            raise ValueError("max_line_search must be >= 0")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if not 0 < self.eps_shrink < 1:
            raise ValueError("eps_shrink must lie in (0, 1)")
        if not self.sigma_tol > 0 or not self.eps0 > 0:
            raise ValueError("sigma_tol and eps0 must be positive")
        if self.x0_value < 0:
            raise ValueError("x0_value must be nonnegative")


@dataclass
class PhaseRecord:
    phase: int
    alpha: float
    beta: float
    tau: float
    alpha_accepted: float
    line_search_trials: int
    line_search_ok: bool
    branch: str
    eps_prev: float
    eps: float
    phi_prev: float
    phi_u: float
    phi_v: float
    phi: float
    grad_norm: float
    images: dict = field(default_factory=dict, repr=False)


@dataclass
class SolverTrace:
    phases: list = field(default_factory=list)
    tape: object = field(default=None, repr=False)
    leaves: list = field(default=None, repr=False)

    def to_dict(self):
        rows = []
        for p in self.phases:
            row = asdict(p)
            row.pop("images")
            rows.append(row)
        return {"phases": rows}

    def save(self, path, image_dir=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        if image_dir is not None:
            for p in self.phases:
                for name, img in p.images.items():
                    save_tensor(f"{image_dir}/phase{p.phase}_{name}.tensor", img,
                                role=f"trace_{name}")


def objective(y, x, model, b, params, eps):
    """Smoothed objective ``-L(y|x) + P_eps(x)`` (numpy values)."""
    return neg_loglik(y, x, model, b) + float(p_smoothed(params_values(params), gc.value(x), eps))


def params_values(params):
    if any(gc.is_var(a) for a in params.arrays()):
        return params.detached()
    return params


def lda_reconstruct(y, model, b, params, cfg=None, record_tape=False, keep_images=True,
                    x0=None):
    """Unrolled learned descent reconstruction.

    Each phase takes a likelihood ascent step ``r``, a linearised proximal step
    ``u = r - tau grad P(r)`` and a line-searched safeguard step ``v``; the
    candidate with the lower smoothed objective becomes the next iterate.

    ``params`` (and ``y``) may hold taped values, in which case the returned
    image is a ``Var`` recorded on the same tape.  With ``record_tape=True``
    and plain params, a fresh tape is created and exposed as ``trace.tape``
    with the parameter leaves in ``trace.leaves``.
    """
    cfg = cfg or LdaConfig()
    if params.n_phases < cfg.n_phases:
        raise ValueError(f"params carry {params.n_phases} phase step sizes, "
                         f"config needs {cfg.n_phases}")
    trace = SolverTrace()
    if record_tape and not any(gc.is_var(a) for a in params.arrays()):
        trace.tape = gc.Tape()
        params, trace.leaves = params.on_tape(trace.tape)
    plain = params_values(params)
    y_val = gc.value(y)
    mask = model.mask.astype(np.float64)
    x = initial_image(model, cfg.x0_value) if x0 is None else np.asarray(x0, dtype=np.float64)
    eps = cfg.eps0
    phi_x = objective(y_val, x, model, b, plain, eps)
    if not np.isfinite(phi_x):
        raise NonFiniteObjective("objective is not finite at the initial image", trace)
    cached = None  # values of (grad L, grad P) at x for the current eps

    def phi(img):
        return objective(y_val, img, model, b, plain, eps)

    for k in range(cfg.n_phases):
        alpha = params.alpha(k)
        beta = params.beta(k)
        tau = alpha * beta / (alpha + beta)

        taped = gc.is_var(x) or gc.is_var(y) or any(gc.is_var(a) for a in params.arrays())
        x_val = gc.value(x)
        if cached is not None:
            gl_val, gp_val = cached
        else:
            gl_val = neg_loglik_grad(y_val, x_val, model, b)
            gp_val = grad_p_smoothed(plain, x_val, eps) * mask
        g_lik = neg_loglik_grad(y, x, model, b) if taped else gl_val
        r = gc.sub(x, gc.mul(alpha, g_lik))
        u = gc.clip_min(gc.sub(r, gc.mul(tau, gc.mul(grad_p_smoothed(params, r, eps), mask))))
        phi_u = phi(gc.value(u))

        # safeguard: projected gradient step on phi_eps with backtracking
        d_val, a_val = gl_val + gp_val, float(gc.value(alpha))
        factor, ok, trials = 1.0, False, 0
        for trials in range(1, cfg.max_line_search + 1):
            v_val = np.maximum(x_val - a_val * factor * d_val, 0.0)
            phi_v = phi(v_val)
            if phi_v <= phi_x:
                ok = True
                break
            factor *= cfg.shrink
        if not ok:
            # no admissible step found: the safeguard stays at the previous iterate
            v_val, phi_v, factor = x_val, phi_x, 0.0
            trials = cfg.max_line_search

        if not (np.isfinite(phi_u) or np.isfinite(phi_v)):
            raise NonFiniteObjective(f"objective is not finite in phase {k + 1}", trace)
        if phi_u <= phi_v:
            branch, x_new, phi_new = "u", u, phi_u
        else:
            branch, phi_new = "v", phi_v
            if factor == 0.0:
                x_new = x
            elif taped:
                direction = gc.add(g_lik, gc.mul(grad_p_smoothed(params, x, eps), mask))
                x_new = gc.clip_min(gc.sub(x, gc.mul(gc.scale(alpha, factor), direction)))
            else:
                x_new = v_val

        # smoothing update from the gradient of phi_{eps_{k-1}} at the new iterate
        xn_val = gc.value(x_new)
        gl_new = neg_loglik_grad(y_val, xn_val, model, b)
        gp_new = grad_p_smoothed(plain, xn_val, eps) * mask
        grad_norm = float(np.linalg.norm((gl_new + gp_new) * mask))
        eps_prev = eps
        if grad_norm < cfg.sigma_tol * cfg.eps_shrink * eps:
            eps = cfg.eps_shrink * eps

        images = {}
        if keep_images:
            images = {"x": xn_val.copy(), "r": gc.value(r).copy(), "u": gc.value(u).copy(),
                      "v": np.array(v_val, copy=True)}
        trace.phases.append(PhaseRecord(
            phase=k + 1, alpha=a_val, beta=float(gc.value(beta)), tau=float(gc.value(tau)),
            alpha_accepted=a_val * factor, line_search_trials=trials, line_search_ok=ok,
            branch=branch, eps_prev=eps_prev, eps=eps, phi_prev=phi_x, phi_u=phi_u,
            phi_v=phi_v, phi=phi_new, grad_norm=grad_norm, images=images))
        if not np.isfinite(phi_new):
            raise NonFiniteObjective(f"objective is not finite in phase {k + 1}", trace)

        x = x_new
        cached = (gl_new, gp_new) if eps == eps_prev else None
        phi_x = phi_new if eps == eps_prev else phi(xn_val)
    return x, trace
