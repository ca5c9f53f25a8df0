"""End-to-end acceptance checks, one test per criterion.

Every test prints a single ``[criterion N] PASS|FAIL ...`` line with the
measured value next to its pinned threshold, then asserts.  Criterion 6 runs
the full desk-scale training pipeline and takes the better part of an hour on
one core.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from _oracles import central_difference, rel_err
from dulda import cli
from dulda import config as C
from dulda import gradcore as gc
from dulda.phantom import simulate_dataset
from dulda.projector import GridSpec, SinogramSpec, backproject, build_system_model, forward
from dulda.regularizer import grad_p_smoothed, init_params, l21_norm, p_smoothed
from dulda.solvers import LdaConfig, lda_reconstruct, mlem, mlem_step, neg_loglik, neg_loglik_grad
from dulda.trainer import TrainConfig, sample_loss

ROOT = Path(__file__).resolve().parents[1]

# pinned thresholds
ADJOINT_TOL, ADJOINT_SECONDS = 1e-10, 10.0
GRAD_TOL, LDUAL_TOL, GRAD_SECONDS = 1e-6, 1e-4, 120.0
N_SMOOTHING, N_DESCENT = 50, 20
FIXED_POINT_TOL = 1e-12
MONOTONE_SLACK = 1e-12  # relative, absorbs summation rounding only
DESK_SECONDS = 4 * 3600.0

# 16x16 with the default count density (1e6 counts over 64x64 pixels)
SMALL = {
    "grid": {"n_pixels_per_side": 16},
    "sinogram": {"n_angles": 24, "n_bins": 24},
    "scan": {"total_counts": 62500.0},
    "dataset": {"n_train": 4, "n_val": 2, "n_test": 2},
    "train": {"epochs": 10, "batch_size": 2, "learning_rate": 0.01},
    "regularizer": {"alpha0": 0.03},
    "lda": {"n_phases": 4},
}


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return _report


def _write_cfg(path, overrides):
    path.write_text(json.dumps(overrides))
    return str(path)


def _run(*argv):
    return cli.main([str(a) for a in argv])


def test_c1_adjoint(report):
    t0 = time.perf_counter()
    m = build_system_model(GridSpec(64), SinogramSpec(90, 96))
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(m.image_shape) * m.mask
        s = rng.standard_normal(m.sino_shape)
        lhs = np.vdot(forward(m, x), s)
        rhs = np.vdot(x, backproject(m, s))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    dt = time.perf_counter() - t0
    report(1, worst < ADJOINT_TOL and dt < ADJOINT_SECONDS,
           f"adjoint: max rel err {worst:.2e} < {ADJOINT_TOL:g}, {dt:.1f}s < {ADJOINT_SECONDS:g}s")


def test_c2_gradients(report, small_model, small_sample):
    t0 = time.perf_counter()
    m, s = small_model, small_sample
    rng = np.random.default_rng(7)
    p = init_params(n_phases=2, seed=1, alpha0=0.03)
    x = rng.random(m.image_shape)
    eps = 1e-3
    e_reg = rel_err(grad_p_smoothed(p, x, eps),
                    central_difference(lambda z: p_smoothed(p, z, eps), x, h=1e-6))

    xl = s.truth * 0.7 + 0.3 * m.mask
    e_nll = rel_err(neg_loglik_grad(s.y, xl, m, s.b),
                    central_difference(lambda z: neg_loglik(s.y, z, m, s.b), xl, h=1e-4))

    cfg, lcfg, key = TrainConfig(), LdaConfig(n_phases=2), (0, 0)
    *_, grads = sample_loss(p, (s.y, s.b), m, lcfg, cfg, key)
    dirs = [rng.standard_normal(np.shape(a)) for a in p.arrays()]
    h = 1e-6

    def f(t):
        q = p.with_arrays([a + t * d for a, d in zip(p.arrays(), dirs)])
        return sample_loss(q, (s.y, s.b), m, lcfg, cfg, key, with_grad=False)[2]

    fd = (f(h) - f(-h)) / (2 * h)
    an = sum(float(np.vdot(g, d)) for g, d in zip(grads, dirs))
    e_dual = abs(an - fd) / abs(fd)
    dt = time.perf_counter() - t0
    ok = e_reg < GRAD_TOL and e_nll < GRAD_TOL and e_dual < LDUAL_TOL and dt < GRAD_SECONDS
    report(2, ok, f"gradients: grad P {e_reg:.1e}, NLL {e_nll:.1e} (< {GRAD_TOL:g}); "
                  f"L_dual {e_dual:.1e} (< {LDUAL_TOL:g}); {dt:.1f}s < {GRAD_SECONDS:g}s")


def test_c3_smoothing_contract(report):
    failures = []
    for i in range(N_SMOOTHING):
        rng = np.random.default_rng(1000 + i)
        eps = 10.0 ** rng.uniform(-4, 0)
        # branch continuity: a feature vector of norm exactly eps contributes eps/2
        g = np.zeros((8, 1, 1))
        d = rng.standard_normal(8)
        g[:, 0, 0] = eps * d / np.linalg.norm(d)
        if abs(gc.huber_l21(g, eps) - eps / 2) > 1e-12 * max(eps, 1.0):
            failures.append(f"continuity #{i}")
        p = init_params(seed=i)
        x = rng.random((12, 12)) * rng.uniform(0.1, 10)
        full, n = l21_norm(p, x), x.size
        prev = np.inf
        for e in np.sort(10.0 ** rng.uniform(-5, 1, size=5)):
            pe = p_smoothed(p, x, e)
            tol = 1e-12 * max(full, 1.0)
            if not full - n * e / 2 - tol <= pe <= full + tol:
                failures.append(f"sandwich #{i}")
            if pe > prev + tol:
                failures.append(f"monotone #{i}")
            prev = pe
    report(3, not failures, f"smoothing: {N_SMOOTHING} instances, failures {failures[:5]}")


def test_c4_descent(report, small_model):
    bad = []
    n_phases = 0
    for seed in range(N_DESCENT):
        s = simulate_dataset(1, small_model, seed=500 + seed)[0]
        p = init_params(n_phases=6, seed=seed, kernel_scale=3.0, alpha0=0.02 + 0.01 * (seed % 4))
        x, trace = lda_reconstruct(s.y, small_model, s.b, p, LdaConfig(n_phases=6))
        prev_eps = np.inf
        for rec in trace.phases:
            n_phases += 1
            if rec.phi > rec.phi_prev or rec.eps > rec.eps_prev or rec.eps_prev > prev_eps:
                bad.append(seed)
            prev_eps = rec.eps
        if x.min() < 0:
            bad.append(seed)
    report(4, not bad, f"descent: {N_DESCENT} reconstructions, {n_phases} phases, "
                       f"violating seeds {sorted(set(bad))}")


def test_c5_mlem(report, default_model):
    cfg = C.load_config()
    n = cfg["dataset"]["n_test"]
    samples = simulate_dataset(n, default_model, seed=99)
    worst_rise = -np.inf
    for s in samples:
        _, values = mlem(s.y, default_model, s.b, n_iter=25, history=True)
        worst_rise = max(worst_rise, float(np.max(np.diff(values) / abs(values[0]))))
    x = samples[0].truth
    y = forward(default_model, x, samples[0].b)
    fp = float(np.max(np.abs(mlem_step(x, y, default_model, samples[0].b) - x)) / x.max())
    ok = worst_rise <= MONOTONE_SLACK and fp < FIXED_POINT_TOL
    report(5, ok, f"MLEM: {n} sinograms x 25 iters, max relative rise {worst_rise:.1e} "
                  f"<= {MONOTONE_SLACK:g}; fixed point {fp:.1e} < {FIXED_POINT_TOL:g}")


@pytest.mark.slow
def test_c6_desk_quality(report, tmp_path):
    cfg_path = ROOT / "configs" / "desk_acceptance.json"
    cfg = C.load_config(cfg_path)
    assert cfg["dataset"]["n_train"] >= 24 and cfg["train"]["epochs"] >= 20
    assert cfg["grid"]["n_pixels_per_side"] == 64
    t0 = time.perf_counter()
    common = ["--config", cfg_path, "--jobs", 1]
    data = tmp_path / "data"
    assert _run("simulate", *common, "--out", data) == 0
    assert _run("train", *common, "--data", data, "--out", tmp_path / "train") == 0
    assert _run("reconstruct", "mlem", *common, "--data", data, "--out", tmp_path / "mlem") == 0
    assert _run("reconstruct", "lda", *common, "--data", data, "--params", tmp_path / "train",
                "--out", tmp_path / "lda") == 0
    assert _run("evaluate", "--data", data, tmp_path / "mlem", tmp_path / "lda",
                "--out", tmp_path / "ev") == 0
    dt = time.perf_counter() - t0
    ml = json.loads((tmp_path / "ev" / "00_mlem.json").read_text())
    ld = json.loads((tmp_path / "ev" / "01_lda.json").read_text())
    ok = (ld["psnr"] >= ml["psnr"] and ld["crc_mean"] >= ml["crc_mean"]
          and dt < DESK_SECONDS)
    report(6, ok, f"desk quality: PSNR LDA {ld['psnr']:.2f} vs MLEM {ml['psnr']:.2f} dB; "
                  f"CRC LDA {ld['crc_mean']:.3f} vs MLEM {ml['crc_mean']:.3f}; "
                  f"{dt / 60:.1f} min < {DESK_SECONDS / 60:g} min")


def test_c7_ablation(report, tmp_path):
    cfg_path = _write_cfg(tmp_path / "cfg.json", SMALL)
    data = tmp_path / "data"
    assert _run("simulate", "--config", cfg_path, "--out", data, "--jobs", 1) == 0
    assert _run("ablation", "--config", cfg_path, "--data", data, "--out", tmp_path / "abl",
                "--jobs", 1) == 0
    rows = json.loads((tmp_path / "abl" / "ablation.json").read_text())
    table = (tmp_path / "abl" / "table.txt").read_text()
    ks = sorted(r["n_phases"] for r in rows if r["group"] == "phases")
    loss = {r["loss_mode"]: r["train_dual_loss"] for r in rows if r["group"] == "loss"}
    ok = (ks == [2, 4, 6, 8, 10] and set(loss) == {"image", "measure", "dual"}
          and len(table.splitlines()) == 2 + len(rows)
          and loss["dual"] <= min(loss["image"], loss["measure"]))
    report(7, ok, f"ablation: K {ks}, train L_dual dual {loss.get('dual', np.nan):.6g} vs "
                  f"image {loss.get('image', np.nan):.6g}, "
                  f"measure {loss.get('measure', np.nan):.6g}")


def test_c8_bias_variance(report, tmp_path):
    small = dict(SMALL, train={"epochs": 1, "batch_size": 2, "learning_rate": 0.01})
    cfg_path = _write_cfg(tmp_path / "cfg.json", small)
    outs = []
    for rep in ("a", "b"):
        assert _run("bias-variance", "--config", cfg_path, "--out", tmp_path / rep,
                    "--jobs", 1) == 0
        outs.append((tmp_path / rep / "bias_variance.json").read_text())
    rows = json.loads(outs[0])
    real = C.load_config(cfg_path)["bias_variance"]["realizations"]
    n_dirs = len(list((tmp_path / "a").glob("realization_*")))
    finite = all(np.isfinite(r["bias"]) and np.isfinite(r["variance"]) for r in rows)
    ok = real == 5 and n_dirs == 5 and finite and outs[0] == outs[1]
    report(8, ok, f"bias/variance: R={n_dirs}, methods {[r['method'] for r in rows]}, "
                  f"reruns identical {outs[0] == outs[1]}")


def _tree_bytes(root):
    # run_manifest.json carries wall-clock timings, everything else must match
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "run_manifest.json"}


def test_c9_determinism(report, tmp_path):
    cfg_path = _write_cfg(tmp_path / "cfg.json", {"dataset": {"n_train": 2, "n_val": 0,
                                                              "n_test": 2}})
    trees = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        assert _run("simulate", "--config", cfg_path, "--out", d / "data", "--jobs", 1) == 0
        assert _run("reconstruct", "mlem", "--config", cfg_path, "--data", d / "data",
                    "--out", d / "mlem", "--jobs", 1) == 0
        trees.append(_tree_bytes(d))
    diff = sorted(k for k in trees[0] if trees[0][k] != trees[1].get(k))
    ok = trees[0].keys() == trees[1].keys() and not diff and len(trees[0]) > 0
    report(9, ok, f"determinism: {len(trees[0])} files byte-identical, differing {diff[:5]}")
