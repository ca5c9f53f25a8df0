"""Command line entry points: simulate, train, reconstruct, evaluate and the
ablation and bias/variance drivers.

Exit codes: 0 success, 2 invalid configuration or inputs, 3 training aborted
on a non-finite loss, 4 evaluation inputs missing or misaligned.
"""

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dulda import __version__
from dulda import config as C
from dulda.metrics import bias_variance, evaluate, format_table
from dulda.phantom import RoiSpec, simulate_sample
from dulda.projector import build_system_model
from dulda.regularizer import load_params, save_params
from dulda.solvers import emtv, lda_reconstruct, mlem
from dulda.tensorio import load_tensor, save_tensor
from dulda.trainer import (Adam, TrainingDiverged, evaluate_losses, has_checkpoint,
                           save_checkpoint, train)

log = logging.getLogger("dulda")

OUTPUT_ROOT_ENV = "DULDA_OUTPUT_ROOT"
SPLITS = ("train", "val", "test")
METHODS = ("mlem", "emtv", "lda")


class InputError(Exception):
    """Bad or missing inputs (exit 2)."""


class EvaluationError(Exception):
    """Missing or misaligned evaluation inputs (exit 4)."""


# --- run manifest -----------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_path: str
    seeds: dict
    version: str
    artifacts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def write(self, out_dir):
        out_dir = Path(out_dir)
        missing = [a for a in self.artifacts if not (out_dir / a).exists()]
        if missing:
            raise RuntimeError(f"manifest names missing artifacts: {missing[:3]}")
        path = out_dir / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def version_string():
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _manifest(args, cfg, command):
    return RunManifest(command=command, config_path=str(args.config or ""),
                       seeds={"seed": cfg["seed"],
                              "init_seed": cfg["regularizer"]["init_seed"]},
                       version=version_string())


# --- helpers ----------------------------------------------------------------

def _out_dir(args, command):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "dulda-runs")) / command


def _model(cfg):
    return build_system_model(C.grid_spec(cfg), C.sino_spec(cfg))


_WORKER = {}


def _worker_init(cfg):
    _WORKER["model"] = _model(cfg)


def _worker_call(task):
    fn, item = task
    return fn(_WORKER["model"], item)


def parallel_map(fn, items, cfg, jobs, model=None):
    """Ordered ``[fn(model, item) for item in items]``, optionally in processes."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        model = model or _model(cfg)
        return [fn(model, it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init,
                             initargs=(cfg,)) as pool:
        return list(pool.map(_worker_call, [(fn, it) for it in items]))


def _sample_seeds(cfg, index):
    seed, real = cfg["seed"], cfg["dataset"]["realization"]
    p_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
    n_seed = int(np.random.SeedSequence([seed, index, real + 1]).generate_state(1)[0])
    return p_seed, n_seed


def _roi_labels(roi):
    lab = np.zeros(roi.background_mask.shape)
    lab[roi.background_mask] = 1
    for i, m in enumerate(roi.tumor_masks):
        lab[m] = 2 + i
    return lab


def _roi_from_labels(lab):
    n = int(lab.max()) - 1
    return RoiSpec([lab == 2 + i for i in range(n)], lab == 1)


# --- dataset access ---------------------------------------------------------

def read_dataset(data_dir, cfg=None, split=None):
    """Manifest plus sample ids (for one split or all)."""
    data_dir = Path(data_dir)
    mpath = data_dir / "manifest.json"
    if not mpath.exists():
        raise InputError(f"no dataset at {data_dir} (missing manifest.json)")
    manifest = json.loads(mpath.read_text())
    if cfg is not None:
        if manifest["grid"] != cfg["grid"] or manifest["sinogram"] != cfg["sinogram"]:
            raise InputError("dataset geometry differs from the configuration")
    if split is None:
        ids = [s["id"] for s in manifest["samples"]]
    elif split in manifest["splits"]:
        ids = manifest["splits"][split]
    else:
        raise InputError(f"unknown split {split!r}")
    return manifest, ids


def load_sample(data_dir, sid):
    d = Path(data_dir)
    y = load_tensor(d / "sino" / f"{sid}.tensor")
    b = load_tensor(d / "randoms" / f"{sid}.tensor")
    return y, b


# --- simulate ---------------------------------------------------------------

def _simulate_one(model, item):
    cfg, index = item
    p_seed, n_seed = _sample_seeds(cfg, index)
    return simulate_sample(index, model, p_seed, n_seed, C.scan_spec(cfg), C.phantom_spec(cfg))


def simulate_to(out, cfg, jobs=1, model=None):
    ds = cfg["dataset"]
    counts = [ds["n_train"], ds["n_val"], ds["n_test"]]
    n = sum(counts)
    samples = parallel_map(_simulate_one, [(cfg, i) for i in range(n)], cfg, jobs, model)
    out = Path(out)
    for sub in ("truth", "sino", "randoms", "roi"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows, splits, artifacts = [], {s: [] for s in SPLITS}, ["manifest.json", "config.json"]
    bounds = np.cumsum([0] + counts)
    for s in samples:
        sid = f"{s.index:04d}"
        split = SPLITS[int(np.searchsorted(bounds, s.index, side="right")) - 1]
        splits[split].append(sid)
        for sub, arr, role, seed in (("truth", s.truth, "truth", s.phantom_seed),
                                     ("sino", s.y, "sinogram", s.noise_seed),
                                     ("randoms", s.b, "randoms", s.noise_seed),
                                     ("roi", _roi_labels(s.rois), "roi", s.phantom_seed)):
            save_tensor(out / sub / f"{sid}.tensor", arr, role=role, seed=seed)
            artifacts.append(f"{sub}/{sid}.tensor")
        rows.append({"id": sid, "split": split, "phantom_seed": s.phantom_seed,
                     "noise_seed": s.noise_seed})
    manifest = {"format": "dulda-dataset-v1", "grid": cfg["grid"], "sinogram": cfg["sinogram"],
                "seed": cfg["seed"], "realization": ds["realization"], "splits": splits,
                "samples": rows}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "config.json").write_text(C.dumps(cfg))
    return artifacts


def cmd_simulate(args, cfg):
    out = _out_dir(args, "simulate")
    man = _manifest(args, cfg, "simulate")
    t0 = time.perf_counter()
    man.artifacts = simulate_to(out, cfg, args.jobs)
    man.timings["total_s"] = time.perf_counter() - t0
    man.write(out)
    print(out)
    return 0


# --- train ------------------------------------------------------------------

def _pairs(data_dir, ids):
    return [load_sample(data_dir, sid) for sid in ids]


def train_from(data_dir, cfg, out, resume=False, model=None, n_phases=None, loss_mode=None,
               ids=None):
    """Train on the dataset's train split (val split for selection); returns best params."""
    manifest, train_ids = read_dataset(data_dir, cfg, "train")
    if not train_ids:
        raise InputError("dataset has no training samples")
    val_ids = manifest["splits"]["val"]
    model = model or _model(cfg)
    p0 = C.initial_params(cfg, n_phases)
    overrides = {"loss_mode": loss_mode} if loss_mode else {}
    tcfg = C.train_config(cfg, **overrides)
    lcfg = C.lda_config(cfg, n_phases)
    ckpt = Path(out) / "checkpoint"
    best, history = train(_pairs(data_dir, train_ids), model, p0, tcfg, lcfg,
                          val=_pairs(data_dir, val_ids) or None, checkpoint_dir=ckpt,
                          resume=resume)
    if tcfg.epochs == 0 and not has_checkpoint(ckpt):
        opt = Adam([np.shape(a) for a in p0.arrays()], tcfg.learning_rate)
        save_checkpoint(ckpt, p0, p0, float("nan"), 0, history, opt)
    save_params(best, Path(out) / "theta")
    return best, history


def cmd_train(args, cfg):
    read_dataset(args.data, cfg, "train")
    out = _out_dir(args, "train")
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(args, cfg, "train")
    t0 = time.perf_counter()
    train_from(args.data, cfg, out, resume=args.resume)
    man.timings["total_s"] = time.perf_counter() - t0
    man.artifacts = ["theta.json", "theta.bin", "checkpoint/state.json",
                     "checkpoint/history.jsonl"]
    man.write(out)
    print(out / "theta.json")
    return 0


# --- reconstruct ------------------------------------------------------------

def resolve_params(path):
    """Accept a training output dir, a checkpoint dir or a ``theta`` file prefix."""
    p = Path(path)
    for cand in (p / "theta", p / "best", p):
        if cand.with_suffix(".json").is_file() and cand.with_suffix(".bin").is_file():
            return load_params(cand)
    raise InputError(f"no trained parameters found at {path}")


def _recon_one(model, item):
    method, cfg, params, y, b = item
    if method == "mlem":
        return mlem(y, model, b, cfg["mlem"]["n_iter"]), None
    if method == "emtv":
        return emtv(y, model, b, cfg["emtv"]["n_iter"], cfg["emtv"]["penalty"]), None
    x, trace = lda_reconstruct(y, model, b, params, C.lda_config(cfg, params.n_phases),
                               keep_images=False)
    return x, trace.to_dict()


def reconstruct_to(out, method, data_dir, ids, cfg, params=None, jobs=1, model=None):
    items = [(method, cfg, params, *load_sample(data_dir, sid)) for sid in ids]
    results = parallel_map(_recon_one, items, cfg, jobs, model)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    if method == "lda":
        (out / "traces").mkdir(exist_ok=True)
    for sid, (x, trace) in zip(ids, results):
        save_tensor(out / f"{sid}.tensor", x, role="reconstruction", seed=None, method=method)
        artifacts.append(f"{sid}.tensor")
        if trace is not None:
            (out / "traces" / f"{sid}.json").write_text(json.dumps(trace, indent=2))
            artifacts.append(f"traces/{sid}.json")
    return artifacts, [r[0] for r in results]


def cmd_reconstruct(args, cfg):
    _, ids = read_dataset(args.data, cfg, args.split)
    params = None
    if args.method == "lda":
        if not args.params:
            raise InputError("lda reconstruction needs --params")
        params = resolve_params(args.params)
    out = _out_dir(args, f"reconstruct/{args.method}")
    man = _manifest(args, cfg, f"reconstruct {args.method}")
    t0 = time.perf_counter()
    man.artifacts, _ = reconstruct_to(out, args.method, args.data, ids, cfg, params, args.jobs)
    man.timings["total_s"] = time.perf_counter() - t0
    man.write(out)
    print(out)
    return 0


# --- evaluate ---------------------------------------------------------------

def _load_checked(path, shape=None):
    if not Path(path).is_file():
        raise EvaluationError(f"missing file {path}")
    arr = load_tensor(path)
    if shape is not None and arr.shape != shape:
        raise EvaluationError(f"{path}: shape {arr.shape} does not match truth {shape}")
    return arr


def evaluate_dirs(data_dir, split, recon_dirs):
    _, ids = read_dataset(data_dir, None, split)
    d = Path(data_dir)
    truths = [_load_checked(d / "truth" / f"{sid}.tensor") for sid in ids]
    rois = [_roi_from_labels(_load_checked(d / "roi" / f"{sid}.tensor")) for sid in ids]
    reports = []
    for rd in recon_dirs:
        rd = Path(rd)
        recons = [_load_checked(rd / f"{sid}.tensor", t.shape) for sid, t in zip(ids, truths)]
        reports.append(evaluate(rd.name, recons, truths, rois, names=ids))
    return reports


def cmd_evaluate(args, cfg):
    for rd in args.recon_dirs:
        if not Path(rd).is_dir():
            raise EvaluationError(f"missing reconstruction directory {rd}")
    reports = evaluate_dirs(args.data, args.split, args.recon_dirs)
    out = _out_dir(args, "evaluate")
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(args, cfg, "evaluate")
    names = []
    for i, rep in enumerate(reports):
        name = f"{i:02d}_{rep.method}.json"
        (out / name).write_text(rep.to_json())
        names.append(name)
    table = format_table(reports)
    (out / "table.txt").write_text(table + "\n")
    man.artifacts = names + ["table.txt"]
    man.write(out)
    print(table)
    return 0


# --- ablation ---------------------------------------------------------------

def _test_metrics(method_name, recons, data_dir, ids):
    d = Path(data_dir)
    truths = [load_tensor(d / "truth" / f"{sid}.tensor") for sid in ids]
    rois = [_roi_from_labels(load_tensor(d / "roi" / f"{sid}.tensor")) for sid in ids]
    return evaluate(method_name, recons, truths, rois, names=ids)


def run_ablation(data_dir, cfg, out, jobs=1):
    """Train and test one model per phase count and per loss mode."""
    model = _model(cfg)
    manifest, test_ids = read_dataset(data_dir, cfg, "test")
    train_pairs = _pairs(data_dir, manifest["splits"]["train"])
    out = Path(out)
    rows = []
    settings = [("phases", k, "dual") for k in cfg["ablation"]["phase_counts"]]
    settings += [("loss", cfg["lda"]["n_phases"], m) for m in cfg["ablation"]["loss_modes"]]
    dual_cfg = C.train_config(cfg, loss_mode="dual")
    for group, k, mode in settings:
        tag = f"{group}_K{k}_{mode}"
        best, _ = train_from(data_dir, cfg, out / tag, model=model, n_phases=k, loss_mode=mode)
        kcfg = dict(cfg, lda=dict(cfg["lda"], n_phases=k))
        _, recons = reconstruct_to(out / tag / "test", "lda", data_dir, test_ids, kcfg, best,
                                   jobs, model)
        rep = _test_metrics(tag, recons, data_dir, test_ids)
        train_dual = evaluate_losses(best, train_pairs, model, C.lda_config(cfg, k),
                                     dual_cfg).l_dual
        rows.append({"group": group, "n_phases": k, "loss_mode": mode, "psnr": rep.psnr,
                     "psnr_std": rep.psnr_std, "ssim": rep.ssim, "ssim_std": rep.ssim_std,
                     "rmse": rep.rmse, "rmse_std": rep.rmse_std,
                     "train_dual_loss": train_dual})
        log.info("%s: PSNR %.2f train L_dual %.6g", tag, rep.psnr, train_dual)
    return rows


def format_ablation(rows):
    head = f"{'Setting':<22}{'PSNR':>16}{'SSIM':>18}{'RMSE':>18}{'train L_dual':>16}"
    lines = [head, "-" * len(head)]
    for r in rows:
        name = (f"phases={r['n_phases']}" if r["group"] == "phases"
                else f"loss={r['loss_mode']} (K={r['n_phases']})")
        lines.append(f"{name:<22}{r['psnr']:>9.2f} ±{r['psnr_std']:<5.2f}"
                     f"{r['ssim']:>11.3f} ±{r['ssim_std']:<5.3f}"
                     f"{r['rmse']:>11.3f} ±{r['rmse_std']:<5.3f}{r['train_dual_loss']:>16.6g}")
    return "\n".join(lines)


def cmd_ablation(args, cfg):
    read_dataset(args.data, cfg, "train")
    out = _out_dir(args, "ablation")
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(args, cfg, "ablation")
    t0 = time.perf_counter()
    rows = run_ablation(args.data, cfg, out, args.jobs)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    table = format_ablation(rows)
    (out / "table.txt").write_text(table + "\n")
    man.timings["total_s"] = time.perf_counter() - t0
    man.artifacts = ["ablation.json", "table.txt"]
    man.write(out)
    print(table)
    return 0


# --- bias / variance --------------------------------------------------------

def run_bias_variance(cfg, out, jobs=1):
    """Simulate, train and reconstruct R noise realizations of the same phantoms.

    Bias and variance are computed per test slice over the realizations and
    averaged over slices.  Other metrics are averaged over all realizations.
    """
    model = _model(cfg)
    out = Path(out)
    n_real = cfg["bias_variance"]["realizations"]
    per_method = {m: [] for m in METHODS}
    truths = ids = None
    for r in range(n_real):
        rcfg = dict(cfg, dataset=dict(cfg["dataset"], realization=r))
        rdir = out / f"realization_{r}"
        simulate_to(rdir / "data", rcfg, jobs, model)
        best, _ = train_from(rdir / "data", rcfg, rdir / "train", model=model)
        _, ids = read_dataset(rdir / "data", rcfg, "test")
        for m in METHODS:
            _, recons = reconstruct_to(rdir / m, m, rdir / "data", ids, rcfg, best, jobs, model)
            per_method[m].append(recons)
        if truths is None:
            truths = [load_tensor(rdir / "data" / "truth" / f"{sid}.tensor") for sid in ids]
            rois = [_roi_from_labels(load_tensor(rdir / "data" / "roi" / f"{sid}.tensor"))
                    for sid in ids]
    reports = []
    for m in METHODS:
        stacks = per_method[m]
        bv = [bias_variance([stacks[r][i] for r in range(n_real)], truths[i])
              for i in range(len(truths))]
        flat = [x for rec in stacks for x in rec]
        rep = evaluate(m.upper() if m != "lda" else "LDA", flat, truths * n_real, rois * n_real)
        rep.bias = float(np.mean([b for b, _ in bv]))
        rep.variance = float(np.mean([v for _, v in bv]))
        rep.slices = []
        reports.append(rep)
    return reports


def cmd_bias_variance(args, cfg):
    out = _out_dir(args, "bias-variance")
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(args, cfg, "bias-variance")
    t0 = time.perf_counter()
    reports = run_bias_variance(cfg, out, args.jobs)
    payload = [json.loads(r.to_json()) for r in reports]
    (out / "bias_variance.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    table = format_table(reports)
    (out / "table.txt").write_text(table + "\n")
    man.timings["total_s"] = time.perf_counter() - t0
    man.artifacts = ["bias_variance.json", "table.txt"]
    man.write(out)
    print(table)
    return 0


def cmd_print_config(args, cfg):
    print(C.dumps(cfg))
    return 0


# --- argument parsing -------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker processes (default: available cores)")
    common.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dulda", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("print-config", parents=[common], help="print the resolved configuration")
    sub.add_parser("simulate", parents=[common], help="simulate phantoms and sinograms")
    p = sub.add_parser("train", parents=[common], help="train the regularizer without labels")
    p.add_argument("--data", required=True, help="dataset directory from `simulate`")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct a dataset split")
    p.add_argument("method", choices=METHODS)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--params", help="trained parameters (required for lda)")
    p = sub.add_parser("evaluate", parents=[common], help="score reconstructions")
    p.add_argument("recon_dirs", nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p = sub.add_parser("ablation", parents=[common], help="phase-count and loss-mode sweep")
    p.add_argument("--data", required=True)
    sub.add_parser("bias-variance", parents=[common], help="multi-realization bias/variance")
    return parser


COMMANDS = {
    "print-config": cmd_print_config,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "ablation": cmd_ablation,
    "bias-variance": cmd_bias_variance,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise C.ConfigError("--jobs must be >= 1")
        cfg = C.load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except (C.ConfigError, InputError) as exc:
        print(f"dulda: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"dulda: training aborted: {exc}", file=sys.stderr)
        return 3
    except EvaluationError as exc:
        print(f"dulda: evaluation error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
