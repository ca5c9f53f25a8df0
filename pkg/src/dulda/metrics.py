"""Image quality metrics and the bias/variance protocol."""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_IDENTICAL = math.inf


def _pair(x_hat, x_true):
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    if x_hat.shape != x_true.shape:
        raise ValueError(f"shape mismatch: {x_hat.shape} vs {x_true.shape}")
    if not np.any(x_true):
        raise ValueError("reference image is identically zero")
    return x_hat, x_true


def rmse(x_hat, x_true):
    """Relative RMSE ``||x_hat - x_true|| / ||x_true||``."""
    x_hat, x_true = _pair(x_hat, x_true)
    return float(np.linalg.norm(x_hat - x_true) / np.linalg.norm(x_true))


def psnr(x_hat, x_true):
    """``20 log10(max(x_true) / rms error)``; ``inf`` for identical images."""
    x_hat, x_true = _pair(x_hat, x_true)
    err = math.sqrt(float(np.mean((x_hat - x_true) ** 2)))
    if err == 0.0:
        return PSNR_IDENTICAL
    return 20.0 * math.log10(float(x_true.max()) / err)


def ssim(x_hat, x_true, sigma=1.5, radius=5, k1=0.01, k2=0.03):
    """Mean SSIM with an 11x11 Gaussian window; dynamic range ``max(x_true)``."""
    x_hat, x_true = _pair(x_hat, x_true)
    L = float(x_true.max())
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    trunc = radius / sigma

    def blur(a):
        return gaussian_filter(a, sigma=sigma, truncate=trunc, mode="reflect")

    mu_x, mu_y = blur(x_hat), blur(x_true)
    sxx = blur(x_hat * x_hat) - mu_x * mu_x
    syy = blur(x_true * x_true) - mu_y * mu_y
    sxy = blur(x_hat * x_true) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def crc(x_hat, x_true, roi):
    """Contrast recovery per tumor ROI against the background ROI."""
    x_hat, x_true = _pair(x_hat, x_true)
    bkg = roi.background_mask
    b_hat, b_true = x_hat[bkg].mean(), x_true[bkg].mean()
    if b_hat == 0 or b_true == 0:
        raise ValueError("background ROI mean is zero")
    out = []
    for m in roi.tumor_masks:
        true_contrast = x_true[m].mean() / b_true - 1.0
        if true_contrast == 0:
            raise ValueError("tumor ROI has no true contrast against background")
        out.append(float((x_hat[m].mean() / b_hat - 1.0) / true_contrast))
    return out


def bias_variance(reconstructions, x_true):
    """Normalised bias of the mean reconstruction and mean normalised spread."""
    recs = np.asarray(reconstructions, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    if recs.ndim != x_true.ndim + 1 or recs.shape[1:] != x_true.shape:
        raise ValueError("reconstructions must be a stack of images shaped like x_true")
    if recs.shape[0] < 2:
        raise ValueError("need at least two realizations")
    mean = recs.mean(axis=0)
    bias = float(np.linalg.norm(mean - x_true) / np.linalg.norm(x_true))
    spread = np.sum((recs - mean) ** 2, axis=tuple(range(1, recs.ndim)))
    variance = float(np.mean(spread) / np.sum(mean * mean))
    return bias, variance


@dataclass
class EvalReport:
    method: str
    psnr: float
    psnr_std: float
    ssim: float
    ssim_std: float
    rmse: float
    rmse_std: float
    crc: list
    bias: float = math.nan
    variance: float = math.nan
    slices: list = field(default_factory=list)

    @property
    def crc_mean(self):
        return float(np.mean(self.crc)) if self.crc else math.nan

    def to_json(self):
        d = asdict(self)
        d["crc_mean"] = self.crc_mean
        return json.dumps(d, indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serialisable: {type(obj)!r}")


def _finite_mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    if np.all(np.isinf(arr)):
        return math.inf, 0.0
    arr = arr[np.isfinite(arr)]
    return float(arr.mean()), float(arr.std())


def evaluate(method, recons, truths, rois=None, names=None):
    """Per-slice PSNR/SSIM/RMSE/CRC and their means over slices."""
    if len(recons) != len(truths):
        raise ValueError("reconstructions and truths differ in number")
    rows, crcs = [], []
    for i, (xh, xt) in enumerate(zip(recons, truths)):
        row = {"slice": names[i] if names else i, "psnr": psnr(xh, xt),
               "ssim": ssim(xh, xt), "rmse": rmse(xh, xt)}
        if rois is not None and rois[i] is not None:
            row["crc"] = crc(xh, xt, rois[i])
            crcs.append(row["crc"])
        rows.append(row)
    p, ps = _finite_mean_std([r["psnr"] for r in rows])
    s, ss = _finite_mean_std([r["ssim"] for r in rows])
    e, es = _finite_mean_std([r["rmse"] for r in rows])
    crc_mean = list(np.mean(np.asarray(crcs), axis=0)) if crcs else []
    return EvalReport(method=method, psnr=p, psnr_std=ps, ssim=s, ssim_std=ss, rmse=e,
                      rmse_std=es, crc=[float(c) for c in crc_mean], slices=rows)


def format_table(reports):
    """Aligned text table with columns PSNR, SSIM, RMSE, CRC, Bias, Variance."""
    head = ["Method", "PSNR(dB)", "SSIM", "RMSE", "CRC", "Bias", "Variance"]
    lines = []
    for r in reports:
        lines.append([
            r.method,
            f"{r.psnr:.2f} ±{r.psnr_std:.2f}",
            f"{r.ssim:.3f} ±{r.ssim_std:.3f}",
            f"{r.rmse:.3f} ±{r.rmse_std:.3f}",
            f"{r.crc_mean:.4f}",
            f"{r.bias:.4f}",
            f"{r.variance:.4f}",
        ])
    widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(head)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*head), "  ".join("-" * w for w in widths)]
    out.extend(fmt.format(*l) for l in lines)
    return "\n".join(out)
