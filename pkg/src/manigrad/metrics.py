"""Explanation quality metrics: infidelity, max-sensitivity and SSIM."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .attribution import model_values
from .errors import ShapeError
from .io import csv_write
from .rng import Rng

METRICS_HEADER = ("input_id", "method", "metric", "value", "stderr", "config_hash")


@dataclass
class MetricConfig:
    sigma: float = 0.2             # infidelity noise std
    samples: int = 64              # infidelity Monte-Carlo draws
    radius: float = 0.1            # sensitivity L-inf radius
    sens_samples: int = 32
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    percentile: float = 99.0       # map normalisation before SSIM
    seed: int = 0

    def validate(self):
        if self.sigma <= 0 or self.samples < 1 or self.sens_samples < 1 or self.radius < 0:
            raise ValueError("need sigma > 0, radius >= 0 and at least one sample")
        if self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd")

    def hash(self) -> str:
        return config_hash(asdict(self))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


def infidelity(F, phi, x, x0, config: MetricConfig | None = None) -> tuple[float, float]:
    """Monte-Carlo E[(<xi, phi> - (F(x) - F(x - xi)))^2] with xi = x - (x0 + eps).

    Returns (mean, standard error).
    """
    cfg = config or MetricConfig()
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    phi = np.asarray(getattr(phi, "scores", phi), dtype=np.float64)
    if not (x.shape == x0.shape == phi.shape):
        raise ShapeError("infidelity", x.shape, x0.shape, phi.shape)
    eps = Rng(cfg.seed).normal((cfg.samples,) + x.shape) * cfg.sigma
    xi = x - (x0 + eps)
    fx = model_values(F, x[None])[0]
    f_pert = model_values(F, x - xi)
    dots = np.sum((xi * phi).reshape(cfg.samples, -1), axis=1)
    err = (dots - (fx - f_pert)) ** 2
    return float(err.mean()), float(err.std(ddof=1) / np.sqrt(cfg.samples)) if cfg.samples > 1 else 0.0


def max_sensitivity(explain, x, config: MetricConfig | None = None, reference=None) -> float:
    """max over uniform L-inf-ball samples of ||explain(x + delta) - explain(x)||.

    ``explain`` maps an input to an attribution (map or array).  The draws
    depend only on the seed and shape, so nested radii share directions.
    """
    cfg = config or MetricConfig()
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    if cfg.radius == 0:
        return 0.0

    base = _scores(explain(x)) if reference is None else _scores(reference)
    unit = Rng(cfg.seed).uniform((cfg.sens_samples,) + x.shape, -1.0, 1.0)
    worst = 0.0
    for u in unit:
        worst = max(worst, float(np.linalg.norm(_scores(explain(x + cfg.radius * u)) - base)))
    return worst


def _scores(m) -> np.ndarray:
    return np.asarray(getattr(m, "scores", m), dtype=np.float64)


def ssim(a, b, config: MetricConfig | None = None) -> float:
    """Mean local SSIM with a Gaussian window, unit dynamic range.

    Local statistics use a truncated Gaussian window of ``ssim_window`` taps;
    pixels closer than half a window to the border are excluded from the mean.
    """
    cfg = config or MetricConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError("ssim", a.shape, b.shape, detail="need two images of equal 2-D shape")
    if min(a.shape) < cfg.ssim_window:
        raise ShapeError("ssim", a.shape, detail=f"image smaller than the {cfg.ssim_window}px window")
    radius = (cfg.ssim_window - 1) // 2
    trunc = (radius + 0.5) / cfg.ssim_sigma - 1e-9

    def filt(img):
        return gaussian_filter(img, cfg.ssim_sigma, truncate=trunc, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    c1, c2 = cfg.k1 ** 2, cfg.k2 ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    return float(s[radius:-radius, radius:-radius].mean())


def write_metric_rows(path, rows) -> None:
    csv_write(path, rows, METRICS_HEADER)


def summarize(rows) -> dict:
    """Per (metric, method) mean and standard error over inputs."""
    groups = {}
    for r in rows:
        groups.setdefault((r["metric"], r["method"]), []).append(float(r["value"]))
    out = {}
    for (metric, method), vals in sorted(groups.items()):
        v = np.array(vals)
        se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
        out.setdefault(metric, {})[method] = {"mean": float(v.mean()), "stderr": se, "n": len(v)}
    return out
