"""Gradient and path-based feature attribution.

``F`` is any callable mapping a Tensor of flattened inputs [n, D] to one
score per row [n] (see ``models.ClassLogit``).  Every path method reduces to
``path_attribution`` over a discretised path x_0..x_N.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .geodesic import LatentCurve, curve_init_linear, decode_points, resample
from .rng import Rng

CHUNK = 512


@dataclass
class AttributionMap:
    scores: np.ndarray
    method: str
    baseline: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise FloatingPointError(f"{self.method}: non-finite attribution scores")

    @property
    def shape(self):
        return self.scores.shape

    def normalized(self, percentile: float = 99.0) -> np.ndarray:
        return normalize_map(self.scores, percentile)


@dataclass
class PathSpec:
    kind: str  # linear-input | latent-linear | latent-geodesic | blur
    steps: int
    baseline: str = ""
    curve: LatentCurve | None = None

    def __post_init__(self):
        if self.steps < 2 and self.kind != "linear-input":
            raise ValueError("a path needs at least 2 steps")
        if self.kind.startswith("latent") and self.curve is None:
            raise ValueError("latent paths carry a LatentCurve")


def normalize_map(scores, percentile: float = 99.0) -> np.ndarray:
    """|scores| clipped at the given percentile and scaled to [0, 1]."""
    a = np.abs(np.asarray(scores, dtype=np.float64))
    top = np.percentile(a, percentile)
    if top <= 0:
        top = a.max()
    if top <= 0:
        return np.zeros_like(a)
    return np.clip(a / top, 0.0, 1.0)


def model_values(F, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    flat = points.reshape(len(points), -1)
    with ad.no_grad():
        return np.concatenate([F(ad.Tensor._wrap(flat[i:i + CHUNK])).data
                               for i in range(0, len(flat), CHUNK)])


def model_gradients(F, points) -> np.ndarray:
    """Row-wise dF/dx for a batch of inputs (rows are independent)."""
    points = np.asarray(points, dtype=np.float64)
    flat = points.reshape(len(points), -1)
    out = []
    for i in range(0, len(flat), CHUNK):
        X = ad.Tensor(flat[i:i + CHUNK], requires_grad=True)
        scores = F(X)
        if scores.shape != (X.shape[0],):
            raise ShapeError("model", scores.shape, detail="F must return one value per row")
        out.append(ad.grad(ad.sum(scores), X).data)
    return np.concatenate(out).reshape(points.shape)


def path_attribution(F, points, rule: str = "left", method="path", baseline="") -> AttributionMap:
    """Riemann sum of grad F(x_i) * (x_{i+1} - x_i) over the path points."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim < 2 or len(points) < 2:
        raise ShapeError("path_attribution", points.shape, detail="need >= 2 points")
    steps = np.diff(points, axis=0)
    if rule == "left":
        where = points[:-1]
    elif rule == "midpoint":
        where = 0.5 * (points[:-1] + points[1:])
    else:
        raise ValueError(f"unknown quadrature rule {rule!r}")
    grads = model_gradients(F, where)
    scores = np.sum(grads * steps, axis=0)
    ends = model_values(F, points[[0, -1]])
    meta = {
        "steps": len(points) - 1,
        "rule": rule,
        "f_start": float(ends[0]),
        "f_end": float(ends[1]),
        "completeness_residual": float(abs(scores.sum() - (ends[1] - ends[0]))),
    }
    return AttributionMap(scores, method, baseline, meta)


def linear_path(x, baseline, n_steps: int) -> np.ndarray:
    t = np.arange(n_steps + 1).reshape((-1,) + (1,) * np.ndim(x)) / n_steps
    return baseline + t * (x - baseline)


def integrated_gradients(F, x, baseline, n_steps: int = 32, rule="left", label="") -> AttributionMap:
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise ShapeError("integrated_gradients", x.shape, baseline.shape)
    out = path_attribution(F, linear_path(x, baseline, n_steps), rule, "ig", label)
    out.meta["path"] = "linear-input"
    return out


def smooth_ig(F, x, baseline, n_steps: int = 32, noise_sigma: float = 0.2, samples: int = 16,
              seed: int = 0, label="") -> AttributionMap:
    """Mean of IG maps over Gaussian-perturbed copies of the input."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise ShapeError("smooth_ig", x.shape, baseline.shape)
    noise = Rng(seed).normal((samples,) + x.shape) * noise_sigma
    paths = np.concatenate([linear_path(x + e, baseline, n_steps)[:-1] for e in noise])
    grads = model_gradients(F, paths).reshape((samples, n_steps) + x.shape)
    scores = np.mean((x + noise - baseline) * grads.mean(axis=1), axis=0)
    meta = {"steps": n_steps, "samples": samples, "noise_sigma": noise_sigma, "seed": seed,
            "path": "linear-input"}
    return AttributionMap(scores, "smoothig", label, meta)


def blur_path(x, max_sigma: float, n_steps: int) -> np.ndarray:
    """Images blurred with sigma decreasing uniformly from max_sigma to 0."""
    sigmas = max_sigma * (1.0 - np.arange(n_steps + 1) / n_steps)
    with ad.no_grad():
        return np.stack([ad.gaussian_blur(x, s).data for s in sigmas])


def blur_ig(F, x, max_sigma: float = 8.0, n_steps: int = 32, rule="left") -> AttributionMap:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("blur_ig", x.shape, detail="needs a 2-D image")
    out = path_attribution(F, blur_path(x, max_sigma, n_steps), rule, "blurig", f"blur{max_sigma:g}")
    out.meta.update(path="blur", max_sigma=max_sigma)
    return out


def _latent_attribution(F, decoder, curve: LatentCurve, n_steps, shape, method, rule):
    if n_steps is not None and n_steps != curve.T:
        curve = resample(curve, n_steps)
    points = decode_points(decoder, curve.points)
    if shape is not None:
        points = points.reshape((len(points),) + tuple(shape))
    return path_attribution(F, points, rule, method, "decoded")


def mig(F, decoder, curve: LatentCurve, n_steps: int | None = None, shape=None,
        latent_dim: int | None = None, rule="left") -> AttributionMap:
    """Attribution along the decoded geodesic g(z_0) .. g(z_T).

    With ``n_steps`` different from the curve's T the latent polyline is
    resampled uniformly before decoding.
    """
    if latent_dim is not None and curve.dim != latent_dim:
        raise ShapeError("mig", curve.points.shape, (None, latent_dim))
    out = _latent_attribution(F, decoder, curve, n_steps, shape, "mig", rule)
    out.meta["path"] = "latent-geodesic"
    return out


def eig(F, decoder, z0, zT, n_steps: int = 32, shape=None, rule="left") -> AttributionMap:
    """Attribution along the decoded straight latent segment."""
    out = _latent_attribution(F, decoder, curve_init_linear(z0, zT, n_steps), None, shape, "eig", rule)
    out.meta["path"] = "latent-linear"
    return out


def saliency(F, x) -> AttributionMap:
    g = model_gradients(F, np.asarray(x, dtype=np.float64)[None])[0]
    return AttributionMap(np.abs(g), "saliency")


def input_x_gradient(F, x) -> AttributionMap:
    x = np.asarray(x, dtype=np.float64)
    return AttributionMap(model_gradients(F, x[None])[0] * x, "ixg")


def guided_backprop(F, x) -> AttributionMap:
    """Gradient with negative signals zeroed at every ReLU.

    ``F`` should be a ``ClassLogit``; its network is switched to guided mode.
    """
    net = getattr(F, "net", None)
    if net is not None:
        F = type(F)(net.with_mode("guided"), F.cls)
    g = model_gradients(F, np.asarray(x, dtype=np.float64)[None])[0]
    return AttributionMap(g, "gbp")
