"""End-to-end pipeline: data -> VAE -> classifier on reconstructions -> explanations.

``Explainer`` bundles the trained models with the method registry used by the
CLI, the robustness table and the metric table.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attribution as attr
from .attacks import AttackConfig, evaluate_robustness, targeted_attack
from .data import Dataset, augment_baselines, baseline_image, gen_shapes
from .geodesic import SolverOptions, geodesic_solve
from .metrics import MetricConfig, infidelity, max_sensitivity
from .models import (VAE, ClassLogit, Network, TrainConfig, accuracy, predicted_class,
                     train_classifier, train_vae)
from .rng import Rng

log = logging.getLogger(__name__)

METHODS = ("ig", "mig", "eig", "blurig", "smoothig", "saliency", "ixg", "gbp")
PATH_METHODS = ("ig", "mig", "eig", "blurig", "smoothig")


@dataclass
class PipelineConfig:
    n: int = 2000
    classes: int = 4
    seed: int = 0
    latent_dim: int = 8
    baseline_fraction: float = 0.05
    vae: TrainConfig = field(default_factory=TrainConfig)
    classifier: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50))


@dataclass
class Pipeline:
    dataset: Dataset
    vae: VAE
    classifier: Network
    recon: np.ndarray
    stats: dict


def reconstruction_mse(vae: VAE, inputs) -> float:
    return float(np.mean((vae.reconstruct(inputs) - inputs) ** 2))


def train_classifier_on_reconstructions(vae: VAE, ds: Dataset, config: TrainConfig):
    keep = ds.class_mask()
    recon = vae.reconstruct(ds.inputs[keep])
    net, hist = train_classifier(recon, ds.labels[keep], ds.num_classes, config)
    return net, recon, hist


def run_pipeline(cfg: PipelineConfig) -> Pipeline:
    ds = gen_shapes(cfg.n, cfg.classes, cfg.seed)
    aug = augment_baselines(ds, cfg.baseline_fraction)
    vae_cfg = TrainConfig(**dict(asdict(cfg.vae), seed=cfg.seed))
    vae, vae_hist = train_vae(aug.inputs, vae_cfg, latent_dim=cfg.latent_dim)
    clf_cfg = TrainConfig(**dict(asdict(cfg.classifier), seed=cfg.seed))
    clf, recon, clf_hist = train_classifier_on_reconstructions(vae, ds, clf_cfg)
    black = baseline_image("black", ds.inputs.shape[1])
    stats = {
        "recon_mse": reconstruction_mse(vae, ds.inputs),
        "black_mse": reconstruction_mse(vae, black[None]),
        "white_mse": reconstruction_mse(vae, -black[None]),
        "train_accuracy": accuracy(clf, recon, ds.labels),
        "vae_history": vae_hist,
        "classifier_history": clf_hist,
    }
    return Pipeline(ds, vae, clf, recon, stats)


class Explainer:
    """Attribution methods over one trained VAE + classifier pair.

    Inputs are images of ``image_shape``.  Path methods explain the
    softplus-swap classifier (smooth, twice differentiable) at the class the
    native classifier predicts for the input.
    """

    def __init__(self, vae: VAE, classifier: Network, n_steps: int = 32, geodesic_steps: int = 16,
                 baseline: str = "black", image_shape=(32, 32), solver: SolverOptions | None = None,
                 noise_sigma: float = 0.2, smooth_samples: int = 16, max_sigma: float = 8.0, seed: int = 0):
        self.vae = vae
        self.native = classifier.with_mode("native")
        self.smooth = classifier.with_mode("softplus")
        self.n_steps = n_steps
        self.geodesic_steps = geodesic_steps
        self.image_shape = tuple(image_shape)
        self.baseline = baseline_image(baseline, int(np.prod(image_shape))).reshape(image_shape)
        self.baseline_name = baseline
        self.solver = solver or SolverOptions()
        self.noise_sigma = noise_sigma
        self.smooth_samples = smooth_samples
        self.max_sigma = max_sigma
        self.seed = seed
        self.z0 = vae.encode_mean(self.baseline.reshape(-1))

    def F(self, x, cls=None) -> ClassLogit:
        if cls is None:
            cls = predicted_class(self.native, x)
        return ClassLogit(self.smooth, cls)

    def geodesic(self, x):
        return geodesic_solve(self.z0, self.vae.encode_mean(np.reshape(x, -1)), self.vae.decoder,
                              T=self.geodesic_steps, options=self.solver)

    def explain(self, method: str, x, cls=None) -> attr.AttributionMap:
        x = np.asarray(x, dtype=np.float64).reshape(self.image_shape)
        F = self.F(x, cls)
        N = self.n_steps
        if method == "ig":
            out = attr.integrated_gradients(F, x, self.baseline, N, label=self.baseline_name)
        elif method == "smoothig":
            out = attr.smooth_ig(F, x, self.baseline, N, self.noise_sigma, self.smooth_samples,
                                 self.seed, label=self.baseline_name)
        elif method == "blurig":
            out = attr.blur_ig(F, x, self.max_sigma, N)
        elif method == "eig":
            out = attr.eig(F, self.vae.decoder, self.z0, self.vae.encode_mean(x.reshape(-1)), N,
                           shape=self.image_shape)
        elif method == "mig":
            curve, report = self.geodesic(x)
            out = attr.mig(F, self.vae.decoder, curve, N, shape=self.image_shape)
            out.meta["geodesic"] = {"converged": report.converged, "iterations": report.iterations,
                                    "status": report.status, "energy": report.energy}
        elif method == "saliency":
            out = attr.saliency(F, x)
        elif method == "ixg":
            out = attr.input_x_gradient(F, x)
        elif method == "gbp":
            out = attr.guided_backprop(ClassLogit(self.native, F.cls), x)
        else:
            raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        out.meta["class"] = F.cls
        return out

    def path_start(self, method: str, x) -> np.ndarray:
        """Start point of the method's attribution path (its effective baseline)."""
        x = np.asarray(x, dtype=np.float64).reshape(self.image_shape)
        if method in ("mig", "eig"):
            return self.vae.decode(self.z0).reshape(self.image_shape)
        if method == "blurig":
            return attr.blur_path(x, self.max_sigma, 1)[0]
        return self.baseline

    def method_fn(self, method: str, cls=None):
        return lambda x: self.explain(method, x, cls)


def held_out_inputs(pipe: Pipeline, count: int, seed: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Reconstructions of fresh shapes that the classifier labels correctly."""
    fresh = gen_shapes(4 * count, pipe.dataset.num_classes, seed=seed + 10_000)
    recon = pipe.vae.reconstruct(fresh.inputs)
    ok = pipe.classifier.predict(recon).argmax(axis=1) == fresh.labels
    idx = np.flatnonzero(ok)[:count]
    return recon[idx].reshape((-1,) + pipe.dataset.image_shape), fresh.labels[idx]


def metric_table(ex: Explainer, inputs, methods=("ig", "smoothig", "blurig", "eig", "mig"),
                 metrics=("infd", "sensmax"), config: MetricConfig | None = None) -> list[dict]:
    cfg = config or MetricConfig()
    h = cfg.hash()
    rows = []
    for i, x in enumerate(inputs):
        cls = predicted_class(ex.native, x)
        for m in methods:
            phi = ex.explain(m, x, cls)
            if "infd" in metrics:
                value, se = infidelity(ex.F(x, cls), phi, x, ex.path_start(m, x), cfg)
                rows.append({"input_id": i, "method": m, "metric": "infd", "value": value,
                             "stderr": se, "config_hash": h})
            if "sensmax" in metrics:
                value = max_sensitivity(ex.method_fn(m, cls), x, cfg, reference=phi)
                rows.append({"input_id": i, "method": m, "metric": "sensmax", "value": value,
                             "stderr": 0.0, "config_hash": h})
            log.info("metrics input %d %s done", i, m)
    return rows


def pick_targets(labels, seed: int = 0) -> np.ndarray:
    """For each input, an index of another input with a different label."""
    rng = Rng(seed)
    out = []
    for i, y in enumerate(labels):
        choices = np.flatnonzero(labels != y)
        out.append(int(choices[rng.integers(len(choices))]) if len(choices) else (i + 1) % len(labels))
    return np.array(out)


def robustness_table(ex: Explainer, inputs, labels, config: AttackConfig | None = None,
                     methods=("ig", "smoothig", "mig"), path=None):
    """IG-targeted attacks on every input; SSI of each method before/after."""
    cfg = config or AttackConfig()
    targets = pick_targets(labels, cfg.seed)
    pairs, results = [], []
    for i, x in enumerate(inputs):
        res = targeted_attack(ex.native, x, inputs[targets[i]], ex.baseline,
                              AttackConfig(**dict(asdict(cfg), seed=cfg.seed + i)))
        results.append(res)
        pairs.append((i, x, res))
        log.info("attack %d: distance %.4g -> %.4g, preserved=%s", i, res.initial_distance,
                 res.attribution_distance, res.class_preserved)
    rows = evaluate_robustness({m: ex.method_fn(m) for m in methods}, pairs, path)
    return rows, results
