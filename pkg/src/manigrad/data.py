"""Procedural datasets, baseline augmentation and analytic test manifolds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .io import ntf_read, ntf_write, read_json, write_json
from .rng import Rng

IMAGE_SHAPE = (32, 32)
SHAPE_NAMES = ("disk", "square", "cross", "triangle")
SUPERSAMPLE = 4


@dataclass
class Dataset:
    inputs: np.ndarray            # [n, D] in [-1, 1]
    labels: np.ndarray            # [n] int
    num_classes: int
    provenance: dict = field(default_factory=dict)
    image_shape: tuple = IMAGE_SHAPE

    def __len__(self):
        return len(self.labels)

    @property
    def baseline_label(self) -> int:
        """Label reserved for augmented black/white images."""
        return self.num_classes

    def class_mask(self) -> np.ndarray:
        return self.labels < self.num_classes

    def save(self, directory) -> None:
        d = Path(directory)
        ntf_write(d / "inputs.ntf", self.inputs)
        ntf_write(d / "labels.ntf", self.labels.astype(np.float64))
        write_json(d / "dataset.json", {
            "num_classes": self.num_classes,
            "image_shape": list(self.image_shape),
            "provenance": self.provenance,
        })

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        meta = read_json(d / "dataset.json")
        return cls(ntf_read(d / "inputs.ntf"), ntf_read(d / "labels.ntf").astype(np.int64),
                   meta["num_classes"], meta["provenance"], tuple(meta["image_shape"]))


def _inside(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if kind == "disk":
        return u * u + v * v <= 1.0
    if kind == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if kind == "cross":
        return ((np.abs(u) <= 1.0) & (np.abs(v) <= 0.32)) | ((np.abs(u) <= 0.32) & (np.abs(v) <= 1.0))
    if kind == "triangle":
        # equilateral triangle inscribed in the unit circle, apex up
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = math.pi / 2 + 2 * math.pi * k / 3 + math.pi
            inside &= u * math.cos(a) + v * math.sin(a) <= 0.5
        return inside
    raise ValueError(f"unknown shape {kind!r}")


def render_shape(kind, cx, cy, radius, angle, size=IMAGE_SHAPE[0]) -> np.ndarray:
    """Anti-aliased shape on a black (-1) background, white (+1) foreground."""
    ss = SUPERSAMPLE
    coords = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    cover = _inside(kind, u, v).reshape(size, ss, size, ss).mean(axis=(1, 3))
    return -1.0 + 2.0 * cover


def gen_shapes(n: int, classes: int = 4, seed: int = 0) -> Dataset:
    """32x32 grayscale shapes; labels assigned round-robin."""
    if not 1 <= classes <= len(SHAPE_NAMES):
        raise ValueError(f"classes must be in 1..{len(SHAPE_NAMES)}")
    rng = Rng(seed)
    params = rng.uniform((n, 4))
    images = np.empty((n, IMAGE_SHAPE[0] * IMAGE_SHAPE[1]))
    labels = np.arange(n) % classes
    for i in range(n):
        cx, cy = 11.0 + 10.0 * params[i, 0], 11.0 + 10.0 * params[i, 1]
        radius = 6.0 + 3.0 * params[i, 2]
        angle = 2.0 * math.pi * params[i, 3]
        images[i] = render_shape(SHAPE_NAMES[labels[i]], cx, cy, radius, angle).reshape(-1)
    prov = {"generator": "shapes", "n": n, "classes": classes, "seed": seed}
    return Dataset(images, labels, classes, prov)


def gen_blob(n: int, seed: int = 0) -> Dataset:
    """One-factor set: a Gaussian bump sliding horizontally; label = left/right half."""
    rng = Rng(seed)
    pos = 8.0 + 16.0 * rng.uniform(n)
    yy, xx = np.meshgrid(np.arange(32) + 0.5, np.arange(32) + 0.5, indexing="ij")
    images = np.empty((n, 1024))
    for i, p in enumerate(pos):
        bump = np.exp(-((xx - p) ** 2 + (yy - 16.0) ** 2) / (2 * 3.0 ** 2))
        images[i] = (-1.0 + 2.0 * bump).reshape(-1)
    labels = (pos >= 16.0).astype(np.int64)
    return Dataset(images, labels, 2, {"generator": "blob", "n": n, "seed": seed})


GENERATORS = {"shapes": gen_shapes, "blob": lambda n, classes=2, seed=0: gen_blob(n, seed)}


def augment_baselines(ds: Dataset, fraction: float) -> Dataset:
    """Append constant black (-1) and white (+1) images with the reserved label."""
    if fraction < 0:
        raise ValueError("fraction must be non-negative")
    m = int(round(fraction * len(ds)))
    if m == 0:
        return ds
    extra = np.where((np.arange(m) % 2 == 0)[:, None], -1.0, 1.0) * np.ones((m, ds.inputs.shape[1]))
    inputs = np.concatenate([ds.inputs, extra])
    labels = np.concatenate([ds.labels, np.full(m, ds.baseline_label)])
    prov = dict(ds.provenance, baseline_fraction=fraction)
    return Dataset(inputs, labels, ds.num_classes, prov, ds.image_shape)


def baseline_image(kind: str, dim: int = 1024) -> np.ndarray:
    if kind == "black":
        return -np.ones(dim)
    if kind == "white":
        return np.ones(dim)
    raise ValueError(f"unknown baseline {kind!r}")


# ---------------------------------------------------------------------------
# analytic decoders: smooth maps [n, d] -> [n, D] built from autodiff primitives


@dataclass
class AnalyticDecoder:
    name: str
    in_dim: int
    out_dim: int
    fn: object
    metric: object  # closed-form G(z) for a single point

    def __call__(self, z):
        return self.fn(z)


def _col(z, k):
    return ad.reshape(z[:, k], (z.shape[0], 1))


def identity_decoder(d: int = 2) -> AnalyticDecoder:
    return AnalyticDecoder("identity", d, d, lambda z: ad.as_tensor(z), lambda z: np.eye(d))


def linear_decoder(A) -> AnalyticDecoder:
    A = np.asarray(A, dtype=np.float64)
    At = ad.Tensor(A.T)
    return AnalyticDecoder("linear", A.shape[1], A.shape[0], lambda z: ad.matmul(ad.as_tensor(z), At),
                           lambda z: A.T @ A)


def _sphere(z):
    z = ad.as_tensor(z)
    th, ph = _col(z, 0), _col(z, 1)
    st = ad.sin(th)
    return ad.concat([st * ad.cos(ph), st * ad.sin(ph), ad.cos(th)], axis=1)


def sphere_decoder() -> AnalyticDecoder:
    """Unit-sphere chart (theta, phi) -> (sin t cos p, sin t sin p, cos t)."""
    return AnalyticDecoder("sphere", 2, 3, _sphere,
                           lambda z: np.diag([1.0, math.sin(z[0]) ** 2]))


def _swiss_roll(z):
    z = ad.as_tensor(z)
    t, h = _col(z, 0), _col(z, 1)
    return ad.concat([t * ad.cos(t), h, t * ad.sin(t)], axis=1)


def swiss_roll_decoder() -> AnalyticDecoder:
    return AnalyticDecoder("swiss_roll", 2, 3, _swiss_roll,
                           lambda z: np.diag([1.0 + z[0] ** 2, 1.0]))


def analytic_decoders() -> dict:
    return {
        "identity": identity_decoder(2),
        "sphere": sphere_decoder(),
        "swiss_roll": swiss_roll_decoder(),
    }


def great_circle_distance(a, b) -> float:
    """Arc length on the unit sphere between chart points (theta, phi)."""
    (t1, p1), (t2, p2) = a, b
    c = math.cos(t1) * math.cos(t2) + math.sin(t1) * math.sin(t2) * math.cos(p2 - p1)
    return math.acos(max(-1.0, min(1.0, c)))
