"""Encoder, decoder and classifier networks and their training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, TrainingDivergedError, UntrainedModelError
from .io import mgm_read, mgm_write
from .rng import Rng

log = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "relu", "softplus", "tanh", "elu", "silu")
SMOOTH = ("identity", "softplus", "tanh", "elu", "silu")
MODES = ("native", "softplus", "guided")
VAE_HIDDEN = (512, 256)
CLASSIFIER_HIDDEN = (256, 128)


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"


class Network:
    """Stack of affine layers with per-layer activations.

    Weights are read-only arrays.  ``with_mode`` returns a view sharing the
    same arrays, so switching between native, softplus-swap and
    guided-backprop evaluation never touches the parameters.
    """

    def __init__(self, specs, params, mode="native", beta=10.0, trained=True):
        self.specs = tuple(specs)
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        frozen = []
        for w, b in params:
            w, b = np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)
            w.flags.writeable = False
            b.flags.writeable = False
            frozen.append((w, b))
        self.params = tuple(frozen)
        self.mode = mode
        self.beta = float(beta)
        self.trained = trained
        self._tensors = tuple((ad.Tensor._wrap(w), ad.Tensor._wrap(b.reshape(1, -1))) for w, b in self.params)

    @property
    def in_dim(self):
        return self.specs[0].in_dim

    @property
    def out_dim(self):
        return self.specs[-1].out_dim

    def with_mode(self, mode: str, beta: float | None = None) -> "Network":
        net = Network.__new__(Network)
        net.specs, net.params, net._tensors = self.specs, self.params, self._tensors
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        net.mode, net.beta, net.trained = mode, self.beta if beta is None else float(beta), self.trained
        return net

    def __call__(self, x):
        return forward(self.specs, self._tensors, x, self.mode, self.beta)

    def predict(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self(np.atleast_2d(x)).data

    def state(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(self.params):
            out[f"{i}.weight"] = w
            out[f"{i}.bias"] = b
        return out


def _activate(x, name, mode, beta):
    if name == "identity":
        return x
    if name == "relu":
        if mode == "softplus":
            return ad.scale(ad.softplus(ad.scale(x, beta)), 1.0 / beta)
        if mode == "guided":
            return ad.guided_relu(x)
        return ad.relu(x)
    return {"softplus": ad.softplus, "tanh": ad.tanh, "elu": ad.elu, "silu": ad.silu}[name](x)


def forward(specs, tensors, x, mode="native", beta=10.0):
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != specs[0].in_dim:
        raise ShapeError("network", x.shape, (None, specs[0].in_dim))
    n = x.shape[0]
    for spec, (w, b) in zip(specs, tensors):
        x = ad.add(ad.matmul(x, w), ad.broadcast_to(b, (n, spec.out_dim)))
        x = _activate(x, spec.activation, mode, beta)
    return x


def init_network(specs, rng: Rng, trained=False) -> Network:
    params = []
    for s in specs:
        gain = 2.0 if s.activation == "relu" else 1.0
        w = rng.normal((s.in_dim, s.out_dim)) * math.sqrt(gain / s.in_dim)
        params.append((w, np.zeros(s.out_dim)))
    return Network(specs, params, trained=trained)


def mlp_specs(dims, hidden_act, out_act="identity"):
    return [LayerSpec(a, b, hidden_act if i < len(dims) - 2 else out_act)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]


# ---------------------------------------------------------------------------
# VAE


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    kl_weight: float = 1e-4
    feature_weight: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: str = "cosine"

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.kl_weight < 0 or self.feature_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch / self.epochs))


@dataclass
class VaeOutput:
    mu: object
    logvar: object
    reconstruction: object


@dataclass
class VAE:
    encoder: Network
    decoder: Network
    latent_dim: int
    feature_proj: np.ndarray
    trained: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def data_dim(self):
        return self.decoder.out_dim

    def _check(self):
        if not self.trained:
            raise UntrainedModelError("VAE has not been trained")

    def encode_mean(self, x) -> np.ndarray:
        """Posterior mean for one input [D] or a batch [n, D]; no sampling."""
        self._check()
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        with ad.no_grad():
            mu = self.encoder(np.atleast_2d(x)).data[:, : self.latent_dim]
        return mu[0] if single else mu

    def encoder_mean_fn(self, x):
        """Differentiable map [n, D] -> [n, d] (posterior mean)."""
        return ad.index(self.encoder(x), (slice(None), slice(0, self.latent_dim)))

    def decode(self, z) -> np.ndarray:
        self._check()
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z2 = np.atleast_2d(z)
        if z2.shape[1] != self.latent_dim:
            raise ShapeError("decode", z2.shape, (None, self.latent_dim))
        with ad.no_grad():
            out = self.decoder(z2).data
        return out[0] if single else out

    def reconstruct(self, x) -> np.ndarray:
        return self.decode(self.encode_mean(x))

    def __call__(self, x, eps=None) -> VaeOutput:
        """Differentiable pass; ``eps`` (same shape as mu) enables sampling."""
        h = self.encoder(x)
        d = self.latent_dim
        mu = ad.index(h, (slice(None), slice(0, d)))
        logvar = ad.index(h, (slice(None), slice(d, 2 * d)))
        z = mu if eps is None else ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), ad.as_tensor(eps)))
        return VaeOutput(mu, logvar, self.decoder(z))

    def save(self, path):
        tensors = {f"encoder.{k}": v for k, v in self.encoder.state().items()}
        tensors.update({f"decoder.{k}": v for k, v in self.decoder.state().items()})
        tensors["feature_proj"] = self.feature_proj
        specs = {"encoder": [asdict(s) for s in self.encoder.specs],
                 "decoder": [asdict(s) for s in self.decoder.specs]}
        meta = dict(self.meta, kind="vae", latentDim=self.latent_dim)
        mgm_write(path, specs, tensors, meta)


def build_vae(data_dim=1024, latent_dim=8, hidden=VAE_HIDDEN, seed=0, n_features=64) -> VAE:
    rng = Rng(seed)
    enc = init_network(mlp_specs([data_dim, *hidden, 2 * latent_dim], "silu"), rng.child(0))
    dec = init_network(mlp_specs([latent_dim, *reversed(hidden), data_dim], "elu", "tanh"), rng.child(1))
    proj = rng.child(2).normal((data_dim, n_features)) / math.sqrt(data_dim)
    return VAE(enc, dec, latent_dim, proj, trained=False)


def identity_vae(dim: int = 2) -> VAE:
    """VAE whose encoder mean and decoder are both the identity map (test model)."""
    enc_w = np.concatenate([np.eye(dim), np.zeros((dim, dim))], axis=1)
    enc = Network([LayerSpec(dim, 2 * dim)], [(enc_w, np.zeros(2 * dim))])
    dec = Network([LayerSpec(dim, dim)], [(np.eye(dim), np.zeros(dim))])
    return VAE(enc, dec, dim, np.eye(dim), True, {"name": "identity"})


def kl_divergence(mu, logvar):
    """Mean over the batch of KL(N(mu, exp(logvar)) || N(0, I))."""
    term = ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), ad.shift(logvar, 1.0))
    return ad.scale(ad.sum(term), 0.5 / mu.shape[0])


def vae_loss(x, out: VaeOutput, kl_weight=5e-4, feature_weight=0.5, feature_proj=None):
    """Pixel MSE + kl_weight * KL + feature_weight * MSE of fixed random features."""
    if kl_weight < 0 or feature_weight < 0:
        raise ValueError("loss weights must be non-negative")
    x = ad.as_tensor(x)
    rec = out.reconstruction
    if rec.shape != x.shape:
        raise ShapeError("vae_loss", x.shape, rec.shape)
    loss = ad.mean(ad.square(ad.sub(rec, x)))
    if kl_weight:
        loss = ad.add(loss, ad.scale(kl_divergence(out.mu, out.logvar), kl_weight))
    if feature_weight:
        if feature_proj is None:
            raise ValueError("feature loss needs a projection matrix")
        p = ad.Tensor._wrap(feature_proj)
        diff = ad.sub(ad.matmul(rec, p), ad.matmul(x, p))
        loss = ad.add(loss, ad.scale(ad.mean(ad.square(diff)), feature_weight))
    return loss


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def _flat_params(*nets):
    return [a for net in nets for wb in net.params for a in wb]


def _as_leaves(flat):
    return [ad.Tensor(p, requires_grad=True) for p in flat]


def _pairs(leaves):
    return [(leaves[i], ad.reshape(leaves[i + 1], (1, -1))) for i in range(0, len(leaves), 2)]


def _check_finite(value, epoch, step):
    if not np.isfinite(value):
        raise TrainingDivergedError(f"loss became {value} at epoch {epoch}, step {step}")


def train_vae(inputs: np.ndarray, config: TrainConfig, latent_dim=8, hidden=VAE_HIDDEN,
              vae: VAE | None = None):
    """Train encoder/decoder with Adam; returns (VAE, per-epoch mean loss)."""
    config.validate()
    inputs = np.asarray(inputs, dtype=np.float64)
    if vae is None:
        vae = build_vae(inputs.shape[1], latent_dim, hidden, seed=config.seed)
    enc_specs, dec_specs = vae.encoder.specs, vae.decoder.specs
    n_enc = 2 * len(enc_specs)
    flat = [p.copy() for p in _flat_params(vae.encoder, vae.decoder)]
    opt = Adam(flat, config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = Rng(config.seed).child(100)
    history = []
    n, d = len(inputs), vae.latent_dim
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for step, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            xb = ad.Tensor._wrap(inputs[idx])
            eps = rng.normal((len(idx), d))
            leaves = _as_leaves(flat)
            enc_t, dec_t = _pairs(leaves[:n_enc]), _pairs(leaves[n_enc:])
            h = forward(enc_specs, enc_t, xb)
            mu = ad.index(h, (slice(None), slice(0, d)))
            logvar = ad.index(h, (slice(None), slice(d, 2 * d)))
            z = ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), ad.Tensor._wrap(eps)))
            out = VaeOutput(mu, logvar, forward(dec_specs, dec_t, z))
            loss = vae_loss(xb, out, config.kl_weight, config.feature_weight, vae.feature_proj)
            _check_finite(loss.item(), epoch, step)
            grads = [g.data for g in ad.grad(loss, leaves)]
            flat = opt.step(flat, grads)
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
        log.info("vae epoch %d loss %.5f", epoch, history[-1])
    enc = Network(enc_specs, list(zip(flat[:n_enc:2], flat[1:n_enc:2])))
    dec = Network(dec_specs, list(zip(flat[n_enc::2], flat[n_enc + 1::2])))
    meta = dict(vae.meta, train=asdict(config), history=history)
    return VAE(enc, dec, vae.latent_dim, vae.feature_proj, True, meta), history


def load_vae(path) -> VAE:
    manifest, tensors = mgm_read(path)
    meta = manifest.get("meta", {})
    if meta.get("kind") != "vae":
        raise ValueError(f"{path}: not a VAE model file")
    specs = manifest["layerSpecs"]
    nets = {}
    for part in ("encoder", "decoder"):
        sp = [LayerSpec(**s) for s in specs[part]]
        params = [(tensors[f"{part}.{i}.weight"], tensors[f"{part}.{i}.bias"]) for i in range(len(sp))]
        nets[part] = Network(sp, params)
    return VAE(nets["encoder"], nets["decoder"], meta["latentDim"], tensors["feature_proj"], True, meta)


# ---------------------------------------------------------------------------
# classifier


def build_classifier(data_dim=1024, num_classes=4, hidden=CLASSIFIER_HIDDEN, seed=0) -> Network:
    return init_network(mlp_specs([data_dim, *hidden, num_classes], "relu"), Rng(seed).child(7))


def cross_entropy(logits, labels: np.ndarray):
    n, c = logits.shape
    m = ad.Tensor._wrap(logits.data.max(axis=1, keepdims=True))
    shifted = ad.sub(logits, ad.broadcast_to(m, (n, c)))
    lse = ad.log(ad.sum(ad.exp(shifted), axis=1))
    picked = ad.index(shifted, (np.arange(n), labels))
    return ad.mean(ad.sub(lse, picked))


def train_classifier(inputs: np.ndarray, labels: np.ndarray, num_classes: int, config: TrainConfig,
                     hidden=CLASSIFIER_HIDDEN):
    """Softmax-regression training of a ReLU MLP; returns (Network, per-epoch loss)."""
    config.validate()
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) != len(labels):
        raise ValueError(f"{len(inputs)} inputs but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("labels out of range")
    net = build_classifier(inputs.shape[1], num_classes, hidden, config.seed)
    specs = net.specs
    flat = [p.copy() for p in _flat_params(net)]
    opt = Adam(flat, config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = Rng(config.seed).child(200)
    history = []
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        order = rng.permutation(len(inputs))
        total = 0.0
        for step, lo in enumerate(range(0, len(inputs), config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            leaves = _as_leaves(flat)
            logits = forward(specs, _pairs(leaves), ad.Tensor._wrap(inputs[idx]))
            loss = cross_entropy(logits, labels[idx])
            _check_finite(loss.item(), epoch, step)
            flat = opt.step(flat, [g.data for g in ad.grad(loss, leaves)])
            total += loss.item() * len(idx)
        history.append(total / len(inputs))
        log.info("classifier epoch %d loss %.5f", epoch, history[-1])
    return Network(specs, list(zip(flat[0::2], flat[1::2]))), history


def accuracy(net: Network, inputs, labels) -> float:
    return float(np.mean(net.predict(inputs).argmax(axis=1) == labels))


def save_classifier(path, net: Network, meta=None):
    mgm_write(path, [asdict(s) for s in net.specs], net.state(), dict(meta or {}, kind="classifier"))


def load_classifier(path) -> Network:
    manifest, tensors = mgm_read(path)
    if manifest.get("meta", {}).get("kind") != "classifier":
        raise ValueError(f"{path}: not a classifier model file")
    specs = [LayerSpec(**s) for s in manifest["layerSpecs"]]
    return Network(specs, [(tensors[f"{i}.weight"], tensors[f"{i}.bias"]) for i in range(len(specs))])


# ---------------------------------------------------------------------------
# the explained function F


class ClassLogit:
    """F(x): pre-softmax logit of one class, batched over rows."""

    def __init__(self, net: Network, cls: int):
        self.net = net
        self.cls = int(cls)

    def __call__(self, x):
        return ad.index(self.net(x), (slice(None), self.cls))


def predicted_class(net: Network, x) -> int:
    return int(np.argmax(net.predict(np.asarray(x).reshape(1, -1))[0]))


def classify_grad(net: Network, x, cls: int | None = None, mode: str | None = None) -> np.ndarray:
    """Gradient of the chosen-class logit with respect to the input."""
    x = np.asarray(x, dtype=np.float64)
    if mode is not None:
        net = net.with_mode(mode)
    if cls is None:
        cls = predicted_class(net.with_mode("native"), x)
    xt = ad.Tensor(x.reshape(1, -1), requires_grad=True)
    return ad.grad(ad.sum(ClassLogit(net, cls)(xt)), xt).data.reshape(x.shape)
