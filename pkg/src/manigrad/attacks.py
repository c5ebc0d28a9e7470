"""Attributional attacks: perturb an input within an L-inf ball so that its
explanation changes while the predicted class does not.

The attacked explanation is IG, rebuilt as a recorded graph so the attack
loss can be differentiated through the input gradients (reverse mode
twice).  The classifier must therefore run in softplus mode.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attribution import normalize_map
from .io import csv_write
from .models import ClassLogit, Network, predicted_class
from .rng import Rng

log = logging.getLogger(__name__)

GAMMAS = (1.0, 10.0, 100.0)
ROBUSTNESS_HEADER = ("input_id", "method", "ssi", "class_preserved")


@dataclass
class AttackConfig:
    epsilon: float = 0.1
    gamma: float | None = None  # None: pick the best of GAMMAS
    steps: int = 200
    step_size: float | None = None  # default 2.5 * epsilon / steps
    method: str = "ig"
    n_steps: int = 16
    seed: int = 0
    random_start: bool = False

    def validate(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.method != "ig":
            raise ValueError("only IG-targeted attacks are supported")

    @property
    def step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / max(self.steps, 1)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss_history: list
    linf: float
    class_preserved: bool
    attribution_distance: float
    initial_distance: float
    gamma: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        """Attack loss at least halved with the class preserved."""
        return self.class_preserved and self.final_loss <= 0.5 * self.loss_history[0]

    @property
    def final_loss(self) -> float:
        return float(min(self.loss_history))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("x_adv")
        d["success"] = self.success
        d["final_loss"] = self.final_loss
        return d


def ig_graph(F, x: ad.Tensor, baseline: np.ndarray, n_steps: int) -> ad.Tensor:
    """Left-rule IG of F at the row tensor x [1, D], differentiable in x."""
    D = x.shape[1]
    base = ad.Tensor._wrap(np.asarray(baseline, dtype=np.float64).reshape(1, D))
    alphas = ad.Tensor._wrap((np.arange(n_steps) / n_steps).reshape(-1, 1))
    delta = ad.sub(x, base)
    points = ad.add(ad.broadcast_to(base, (n_steps, D)), ad.matmul(alphas, delta))
    if not points.requires_grad:  # constant input: still need dF/dpoints
        points = ad.Tensor(points.data, requires_grad=True)
    grads = ad.grad(ad.sum(F(points)), points, create_graph=True)
    return ad.mul(delta, ad.mean(grads, axis=0, keepdims=True))


def _sq_dist(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    return ad.sum(ad.square(ad.sub(a, b)))


def _project(x_adv, x, eps):
    return np.clip(np.clip(x_adv, x - eps, x + eps), -1.0, 1.0)


def _smooth(net: Network) -> Network:
    return net if net.mode == "softplus" else net.with_mode("softplus")


def _pgd(loss_fn, x, cfg: AttackConfig, accept=None):
    """Sign-gradient descent with projection; returns (best x, best loss, history)."""
    x_adv = x.copy()
    if cfg.random_start and cfg.epsilon > 0:
        x_adv = _project(x + Rng(cfg.seed).uniform(x.shape, -cfg.epsilon, cfg.epsilon), x, cfg.epsilon)
    step = cfg.step
    t = ad.Tensor(x_adv.reshape(1, -1), requires_grad=True)
    loss = loss_fn(t)
    history = [loss.item()]
    best, best_loss = x_adv, loss.item()
    for _ in range(cfg.steps):
        g = ad.grad(loss, t).data.reshape(x.shape)
        trial = _project(x_adv - step * np.sign(g), x, cfg.epsilon)
        if accept is not None and not accept(trial):
            step *= 0.5
            history.append(history[-1])
            continue
        x_adv = trial
        t = ad.Tensor(x_adv.reshape(1, -1), requires_grad=True)
        loss = loss_fn(t)
        history.append(loss.item())
        if loss.item() < best_loss:
            best, best_loss = x_adv, loss.item()
    return best, best_loss, history


def _ig_value(F, x, baseline, n_steps) -> np.ndarray:
    t = ad.Tensor(np.asarray(x, dtype=np.float64).reshape(1, -1), requires_grad=True)
    return ig_graph(F, t, baseline, n_steps).data.reshape(np.shape(x))


def _targeted_once(net, x, x_target, baseline, cfg: AttackConfig, gamma: float):
    smooth = _smooth(net)
    cls = predicted_class(net, x)
    F = ClassLogit(smooth, cls)
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    target_map = ad.Tensor._wrap(_ig_value(F, x_target, baseline, cfg.n_steps).reshape(1, -1))
    logits0 = ad.Tensor._wrap(smooth.predict(flat))

    def loss_fn(t):
        dist = _sq_dist(ig_graph(F, t, baseline, cfg.n_steps), target_map)
        return ad.add(dist, ad.scale(_sq_dist(smooth(t), logits0), gamma))

    x_adv, _, history = _pgd(loss_fn, flat, cfg)
    x_adv = x_adv.reshape(np.shape(x))
    tm = target_map.data.reshape(np.shape(x))
    initial = float(np.sum((_ig_value(F, x, baseline, cfg.n_steps) - tm) ** 2))
    final = float(np.sum((_ig_value(F, x_adv, baseline, cfg.n_steps) - tm) ** 2))
    return AttackResult(x_adv, history, float(np.max(np.abs(x_adv - x))),
                        predicted_class(net, x_adv) == cls, final, initial, gamma)


def targeted_attack(net: Network, x, x_target, baseline, config: AttackConfig) -> AttackResult:
    """Push IG(x_adv) towards IG(x_target) while keeping the logits of x.

    Loss: ||IG(x_adv) - IG(x_target)||^2 + gamma ||logits(x_adv) - logits(x)||^2.
    With ``config.gamma`` unset each gamma in GAMMAS is tried and the run with
    the smallest attribution distance among class-preserving runs is kept.
    """
    config.validate()
    x = np.asarray(x, dtype=np.float64)
    gammas = GAMMAS if config.gamma is None else (config.gamma,)
    results = [_targeted_once(net, x, x_target, baseline, config, g) for g in gammas]
    kept = [r for r in results if r.class_preserved] or results
    best = min(kept, key=lambda r: r.attribution_distance)
    best.extra["gamma_sweep"] = {str(r.gamma): r.attribution_distance for r in results}
    return best


def topk_indices(scores, k: int) -> np.ndarray:
    flat = np.asarray(scores).reshape(-1)
    return np.sort(np.argsort(-flat, kind="stable")[:k])


def topk_intersection(a, b, k: int) -> float:
    """Fraction of the k largest features of ``a`` that are also top-k in ``b``."""
    return len(np.intersect1d(topk_indices(a, k), topk_indices(b, k))) / k


def topk_attack(net: Network, x, k: int, baseline, config: AttackConfig) -> AttackResult:
    """Lower the summed IG scores of the k features ranked highest in IG(x).

    K is fixed from the clean map.  Iterates that change the predicted class
    are rejected and the step size is halved.
    """
    config.validate()
    x = np.asarray(x, dtype=np.float64)
    cls = predicted_class(net, x)
    F = ClassLogit(_smooth(net), cls)
    clean = _ig_value(F, x, baseline, config.n_steps)
    K = topk_indices(clean, k)
    select = np.zeros(clean.size)
    select[K] = 1.0
    sel = ad.Tensor._wrap(select.reshape(1, -1))

    def loss_fn(t):
        return ad.sum(ad.mul(ig_graph(F, t, baseline, config.n_steps), sel))

    flat = x.reshape(-1)
    x_adv, _, history = _pgd(loss_fn, flat, config, accept=lambda z: predicted_class(net, z) == cls)
    x_adv = x_adv.reshape(x.shape)
    adv_map = _ig_value(F, x_adv, baseline, config.n_steps)
    res = AttackResult(x_adv, history, float(np.max(np.abs(x_adv - x))),
                       predicted_class(net, x_adv) == cls,
                       float(np.sum(adv_map.reshape(-1)[K])), float(np.sum(clean.reshape(-1)[K])))
    res.extra["topk_intersection"] = topk_intersection(clean, adv_map, k)
    return res


def evaluate_robustness(explain: dict, pairs, path=None, percentile: float = 99.0) -> list[dict]:
    """SSI between normalized maps of each clean input and its attacked copy.

    ``explain`` maps method name -> callable(x) -> AttributionMap; ``pairs``
    is a sequence of (input_id, x, AttackResult).
    """
    from .metrics import ssim

    rows = []
    for input_id, x, result in pairs:
        for name, fn in explain.items():
            a = normalize_map(fn(x).scores, percentile)
            b = normalize_map(fn(result.x_adv).scores, percentile)
            side = int(round(np.sqrt(a.size)))
            rows.append({"input_id": input_id, "method": name,
                         "ssi": ssim(a.reshape(side, side), b.reshape(side, side)),
                         "class_preserved": int(result.class_preserved)})
    if path is not None:
        csv_write(path, rows, ROBUSTNESS_HEADER)
    return rows
