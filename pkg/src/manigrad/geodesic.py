"""Discrete geodesics on the latent manifold induced by a smooth decoder.

The decoder ``g`` is any callable mapping a Tensor of latent rows [n, d] to
data rows [n, D].  Curves are discretised as z_0..z_T with dt = 1/T and the
discrete energy  E = 1/2 * sum_i ||g(z_{i+1}) - g(z_i)||^2 / dt  is lowered
by gradient descent on the interior points with Armijo backtracking.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from . import autodiff as ad
from .errors import ShapeError, SingularMetricError

log = logging.getLogger(__name__)


@dataclass
class LatentCurve:
    points: np.ndarray  # [T+1, d]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) < 3:
            raise ValueError("a latent curve needs at least T=2 segments")

    @property
    def T(self) -> int:
        return len(self.points) - 1

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def dt(self) -> float:
        return 1.0 / self.T

    def reversed(self) -> "LatentCurve":
        return LatentCurve(self.points[::-1].copy())


@dataclass
class MetricEval:
    z: np.ndarray
    G: np.ndarray


PRECONDITIONERS = ("gauss-newton", "laplacian", "none")


@dataclass
class SolverOptions:
    max_iter: int = 300
    rel_tol: float = 1e-3
    step0: float = 1.0
    shrink: float = 0.5
    armijo_c: float = 1e-4
    max_backtracks: int = 30
    coarse_to_fine: bool = False
    preconditioner: str = "gauss-newton"  # gauss-newton | laplacian | none


@dataclass
class GeodesicReport:
    converged: bool
    iterations: int
    energy: float
    energy_history: list = field(default_factory=list)
    grad_sq_history: list = field(default_factory=list)
    speed_variation: float = 0.0
    status: str = ""
    ode_residual: float | None = None
    levels: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def curve_init_linear(z0, zT, T: int) -> LatentCurve:
    z0, zT = np.asarray(z0, dtype=np.float64), np.asarray(zT, dtype=np.float64)
    if z0.shape != zT.shape or z0.ndim != 1:
        raise ShapeError("curve_init_linear", z0.shape, zT.shape)
    if T < 2:
        raise ValueError("T must be at least 2")
    t = np.arange(T + 1)[:, None] / T
    pts = z0[None, :] + t * (zT - z0)[None, :]
    pts[0], pts[-1] = z0, zT
    return LatentCurve(pts)


def decode_points(decoder, Z) -> np.ndarray:
    with ad.no_grad():
        return decoder(ad.Tensor._wrap(np.asarray(Z, dtype=np.float64))).data


def _energy_from_images(X, T) -> float:
    d = np.diff(X, axis=0)
    return 0.5 * T * float(np.sum(d * d))


def discrete_energy(curve: LatentCurve, decoder) -> float:
    return _energy_from_images(decode_points(decoder, curve.points), curve.T)


def segment_speeds(curve: LatentCurve, decoder) -> np.ndarray:
    """||g(z_{i+1}) - g(z_i)|| for each segment."""
    X = decode_points(decoder, curve.points)
    return np.linalg.norm(np.diff(X, axis=0), axis=1)


def curve_length(curve: LatentCurve, decoder) -> float:
    return float(segment_speeds(curve, decoder).sum())


def speed_variation(curve: LatentCurve, decoder) -> float:
    """Coefficient of variation of the segment speeds (0 at constant speed)."""
    s = segment_speeds(curve, decoder)
    m = s.mean()
    return float(s.std() / m) if m > 0 else 0.0


def _gradient(Z, X, T, decoder, mode, encoder):
    # dE/dg_i = -(1/dt) (g_{i+1} - 2 g_i + g_{i-1}) for interior i
    lap = X[2:] - 2.0 * X[1:-1] + X[:-2]
    if mode == "exact":
        return ad.vjp(decoder, Z[1:-1], -T * lap)
    if mode == "encoder-approx":
        if encoder is None:
            raise ValueError("encoder-approx mode needs an encoder")
        return -T * ad.jvp(encoder, X[1:-1], lap)
    raise ValueError(f"unknown gradient mode {mode!r}")


def energy_gradient(curve: LatentCurve, decoder, mode="exact", encoder=None) -> np.ndarray:
    """Gradient of the discrete energy for z_1..z_{T-1}, shape [T-1, d].

    ``exact`` pulls the data-space gradient back through the decoder with one
    batched vector-Jacobian product.  ``encoder-approx`` replaces J_g^T with
    the encoder Jacobian evaluated at the decoded points.
    """
    if mode == "encoder-approx" and encoder is None:
        raise ValueError("encoder-approx mode needs an encoder")
    Z = curve.points
    return _gradient(Z, decode_points(decoder, Z), curve.T, decoder, mode, encoder)


def _laplacian_solve(g, T):
    """Apply (T * tridiag(-1, 2, -1))^-1 to each latent coordinate of g."""
    n = len(g)
    bands = np.zeros((3, n))
    bands[0, 1:] = -T
    bands[1, :] = 2.0 * T
    bands[2, :-1] = -T
    return solve_banded((1, 1), bands, g)


def _batched_jacobians(decoder, Z) -> np.ndarray:
    """J_g at every row of Z, shape [n, D, d], from one jvp over d stacked copies."""
    n, d = Z.shape
    Zs = np.tile(Z, (d, 1))
    U = np.repeat(np.eye(d), n, axis=0)
    cols = ad.jvp(decoder, Zs, U).reshape(d, n, -1)
    return cols.transpose(1, 2, 0)


def _gauss_newton_solve(g, Z, T, decoder):
    """Solve H d = g with H the Gauss-Newton matrix of the discrete energy.

    H is block tridiagonal: T (2 J_i^T J_i) on the diagonal and -T J_i^T J_{i+1}
    off it.  A tiny relative ridge keeps it invertible where J_g loses rank.
    """
    n, d = g.shape
    J = _batched_jacobians(decoder, Z[1:-1])
    H = np.zeros((n * d, n * d))
    for i in range(n):
        H[i * d:(i + 1) * d, i * d:(i + 1) * d] = 2.0 * T * (J[i].T @ J[i])
        if i + 1 < n:
            off = -T * (J[i].T @ J[i + 1])
            H[i * d:(i + 1) * d, (i + 1) * d:(i + 2) * d] = off
            H[(i + 1) * d:(i + 2) * d, i * d:(i + 1) * d] = off.T
    ridge = 1e-8 * max(np.trace(H) / (n * d), 1e-300)
    H[np.diag_indices_from(H)] += ridge
    return np.linalg.solve(H, g.reshape(-1)).reshape(n, d)


def _direction(g, Z, T, decoder, kind):
    if kind == "gauss-newton":
        d = _gauss_newton_solve(g, Z, T, decoder)
        if np.all(np.isfinite(d)) and np.sum(g * d) > 0:
            return d
        return _laplacian_solve(g, T)
    if kind == "laplacian":
        return _laplacian_solve(g, T)
    return g


def _descend(Z, decoder, mode, encoder, opts: SolverOptions):
    """Armijo descent on the interior of Z; endpoints are never written.

    The search direction is -grad preconditioned by ``opts.preconditioner``:
    ``laplacian`` takes the gradient in the discrete H1 inner product (the
    Hessian of the flat energy), removing the O(T^2) conditioning of plain
    steepest descent; ``gauss-newton`` additionally accounts for the metric.
    """
    if opts.preconditioner not in PRECONDITIONERS:
        raise ValueError(f"unknown preconditioner {opts.preconditioner!r}")
    T = len(Z) - 1
    Z = Z.copy()
    X = decode_points(decoder, Z)
    E = _energy_from_images(X, T)
    energies, gsqs = [E], []
    # gradient entries are O(T |g(z_T) - g(z_0)|^2); below round-off of that the curve is stationary
    floor = (1e-13 * T * float(np.sum((X[-1] - X[0]) ** 2))) ** 2
    status, converged, it = "max_iter", False, 0
    for it in range(opts.max_iter + 1):
        g = _gradient(Z, X, T, decoder, mode, encoder)
        gsq = float(np.sum(g * g))
        gsqs.append(gsq)
        if gsq <= max(floor, 1e-300) or gsq <= 1e-24 * gsqs[0]:
            status, converged = "stationary", True
            break
        if len(gsqs) > 1 and abs(gsq - gsqs[-2]) <= opts.rel_tol * gsq:
            status, converged = "rel_change", True
            break
        if it == opts.max_iter:
            break
        d = _direction(g, Z, T, decoder, opts.preconditioner)
        slope = float(np.sum(g * d))
        alpha = opts.step0
        accepted = False
        for _ in range(opts.max_backtracks + 1):
            trial = Z.copy()
            trial[1:-1] -= alpha * d
            Xt = decode_points(decoder, trial)
            Et = _energy_from_images(Xt, T)
            if Et <= E - opts.armijo_c * alpha * slope:
                accepted = True
                break
            alpha *= opts.shrink
        if not accepted:
            status = "line_search_failed"
            break
        Z, X, E = trial, Xt, Et
        energies.append(E)
    steps = len(energies) - 1
    return Z, E, energies, gsqs, converged, status, steps


def _refine(Z):
    """Double the resolution by inserting latent midpoints."""
    out = np.empty((2 * len(Z) - 1, Z.shape[1]))
    out[0::2] = Z
    out[1::2] = 0.5 * (Z[:-1] + Z[1:])
    return out


def geodesic_solve(z0, zT, decoder, T: int = 16, mode: str = "exact", encoder=None,
                   options: SolverOptions | None = None):
    """Minimise the discrete energy between fixed endpoints.

    Returns (LatentCurve, GeodesicReport).  A failed line search ends the run
    with ``converged=False`` and the best curve so far; it does not raise.
    """
    opts = options or SolverOptions()
    if mode == "encoder-approx" and encoder is None:
        raise ValueError("encoder-approx mode needs an encoder")
    z0 = np.array(z0, dtype=np.float64)
    zT = np.array(zT, dtype=np.float64)
    init = curve_init_linear(z0, zT, T)
    if np.array_equal(z0, zT):
        return init, GeodesicReport(True, 0, 0.0, [0.0], [0.0], 0.0, "degenerate")

    levels = [T]
    if opts.coarse_to_fine:
        while levels[0] % 2 == 0 and levels[0] > 4:
            levels.insert(0, levels[0] // 2)
    Z = curve_init_linear(z0, zT, levels[0]).points
    level_info, energies, gsqs, total = [], [], [], 0
    for li, level in enumerate(levels):
        if li:
            Z = _refine(Z)
        Z, E, e_hist, g_hist, converged, status, steps = _descend(Z, decoder, mode, encoder, opts)
        level_info.append({"T": level, "iterations": steps, "status": status})
        total += steps
        energies, gsqs = e_hist, g_hist
    Z[0], Z[-1] = z0, zT
    curve = LatentCurve(Z)
    report = GeodesicReport(converged, total, E, energies, gsqs,
                            speed_variation(curve, decoder), status, levels=level_info)
    log.debug("geodesic T=%d: %s after %d iterations, E=%.6g", T, status, total, E)
    return curve, report


def resample(curve: LatentCurve, n: int) -> LatentCurve:
    """Piecewise-linear resampling of a latent curve at n+1 uniform parameters."""
    if n == curve.T:
        return curve
    t = np.linspace(0.0, 1.0, n + 1)
    s = np.linspace(0.0, 1.0, curve.T + 1)
    pts = np.stack([np.interp(t, s, curve.points[:, k]) for k in range(curve.dim)], axis=1)
    pts[0], pts[-1] = curve.points[0], curve.points[-1]
    return LatentCurve(pts)


# ---------------------------------------------------------------------------
# differential-geometric checks


def decoder_jacobian(z, decoder) -> np.ndarray:
    """J_g(z) as a [D, d] matrix, one Jacobian-vector product per latent axis."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    d = z.shape[1]
    cols = [ad.jvp(decoder, z, np.eye(d)[k:k + 1])[0] for k in range(d)]
    return np.stack(cols, axis=1)


def metric_tensor(z, decoder) -> MetricEval:
    J = decoder_jacobian(z, decoder)
    G = J.T @ J
    return MetricEval(np.asarray(z, dtype=np.float64), 0.5 * (G + G.T))


def christoffel_symbols(z, decoder, h: float = 1e-4, metric=None) -> np.ndarray:
    """Gamma[k, i, j] from central differences of the metric.

    ``metric`` overrides the decoder pull-back with a closed-form G(z).
    """
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[0]
    G_at = metric or (lambda p: metric_tensor(p, decoder).G)
    G = G_at(z)
    if not np.all(np.isfinite(G)) or np.linalg.cond(G) > 1e12:
        raise SingularMetricError(f"metric is singular at z={z.tolist()}")
    ginv = np.linalg.inv(G)
    dG = np.empty((d, d, d))  # dG[l, i, j] = d g_ij / d z^l
    for l in range(d):
        e = np.zeros(d)
        e[l] = h
        dG[l] = (G_at(z + e) - G_at(z - e)) / (2.0 * h)
    # bracket[i, j, l] = d_i g_jl + d_j g_il - d_l g_ij
    bracket = dG.transpose(0, 1, 2) + dG.transpose(1, 0, 2) - dG.transpose(1, 2, 0)
    gamma = 0.5 * np.einsum("kl,ijl->kij", ginv, bracket)
    asym = np.max(np.abs(gamma - gamma.transpose(0, 2, 1)))
    if asym > 1e-8 * max(1.0, np.max(np.abs(gamma))):
        raise ArithmeticError(f"Christoffel symbols not symmetric (max deviation {asym:.3g})")
    return 0.5 * (gamma + gamma.transpose(0, 2, 1))


def geodesic_ode_residual(curve: LatentCurve, decoder, h: float = 1e-4, metric=None) -> float:
    """RMS over interior points of  z'' + Gamma(z', z')  by central differences."""
    if curve.T < 8:
        raise ValueError("ODE residual needs T >= 8")
    Z, T = curve.points, curve.T
    res = []
    for i in range(1, T):
        v = (Z[i + 1] - Z[i - 1]) * (T / 2.0)
        a = (Z[i + 1] - 2.0 * Z[i] + Z[i - 1]) * T * T
        gamma = christoffel_symbols(Z[i], decoder, h, metric)
        res.append(a + np.einsum("kij,i,j->k", gamma, v, v))
    res = np.array(res)
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
