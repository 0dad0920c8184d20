"""2D data distributions, the analytic mixture teacher, and ODE solving.

The teacher velocity field is the exact marginal field for the linear
interpolation path z_sigma = (1-sigma) z0 + sigma eps over an isotropic
Gaussian mixture: v(z, sigma) = (z - E[x | z_sigma = z]) / sigma, with the
posterior mean computed in closed form per component. Time convention is
sigma(t) = t on [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import (MlpParams, MlpSpec, TrainingError, backward, forward,
                      init_adam, init_params, adam_step)

# v has a 1/sigma singularity at 0; fields are frozen below this level
SIGMA_FLOOR = 1e-3

# default net for velocity fields and the discriminator backbone
DEFAULT_WIDTHS = (5, 64, 64, 64, 2)


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture in 2D."""

    weights: np.ndarray
    means: np.ndarray  # (K, 2)
    stds: np.ndarray   # (K,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        s = np.asarray(self.stds, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)
        if len(w) != len(m) or len(w) != len(s):
            raise ValueError("weights, means, stds must have equal length")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(s < 0):
            raise ValueError("stds must be non-negative")

    @property
    def mean(self) -> np.ndarray:
        """Mean of the data distribution."""
        return self.weights @ self.means


def default_benchmark() -> MixtureSpec:
    """Two equal components at (+-2, 0), std 0.3: curved but fully analytic."""
    return MixtureSpec(np.array([0.5, 0.5]),
                       np.array([[-2.0, 0.0], [2.0, 0.0]]),
                       np.array([0.3, 0.3]))


def point_mass(mu) -> MixtureSpec:
    return MixtureSpec(np.array([1.0]), np.asarray(mu, dtype=np.float64).reshape(1, 2),
                       np.array([0.0]))


def sample_mixture(spec: MixtureSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(len(spec.weights), size=n, p=spec.weights)
    return spec.means[comp] + spec.stds[comp, None] * rng.standard_normal((n, 2))


def _sample_two_moons(n, rng):
    theta = rng.uniform(0.0, np.pi, n)
    upper = rng.integers(0, 2, n).astype(bool)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x, y], axis=1)
    return pts + 0.05 * rng.standard_normal((n, 2))


def _sample_checkerboard(n, rng):
    x1 = rng.uniform(-2.0, 2.0, n)
    x2 = rng.uniform(0.0, 1.0, n) + (np.floor(x1) % 2) - rng.integers(0, 2, n) * 2.0
    return np.stack([x1, x2], axis=1) * 2.0


_NAMED_SETS = {"two_moons": _sample_two_moons, "checkerboard": _sample_checkerboard}


def sample_data(spec, n: int, seed: int = 0) -> np.ndarray:
    """i.i.d. 2D draws from a MixtureSpec or a named set, seed-deterministic."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(spec, MixtureSpec):
        return sample_mixture(spec, n, rng)
    if isinstance(spec, str) and spec in _NAMED_SETS:
        return _NAMED_SETS[spec](n, rng)
    raise ValueError(f"unknown data spec {spec!r}")


def interpolate(z0, eps, sigma):
    """Noising path (1 - sigma) z0 + sigma eps."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0) or np.any(sigma > 1):
        raise ValueError("sigma must lie in [0, 1]")
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    s = sigma[..., None] if sigma.ndim == z0.ndim - 1 else sigma
    return (1.0 - s) * z0 + s * eps


def analytic_velocity(spec: MixtureSpec, z, sigma) -> np.ndarray:
    """Exact marginal velocity (z - E[x|z]) / sigma for the mixture teacher.

    The posterior over components uses log-sum-exp; per component,
    z_sigma | x ~ N((1-sigma) x, sigma^2 I) composed with x ~ N(mu_k, s_k^2 I)
    gives marginal variance (1-sigma)^2 s_k^2 + sigma^2 and posterior mean
    mu_k + (1-sigma) s_k^2 / var_k * (z - (1-sigma) mu_k).
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig < SIGMA_FLOOR) or np.any(sig > 1.0):
        raise ValueError(f"sigma must lie in [{SIGMA_FLOOR}, 1]")
    sig = np.broadcast_to(sig, zb.shape[:-1])[..., None]  # (B, 1)

    a = 1.0 - sig                                   # (B, 1)
    var = a ** 2 * spec.stds[None, :] ** 2 + sig ** 2   # (B, K)
    diff = zb[:, None, :] - a[:, None, :] * spec.means[None, :, :]  # (B, K, 2)
    log_r = (np.log(spec.weights)[None, :]
             - np.sum(diff ** 2, axis=-1) / (2.0 * var)
             - np.log(var))                          # (B, K); 2D => -d/2 log var = -log var
    log_r -= log_r.max(axis=1, keepdims=True)
    r = np.exp(log_r)
    r /= r.sum(axis=1, keepdims=True)

    gain = a * spec.stds[None, :] ** 2 / var         # (B, K)
    m = spec.means[None, :, :] + gain[..., None] * diff  # (B, K, 2)
    post_mean = np.sum(r[..., None] * m, axis=1)     # (B, 2)
    v = (zb - post_mean) / sig
    return v[0] if single else v


def time_features(sigma):
    """(sigma, sin 2*pi*sigma, cos 2*pi*sigma) conditioning features."""
    s = np.asarray(sigma, dtype=np.float64)
    return np.stack([s, np.sin(2.0 * np.pi * s), np.cos(2.0 * np.pi * s)], axis=-1)


def field_features(z, sigma):
    """Network input: spatial coordinates plus time features."""
    z = np.asarray(z, dtype=np.float64)
    s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), z.shape[:-1])
    return np.concatenate([z, time_features(s)], axis=-1)


class AnalyticField:
    """Closed-form teacher; frozen below SIGMA_FLOOR."""

    kind = "analytic"

    def __init__(self, spec: MixtureSpec):
        self.spec = spec

    def __call__(self, z, sigma):
        sig = np.clip(np.asarray(sigma, dtype=np.float64), SIGMA_FLOOR, 1.0)
        return analytic_velocity(self.spec, z, sig)


class LearnedField:
    """MLP-backed velocity field; frozen below SIGMA_FLOOR."""

    kind = "learned"

    def __init__(self, params: MlpParams):
        self.params = params

    def __call__(self, z, sigma):
        z = np.asarray(z, dtype=np.float64)
        sig = np.clip(np.asarray(sigma, dtype=np.float64), SIGMA_FLOOR, 1.0)
        return forward(self.params, field_features(z, sig))


@dataclass(frozen=True)
class Trajectory:
    """Ordered (sigma, state) pairs along one ODE solve."""

    sigmas: np.ndarray  # (steps + 1,)
    states: np.ndarray  # (steps + 1,) + state shape


def solve_on_grid(field, z, sigmas):
    """Euler steps over an explicit descending sigma grid."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(np.diff(sigmas) >= 0):
        raise ValueError("sigma grid must be strictly decreasing")
    z = np.asarray(z, dtype=np.float64)
    states = [z]
    for s_from, s_to in zip(sigmas[:-1], sigmas[1:]):
        v = field(z, s_from)
        z = z + (s_to - s_from) * v
        states.append(z)
    return z, Trajectory(sigmas, np.stack(states))


def ode_solve(field, z, sigma_from: float, sigma_to: float, n_substeps: int):
    """n_substeps equal-width Euler steps from sigma_from down to sigma_to."""
    if sigma_to >= sigma_from:
        raise ValueError("need sigma_to < sigma_from")
    if sigma_to < 0:
        raise ValueError("sigma_to must be >= 0")
    if n_substeps < 1:
        raise ValueError("n_substeps must be >= 1")
    grid = np.linspace(sigma_from, sigma_to, n_substeps + 1)
    return solve_on_grid(field, z, grid)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0


def train_flow_matching(spec: MixtureSpec, net: MlpSpec = None,
                        cfg: TrainConfig = TrainConfig(),
                        history: list = None) -> LearnedField:
    """Conditional flow-matching regression onto eps - z0.

    Minimizes E || v(z_sigma, sigma) - (eps - z0) ||^2 with
    sigma ~ U[SIGMA_FLOOR, 1]; the optional learned teacher.
    """
    if net is None:
        net = MlpSpec(DEFAULT_WIDTHS, "silu", cfg.seed)
    params = init_params(net)
    state = init_adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.iterations):
        z0 = sample_mixture(spec, cfg.batch_size, rng)
        eps = rng.standard_normal((cfg.batch_size, 2))
        sig = rng.uniform(SIGMA_FLOOR, 1.0, cfg.batch_size)
        z = interpolate(z0, eps, sig)
        x = field_features(z, sig)
        pred = forward(params, x)
        resid = pred - (eps - z0)
        loss = float(np.mean(np.sum(resid ** 2, axis=1)))
        if not np.isfinite(loss):
            raise TrainingError("flow-matching loss diverged")
        if history is not None:
            history.append(loss)
        grads, _ = backward(params, x, 2.0 * resid / cfg.batch_size)
        params, state = adam_step(params, grads, state)
    return LearnedField(params)
