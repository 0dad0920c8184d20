"""Quantitative mismatch diagnostics and small-sample distribution metrics.

Covers: exact small-n 2-Wasserstein via optimal assignment, the energy
distance with a permutation test, divergence between the teacher's
continuous trajectory and the piecewise re-initialized protocol, the
inter-stage distribution gap between training-time and inference-time
stage inputs, and the first-moment check E[v(z_sigma, sigma)] = -mu_data
on interpolation marginals (sigma(t) = t, so sigma' = 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .distill import StageGrid, ota_start
from .flow import MixtureSpec, SIGMA_FLOOR, interpolate, ode_solve, sample_mixture

W2_MAX_POINTS = 256


def w2_exact_small(a, b) -> float:
    """Exact 2-Wasserstein between equal-size point sets (<= 256 points):
    sqrt of the minimum mean squared distance over perfect matchings."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise ValueError("point sets must have equal size")
    if len(a) > W2_MAX_POINTS:
        raise ValueError(f"at most {W2_MAX_POINTS} points (exact assignment)")
    cost = cdist(a, b, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def energy_distance(a, b) -> float:
    """2 E||a-b|| - E||a-a'|| - E||b-b'|| (V-statistic over all pairs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be nonempty")
    return float(2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


def energy_permutation_test(a, b, n_permutations: int = 1000, seed: int = 0):
    """Two-sample energy-distance test; returns (statistic, p_value).

    Permutation statistics are computed from the pooled distance matrix
    with one matrix product over all label permutations, so n up to a few
    thousand stays fast.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise ValueError("permutation test assumes equal sample sizes")
    n = len(a)
    pooled = np.vstack([a, b])
    D = cdist(pooled, pooled).astype(np.float32)
    s_tot = float(D.sum(dtype=np.float64))

    def stat_from_saa(s_aa, colsum):
        s_ab = colsum - s_aa
        s_bb = s_tot - 2.0 * colsum + s_aa
        return (2.0 * s_ab - s_aa - s_bb) / n ** 2

    mask = np.zeros(2 * n, dtype=np.float32)
    mask[:n] = 1.0
    r = D @ mask
    observed = stat_from_saa(float(mask @ r), float(r.sum(dtype=np.float64)))

    rng = np.random.default_rng(seed)
    X = np.zeros((2 * n, n_permutations), dtype=np.float32)
    for p in range(n_permutations):
        X[rng.permutation(2 * n)[:n], p] = 1.0
    R = D @ X
    s_aa = np.einsum("ip,ip->p", X, R, dtype=np.float64)
    colsum = R.sum(axis=0, dtype=np.float64)
    stats = stat_from_saa(s_aa, colsum)
    p_value = float((1 + np.sum(stats >= observed)) / (1 + n_permutations))
    return observed, p_value


@dataclass
class MismatchReport:
    """Per-boundary mismatch diagnostics plus the run bookkeeping."""

    boundaries: list = field(default_factory=list)
    divergence_mean: list = field(default_factory=list)
    divergence_se: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    p_value: list = field(default_factory=list)
    w2: list = field(default_factory=list)
    velocity_residuals: dict = field(default_factory=dict)
    n_samples: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        rows = []
        for i, bnd in enumerate(self.boundaries):
            row = {"boundary": bnd}
            for name, vals in (("divergence_mean", self.divergence_mean),
                               ("divergence_se", self.divergence_se),
                               ("energy_distance", self.energy),
                               ("p_value", self.p_value),
                               ("w2", self.w2)):
                if i < len(vals):
                    row[name] = vals[i]
            rows.append(row)
        return {"boundaries": rows,
                "velocity_residuals": self.velocity_residuals,
                "n_samples": self.n_samples, "seed": self.seed}


def _stagewise_states(field_, grid, z):
    """States at every boundary below 1, solving stage by stage."""
    states = []
    for k in range(grid.n_stages, 0, -1):
        z, _ = ode_solve(field_, z, grid.t(k), grid.t(k - 1),
                         grid.teacher_substeps_per_stage)
        states.append(z)
    return states  # at t_{K-1} .. t_0


def teacher_trajectory_divergence(teacher, grid: StageGrid, n: int,
                                  seed: int = 0):
    """Mean L2 gap between continuous and piecewise-reinitialized trajectories.

    The piecewise protocol replaces the state at each earlier boundary with
    an interpolation between a ground-truth endpoint and the noise draw,
    then evolves one stage. Ground truth is the teacher's own set of sigma=0
    endpoints, re-paired with the noise draws by a random permutation: the
    off-trajectory training protocol pairs data and noise independently, and
    self-paired endpoints would hide most of the resulting mismatch (a
    straight-trajectory teacher still yields zero either way). Returns
    (boundaries, means, standard errors); empty for K = 1 (no interior
    boundary to re-initialize at).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if grid.n_stages == 1:
        return np.array([]), np.array([]), np.array([])
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, 2))
    continuous = _stagewise_states(teacher, grid, eps)
    z0_true = continuous[-1][rng.permutation(n)]

    piecewise = []
    for k in range(grid.n_stages, 0, -1):
        start = eps if k == grid.n_stages else interpolate(z0_true, eps, grid.t(k))
        z, _ = ode_solve(teacher, start, grid.t(k), grid.t(k - 1),
                         grid.teacher_substeps_per_stage)
        piecewise.append(z)

    boundaries = grid.boundaries[1:]
    gaps = [np.linalg.norm(c - p, axis=1) for c, p in zip(continuous, piecewise)]
    means = np.array([g.mean() for g in gaps])
    ses = np.array([g.std(ddof=1) / np.sqrt(n) for g in gaps])
    return boundaries, means, ses


def interstage_distance(teacher, student, grid: StageGrid, n: int,
                        seed: int = 0, data: MixtureSpec = None,
                        method: str = "perflow", n_permutations: int = 1000):
    """Distribution gap at each interior boundary between training-time
    stage inputs (set A) and the student's inference-time stage inputs
    (set B).

    A is built per `method`: perflow-style interpolated points, or
    ota-style teacher-trajectory states. Returns a list of dicts with
    energy distance, permutation p-value, and exact W2 on 256-point
    subsamples.
    """
    if data is None:
        if hasattr(teacher, "spec"):
            data = teacher.spec
        else:
            raise ValueError("data spec required for a non-analytic teacher")
    rng = np.random.default_rng(seed)
    eps_train = rng.standard_normal((n, 2))
    z0 = sample_mixture(data, n, rng)
    eps_infer = rng.standard_normal((n, 2))

    # inference-time inputs: student's own previous-stage outputs
    z = eps_infer.copy()
    results = []
    for k in range(grid.n_stages, 1, -1):
        v = student(z, grid.t(k))
        z = z + (grid.t(k - 1) - grid.t(k)) * v
        t_b = grid.t(k - 1)
        if method == "perflow":
            a_set = interpolate(z0, eps_train, t_b)
        elif method == "ota":
            a_set = ota_start(teacher, eps_train, k - 1, grid)
        else:
            raise ValueError(f"unknown method {method!r}")
        stat, p = energy_permutation_test(a_set, z, n_permutations,
                                          seed=seed + k)
        m = min(W2_MAX_POINTS, n)
        w2 = w2_exact_small(a_set[:m], z[:m])
        results.append({"boundary": float(t_b), "energy_distance": stat,
                        "p_value": p, "w2": w2})
    return results


def expected_velocity_residual(field_, spec: MixtureSpec, sigma: float,
                               n: int, seed: int = 0):
    """First-moment check on interpolation marginals.

    Draws n path states z_sigma, returns (|| mean v + mu_data ||, standard
    error of that norm). The exact marginal field satisfies
    E[v] = -mu_data at every fixed sigma.
    """
    if not SIGMA_FLOOR <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [{SIGMA_FLOOR}, 1]")
    rng = np.random.default_rng(seed)
    z0 = sample_mixture(spec, n, rng)
    eps = rng.standard_normal((n, 2))
    z = interpolate(z0, eps, sigma)
    v = field_(z, sigma)
    mean_v = v.mean(axis=0)
    residual = float(np.linalg.norm(mean_v + spec.mean))
    se = float(np.sqrt(np.sum(v.var(axis=0, ddof=1) / n)))
    return residual, se
