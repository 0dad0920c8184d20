"""Stage grids, distillation pair construction, student training, inference.

Two ways to build the start state z_{t_k} of a stage:
  * perflow: linear interpolation of data and noise (off-trajectory);
  * ota: solve the teacher's ODE from noise down to t_k (on-trajectory).
Both then evolve the teacher over the stage and regress the student onto
the stage's constant velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import (LearnedField, MixtureSpec, TrainConfig, DEFAULT_WIDTHS,
                   field_features, interpolate, ode_solve, sample_mixture)
from .netcore import (MlpSpec, TrainingError, adam_step, backward, forward,
                      init_adam, init_params)
from .sched import build_base_schedule, sample_improved, step_euler


@dataclass(frozen=True)
class StageGrid:
    """Stage boundaries t_K = 1 > ... > t_0 = 0, stored descending."""

    boundaries: np.ndarray
    teacher_substeps_per_stage: int = 8

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 2 or b[0] != 1.0 or b[-1] != 0.0:
            raise ValueError("boundaries must run from exactly 1.0 to exactly 0.0")
        if np.any(np.diff(b) >= 0):
            raise ValueError("boundaries must be strictly decreasing")
        if self.teacher_substeps_per_stage < 1:
            raise ValueError("teacher_substeps_per_stage must be >= 1")

    @property
    def n_stages(self) -> int:
        return len(self.boundaries) - 1

    def t(self, k: int) -> float:
        """Boundary value t_k, k = 0 (data end) .. K (noise end)."""
        if not 0 <= k <= self.n_stages:
            raise ValueError(f"boundary index {k} out of range")
        return float(self.boundaries[self.n_stages - k])


@dataclass(frozen=True)
class DistillPair:
    """One training pair: stage endpoints, constant target velocity, and an
    interior state sampled uniformly inside the stage."""

    stage: int
    start: np.ndarray       # z_{t_k}
    end: np.ndarray         # z_{t_{k-1}}
    v_target: np.ndarray
    t: float
    z_t: np.ndarray
    provenance: str         # "perflow_offtrajectory" | "ota_ontrajectory"


def default_grid(n_stages: int, shift: float = 1.0,
                 teacher_substeps_per_stage: int = 8) -> StageGrid:
    """Boundaries from the improved sampler so training and inference share
    the same fixed schedule."""
    if n_stages < 1:
        raise ValueError("n_stages must be >= 1")
    sig = sample_improved(build_base_schedule(1000, shift), n_stages)
    return StageGrid(sig.sigmas, teacher_substeps_per_stage)


def ota_start(teacher, eps, k: int, grid: StageGrid) -> np.ndarray:
    """On-trajectory stage start: per-stage teacher solves from sigma = 1
    down to t_k on the aligned sub-grid (concatenation equals one continuous
    solve bitwise)."""
    z = np.asarray(eps, dtype=np.float64)
    for j in range(grid.n_stages, k, -1):
        z, _ = ode_solve(teacher, z, grid.t(j), grid.t(j - 1),
                         grid.teacher_substeps_per_stage)
    return z


def _finish_pair(teacher, start, k, grid, rng, provenance):
    t_hi, t_lo = grid.t(k), grid.t(k - 1)
    end, _ = ode_solve(teacher, start, t_hi, t_lo, grid.teacher_substeps_per_stage)
    v_target = (end - start) / (t_lo - t_hi)
    t = float(rng.uniform(t_lo, t_hi))
    z_t = start + (t - t_hi) / (t_lo - t_hi) * (end - start)
    return DistillPair(k, start, end, v_target, t, z_t, provenance)


def make_pair_perflow(teacher, z0, eps, k: int, grid: StageGrid,
                      rng: np.random.Generator) -> DistillPair:
    """Off-trajectory pair: stage start interpolated from data and noise."""
    if not 1 <= k <= grid.n_stages:
        raise ValueError(f"stage {k} out of range")
    start = interpolate(np.asarray(z0, dtype=np.float64),
                        np.asarray(eps, dtype=np.float64), grid.t(k))
    return _finish_pair(teacher, start, k, grid, rng, "perflow_offtrajectory")


def make_pair_ota(teacher, eps, k: int, grid: StageGrid,
                  rng: np.random.Generator) -> DistillPair:
    """On-trajectory pair: stage start from the teacher's own ODE."""
    if not 1 <= k <= grid.n_stages:
        raise ValueError(f"stage {k} out of range")
    start = ota_start(teacher, eps, k, grid)
    return _finish_pair(teacher, start, k, grid, rng, "ota_ontrajectory")


def distill_loss(student, pairs) -> float:
    """Mean || v_S(z_t, t) - v* ||^2 over a batch of pairs."""
    if len(pairs) == 0:
        raise ValueError("need a nonempty batch of pairs")
    z_t = np.stack([p.z_t for p in pairs])
    t = np.array([p.t for p in pairs])
    v_t = np.stack([p.v_target for p in pairs])
    resid = student(z_t, t) - v_t
    loss = float(np.mean(np.sum(resid ** 2, axis=1)))
    if not np.isfinite(loss):
        raise TrainingError("non-finite distillation loss")
    return loss


def sample_training_batch(teacher, data: MixtureSpec, method: str,
                          grid: StageGrid, batch: int,
                          rng: np.random.Generator):
    """Fresh online batch for one iteration: one stage draw, per-sample
    interior times. Returns (z_t, t, v_target)."""
    k = int(rng.integers(1, grid.n_stages + 1))
    if method == "perflow":
        z0 = sample_mixture(data, batch, rng)
        eps = rng.standard_normal((batch, 2))
        start = interpolate(z0, eps, grid.t(k))
    elif method == "ota":
        eps = rng.standard_normal((batch, 2))
        start = ota_start(teacher, eps, k, grid)
    else:
        raise ValueError(f"unknown method {method!r}")
    t_hi, t_lo = grid.t(k), grid.t(k - 1)
    end, _ = ode_solve(teacher, start, t_hi, t_lo, grid.teacher_substeps_per_stage)
    v_target = (end - start) / (t_lo - t_hi)
    t = rng.uniform(t_lo, t_hi, batch)
    z_t = start + ((t - t_hi) / (t_lo - t_hi))[:, None] * (end - start)
    return z_t, t, v_target


def distill_grads(params, z_t, t, v_target):
    """Loss and parameter gradients of the mean squared velocity error."""
    x = field_features(z_t, t)
    resid = forward(params, x) - v_target
    loss = float(np.mean(np.sum(resid ** 2, axis=1)))
    grads, _ = backward(params, x, 2.0 * resid / len(resid))
    return loss, grads


def train_student(teacher, data: MixtureSpec, method: str, grid: StageGrid,
                  net: MlpSpec = None, cfg: TrainConfig = TrainConfig(),
                  history: list = None) -> LearnedField:
    """Gradient descent on the piecewise loss with fresh pairs per iteration."""
    if method not in ("perflow", "ota"):
        raise ValueError(f"unknown method {method!r}")
    if net is None:
        net = MlpSpec(DEFAULT_WIDTHS, "silu", cfg.seed)
    params = init_params(net)
    state = init_adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.iterations):
        z_t, t, v_t = sample_training_batch(teacher, data, method, grid,
                                            cfg.batch_size, rng)
        loss, grads = distill_grads(params, z_t, t, v_t)
        if not np.isfinite(loss):
            raise TrainingError("distillation loss diverged")
        if history is not None:
            history.append(loss)
        params, state = adam_step(params, grads, state)
    return LearnedField(params)


def infer_few_step(student, grid: StageGrid, eps) -> np.ndarray:
    """K Euler steps, one per stage, evaluated at stage-boundary sigmas."""
    z = np.asarray(eps, dtype=np.float64)
    for k in range(grid.n_stages, 0, -1):
        v = student(z, grid.t(k))
        z = step_euler(z, v, grid.t(k), grid.t(k - 1))
    if not np.all(np.isfinite(z)):
        raise TrainingError("non-finite state during inference")
    return z
