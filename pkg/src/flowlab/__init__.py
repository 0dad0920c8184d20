"""Desk-scale lab for piecewise rectified-flow distillation on 2D data."""

from .sched import (SigmaSchedule, InferenceSigmas, shift_sigma,
                    build_base_schedule, sample_original, sample_improved,
                    step_euler)
from .netcore import (MlpSpec, MlpParams, AdamState, TrainingError,
                      init_params, forward, backward, init_adam, adam_step,
                      save_params, load_params)
from .flow import (MixtureSpec, AnalyticField, LearnedField, Trajectory,
                   TrainConfig, SIGMA_FLOOR, default_benchmark, point_mass,
                   sample_data, interpolate, analytic_velocity, ode_solve,
                   train_flow_matching)
from .distill import (StageGrid, DistillPair, default_grid, make_pair_perflow,
                      make_pair_ota, ota_start, distill_loss, train_student,
                      infer_few_step)
from .adv import (AdvConfig, Discriminator, TrajectoryStates,
                  init_discriminator, disc_forward, trajectory_states,
                  adv_loss_student, disc_loss, fm_loss, student_objective,
                  sample_timestep, train_adversarial)
from .diag import (MismatchReport, w2_exact_small, energy_distance,
                   energy_permutation_test, teacher_trajectory_divergence,
                   interstage_distance, expected_velocity_residual)

__version__ = "0.1.0"
