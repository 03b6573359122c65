"""Domain-of-stabilization estimation for input-constrained discrete-time
systems via set-based value function learning and grid-certified control."""

from .dynamics import (HyperRectangle, SystemSpec, Trajectory, f_image,
                       make_system, make_system_2d, make_system_3d, rollout, step)
from .pinn import (MlpModel, TrainConfig, ValueDataset, embed_rect,
                   embed_singleton, forward, generate_dataset, init_mlp,
                   load_checkpoint, loss_data, loss_pi, omega_nn,
                   save_checkpoint, train)
from .synth import (Certificate, ClosedLoopRun, DosGrid, compute_c1,
                    controller_pi, design_gain, dos_grid, enlarge_c2,
                    find_omega_levels, linearize, revalidate_certificate,
                    simulate_closed_loop, solve_discrete_lyapunov)
from .value import (AlphaFn, SampledReach, ValueParams, alpha, bellman_residual_v,
                    beta, oracle_value, oracle_value_points, psi, sample_signal,
                    sampled_reach, v_tilde, w_tilde, xi, zubov_residual_w)

__version__ = "0.1.0"

__all__ = [
    "AlphaFn", "Certificate", "ClosedLoopRun", "DosGrid", "HyperRectangle",
    "MlpModel", "SampledReach", "SystemSpec", "TrainConfig", "Trajectory",
    "ValueDataset", "ValueParams", "alpha", "bellman_residual_v", "beta",
    "compute_c1", "controller_pi", "design_gain", "dos_grid", "embed_rect",
    "embed_singleton", "enlarge_c2", "f_image", "find_omega_levels", "forward",
    "generate_dataset", "init_mlp", "linearize", "load_checkpoint", "loss_data",
    "loss_pi", "make_system", "make_system_2d", "make_system_3d", "omega_nn",
    "oracle_value", "oracle_value_points", "psi", "revalidate_certificate",
    "rollout", "sample_signal", "sampled_reach", "save_checkpoint",
    "simulate_closed_loop", "solve_discrete_lyapunov", "step", "train",
    "v_tilde", "w_tilde", "xi", "zubov_residual_w",
]
