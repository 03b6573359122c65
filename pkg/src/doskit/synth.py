"""Certification chain: linear gain, quadratic level sets, grid-certified
levels on the learned value function, and the piecewise controller.

All grid checks are deliberately non-formal: conditions are verified at
grid nodes only, and any decrease condition that fails at runtime is
surfaced as an error rather than masked.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dynamics import HyperRectangle, SystemSpec, Trajectory
from .errors import (CertificationError, CertificationViolationError,
                     NumericError, StabilizabilityError)
from .pinn import MlpModel, omega_nn
from .value import quadratic_form as quad_form

log = logging.getLogger(__name__)

_CHUNK = 4096  # grid points processed per batched decrease check


@dataclass
class Certificate:
    """Everything the piecewise controller needs, plus grid metadata."""

    K: np.ndarray          # (m, n) feedback gain, u = K x
    P: np.ndarray          # (n, n) quadratic Lyapunov matrix
    c1: float              # input-feasible quadratic level
    c2: float              # grid-enlarged quadratic level
    omega1: float          # value level below which the quadratic certificate rules
    omega2: float          # value level bounding the certified region
    grid_resolution: int
    u_grid_resolution: int

    def __post_init__(self):
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        self.P = np.asarray(self.P, dtype=float)
        self.validate()

    def validate(self) -> None:
        if not np.allclose(self.P, self.P.T, rtol=0.0, atol=1e-9):
            raise ValueError("certificate P must be symmetric")
        try:
            np.linalg.cholesky(self.P)
        except np.linalg.LinAlgError:
            raise ValueError("certificate P must be positive definite")
        if not (0.0 < self.c1 <= self.c2):
            raise ValueError("certificate levels require 0 < c1 <= c2")
        if not (0.0 < self.omega1 < self.omega2 < 1.0):
            raise ValueError("certificate levels require 0 < omega1 < omega2 < 1")
        if self.grid_resolution < 2 or self.u_grid_resolution < 1:
            raise ValueError("grid resolutions out of range")


@dataclass
class DosGrid:
    """Learned value function sampled on a tensor grid over the domain."""

    axes: list             # per-axis 1-D node arrays
    points: np.ndarray     # (G, n), C-order of the tensor product
    values: np.ndarray     # (G,) network values
    mask: np.ndarray       # (G,) True where value <= omega2
    omega2: float


def max_quad_over_box(P: np.ndarray, box: HyperRectangle) -> float:
    """Maximum of the quadratic form over a box (attained at a vertex)."""
    return float(np.max(quad_form(P, box.corners())))


def linearize(sys: SystemSpec, h: float = 1e-6):
    """Jacobians (A, B) at the origin equilibrium by central differences."""
    x0 = np.zeros(sys.n)
    u0 = np.zeros(sys.m)
    if np.linalg.norm(sys.step_fn(x0, u0)) > 1e-9:
        raise ValueError("origin is not an equilibrium under u = 0")
    A = np.empty((sys.n, sys.n))
    B = np.empty((sys.n, sys.m))
    for j in range(sys.n):
        e = np.zeros(sys.n)
        e[j] = h
        A[:, j] = (sys.step_fn(e, u0) - sys.step_fn(-e, u0)) / (2.0 * h)
    for j in range(sys.m):
        e = np.zeros(sys.m)
        e[j] = h
        B[:, j] = (sys.step_fn(x0, e) - sys.step_fn(x0, -e)) / (2.0 * h)
    return A, B


def spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def design_gain(A: np.ndarray, B: np.ndarray, tol: float = 1e-10,
                max_iter: int = 100_000) -> np.ndarray:
    """Stabilizing feedback u = Kx from the Riccati recursion (Q = I, R = I)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n = A.shape[0]
    Q = np.eye(n)
    R = np.eye(B.shape[1])
    P = Q.copy()
    for _ in range(max_iter):
        G = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P_next = Q + A.T @ P @ (A - B @ G)
        if np.max(np.abs(P_next)) > 1e12:
            raise StabilizabilityError("Riccati recursion diverged")
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P))):
            P = P_next
            break
        P = P_next
    else:
        raise StabilizabilityError("Riccati recursion did not converge")
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if spectral_radius(A + B @ K) >= 1.0:
        raise StabilizabilityError("resulting closed loop is not stable")
    return K


def solve_discrete_lyapunov(A_cl: np.ndarray, Q: np.ndarray, tol: float = 1e-10,
                            max_iter: int = 100_000) -> np.ndarray:
    """Solve ``A' P A - P + Q = 0`` by fixed-point iteration."""
    A_cl = np.asarray(A_cl, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if not np.allclose(Q, Q.T, rtol=0.0, atol=1e-12):
        raise ValueError("Q must be symmetric")
    if spectral_radius(A_cl) >= 1.0:
        raise ValueError("A_cl must have spectral radius < 1")
    P = Q.copy()
    for _ in range(max_iter):
        P = A_cl.T @ P @ A_cl + Q
        if np.max(np.abs(A_cl.T @ P @ A_cl - P + Q)) < tol:
            return 0.5 * (P + P.T)
    raise NumericError("Lyapunov fixed-point iteration did not converge")


def compute_c1(P: np.ndarray, K: np.ndarray, input_box: HyperRectangle,
               domain_box: HyperRectangle) -> float:
    """Largest quadratic level on which u = Kx respects the input box.

    Closed form: ``min_i (u_i^max)^2 / (K_i P^{-1} K_i')``.  A zero gain
    makes the level unbounded; it is then clamped to the maximum of the
    quadratic form over the domain box.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if np.any(input_box.lo > 0.0) or np.any(input_box.hi < 0.0):
        raise ValueError("input box must contain u = 0")
    u_max = np.minimum(-input_box.lo, input_box.hi)
    sol = np.linalg.solve(P, K.T)           # P^{-1} K'
    dens = np.einsum("ij,ji->i", K, sol)    # K_i P^{-1} K_i'
    levels = np.where(dens > 0.0, u_max ** 2 / np.where(dens > 0.0, dens, 1.0), np.inf)
    c1 = float(np.min(levels))
    if not np.isfinite(c1):
        c1 = max_quad_over_box(P, domain_box)
    return c1


def state_grid_points(box: HyperRectangle, resolution: int):
    """Tensor grid over a box: per-axis nodes and the flattened (G, n) nodes."""
    axes = [np.linspace(box.lo[i], box.hi[i], resolution) for i in range(box.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    return axes, points


def input_grid_points(box: HyperRectangle, resolution: int) -> np.ndarray:
    """Tensor grid over the input box, shape (resolution^m, m)."""
    axes = [np.linspace(box.lo[i], box.hi[i], resolution) for i in range(box.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _has_decreasing_input(sys: SystemSpec, pts: np.ndarray, current: np.ndarray,
                          value_fn, u_pts: np.ndarray) -> np.ndarray:
    """For each point, is there a grid input that strictly decreases
    ``value_fn`` while keeping the successor inside the domain box?"""
    ok = np.empty(pts.shape[0], dtype=bool)
    for lo in range(0, pts.shape[0], _CHUNK):
        chunk = pts[lo:lo + _CHUNK]
        succ = sys.step_fn(chunk[:, None, :], u_pts[None, :, :])
        inside = sys.domain_box.contains(succ)
        vals = np.asarray(value_fn(succ.reshape(-1, sys.n))).reshape(chunk.shape[0], -1)
        better = inside & (vals < current[lo:lo + _CHUNK, None])
        ok[lo:lo + _CHUNK] = np.any(better, axis=1)
    return ok


def enlarge_c2(sys: SystemSpec, P: np.ndarray, c1: float, state_pts: np.ndarray,
               u_pts: np.ndarray, ladder_size: int = 200) -> float:
    """Grow the quadratic level while every grid point in the shell
    ``c1 <= nu(x) <= c2`` admits a decreasing, domain-preserving grid input.

    Walks a logarithmic ladder of candidate levels up to the maximum of the
    quadratic form over the domain box and stops before the first failure.
    """
    if c1 <= 0.0:
        raise ValueError("c1 must be positive")
    top = max_quad_over_box(P, sys.domain_box)
    if top <= c1:
        return c1
    nu = quad_form(P, state_pts)
    order = np.argsort(nu, kind="stable")
    nu_sorted = nu[order]
    pts_sorted = state_pts[order]
    start = int(np.searchsorted(nu_sorted, c1, side="left"))
    ladder = np.geomspace(c1, top, ladder_size)
    c2 = c1
    checked = start
    for level in ladder:
        upto = int(np.searchsorted(nu_sorted, level, side="right"))
        if upto > checked:
            new_pts = pts_sorted[checked:upto]
            ok = _has_decreasing_input(sys, new_pts, nu_sorted[checked:upto],
                                       lambda s: quad_form(P, s), u_pts)
            if not np.all(ok):
                return c2
            checked = upto
        c2 = float(level)
    return c2


def find_omega_levels(model: MlpModel, sys: SystemSpec, P: np.ndarray, c2: float,
                      state_pts: np.ndarray, u_pts: np.ndarray,
                      ladder_size: int = 100):
    """Grid-certified levels on the learned value function.

    ``omega1``: largest ladder level whose sublevel set stays inside the
    quadratic level set ``nu <= c2`` at every grid node.  ``omega2``:
    largest ladder level above ``omega1`` such that every grid node in the
    band admits a grid input strictly decreasing the learned value with the
    successor inside the domain.  Raises :class:`CertificationError` when
    either search comes up empty.
    """
    om = np.asarray(omega_nn(model, state_pts))
    nu = quad_form(P, state_pts)
    order = np.argsort(om, kind="stable")
    om_sorted = om[order]
    nu_running_max = np.maximum.accumulate(nu[order])
    pts_sorted = state_pts[order]

    ladder = np.linspace(0.0, 1.0, ladder_size + 2)[1:-1]
    omega1 = None
    for level in ladder:
        upto = int(np.searchsorted(om_sorted, level, side="right"))
        if upto > 0 and nu_running_max[upto - 1] > c2:
            break
        omega1 = float(level)
    if omega1 is None:
        raise CertificationError(
            "condition (i) failed: no level keeps the sublevel set inside nu <= c2")

    omega2 = None
    band_start = int(np.searchsorted(om_sorted, omega1, side="left"))
    checked = band_start
    for level in ladder[ladder > omega1]:
        upto = int(np.searchsorted(om_sorted, level, side="right"))
        if upto > checked:
            new_pts = pts_sorted[checked:upto]
            ok = _has_decreasing_input(sys, new_pts, om_sorted[checked:upto],
                                       lambda s: omega_nn(model, s), u_pts)
            if not np.all(ok):
                break
            checked = upto
        omega2 = float(level)
    if omega2 is None:
        raise CertificationError(
            "condition (ii) failed: no level above omega1 admits decreasing inputs")
    return omega1, omega2


def _greedy_input(sys: SystemSpec, x: np.ndarray, current: float, value_fn,
                  u_pts: np.ndarray, what: str) -> np.ndarray:
    succ = sys.step_fn(x[None, :], u_pts)
    inside = sys.domain_box.contains(succ)
    vals = np.asarray(value_fn(succ))
    feasible = inside & (vals < current)
    if not np.any(feasible):
        raise CertificationViolationError(
            f"no grid input decreases {what} at x = {np.array2string(x, precision=6)}")
    idx = np.flatnonzero(feasible)
    mags = np.linalg.norm(u_pts[idx], axis=-1)
    # argmin of the successor value; ties by smallest input, then grid order
    best = idx[np.lexsort((idx, mags, vals[idx]))[0]]
    return u_pts[best]


def controller_pi(cert: Certificate, model: MlpModel, sys: SystemSpec, x):
    """Piecewise controller on the certified region.

    Returns ``(u, branch)`` with branch 1 = clamped linear feedback inside
    the input-feasible quadratic set, branch 2 = grid-greedy descent of the
    quadratic form in the shell up to c2, branch 3 = grid-greedy descent of
    the learned value function elsewhere below omega2.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state must have shape ({sys.n},)")
    om = float(omega_nn(model, x))
    if om > cert.omega2:
        raise ValueError(f"state outside the certified region: omega_nn = {om:.6f}"
                         f" > omega2 = {cert.omega2:.6f}")
    u_pts = input_grid_points(sys.input_box, cert.u_grid_resolution)
    if om <= cert.omega1:
        nu = quad_form(cert.P, x)
        if nu <= cert.c1:
            u = np.clip(cert.K @ x, sys.input_box.lo, sys.input_box.hi)
            return u, 1
        u = _greedy_input(sys, x, nu, lambda s: quad_form(cert.P, s), u_pts,
                          "the quadratic form")
        return u, 2
    u = _greedy_input(sys, x, om, lambda s: omega_nn(model, s), u_pts,
                      "the learned value")
    return u, 3


@dataclass
class ClosedLoopRun:
    """A simulated closed-loop trajectory with per-step branch labels."""

    trajectory: Trajectory
    branches: np.ndarray  # (K,) int


def simulate_closed_loop(sys: SystemSpec, cert: Certificate, model: MlpModel,
                         x0, max_steps: int, stop_tol: float = 1e-3) -> ClosedLoopRun:
    """Iterate the piecewise controller from ``x0`` until the state norm
    falls below ``stop_tol`` or ``max_steps`` elapse.

    Each step re-checks the active branch's certificate: the quadratic form
    or the learned value must strictly decrease, or a branch-1 step must
    stay in the branch-1 region.  A violation (or a step with no decreasing
    grid input) raises :class:`CertificationViolationError` carrying the
    step index and the partial run.
    """
    x = np.asarray(x0, dtype=float)
    states = [x.copy()]
    inputs: list = []
    branches: list = []

    def partial() -> ClosedLoopRun:
        return ClosedLoopRun(
            Trajectory(np.array(states), np.array(inputs).reshape(len(inputs), sys.m)),
            np.array(branches, dtype=int))

    for k in range(max_steps):
        if np.linalg.norm(x) <= stop_tol:
            break
        try:
            u, branch = controller_pi(cert, model, sys, x)
        except CertificationViolationError as err:
            raise CertificationViolationError(str(err), step=k, partial=partial())
        x_next = sys.step_fn(x, u)
        om, om_next = float(omega_nn(model, x)), float(omega_nn(model, x_next))
        nu, nu_next = quad_form(cert.P, x), quad_form(cert.P, x_next)
        persists = branch == 1 and om_next <= cert.omega1 and nu_next <= cert.c1
        if not (nu_next < nu or om_next < om or persists):
            states.append(x_next)
            inputs.append(u)
            branches.append(branch)
            raise CertificationViolationError(
                f"decrease failed on branch {branch} at step {k}",
                step=k, partial=partial())
        states.append(x_next)
        inputs.append(u)
        branches.append(branch)
        x = x_next
    return partial()


def dos_grid(model: MlpModel, sys: SystemSpec, omega2: float,
             resolution: int) -> DosGrid:
    """Evaluate the learned value function on a tensor grid and threshold it."""
    axes, points = state_grid_points(sys.domain_box, resolution)
    values = np.empty(points.shape[0])
    for lo in range(0, points.shape[0], _CHUNK):
        values[lo:lo + _CHUNK] = omega_nn(model, points[lo:lo + _CHUNK])
    return DosGrid(axes=axes, points=points, values=values,
                   mask=values <= omega2, omega2=float(omega2))


def revalidate_certificate(cert: Certificate, model: MlpModel,
                           sys: SystemSpec) -> dict:
    """Re-check every grid condition recorded in a certificate.

    Returns per-condition counts; raises :class:`CertificationError` on the
    first failing condition.
    """
    _, state_pts = state_grid_points(sys.domain_box, cert.grid_resolution)
    u_pts = input_grid_points(sys.input_box, cert.u_grid_resolution)
    om = np.asarray(omega_nn(model, state_pts))
    nu = quad_form(cert.P, state_pts)

    sub1 = om <= cert.omega1
    if np.any(nu[sub1] > cert.c2):
        raise CertificationError("condition (i) re-check failed: omega1 sublevel "
                                 "set leaves nu <= c2")
    shell = (nu >= cert.c1) & (nu <= cert.c2)
    ok = _has_decreasing_input(sys, state_pts[shell], nu[shell],
                               lambda s: quad_form(cert.P, s), u_pts)
    if not np.all(ok):
        raise CertificationError("quadratic shell re-check failed: a grid point "
                                 "admits no decreasing input")
    band = (om >= cert.omega1) & (om <= cert.omega2)
    ok = _has_decreasing_input(sys, state_pts[band], om[band],
                               lambda s: omega_nn(model, s), u_pts)
    if not np.all(ok):
        raise CertificationError("condition (ii) re-check failed: a band point "
                                 "admits no decreasing input")
    return {"sublevel_points": int(np.sum(sub1)),
            "shell_points": int(np.sum(shell)),
            "band_points": int(np.sum(band))}
