"""Set-based value functions over sampled reachable sets.

The running cost of a compact set is the minimum of a quadratic form over
it; accumulating that cost along the reachable-set recursion gives a value
function whose 1-sublevel set (after the bounded transform) is the domain
of stabilization.  Reachable sets of singletons are approximated by clouds
of trajectories under randomly sampled input signals; an exact finite-
input-lattice enumeration serves as the independent test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import SystemSpec
from .errors import BudgetExceededError

_BELOW_ONE = float(np.nextafter(1.0, 0.0))
_EXP_CAP = 700.0          # keeps exp() finite in the transforms
_DEDUP_TOL = 1e-12        # absolute per-coordinate oracle deduplication
_ORACLE_BUDGET = 10_000_000


@dataclass
class AlphaFn:
    """Quadratic running cost ``c * x'Px`` with P symmetric positive definite."""

    P: np.ndarray
    c: float = 1.0

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.c = float(self.c)
        if self.P.ndim != 2 or self.P.shape[0] != self.P.shape[1]:
            raise ValueError("P must be a square matrix")
        if not np.allclose(self.P, self.P.T, rtol=0.0, atol=1e-12):
            raise ValueError("P must be symmetric")
        try:
            np.linalg.cholesky(self.P)
        except np.linalg.LinAlgError:
            raise ValueError("P must be positive definite")
        if not self.c > 0.0:
            raise ValueError("c must be positive")

    @property
    def n(self) -> int:
        return self.P.shape[0]


@dataclass
class ValueParams:
    """Sampling parameters for the finite-horizon value approximation."""

    n_s: int = 30       # truncation horizon
    n_traj: int = 5000  # sampled input signals per initial state
    seed: int = 0

    def __post_init__(self):
        if self.n_s < 1:
            raise ValueError("n_s must be >= 1")
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")


@dataclass
class SampledReach:
    """Per-step point clouds approximating the reachable sets of ``{x}``."""

    clouds: list  # clouds[k]: (n_k, n) array; clouds[0] is the singleton


def quadratic_form(P: np.ndarray, x):
    """Evaluate ``x' P x`` batched over leading axes.

    Expanded as a fixed sequence of elementwise operations, so results are
    bit-identical for any batch shape (unlike BLAS-backed contractions).
    """
    x = np.asarray(x, dtype=float)
    n = P.shape[0]
    if x.shape[-1] != n:
        raise ValueError(f"state dimension {x.shape[-1]} does not match P ({n})")
    q = P[0, 0] * x[..., 0] * x[..., 0]
    for i in range(n):
        for j in range(i, n):
            if i == j == 0:
                continue
            coef = P[i, j] if i == j else P[i, j] + P[j, i]
            q = q + coef * x[..., i] * x[..., j]
    return float(q) if q.ndim == 0 else q


def alpha(a: AlphaFn, x):
    """Evaluate the running cost, batched over leading axes.

    States with non-finite coordinates (overflowed rollouts) cost +inf.
    """
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        q = np.asarray(quadratic_form(a.P, x))
        q = np.where(np.all(np.isfinite(x), axis=-1), q, np.inf)
        out = a.c * q
    return float(out) if out.ndim == 0 else out


def psi(points, a: AlphaFn) -> float:
    """Minimum running cost over a finite, nonempty point set."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise ValueError("point set must be nonempty")
    pts = pts.reshape(-1, pts.shape[-1])
    return float(np.min(alpha(a, pts)))


def _signal_block(sys: SystemSpec, n_traj: int, horizon: int,
                  rng: np.random.Generator) -> np.ndarray:
    # One contiguous draw so the first m rows of a larger block reproduce a
    # smaller block bit-exactly (nested-sample monotonicity relies on this).
    raw = rng.random((n_traj, horizon, sys.m))
    return sys.input_box.lo + raw * sys.input_box.width


def sample_signal(sys: SystemSpec, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an input signal with i.i.d. uniform entries over U, shape (horizon, m)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return _signal_block(sys, 1, horizon, rng)[0]


def sampled_reach(sys: SystemSpec, x, vp: ValueParams,
                  rng: np.random.Generator | None = None) -> SampledReach:
    """Approximate the reachable sets of ``{x}`` by sampled trajectories.

    ``clouds[k]`` collects the time-k states of ``n_traj`` rollouts under
    independently drawn input signals; ``clouds[0]`` is the singleton.
    """
    rng = np.random.default_rng(vp.seed) if rng is None else rng
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state must have shape ({sys.n},)")
    signals = _signal_block(sys, vp.n_traj, vp.n_s, rng)
    clouds = [x[None, :].copy()]
    states = np.broadcast_to(x, (vp.n_traj, sys.n)).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(vp.n_s):
            states = sys.step_fn(states, signals[:, k, :])
            clouds.append(states.copy())
    return SampledReach(clouds)


def v_tilde(sys: SystemSpec, x, a: AlphaFn, vp: ValueParams,
            rng: np.random.Generator | None = None) -> float:
    """Finite-horizon sampled value: sum of per-step cloud minima of alpha.

    Streams through the rollout instead of materializing the clouds;
    bit-identical to summing ``psi`` over ``sampled_reach`` with the same
    generator state.  May return +inf when every sampled rollout diverges.
    """
    rng = np.random.default_rng(vp.seed) if rng is None else rng
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state must have shape ({sys.n},)")
    signals = _signal_block(sys, vp.n_traj, vp.n_s, rng)
    total = float(alpha(a, x))
    states = np.broadcast_to(x, (vp.n_traj, sys.n)).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(vp.n_s):
            states = sys.step_fn(states, signals[:, k, :])
            total += float(np.min(alpha(a, states)))
    return total


def v_tilde_batch(sys: SystemSpec, xs: np.ndarray, a: AlphaFn, vp: ValueParams,
                  seeds) -> np.ndarray:
    """Evaluate :func:`v_tilde` for several states at once.

    ``seeds[i]`` seeds state i's signal stream; results are bit-identical to
    per-state calls with ``default_rng(seeds[i])``, just amortized over one
    array sweep.
    """
    xs = np.asarray(xs, dtype=float)
    batch = xs.shape[0]
    signals = np.empty((batch, vp.n_traj, vp.n_s, sys.m))
    for b, sd in enumerate(seeds):
        signals[b] = _signal_block(sys, vp.n_traj, vp.n_s, np.random.default_rng(sd))
    totals = np.asarray(alpha(a, xs), dtype=float).copy()
    states = np.broadcast_to(xs[:, None, :], (batch, vp.n_traj, sys.n)).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(vp.n_s):
            states = sys.step_fn(states, signals[:, :, k, :])
            totals += np.min(alpha(a, states), axis=-1)
    return totals


def w_tilde(v):
    """Bounded transform ``1 - exp(-v)`` mapping [0, inf] onto [0, 1].

    Finite inputs land strictly below 1; +inf maps to exactly 1.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v < 0.0):
        raise ValueError("value must be nonnegative")
    with np.errstate(over="ignore"):
        w = -np.expm1(-v)
    w = np.where(np.isposinf(v), 1.0, np.minimum(w, _BELOW_ONE))
    return float(w) if w.ndim == 0 else w


def xi(psi_val):
    """Transform ``1 - exp(-psi)``, saturating just below 1."""
    p = np.minimum(np.asarray(psi_val, dtype=float), _EXP_CAP)
    out = np.minimum(-np.expm1(-p), _BELOW_ONE)
    return float(out) if out.ndim == 0 else out


def beta(psi_val):
    """Transform ``exp(psi) - 1``, computed as ``xi / (1 - xi)``.

    Pairing through xi makes ``(1 - xi(p)) * (1 + beta(p)) == 1`` hold to
    machine precision, which a direct expm1 evaluation does not for large p.
    """
    x = np.asarray(xi(psi_val))
    out = x / (1.0 - x)
    return float(out) if out.ndim == 0 else out


def bellman_residual_v(v_of_x: float, v_of_fx: float, psi_x: float) -> float:
    """Residual of the additive value equation ``v(X) = psi(X) + v(F(X))``."""
    return v_of_x - psi_x - v_of_fx


def zubov_residual_w(w_x, w_fx, xi_x):
    """Residual of the bounded-value equation ``w(X)-w(F(X)) = xi(X)(1-w(F(X)))``."""
    w_x = np.asarray(w_x, dtype=float)
    out = w_x - w_fx - xi_x * (1.0 - np.asarray(w_fx, dtype=float))
    return float(out) if out.ndim == 0 else out


def _dedup(points: np.ndarray) -> np.ndarray:
    """Canonical representatives of points coinciding within the oracle tolerance."""
    keys = np.round(points / _DEDUP_TOL).astype(np.int64)
    _, idx = np.unique(keys, axis=0, return_index=True)
    return points[idx]


def _as_lattice(u_lattice, m: int) -> np.ndarray:
    lat = np.asarray(u_lattice, dtype=float)
    if lat.ndim == 1:
        lat = lat[:, None]
    if lat.ndim != 2 or lat.shape[1] != m:
        raise ValueError(f"input lattice must have shape (L, {m})")
    if lat.shape[0] == 0:
        raise ValueError("input lattice must be nonempty")
    return lat


def oracle_value_points(sys: SystemSpec, points, a: AlphaFn, u_lattice,
                        horizon: int) -> float:
    """Exact finite-horizon value of a point set under a finite input lattice.

    Expands every lattice input from every point of the current level,
    deduplicates, and accumulates the per-level minimum of alpha.  Raises
    :class:`BudgetExceededError` when a level would exceed the point budget.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    lat = _as_lattice(u_lattice, sys.m)
    level = np.asarray(points, dtype=float).reshape(-1, sys.n)
    level = _dedup(level)
    total = float(np.min(alpha(a, level)))
    for _ in range(horizon):
        if level.shape[0] * lat.shape[0] > _ORACLE_BUDGET:
            raise BudgetExceededError(
                f"oracle level would expand to {level.shape[0] * lat.shape[0]} points")
        expanded = sys.step_fn(level[:, None, :], lat[None, :, :])
        level = _dedup(expanded.reshape(-1, sys.n))
        total += float(np.min(alpha(a, level)))
    return total


def oracle_value(sys: SystemSpec, x, a: AlphaFn, u_lattice, horizon: int) -> float:
    """Exact finite-horizon value of a singleton under a finite input lattice."""
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state must have shape ({sys.n},)")
    return oracle_value_points(sys, x[None, :], a, u_lattice, horizon)
