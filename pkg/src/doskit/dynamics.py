"""Discrete-time control systems, rollouts, and exact one-step set images.

A system is ``x_{k+1} = f(x_k, u_k)`` with inputs constrained to a box U.
For the input-affine benchmark systems shipped here, the one-step image of
a single state, ``f(x, U)``, is an axis-aligned box and is supplied in
closed form alongside the step map.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class HyperRectangle:
    """Axis-aligned box ``[lo, hi]``; zero-width dimensions are allowed."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ValueError("lo and hi must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise ValueError("box bounds must be finite")
        if np.any(self.lo > self.hi):
            raise ValueError("box requires lo <= hi componentwise")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, tol: float = 0.0):
        """Membership test, batched over leading axes of ``x``."""
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Uniform samples from the box; degenerate axes return their value."""
        shape = (self.dim,) if size is None else (size, self.dim)
        return self.lo + rng.random(shape) * self.width

    def corners(self) -> np.ndarray:
        """All 2^dim vertices, shape (2^dim, dim)."""
        cols = [(self.lo[i], self.hi[i]) for i in range(self.dim)]
        return np.array(list(itertools.product(*cols)), dtype=float)


@dataclass
class SystemSpec:
    """Immutable description of a controlled discrete-time system.

    ``step_fn(x, u)`` must broadcast over leading axes (states ``(..., n)``
    against inputs ``(..., m)``).  ``f_image_fn(x)`` returns the exact image
    ``f(x, U)`` of a single state as a ``(lo, hi)`` pair of ``(..., n)``
    arrays; it must broadcast the same way.
    """

    n: int
    m: int
    step_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    input_box: HyperRectangle
    domain_box: HyperRectangle
    f_image_fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    name: str = ""

    def __post_init__(self):
        if self.input_box.dim != self.m:
            raise ValueError("input_box dimension does not match m")
        if self.domain_box.dim != self.n:
            raise ValueError("domain_box dimension does not match n")


@dataclass
class Trajectory:
    """States ``(K+1, n)`` and the inputs ``(K, m)`` that produced them."""

    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.states.ndim != 2 or self.inputs.ndim != 2:
            raise ValueError("states and inputs must be 2-D arrays")
        if self.states.shape[0] != self.inputs.shape[0] + 1:
            raise ValueError("need exactly one more state than inputs")

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]


def step(sys: SystemSpec, x, u) -> np.ndarray:
    """One step of the dynamics for a single state/input pair."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state must have shape ({sys.n},), got {x.shape}")
    if u.shape != (sys.m,):
        raise ValueError(f"input must have shape ({sys.m},), got {u.shape}")
    return sys.step_fn(x, u)


def rollout(sys: SystemSpec, x0, inputs) -> Trajectory:
    """Roll the system forward under an admissible input signal."""
    x0 = np.asarray(x0, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if x0.shape != (sys.n,):
        raise ValueError(f"initial state must have shape ({sys.n},)")
    if inputs.ndim != 2 or inputs.shape[1] != sys.m:
        raise ValueError(f"inputs must have shape (K, {sys.m})")
    if not np.all(sys.input_box.contains(inputs)):
        raise ValueError("input signal leaves the input box U")
    states = np.empty((inputs.shape[0] + 1, sys.n))
    states[0] = x0
    for k in range(inputs.shape[0]):
        states[k + 1] = sys.step_fn(states[k], inputs[k])
    return Trajectory(states, inputs)


def f_image(sys: SystemSpec, x) -> HyperRectangle:
    """Exact one-step image ``f(x, U)`` of a single state, as a box."""
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state must have shape ({sys.n},), got {x.shape}")
    lo, hi = sys.f_image_fn(x)
    return HyperRectangle(lo, hi)


def _step_2d(x, u):
    x1, x2 = x[..., 0], x[..., 1]
    w = u[..., 0]
    parts = np.broadcast_arrays(x1 + 0.1 * x2,
                                x2 + 0.1 * (x1 + x1 ** 3 + x2 + w))
    return np.stack(parts, axis=-1)


def _image_2d(x):
    x1, x2 = x[..., 0], x[..., 1]
    first = x1 + 0.1 * x2
    drift = x2 + 0.1 * (x1 + x1 ** 3 + x2)
    # u in [-0.5, 0.5] enters the second coordinate scaled by 0.1
    lo = np.stack([first, drift - 0.05], axis=-1)
    hi = np.stack([first, drift + 0.05], axis=-1)
    return lo, hi


def _step_3d(x, u):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    w = u[..., 0]
    parts = np.broadcast_arrays(x1 + 0.1 * x2,
                                x2 + 0.1 * x3,
                                x3 + 0.1 * (x1 + x1 ** 3 - x2 + w))
    return np.stack(parts, axis=-1)


def _image_3d(x):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    first = x1 + 0.1 * x2
    second = x2 + 0.1 * x3
    drift = x3 + 0.1 * (x1 + x1 ** 3 - x2)
    # u in [-1, 1] enters the third coordinate scaled by 0.1
    lo = np.stack([first, second, drift - 0.1], axis=-1)
    hi = np.stack([first, second, drift + 0.1], axis=-1)
    return lo, hi


def make_system_2d() -> SystemSpec:
    """Planar benchmark: cubic drift, unstable origin, U = [-0.5, 0.5]."""
    return SystemSpec(
        n=2,
        m=1,
        step_fn=_step_2d,
        input_box=HyperRectangle([-0.5], [0.5]),
        domain_box=HyperRectangle([-1.0, -1.0], [1.0, 1.0]),
        f_image_fn=_image_2d,
        name="builtin-2d",
    )


def make_system_3d() -> SystemSpec:
    """Triple-integrator-like benchmark with cubic drift and U = [-1, 1]."""
    return SystemSpec(
        n=3,
        m=1,
        step_fn=_step_3d,
        input_box=HyperRectangle([-1.0], [1.0]),
        domain_box=HyperRectangle([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]),
        f_image_fn=_image_3d,
        name="builtin-3d",
    )


_BUILTIN = {"builtin-2d": make_system_2d, "builtin-3d": make_system_3d}


def make_system(name: str) -> SystemSpec:
    """Look up a shipped benchmark system by name."""
    try:
        return _BUILTIN[name]()
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(_BUILTIN)}")
