import numpy as np
import pytest

from doskit.dynamics import HyperRectangle, SystemSpec


def make_scalar_system(gain=0.5, u_lo=0.0, u_hi=0.0, name="scalar"):
    """1-D test system x+ = gain*x + u with an explicit exact image."""

    def step(x, u):
        return gain * x + u

    def image(x):
        return gain * x + u_lo, gain * x + u_hi

    return SystemSpec(
        n=1,
        m=1,
        step_fn=step,
        input_box=HyperRectangle([u_lo], [u_hi]),
        domain_box=HyperRectangle([-1.0], [1.0]),
        f_image_fn=image,
        name=name,
    )


def make_linear_system_2d(a11=0.5, a22=0.4, u_bound=10.0, name="linear-2d"):
    """Stable diagonal 2-D system with a wide input box on the first axis."""
    A = np.diag([a11, a22])

    def step(x, u):
        y = x @ A.T
        parts = np.broadcast_arrays(y[..., 0] + u[..., 0], y[..., 1])
        return np.stack(parts, axis=-1)

    def image(x):
        y = x @ A.T
        lo = np.stack(np.broadcast_arrays(y[..., 0] - u_bound, y[..., 1]), axis=-1)
        hi = np.stack(np.broadcast_arrays(y[..., 0] + u_bound, y[..., 1]), axis=-1)
        return lo, hi

    return SystemSpec(
        n=2,
        m=1,
        step_fn=step,
        input_box=HyperRectangle([-u_bound], [u_bound]),
        domain_box=HyperRectangle([-1.0, -1.0], [1.0, 1.0]),
        f_image_fn=image,
        name=name,
    )


@pytest.fixture
def scalar_system():
    return make_scalar_system()


@pytest.fixture
def system_2d():
    from doskit.dynamics import make_system_2d

    return make_system_2d()


@pytest.fixture
def system_3d():
    from doskit.dynamics import make_system_3d

    return make_system_3d()
