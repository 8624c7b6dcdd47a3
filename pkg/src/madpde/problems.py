"""The parametric PDE families: residuals, boundary data and samplers.

Three task variants are supported:

* ``OdeShiftTask``  -- du/dx = 2(x-eta)cos((x-eta)^2) on (-pi, pi) with both
  endpoint values prescribed; the task parameter is the shift eta.
* ``BurgersTask``   -- u_t + u u_x = nu u_xx on the periodic unit interval,
  t in (0,1]; the parameter is the initial condition (a GRF sample).  The
  spatial periodicity is enforced exactly by the network's periodic input
  encoding, so the boundary batch carries only the t=0 condition.
* ``LaplaceTriangleTask`` -- u_xx + u_yy = 0 on a triangle inscribed in the
  unit circle, with Dirichlet data given by the harmonic extension of a GRF
  on the circle, restricted to the triangle edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import diffcore as dc
from . import oracles
from .grf import GrfSample
from .network import NetworkConfig


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class OdeShiftTask:
    eta: float

    variant = "ode_shift"
    input_dim = 1

    def __post_init__(self):
        if not np.isfinite(self.eta):
            raise ProblemError("eta must be finite")


@dataclass(frozen=True)
class BurgersTask:
    u0: GrfSample
    nu: float

    variant = "burgers"
    input_dim = 2  # (x, t)

    def __post_init__(self):
        if self.nu <= 0:
            raise ProblemError("viscosity must be positive")


MIN_ANGLE_GAP = 1e-3


@dataclass(frozen=True)
class LaplaceTriangleTask:
    vertex_angles: tuple[float, float, float]
    boundary_field: GrfSample

    variant = "laplace_triangle"
    input_dim = 2  # (x, y)

    def __post_init__(self):
        a = np.mod(np.asarray(self.vertex_angles, dtype=float), 2 * np.pi)
        for i in range(3):
            for j in range(i + 1, 3):
                gap = abs(a[i] - a[j])
                gap = min(gap, 2 * np.pi - gap)
                if gap < MIN_ANGLE_GAP:
                    raise ProblemError(f"degenerate triangle: vertices {i} and {j} "
                                       f"are {gap:.2e} rad apart")
        if self.boundary_field.domain != "unit_circle":
            raise ProblemError("boundary field must live on the unit circle")

    def vertices(self) -> np.ndarray:
        a = np.asarray(self.vertex_angles, dtype=float)
        return np.stack([np.cos(a), np.sin(a)], axis=1)


Task = Union[OdeShiftTask, BurgersTask, LaplaceTriangleTask]


def task_to_json(task: Task) -> dict:
    if isinstance(task, OdeShiftTask):
        return {"variant": task.variant, "eta": task.eta}
    if isinstance(task, BurgersTask):
        return {"variant": task.variant, "nu": task.nu, "u0": task.u0.to_json()}
    if isinstance(task, LaplaceTriangleTask):
        return {"variant": task.variant,
                "vertex_angles": list(task.vertex_angles),
                "boundary_field": task.boundary_field.to_json()}
    raise ProblemError(f"unknown task {task!r}")


def task_from_json(d: dict) -> Task:
    v = d.get("variant")
    if v == "ode_shift":
        return OdeShiftTask(float(d["eta"]))
    if v == "burgers":
        return BurgersTask(GrfSample.from_json(d["u0"]), float(d["nu"]))
    if v == "laplace_triangle":
        return LaplaceTriangleTask(tuple(float(a) for a in d["vertex_angles"]),
                                   GrfSample.from_json(d["boundary_field"]))
    raise ProblemError(f"unknown task variant {v!r}")


def network_input_dim(task: Task) -> int:
    return task.input_dim


def default_encoding(task: Task) -> str:
    return "periodic_x" if isinstance(task, BurgersTask) else "identity"


def directions_needed(task: Task) -> dict[int, int]:
    """Coordinate direction -> derivative order required by the residual."""
    if isinstance(task, OdeShiftTask):
        return {0: 1}
    if isinstance(task, BurgersTask):
        return {0: 2, 1: 1}  # u_x, u_xx and u_t
    return {0: 2, 1: 2}


def ode_forcing(eta: float, x: np.ndarray) -> np.ndarray:
    return 2.0 * (x - eta) * np.cos((x - eta) ** 2)


def residual_coefficients(task: Task, points: np.ndarray) -> dict:
    """Per-row residual data for one task (stackable across tasks)."""
    if isinstance(task, OdeShiftTask):
        return {"forcing": ode_forcing(task.eta, points[:, :1])}
    if isinstance(task, BurgersTask):
        return {"nu": task.nu}
    if isinstance(task, LaplaceTriangleTask):
        return {}
    raise ProblemError(f"unknown task {task!r}")


def residual_op(variant: str, jets: dict, coef: dict):
    """Pointwise PDE residual from jets; the single code path shared by
    per-task and batched multi-task loss assembly."""
    try:
        if variant == "ode_shift":
            return dc.sub(jets[0].d1, coef["forcing"])
        if variant == "burgers":
            uxx = jets[0].d2
            if uxx is None:
                raise ProblemError("Burgers residual needs second x-derivatives")
            advect = dc.add(jets[1].d1, dc.mul(jets[0].val, jets[0].d1))
            return dc.sub(advect, dc.mul(coef["nu"], uxx))
        if variant == "laplace_triangle":
            if jets[0].d2 is None or jets[1].d2 is None:
                raise ProblemError("Laplace residual needs both second derivatives")
            return dc.add(jets[0].d2, jets[1].d2)
    except KeyError as e:
        raise ProblemError(f"missing derivative direction {e} for {variant}")
    raise ProblemError(f"unknown variant {variant!r}")


def residual(task: Task, points: np.ndarray, jets: dict):
    """PDE residual at ``points`` (one row per point); zero iff the PDE holds.

    ``jets`` maps coordinate direction -> Jet2 and may hold tape variables
    or plain arrays.
    """
    return residual_op(task.variant, jets, residual_coefficients(task, points))


_BOUNDARY_TOL = 1e-9


def boundary_targets(task: Task, points: np.ndarray) -> np.ndarray:
    """Dirichlet target values at boundary points (validated)."""
    points = np.atleast_2d(points)
    if isinstance(task, OdeShiftTask):
        x = points[:, 0]
        if np.any(np.minimum(np.abs(x - np.pi), np.abs(x + np.pi)) > _BOUNDARY_TOL):
            raise ProblemError("ODE boundary points must be the interval endpoints")
        return oracles.ode_exact(task.eta, x)
    if isinstance(task, BurgersTask):
        if np.any(np.abs(points[:, 1]) > _BOUNDARY_TOL):
            raise ProblemError("Burgers boundary points must lie on the t=0 slice")
        from .grf import evaluate_grf
        return evaluate_grf(task.u0, points[:, 0])
    if isinstance(task, LaplaceTriangleTask):
        _assert_on_edges(task, points)
        return oracles.laplace_solution_xy(task.boundary_field,
                                           points[:, 0], points[:, 1])
    raise ProblemError(f"unknown task {task!r}")


def boundary_residual(task: Task, u_value, point) -> float:
    """u(point) minus the Dirichlet target; errors off the boundary set."""
    target = boundary_targets(task, np.atleast_2d(point))
    return float(np.asarray(u_value).ravel()[0] - target[0])


def _barycentric(verts: np.ndarray, points: np.ndarray) -> np.ndarray:
    a, b, c = verts
    T = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
    uv = np.linalg.solve(T, (points - a).T).T
    return np.stack([1.0 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]], axis=1)


def _assert_on_edges(task: LaplaceTriangleTask, points: np.ndarray):
    bary = _barycentric(task.vertices(), points)
    inside = np.all(bary > -1e-9, axis=1)
    on_edge = np.min(np.abs(bary), axis=1) < 1e-7
    if not np.all(inside & on_edge):
        raise ProblemError("points must lie on the triangle edges")


@dataclass
class SampleBatch:
    """Interior collocation points plus (boundary point, target) pairs."""

    interior: np.ndarray        # (M_r, d)
    boundary: np.ndarray        # (M_bc, d)
    boundary_values: np.ndarray  # (M_bc,)

    def __post_init__(self):
        if self.interior.ndim != 2 or self.boundary.ndim != 2:
            raise ValueError("points must be 2-D arrays")
        if self.boundary.shape[0] != self.boundary_values.shape[0]:
            raise ValueError("boundary targets must match boundary points")


def sample_batch(task: Task, M_r: int, M_bc: int, rng: np.random.Generator) -> SampleBatch:
    """Collocation batch for one task.

    ODE: fixed equidistant grid on [-pi, pi] with the two endpoints as the
    boundary set (M_bc is ignored there).  Burgers: uniform (x,t) on
    (0,1) x (0,1] with M_bc initial-slice points.  Laplace: uniform interior
    by barycentric sampling, boundary uniform-by-length over the edges.
    """
    if M_r < 1 or M_bc < 1:
        raise ValueError("batch sizes must be >= 1")
    if isinstance(task, OdeShiftTask):
        x = np.linspace(-np.pi, np.pi, M_r).reshape(-1, 1)
        bc = np.array([[-np.pi], [np.pi]])
        return SampleBatch(x, bc, boundary_targets(task, bc))
    if isinstance(task, BurgersTask):
        x = rng.random(M_r)
        t = 1.0 - rng.random(M_r)  # (0, 1]
        interior = np.stack([x, t], axis=1)
        xb = rng.random(M_bc)
        bc = np.stack([xb, np.zeros(M_bc)], axis=1)
        return SampleBatch(interior, bc, boundary_targets(task, bc))
    if isinstance(task, LaplaceTriangleTask):
        verts = task.vertices()
        a, b, c = verts
        u = rng.random(M_r)
        v = rng.random(M_r)
        flip = u + v > 1.0
        u[flip] = 1.0 - u[flip]
        v[flip] = 1.0 - v[flip]
        interior = a + np.outer(u, b - a) + np.outer(v, c - a)
        edges = [(a, b), (b, c), (c, a)]
        lengths = np.array([np.linalg.norm(q - p) for p, q in edges])
        probs = lengths / lengths.sum()
        which = rng.choice(3, size=M_bc, p=probs)
        s = rng.random(M_bc)
        bc = np.empty((M_bc, 2))
        for i, (p, q) in enumerate(edges):
            m = which == i
            bc[m] = p + np.outer(s[m], q - p)
        return SampleBatch(interior, bc, boundary_targets(task, bc))
    raise ProblemError(f"unknown task {task!r}")


def network_config_for(task: Task, latent_dim: int, hidden_layers: int,
                       width: int, first_layer_omega: float = 30.0) -> NetworkConfig:
    return NetworkConfig(
        input_dim=task.input_dim,
        latent_dim=latent_dim,
        hidden_layers=hidden_layers,
        width=width,
        activation="sine",
        first_layer_omega=first_layer_omega,
        input_encoding=default_encoding(task),
    )
