"""Per-task evaluation grids: where to measure errors, and against what.

ODE tasks are scored on the equidistant 128-point grid against the closed
form, Burgers tasks on the reference field's full space-time grid, Laplace
tasks on seeded random interior points against the analytic harmonic
extension.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import oracles, problems
from .network import ModelParams, forward
from .oracles import ReferenceField
from .problems import BurgersTask, LaplaceTriangleTask, OdeShiftTask, Task

ODE_GRID_POINTS = 128
LAPLACE_EVAL_POINTS = 16 * 1024


@dataclass
class EvalGrid:
    points: np.ndarray      # (P, d)
    ref_values: np.ndarray  # (P,)

    def __post_init__(self):
        if np.linalg.norm(self.ref_values) == 0.0:
            raise ValueError("reference values have zero norm")


def ode_grid_points(n: int = ODE_GRID_POINTS) -> np.ndarray:
    return np.linspace(-np.pi, np.pi, n).reshape(-1, 1)


def for_task(task: Task, reference: Optional[ReferenceField] = None,
             seed: int = 0, n_laplace: int = LAPLACE_EVAL_POINTS) -> EvalGrid:
    if isinstance(task, OdeShiftTask):
        pts = ode_grid_points()
        return EvalGrid(pts, oracles.ode_exact(task.eta, pts[:, 0]))
    if isinstance(task, BurgersTask):
        if reference is None:
            raise ValueError("Burgers evaluation needs a reference field")
        t, x = reference.axes
        tt, xx = np.meshgrid(t, x, indexing="ij")
        pts = np.stack([xx.ravel(), tt.ravel()], axis=1)
        return EvalGrid(pts, reference.values.ravel())
    if isinstance(task, LaplaceTriangleTask):
        rng = np.random.default_rng([seed, 0x5EED])
        batch = problems.sample_batch(task, n_laplace, 1, rng)
        pts = batch.interior
        vals = oracles.laplace_solution_xy(task.boundary_field, pts[:, 0], pts[:, 1])
        return EvalGrid(pts, vals)
    raise ValueError(f"unknown task {task!r}")


def predict(params: ModelParams, z: Optional[np.ndarray], points: np.ndarray) -> np.ndarray:
    return forward(params, points, z)[:, 0]


def rel_l2(grid: EvalGrid, params: ModelParams, z: Optional[np.ndarray]) -> float:
    return oracles.relative_l2(predict(params, z, grid.points), grid.ref_values)
