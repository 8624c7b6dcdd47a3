"""Loss assembly, Adam, and the step-decay learning-rate schedule.

The physics loss of one task is

    mean residual^2 over the interior batch
    + lambda_bc * mean (u - g)^2 over the boundary batch
    + inv_sigma2 * ||z||^2

and a multi-task loss is the sum of per-task losses.  All tasks of a batch
share one network forward pass: their collocation points are stacked row-wise
and each task's latent vector is repeated across its rows, which keeps the
reductions deterministic and the BLAS calls large.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from . import problems
from .diffcore import Tape, Var
from .network import ModelParams, jet_forward, stage_network
from .problems import SampleBatch, Task


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float
    total_iters: int
    M_r: int
    M_bc: int
    lambda_bc: float = 1.0
    inv_sigma2: float = 1e-4
    eval_every: int = 10
    seed: int = 0
    resample_every: int = 1
    clip_grad_norm: Optional[float] = None

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.M_r < 1 or self.M_bc < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.inv_sigma2 < 0:
            raise ValueError("inv_sigma2 must be >= 0")
        if self.eval_every < 1 or self.resample_every < 1:
            raise ValueError("cadences must be >= 1")

    def to_dict(self) -> dict:
        return {
            "lr0": self.lr0, "total_iters": self.total_iters,
            "M_r": self.M_r, "M_bc": self.M_bc, "lambda_bc": self.lambda_bc,
            "inv_sigma2": self.inv_sigma2, "eval_every": self.eval_every,
            "seed": self.seed, "resample_every": self.resample_every,
            "clip_grad_norm": self.clip_grad_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """lr0 halved at 40%, 60% and 80% of the total budget."""
    if not 0 <= iteration < max(cfg.total_iters, 1):
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    T = cfg.total_iters
    passed = sum(iteration >= m for m in (int(0.4 * T), int(0.6 * T), int(0.8 * T)))
    return cfg.lr0 * 0.5 ** passed


@dataclass
class LossBreakdown:
    residual: float
    boundary: float
    reg: float
    total: float


@dataclass
class TapedLoss:
    """A loss recorded on a tape, ready for one reverse sweep."""

    tape: Tape
    total: Var                  # plain float when nothing is trainable
    breakdown: LossBreakdown
    staged: "object"            # StagedNetwork
    z_var: Optional[Var]        # (N, latent) leaf, None when latent_dim == 0
    per_task_loss: np.ndarray   # (N,) physics loss + reg per task

    def gradients(self) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        """(d total / d theta_flat, d total / d Z); None for frozen blocks."""
        wrt = list(self.staged.theta_vars())
        if self.z_var is not None:
            wrt.append(self.z_var)
        if not wrt:
            return None, None
        grads = self.tape.gradient(self.total, wrt)
        z_grad = None
        if self.z_var is not None:
            z_grad = grads.pop()
        theta_grad = self.staged.theta_grad_flat(grads) if grads else None
        return theta_grad, z_grad


def _stack_coefficients(tasks: Sequence[Task], batches: Sequence[SampleBatch]) -> dict:
    per_task = [problems.residual_coefficients(t, b.interior)
                for t, b in zip(tasks, batches)]
    keys = per_task[0].keys()
    out = {}
    for key in keys:
        vals = [c[key] for c in per_task]
        if all(np.ndim(v) == 0 for v in vals):
            if len(set(float(v) for v in vals)) == 1:
                out[key] = float(vals[0])
            else:
                M = batches[0].interior.shape[0]
                out[key] = np.repeat(np.asarray(vals, dtype=float), M).reshape(-1, 1)
        else:
            out[key] = np.concatenate([np.atleast_2d(v) for v in vals], axis=0)
    return out


def assemble_multitask_loss(tasks: Sequence[Task], batches: Sequence[SampleBatch],
                            params: ModelParams, Z: Optional[np.ndarray],
                            cfg: TrainConfig, trainable_theta: bool = True) -> TapedLoss:
    """Sum of per-task physics losses (plus latent regularizers) on one tape."""
    if len(tasks) == 0:
        raise TrainingError("empty task list")
    if len(tasks) != len(batches):
        raise TrainingError("one batch per task required")
    variant = tasks[0].variant
    if any(t.variant != variant for t in tasks):
        raise TrainingError("all tasks in a batch must share the PDE variant")
    M_r = batches[0].interior.shape[0]
    M_bc = batches[0].boundary.shape[0]
    if M_r == 0 or M_bc == 0:
        raise TrainingError("empty batch")
    if any(b.interior.shape[0] != M_r or b.boundary.shape[0] != M_bc
           for b in batches):
        raise TrainingError("all tasks must use identical batch sizes")

    N = len(tasks)
    latent = params.config.latent_dim
    tape = Tape()
    staged = stage_network(tape, params, trainable=trainable_theta)

    z_var = None
    if latent > 0:
        if Z is None or np.asarray(Z).shape != (N, latent):
            raise TrainingError(f"latent matrix must have shape ({N}, {latent})")
        z_var = tape.constant(np.asarray(Z, dtype=np.float64), "Z")

    # interior: stacked residual pass
    X = np.concatenate([b.interior for b in batches], axis=0)
    z_rows = dc.repeat_rows(z_var, M_r) if z_var is not None else None
    orders = problems.directions_needed(tasks[0])
    jets = jet_forward(staged, X, z_rows, list(orders), orders)
    res = problems.residual_op(variant, jets, _stack_coefficients(tasks, batches))
    res_sq = dc.mul(res, res)
    per_task_res = dc.vmean(dc.reshape(res_sq, (N, M_r)), axis=1)
    residual_sum = dc.vsum(per_task_res)

    # boundary: value-only pass
    Xb = np.concatenate([b.boundary for b in batches], axis=0)
    targets = np.concatenate([b.boundary_values for b in batches])
    zb_rows = dc.repeat_rows(z_var, M_bc) if z_var is not None else None
    ub = jet_forward(staged, Xb, zb_rows, [], None)[None].val
    mismatch = dc.sub(dc.reshape(ub, (N * M_bc,)), targets)
    per_task_bc = dc.vmean(dc.reshape(dc.mul(mismatch, mismatch), (N, M_bc)), axis=1)
    boundary_sum = dc.vsum(per_task_bc)

    total = dc.add(residual_sum, dc.mul(cfg.lambda_bc, boundary_sum))
    per_task_reg = np.zeros(N)
    if cfg.inv_sigma2 > 0 and z_var is not None:
        per_task_reg_var = dc.mul(cfg.inv_sigma2,
                                  dc.vsum(dc.mul(z_var, z_var), axis=1))
        per_task_reg = dc.value_of(per_task_reg_var)
        total = dc.add(total, dc.vsum(per_task_reg_var))
        reg_val = float(per_task_reg.sum())
    else:
        reg_val = 0.0

    if not np.isfinite(dc.value_of(total)):
        raise TrainingError("non-finite loss")

    breakdown = LossBreakdown(
        residual=float(dc.value_of(residual_sum)),
        boundary=float(dc.value_of(boundary_sum)),
        reg=reg_val,
        total=float(dc.value_of(total)),
    )
    per_task = (dc.value_of(per_task_res)
                + cfg.lambda_bc * dc.value_of(per_task_bc) + per_task_reg)
    return TapedLoss(tape, total, breakdown, staged, z_var, per_task)


def assemble_loss(task: Task, params: ModelParams, z: Optional[np.ndarray],
                  batch: SampleBatch, cfg: TrainConfig,
                  trainable_theta: bool = True) -> TapedLoss:
    """Single-task loss; identical code path to the multi-task assembly."""
    Z = None if params.config.latent_dim == 0 else np.asarray(z).reshape(1, -1)
    return assemble_multitask_loss([task], [batch], params, Z, cfg, trainable_theta)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)


def adam_step(state: AdamState, variables: np.ndarray, grads: np.ndarray,
              lr: float, blocks: Optional[Sequence[tuple[str, int, int]]] = None
              ) -> tuple[AdamState, np.ndarray]:
    """One Adam update with bias correction; returns fresh (state, variables)."""
    if variables.shape != grads.shape:
        raise TrainingError("variable/gradient length mismatch")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        where = f"index {bad}"
        for name, a, b in blocks or []:
            if a <= bad < b:
                where = f"{name}[{bad - a}]"
                break
        raise TrainingError(
            f"non-finite gradient at step {state.step + 1} in {where}")
    t = state.step + 1
    m = ADAM_BETA1 * state.m + (1 - ADAM_BETA1) * grads
    v = ADAM_BETA2 * state.v + (1 - ADAM_BETA2) * grads * grads
    m_hat = m / (1 - ADAM_BETA1 ** t)
    v_hat = v / (1 - ADAM_BETA2 ** t)
    new_vars = variables - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return AdamState(m, v, t), new_vars


def clip_gradient(grads: np.ndarray, max_norm: Optional[float]) -> np.ndarray:
    if max_norm is None:
        return grads
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads
