"""Comparison methods sharing the MAD loss/sampling/evaluation machinery:
plain PINN training from scratch, single-task transfer learning, Reptile,
and first-order MAML.  All of them run latent-free networks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import evaluation, problems, trainer
from .benchviz import ConvergenceRecord
from .evaluation import EvalGrid
from .network import ModelParams, NetworkConfig, init_siren
from .problems import Task
from .trainer import AdamState, TrainConfig, TrainingError

_PINN_STREAM = 0x0B5E
_META_STREAM = 0x4E71
_PROBE_STREAM = 0xE7A1


@dataclass(frozen=True)
class MetaConfig:
    """Hyperparameters of the meta-training outer loop."""

    meta_iters: int
    inner_steps: int = 8
    inner_lr: float = 1e-3
    meta_lr: float = 1e-3
    eps0: float = 1.0          # Reptile step toward adapted weights
    anneal_eps: bool = True    # linearly decay eps0 -> 0 over the meta run
    meta_batch: int = 5        # tasks per first-order-MAML meta step
    seed: int = 0

    def __post_init__(self):
        if self.meta_iters < 0 or self.inner_steps < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.inner_lr <= 0 or self.meta_lr <= 0:
            raise ValueError("learning rates must be positive")


def _require_latent_free(net_cfg: NetworkConfig):
    if net_cfg.latent_dim != 0:
        raise ValueError("baselines run latent-free networks (latent_dim == 0)")


def _probe_loss(task: Task, params: ModelParams, cfg: TrainConfig) -> float:
    batch = problems.sample_batch(task, cfg.M_r, cfg.M_bc,
                                  np.random.default_rng([cfg.seed, _PROBE_STREAM]))
    out = trainer.assemble_loss(task, params, None, batch, cfg,
                                trainable_theta=False)
    return out.breakdown.total


def pinn_train(task: Task, net_cfg: NetworkConfig, cfg: TrainConfig,
               theta0: Optional[np.ndarray] = None,
               eval_grid: Optional[EvalGrid] = None,
               method: str = "from_scratch", task_label: str = "task"
               ) -> tuple[np.ndarray, ConvergenceRecord]:
    """Adam on the physics loss of a single task; the shared workhorse."""
    _require_latent_free(net_cfg)
    theta = (init_siren(net_cfg, cfg.seed).flat if theta0 is None
             else np.asarray(theta0, dtype=np.float64).copy())
    adam = AdamState.zeros(theta.size)
    stream = np.random.default_rng([cfg.seed, _PINN_STREAM])
    series = []

    def record(it):
        if eval_grid is None:
            return
        params = ModelParams(theta, net_cfg)
        series.append((it, evaluation.rel_l2(eval_grid, params, None),
                       _probe_loss(task, params, cfg)))

    record(0)
    batch = None
    for it in range(cfg.total_iters):
        if batch is None or it % cfg.resample_every == 0:
            batch = problems.sample_batch(task, cfg.M_r, cfg.M_bc, stream)
        try:
            loss = trainer.assemble_loss(task, ModelParams(theta, net_cfg), None,
                                         batch, cfg)
        except TrainingError as e:
            raise TrainingError(f"{method} diverged at iteration {it}: {e}") from e
        g_theta, _ = loss.gradients()
        g_theta = trainer.clip_gradient(g_theta, cfg.clip_grad_norm)
        adam, theta = trainer.adam_step(adam, theta, g_theta,
                                        trainer.lr_at(cfg, it))
        done = it + 1
        if done % cfg.eval_every == 0 or done == cfg.total_iters:
            record(done)

    rec = ConvergenceRecord(task_label, method, cfg.seed, series)
    return theta, rec


def run_from_scratch(task: Task, net_cfg: NetworkConfig, cfg: TrainConfig,
                     eval_grid: EvalGrid, task_label: str = "task"
                     ) -> ConvergenceRecord:
    _, rec = pinn_train(task, net_cfg, cfg, eval_grid=eval_grid,
                        method="from_scratch", task_label=task_label)
    return rec


def run_transfer(pretrain_task: Task, task_new: Task, net_cfg: NetworkConfig,
                 pre_cfg: TrainConfig, fine_cfg: TrainConfig,
                 eval_grid: EvalGrid, task_label: str = "task"
                 ) -> ConvergenceRecord:
    """PINN-train on one source task, then fine-tune all weights on the new one."""
    theta, _ = pinn_train(pretrain_task, net_cfg, pre_cfg, method="transfer_pre",
                          task_label="pretrain")
    _, rec = pinn_train(task_new, net_cfg, fine_cfg, theta0=theta,
                        eval_grid=eval_grid, method="transfer",
                        task_label=task_label)
    return rec


def inner_adapt(theta: np.ndarray, task: Task, steps: int, inner_lr: float,
                cfg: TrainConfig, net_cfg: NetworkConfig,
                rng: np.random.Generator) -> np.ndarray:
    """k Adam steps from theta on one task (fresh optimizer state)."""
    w = theta.copy()
    adam = AdamState.zeros(w.size)
    for _ in range(steps):
        batch = problems.sample_batch(task, cfg.M_r, cfg.M_bc, rng)
        loss = trainer.assemble_loss(task, ModelParams(w, net_cfg), None, batch, cfg)
        g, _ = loss.gradients()
        adam, w = trainer.adam_step(adam, w, g, inner_lr)
    return w


def run_reptile(tasks: Sequence[Task], task_new: Task, net_cfg: NetworkConfig,
                meta: MetaConfig, fine_cfg: TrainConfig, eval_grid: EvalGrid,
                task_label: str = "task"
                ) -> tuple[ConvergenceRecord, list[float]]:
    """Meta-train an initialization by moving it toward per-task adapted
    weights (step size annealed eps0 -> 0), then fine-tune on the new task."""
    _require_latent_free(net_cfg)
    theta = init_siren(net_cfg, meta.seed).flat
    rng = np.random.default_rng([meta.seed, _META_STREAM])
    meta_losses = []
    for m in range(meta.meta_iters):
        idx = int(rng.integers(len(tasks)))
        adapted = inner_adapt(theta, tasks[idx], meta.inner_steps, meta.inner_lr,
                              fine_cfg, net_cfg, rng)
        eps = meta.eps0
        if meta.anneal_eps:
            eps *= 1.0 - m / max(meta.meta_iters, 1)
        theta = theta + eps * (adapted - theta)
        meta_losses.append(_probe_loss(tasks[idx], ModelParams(theta, net_cfg),
                                       fine_cfg))
    _, rec = pinn_train(task_new, net_cfg, fine_cfg, theta0=theta,
                        eval_grid=eval_grid, method="reptile",
                        task_label=task_label)
    return rec, meta_losses


def run_maml_fo(tasks: Sequence[Task], task_new: Task, net_cfg: NetworkConfig,
                meta: MetaConfig, fine_cfg: TrainConfig, eval_grid: EvalGrid,
                task_label: str = "task"
                ) -> tuple[ConvergenceRecord, list[float]]:
    """First-order MAML: the meta-gradient of a task is the plain gradient
    at its inner-adapted weights (inner loop: SGD); meta-updates use Adam."""
    _require_latent_free(net_cfg)
    theta = init_siren(net_cfg, meta.seed).flat
    adam = AdamState.zeros(theta.size)
    rng = np.random.default_rng([meta.seed, _META_STREAM])
    meta_losses = []
    for m in range(meta.meta_iters):
        picks = rng.choice(len(tasks), size=min(meta.meta_batch, len(tasks)),
                           replace=False)
        grads = np.zeros_like(theta)
        post_loss = 0.0
        for i in picks:
            w = theta.copy()
            for _ in range(meta.inner_steps):
                batch = problems.sample_batch(tasks[i], fine_cfg.M_r,
                                              fine_cfg.M_bc, rng)
                loss = trainer.assemble_loss(tasks[i], ModelParams(w, net_cfg),
                                             None, batch, fine_cfg)
                g, _ = loss.gradients()
                w = w - meta.inner_lr * g
            batch = problems.sample_batch(tasks[i], fine_cfg.M_r, fine_cfg.M_bc,
                                          rng)
            loss = trainer.assemble_loss(tasks[i], ModelParams(w, net_cfg), None,
                                         batch, fine_cfg)
            g, _ = loss.gradients()
            grads += g
            post_loss += loss.breakdown.total
        grads /= len(picks)
        adam, theta = trainer.adam_step(adam, theta, grads, meta.meta_lr)
        meta_losses.append(post_loss / len(picks))
    _, rec = pinn_train(task_new, net_cfg, fine_cfg, theta0=theta,
                        eval_grid=eval_grid, method="maml_fo",
                        task_label=task_label)
    return rec, meta_losses
