"""Meta-auto-decoder engine: pre-train a shared network jointly with
per-task latent codes, then solve new tasks by optimizing the latent alone
(latent-only mode, frozen weights) or jointly with the weights
(latent+model mode, warm-started from the pre-trained weights).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import evaluation, problems, trainer
from .benchviz import ConvergenceRecord
from .evaluation import EvalGrid
from .grf import evaluate_grf
from .network import ModelParams, NetworkConfig, init_siren, param_count
from .problems import BurgersTask, OdeShiftTask, Task
from .trainer import AdamState, TrainConfig, TrainingError

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"MADCKPT1"

LATENT_INIT_STD = 0.1
_FINETUNE_STREAM = 0xF17E
INIT_STRATEGIES = ("nearest", "mean", "zero")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    version: int
    net_config: NetworkConfig
    train_config: TrainConfig
    task_ids: list[int]
    tasks: list[Task]
    theta: np.ndarray
    latents: np.ndarray  # (N, latent_dim)
    rng_states: list[dict]
    adam: AdamState
    iteration: int
    loss_series: list[tuple[int, float]]
    final_per_task_loss: Optional[np.ndarray] = None

    def params(self) -> ModelParams:
        return ModelParams(self.theta, self.net_config)


def task_stream(seed: int, task_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, task_id])


def _restore_stream(state: dict) -> np.random.Generator:
    g = np.random.default_rng(0)
    g.bit_generator.state = state
    return g


def pretrain(tasks: Sequence[Task], net_cfg: NetworkConfig, train_cfg: TrainConfig,
             task_ids: Optional[Sequence[int]] = None,
             stop_at: Optional[int] = None,
             resume_from: Optional[Checkpoint] = None,
             z_init_std: float = LATENT_INIT_STD) -> Checkpoint:
    """Joint optimization of the shared weights and all per-task latents.

    Per-task randomness (latent init, collocation resampling) comes from a
    task-id-keyed stream, so permuting the task list leaves each task's data
    unchanged.  ``stop_at`` ends the run early (for checkpoint/resume);
    ``resume_from`` continues a checkpoint bit-exactly.
    """
    tasks = list(tasks)
    if not tasks:
        raise TrainingError("need at least one pre-training task")
    task_ids = list(task_ids) if task_ids is not None else list(range(len(tasks)))
    if len(task_ids) != len(tasks):
        raise TrainingError("one id per task required")
    N = len(tasks)
    latent = net_cfg.latent_dim
    P = param_count(net_cfg)
    stop_at = train_cfg.total_iters if stop_at is None else stop_at
    if stop_at > train_cfg.total_iters:
        raise TrainingError("stop_at exceeds the configured budget")

    if resume_from is not None:
        ck = resume_from
        if ck.task_ids != task_ids or ck.net_config != net_cfg \
                or ck.train_config != train_cfg:
            raise CheckpointError("checkpoint does not match this run's setup")
        w = np.concatenate([ck.theta, ck.latents.ravel()])
        adam = ck.adam.copy()
        streams = [_restore_stream(s) for s in ck.rng_states]
        loss_series = list(ck.loss_series)
        start = ck.iteration
    else:
        theta0 = init_siren(net_cfg, train_cfg.seed).flat
        streams = [task_stream(train_cfg.seed, tid) for tid in task_ids]
        Z0 = np.stack([g.normal(0.0, z_init_std, size=latent) for g in streams]) \
            if latent > 0 else np.zeros((N, 0))
        w = np.concatenate([theta0, Z0.ravel()])
        adam = AdamState.zeros(w.size)
        loss_series = []
        start = 0

    blocks = [("theta", 0, P), ("latents", P, w.size)]
    batches = None
    per_task_loss = None
    for it in range(start, stop_at):
        if batches is None or it % train_cfg.resample_every == 0:
            batches = [problems.sample_batch(t, train_cfg.M_r, train_cfg.M_bc, g)
                       for t, g in zip(tasks, streams)]
        params = ModelParams(w[:P], net_cfg)
        Z = w[P:].reshape(N, latent) if latent > 0 else None
        try:
            loss = trainer.assemble_multitask_loss(tasks, batches, params, Z,
                                                   train_cfg)
        except TrainingError as e:
            raise TrainingError(f"pre-training diverged at iteration {it}: {e}") from e
        g_theta, g_z = loss.gradients()
        grad = g_theta if g_z is None else np.concatenate([g_theta, g_z.ravel()])
        grad = trainer.clip_gradient(grad, train_cfg.clip_grad_norm)
        lr = trainer.lr_at(train_cfg, it)
        adam, w = trainer.adam_step(adam, w, grad, lr, blocks)
        loss_series.append((it, loss.breakdown.total))
        per_task_loss = loss.per_task_loss

    return Checkpoint(
        version=CHECKPOINT_VERSION,
        net_config=net_cfg,
        train_config=train_cfg,
        task_ids=task_ids,
        tasks=tasks,
        theta=w[:P].copy(),
        latents=w[P:].reshape(N, latent).copy() if latent > 0 else np.zeros((N, 0)),
        rng_states=[g.bit_generator.state for g in streams],
        adam=adam,
        iteration=stop_at,
        loss_series=loss_series,
        final_per_task_loss=per_task_loss,
    )


# ---------------------------------------------------------------------------
# latent initialization for a new task
# ---------------------------------------------------------------------------

_DISCRETIZE_GRID = np.arange(128) / 128.0


def _task_distance(task_new: Task, task_i: Task) -> float:
    """Euclidean distance between discretized task parameters."""
    if isinstance(task_new, OdeShiftTask):
        return abs(task_new.eta - task_i.eta)
    if isinstance(task_new, BurgersTask):
        a = evaluate_grf(task_new.u0, _DISCRETIZE_GRID)
        b = evaluate_grf(task_i.u0, _DISCRETIZE_GRID)
        return float(np.linalg.norm(a - b))
    raise ValueError(
        "nearest-latent initialization is ill-defined for triangle tasks "
        "(the parameter includes the domain shape); use strategy='mean'")


def init_latent(task_new: Task, checkpoint: Checkpoint, strategy: str) -> np.ndarray:
    if strategy not in INIT_STRATEGIES:
        raise ValueError(f"strategy must be one of {INIT_STRATEGIES}")
    latents = checkpoint.latents
    if latents.shape[0] < 1:
        raise ValueError("checkpoint holds no latent vectors")
    if strategy == "zero":
        return np.zeros(checkpoint.net_config.latent_dim)
    if strategy == "mean":
        return latents.mean(axis=0)
    dists = [_task_distance(task_new, t) for t in checkpoint.tasks]
    return latents[int(np.argmin(dists))].copy()


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def _record_point(series, snapshots, it, grid, params, z, loss_total,
                  want_snapshots):
    err = evaluation.rel_l2(grid, params, z)
    series.append((it, err, loss_total))
    if want_snapshots:
        snapshots.append((it, evaluation.predict(params, z, grid.points)))


def _finetune(checkpoint: Checkpoint, task_new: Task, z0: np.ndarray,
              train_cfg: TrainConfig, eval_grid: EvalGrid, tune_theta: bool,
              task_label: str, want_snapshots: bool):
    net_cfg = checkpoint.net_config
    latent = net_cfg.latent_dim
    z = np.asarray(z0, dtype=np.float64).copy()
    if z.shape != (latent,):
        raise ValueError(f"z0 must have shape ({latent},)")
    theta = checkpoint.theta.copy() if tune_theta else checkpoint.theta
    P = theta.size
    w = np.concatenate([theta, z]) if tune_theta else z
    adam = AdamState.zeros(w.size)
    stream = np.random.default_rng([train_cfg.seed, _FINETUNE_STREAM])
    blocks = ([("theta", 0, P), ("latent", P, P + latent)] if tune_theta
              else [("latent", 0, latent)])

    def split(w):
        if tune_theta:
            return ModelParams(w[:P], net_cfg), w[P:]
        return ModelParams(theta, net_cfg), w

    series: list[tuple[int, float, float]] = []
    snapshots: list[tuple[int, np.ndarray]] = []

    def measured_loss(w):
        params, zc = split(w)
        batch = problems.sample_batch(task_new, train_cfg.M_r, train_cfg.M_bc,
                                      np.random.default_rng([train_cfg.seed, 0xE7A1]))
        out = trainer.assemble_loss(task_new, params, zc, batch, train_cfg,
                                    trainable_theta=False)
        return out.breakdown.total

    params, zc = split(w)
    _record_point(series, snapshots, 0, eval_grid, params, zc,
                  measured_loss(w), want_snapshots)

    batch = None
    for it in range(train_cfg.total_iters):
        if batch is None or it % train_cfg.resample_every == 0:
            batch = problems.sample_batch(task_new, train_cfg.M_r, train_cfg.M_bc,
                                          stream)
        params, zc = split(w)
        try:
            loss = trainer.assemble_loss(task_new, params, zc, batch, train_cfg,
                                         trainable_theta=tune_theta)
        except TrainingError as e:
            raise TrainingError(f"fine-tuning diverged at iteration {it}: {e}") from e
        g_theta, g_z = loss.gradients()
        grad = np.concatenate([g_theta, g_z.ravel()]) if tune_theta else g_z.ravel()
        grad = trainer.clip_gradient(grad, train_cfg.clip_grad_norm)
        adam, w = trainer.adam_step(adam, w, grad, trainer.lr_at(train_cfg, it),
                                    blocks)
        done = it + 1
        if done % train_cfg.eval_every == 0 or done == train_cfg.total_iters:
            params, zc = split(w)
            _record_point(series, snapshots, done, eval_grid, params, zc,
                          measured_loss(w), want_snapshots)

    params, zc = split(w)
    record = ConvergenceRecord(task_label, "mad_lm" if tune_theta else "mad_l",
                               train_cfg.seed, series,
                               snapshots if want_snapshots else None)
    return params, zc.copy(), record


def finetune_L(checkpoint: Checkpoint, task_new: Task, z0: np.ndarray,
               train_cfg: TrainConfig, eval_grid: EvalGrid,
               task_label: str = "new", record_snapshots: bool = False
               ) -> tuple[np.ndarray, ConvergenceRecord]:
    """Latent-only fine-tuning: the pre-trained weights stay frozen."""
    _, z, record = _finetune(checkpoint, task_new, z0, train_cfg, eval_grid,
                             tune_theta=False, task_label=task_label,
                             want_snapshots=record_snapshots)
    return z, record


def finetune_LM(checkpoint: Checkpoint, task_new: Task, z0: np.ndarray,
                train_cfg: TrainConfig, eval_grid: EvalGrid,
                task_label: str = "new", record_snapshots: bool = False
                ) -> tuple[np.ndarray, np.ndarray, ConvergenceRecord]:
    """Joint latent+weight fine-tuning from the pre-trained initialization."""
    params, z, record = _finetune(checkpoint, task_new, z0, train_cfg, eval_grid,
                                  tune_theta=True, task_label=task_label,
                                  want_snapshots=record_snapshots)
    return z, params.flat, record


# ---------------------------------------------------------------------------
# checkpoint persistence: JSON header + little-endian float64 blocks
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, ck: Checkpoint) -> None:
    arrays = {
        "theta": ck.theta,
        "latents": ck.latents,
        "adam_m": ck.adam.m,
        "adam_v": ck.adam.v,
    }
    header = {
        "version": ck.version,
        "net_config": ck.net_config.to_dict(),
        "train_config": ck.train_config.to_dict(),
        "task_ids": ck.task_ids,
        "tasks": [problems.task_to_json(t) for t in ck.tasks],
        "rng_states": ck.rng_states,
        "adam_step": ck.adam.step,
        "iteration": ck.iteration,
        "loss_series": ck.loss_series,
        "final_per_task_loss": (None if ck.final_per_task_loss is None
                                else ck.final_per_task_loss.tolist()),
        "arrays": [[k, list(v.shape)] for k, v in arrays.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for _, v in arrays.items():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(_CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated")
    n = struct.unpack("<I", blob[8:12])[0]
    try:
        header = json.loads(blob[12:12 + n])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    arrays = {}
    pos = 12 + n
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) if shape else 1
        end = pos + 8 * size
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated payload in block {name!r}")
        arrays[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(shape).copy()
        pos = end
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes")

    adam = AdamState(arrays["adam_m"], arrays["adam_v"], int(header["adam_step"]))
    return Checkpoint(
        version=header["version"],
        net_config=NetworkConfig.from_dict(header["net_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        task_ids=list(header["task_ids"]),
        tasks=[problems.task_from_json(d) for d in header["tasks"]],
        theta=arrays["theta"],
        latents=arrays["latents"],
        rng_states=header["rng_states"],
        adam=adam,
        iteration=int(header["iteration"]),
        loss_series=[(int(i), float(v)) for i, v in header["loss_series"]],
        final_per_task_loss=(None if header["final_per_task_loss"] is None
                             else np.asarray(header["final_per_task_loss"])),
    )
