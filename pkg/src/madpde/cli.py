"""Command-line pipeline: task generation, pre-training, fine-tuning,
baselines, evaluation and visualization data.

One experiment = one config file (JSON); every hyperparameter lives there
and can be overridden on the command line with ``--set key.path=value``.
Outputs land under ``--out`` (default: $MADPDE_OUT or ./runs, plus the
experiment name), with a manifest written before any heavy work.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import baselines, benchviz, evaluation, grf, mad, oracles, problems
from .network import NetworkConfig
from .trainer import TrainConfig


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

_TOP_KEYS = {"experiment", "problem", "tasks", "network", "pretrain",
             "finetune", "baseline", "reference", "eval"}


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise CliError(f"cannot read config: {e}")
    except ValueError as e:
        raise CliError(f"config is not valid JSON: {e}")
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    for key in ("experiment", "problem", "tasks"):
        if key not in cfg:
            raise CliError(f"config is missing the {key!r} section")
    return cfg


def apply_overrides(cfg: dict, assignments: list[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in assignments or []:
        if "=" not in item:
            raise CliError(f"--set expects key.path=value, got {item!r}")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        node = cfg
        parts = path.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


def override_seeds(cfg: dict, seed: int) -> dict:
    cfg = copy.deepcopy(cfg)
    cfg.setdefault("tasks", {})["seed"] = seed
    for section in ("pretrain", "finetune", "baseline"):
        if section in cfg:
            cfg[section]["seed"] = seed
    return cfg


def build_tasks(cfg: dict) -> tuple[list[int], list[problems.Task],
                                    list[int], list[problems.Task]]:
    """(s1_ids, s1_tasks, s2_ids, s2_tasks) from the problem/tasks sections."""
    prob = cfg["problem"]
    tcfg = cfg["tasks"]
    variant = prob.get("variant")
    n_tasks = int(tcfg["n_tasks"])
    n_pre = int(tcfg["n_pretrain"])
    seed = int(tcfg.get("seed", 0))
    if not 1 <= n_pre < n_tasks:
        raise CliError("need 1 <= n_pretrain < n_tasks")

    if variant == "ode_shift":
        lo, hi = prob.get("eta_range", [0.0, 2.0])
        etas = np.linspace(lo, hi, n_tasks)
        tasks = [problems.OdeShiftTask(float(e)) for e in etas]
    elif variant == "burgers":
        spec = grf.GrfSpec(**{**grf.BURGERS_GRF.__dict__, **prob.get("grf", {})})
        nu = float(prob.get("nu", 0.01))
        tasks = [problems.BurgersTask(
            grf.sample_grf(spec, np.random.default_rng([seed, i])), nu)
            for i in range(n_tasks)]
    elif variant == "laplace_triangle":
        spec = grf.GrfSpec(**{**grf.LAPLACE_GRF.__dict__, **prob.get("grf", {})})
        tasks = []
        for i in range(n_tasks):
            rng = np.random.default_rng([seed, i])
            while True:
                angles = np.sort(rng.uniform(0, 2 * np.pi, 3))
                try:
                    task = problems.LaplaceTriangleTask(
                        tuple(angles), grf.sample_grf(spec, rng))
                    break
                except problems.ProblemError:
                    continue  # resample near-degenerate triangles
            tasks.append(task)
    else:
        raise CliError(f"unknown problem variant {variant!r}")

    perm = np.random.default_rng([seed, 0x5917]).permutation(n_tasks)
    s1 = sorted(int(i) for i in perm[:n_pre])
    s2 = sorted(int(i) for i in perm[n_pre:])
    return s1, [tasks[i] for i in s1], s2, [tasks[i] for i in s2]


def network_config(cfg: dict) -> NetworkConfig:
    variant = cfg["problem"]["variant"]
    net = dict(cfg.get("network", {}))
    input_dim = 1 if variant == "ode_shift" else 2
    encoding = "periodic_x" if variant == "burgers" else "identity"
    return NetworkConfig(
        input_dim=input_dim,
        latent_dim=int(net.get("latent_dim", 0)),
        hidden_layers=int(net.get("hidden_layers", 4)),
        width=int(net.get("width", 64)),
        activation=net.get("activation", "sine"),
        first_layer_omega=float(net.get("first_layer_omega", 30.0)),
        input_encoding=encoding,
    )


def train_config(cfg: dict, section: str) -> TrainConfig:
    if section not in cfg:
        raise CliError(f"config is missing the {section!r} section")
    d = dict(cfg[section])
    d.pop("init_strategy", None)
    d.pop("mode", None)
    d.pop("meta", None)
    d.pop("method", None)
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad {section} settings: {e}")


# ---------------------------------------------------------------------------
# run directories and manifests
# ---------------------------------------------------------------------------

def _source_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def prepare_out_dir(out: str, force: bool) -> str:
    if os.path.exists(out) and os.listdir(out):
        if not force:
            raise CliError(f"output directory {out!r} is not empty "
                           f"(use --force to overwrite)")
    os.makedirs(out, exist_ok=True)
    return out


def write_manifest(out: str, command: str, cfg: dict, args) -> None:
    manifest = {
        "experiment": cfg.get("experiment", "unnamed"),
        "command": command,
        "config_path": os.path.abspath(args.config) if args.config else None,
        "output_dir": os.path.abspath(out),
        "seeds": {
            "tasks": cfg.get("tasks", {}).get("seed"),
            "pretrain": cfg.get("pretrain", {}).get("seed"),
            "finetune": cfg.get("finetune", {}).get("seed"),
        },
        "source_revision": _source_revision(),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def default_out(cfg: dict, command: str, out_flag) -> str:
    if out_flag:
        return out_flag
    root = os.environ.get("MADPDE_OUT", "runs")
    return os.path.join(root, cfg.get("experiment", "unnamed"), command)


# ---------------------------------------------------------------------------
# task file IO
# ---------------------------------------------------------------------------

def _write_task_file(path: str, ids: list[int], tasks: list[problems.Task]):
    payload = [{"id": i, "task": problems.task_to_json(t)}
               for i, t in zip(ids, tasks)]
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def read_task_file(path: str) -> tuple[list[int], list[problems.Task]]:
    try:
        with open(path) as f:
            payload = json.load(f)
    except OSError as e:
        raise CliError(f"cannot read task file: {e}")
    ids = [int(e["id"]) for e in payload]
    tasks = [problems.task_from_json(e["task"]) for e in payload]
    return ids, tasks


def _ref_path(tasks_dir: str, task_id: int) -> str:
    return os.path.join(tasks_dir, "refs", f"task_{task_id:04d}.ref")


def _eval_grid_for(task, tasks_dir: str, task_id: int, cfg: dict):
    if isinstance(task, problems.BurgersTask):
        path = _ref_path(tasks_dir, task_id)
        if not os.path.exists(path):
            raise CliError(f"missing reference field {path}; run gen-tasks first")
        return evaluation.for_task(task, reference=oracles.load_reference(path))
    n_pts = int(cfg.get("eval", {}).get("n_laplace_points",
                                        evaluation.LAPLACE_EVAL_POINTS))
    return evaluation.for_task(task, seed=task_id, n_laplace=n_pts)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_tasks(cfg: dict, args) -> int:
    out = prepare_out_dir(default_out(cfg, "tasks", args.out), args.force)
    write_manifest(out, "gen-tasks", cfg, args)
    s1_ids, s1, s2_ids, s2 = build_tasks(cfg)
    _write_task_file(os.path.join(out, "tasks_s1.json"), s1_ids, s1)
    _write_task_file(os.path.join(out, "tasks_s2.json"), s2_ids, s2)
    if cfg["problem"]["variant"] == "burgers":
        ref_cfg = cfg.get("reference", {})
        nx = int(ref_cfg.get("nx", 256))
        nt = int(ref_cfg.get("nt", 50))
        which = ref_cfg.get("which", "s2")
        os.makedirs(os.path.join(out, "refs"), exist_ok=True)
        targets = list(zip(s2_ids, s2))
        if which == "all":
            targets += list(zip(s1_ids, s1))
        for tid, task in targets:
            ref = oracles.burgers_solve(task.u0, task.nu, nx, nt,
                                        meta={"task_id": tid})
            oracles.save_reference(_ref_path(out, tid), ref)
    print(f"wrote {len(s1)} pre-training and {len(s2)} held-out tasks to {out}")
    return 0


def cmd_pretrain(cfg: dict, args) -> int:
    out = prepare_out_dir(default_out(cfg, "pretrain", args.out), args.force)
    write_manifest(out, "pretrain", cfg, args)
    ids, tasks = read_task_file(os.path.join(args.tasks, "tasks_s1.json"))
    net_cfg = network_config(cfg)
    pre_cfg = train_config(cfg, "pretrain")
    ck = mad.pretrain(tasks, net_cfg, pre_cfg, task_ids=ids)
    mad.save_checkpoint(os.path.join(out, "checkpoint.ckpt"), ck)
    with open(os.path.join(out, "pretrain_loss.csv"), "w") as f:
        f.write("iteration,loss\n")
        for it, v in ck.loss_series:
            f.write(f"{it},{v!r}\n")
    print(f"pre-trained on {len(tasks)} tasks; checkpoint in {out}")
    return 0


def _finetune_one(ck, task, tid, mode, strategy, fine_cfg, eval_grid, snapshots):
    z0 = mad.init_latent(task, ck, strategy)
    label = f"s2-{tid}"
    if mode == "L":
        _, rec = mad.finetune_L(ck, task, z0, fine_cfg, eval_grid,
                                task_label=label, record_snapshots=snapshots)
    else:
        _, _, rec = mad.finetune_LM(ck, task, z0, fine_cfg, eval_grid,
                                    task_label=label, record_snapshots=snapshots)
    return rec


def cmd_finetune(cfg: dict, args) -> int:
    out = prepare_out_dir(default_out(cfg, f"finetune_{args.mode}", args.out),
                          args.force)
    write_manifest(out, "finetune", cfg, args)
    ck = mad.load_checkpoint(args.checkpoint)
    ids, tasks = read_task_file(os.path.join(args.tasks, "tasks_s2.json"))
    if args.task_index is not None:
        if args.task_index not in ids:
            raise CliError(f"task id {args.task_index} not in the held-out set")
        keep = ids.index(args.task_index)
        ids, tasks = [ids[keep]], [tasks[keep]]
    fine_cfg = train_config(cfg, "finetune")
    strategy = cfg.get("finetune", {}).get("init_strategy", "mean")
    mode = args.mode
    variant = cfg["problem"]["variant"]
    snapshots = variant == "ode_shift"

    def run(pair):
        tid, task = pair
        grid = _eval_grid_for(task, args.tasks, tid, cfg)
        return _finetune_one(ck, task, tid, mode, strategy, fine_cfg, grid,
                             snapshots)

    pairs = list(zip(ids, tasks))
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            records = list(pool.map(run, pairs))
    else:
        records = [run(p) for p in pairs]

    benchviz.write_convergence_csv(os.path.join(out, "convergence.csv"), records)
    if snapshots:
        snap_dir = os.path.join(out, "snapshots")
        os.makedirs(snap_dir, exist_ok=True)
        for rec in records:
            arr = np.stack([v for _, v in rec.snapshots])
            its = np.asarray([i for i, _ in rec.snapshots])
            np.savez(os.path.join(snap_dir, f"{rec.method}_{rec.task_id}.npz"),
                     iterations=its, snapshots=arr)
    benchviz.write_summary_json(os.path.join(out, "summary.json"),
                                {records[0].method: records})
    print(f"fine-tuned {len(records)} task(s); records in {out}")
    return 0


def cmd_baseline(cfg: dict, args) -> int:
    out = prepare_out_dir(default_out(cfg, f"baseline_{args.method}", args.out),
                          args.force)
    write_manifest(out, "baseline", cfg, args)
    s1_ids, s1 = read_task_file(os.path.join(args.tasks, "tasks_s1.json"))
    s2_ids, s2 = read_task_file(os.path.join(args.tasks, "tasks_s2.json"))
    net_cfg = network_config(cfg)
    if net_cfg.latent_dim != 0:
        net_cfg = NetworkConfig(**{**net_cfg.to_dict(), "latent_dim": 0})
    fine_cfg = train_config(cfg, "finetune")
    meta_kw = cfg.get("baseline", {}).get("meta", {})
    records = []
    for tid, task in zip(s2_ids, s2):
        grid = _eval_grid_for(task, args.tasks, tid, cfg)
        label = f"s2-{tid}"
        if args.method == "from-scratch":
            rec = baselines.run_from_scratch(task, net_cfg, fine_cfg, grid, label)
        elif args.method == "transfer":
            pick = int(np.random.default_rng([fine_cfg.seed, 0x7AFE])
                       .integers(len(s1)))
            rec = baselines.run_transfer(s1[pick], task, net_cfg,
                                         train_config(cfg, "pretrain"),
                                         fine_cfg, grid, label)
        elif args.method in ("reptile", "maml"):
            meta = baselines.MetaConfig(seed=fine_cfg.seed, **meta_kw)
            runner = (baselines.run_reptile if args.method == "reptile"
                      else baselines.run_maml_fo)
            rec, _ = runner(s1, task, net_cfg, meta, fine_cfg, grid, label)
        else:
            raise CliError(f"unknown baseline {args.method!r}")
        records.append(rec)
    benchviz.write_convergence_csv(os.path.join(out, "convergence.csv"), records)
    benchviz.write_summary_json(os.path.join(out, "summary.json"),
                                {records[0].method: records})
    print(f"ran {args.method} on {len(records)} task(s); records in {out}")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    """Error of the pre-trained model on held-out tasks, no fine-tuning."""
    out = prepare_out_dir(default_out(cfg, "eval", args.out), args.force)
    write_manifest(out, "eval", cfg, args)
    ck = mad.load_checkpoint(args.checkpoint)
    ids, tasks = read_task_file(os.path.join(args.tasks, "tasks_s2.json"))
    strategy = cfg.get("finetune", {}).get("init_strategy", "mean")
    errors = []
    for tid, task in zip(ids, tasks):
        grid = _eval_grid_for(task, args.tasks, tid, cfg)
        z0 = mad.init_latent(task, ck, strategy)
        errors.append(evaluation.rel_l2(grid, ck.params(), z0))
    summary = {"n_tasks": len(errors), "mean": float(np.mean(errors))}
    if len(errors) >= 2:
        ci = oracles.mean_ci(errors)
        summary["ci_lo"] = ci.lo
        summary["ci_hi"] = ci.hi
    summary["per_task"] = {str(i): e for i, e in zip(ids, errors)}
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"evaluated {len(errors)} task(s); mean rel L2 {summary['mean']:.4f}")
    return 0


def cmd_viz(cfg: dict, args) -> int:
    out = prepare_out_dir(default_out(cfg, "viz", args.out), args.force)
    write_manifest(out, "viz", cfg, args)
    records = []
    for path in args.records:
        records.extend(benchviz.read_convergence_csv(path))
    if not records:
        raise CliError("no convergence records found")
    by_method: dict[str, list] = {}
    for r in records:
        by_method.setdefault(r.method, []).append(r)
    rows = []
    for method, recs in sorted(by_method.items()):
        agg = benchviz.aggregate(recs)
        for j, it in enumerate(agg.iterations):
            rows.append((method, int(it), agg.mean[j],
                         None if agg.ci_lo is None else agg.ci_lo[j],
                         None if agg.ci_hi is None else agg.ci_hi[j]))
    with open(os.path.join(out, "aggregated.csv"), "w") as f:
        f.write("method,iteration,mean_rel_l2,ci_lo,ci_hi\n")
        for m, it, mean, lo, hi in rows:
            f.write(f"{m},{it},{mean!r},{'' if lo is None else repr(lo)},"
                    f"{'' if hi is None else repr(hi)}\n")
    benchviz.write_summary_json(os.path.join(out, "summary.json"), by_method)

    if args.snapshots and cfg["problem"]["variant"] == "ode_shift":
        x = evaluation.ode_grid_points()[:, 0]
        lo, hi = cfg["problem"].get("eta_range", [0.0, 2.0])
        etas = np.linspace(lo, hi, int(cfg["tasks"]["n_tasks"]))
        family = np.stack([oracles.ode_exact(e, x) for e in etas])
        trajectories = {}
        stack = [family]
        for path in args.snapshots:
            with np.load(path) as data:
                name = os.path.splitext(os.path.basename(path))[0]
                trajectories[name] = data["snapshots"]
                stack.append(data["snapshots"])
        # one shared basis: exact family plus every recorded snapshot
        proj = benchviz.pca_fit(np.concatenate(stack, axis=0))
        labelled = {f"exact_eta_{e:.3f}": benchviz.project_trajectory(proj, f)
                    for e, f in zip(etas, family[:, None, :])}
        for name, snaps in trajectories.items():
            labelled[name] = benchviz.project_trajectory(proj, snaps)
        benchviz.write_manifold_csv(os.path.join(out, "manifold.csv"), labelled)
    print(f"visualization data in {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="madpde",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, tasks=False, checkpoint=False):
        sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override every seed in the config")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty output directory")
        sp.add_argument("--set", action="append", default=[], metavar="K=V",
                        dest="overrides", help="override a config entry")
        if tasks:
            sp.add_argument("--tasks", required=True,
                            help="directory produced by gen-tasks")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)

    common(sub.add_parser("gen-tasks", help="sample task families and references"))
    common(sub.add_parser("pretrain", help="pre-train on the S1 tasks"),
           tasks=True)
    sp = sub.add_parser("finetune", help="fine-tune on held-out tasks")
    common(sp, tasks=True, checkpoint=True)
    sp.add_argument("--mode", choices=["L", "LM"], required=True)
    sp.add_argument("--task-index", type=int, default=None)
    sp = sub.add_parser("baseline", help="run a comparison method")
    common(sp, tasks=True)
    sp.add_argument("--method", required=True,
                    choices=["from-scratch", "transfer", "reptile", "maml"])
    common(sub.add_parser("eval", help="evaluate a checkpoint on S2"),
           tasks=True, checkpoint=True)
    sp = sub.add_parser("viz", help="aggregate records into plot-ready CSVs")
    common(sp)
    sp.add_argument("--records", nargs="+", required=True,
                    help="convergence.csv files to aggregate")
    sp.add_argument("--snapshots", nargs="*", default=[],
                    help="snapshot .npz files for the manifold projection")
    return p


_COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args.overrides)
        if args.seed is not None:
            cfg = override_seeds(cfg, args.seed)
        return _COMMANDS[args.command](cfg, args)
    except (CliError, mad.CheckpointError, oracles.OracleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
