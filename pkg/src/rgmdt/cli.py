"""Command-line pipeline: oracle training, tree extraction, evaluation, exports.

Every subcommand writes its artifacts and a ``manifest.json`` into
``--out-dir``.  Exit codes: 0 success, 2 invalid input, 3 a certified bound
was violated.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import ClusterError, fit
from .env import PRESETS, MazeError, MazeSpec, build_model, load_maze
from .evalx import (
    GrowthConfig,
    ablate_metric,
    ablation_csv,
    advisory_report,
    certify_bound,
    evaluate_trees,
    extract,
    feasible_exact,
    sweep_leaves,
)
from .multiagent import GrowthSchedule, grow_joint
from .oracle import OracleCritic, OracleError, learn_q, solve_exact, visitation
from .qvec import QVecError, build_vectors
from .svm import SvmConfig, SvmError
from .tree import ClusterConfig, DecisionTree, TreeError, export_dot

EXIT_OK, EXIT_INVALID, EXIT_CERT = 0, 2, 3


class UsageError(Exception):
    pass


# -- argument plumbing -----------------------------------------------------------


def _maze_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--maze", help="maze JSON file")
    g.add_argument("--preset", choices=sorted(PRESETS), help="built-in maze")
    p.add_argument("--gamma", type=float, help="override the maze discount")


def _growth_args(p):
    p.add_argument("--growth", choices=("per-node", "global"), default="per-node")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--lam", type=float, default=1.0, help="weight of the mutual-information term")
    p.add_argument("--k3", type=int, default=5, help="nearest neighbours in the locality term")
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--n-init", type=int, default=8)
    p.add_argument("--metric", choices=("cosine", "euclidean", "manhattan"), default="cosine")
    p.add_argument("--svm-c", type=float, default=10.0)
    p.add_argument("--svm-tol", type=float, default=1e-9)
    p.add_argument("--purity-stop", type=float, default=None)


def _common(p):
    p.add_argument("--out-dir", default=".", help="directory receiving every artifact")
    p.add_argument("--seed", type=int, default=None, help="falls back to $RGMDT_SEED, then 0")
    p.add_argument("--jobs", type=int, default=1, help="worker cap (work runs sequentially)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rgmdt", description="Extract oblique decision-tree policies from tabular critics.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-oracle", help="solve or learn the joint action-value table")
    _maze_args(p)
    p.add_argument("--mode", choices=("exact", "qlearn"), default="exact")
    p.add_argument("--finite-horizon", action="store_true")
    p.add_argument("--episodes", type=int, default=5000)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--explore", type=float, default=0.2)
    p.add_argument("--out", default="critic.json")
    _common(p)

    for name, hlp in (("extract", "grow one agent's tree"), ("extract-multi", "grow every agent's tree jointly")):
        p = sub.add_parser(name, help=hlp)
        _maze_args(p)
        p.add_argument("--critic", required=True)
        p.add_argument("--leaves", type=int, required=True)
        _growth_args(p)
        if name == "extract":
            p.add_argument("--out", default="tree.json")
        else:
            p.add_argument("--unconditioned", action="store_true", help="grow every tree against the oracle")
            p.add_argument("--agent-order", choices=("ascending", "shuffle"), default="ascending")
        _common(p)

    p = sub.add_parser("evaluate", help="mean episode reward of tree policies")
    _maze_args(p)
    p.add_argument("--trees", nargs="+", required=True, help="one tree file per agent")
    p.add_argument("--how", choices=("exact", "rollout"), default="exact")
    p.add_argument("--episodes", type=int, default=1000)
    _common(p)

    p = sub.add_parser("sweep", help="reward versus leaf budget")
    _maze_args(p)
    p.add_argument("--critic", required=True)
    p.add_argument("--leaves", type=int, nargs="+", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--methods", nargs="+", choices=("rgmdt", "cart"), default=["rgmdt", "cart"])
    p.add_argument("--how", choices=("exact", "rollout"), default="exact")
    p.add_argument("--episodes", type=int, default=1000)
    _growth_args(p)
    _common(p)

    p = sub.add_parser("ablate", help="clustering-metric ablation")
    _maze_args(p)
    p.add_argument("--critic", required=True)
    p.add_argument("--leaves", type=int, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--metrics", nargs="+", choices=("cosine", "euclidean", "manhattan"),
                   default=["cosine", "euclidean", "manhattan"])
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--how", choices=("exact", "rollout"), default="exact")
    p.add_argument("--episodes", type=int, default=1000)
    _growth_args(p)
    _common(p)

    p = sub.add_parser("certify", help="check the return gap against the cosine-distance bound")
    _maze_args(p)
    p.add_argument("--critic", required=True)
    p.add_argument("--trees", nargs="+", help="tree files; grown from --leaves when omitted")
    p.add_argument("--leaves", type=int)
    _growth_args(p)
    _common(p)

    p = sub.add_parser("cluster", help="cluster one agent's action-value vectors")
    _maze_args(p)
    p.add_argument("--critic", required=True)
    p.add_argument("--labels", type=int, required=True)
    p.add_argument("--agent", type=int, default=0)
    _growth_args(p)
    p.add_argument("--out", default="cluster.json")
    _common(p)

    p = sub.add_parser("dump-qvec", help="write one agent's action-value vectors as CSV")
    _maze_args(p)
    p.add_argument("--critic", required=True)
    p.add_argument("--agent", type=int, default=0)
    p.add_argument("--out", default="qvec.csv")
    _common(p)

    p = sub.add_parser("export-dot", help="render a tree as Graphviz DOT")
    p.add_argument("tree")
    p.add_argument("--out", default=None, help="file name inside --out-dir; stdout when omitted")
    _common(p)
    return ap


# -- helpers -------------------------------------------------------------------------


def _sha(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _inside(out_dir: Path, name: str) -> Path:
    target = (out_dir / name).resolve()
    if out_dir.resolve() not in (target, *target.parents):
        raise UsageError(f"output {name!r} would be written outside --out-dir {out_dir}")
    return target


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("RGMDT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"RGMDT_SEED must be an integer, got {env!r}") from None


def _spec(args) -> MazeSpec:
    if args.maze:
        if not Path(args.maze).is_file():
            raise UsageError(f"maze file not found: {args.maze}")
        spec = load_maze(args.maze)
    else:
        spec = PRESETS[args.preset]()
    if args.gamma is not None:
        spec = dataclasses.replace(spec, gamma=args.gamma)
    return spec


def _critic(path: str, spec: MazeSpec) -> OracleCritic:
    if not Path(path).is_file():
        raise UsageError(f"critic file not found: {path}")
    c = OracleCritic.load(path)
    if c.spec is not None and c.spec.to_dict() != spec.to_dict():
        raise UsageError("critic was trained on a different maze")
    return c


def _growth(args) -> GrowthConfig:
    if args.purity_stop is not None and not 0 < args.purity_stop <= 1:
        raise UsageError("--purity-stop must lie in (0, 1]")
    return GrowthConfig(
        SvmConfig(C=args.svm_c, tol=args.svm_tol),
        ClusterConfig(args.tau, args.lam, args.k3, args.max_iters, args.tol, args.n_init, args.metric),
        args.growth,
        not getattr(args, "unconditioned", False),
        args.purity_stop,
    )


def _check_leaves(L):
    for v in L if isinstance(L, list) else [L]:
        if v is None or v < 2:
            raise UsageError(f"--leaves must be >= 2 (a binary tree needs at least one split), got {v}")


def _write_manifest(out_dir: Path, args, seed: int) -> None:
    config = {k: v for k, v in sorted(vars(args).items())}
    inputs = {}
    for key in ("maze", "critic", "tree"):
        val = config.get(key)
        if val and Path(val).is_file():
            inputs[key] = {"path": str(Path(val).resolve()), "sha256": _sha(val)}
    for i, t in enumerate(config.get("trees") or []):
        if Path(t).is_file():
            inputs[f"trees[{i}]"] = {"path": str(Path(t).resolve()), "sha256": _sha(t)}
    manifest = {"command": args.command, "config": config, "seed": seed, "inputs": inputs, "version": __version__,
                "numpy": np.__version__}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1, default=str) + "\n")


def _say(args, msg: str) -> None:
    if args.verbose:
        print(msg, file=sys.stderr)


# -- subcommands ---------------------------------------------------------------------


def _cmd_train(args, out: Path, seed: int) -> int:
    spec = _spec(args)
    if args.mode == "exact":
        critic = solve_exact(spec, finite_horizon=args.finite_horizon)
    else:
        if args.episodes < 1:
            raise UsageError("--episodes must be positive")
        critic = learn_q(spec, args.episodes, args.alpha, args.explore, seed)
    critic.save(_inside(out, args.out))
    print(f"critic {critic.digest()} -> {args.out}")
    return EXIT_OK


def _cmd_extract(args, out: Path, seed: int) -> int:
    _check_leaves(args.leaves)
    spec = _spec(args)
    if spec.n_agents != 1:
        raise UsageError("maze has several agents; use extract-multi")
    model = build_model(spec)
    critic = _critic(args.critic, spec)
    tree = extract(model, critic, args.leaves, seed, _growth(args))[0]
    tree.save(_inside(out, args.out))
    print(f"tree with {tree.n_leaves} leaves, depth {tree.depth} -> {args.out}")
    return EXIT_OK


def _cmd_extract_multi(args, out: Path, seed: int) -> int:
    _check_leaves(args.leaves)
    spec = _spec(args)
    model = build_model(spec)
    critic = _critic(args.critic, spec)
    gc = _growth(args)
    sched = GrowthSchedule(spec.n_agents, args.leaves)
    trees = grow_joint(model, critic, args.leaves, gc.svm, gc.cluster, seed, conditioned=gc.conditioned,
                       agent_order=args.agent_order, purity_stop=gc.purity_stop,
                       checkpoint_dir=_inside(out, "checkpoints"), schedule=sched, mode=gc.mode)
    for j, t in enumerate(trees):
        t.save(_inside(out, f"tree_agent{j}.json"))
    (out / "conditioning.json").write_text(json.dumps(sched.conditioning, sort_keys=True, indent=1) + "\n")
    print("leaves per agent: " + " ".join(str(t.n_leaves) for t in trees))
    return EXIT_OK


def _load_trees(paths, spec) -> list[DecisionTree]:
    trees = []
    for p in paths:
        if not Path(p).is_file():
            raise UsageError(f"tree file not found: {p}")
        trees.append(DecisionTree.load(p))
    if len(trees) != spec.n_agents:
        raise UsageError(f"maze has {spec.n_agents} agents but {len(trees)} tree files were given")
    return trees


def _cmd_evaluate(args, out: Path, seed: int) -> int:
    spec = _spec(args)
    model = build_model(spec)
    trees = _load_trees(args.trees, spec)
    value = evaluate_trees(model, trees, args.how, args.episodes, seed)
    res = {"mean_episode_reward": value, "how": args.how, "episodes": args.episodes if args.how == "rollout" else None,
           "seed": seed}
    (out / "evaluate.json").write_text(json.dumps(res, sort_keys=True, indent=1) + "\n")
    print(f"mean episode reward {value:.6f}")
    return EXIT_OK


def _cmd_sweep(args, out: Path, seed: int) -> int:
    _check_leaves(args.leaves)
    spec = _spec(args)
    model = build_model(spec)
    critic = _critic(args.critic, spec)
    res = sweep_leaves(model, critic, args.leaves, args.seeds, args.methods, _growth(args), args.how, args.episodes)
    (out / "sweep.csv").write_text(res.to_csv())
    for r in res.rows:
        print(f"{r.method:6s} L={r.L:<3d} mean={r.mean:.4f} std={r.std:.4f}")
    return EXIT_OK


def _cmd_ablate(args, out: Path, seed: int) -> int:
    _check_leaves(args.leaves)
    if not 0 <= args.noise < 1:
        raise UsageError("--noise must lie in [0, 1)")
    spec = _spec(args)
    model = build_model(spec)
    critic = _critic(args.critic, spec)
    res = ablate_metric(model, critic, args.leaves, args.metrics, args.seeds, args.noise, _growth(args), args.how,
                        args.episodes)
    (out / "ablation.csv").write_text(ablation_csv(res))
    (out / "ablation.json").write_text(json.dumps(res, sort_keys=True, indent=1) + "\n")
    print("ordering: " + " > ".join(res["ordering"]))
    return EXIT_OK


def _cmd_certify(args, out: Path, seed: int) -> int:
    spec = _spec(args)
    if not feasible_exact(spec):
        (out / "certify.json").write_text(json.dumps(advisory_report(spec, args.leaves or 0), indent=1) + "\n")
        print("advisory only: exact evaluation infeasible")
        return EXIT_OK
    model = build_model(spec)
    critic = _critic(args.critic, spec)
    if args.trees:
        trees = _load_trees(args.trees, spec)
    else:
        _check_leaves(args.leaves)
        trees = extract(model, critic, args.leaves, seed, _growth(args))
    rep = certify_bound(model, critic, trees)
    rep.seeds = [seed]
    rep.save(out / "certify.json")
    print(f"gap {rep.gap:.3e} bound {rep.bound_explicit:.3e} eps {rep.epsilon:.3e} -> {'holds' if rep.holds else 'VIOLATED'}")
    return EXIT_OK if rep.holds else EXIT_CERT


def _cmd_cluster(args, out: Path, seed: int) -> int:
    spec = _spec(args)
    model = build_model(spec)
    critic = _critic(args.critic, spec)
    if not 0 <= args.agent < spec.n_agents:
        raise UsageError(f"--agent must be in [0, {spec.n_agents})")
    data = build_vectors(model, critic, visitation(model, critic.greedy()), args.agent).nonzero()
    cm = fit(data, None, args.labels, args.tau, args.lam, args.k3, seed, args.max_iters, args.tol, args.metric,
             args.n_init)
    cm.save(_inside(out, args.out))
    print(f"epsilon {cm.epsilon_avg:.6e} over {args.labels} labels")
    return EXIT_OK


def _cmd_dump(args, out: Path, seed: int) -> int:
    spec = _spec(args)
    model = build_model(spec)
    critic = _critic(args.critic, spec)
    if not 0 <= args.agent < spec.n_agents:
        raise UsageError(f"--agent must be in [0, {spec.n_agents})")
    data = build_vectors(model, critic, visitation(model, critic.greedy()), args.agent)
    data.to_csv(_inside(out, args.out))
    print(f"{len(data)} vectors of dimension {data.components.shape[1]}")
    return EXIT_OK


def _cmd_dot(args, out: Path, seed: int) -> int:
    if not Path(args.tree).is_file():
        raise UsageError(f"tree file not found: {args.tree}")
    text = export_dot(DecisionTree.load(args.tree))
    if args.out:
        _inside(out, args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "train-oracle": _cmd_train,
    "extract": _cmd_extract,
    "extract-multi": _cmd_extract_multi,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "certify": _cmd_certify,
    "cluster": _cmd_cluster,
    "dump-qvec": _cmd_dump,
    "export-dot": _cmd_dot,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports bad flags with status 2
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        seed = _seed(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(out, args, seed)
        return COMMANDS[args.command](args, out, seed)
    except (UsageError, MazeError, OracleError, QVecError, ClusterError, SvmError, TreeError, ValueError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"rgmdt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())
