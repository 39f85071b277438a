"""Command line entry points: train, eval, replay, swarm and experiment."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from marlin import harness, mappo, swarm
from marlin.gridworld import CANONICAL_SCENARIOS, STEP_MAX, load_builtin, load_scenario
from marlin.negotiation import BackendError, make_backends, read_transcript, replay_plan
from marlin.plan_cache import PlanCache
from marlin.trainer import MODES, TrainerConfig, evaluate_policy, run_training


def _world(args):
    if args.map:
        return load_scenario(Path(args.map).read_text())
    return load_builtin(args.scenario)


def _add_world_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--scenario", default="single_slot", choices=CANONICAL_SCENARIOS, help="built-in corridor map")
    g.add_argument("--map", help="path to a map file")


def cmd_train(args) -> int:
    world = _world(args)
    cfg = TrainerConfig(mode=args.mode, seed=args.seed, episode_max=args.episodes, step_max=args.step_max)
    backends = [] if args.mode == "mappo" else make_backends(args.backend, world.n_agents, args.script)
    cache_path = Path(args.plan_cache) if args.plan_cache else None
    cache = PlanCache.load(cache_path) if cache_path is not None and cache_path.exists() else PlanCache()
    record = run_training(cfg, world, backends, args.out, cache=cache, trajectories=not args.no_trajectories)
    if cache_path is not None:
        cache.save(cache_path)
    perf = record.performances()
    tail = perf[-min(100, len(perf)):]
    print(f"trained {len(perf)} episodes on {world.scenario_id} ({args.mode}, seed {args.seed}); "
          f"mean performance over the last {len(tail)} episodes: {tail.mean():.4f}")
    for ep, p in record.evaluations:
        print(f"  evaluation after episode {ep}: {p:.4f}")
    print(f"outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    world = _world(args)
    model = mappo.load_model(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    perfs = [evaluate_policy(world, model, args.step_max, greedy=not args.sample, rng=rng) for _ in range(args.episodes)]
    kind = "sampled" if args.sample else "greedy"
    print(f"{kind} performance over {len(perfs)} episodes: mean {np.mean(perfs):.4f}, "
          f"min {np.min(perfs):.4f}, max {np.max(perfs):.4f}")
    return 0


def cmd_replay(args) -> int:
    sessions = read_transcript(args.transcript)
    if args.session:
        if args.session not in sessions:
            print(f"no session {args.session!r} in {args.transcript}", file=sys.stderr)
            return 1
        sessions = {args.session: sessions[args.session]}
    for sid, entries in sessions.items():
        plan = replay_plan(entries, sid)
        moves = " ".join("/".join(a.name for a in joint) for joint in plan.moves)
        print(f"{sid}: {len(plan.moves)} moves, performance {plan.performance:.4f}")
        if args.verbose:
            print(f"  {moves}")
    return 0


def cmd_swarm(args) -> int:
    smap = swarm.load_swarm_map(Path(args.map).read_text()) if args.map else swarm.load_builtin_swarm()
    n = args.agents if args.agents is not None else len(smap.starts)
    backends = make_backends(args.backend, 2)
    ticks_max = args.ticks_max if args.ticks_max is not None else 10 * smap.bfs_bound(n)
    result = swarm.run_swarm(smap, backends, args.seed, n, ticks_max)
    if args.out:
        result.write_csv(args.out)
    exits = result.exit_ticks()
    done = sum(t is not None for t in exits.values())
    negotiations = sum(e.outcome == "agreed" for e in result.events)
    print(f"{done}/{len(exits)} agents exited within {result.ticks} ticks (limit {ticks_max}); "
          f"{negotiations} negotiated moves")
    return 0 if result.all_exited else 2


def cmd_experiment(args) -> int:
    spec = harness.ExperimentSpec.from_file(args.spec)
    if args.workers is not None:
        spec = harness.ExperimentSpec.from_dict({**spec.to_dict(), "workers": args.workers})
    if args.aggregate_only:
        result = harness.aggregate_dir(spec, args.out)
        harness.write_outputs(result, args.out)
    else:
        result = harness.run_experiment(spec, args.out)
    print(f"{len(result.curves)} curves written to {args.out}; {len(result.failures)} failed cells")
    for f in result.failures:
        print(f"  failed: {f.scenario}/{f.mode}/seed {f.seed}: {f.error}")
    return 1 if result.failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marlin", description=__doc__)
    parser.add_argument("-v", "--verbose-log", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one agent pair")
    _add_world_args(p)
    p.add_argument("--mode", choices=MODES, default="marlin")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=1600)
    p.add_argument("--step-max", type=int, default=STEP_MAX)
    p.add_argument("--backend", choices=("oracle", "remote", "scripted"), default="oracle")
    p.add_argument("--script", action="append", help="reply file for a scripted backend (once per agent)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-trajectories", action="store_true", help="skip the per-step trajectory log")
    p.add_argument("--plan-cache", help="plan cache file to start from and update (created if missing)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved policy")
    _add_world_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--sample", action="store_true", help="sample actions instead of taking the argmax")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step-max", type=int, default=STEP_MAX)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="re-derive plans from a transcript log")
    p.add_argument("--transcript", required=True)
    p.add_argument("--session")
    p.add_argument("--verbose", action="store_true", help="print every joint move")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("swarm", help="many-agent random walk with corridor negotiation")
    p.add_argument("--map", help="swarm map file (default: the built-in fixture)")
    p.add_argument("--agents", type=int)
    p.add_argument("--backend", choices=("oracle", "remote"), default="oracle")
    p.add_argument("--ticks-max", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="per-tick CSV of positions and statuses")
    p.set_defaults(func=cmd_swarm)

    p = sub.add_parser("experiment", help="run a seed sweep described by a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--aggregate-only", action="store_true", help="rebuild outputs from existing cell directories")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose_log else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
