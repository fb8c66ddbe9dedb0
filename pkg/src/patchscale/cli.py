"""Command-line entry point: ``patchscale {train,eval,oracle,figure1}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
The default output directory is taken from ``$PATCHSCALE_OUT_DIR`` (else ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .agent import Agent
from .config import RunConfig, load_config
from .environment import Task
from .evolution import HistoryBuffer
from .exceptions import ConfigError, OracleCapError
from .features import attention_weights, project_qkv, semantic_attention
from .oracle import sweep_single
from .scene import SIZE_BANDS, generate_scene, size_band
from . import trainer

log = logging.getLogger("patchscale")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUT_DIR_ENV = "PATCHSCALE_OUT_DIR"


def _dump_json(path: Path, blob) -> None:
    path.write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")


def _resolve(args) -> RunConfig:
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "no_attention", False):
        overrides.append("attention.enabled=false")
    if getattr(args, "no_evolution", False):
        overrides.append("evolution.enabled=false")
    if getattr(args, "alpha_s", None) is not None:
        overrides.append(f"rewards.alpha_s={float(args.alpha_s)!r}")
    return load_config(args.config, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    config = _resolve(args)
    out = _out_dir(args)
    _dump_json(out / "run_config.json", config.to_dict())
    state = trainer.train(config, out, resume=not args.fresh, trace_evolution=args.trace_evolution)
    rewards = state.metrics.episode_rewards()
    print(f"trained {state.episode} episodes; last-episode mean R {rewards[-1]:.4f}; outputs in {out}")
    return EXIT_OK


def _load_checkpoint(path: Path, config: RunConfig | None):
    path = Path(path)
    if path.is_dir():
        path = path / trainer.CHECKPOINT_FILE
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    blob = json.loads(path.read_text())
    saved = RunConfig.from_dict(blob["config"])
    config = config or saved
    if tuple(blob["agent"]["action_set"]) != tuple(config.actions.scales):
        raise ConfigError(
            f"checkpoint action set {blob['agent']['action_set']} does not match the benchmark "
            f"action set {list(config.actions.scales)}"
        )
    # the network shape comes from the checkpoint; evaluation switches come from the caller
    shape = replace(config, features=saved.features, attention=replace(config.attention,
                    enabled=saved.attention.enabled, fusion=saved.attention.fusion),
                    agent=replace(config.agent, gate_reduction=saved.agent.gate_reduction))
    agent = Agent(config.actions.scales, shape.agent_config(), saved.train.seed)
    agent.load_state_dict(blob["agent"])
    return agent, HistoryBuffer.from_json(blob["history"]), saved


def cmd_eval(args) -> int:
    base = load_config(args.config, list(args.override or [])) if args.config or args.override else None
    agent, history, saved = _load_checkpoint(args.checkpoint, base)
    config = base or saved
    out = _out_dir(args)

    combos = [("full", True, True, config.rewards.alpha_s)]
    if args.no_attention or args.no_evolution or args.alpha_s is not None:
        tag = "+".join(
            t for t, on in (("no-attention", args.no_attention), ("no-evolution", args.no_evolution),
                            (f"alpha_s={args.alpha_s:g}" if args.alpha_s is not None else "", args.alpha_s is not None))
            if on
        )
        alpha = config.rewards.alpha_s if args.alpha_s is None else float(args.alpha_s)
        combos.append((tag, not args.no_attention, not args.no_evolution, alpha))

    rows, oracle_cache, first = [], {}, None
    for label, use_att, use_evo, alpha in combos:
        tasks = trainer.benchmark_tasks(config, alpha)
        if alpha not in oracle_cache:
            oracle_cache[alpha] = float(np.mean([o["reward"] for o in trainer.oracle_rewards(tasks, config.eval.oracle_cap)]))
        res = trainer.evaluate(agent, tasks, config, history, use_evolution=use_evo,
                               use_attention=use_att, label=label)
        rows.append({
            "label": label,
            "attention": use_att,
            "evolution": use_evo,
            "alpha_s": alpha,
            "mean_R": res.mean_reward,
            "oracle_mean_R": oracle_cache[alpha],
            "oracle_ratio": res.mean_reward / oracle_cache[alpha],
            "neighbor_scale_variance": trainer.neighbor_variance(tasks, res.assignments),
            "per_scene_R": res.rewards.tolist(),
        })
        if first is None:
            first = (tasks, res)

    tasks, res = first
    hist = trainer.size_band_histogram(tasks, res.assignments, config.scene.band_edges, config.actions.scales)
    trainer.write_histogram(out / "histogram_by_sizeband.csv", hist, config.actions.scales)
    summary = {
        "n_scenes": len(tasks),
        "seed_start": config.eval.seed_start,
        "oracle_ratio": rows[-1]["oracle_ratio"],
        "rows": rows,
    }
    _dump_json(out / "eval_summary.json", summary)
    if args.dump_features:
        _dump_json(Path(args.dump_features), feature_dump(agent, tasks))
    for r in rows:
        print(f"{r['label']:<32} mean R {r['mean_R']:.4f}  oracle ratio {r['oracle_ratio']:.4f}")
    return EXIT_OK


def _round(a: np.ndarray) -> list:
    return np.round(a, 12).tolist()


def feature_dump(agent: Agent, tasks) -> list[dict]:
    """Per scene: encoded features X, spatial affinity S, attention weights W and attended E."""
    out = []
    for task in tasks:
        batch = agent.make_batch([task])
        entry = {"seed": task.scene.seed, "X": _round(batch.X), "S": _round(batch.S)}
        if agent.attention is not None:
            a = agent.attention
            Q, K, _ = project_qkv(batch.X, a.theta_q.data, a.theta_k.data, a.theta_v.data)
            entry["W"] = _round(attention_weights(semantic_attention(Q, K), batch.S, agent.config.fusion))
        entry["E"] = _round(agent.attended(batch).data)
        out.append(entry)
    return out


def cmd_oracle(args) -> int:
    config = _resolve(args)
    out = _out_dir(args)
    tasks = trainer.benchmark_tasks(config)
    entries = trainer.oracle_rewards(tasks, config.eval.oracle_cap)
    mean = float(np.mean([e["reward"] for e in entries]))
    _dump_json(out / "oracle.json", {"mean_reward": mean, "cap": config.eval.oracle_cap,
                                     "n_scenes": len(entries), "scenes": entries})
    print(f"oracle mean R {mean:.4f} over {len(entries)} scenes")
    return EXIT_OK


def figure1_histogram(config: RunConfig, n_scenes: int = 1000, seed: int = 0) -> np.ndarray:
    """(bands, actions) counts of each single object's reward-maximizing scale."""
    scfg = replace(config.scene, min_objects=1, max_objects=1)
    settings = config.env_settings()
    edges = config.scene.band_edges
    hist = np.zeros((len(edges) - 1, len(config.actions.scales)), dtype=int)
    seeds = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF161])).integers(0, 2**62, n_scenes)
    for s in seeds:
        task = Task.from_scene(generate_scene(scfg, int(s)), settings)
        best = sweep_single(task)
        obj = task.scene.objects[0]
        hist[size_band(obj.px_size, edges), best.action_idx[0]] += 1
    return hist


def cmd_figure1(args) -> int:
    config = _resolve(args)
    out = _out_dir(args)
    hist = figure1_histogram(config, args.n_scenes, config.train.seed)
    trainer.write_histogram(out / "histogram_by_sizeband.csv", hist, config.actions.scales)
    acts = config.actions.scales
    for b, row in enumerate(hist):
        name = SIZE_BANDS[b] if b < len(SIZE_BANDS) else f"band_{b}"
        modal = acts[int(np.argmax(row))] if row.sum() else float("nan")
        print(f"{name:<12} n={row.sum():4d}  modal scale {modal:g}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchscale", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ablations=True):
        p.add_argument("--config", help="TOML config file (defaults built in when omitted)")
        p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")
        if ablations:
            p.add_argument("--no-attention", action="store_true", help="E := X (skip attention)")
            p.add_argument("--no-evolution", action="store_true", help="apply the actor's scales directly")
            p.add_argument("--alpha-s", type=float, help="weight of the scale-consistency reward")

    p = sub.add_parser("train", help="train an agent")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--trace-evolution", action="store_true", help="write evolution.csv")
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the frozen benchmark")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--dump-features", metavar="PATH",
                   help="also write per-scene features and attention matrices to this JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="exhaustive oracle on the frozen benchmark")
    common(p, ablations=False)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("figure1", help="optimal scale by object size band")
    common(p, ablations=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-scenes", type=int, default=1000)
    p.set_defaults(func=cmd_figure1)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OracleCapError, RuntimeError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
