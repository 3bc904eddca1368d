"""Command-line entry point: ``dqjl {train,indicator,evaluate,sweep,gen-scenario}``.

Every command writes into one output directory (``--out``, default
``$DQJL_OUTPUT_ROOT/<command>``) and echoes its resolved configuration there
as ``config.ini``. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
from dataclasses import fields, replace
import logging
import os
from pathlib import Path
import sys

import numpy as np

from dqjl import net
from dqjl.agent import VARIANTS, train
from dqjl.config import RunConfig, dumps_config, load_config, apply_overrides
from dqjl.errors import DQJLError
from dqjl.rollout import (
    benchmark_passing,
    generate_indicator,
    greedy_rollout,
    rl_passing,
    run_seed,
    run_sweep,
)
from dqjl.scenario import ScenarioSpec, generate_scenario, load_scenario, save_scenario, scenario_pad_size
from dqjl.svg import line_chart, moving_average

LOG = logging.getLogger("dqjl")
OUTPUT_ROOT_ENV = "DQJL_OUTPUT_ROOT"

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(args: argparse.Namespace) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    overrides: dict[str, dict[str, str]] = {}
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("run", {})["seed"] = str(args.seed)
    if getattr(args, "episodes", None) is not None:
        overrides.setdefault("train", {})["episodes"] = str(args.episodes)
    if getattr(args, "variant", None) is not None:
        overrides.setdefault("train", {})["variant"] = args.variant
    if getattr(args, "jobs", None) is not None:
        overrides.setdefault("sweep", {})["jobs"] = str(args.jobs)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        overrides.setdefault(section, {})[name] = value
    return apply_overrides(cfg, overrides)


def _echo(out: Path, cfg: RunConfig) -> None:
    (out / "config.ini").write_text(dumps_config(cfg))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    _echo(out, cfg)
    tc = cfg.train_config()
    report = train(tc, cfg.road, cfg.scenario, progress_every=args.progress)
    net.save(report.params, out / "checkpoint.json")
    (out / "train_report.csv").write_text(report.to_csv())
    returns = report.returns().tolist()
    episodes = list(range(len(returns)))
    window = max(1, min(100, len(returns) // 10 or 1))
    svg = line_chart(
        [
            ("episode return", episodes, returns),
            (f"moving average ({window})", episodes, moving_average(returns, window)),
        ],
        title=f"{tc.variant.upper()} training, K={cfg.road.pad_size}, L={cfg.road.segment_length_m:g} m",
        xlabel="episode",
        ylabel="return",
    )
    (out / "learning_curve.svg").write_text(svg)
    print(
        f"trained {len(returns)} episodes ({report.env_steps} steps, {report.gradient_steps} updates, "
        f"{report.target_syncs} target syncs) -> {out}"
    )
    return EXIT_OK


def _load_checkpoint(path: str | None) -> net.QNetworkParams:
    if not path:
        raise UsageError("a --checkpoint is required")
    return net.load(path)


def cmd_indicator(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    params = _load_checkpoint(args.checkpoint)
    try:
        stored_k = scenario_pad_size(args.scenario)
        state = load_scenario(args.scenario)
    except (OSError, ValueError) as exc:
        raise DQJLError(f"cannot read scenario {args.scenario}: {exc}") from exc
    if stored_k is not None and stored_k != params.pad_size:
        raise DQJLError(f"checkpoint K={params.pad_size} does not match scenario K={stored_k}")
    road = replace(cfg.road, pad_size=params.pad_size)
    cfg = replace(cfg, road=road)
    out = _out_dir(args)
    _echo(out, cfg)
    noise = cfg.run.seed if args.noise_seed is None else args.noise_seed
    ind = generate_indicator(params, state, road, noise)
    rows = [
        [i, s, "" if s < 0 else repr(s * road.dt_s)]
        for i, s in enumerate(ind.steps)
    ]
    _write_csv(out / "indicator.csv", ["vehicle_index", "T_step", "T_seconds"], rows)
    summary = (
        f"established={int(ind.established)}\n"
        f"establishment_step={ind.establishment_step}\n"
        f"establishment_time_s={ind.establishment_step * road.dt_s!r}\n"
        f"collided={int(ind.collided)}\n"
        f"noise_seed={noise}\n"
    )
    (out / "indicator_summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    params = _load_checkpoint(args.checkpoint)
    road = replace(cfg.road, pad_size=params.pad_size)
    cfg = replace(cfg, road=road)
    out = _out_dir(args)
    _echo(out, cfg)
    rows = []
    for k in range(cfg.run.eval_rollouts):
        rs = run_seed(cfg.run.seed, 0, k)
        state = generate_scenario(cfg.scenario, road, np.random.default_rng(rs))
        ro = greedy_rollout(params, state, road, (rs, 1))
        rl = rl_passing(params, state, road, (rs, 1), seed=rs, emv_length_m=cfg.sweep.emv_length_m)
        bm = benchmark_passing(
            state, road, (rs, 1), trigger_m=cfg.sweep.trigger_m, seed=rs, emv_length_m=cfg.sweep.emv_length_m
        )
        rows.append(
            [k, rs, state.n_real, ro.steps, int(ro.established), int(ro.collided), repr(ro.total_reward),
             repr(rl.passing_time_s), repr(bm.passing_time_s)]
        )
    _write_csv(
        out / "evaluation.csv",
        ["rollout", "seed", "n_vehicles", "steps", "established", "collided", "return",
         "rl_passing_time_s", "benchmark_passing_time_s"],
        rows,
    )
    n = len(rows)
    ok = sum(1 for r in rows if r[4] == 1 and r[5] == 0)
    print(f"{ok}/{n} greedy rollouts established without collision -> {out}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    if not args.checkpoint:
        raise DQJLError("sweep needs a trained --checkpoint for the RL policy")
    params = net.load(args.checkpoint)
    road = replace(cfg.road, pad_size=params.pad_size)
    cfg = replace(cfg, road=road)
    out = _out_dir(args)
    _echo(out, cfg)
    skip = {"n_vehicles", "spacing_m_per_veh", "n_jitter", "seed", "background_speed_mps"}
    scenario_kwargs = {f.name: getattr(cfg.scenario, f.name) for f in fields(ScenarioSpec) if f.name not in skip}
    sw = cfg.sweep
    result = run_sweep(
        sw.spacings, sw.speeds, sw.runs_per_cell,
        policies={"rl": params, "benchmark": None},
        seed=cfg.run.seed, config=road, trigger_m=sw.trigger_m, jobs=sw.jobs,
        scenario_kwargs=scenario_kwargs, emv_length_m=sw.emv_length_m,
    )
    (out / "sweep_detail.csv").write_text(result.detail_csv())
    (out / "sweep_aggregate.csv").write_text(result.aggregate_csv())
    (out / "sweep_comparison.csv").write_text(result.comparison_csv())
    series = []
    dashed = []
    for speed in sw.speeds:
        for policy in ("rl", "benchmark"):
            ys = [result.mean(s, float(speed), policy) for s in sw.spacings]
            label = f"{policy} v_b={speed:g}"
            series.append((label, list(sw.spacings), ys))
            if policy == "benchmark":
                dashed.append(label)
    (out / "sweep_passing_time.svg").write_text(
        line_chart(
            series,
            title="EMV passing time against spacing and background speed",
            xlabel="spacing (m/veh)",
            ylabel="mean EMV passing time (s)",
            dashed=dashed,
        )
    )
    best = result.best_improvement()
    if best is None:
        print("no comparable cells")
    else:
        print(
            f"best improvement {best['improvement_pct']:.2f}% at spacing {best['spacing_m_per_veh']:g} m/veh, "
            f"v_b {best['v_b_mps']:g} m/s (rl {best['rl_mean_s']:.3f} s vs benchmark {best['benchmark_mean_s']:.3f} s)"
        )
    return EXIT_OK


def cmd_gen_scenario(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    _echo(out, cfg)
    spec = cfg.scenario
    rng = np.random.default_rng(cfg.run.seed if spec.seed is None else spec.seed)
    state = generate_scenario(spec, cfg.road, rng)
    path = out / args.name
    save_scenario(state, path)
    print(f"{state.n_real} vehicles -> {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dqjl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    p = sub.add_parser("train", help="train a Q-network agent")
    common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--progress", type=int, default=0, help="log every N episodes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("indicator", help="yielding time indicator for one scenario")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--noise-seed", type=int)
    p.set_defaults(func=cmd_indicator)

    p = sub.add_parser("evaluate", help="greedy rollouts and passing times on random scenarios")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="density x speed passing-time comparison")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-scenario", help="write a random scenario file")
    common(p)
    p.add_argument("--name", default="scenario.csv")
    p.set_defaults(func=cmd_gen_scenario)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "progress", 0) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dqjl: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DQJLError, OSError, ValueError) as exc:
        print(f"dqjl: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
