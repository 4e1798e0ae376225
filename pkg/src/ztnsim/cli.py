"""``ztnsim`` command line: train, eval, steer, orchestrate, gen-traffic.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Outputs are staged in memory and written with temp-file-and-rename only after
the command succeeded, so a failing command leaves no partial files behind.
Set ``ZTN_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""

from __future__ import annotations

import argparse
import io
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import parse_config, with_seed
from .engine import (
    ConfigError, ScenarioConfig, compare_policies, comparison_csv, curve_csv, load_agents, policy_path,
    train_agents, wins_csv,
)
from .linkadapt import PolicyKind, dump_policy
from .orchestrator import (
    NoCandidateError, Orchestrator, OrchestrationError, PoolExhausted, RegisterDevice, ScoreWeights,
    GrantPolicy, read_task_script,
)
from .steering import (
    NearestCentroidClassifier, compare_steering, generate_mixed_trace, ingest_trace, label_packets,
    synthetic_training_set, write_steering_csv, write_trace,
)

log = logging.getLogger("ztnsim")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this CLI reserves 2 for runtime failures
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _setup_logging() -> None:
    level = os.environ.get("ZTN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _publish(out_dir: Path, files: dict[str, str]) -> list[Path]:
    """Stage every file as a temp file in ``out_dir``, then rename them all."""
    out_dir.mkdir(parents=True, exist_ok=True)
    staged: list[tuple[str, Path]] = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.", suffix=".tmp")
            staged.append((tmp, out_dir / name))
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
    except BaseException:
        for tmp, _ in staged:
            Path(tmp).unlink(missing_ok=True)
        raise
    for tmp, target in staged:
        os.replace(tmp, target)
    return [target for _, target in staged]


def _load_config(args) -> ScenarioConfig:
    cfg = parse_config(args.config) if args.config else ScenarioConfig().validate()
    return with_seed(cfg, args.seed)


# ------------------------------------------------------------------ commands

def cmd_train(cfg: ScenarioConfig, args) -> dict[str, str]:
    every = max(1, cfg.rl.schedule.episodes // 10)

    def progress(ep, value):
        if ep % every == 0 or ep == cfg.rl.schedule.episodes - 1:
            log.info("episode %d/%d mean reward %.4f", ep + 1, cfg.rl.schedule.episodes, value)

    agents, curve = train_agents(cfg, progress)
    files = {"learning_curve.csv": curve_csv(curve)}
    with tempfile.TemporaryDirectory() as tmp:
        for i, a in enumerate(agents):
            path = policy_path(tmp, i)
            dump_policy(a, path)
            files[path.name] = path.read_text()
    return files


def cmd_eval(cfg: ScenarioConfig, args) -> dict[str, str]:
    kinds = [PolicyKind.parse(p) for p in args.policies.split(",") if p.strip()]
    seeds = list(range(cfg.seed, cfg.seed + args.n_seeds))
    agents = None
    if PolicyKind.LEARNED in kinds:
        policy_dir = args.policy_dir or cfg.rl.policy_dir
        if policy_dir is None:
            raise FileNotFoundError("learned policy requested: pass --policy-dir or set rl.policy_dir")
        agents = load_agents(policy_dir, cfg.n_ue)
    comp = compare_policies(cfg, kinds, seeds, agents)
    for metric, per in comp.wins.items():
        log.info("%s wins: %s", metric, per)
    return {"comparison.csv": comparison_csv(comp), "wins.csv": wins_csv(comp)}


def _fit_classifier(cfg: ScenarioConfig, rng) -> NearestCentroidClassifier:
    train = synthetic_training_set(cfg.traffic.classifier_flows_per_class, rng, cfg.traffic.window_s)
    return NearestCentroidClassifier().fit(np.vstack([f.as_array() for f, _ in train]), [c for _, c in train])


def cmd_steer(cfg: ScenarioConfig, args) -> dict[str, str]:
    rng = np.random.default_rng([cfg.seed, 0x57E])
    truth = None
    if args.trace:
        packets = ingest_trace(args.trace)
    else:
        duration = args.duration if args.duration is not None else cfg.duration_ttis * cfg.tti_s
        packets, labels = generate_mixed_trace(duration, rng, dict(cfg.traffic.mix))
        truth = [labels[p.flow_id] for p in packets]
    if not packets:
        raise ValueError("trace holds no packets")
    model = _fit_classifier(cfg, rng)
    classes = label_packets(packets, model, cfg.traffic.window_s)
    scfg = replace(cfg.steering, work_conserving=not args.strict_reservation)
    rows = compare_steering(packets, classes, scfg, cfg.tti_s, truth)
    primary = "strict" if args.strict_reservation else "work_conserving"
    for r in rows:
        if r.mode == primary:
            log.info("%s: %.3f ms -> %.3f ms (x%.3f)", r.service_class.name, r.before_mean_ms,
                     r.after_mean_ms, r.ratio)
    # the selected mode is listed first
    rows.sort(key=lambda r: r.mode != primary)
    buf = io.StringIO()
    write_steering_csv(rows, buf)
    return {"steering_latency.csv": buf.getvalue()}


def cmd_orchestrate(cfg: ScenarioConfig, args) -> dict[str, str]:
    o = cfg.orchestrator
    script = args.tasks or o.task_script
    if script is None:
        raise FileNotFoundError("no task script: pass --tasks or set orchestrator.task_script")
    msgs = read_task_script(script)
    orch = Orchestrator(cfg.n_ap, o.reserved_prbs, o.best_effort_prbs, cfg.radio.field_size,
                        ScoreWeights(o.score_battery, o.score_workload, o.score_distance, o.workload_cap),
                        GrantPolicy(o.urllc_prbs, o.embb_prbs, o.mmtc_prbs, o.retry_after_s))
    for dev in cfg.fleet:
        orch.handle(RegisterDevice(dev.report_time, dev))
    for m in msgs:
        try:
            orch.handle(m)
        except (NoCandidateError, PoolExhausted):
            pass  # business outcome, already in the event log
        except OrchestrationError as exc:
            orch.record(m.time, "error", "", getattr(m, "task_id", ""), str(exc))
    buf = io.StringIO()
    orch.write_log(buf)
    return {"events.csv": buf.getvalue()}


def cmd_gen_traffic(cfg: ScenarioConfig, args) -> dict[str, str]:
    rng = np.random.default_rng([cfg.seed, 0x7AF])
    duration = args.duration if args.duration is not None else cfg.duration_ttis * cfg.tti_s
    packets, labels = generate_mixed_trace(duration, rng, dict(cfg.traffic.mix))
    trace, flows = io.StringIO(), io.StringIO()
    write_trace(packets, trace)
    flows.write("flow_id,class\n" + "".join(f"{fid},{c.name}\n" for fid, c in sorted(labels.items())))
    return {"trace.csv": trace.getvalue(), "flows.csv": flows.getvalue()}


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "steer": cmd_steer,
    "orchestrate": cmd_orchestrate,
    "gen-traffic": cmd_gen_traffic,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="scenario file (sectioned key = value)")
    common.add_argument("--seed", type=int, help="override scenario.seed")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory (default: .)")

    parser = _Parser(prog="ztnsim", description="Zero-touch RAN control-loop simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train one agent per UE")
    ev = sub.add_parser("eval", parents=[common], help="compare link-adaptation policies")
    ev.add_argument("--policies", default="learned,lookup,random",
                    help="comma list of learned, lookup, random")
    ev.add_argument("--policy-dir", type=Path, help="directory holding policy_ue<i>.txt files")
    ev.add_argument("--n-seeds", type=int, default=1, help="evaluate seeds seed..seed+N-1")
    st = sub.add_parser("steer", parents=[common], help="latency before/after traffic steering")
    st.add_argument("--trace", type=Path, help="trace CSV; generated from the scenario when omitted")
    st.add_argument("--duration", type=float, help="seconds of generated traffic")
    st.add_argument("--strict-reservation", action="store_true",
                    help="reserved PRBs never serve other classes (listed first in the report)")
    orch = sub.add_parser("orchestrate", parents=[common], help="replay a task script")
    orch.add_argument("--tasks", type=Path, help="task script CSV (overrides orchestrator.task_script)")
    gen = sub.add_parser("gen-traffic", parents=[common], help="write a synthetic mixed trace")
    gen.add_argument("--duration", type=float, help="seconds of traffic (default: scenario duration)")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "n_seeds", 1) < 1:
            raise UsageError("ztnsim eval: --n-seeds must be >= 1")
        cfg = _load_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        files = COMMANDS[args.command](cfg, args)
        written = _publish(args.out, files)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_RUNTIME
    except (OSError, OrchestrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in written:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
