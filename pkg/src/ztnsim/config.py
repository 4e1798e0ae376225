"""Sectioned ``key = value`` scenario files.

Sections: ``[scenario]``, ``[radio]``, ``[steering]``, ``[traffic]``, ``[rl]``,
``[orchestrator]`` and any number of ``[device:ID]`` fleet entries. Every key is
optional; a file holding only ``[scenario] seed = 3`` yields the defaults.
Unknown sections or keys are errors, and every error names its ``section.key``.
Relative paths (``rl.policy_dir``, ``orchestrator.task_script``) are resolved
against the directory of the config file.
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace
from pathlib import Path
from typing import Callable

from . import radio
from .engine import ConfigError, OrchestratorConfig, RadioConfig, RlConfig, ScenarioConfig, TrafficConfig
from .linkadapt import PolicyKind, RewardWeights, TrainingSchedule
from .orchestrator import DeviceKind, DeviceStatus
from .radio import BlerModel, Pose
from .steering import SchedulerConfig, ServiceClass

SECTIONS = ("scenario", "radio", "steering", "traffic", "rl", "orchestrator")
DEVICE_PREFIX = "device:"


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _pair(text: str) -> tuple[float, float]:
    vals = _floats(text)
    if len(vals) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {text!r}")
    return vals


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _classes(text: str) -> frozenset:
    return frozenset(ServiceClass.parse(v) for v in _names(text))


def _mix(text: str) -> tuple[tuple[ServiceClass, int], ...]:
    out = {}
    for item in _names(text):
        name, sep, count = item.partition(":")
        if not sep:
            raise ValueError(f"mix entries look like Class:count, got {item!r}")
        n = int(count)
        if n < 0:
            raise ValueError(f"negative flow count for {name}")
        out[ServiceClass.parse(name.strip())] = n
    return tuple(sorted(out.items()))


# key -> converter, per section
_SCHEMA: dict[str, dict[str, Callable[[str], object]]] = {
    "scenario": {
        "n_ue": int, "n_ap": int, "tti_ms": float, "duration_ttis": int,
        "kpi_report_period_ttis": int, "seed": int, "policy": PolicyKind.parse,
    },
    "radio": {
        "bler_slope": float, "mcs_thresholds": _floats, "shadowing_sigma_db": float,
        "shadowing_rho": float, "rate_table": _floats, "tx_power_dbm": float,
        "noise_floor_dbm": float, "field_size": _pair, "ap_position": _pair,
        "speed_kmh": float, "turn_rate": float, "prbs_per_ue": int,
    },
    "steering": {
        "total_prbs": int, "reserved_prbs": int, "target_classes": _classes, "work_conserving": _bool,
    },
    "traffic": {
        "mode": str, "mix": _mix, "window_s": float, "classifier_flows_per_class": int,
    },
    "rl": {
        "episodes": int, "episode_ttis": int, "epsilon_start": float, "epsilon_end": float,
        "decay_fraction": float, "alpha": float, "alpha_end": float, "beta": float, "gamma": float,
        "reward_bler": float, "reward_latency": float, "reward_throughput": float,
        "latency_ref_ms": float, "throughput_ref_kbps": float,
        "lookup_table": _floats, "snr_edges": _floats, "bler_edges": _floats,
        "latency_edges": _floats, "throughput_edges": _floats, "policy_dir": str,
    },
    "orchestrator": {
        "reserved_prbs": int, "best_effort_prbs": int, "urllc_prbs": int, "embb_prbs": int,
        "mmtc_prbs": int, "retry_after_s": float, "score_battery": float, "score_workload": float,
        "score_distance": float, "workload_cap": int, "task_script": str,
    },
    "device": {
        "kind": DeviceKind, "x": float, "y": float, "battery": float, "workload": int,
        "capabilities": _names, "learnt_models": _names, "report_time": float,
    },
}


def _read_section(name, items, schema, problems):
    values = {}
    for key, raw in items:
        path = f"{name}.{key}"
        conv = schema.get(key)
        if conv is None:
            problems.append((path, "unknown key"))
            continue
        try:
            values[key] = conv(raw.strip())
        except (ValueError, KeyError) as exc:
            problems.append((path, f"bad value {raw.strip()!r}: {exc}"))
    return values


def _build(section, cls, kwargs, problems, default, names=None):
    """Construct ``cls``; constructor errors are pinned to the key they mention.

    ``names`` maps constructor argument names back to config keys.
    """
    try:
        return cls(**kwargs)
    except ValueError as exc:
        msg = str(exc)
        key = next((k for k in sorted(kwargs, key=len, reverse=True) if k in msg), None)
        if key is not None and names:
            key = names.get(key, key)
        problems.append((f"{section}.{key}" if key else section, msg))
        return default


def parse_config_text(text: str, base_dir: Path | str = ".") -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([("<file>", str(exc).splitlines()[0])]) from exc
    base = Path(base_dir)
    problems: list[tuple[str, str]] = []
    sec: dict[str, dict] = {s: {} for s in SECTIONS}
    fleet = []
    for name in parser.sections():
        items = parser.items(name, raw=True)
        if name in SECTIONS:
            sec[name] = _read_section(name, items, _SCHEMA[name], problems)
        elif name.startswith(DEVICE_PREFIX) and name[len(DEVICE_PREFIX):].strip():
            dev_id = name[len(DEVICE_PREFIX):].strip()
            d = _read_section(name, items, _SCHEMA["device"], problems)
            if "kind" not in d:
                problems.append((f"{name}.kind", "required"))
                continue
            pose = Pose(d.pop("x", 0.0), d.pop("y", 0.0))
            status = _build(name, DeviceStatus, {"device_id": dev_id, "position": pose, **d}, problems, None)
            if status is not None:
                fleet.append(status)
        else:
            problems.append((name, "unknown section"))

    r = sec["radio"]
    model_keys = {"slope": "bler_slope", "thresholds": "mcs_thresholds",
                  "shadowing_sigma": "shadowing_sigma_db", "shadowing_rho": "shadowing_rho"}
    model_kw = {arg: r.pop(key) for arg, key in model_keys.items() if key in r}
    model = _build("radio", BlerModel, model_kw, problems, BlerModel(), model_keys)
    if "speed_kmh" in r:
        r["speed_mps"] = r.pop("speed_kmh") * radio.KMH
    radio_cfg = RadioConfig(model=model, **r)

    rl = sec["rl"]
    weight_keys = {"bler": "reward_bler", "latency": "reward_latency", "throughput": "reward_throughput",
                   "latency_ref_ms": "latency_ref_ms", "throughput_ref_kbps": "throughput_ref_kbps"}
    w_kw = {arg: rl.pop(key) for arg, key in weight_keys.items() if key in rl}
    weights = _build("rl", RewardWeights, w_kw, problems, RewardWeights(), weight_keys)
    sched_keys = {f.name for f in fields(TrainingSchedule)} - {"weights"}
    sched = TrainingSchedule(weights=weights,
                             **{k: rl.pop(k) for k in list(rl) if k in sched_keys})
    if "policy_dir" in rl:
        rl["policy_dir"] = str(base / rl["policy_dir"])
    rl_cfg = RlConfig(schedule=sched, **rl)

    orch = sec["orchestrator"]
    if "task_script" in orch:
        orch["task_script"] = str(base / orch["task_script"])

    steering = _build("steering", SchedulerConfig, sec["steering"], problems, SchedulerConfig())
    cfg = ScenarioConfig(**sec["scenario"], steering=steering, radio=radio_cfg,
                         traffic=TrafficConfig(**sec["traffic"]), rl=rl_cfg,
                         orchestrator=OrchestratorConfig(**orch), fleet=tuple(fleet))
    try:
        cfg.validate()
    except ConfigError as exc:
        problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_config(path) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([("<file>", f"cannot read {p}: {exc.strerror or exc}")]) from exc
    return parse_config_text(text, p.parent)


def with_seed(cfg: ScenarioConfig, seed: int | None) -> ScenarioConfig:
    return cfg if seed is None else replace(cfg, seed=int(seed))
