"""TTI-stepped simulation loop, the in-process E2 channel, and experiment harnesses."""

from __future__ import annotations

import base64
import csv
import hashlib
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import radio
from .linkadapt import (
    FactoredPolicy, KpiEdges, LookupTablePolicy, PolicyKind, RandomPolicy, RewardWeights,
    TrainingSchedule, load_policy, reward,
)
from .orchestrator import DeviceStatus
from .radio import BlerModel, LinkKpi, TxConfig
from .steering import (
    DEFAULT_MIX, PacketEvent, SchedulerConfig, ServiceClass, ClassQueues, NearestCentroidClassifier,
    generate_mixed_trace, label_packets, latency_report, schedule_tti, synthetic_training_set,
)

STREAMS = ("init", "mobility", "shadowing", "harq", "traffic", "policy")
CHECKPOINT_VERSION = 1
MAX_ATTEMPTS = radio.MAX_HARQ_RETX + 1


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists ``(key_path, message)``."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{k}: {m}" for k, m in problems))


@dataclass(frozen=True)
class RadioConfig:
    model: BlerModel = field(default_factory=BlerModel)
    rate_table: tuple[float, ...] = field(default_factory=radio.default_rate_table)
    tx_power_dbm: float = 23.0
    noise_floor_dbm: float = -65.0
    field_size: tuple[float, float] = (50.0, 50.0)
    ap_position: tuple[float, float] = (0.0, 0.0)
    speed_mps: float = radio.DEFAULT_SPEED
    turn_rate: float = 0.2
    prbs_per_ue: int = 1


@dataclass(frozen=True)
class TrafficConfig:
    mode: str = "full_buffer"
    mix: tuple[tuple[ServiceClass, int], ...] = tuple(sorted(DEFAULT_MIX.items()))
    window_s: float = 1.0
    classifier_flows_per_class: int = 50


EDGE_DIMS = ("snr", "bler", "latency", "throughput")


@dataclass(frozen=True)
class RlConfig:
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    lookup_table: tuple[float, ...] | None = None
    policy_dir: str | None = None
    snr_edges: tuple[float, ...] | None = None
    bler_edges: tuple[float, ...] | None = None
    latency_edges: tuple[float, ...] | None = None
    throughput_edges: tuple[float, ...] | None = None

    def edges(self) -> KpiEdges | None:
        """Quantization edges with the configured overrides, None when all are default."""
        given = {dim: getattr(self, f"{dim}_edges") for dim in EDGE_DIMS}
        given = {k: v for k, v in given.items() if v is not None}
        return KpiEdges(**given) if given else None


@dataclass(frozen=True)
class OrchestratorConfig:
    reserved_prbs: int = 10
    best_effort_prbs: int = 40
    urllc_prbs: int = 1
    embb_prbs: int = 2
    mmtc_prbs: int = 1
    retry_after_s: float = 1.0
    score_battery: float = 1.0
    score_workload: float = 0.5
    score_distance: float = 0.3
    workload_cap: int = 10
    task_script: str | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    n_ue: int = 5
    n_ap: int = 1
    tti_ms: float = 1.0
    duration_ttis: int = 60_000
    kpi_report_period_ttis: int = 10
    seed: int = 0
    policy: PolicyKind = PolicyKind.LOOKUP_TABLE
    steering: SchedulerConfig = field(default_factory=SchedulerConfig)
    radio: RadioConfig = field(default_factory=RadioConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    orchestrator: OrchestratorConfig = field(default_factory=OrchestratorConfig)
    fleet: tuple[DeviceStatus, ...] = ()

    def validate(self) -> "ScenarioConfig":
        problems = []
        if self.n_ue < 1:
            problems.append(("scenario.n_ue", f"must be >= 1, got {self.n_ue}"))
        if self.n_ap < 1:
            problems.append(("scenario.n_ap", f"must be >= 1, got {self.n_ap}"))
        if not self.tti_ms > 0:
            problems.append(("scenario.tti_ms", f"must be > 0, got {self.tti_ms}"))
        if self.duration_ttis < 0:
            problems.append(("scenario.duration_ttis", f"must be >= 0, got {self.duration_ttis}"))
        if self.kpi_report_period_ttis < 1:
            problems.append(("scenario.kpi_report_period_ttis", "must be >= 1"))
        r = self.radio
        if len(r.rate_table) != radio.N_MCS or any(v < 0 for v in r.rate_table):
            problems.append(("radio.rate_table", f"need {radio.N_MCS} non-negative values"))
        if min(r.field_size) <= 0:
            problems.append(("radio.field_size", "field dimensions must be positive"))
        if r.speed_mps < 0:
            problems.append(("radio.speed_mps", "must be >= 0"))
        if r.turn_rate < 0:
            problems.append(("radio.turn_rate", "must be >= 0"))
        if r.prbs_per_ue < 0:
            problems.append(("radio.prbs_per_ue", "must be >= 0"))
        if self.traffic.mode not in ("full_buffer", "steered"):
            problems.append(("traffic.mode", f"must be full_buffer or steered, got {self.traffic.mode!r}"))
        if self.traffic.window_s <= 0:
            problems.append(("traffic.window_s", "must be > 0"))
        lt = self.rl.lookup_table
        if lt is not None and (len(lt) != radio.N_MCS or any(b <= a for a, b in zip(lt, lt[1:]))):
            problems.append(("rl.lookup_table", f"need {radio.N_MCS} strictly increasing thresholds"))
        for dim in EDGE_DIMS:
            if getattr(self.rl, f"{dim}_edges") is not None:
                try:
                    KpiEdges(**{dim: getattr(self.rl, f"{dim}_edges")})
                except ValueError as exc:
                    problems.append((f"rl.{dim}_edges", str(exc)))
        try:
            self.rl.schedule.validate()
        except ValueError as exc:
            msg = str(exc)
            names = sorted((f.name for f in fields(TrainingSchedule)), key=len, reverse=True)
            key = next((n for n in names if n in msg), None)
            if key is None and "episode" in msg:
                key = "episodes"
            problems.append((f"rl.{key}" if key else "rl", msg))
        o = self.orchestrator
        for name in ("reserved_prbs", "best_effort_prbs", "urllc_prbs", "embb_prbs", "mmtc_prbs"):
            if getattr(o, name) < 0:
                problems.append((f"orchestrator.{name}", "must be >= 0"))
        if o.workload_cap < 1:
            problems.append(("orchestrator.workload_cap", "must be >= 1"))
        if not o.retry_after_s >= 0:
            problems.append(("orchestrator.retry_after_s", "must be >= 0"))
        ids = [d.device_id for d in self.fleet]
        if len(set(ids)) != len(ids):
            problems.append(("fleet", "duplicate device ids"))
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def tti_s(self) -> float:
        return self.tti_ms / 1000.0

    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()


# ---------------------------------------------------------------- E2 channel

@dataclass(frozen=True)
class KpiReport:
    tti: int
    ue: int
    kpi: LinkKpi


@dataclass(frozen=True)
class ControlMessage:
    tti: int
    ue: int
    config: TxConfig


class E2Channel:
    """In-process stand-in for E2: KPI reports go up, TxConfig commands come down."""

    def __init__(self):
        self.uplink: deque[KpiReport] = deque()
        self.downlink: deque[ControlMessage] = deque()

    def drain_uplink(self) -> list[KpiReport]:
        out = list(self.uplink)
        self.uplink.clear()
        return out


@dataclass
class MetricsFrame:
    tti: int
    kpis: list[LinkKpi]
    class_latency: dict[ServiceClass, tuple[float, float]]
    grants: int
    rewards: list[float]


class RicController:
    """Near-RT RIC xApp: one controller per UE, refreshed on every KPI report."""

    def __init__(self, controllers: Sequence, rng: np.random.Generator):
        self.controllers = list(controllers)
        self.rng = rng

    def __call__(self, reports: Sequence[KpiReport]) -> list[ControlMessage]:
        return [ControlMessage(r.tti, r.ue, self.controllers[r.ue].act(r.kpi, self.rng)) for r in reports]


# --------------------------------------------------------------------- world

class World:
    """Complete simulator state; a pure function of (config, seed, elapsed TTIs)."""

    def __init__(self, cfg: ScenarioConfig, seed=None):
        cfg.validate()
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        children = np.random.SeedSequence(self.seed).spawn(len(STREAMS))
        self.rng = {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}
        n = cfg.n_ue
        r = cfg.radio
        init = self.rng["init"]
        self.x = init.uniform(0.0, r.field_size[0], n)
        self.y = init.uniform(0.0, r.field_size[1], n)
        self.heading = init.uniform(0.0, 2.0 * math.pi, n)
        self.speed = np.full(n, float(r.speed_mps))
        self.shadow = r.model.shadowing_sigma * init.standard_normal(n)
        self.mcs = np.zeros(n, dtype=np.int64)
        self.rep = np.ones(n, dtype=np.int64)
        self.harq = np.full(n, radio.MAX_HARQ_RETX, dtype=np.int64)
        self.attempt = np.zeros(n, dtype=np.int64)
        self.tti = 0
        self.e2 = E2Channel()
        self.frames: list[MetricsFrame] = []
        self._rates = np.asarray(r.rate_table, dtype=float)
        self._thresholds = np.asarray(r.model.thresholds)
        self._reset_acc()
        self.tot = {k: np.zeros(n) for k in ("blocks", "fail", "bits", "lat", "deliv", "ttis")}
        self.snr = self._snr()
        # traffic
        self.steered = cfg.traffic.mode == "steered"
        self.packets: list[PacketEvent] = []
        self.classes: list[ServiceClass] = []
        self.truth: list[ServiceClass] = []
        self.packet_ue = np.zeros(0, dtype=np.int64)
        self.queues = ClassQueues()
        self.next_packet = 0
        self.grant_log: list = []
        self._period_grants: list = []
        if self.steered:
            self._init_traffic()

    # -- setup helpers

    def _reset_acc(self):
        n = self.cfg.n_ue
        self.acc = {k: np.zeros(n) for k in ("snr", "ttis", "blocks", "fail", "bits", "lat", "deliv", "attempts")}

    def _init_traffic(self):
        cfg = self.cfg
        rng = self.rng["traffic"]
        duration = cfg.duration_ttis * cfg.tti_s
        mix = dict(cfg.traffic.mix)
        packets, labels = generate_mixed_trace(duration, rng, mix)
        model = NearestCentroidClassifier()
        train = synthetic_training_set(cfg.traffic.classifier_flows_per_class, rng, cfg.traffic.window_s)
        model.fit(np.vstack([f.as_array() for f, _ in train]), [c for _, c in train])
        self.packets = packets
        self.truth = [labels[p.flow_id] for p in packets]
        self.classes = label_packets(packets, model, cfg.traffic.window_s) if packets else []
        flows = sorted(labels)
        ue_of_flow = {fid: i % cfg.n_ue for i, fid in enumerate(flows)}
        self.packet_ue = np.array([ue_of_flow[p.flow_id] for p in packets], dtype=np.int64)

    def _snr(self) -> np.ndarray:
        r = self.cfg.radio
        d = np.hypot(self.x - r.ap_position[0], self.y - r.ap_position[1])
        return radio.snr_db(r.tx_power_dbm, radio.path_loss_db(d), self.shadow, r.noise_floor_dbm)

    # -- control plane

    def tx_config(self, ue: int) -> TxConfig:
        return TxConfig(int(self.mcs[ue]), int(self.rep[ue]), int(self.harq[ue]))

    def apply(self, controls: Sequence[ControlMessage]) -> None:
        for c in controls:
            self.e2.downlink.append(c)
        while self.e2.downlink:
            c = self.e2.downlink.popleft()
            self.mcs[c.ue] = c.config.mcs
            self.rep[c.ue] = c.config.repetition
            self.harq[c.ue] = c.config.harq_max_retx

    def initial_reports(self) -> list[KpiReport]:
        """SNR-only reports used for the very first control decision."""
        return [KpiReport(self.tti, i, LinkKpi(float(s), 0.0, 0.0, 0.0)) for i, s in enumerate(self.snr)]

    # -- the TTI

    def step_tti(self, ric: Callable[[list[KpiReport]], list[ControlMessage]] | None = None) -> None:
        cfg, r = self.cfg, self.cfg.radio
        n = cfg.n_ue
        dt = cfg.tti_s
        # 1. mobility
        u = self.rng["mobility"].random((2, n))
        self.x, self.y, self.heading = radio.advance(
            self.x, self.y, self.heading, self.speed, dt, u[0], 2.0 * math.pi * u[1],
            r.field_size, r.turn_rate)
        # 2. channel
        self.shadow = radio.sample_shadowing(self.shadow, r.model, self.rng["shadowing"])
        self.snr = snr = self._snr()
        # 3-4. traffic arrivals and steering schedule
        a = self.acc
        a["snr"] += snr
        a["ttis"] += 1
        if self.steered:
            self._transmit_granted(snr)
        else:
            self._transmit_full_buffer(snr)
        self.tti += 1
        # 7. report boundary: KPI up, refreshed TxConfig down
        if self.tti % cfg.kpi_report_period_ttis == 0:
            reports = self._close_period()
            if ric is not None:
                self.apply(ric(reports))

    def _transmit_full_buffer(self, snr):
        """One stop-and-wait HARQ process per link; a retransmission takes the
        link's next TTI, so failed attempts cost throughput as well as latency."""
        cfg, r = self.cfg, self.cfg.radio
        if r.prbs_per_ue == 0:
            return
        u = self.rng["harq"].random(cfg.n_ue)
        p = radio.bler(snr + 10.0 * np.log10(self.rep), self.mcs, r.model)
        ok = u >= p
        attempt = self.attempt + 1
        dropped = ~ok & (attempt > self.harq)
        finished = ok | dropped
        block_bits = r.prbs_per_ue * self._rates[self.mcs] / self.rep * cfg.tti_ms
        a = self.acc
        a["blocks"] += finished
        a["fail"] += dropped
        a["bits"] += np.where(ok, block_bits, 0.0)
        a["lat"] += np.where(ok, attempt * cfg.tti_ms, 0.0)
        a["deliv"] += ok
        a["attempts"] += 1
        self.attempt = np.where(finished, 0, attempt)

    def _transmit_granted(self, snr):
        """One transport block per granted PRB; HARQ retransmissions run on the
        link's own processes and do not consume steering grants."""
        cfg, r = self.cfg, self.cfg.radio
        n = cfg.n_ue
        block_ue, queueing = self._schedule()
        draws = self.rng["harq"].random((block_ue.size, MAX_ATTEMPTS))
        if not block_ue.size:
            return
        mcs, rep, harq = self.mcs[block_ue], self.rep[block_ue], self.harq[block_ue]
        p = radio.bler(snr[block_ue] + 10.0 * np.log10(rep), mcs, r.model)
        ok = (draws >= p[:, None]) & (np.arange(MAX_ATTEMPTS)[None, :] <= harq[:, None])
        delivered = ok.any(axis=1)
        attempts = np.where(delivered, ok.argmax(axis=1) + 1, harq + 1)
        bits = np.where(delivered, self._rates[mcs] / rep * cfg.tti_ms, 0.0)
        lat = np.where(delivered, attempts * cfg.tti_ms + queueing, 0.0)
        a = self.acc
        a["blocks"] += np.bincount(block_ue, minlength=n)
        a["fail"] += np.bincount(block_ue, weights=~delivered, minlength=n)
        a["bits"] += np.bincount(block_ue, weights=bits, minlength=n)
        a["lat"] += np.bincount(block_ue, weights=lat, minlength=n)
        a["deliv"] += np.bincount(block_ue, weights=delivered, minlength=n)
        a["attempts"] += np.bincount(block_ue, weights=attempts, minlength=n)

    def _schedule(self):
        cfg = self.cfg
        start = self.tti * cfg.tti_s
        pk = self.packets
        while self.next_packet < len(pk) and pk[self.next_packet].arrival_time <= start + 1e-12:
            i = self.next_packet
            self.queues.enqueue(i, pk[i].arrival_time, self.classes[i], pk[i].flow_id)
            self.next_packet += 1
        grants = schedule_tti(self.queues, cfg.steering, self.tti)
        self.grant_log.extend(grants)
        self._period_grants.extend(grants)
        ids = np.array([g.packet_id for g in grants], dtype=np.int64)
        block_ue = self.packet_ue[ids] if ids.size else np.zeros(0, dtype=np.int64)
        queueing = np.array([(start - g.arrival_time) * 1e3 for g in grants])
        return block_ue, np.maximum(queueing, 0.0)

    def _close_period(self) -> list[KpiReport]:
        cfg = self.cfg
        a = self.acc
        period_ms = a["ttis"] * cfg.tti_ms
        snr = a["snr"] / np.maximum(a["ttis"], 1)
        bler = np.divide(a["fail"], a["blocks"], out=np.zeros_like(a["fail"]), where=a["blocks"] > 0)
        tput = a["bits"] / np.maximum(period_ms, 1e-12)
        no_deliv = (a["blocks"] > 0) & (a["deliv"] == 0)
        lat = np.divide(a["lat"], a["deliv"], out=np.zeros_like(a["lat"]), where=a["deliv"] > 0)
        lat = np.where(no_deliv, (self.harq + 1) * cfg.tti_ms, lat)
        kpis = [LinkKpi(float(s), float(b), float(l), float(t)) for s, b, l, t in zip(snr, bler, lat, tput)]
        for k in self.tot:
            self.tot[k] += a[k]
        weights = cfg.rl.schedule.weights
        class_lat = {}
        if self.steered and self._period_grants:
            by_cls: dict[ServiceClass, list[float]] = {}
            for g in self._period_grants:
                cls = self.truth[g.packet_id]
                by_cls.setdefault(cls, []).append(((g.tti + 1) * cfg.tti_s - g.arrival_time) * 1e3)
            class_lat = {c: (float(np.mean(v)), float(np.percentile(v, 95))) for c, v in sorted(by_cls.items())}
        frame = MetricsFrame(self.tti, kpis, class_lat, len(self._period_grants),
                             [reward(k, weights) for k in kpis])
        self.frames.append(frame)
        self._period_grants = []
        self._reset_acc()
        reports = [KpiReport(self.tti, i, k) for i, k in enumerate(kpis)]
        self.e2.uplink.extend(reports)
        return self.e2.drain_uplink()

    # -- summaries

    def summary(self) -> dict:
        cfg = self.cfg
        t = self.tot
        rows = []
        for i in range(cfg.n_ue):
            blocks = t["blocks"][i]
            rows.append({
                "ue": i,
                "mean_bler": float(t["fail"][i] / blocks) if blocks else 0.0,
                "mean_throughput_kbps": float(t["bits"][i] / (t["ttis"][i] * cfg.tti_ms)) if t["ttis"][i] else 0.0,
                "mean_latency_ms": float(t["lat"][i] / t["deliv"][i]) if t["deliv"][i] else 0.0,
            })
        out = {"ue": rows}
        if self.steered:
            out["classes"] = latency_report(self.grant_log, self.packets, self.truth, cfg.tti_s)
        return out

    # -- state capture

    def _arrays(self) -> dict[str, np.ndarray]:
        arrs = {"x": self.x, "y": self.y, "heading": self.heading, "speed": self.speed,
                "shadow": self.shadow, "mcs": self.mcs, "rep": self.rep, "harq": self.harq, "attempt": self.attempt}
        arrs.update({f"acc.{k}": v for k, v in self.acc.items()})
        arrs.update({f"tot.{k}": v for k, v in self.tot.items()})
        return arrs

    def state(self) -> dict:
        return {
            "tti": self.tti,
            "seed": _jsonable_seed(self.seed),
            "arrays": {k: _encode(v) for k, v in self._arrays().items()},
            "rng": {k: g.bit_generator.state for k, g in self.rng.items()},
            "queues": self.queues.snapshot(),
            "queue_seq": self.queues._seq,
            "next_packet": self.next_packet,
            "grant_log": [[g.tti, g.prb, g.packet_id] for g in self.grant_log],
            "period_grants": len(self._period_grants),
            "frames": [_frame_to_json(f) for f in self.frames],
        }

    def state_hash(self) -> str:
        blob = json.dumps(self.state(), sort_keys=True, default=_json_default).encode()
        return hashlib.sha256(blob).hexdigest()

    def save_checkpoint(self, path) -> None:
        doc = {"format": "ztnsim-checkpoint", "version": CHECKPOINT_VERSION,
               "config_digest": self.cfg.digest(), "state": self.state()}
        _atomic_write(Path(path), json.dumps(doc, sort_keys=True, default=_json_default))

    @classmethod
    def load_checkpoint(cls, path, cfg: ScenarioConfig) -> "World":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "ztnsim-checkpoint":
            raise ValueError(f"{path}: not a checkpoint file")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
        if doc["config_digest"] != cfg.digest():
            raise ValueError(f"{path}: checkpoint was written for a different configuration")
        st = doc["state"]
        seed = st["seed"]
        world = cls(cfg, seed=tuple(seed) if isinstance(seed, list) else seed)
        world.tti = st["tti"]
        for k, v in st["arrays"].items():
            arr = _decode(v)
            if k.startswith("acc."):
                world.acc[k[4:]] = arr
            elif k.startswith("tot."):
                world.tot[k[4:]] = arr
            else:
                setattr(world, k, arr)
        for k, s in st["rng"].items():
            world.rng[k].bit_generator.state = s
        world.queues = ClassQueues.restore(st["queues"], st["queue_seq"])
        world.next_packet = st["next_packet"]
        world.grant_log = [_regrant(world, t, prb, pid) for t, prb, pid in st["grant_log"]]
        n_pending = st["period_grants"]
        world._period_grants = world.grant_log[len(world.grant_log) - n_pending:] if n_pending else []
        world.frames = [_frame_from_json(f) for f in st["frames"]]
        world.snr = world._snr()
        return world


def _regrant(world, tti, prb, pid):
    from .steering import PrbGrant
    p = world.packets[pid]
    return PrbGrant(tti, prb, p.flow_id, world.classes[pid], p.arrival_time, pid)


def _jsonable_seed(seed):
    return list(seed) if isinstance(seed, (tuple, list)) else seed


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    return {"dtype": arr.dtype.str, "shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode()}


def _decode(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(type(o).__name__)


def _frame_to_json(f: MetricsFrame) -> dict:
    return {"tti": f.tti,
            "kpis": [[k.snr_db, k.bler, k.latency_ms, k.throughput_kbps] for k in f.kpis],
            "class_latency": {c.name: list(v) for c, v in f.class_latency.items()},
            "grants": f.grants, "rewards": list(f.rewards)}


def _frame_from_json(d: dict) -> MetricsFrame:
    return MetricsFrame(d["tti"], [LinkKpi(*k) for k in d["kpis"]],
                        {ServiceClass[c]: tuple(v) for c, v in d["class_latency"].items()},
                        d["grants"], list(d["rewards"]))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# ------------------------------------------------------------------- running

def policy_path(policy_dir, ue: int) -> Path:
    return Path(policy_dir) / f"policy_ue{ue}.txt"


def load_agents(policy_dir, n_ue: int) -> list[FactoredPolicy]:
    agents = []
    for i in range(n_ue):
        path = policy_path(policy_dir, i)
        if not path.is_file():
            raise FileNotFoundError(f"missing trained policy file {path}")
        agents.append(load_policy(path))
    return agents


def build_controllers(cfg: ScenarioConfig, kind: PolicyKind, agents: Sequence[FactoredPolicy] | None = None):
    if kind is PolicyKind.LEARNED:
        if agents is None:
            if cfg.rl.policy_dir is None:
                raise FileNotFoundError("learned policy requested but no policy directory configured")
            agents = load_agents(cfg.rl.policy_dir, cfg.n_ue)
        if len(agents) != cfg.n_ue:
            raise ValueError(f"need {cfg.n_ue} trained agents, got {len(agents)}")
        greedy = []
        for a in agents:
            a = a.copy()
            a.epsilon = 0.0
            greedy.append(a)
        return greedy
    if kind is PolicyKind.LOOKUP_TABLE:
        table = cfg.rl.lookup_table or cfg.radio.model.thresholds
        return [LookupTablePolicy(table) for _ in range(cfg.n_ue)]
    return [RandomPolicy() for _ in range(cfg.n_ue)]


@dataclass
class ScenarioResult:
    frames: list[MetricsFrame]
    summary: dict
    world: World


def run_scenario(cfg: ScenarioConfig, agents: Sequence[FactoredPolicy] | None = None,
                 world: World | None = None, stop_at: int | None = None) -> ScenarioResult:
    """Run ``cfg.duration_ttis`` TTIs (or resume ``world`` to that point).

    ``stop_at`` halts early, which together with checkpoints gives resumable runs.
    """
    cfg.validate()
    controllers = build_controllers(cfg, cfg.policy, agents)
    if world is None:
        world = World(cfg)
        ric = RicController(controllers, world.rng["policy"])
        if cfg.duration_ttis > 0:
            world.apply(ric(world.initial_reports()))
    ric = RicController(controllers, world.rng["policy"])
    end = cfg.duration_ttis if stop_at is None else min(stop_at, cfg.duration_ttis)
    while world.tti < end:
        world.step_tti(ric)
    return ScenarioResult(world.frames, world.summary(), world)


def mean_summary(summary: dict) -> dict[str, float]:
    rows = summary["ue"]
    return {k: float(np.mean([r[k] for r in rows]))
            for k in ("mean_bler", "mean_throughput_kbps", "mean_latency_ms")}


@dataclass
class Comparison:
    rows: list[dict]
    wins: dict[str, dict[str, int]]

    def by_policy(self, kind: PolicyKind) -> list[dict]:
        return [r for r in self.rows if r["policy"] == kind.value]


def compare_policies(cfg: ScenarioConfig, policies: Sequence[PolicyKind], seeds: Sequence[int],
                     agents: Sequence[FactoredPolicy] | None = None) -> Comparison:
    """Every policy on every seed; a win goes to the strictly best policy per seed and metric."""
    policies = [PolicyKind.parse(p) for p in policies]
    if len(policies) < 2:
        raise ValueError("compare_policies needs at least two policies")
    if not seeds:
        raise ValueError("compare_policies needs at least one seed")
    if PolicyKind.LEARNED in policies and agents is None:
        if cfg.rl.policy_dir is None:
            raise FileNotFoundError("learned policy requested but no policy directory configured")
        agents = load_agents(cfg.rl.policy_dir, cfg.n_ue)
    rows = []
    for seed in seeds:
        for kind in policies:
            res = run_scenario(replace(cfg, seed=int(seed), policy=kind), agents)
            rows.append({"policy": kind.value, "seed": int(seed), **mean_summary(res.summary)})
    metrics = {"mean_bler": min, "mean_throughput_kbps": max, "mean_latency_ms": min}
    wins = {m: {p.value: 0 for p in policies} for m in metrics}
    for seed in seeds:
        seed_rows = [r for r in rows if r["seed"] == int(seed)]
        for m, best in metrics.items():
            vals = [r[m] for r in seed_rows]
            b = best(vals)
            if vals.count(b) == 1:
                wins[m][seed_rows[vals.index(b)]["policy"]] += 1
    return Comparison(rows, wins)


# ------------------------------------------------------------------ training

class RanEnv:
    """Episode-wise full-buffer environment used for training (agents act as the RIC)."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = replace(cfg, traffic=replace(cfg.traffic, mode="full_buffer")).validate()
        self.world: World | None = None

    def steps_per_episode(self, episode_ttis: int) -> int:
        return max(1, episode_ttis // self.cfg.kpi_report_period_ttis)

    def reset(self, episode: int) -> list[LinkKpi]:
        self.world = World(self.cfg, seed=(self.cfg.seed, 0x7A7, episode))
        return [r.kpi for r in self.world.initial_reports()]

    def step(self, actions: Sequence[TxConfig]) -> list[LinkKpi]:
        w = self.world
        w.apply([ControlMessage(w.tti, i, a) for i, a in enumerate(actions)])
        for _ in range(self.cfg.kpi_report_period_ttis):
            w.step_tti()
        return [k for k in w.frames[-1].kpis]


def train_agents(cfg: ScenarioConfig, progress=None):
    """Train one agent per UE on ``cfg``; returns (agents, learning curve)."""
    from .linkadapt import train
    sched = cfg.rl.schedule.validate()
    env = RanEnv(cfg)
    agents = [FactoredPolicy(epsilon=sched.epsilon_start, alpha=sched.alpha, gamma=sched.gamma,
                             edges=cfg.rl.edges(), beta=sched.beta)
              for _ in range(cfg.n_ue)]
    rng = np.random.default_rng([cfg.seed, 0xA6E])
    return train(env, agents, sched, rng, progress)


# ---------------------------------------------------------------------- CSV

METRICS_HEADER = ["tti", "ue", "snr_db", "bler", "latency_ms", "throughput_kbps"]
CLASS_METRICS_HEADER = ["tti", "class", "mean_ms", "p95_ms"]
SUMMARY_HEADER = ["ue", "mean_bler", "mean_throughput_kbps", "mean_latency_ms"]


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def metrics_csv(frames: Sequence[MetricsFrame]) -> str:
    rows = [METRICS_HEADER]
    for f in frames:
        for i, k in enumerate(f.kpis):
            rows.append([f.tti, i, repr(k.snr_db), repr(k.bler), repr(k.latency_ms), repr(k.throughput_kbps)])
    return _csv_text(rows)


def class_metrics_csv(frames: Sequence[MetricsFrame]) -> str:
    rows = [CLASS_METRICS_HEADER]
    for f in frames:
        for c, (mean, p95) in f.class_latency.items():
            rows.append([f.tti, c.name, repr(mean), repr(p95)])
    return _csv_text(rows)


def summary_csv(summary: dict) -> str:
    rows = [SUMMARY_HEADER] + [[r["ue"], repr(r["mean_bler"]), repr(r["mean_throughput_kbps"]),
                                repr(r["mean_latency_ms"])] for r in summary["ue"]]
    return _csv_text(rows)


def read_metrics_csv(path_or_text) -> list[dict]:
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else path_or_text
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != METRICS_HEADER:
        raise ValueError(f"unexpected metrics header {reader.fieldnames}")
    return [{"tti": int(r["tti"]), "ue": int(r["ue"]),
             "kpi": LinkKpi(float(r["snr_db"]), float(r["bler"]), float(r["latency_ms"]),
                            float(r["throughput_kbps"]))} for r in reader]


COMPARISON_HEADER = ["policy", "seed", "mean_bler", "mean_throughput_kbps", "mean_latency_ms"]
WINS_HEADER = ["metric", "policy", "wins"]
CURVE_HEADER = ["episode", "mean_reward"]


def comparison_csv(comp: Comparison) -> str:
    rows = [COMPARISON_HEADER] + [[r["policy"], r["seed"], repr(r["mean_bler"]), repr(r["mean_throughput_kbps"]),
                                   repr(r["mean_latency_ms"])] for r in comp.rows]
    return _csv_text(rows)


def wins_csv(comp: Comparison) -> str:
    rows = [WINS_HEADER] + [[m, p, n] for m, per in comp.wins.items() for p, n in per.items()]
    return _csv_text(rows)


def read_comparison_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != COMPARISON_HEADER:
        raise ValueError(f"unexpected comparison header {reader.fieldnames}")
    return [{"policy": r["policy"], "seed": int(r["seed"]),
             **{k: float(r[k]) for k in COMPARISON_HEADER[2:]}} for r in reader]


def curve_csv(curve) -> str:
    return _csv_text([CURVE_HEADER] + [[i, repr(float(v))] for i, v in enumerate(curve)])


def read_curve_csv(text: str) -> np.ndarray:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CURVE_HEADER:
        raise ValueError(f"unexpected curve header {reader.fieldnames}")
    return np.array([float(r["mean_reward"]) for r in reader])
