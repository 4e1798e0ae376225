"""Traffic steering: synthetic flows, flow features, service classification and
per-TTI PRB scheduling with reservation for latency-sensitive classes."""

from __future__ import annotations

import bisect
import csv
import enum
import io
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_feature_array


class ServiceClass(enum.IntEnum):
    VoiceVideoConf = 0
    InteractiveData = 1
    Streaming = 2
    BulkTransfer = 3

    @classmethod
    def parse(cls, value) -> "ServiceClass":
        if isinstance(value, cls):
            return value
        s = str(value).strip()
        if s.isdigit():
            return cls(int(s))
        for c in cls:
            if c.name.lower() == s.lower():
                return c
        raise ValueError(f"unknown service class {value!r}")


DEFAULT_TARGETS = frozenset({ServiceClass.VoiceVideoConf, ServiceClass.InteractiveData})


class Protocol(enum.Enum):
    TCP = "TCP"
    UDP = "UDP"


@dataclass(frozen=True)
class PacketEvent:
    arrival_time: float
    flow_id: str
    size_bytes: int
    protocol: Protocol
    dl_buffer_bytes: int = 0

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise ValueError(f"size_bytes must be positive, got {self.size_bytes}")
        if self.dl_buffer_bytes < 0:
            raise ValueError("dl_buffer_bytes must be non-negative")
        if not (math.isfinite(self.arrival_time) and self.arrival_time >= 0):
            raise ValueError(f"bad arrival_time {self.arrival_time}")


# --------------------------------------------------------------- generation

@dataclass(frozen=True)
class TrafficProfile:
    protocol: Protocol
    size_bytes: int
    period_s: float | None = None      # periodic arrivals
    rate_per_s: float | None = None    # Poisson arrivals
    burst: int = 1                     # packets per period, back to back
    burst_spacing_s: float = 1e-4
    buffer_range: tuple[int, int] = (0, 0)


PROFILES = {
    ServiceClass.VoiceVideoConf: TrafficProfile(Protocol.UDP, 200, period_s=0.02, buffer_range=(0, 400)),
    ServiceClass.InteractiveData: TrafficProfile(Protocol.TCP, 100, rate_per_s=20.0, buffer_range=(0, 300)),
    ServiceClass.Streaming: TrafficProfile(Protocol.TCP, 1200, period_s=1.0, burst=10),
    ServiceClass.BulkTransfer: TrafficProfile(Protocol.TCP, 1500, period_s=1.0 / 500, buffer_range=(32_000, 64_000)),
}


def generate_flows(cls: ServiceClass, duration: float, rng: np.random.Generator,
                   flow_id: str | None = None, start: float = 0.0) -> list[PacketEvent]:
    """Packet arrivals of one flow of ``cls`` over ``[start, start + duration)``."""
    prof = PROFILES[ServiceClass(cls)]
    flow_id = flow_id or f"{ServiceClass(cls).name}-0"
    if duration <= 0:
        return []
    end = start + duration
    if prof.rate_per_s is not None:
        mean = prof.rate_per_s * duration
        n = int(mean + 5.0 * math.sqrt(mean) + 10)
        times = start + np.cumsum(rng.exponential(1.0 / prof.rate_per_s, size=n))
        while times[-1] < end:
            more = times[-1] + np.cumsum(rng.exponential(1.0 / prof.rate_per_s, size=n))
            times = np.concatenate([times, more])
        times = times[times < end]
        burst_idx = np.zeros(times.size, dtype=int)
    else:
        phase = rng.uniform(0.0, prof.period_s)
        starts = start + phase + prof.period_s * np.arange(int(math.ceil(duration / prof.period_s)) + 1)
        offs = prof.burst_spacing_s * np.arange(prof.burst)
        times = (starts[:, None] + offs[None, :]).ravel()
        burst_idx = np.tile(np.arange(prof.burst), starts.size)
        keep = times < end
        times, burst_idx = times[keep], burst_idx[keep]
    if prof.burst > 1:
        # bytes still waiting in the current burst, including this packet
        buffers = prof.size_bytes * (prof.burst - burst_idx)
    else:
        lo, hi = prof.buffer_range
        buffers = rng.integers(lo, hi + 1, size=times.size)
    return [PacketEvent(float(t), flow_id, prof.size_bytes, prof.protocol, int(b))
            for t, b in zip(times, buffers)]


DEFAULT_MIX = {
    ServiceClass.VoiceVideoConf: 3,
    ServiceClass.InteractiveData: 3,
    ServiceClass.Streaming: 2,
    ServiceClass.BulkTransfer: 5,
}


def generate_mixed_trace(duration: float, rng: np.random.Generator,
                         mix: dict | None = None) -> tuple[list[PacketEvent], dict[str, ServiceClass]]:
    """Several flows per class merged by arrival time, with the ground-truth labels."""
    mix = DEFAULT_MIX if mix is None else mix
    packets: list[PacketEvent] = []
    labels: dict[str, ServiceClass] = {}
    for cls in sorted(mix, key=int):
        for i in range(mix[cls]):
            fid = f"{ServiceClass(cls).name}-{i}"
            labels[fid] = ServiceClass(cls)
            packets.extend(generate_flows(cls, duration, rng, fid))
    packets.sort(key=lambda p: p.arrival_time)
    return packets, labels


# ----------------------------------------------------------------- features

FEATURE_NAMES = ("mean_iat", "cv_iat", "mean_size", "mean_buffer", "proto_udp")


@dataclass(frozen=True)
class FlowFeatures:
    mean_iat: float
    cv_iat: float
    mean_size: float
    mean_buffer: float
    proto_udp: int

    def as_array(self) -> np.ndarray:
        return np.array([self.mean_iat, self.cv_iat, self.mean_size, self.mean_buffer, self.proto_udp], dtype=float)


class InsufficientDataError(ValueError):
    pass


def extract_features(window: Sequence[PacketEvent]) -> FlowFeatures:
    if len(window) < 2:
        raise InsufficientDataError(f"need at least 2 packets, got {len(window)}")
    times = np.array([p.arrival_time for p in window])
    iat = np.diff(times)
    mean_iat = float(iat.mean())
    cv = float(iat.std() / mean_iat) if mean_iat > 0 else 0.0
    udp = sum(p.protocol is Protocol.UDP for p in window) * 2 > len(window)
    return FlowFeatures(
        mean_iat=mean_iat,
        cv_iat=cv,
        mean_size=float(np.mean([p.size_bytes for p in window])),
        mean_buffer=float(np.mean([p.dl_buffer_bytes for p in window])),
        proto_udp=int(udp),
    )


class FlowFeatureExtractor(TransformerMixin, BaseEstimator):
    """Maps packet windows to rows of :data:`FEATURE_NAMES`."""

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        return np.vstack([extract_features(w).as_array() for w in X]) if len(X) else np.empty((0, 5))


def windows_by_flow(packets: Iterable[PacketEvent], window_s: float = 1.0):
    """Yield ``(flow_id, window_index, packets)`` for consecutive fixed windows."""
    groups: dict[tuple[str, int], list[PacketEvent]] = {}
    for p in packets:
        groups.setdefault((p.flow_id, int(p.arrival_time // window_s)), []).append(p)
    for (fid, w), pkts in sorted(groups.items()):
        yield fid, w, pkts


# ------------------------------------------------------------- classifier

class MissingClassError(ValueError):
    pass


class NearestCentroidClassifier(ClassifierMixin, BaseEstimator):
    """Nearest centroid on z-scored flow features.

    The global mean/std are stored with the model; ties go to the lowest class id.
    """

    def fit(self, X, y):
        X = check_feature_array(X, len(FEATURE_NAMES))
        y = np.asarray([int(ServiceClass.parse(v)) for v in y])
        missing = [c.name for c in ServiceClass if not np.any(y == c)]
        if missing:
            raise MissingClassError(f"no training samples for: {', '.join(missing)}")
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        Z = (X - self.mean_) / self.scale_
        self.classes_ = np.array([int(c) for c in ServiceClass])
        self.centroids_ = np.vstack([Z[y == c].mean(axis=0) for c in self.classes_])
        return self

    def _distances(self, X) -> np.ndarray:
        check_is_fitted(self, "centroids_")
        X = check_feature_array(X, len(FEATURE_NAMES))
        Z = (X - self.mean_) / self.scale_
        return ((Z[:, None, :] - self.centroids_[None, :, :]) ** 2).sum(axis=2)

    def predict(self, X) -> np.ndarray:
        d = self._distances(X)
        return self.classes_[np.argmin(d, axis=1)]

    def dumps(self) -> str:
        check_is_fitted(self, "centroids_")
        lines = ["# ztnsim centroid classifier v1"]
        for i, name in enumerate(FEATURE_NAMES):
            lines.append(f"mean.{name} = {float(self.mean_[i])!r}")
            lines.append(f"std.{name} = {float(self.scale_[i])!r}")
        for c, row in zip(self.classes_, self.centroids_):
            for i, name in enumerate(FEATURE_NAMES):
                lines.append(f"centroid.{ServiceClass(c).name}.{name} = {float(row[i])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "NearestCentroidClassifier":
        kv = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            k, v = line.split("=", 1)
            kv[k.strip()] = float(v)
        model = cls()
        model.mean_ = np.array([kv[f"mean.{n}"] for n in FEATURE_NAMES])
        model.scale_ = np.array([kv[f"std.{n}"] for n in FEATURE_NAMES])
        model.classes_ = np.array([int(c) for c in ServiceClass])
        model.centroids_ = np.array([[kv[f"centroid.{c.name}.{n}"] for n in FEATURE_NAMES] for c in ServiceClass])
        return model


def fit_classifier(labeled: Sequence[tuple[FlowFeatures, ServiceClass]]) -> NearestCentroidClassifier:
    X = np.vstack([f.as_array() for f, _ in labeled]) if labeled else np.empty((0, 5))
    if not len(X):
        raise MissingClassError("no training samples")
    return NearestCentroidClassifier().fit(X, [c for _, c in labeled])


def classify(f: FlowFeatures, c: NearestCentroidClassifier) -> ServiceClass:
    return ServiceClass(int(c.predict(f.as_array()[None, :])[0]))


def synthetic_training_set(n_per_class: int, rng: np.random.Generator, window_s: float = 1.0):
    """One ``window_s`` window per synthetic flow, ``n_per_class`` flows per class."""
    out = []
    for cls in ServiceClass:
        for i in range(n_per_class):
            pkts = generate_flows(cls, window_s, rng, f"{cls.name}-{i}")
            if len(pkts) >= 2:
                out.append((extract_features(pkts), cls))
    return out


def label_packets(packets: Sequence[PacketEvent], model: NearestCentroidClassifier,
                  window_s: float = 1.0, default: ServiceClass = ServiceClass.BulkTransfer):
    """Predicted class per packet, re-classified once per window per flow.

    Packets in window w use the label computed from window w-1 of their flow;
    the first window of a flow is labeled from itself. Flows with too few
    packets in a window keep their previous label.
    """
    per_window: dict[str, dict[int, ServiceClass]] = {}
    for fid, w, pkts in windows_by_flow(packets, window_s):
        if len(pkts) >= 2:
            per_window.setdefault(fid, {})[w] = classify(extract_features(pkts), model)
    current: dict[tuple[str, int], ServiceClass] = {}
    labels = []
    for p in packets:
        w = int(p.arrival_time // window_s)
        key = (p.flow_id, w)
        if key not in current:
            hist = per_window.get(p.flow_id, {})
            prev = [k for k in hist if k < w]
            if prev:
                current[key] = hist[max(prev)]
            else:
                current[key] = hist.get(w, default)
        labels.append(current[key])
    return labels


# ---------------------------------------------------------------- queueing

@dataclass(frozen=True)
class SchedulerConfig:
    total_prbs: int = 3
    reserved_prbs: int = 2
    target_classes: frozenset = DEFAULT_TARGETS
    work_conserving: bool = True

    def __post_init__(self):
        object.__setattr__(self, "target_classes",
                           frozenset(ServiceClass.parse(c) for c in self.target_classes))
        if self.total_prbs < 0:
            raise ValueError("total_prbs must be non-negative")
        if not 0 <= self.reserved_prbs <= self.total_prbs:
            raise ValueError(f"reserved_prbs must be in [0, total_prbs={self.total_prbs}], "
                             f"got {self.reserved_prbs}")

    def fifo(self) -> "SchedulerConfig":
        """Same PRBs, no steering: one global oldest-first queue."""
        return SchedulerConfig(self.total_prbs, 0, frozenset(), True)


@dataclass(frozen=True, order=True)
class QueuedPacket:
    arrival_time: float
    seq: int
    packet_id: int = field(compare=False)
    flow_id: str = field(compare=False, default="")


class ClassQueues:
    """Per-class FIFO queues ordered by arrival time (stable on ties)."""

    def __init__(self):
        self.queues: dict[ServiceClass, deque[QueuedPacket]] = {c: deque() for c in ServiceClass}
        self._seq = 0

    def __len__(self):
        return sum(len(q) for q in self.queues.values())

    def enqueue(self, packet_id: int, arrival_time: float, cls: ServiceClass, flow_id: str = "") -> None:
        item = QueuedPacket(arrival_time, self._seq, packet_id, flow_id)
        self._seq += 1
        q = self.queues[ServiceClass(cls)]
        if not q or q[-1] <= item:
            q.append(item)
        else:
            q.insert(bisect.bisect_right(list(q), item), item)

    def dequeue(self, cls: ServiceClass) -> QueuedPacket | None:
        q = self.queues[ServiceClass(cls)]
        return q.popleft() if q else None

    def peek(self, cls: ServiceClass) -> QueuedPacket | None:
        q = self.queues[ServiceClass(cls)]
        return q[0] if q else None

    def snapshot(self) -> dict[str, list]:
        return {c.name: [[p.arrival_time, p.seq, p.packet_id, p.flow_id] for p in q]
                for c, q in self.queues.items()}

    @classmethod
    def restore(cls, data: dict, seq: int) -> "ClassQueues":
        out = cls()
        for name, items in data.items():
            out.queues[ServiceClass[name]] = deque(QueuedPacket(a, s, int(p), f) for a, s, p, f in items)
        out._seq = seq
        return out


def enqueue(packet_id: int, packet: PacketEvent, cls: ServiceClass, queues: ClassQueues) -> ClassQueues:
    queues.enqueue(packet_id, packet.arrival_time, cls, packet.flow_id)
    return queues


@dataclass(frozen=True)
class PrbGrant:
    tti: int
    prb: int
    flow_id: str
    service_class: ServiceClass
    arrival_time: float
    packet_id: int


def _pop_oldest(queues: ClassQueues, classes) -> tuple[ServiceClass, QueuedPacket] | None:
    best = None
    for c in classes:
        head = queues.peek(c)
        if head is not None and (best is None or head < best[1]):
            best = (c, head)
    if best is not None:
        queues.dequeue(best[0])
    return best


def schedule_tti(queues: ClassQueues, cfg: SchedulerConfig, tti: int) -> list[PrbGrant]:
    """Grant PRBs for one TTI; granted packets are removed from ``queues``.

    Reserved PRBs go to target-class packets first (oldest first across target
    queues). The rest go to everything left, oldest first. In work-conserving
    mode the reserved PRBs fall through to other classes only when no target
    packet is waiting at the start of the TTI; otherwise unused reserved PRBs
    stay idle, so waiting target traffic always keeps its reservation.
    """
    grants: list[PrbGrant] = []
    targets = sorted(cfg.target_classes, key=int)
    everyone = list(ServiceClass)
    targets_waiting = any(queues.peek(c) is not None for c in targets)

    def grant(item):
        c, p = item
        grants.append(PrbGrant(tti, len(grants), p.flow_id, c, p.arrival_time, p.packet_id))

    for _ in range(cfg.reserved_prbs):
        item = _pop_oldest(queues, targets)
        if item is None:
            break
        grant(item)
    budget = cfg.total_prbs - len(grants)
    if targets_waiting or not cfg.work_conserving:
        budget = min(budget, cfg.total_prbs - cfg.reserved_prbs)
    for _ in range(budget):
        item = _pop_oldest(queues, everyone)
        if item is None:
            break
        grant(item)
    return grants


def simulate_steering(packets: Sequence[PacketEvent], classes: Sequence[ServiceClass],
                      cfg: SchedulerConfig, tti_s: float = 1e-3, max_ttis: int | None = None,
                      drain: bool = True) -> list[PrbGrant]:
    """Run the TTI loop over a whole trace; packets are eligible from the TTI that
    starts at or after their arrival."""
    order = sorted(range(len(packets)), key=lambda i: (packets[i].arrival_time, i))
    queues = ClassQueues()
    grants: list[PrbGrant] = []
    if not packets:
        return grants
    last_arrival_tti = int(math.ceil(packets[order[-1]].arrival_time / tti_s - 1e-9))
    horizon = max_ttis if max_ttis is not None else None
    k = 0
    tti = 0
    while True:
        if horizon is not None and tti >= horizon:
            break
        start = tti * tti_s
        while k < len(order) and packets[order[k]].arrival_time <= start + 1e-12:
            i = order[k]
            queues.enqueue(i, packets[i].arrival_time, classes[i], packets[i].flow_id)
            k += 1
        grants.extend(schedule_tti(queues, cfg, tti))
        tti += 1
        if horizon is None and tti > last_arrival_tti and (not drain or not len(queues)):
            break
        if horizon is None and cfg.total_prbs == 0:
            break
    return grants


# -------------------------------------------------------------- reporting

class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class ClassLatency:
    mean_s: float
    p95_s: float
    count: int


@dataclass
class LatencyReport:
    stats: dict[ServiceClass, ClassLatency]
    backlog: dict[ServiceClass, int]

    def mean_ms(self, cls: ServiceClass) -> float:
        s = self.stats.get(cls)
        return float("nan") if s is None else 1e3 * s.mean_s


def latency_report(grants: Sequence[PrbGrant], packets: Sequence[PacketEvent],
                   classes: Sequence[ServiceClass] | None = None, tti_s: float = 1e-3) -> LatencyReport:
    """Per-class latency (grant TTI end minus arrival) and ungranted backlog.

    Packets are attributed to ``classes[i]`` when given, else to the class on
    the grant.
    """
    per_class: dict[ServiceClass, list[float]] = {}
    granted = set()
    for g in grants:
        if not 0 <= g.packet_id < len(packets):
            raise IntegrityError(f"grant references unknown packet {g.packet_id}")
        if g.packet_id in granted:
            raise IntegrityError(f"packet {g.packet_id} granted twice")
        granted.add(g.packet_id)
        pkt = packets[g.packet_id]
        if pkt.flow_id != g.flow_id:
            raise IntegrityError(f"grant flow {g.flow_id} does not match packet {g.packet_id}")
        cls = classes[g.packet_id] if classes is not None else g.service_class
        per_class.setdefault(ServiceClass(cls), []).append((g.tti + 1) * tti_s - pkt.arrival_time)
    stats = {}
    for cls, lat in sorted(per_class.items()):
        arr = np.asarray(lat)
        stats[cls] = ClassLatency(float(arr.mean()), float(np.percentile(arr, 95)), arr.size)
    backlog = {c: 0 for c in ServiceClass}
    for i, p in enumerate(packets):
        if i not in granted:
            cls = classes[i] if classes is not None else ServiceClass.BulkTransfer
            backlog[ServiceClass(cls)] += 1
    return LatencyReport(stats, backlog)


def write_latency_csv(report: LatencyReport, path_or_buf) -> None:
    rows = [["class", "mean_ms", "p95_ms", "backlog"]]
    for c in ServiceClass:
        s = report.stats.get(c)
        mean = "" if s is None else repr(1e3 * s.mean_s)
        p95 = "" if s is None else repr(1e3 * s.p95_s)
        rows.append([c.name, mean, p95, report.backlog.get(c, 0)])
    _write_rows(rows, path_or_buf)


def _write_rows(rows, path_or_buf):
    if isinstance(path_or_buf, (str, Path)):
        with open(path_or_buf, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
    else:
        csv.writer(path_or_buf, lineterminator="\n").writerows(rows)


STEERING_HEADER = ["class", "mode", "before_mean_ms", "after_mean_ms", "ratio", "before_p95_ms", "after_p95_ms"]
RESERVATION_MODES = ("work_conserving", "strict")


@dataclass(frozen=True)
class SteeringRow:
    service_class: ServiceClass
    mode: str
    before_mean_ms: float
    after_mean_ms: float
    before_p95_ms: float
    after_p95_ms: float

    @property
    def ratio(self) -> float:
        """after / before mean latency; below 1 means steering helped the class."""
        if not self.before_mean_ms > 0:
            return float("nan")
        return self.after_mean_ms / self.before_mean_ms


def compare_steering(packets: Sequence[PacketEvent], classes: Sequence[ServiceClass], cfg: SchedulerConfig,
                     tti_s: float = 1e-3, report_classes: Sequence[ServiceClass] | None = None) -> list[SteeringRow]:
    """FIFO baseline versus steering, in both reservation modes.

    ``classes`` drive the scheduler; latency is grouped by ``report_classes``
    (ground truth when known), falling back to ``classes``.
    """
    report_classes = classes if report_classes is None else report_classes
    before = latency_report(simulate_steering(packets, classes, cfg.fifo(), tti_s), packets, report_classes, tti_s)
    rows = []
    for mode in RESERVATION_MODES:
        mcfg = replace(cfg, work_conserving=(mode == "work_conserving"))
        after = latency_report(simulate_steering(packets, classes, mcfg, tti_s), packets, report_classes, tti_s)
        for c in ServiceClass:
            b, a = before.stats.get(c), after.stats.get(c)
            nan = float("nan")
            rows.append(SteeringRow(c, mode,
                                    nan if b is None else 1e3 * b.mean_s, nan if a is None else 1e3 * a.mean_s,
                                    nan if b is None else 1e3 * b.p95_s, nan if a is None else 1e3 * a.p95_s))
    return rows


def write_steering_csv(rows: Sequence[SteeringRow], path_or_buf) -> None:
    out = [STEERING_HEADER]
    for r in rows:
        out.append([r.service_class.name, r.mode, repr(r.before_mean_ms), repr(r.after_mean_ms), repr(r.ratio),
                    repr(r.before_p95_ms), repr(r.after_p95_ms)])
    _write_rows(out, path_or_buf)


def read_steering_csv(file) -> list[SteeringRow]:
    if isinstance(file, (str, Path)):
        with open(file, newline="") as fh:
            return read_steering_csv(fh)
    reader = csv.DictReader(file)
    if reader.fieldnames != STEERING_HEADER:
        raise ValueError(f"expected header {','.join(STEERING_HEADER)}, got {reader.fieldnames}")
    return [SteeringRow(ServiceClass.parse(r["class"]), r["mode"], float(r["before_mean_ms"]),
                        float(r["after_mean_ms"]), float(r["before_p95_ms"]), float(r["after_p95_ms"]))
            for r in reader]


# ------------------------------------------------------------------ traces

TRACE_HEADER = ["time_s", "flow_id", "protocol", "size_bytes", "dl_buffer_bytes"]


class TraceParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def ingest_trace(file) -> list[PacketEvent]:
    """Parse a trace CSV (path or text stream) into packets sorted by time."""
    if isinstance(file, (str, Path)):
        with open(file, newline="") as fh:
            return ingest_trace(fh)
    reader = csv.reader(file)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != TRACE_HEADER:
        raise TraceParseError(1, f"expected header {','.join(TRACE_HEADER)}, got {header}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(TRACE_HEADER):
            raise TraceParseError(lineno, f"expected {len(TRACE_HEADER)} fields, got {len(row)}")
        try:
            t = float(row[0])
            size = int(row[3])
            buf = int(row[4])
            proto = Protocol(row[2].strip().upper())
        except ValueError as exc:
            raise TraceParseError(lineno, str(exc)) from None
        if not math.isfinite(t) or t < 0:
            raise TraceParseError(lineno, f"negative or non-finite timestamp {row[0]}")
        if size <= 0:
            raise TraceParseError(lineno, f"size_bytes must be positive, got {size}")
        if buf < 0:
            raise TraceParseError(lineno, f"dl_buffer_bytes must be non-negative, got {buf}")
        out.append(PacketEvent(t, row[1].strip(), size, proto, buf))
    out.sort(key=lambda p: p.arrival_time)
    return out


def write_trace(packets: Sequence[PacketEvent], path_or_buf) -> None:
    rows = [TRACE_HEADER] + [[repr(p.arrival_time), p.flow_id, p.protocol.value, p.size_bytes, p.dl_buffer_bytes]
                             for p in packets]
    _write_rows(rows, path_or_buf)


def trace_to_text(packets: Sequence[PacketEvent]) -> str:
    buf = io.StringIO()
    write_trace(packets, buf)
    return buf.getvalue()
