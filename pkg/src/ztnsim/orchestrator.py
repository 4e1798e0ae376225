"""Simulated service-management and network/resource-management layer.

The orchestrator is a single serialized state machine: a device registry, a
per-AP PRB pool, a service catalog and an audit log. Every mutation goes
through :meth:`Orchestrator.handle` (or the thin helpers around it), so the
order of operations is total.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .radio import Pose


class DeviceKind(enum.Enum):
    Robot = "Robot"
    RoboticArm = "RoboticArm"
    AGV = "AGV"


class QoS(enum.Enum):
    eMBB = "eMBB"
    URLLC = "URLLC"
    mMTC = "mMTC"


class Tier(enum.Enum):
    EdgeDU = "EdgeDU"
    RegionalCU_RIC = "RegionalCU_RIC"
    CloudSMO = "CloudSMO"


class OrchestrationError(Exception):
    pass


class ConflictError(OrchestrationError):
    pass


class UnknownDeviceError(OrchestrationError, KeyError):
    pass


class StaleReportError(OrchestrationError):
    pass


class NoCandidateError(OrchestrationError):
    pass


class ServiceNotFound(OrchestrationError, KeyError):
    pass


class PoolExhausted(OrchestrationError):
    def __init__(self, msg: str, retry_after_s: float):
        super().__init__(msg)
        self.retry_after_s = retry_after_s


@dataclass(frozen=True)
class DeviceStatus:
    device_id: str
    kind: DeviceKind
    position: Pose
    battery: float = 100.0
    workload: int = 0
    capabilities: frozenset = frozenset()
    learnt_models: frozenset = frozenset()
    report_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "capabilities", frozenset(self.capabilities))
        object.__setattr__(self, "learnt_models", frozenset(self.learnt_models))
        if not 0.0 <= self.battery <= 100.0:
            raise ValueError(f"battery must be in [0, 100], got {self.battery}")
        if self.workload < 0:
            raise ValueError("workload must be non-negative")


@dataclass(frozen=True)
class TaskRequest:
    task_id: str
    kind: str
    required_capability: str
    qos: QoS = QoS.eMBB
    location_hint: Pose | None = None

    def __post_init__(self):
        if not self.kind:
            raise ValueError("task kind must be non-empty")


@dataclass(frozen=True)
class ResourceGrant:
    ap: int
    prbs: int
    tier: Tier
    reserved: bool


@dataclass(frozen=True)
class Assignment:
    task_id: str
    device_id: str
    score: float
    resource_grant: ResourceGrant | None = None


@dataclass(frozen=True)
class ServiceEntry:
    service_id: str
    endpoint: str
    tier: Tier = Tier.CloudSMO
    cached: bool = False


@dataclass(frozen=True)
class ScoreWeights:
    battery: float = 1.0
    workload: float = 0.5
    distance: float = 0.3
    workload_cap: int = 10


@dataclass
class Registry:
    devices: dict[str, DeviceStatus] = field(default_factory=dict)
    assignments: dict[str, Assignment] = field(default_factory=dict)
    field_size: tuple[float, float] = (50.0, 50.0)

    @property
    def field_diag(self) -> float:
        return math.hypot(*self.field_size)


def register_device(status: DeviceStatus, registry: Registry) -> Registry:
    if status.device_id in registry.devices:
        raise ConflictError(f"device {status.device_id!r} already registered")
    registry.devices[status.device_id] = status
    return registry


def report_status(device_id: str, status: DeviceStatus, registry: Registry) -> Registry:
    prev = registry.devices.get(device_id)
    if prev is None:
        raise UnknownDeviceError(device_id)
    if status.device_id != device_id:
        raise ValueError("status device_id does not match")
    if status.report_time < prev.report_time:
        raise StaleReportError(f"report at t={status.report_time} older than t={prev.report_time}")
    registry.devices[device_id] = status
    return registry


def device_score(dev: DeviceStatus, task: TaskRequest, field_diag: float,
                 weights: ScoreWeights = ScoreWeights()) -> float:
    s = weights.battery * dev.battery / 100.0
    s -= weights.workload * min(dev.workload, weights.workload_cap) / weights.workload_cap
    if task.location_hint is not None:
        d = math.hypot(dev.position.x - task.location_hint.x, dev.position.y - task.location_hint.y)
        s -= weights.distance * d / field_diag
    return s


def choose_device(task: TaskRequest, registry: Registry,
                  weights: ScoreWeights = ScoreWeights()) -> tuple[str, float]:
    """Best capable device and its score; ties go to the lowest device id."""
    if not registry.devices:
        raise NoCandidateError("registry is empty")
    best = None
    for dev_id in sorted(registry.devices):
        dev = registry.devices[dev_id]
        if task.required_capability not in dev.capabilities:
            continue
        score = device_score(dev, task, registry.field_diag, weights)
        if best is None or score > best[1]:
            best = (dev_id, score)
    if best is None:
        raise NoCandidateError(f"no device offers {task.required_capability!r}")
    return best


def assign_task(task: TaskRequest, registry: Registry, weights: ScoreWeights = ScoreWeights(),
                grant: ResourceGrant | None = None) -> Assignment:
    if task.task_id in registry.assignments:
        raise ConflictError(f"task {task.task_id!r} already assigned")
    dev_id, score = choose_device(task, registry, weights)
    dev = registry.devices[dev_id]
    registry.devices[dev_id] = replace(dev, workload=dev.workload + 1)
    a = Assignment(task.task_id, dev_id, score, grant)
    registry.assignments[task.task_id] = a
    return a


# ---------------------------------------------------------------- resources

@dataclass
class ApPool:
    reserved_capacity: int
    best_effort_capacity: int
    reserved_free: int = -1
    best_effort_free: int = -1

    def __post_init__(self):
        if self.reserved_capacity < 0 or self.best_effort_capacity < 0:
            raise ValueError("pool capacities must be non-negative")
        if self.reserved_free < 0:
            self.reserved_free = self.reserved_capacity
        if self.best_effort_free < 0:
            self.best_effort_free = self.best_effort_capacity

    @property
    def granted(self) -> int:
        return (self.reserved_capacity - self.reserved_free) + (self.best_effort_capacity - self.best_effort_free)

    @property
    def capacity(self) -> int:
        return self.reserved_capacity + self.best_effort_capacity


@dataclass(frozen=True)
class GrantPolicy:
    urllc_prbs: int = 1
    embb_prbs: int = 2
    mmtc_prbs: int = 1
    retry_after_s: float = 1.0


@dataclass
class ResourcePool:
    aps: list[ApPool]
    policy: GrantPolicy = field(default_factory=GrantPolicy)

    @classmethod
    def uniform(cls, n_ap: int, reserved: int, best_effort: int, policy: GrantPolicy | None = None):
        return cls([ApPool(reserved, best_effort) for _ in range(n_ap)], policy or GrantPolicy())


def allocate_resources(qos: QoS, pool: ResourcePool, ap: int = 0) -> ResourceGrant:
    """Take PRBs for a task of class ``qos`` from AP ``ap``.

    URLLC draws on the reserved share and is pinned to the DU control loop,
    eMBB takes best-effort PRBs under the near-RT RIC, mMTC gets the minimal
    best-effort share.
    """
    p = pool.aps[ap]
    pol = pool.policy
    if qos is QoS.URLLC:
        n, reserved, tier = pol.urllc_prbs, True, Tier.EdgeDU
    elif qos is QoS.eMBB:
        n, reserved, tier = pol.embb_prbs, False, Tier.RegionalCU_RIC
    else:
        n, reserved, tier = pol.mmtc_prbs, False, Tier.CloudSMO
    free = p.reserved_free if reserved else p.best_effort_free
    if free < n:
        kind = "reserved" if reserved else "best-effort"
        raise PoolExhausted(f"AP {ap}: {n} {kind} PRBs requested, {free} free", pol.retry_after_s)
    if reserved:
        p.reserved_free -= n
    else:
        p.best_effort_free -= n
    return ResourceGrant(ap, n, tier, reserved)


def release_resources(grant: ResourceGrant, pool: ResourcePool) -> None:
    p = pool.aps[grant.ap]
    if grant.reserved:
        if p.reserved_free + grant.prbs > p.reserved_capacity:
            raise OrchestrationError("release exceeds reserved capacity")
        p.reserved_free += grant.prbs
    else:
        if p.best_effort_free + grant.prbs > p.best_effort_capacity:
            raise OrchestrationError("release exceeds best-effort capacity")
        p.best_effort_free += grant.prbs


# ------------------------------------------------------------------ services

@dataclass
class ServiceCatalog:
    entries: dict[str, ServiceEntry] = field(default_factory=dict)
    discoveries: dict[str, int] = field(default_factory=dict)


def deploy_service(entry: ServiceEntry, catalog: ServiceCatalog) -> ServiceCatalog:
    if entry.service_id in catalog.entries:
        raise ConflictError(f"service {entry.service_id!r} already deployed")
    catalog.entries[entry.service_id] = entry
    return catalog


def discover_service(service_id: str, catalog: ServiceCatalog) -> ServiceEntry:
    entry = catalog.entries.get(service_id)
    if entry is None:
        raise ServiceNotFound(service_id)
    n = catalog.discoveries.get(service_id, 0) + 1
    catalog.discoveries[service_id] = n
    if n >= 2 and not entry.cached:
        entry = replace(entry, cached=True)
        catalog.entries[service_id] = entry
    return entry


# ------------------------------------------------------------------ messages

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RegisterDevice:
    time: float
    status: DeviceStatus
    version: int = SCHEMA_VERSION


@dataclass(frozen=True)
class StatusReport:
    time: float
    status: DeviceStatus
    version: int = SCHEMA_VERSION


@dataclass(frozen=True)
class SubmitTask:
    time: float
    task: TaskRequest
    ap: int = 0
    version: int = SCHEMA_VERSION


@dataclass(frozen=True)
class ReleaseTask:
    time: float
    task_id: str
    version: int = SCHEMA_VERSION


@dataclass(frozen=True)
class Event:
    time: float
    event: str
    device_id: str = ""
    task_id: str = ""
    detail: str = ""


class Orchestrator:
    """Message handlers on the SMO tier; every call is one step of a total order."""

    def __init__(self, n_ap: int = 1, reserved_prbs: int = 10, best_effort_prbs: int = 40,
                 field_size=(50.0, 50.0), weights: ScoreWeights = ScoreWeights(),
                 grant_policy: GrantPolicy | None = None):
        self.registry = Registry(field_size=tuple(field_size))
        self.pool = ResourcePool.uniform(n_ap, reserved_prbs, best_effort_prbs, grant_policy)
        self.catalog = ServiceCatalog()
        self.weights = weights
        self.log: list[Event] = []

    def handle(self, msg):
        if getattr(msg, "version", None) != SCHEMA_VERSION:
            raise OrchestrationError(f"unsupported message version {getattr(msg, 'version', None)}")
        if isinstance(msg, RegisterDevice):
            register_device(msg.status, self.registry)
            self.record(msg.time, "register", msg.status.device_id, "", msg.status.kind.value)
            return msg.status
        if isinstance(msg, StatusReport):
            dev_id = msg.status.device_id
            try:
                report_status(dev_id, msg.status, self.registry)
            except StaleReportError as exc:
                self.record(msg.time, "stale-report", dev_id, "", str(exc))
                raise
            self.record(msg.time, "report", dev_id, "", f"battery={msg.status.battery!r}")
            return msg.status
        if isinstance(msg, SubmitTask):
            return self._submit(msg)
        if isinstance(msg, ReleaseTask):
            return self._release(msg)
        raise OrchestrationError(f"unknown message {type(msg).__name__}")

    def _submit(self, msg: SubmitTask) -> Assignment:
        task = msg.task
        try:
            dev_id, _ = choose_device(task, self.registry, self.weights)
        except NoCandidateError as exc:
            self.record(msg.time, "no-candidate", "", task.task_id, str(exc))
            raise
        try:
            grant = allocate_resources(task.qos, self.pool, msg.ap)
        except PoolExhausted as exc:
            self.record(msg.time, "rejected", dev_id, task.task_id, f"{exc}; retry_after_s={exc.retry_after_s!r}")
            raise
        a = assign_task(task, self.registry, self.weights, grant)
        self.record(msg.time, "assign", a.device_id, task.task_id,
                  f"score={a.score:.6f} prbs={grant.prbs} tier={grant.tier.value}")
        return a

    def _release(self, msg: ReleaseTask) -> Assignment:
        a = self.registry.assignments.pop(msg.task_id, None)
        if a is None:
            raise OrchestrationError(f"unknown task {msg.task_id!r}")
        dev = self.registry.devices[a.device_id]
        self.registry.devices[a.device_id] = replace(dev, workload=dev.workload - 1)
        if a.resource_grant is not None:
            release_resources(a.resource_grant, self.pool)
        self.record(msg.time, "release", a.device_id, msg.task_id, "")
        return a

    def record(self, t, event, device_id, task_id, detail):
        self.log.append(Event(float(t), event, device_id, task_id, detail))

    def write_log(self, path_or_buf) -> None:
        rows = [["time", "event", "device_id", "task_id", "detail"]]
        rows += [[repr(e.time), e.event, e.device_id, e.task_id, e.detail] for e in self.log]
        if isinstance(path_or_buf, (str, Path)):
            with open(path_or_buf, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerows(rows)
        else:
            csv.writer(path_or_buf, lineterminator="\n").writerows(rows)


def read_event_log(path) -> list[Event]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [Event(float(r["time"]), r["event"], r["device_id"], r["task_id"], r["detail"]) for r in reader]


TASK_SCRIPT_HEADER = ["time_s", "op", "task_id", "kind", "required_capability", "qos", "hint_x", "hint_y"]


def read_task_script(path) -> list:
    """Task script rows -> ``SubmitTask`` / ``ReleaseTask`` messages, in file order."""
    msgs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TASK_SCRIPT_HEADER:
            raise ValueError(f"{path}: expected header {','.join(TASK_SCRIPT_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(TASK_SCRIPT_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(TASK_SCRIPT_HEADER)} fields")
            t, op, task_id, kind, cap, qos, hx, hy = (c.strip() for c in row)
            try:
                if op == "submit":
                    hint = Pose(float(hx), float(hy)) if hx and hy else None
                    msgs.append(SubmitTask(float(t), TaskRequest(task_id, kind, cap, QoS(qos), hint)))
                elif op == "release":
                    msgs.append(ReleaseTask(float(t), task_id))
                else:
                    raise ValueError(f"unknown op {op!r}")
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return msgs
