import json
import logging
import math
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Deque, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from core.allocator import MAX_ORDER_LIMIT, PageAllocator
from core.baselines import siloz_pt_loss
from core.dram import MIB, DramGeometry
from core.errors import ConfigError, OutOfMemoryError, OwnershipError, TraceError
from core.metrics import MetricsSnapshot, snapshot
from core.verifier import DEFAULT_BLAST_RADIUS, ViolationReport, verify_state

logger = logging.getLogger(__name__)

ACTIONS = ("spawn", "alloc", "free", "exit")
TRACE_FIELDS = ("t", "dom", "act", "order", "n")
PT_PREFIX = "pt/"

# footprint ranges in MiB
APP_CLASSES: Dict[str, Tuple[int, int]] = {
    "spec-s": (1, 250),
    "spec-m": (250, 750),
    "spec-l": (750, 1200),
    "gap-road": (1100, 1100),
    "gap-kron": (8192, 8192),
}


@dataclass(frozen=True)
class TraceEvent:
    t: int
    dom: str
    act: str
    order: int = 0
    n: int = 1

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in TRACE_FIELDS})


@dataclass(frozen=True)
class MixSpec:
    apps: Dict[str, int] = field(default_factory=dict)
    classes: Dict[str, Tuple[int, int]] = field(default_factory=lambda: dict(APP_CLASSES))
    background: int = 0
    background_mean_mib: float = 4.9
    page_tables: bool = False
    duration: int = 1_000_000
    restart: bool = True
    churn_cycles: int = 3
    churn_min: float = 0.01
    churn_max: float = 0.10
    ramp_step_pages: int = 256
    safety_factor: float = 1.0
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Mapping, prefix: str = "workload.spec") -> "MixSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{prefix}.{unknown[0]}", "unknown mix field")
        values = dict(data)
        if "classes" in values:
            merged = dict(APP_CLASSES)
            for name, bounds in values["classes"].items():
                if not isinstance(bounds, (list, tuple)) or len(bounds) != 2:
                    raise ConfigError(f"{prefix}.classes.{name}", "expected [min_mib, max_mib]")
                merged[name] = (int(bounds[0]), int(bounds[1]))
            values["classes"] = merged
        try:
            spec = cls(**values)
        except TypeError as e:
            raise ConfigError(prefix, str(e)) from e
        return spec.validate(prefix)

    def validate(self, prefix: str = "workload.spec") -> "MixSpec":
        for name, count in self.apps.items():
            if name not in self.classes:
                raise ConfigError(f"{prefix}.apps.{name}", "unknown app class")
            if not isinstance(count, int) or count < 0:
                raise ConfigError(f"{prefix}.apps.{name}", "count must be a non-negative integer")
        for name, (lo, hi) in self.classes.items():
            if not 0 < lo <= hi:
                raise ConfigError(f"{prefix}.classes.{name}", "footprints must satisfy 0 < min <= max")
        checks = (
            ("background", self.background >= 0),
            ("background_mean_mib", self.background_mean_mib > 0),
            ("duration", self.duration > 0),
            ("churn_cycles", self.churn_cycles >= 0),
            ("churn_min", 0 <= self.churn_min <= self.churn_max <= 1),
            ("ramp_step_pages", self.ramp_step_pages > 0),
            ("safety_factor", self.safety_factor > 0),
        )
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"{prefix}.{name}", "value out of range")
        return self

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["classes"] = {k: list(v) for k, v in self.classes.items()}
        return data


def load_mix(path: Union[str, Path]) -> MixSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError("workload.spec", f"mix file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("workload.spec", f"{path}: invalid JSON ({e})") from e
    return MixSpec.from_dict(data)


# ---------------------------------------------------------------------------
# Generation


@dataclass
class _Process:
    name: str
    pages: int
    pt_count: int
    restarts: bool
    steps: Deque[Tuple[str, str, int]] = field(default_factory=deque)
    live: Dict[str, int] = field(default_factory=dict)


def _processes(spec: MixSpec, geo: DramGeometry, rng: np.random.Generator) -> List[_Process]:
    pages_per_mib = MIB // geo.page_bytes
    procs: List[_Process] = []
    for cls, count in spec.apps.items():
        lo, hi = spec.classes[cls]
        for i in range(count):
            mib = int(rng.integers(lo, hi + 1))
            pt_count = mib // 2 if spec.page_tables else 0
            procs.append(_Process(f"{cls}/{i}", mib * pages_per_mib, pt_count, spec.restart))
    for i in range(spec.background):
        nbytes = rng.exponential(spec.background_mean_mib * MIB)
        procs.append(_Process(f"bg/{i}", max(1, math.ceil(nbytes / geo.page_bytes)), 0, spec.restart))
    return procs


def mix_footprints(spec: MixSpec, geo: Optional[DramGeometry] = None) -> Dict[str, int]:
    """Footprint in pages of every process `generate_mix` would start."""
    geo = geo or DramGeometry()
    procs = _processes(spec.validate(), geo, np.random.default_rng(spec.seed))
    return {p.name: p.pages for p in procs}


def _script(proc: _Process, spec: MixSpec, rng: np.random.Generator):
    steps = proc.steps
    steps.append(("spawn", proc.name, 1))
    pt_names = [f"{PT_PREFIX}{proc.name}/{i}" for i in range(proc.pt_count)]
    for pt in pt_names:
        steps.append(("spawn", pt, 1))
        steps.append(("alloc", pt, 1))
    left = proc.pages
    while left > 0:
        step = min(left, spec.ramp_step_pages)
        steps.append(("alloc", proc.name, step))
        left -= step
    for _ in range(spec.churn_cycles):
        k = max(1, round(rng.uniform(spec.churn_min, spec.churn_max) * proc.pages))
        steps.append(("free", proc.name, k))
        steps.append(("alloc", proc.name, k))
    steps.append(("free", proc.name, proc.pages))
    steps.append(("exit", proc.name, 1))
    for pt in pt_names:
        steps.append(("free", pt, 1))
        steps.append(("exit", pt, 1))


def _emit(proc: _Process, act: str, dom: str, n: int, tick: int) -> TraceEvent:
    if act == "spawn":
        proc.live[dom] = 0
    elif act == "alloc":
        proc.live[dom] += n
    elif act == "free":
        proc.live[dom] -= n
    else:
        del proc.live[dom]
    return TraceEvent(tick, dom, act, 0, n if act in ("alloc", "free") else 1)


def generate_mix(spec: MixSpec, geo: Optional[DramGeometry] = None) -> List[TraceEvent]:
    """
    Synthetic trace for a workload mix.

    Each process spawns, ramps up page by page to its footprint, churns a
    random 1-10% of it per cycle, frees everything and exits; apps restart
    until the mix duration is spent. Every process still alive at the end
    is wound down so the trace finishes empty.
    """
    spec.validate()
    geo = geo or DramGeometry()
    rng = np.random.default_rng(spec.seed)
    procs = _processes(spec, geo, rng)

    demand = sum(p.pages + p.pt_count for p in procs)
    if demand > geo.total_pages * spec.safety_factor:
        logger.warning(
            "mix demands %d pages, more than %.0f%% of the %d available",
            demand, 100 * spec.safety_factor, geo.total_pages,
        )

    for proc in procs:
        _script(proc, spec, rng)
    events: List[TraceEvent] = []
    active = list(procs)
    tick = 0
    while active and tick < spec.duration:
        proc = active[int(rng.integers(len(active)))]
        act, dom, n = proc.steps.popleft()
        events.append(_emit(proc, act, dom, n, tick))
        tick += 1
        if not proc.steps:
            if proc.restarts:
                _script(proc, spec, rng)
            else:
                active.remove(proc)

    for proc in active:
        for dom in sorted(proc.live, key=lambda d: d == proc.name):
            if proc.live[dom]:
                events.append(_emit(proc, "free", dom, proc.live[dom], tick))
                tick += 1
            events.append(_emit(proc, "exit", dom, 1, tick))
            tick += 1
    logger.info("generated %d events for %d processes", len(events), len(procs))
    return events


# ---------------------------------------------------------------------------
# Trace files


def _parse_line(raw: str, line: int) -> TraceEvent:
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise TraceError(f"malformed JSON ({e.msg})", line) from None
    if not isinstance(data, dict):
        raise TraceError("expected a JSON object", line)
    unknown = sorted(set(data) - set(TRACE_FIELDS))
    if unknown:
        raise TraceError(f"unknown field {unknown[0]!r}", line)
    for name in ("t", "dom", "act"):
        if name not in data:
            raise TraceError(f"missing field {name!r}", line)
    t, order, n = data["t"], data.get("order", 0), data.get("n", 1)
    for name, value in (("t", t), ("order", order), ("n", n)):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TraceError(f"field {name!r} must be an integer", line)
    if t < 0:
        raise TraceError("field 't' must be >= 0", line)
    if not isinstance(data["dom"], str) or not data["dom"]:
        raise TraceError("field 'dom' must be a non-empty string", line)
    if data["act"] not in ACTIONS:
        raise TraceError(f"unknown action {data['act']!r}", line)
    if not 0 <= order <= MAX_ORDER_LIMIT:
        raise TraceError(f"order {order} outside [0, {MAX_ORDER_LIMIT}]", line)
    if n < 1:
        raise TraceError("field 'n' must be >= 1", line)
    return TraceEvent(t, data["dom"], data["act"], order, n)


def validate_trace(events: Iterable[TraceEvent], lines: Optional[List[int]] = None) -> List[TraceEvent]:
    """Checks ordering, spawn/exit bracketing and per-order alloc/free balance."""
    events = list(events)
    live: Dict[str, Dict[int, int]] = {}
    last_t = -1
    for idx, ev in enumerate(events):
        line = lines[idx] if lines else idx + 1
        if ev.t < last_t:
            raise TraceError(f"time regression ({ev.t} after {last_t})", line)
        last_t = ev.t
        blocks = live.get(ev.dom)
        if ev.act == "spawn":
            if blocks is not None:
                raise TraceError(f"domain {ev.dom!r} spawned twice", line)
            live[ev.dom] = defaultdict(int)
            continue
        if blocks is None:
            raise TraceError(f"{ev.act} for domain {ev.dom!r} before spawn", line)
        if ev.act == "alloc":
            blocks[ev.order] += ev.n
        elif ev.act == "free":
            if blocks[ev.order] < ev.n:
                raise TraceError(
                    f"free of {ev.n} order-{ev.order} blocks of {ev.dom!r} exceeds the {blocks[ev.order]} allocated",
                    line,
                )
            blocks[ev.order] -= ev.n
        else:
            if any(blocks.values()):
                raise TraceError(f"domain {ev.dom!r} exits with live allocations", line)
            del live[ev.dom]
    return events


def parse_trace(stream: Union[IO[str], Iterable[str]]) -> List[TraceEvent]:
    events: List[TraceEvent] = []
    lines: List[int] = []
    for number, raw in enumerate(stream, start=1):
        if not raw.strip():
            continue
        events.append(_parse_line(raw, number))
        lines.append(number)
    return validate_trace(events, lines)


def serialize_trace(events: Iterable[TraceEvent]) -> str:
    return "".join(ev.to_json() + "\n" for ev in events)


def read_trace(path: Union[str, Path]) -> List[TraceEvent]:
    path = Path(path)
    if not path.exists():
        raise TraceError(f"trace file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return parse_trace(fh)


def write_trace(events: Iterable[TraceEvent], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_trace(events), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Replay


@dataclass
class ReplayResult:
    timeline: List[MetricsSnapshot]
    supported: bool
    oom_events: int
    oom_domains: List[str]
    checks: List[ViolationReport]
    events: int
    domains: Dict[str, int]

    @property
    def violations(self) -> int:
        return sum(r.violation_count for r in self.checks)

    @property
    def findings(self) -> List[str]:
        return [f for r in self.checks for f in r.findings]

    @property
    def secure(self) -> bool:
        return all(r.ok for r in self.checks)


class _Replay:
    def __init__(self, allocator: PageAllocator, blast_radius: int, subarray_rows: Optional[int]):
        self.alloc = allocator
        self.blast_radius = blast_radius
        self.subarray_rows = subarray_rows
        self.pt_accounting = allocator.params.pt_accounting
        self.ids: Dict[str, int] = {}
        self.names: Dict[str, int] = {}
        self.blocks: Dict[str, Dict[int, Deque[int]]] = {}
        self.debt: Dict[str, Dict[int, int]] = {}
        self.pt_live: Dict[str, int] = defaultdict(int)
        self.oom_events = 0
        self.oom_domains: List[str] = []

    def _pt_owner(self, dom: str) -> Optional[str]:
        if self.pt_accounting and dom.startswith(PT_PREFIX):
            return dom[len(PT_PREFIX) :].rsplit("/", 1)[0]
        return None

    def apply(self, ev: TraceEvent):
        owner = self._pt_owner(ev.dom)
        if owner is not None:
            if ev.act == "alloc":
                self.pt_live[owner] += ev.n << ev.order
            elif ev.act == "free":
                self.pt_live[owner] -= ev.n << ev.order
            return
        if ev.act == "spawn":
            self.ids[ev.dom] = self.alloc.create_domain()
            self.names.setdefault(ev.dom, self.ids[ev.dom])
            self.blocks[ev.dom] = defaultdict(deque)
            self.debt[ev.dom] = defaultdict(int)
        elif ev.act == "alloc":
            self._alloc(ev)
        elif ev.act == "free":
            self._free(ev)
        else:
            self.alloc.destroy_domain(self.ids.pop(ev.dom))
            del self.blocks[ev.dom], self.debt[ev.dom]

    def _alloc(self, ev: TraceEvent):
        dom_id, queue = self.ids[ev.dom], self.blocks[ev.dom][ev.order]
        for _ in range(ev.n):
            try:
                queue.append(self.alloc.alloc_pages(dom_id, ev.order)[0])
            except OutOfMemoryError as e:
                self.debt[ev.dom][ev.order] += 1
                self.oom_events += 1
                if ev.dom not in self.oom_domains:
                    self.oom_domains.append(ev.dom)
                    logger.warning("t=%d: %s out of memory (%s)", ev.t, ev.dom, e)

    def _free(self, ev: TraceEvent):
        dom_id, queue = self.ids[ev.dom], self.blocks[ev.dom][ev.order]
        debt = self.debt[ev.dom]
        for _ in range(ev.n):
            if debt[ev.order]:
                debt[ev.order] -= 1
                continue
            pfn = queue.popleft()
            try:
                self.alloc.free_pages(dom_id, pfn, ev.order)
            except OwnershipError as e:
                raise OwnershipError(f"t={ev.t} {ev.dom}: {e}") from e

    def sample(self, tick: int) -> MetricsSnapshot:
        pt_pages = pt_loss = 0
        geo = self.alloc.geo
        for pages in self.pt_live.values():
            if pages:
                pt_pages += pages
                pt_loss += siloz_pt_loss(pages, geo)
        return snapshot(self.alloc, tick, pt_pages, pt_loss)

    def check(self, tick: int) -> ViolationReport:
        return verify_state(self.alloc, self.blast_radius, self.subarray_rows, tick)


def replay(
    trace: Iterable[TraceEvent],
    allocator: PageAllocator,
    sample_interval: int = 1000,
    verify_every: int = 0,
    blast_radius: int = DEFAULT_BLAST_RADIUS,
    subarray_rows: Optional[int] = None,
) -> ReplayResult:
    """
    Drive `allocator` through `trace`, sampling metrics every
    `sample_interval` ticks and running the verifier every `verify_every`
    events (0 = only at the end).

    Out-of-memory allocations are skipped and later frees of the same
    domain and order absorb them, so the replay continues under pressure.
    """
    if sample_interval <= 0:
        raise ConfigError("output.sample_interval", "must be positive")
    run = _Replay(allocator, blast_radius, subarray_rows)
    timeline: List[MetricsSnapshot] = []
    checks: List[ViolationReport] = []
    next_sample = 0
    last_t = 0
    count = 0
    logger.info("replay started: mode=%s", allocator.params.mode)
    for ev in trace:
        if ev.t >= next_sample:
            timeline.append(run.sample(ev.t))
            next_sample = (ev.t // sample_interval + 1) * sample_interval
        run.apply(ev)
        last_t = ev.t
        count += 1
        if verify_every and count % verify_every == 0:
            checks.append(run.check(ev.t))
    end = last_t + 1 if count else 0
    timeline.append(run.sample(end))
    checks.append(run.check(end))
    result = ReplayResult(
        timeline=timeline,
        supported=run.oom_events == 0,
        oom_events=run.oom_events,
        oom_domains=run.oom_domains,
        checks=checks,
        events=count,
        domains=run.names,
    )
    logger.info(
        "replay finished: %d events, %d samples, oom=%d, violations=%d",
        count, len(timeline), run.oom_events, result.violations,
    )
    return result
