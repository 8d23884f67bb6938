import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.allocator import FREE, ZONE, ZONELET, AllocatorState, PageAllocator
from core.baselines import BuddyState
from core.dram import SPACES, GlobalRowTable, TransformConfig, physical_rows

logger = logging.getLogger(__name__)

SHARED = -2
DEFAULT_BLAST_RADIUS = 2
DEFAULT_WITNESS_LIMIT = 100


@dataclass(frozen=True)
class Violation:
    rank_parity: str
    side: str
    row1: int
    row2: int
    domain1: int
    domain2: int
    pfn1: int
    pfn2: int


@dataclass
class ViolationReport:
    violations: List[Violation] = field(default_factory=list)
    violation_count: int = 0
    findings: List[str] = field(default_factory=list)
    tick: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.violation_count == 0 and not self.findings

    def to_dict(self) -> Dict:
        return {
            "tick": self.tick,
            "ok": self.ok,
            "violation_count": self.violation_count,
            "violations": [asdict(v) for v in self.violations],
            "findings": list(self.findings),
        }


def _row_owners(state: PageAllocator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Owned row-IDs, their owner (SHARED when several domains) and a witness PFN."""
    blocks = list(state.ownership())
    if not blocks:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty
    starts = np.array([b[0] for b in blocks], dtype=np.int64)
    sizes = np.array([b[1] for b in blocks], dtype=np.int64)
    doms = np.array([b[2] for b in blocks], dtype=np.int64)
    offsets = np.arange(sizes.sum()) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    pages = np.repeat(starts, sizes) + offsets
    page_doms = np.repeat(doms, sizes)
    order = np.argsort(pages, kind="stable")
    pages, page_doms = pages[order], page_doms[order]
    rows = pages // state.geo.pages_per_global_row

    rows_u, first = np.unique(rows, return_index=True)
    lo_r = np.minimum.reduceat(page_doms, first)
    hi_r = np.maximum.reduceat(page_doms, first)
    owners = np.where(lo_r == hi_r, lo_r, SHARED)
    return rows_u, owners, pages[first]


def check_isolation(
    state: PageAllocator,
    grt: GlobalRowTable,
    transforms: Optional[TransformConfig] = None,
    n_guard: int = DEFAULT_BLAST_RADIUS,
    subarray_rows: Optional[int] = None,
    limit: int = DEFAULT_WITNESS_LIMIT,
) -> ViolationReport:
    """
    Brute-force check that no two rows within `n_guard` physical rows of each
    other hold data of different domains, in every (rank parity, side) space.

    Only the page ownership of `state` is read. Rows in different
    `subarray_rows`-sized logical units are treated as never adjacent.
    """
    transforms = transforms or grt.transforms
    report = ViolationReport()
    rows, owners, witness = _row_owners(state)
    if rows.size == 0:
        return report
    unit = grt.inverse[rows] // subarray_rows if subarray_rows else None

    for parity, side in SPACES:
        phys = physical_rows(rows, parity, side, transforms)
        order = np.argsort(phys)
        p, o, w, r = phys[order], owners[order], witness[order], rows[order]
        u = unit[order] if unit is not None else None
        for d in range(1, n_guard + 1):
            j = np.searchsorted(p, p + d)
            hit = j < p.size
            hit[hit] = p[j[hit]] == p[hit] + d
            i = np.flatnonzero(hit)
            j = j[i]
            bad = (o[i] != o[j]) | (o[i] == SHARED)
            if u is not None:
                bad &= u[i] == u[j]
            i, j = i[bad], j[bad]
            report.violation_count += int(i.size)
            room = limit - len(report.violations)
            for a, b in zip(i[:room], j[:room]):
                report.violations.append(
                    Violation(parity, side, int(r[a]), int(r[b]), int(o[a]), int(o[b]), int(w[a]), int(w[b]))
                )
    if report.violation_count:
        logger.warning("isolation check found %d violating row pairs", report.violation_count)
    return report


def _audit_allocator(state: AllocatorState) -> List[str]:
    findings: List[str] = []
    cm = state.chunks
    expected = np.zeros_like(state.occupancy)
    ledger_pages: Dict[int, int] = {}
    for pfn, npages, dom in state.ownership():
        chunk, rel = cm.locate(pfn)
        expected[chunk, rel : rel + npages] = True
        ledger_pages[dom] = ledger_pages.get(dom, 0) + npages

    mismatch = (expected != state.occupancy).any(axis=1)
    popcount = state.occupancy.sum(axis=1)
    for c in np.flatnonzero(mismatch | (popcount != state.used)):
        findings.append(f"chunk {c}: occupancy bitvector disagrees with page ownership")
    for c in np.flatnonzero(state.occupancy.any(axis=1) & ~mismatch):
        if (state.occupancy[c] & ~state.data_mask(int(c))).any():
            findings.append(f"chunk {c}: data in a guard or remainder position")

    for c in np.flatnonzero(state.kind == ZONE):
        zone = state.zones.get(int(state.chunk_zone[c]))
        if zone is None or int(c) not in zone.chunks():
            findings.append(f"chunk {c}: zone member outside a contiguous zone run")
    for c in np.flatnonzero(state.kind == FREE):
        if state.chunk_zone[c] != -1 or int(c) in state.regions:
            findings.append(f"chunk {c}: free chunk still referenced")
    for c in np.flatnonzero(state.kind == ZONELET):
        region = state.regions.get(int(c))
        if region is None:
            findings.append(f"chunk {c}: striped chunk without a zonelet region")
        elif len(region.owners) != state.used[c]:
            findings.append(f"chunk {c}: zonelet owner map disagrees with occupancy")

    for zid, zone in state.zones.items():
        members = state.chunk_zone[zone.start_chunk : zone.end]
        if zone.end > cm.n_chunks or (members != zid).any() or (state.kind[zone.start_chunk : zone.end] != ZONE).any():
            findings.append(f"zone {zid}: chunks {zone.start_chunk}..{zone.end - 1} are not all its members")
            continue
        owner = state.domains.get(zone.domain)
        if owner is None or zid not in owner.zones:
            findings.append(f"zone {zid}: not listed by domain {zone.domain}")
        if not state._sealed(zone.start_chunk, zone.chunk_count):
            findings.append(f"zone {zid}: a later chunk is exposed to rows outside the zone")
        rule = state.applicable_rule(zone)
        if rule is not None:
            findings.append(f"zone {zid}: {rule[0]} still applicable at chunk {rule[1]}")

    for dom in state.domains.values():
        if dom.footprint_pages != ledger_pages.get(dom.domain_id, 0):
            findings.append(f"domain {dom.domain_id}: footprint disagrees with its live blocks")
    return findings


def _audit_buddy(state: BuddyState) -> List[str]:
    findings: List[str] = []
    total = state.geo.total_pages
    covered = np.zeros(total, dtype=np.int8)
    for order, blocks in enumerate(state._free):
        for pfn in blocks:
            if pfn % (1 << order):
                findings.append(f"free block {pfn} misaligned for order {order}")
            covered[pfn : pfn + (1 << order)] += 1
    for pfn, npages, _ in state.ownership():
        covered[pfn : pfn + npages] += 1
    if (covered > 1).any():
        findings.append(f"{int((covered > 1).sum())} pages are both free and allocated, or free twice")
    if (covered == 0).any():
        findings.append(f"{int((covered == 0).sum())} pages are neither free nor allocated")
    return findings


def audit_state(state: PageAllocator) -> List[str]:
    if isinstance(state, BuddyState):
        return _audit_buddy(state)
    return _audit_allocator(state)


def verify_state(
    state: PageAllocator,
    n_guard: int = DEFAULT_BLAST_RADIUS,
    subarray_rows: Optional[int] = None,
    tick: Optional[int] = None,
) -> ViolationReport:
    """Isolation check plus state audit, in one report."""
    report = check_isolation(state, state.grt, n_guard=n_guard, subarray_rows=subarray_rows)
    report.findings = audit_state(state)
    report.tick = tick
    return report
