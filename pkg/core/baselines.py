import heapq
import logging
import math
from dataclasses import replace
from typing import Dict, List, Optional, Set, Tuple

from core.allocator import MODES, AllocatorParams, AllocatorState, PageAllocator
from core.dram import GROUP_ROWS, DramGeometry, GlobalRowTable
from core.errors import ConfigError, OutOfMemoryError, OwnershipError

logger = logging.getLogger(__name__)

SILOZ_CHUNK_ROWS = 512
SILOZ_PT_GUARD_ROWS = 2
FREE_BLOCK_RECORD_BYTES = 8


class BuddyState(PageAllocator):
    """
    Binary buddy allocator over the whole page space.

    Free lists hold aligned 2^k blocks; the lowest free block of the smallest
    sufficient order is split on allocation and buddies coalesce on free.
    Domains are tagged in the ledger but never influence placement.
    """

    def __init__(self, geo: DramGeometry, grt: GlobalRowTable, params: AllocatorParams):
        super().__init__(geo, grt, params.validate())
        top = params.max_order
        total = geo.total_pages
        if total % (1 << top):
            raise ConfigError("allocator.max_order", f"2^{top} pages does not divide {total} pages")
        self._free: List[Set[int]] = [set() for _ in range(top + 1)]
        self._heaps: List[List[int]] = [[] for _ in range(top + 1)]
        self._free[top] = set(range(0, total, 1 << top))
        self._heaps[top] = sorted(self._free[top])

    def free_list(self, order: int) -> List[int]:
        return sorted(self._free[order])

    def _push(self, order: int, pfn: int):
        self._free[order].add(pfn)
        heapq.heappush(self._heaps[order], pfn)

    def _pop_lowest(self, order: int) -> Optional[int]:
        heap, live = self._heaps[order], self._free[order]
        while heap:
            pfn = heapq.heappop(heap)
            if pfn in live:
                live.discard(pfn)
                return pfn
        return None

    def buddy_alloc(self, order: int) -> int:
        self._check_order(order)
        for k in range(order, self.params.max_order + 1):
            pfn = self._pop_lowest(k)
            if pfn is None:
                continue
            while k > order:
                k -= 1
                self._push(k, pfn + (1 << k))
            return pfn
        self.stats["oom"] += 1
        raise OutOfMemoryError(f"no free block of order {order}")

    def buddy_free(self, pfn: int, order: int):
        while order < self.params.max_order:
            buddy = pfn ^ (1 << order)
            if buddy not in self._free[order]:
                break
            self._free[order].discard(buddy)
            pfn = min(pfn, buddy)
            order += 1
        self._push(order, pfn)

    def alloc_pages(self, domain_id: int, order: int) -> List[int]:
        dom = self._domain(domain_id)
        pfn = self.buddy_alloc(order)
        self._record(dom, pfn, order)
        return list(range(pfn, pfn + (1 << order)))

    def free_pages(self, domain_id: int, pfn: int, order: int) -> int:
        dom = self._domain(domain_id)
        if order < 0 or pfn % (1 << order):
            raise OwnershipError(f"pfn {pfn} is not aligned to order {order}")
        npages = self._unrecord(dom, pfn, order)
        self.buddy_free(pfn, order)
        return npages

    def page_breakdown(self) -> Dict[str, int]:
        allocated = sum(1 << order for _, order in self._blocks.values())
        return {
            "allocated": allocated,
            "loss": 0,
            "stranded": 0,
            "free": self.geo.total_pages - allocated,
            "zone_guard_pages": 0,
            "zone_reserved_pages": 0,
            "zonelet_loss_pages": 0,
        }

    def free_pages_total(self) -> int:
        return sum(len(blocks) << k for k, blocks in enumerate(self._free))

    def metadata_size(self) -> Tuple[int, int]:
        blocks = sum(len(b) for b in self._free)
        return self.geo.total_pages // 8, blocks * FREE_BLOCK_RECORD_BYTES

    def export_state(self) -> Dict:
        return {
            "mode": "buddy",
            "params": self.params.to_dict(),
            "geometry": self.geo.to_dict(),
            "free_blocks": {str(k): len(b) for k, b in enumerate(self._free)},
            "domains": [
                {"domain_id": d.domain_id, "footprint_pages": d.footprint_pages}
                for d in self.domains.values()
            ],
            "stats": dict(self.stats),
            "pages": self.page_breakdown(),
        }


def _fit_chunk_rows(preferred: int, n_logical: int) -> int:
    rows = min(preferred, n_logical)
    while n_logical % rows:
        rows -= 1
    return rows


def make_mode(mode: str, geo: DramGeometry, grt: Optional[GlobalRowTable] = None) -> AllocatorParams:
    """
    Preset parameters for one of the compared configurations.

    Chunk sizes are counted in logical rows, so under complex addressing
    the isolating modes fall back to one 8-row group per chunk and siloz
    keeps its 512-row footprint by dividing by the orbit width.
    """
    if mode not in MODES:
        raise ConfigError("allocator.mode", f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    complex_rows = grt is not None and grt.rows_per_logical > 1
    n_logical = grt.n_logical if grt is not None else geo.total_global_rows
    base = AllocatorParams(mode=mode)
    if mode == "aegis":
        params = base
    elif mode == "zebram":
        params = replace(base, all_zonelets=True, expansion_enabled=False)
    elif mode == "siloz":
        params = replace(
            base,
            chunk_rows=SILOZ_CHUNK_ROWS // (grt.rows_per_logical if complex_rows else 1),
            n_guard=0,
            zonelets_enabled=False,
            pt_accounting=True,
        )
    else:
        params = replace(base, n_guard=0, zonelets_enabled=False, expansion_enabled=False)
    rows = params.chunk_rows
    if complex_rows and params.n_guard > 0:
        rows = min(rows, GROUP_ROWS)
    largest = (geo.total_pages & -geo.total_pages).bit_length() - 1
    return replace(
        params,
        chunk_rows=_fit_chunk_rows(rows, n_logical),
        max_order=min(params.max_order, largest),
    )


def create_allocator(geo: DramGeometry, grt: GlobalRowTable, params: AllocatorParams) -> PageAllocator:
    if params.mode == "buddy":
        return BuddyState(geo, grt, params)
    return AllocatorState(geo, grt, params)


def siloz_pt_loss(pt_pages: int, geo: DramGeometry) -> int:
    """
    Guard-row loss charged for one app's page tables when siloz keeps them
    inside the app's own sub-array: two guard rows per started global row.
    """
    rows = math.ceil(pt_pages / geo.pages_per_global_row)
    return rows * SILOZ_PT_GUARD_ROWS * geo.pages_per_global_row
