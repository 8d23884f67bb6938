import bisect
import logging
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from core.dram import GROUP_ROWS, GRT_ENTRY_BYTES, MIB, ChunkMap, DramGeometry, GlobalRowTable
from core.errors import (
    ConfigError,
    InUseError,
    OrderError,
    OutOfMemoryError,
    OwnershipError,
    UnknownDomainError,
)

logger = logging.getLogger(__name__)

MODES = ("aegis", "zebram", "siloz", "buddy")
MAX_ORDER_LIMIT = 11

FREE, ZONE, ZONELET = 0, 1, 2
KIND_NAMES = {FREE: "free", ZONE: "zone_member", ZONELET: "zonelet_region"}

# record sizes (bytes) used for metadata accounting
CHUNK_STATE_BYTES = 2
DOMAIN_RECORD_BYTES = 32
ZONE_RECORD_BYTES = 16
ZONELET_RECORD_BYTES = 16
ZONELET_OWNER_BYTES = 2


@dataclass(frozen=True)
class AllocatorParams:
    chunk_rows: int = 16
    n_guard: int = 2
    switch_threshold_bytes: int = 12 * MIB
    zonelets_enabled: bool = True
    mode: str = "aegis"
    max_order: int = MAX_ORDER_LIMIT
    expansion_enabled: bool = True
    shrink_enabled: bool = True
    all_zonelets: bool = False
    pt_accounting: bool = False

    def validate(self, grt: Optional[GlobalRowTable] = None) -> "AllocatorParams":
        if self.mode not in MODES:
            raise ConfigError("allocator.mode", f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.n_guard < 0:
            raise ConfigError("allocator.n_guard", "must be >= 0")
        if self.chunk_rows <= self.n_guard:
            raise ConfigError("allocator.chunk_rows", f"{self.chunk_rows} must exceed n_guard={self.n_guard}")
        if not 0 <= self.max_order <= MAX_ORDER_LIMIT:
            raise ConfigError("allocator.max_order", f"must lie in [0, {MAX_ORDER_LIMIT}]")
        if self.switch_threshold_bytes < 0:
            raise ConfigError("allocator.switch_threshold_bytes", "must be >= 0")
        if self.all_zonelets and not self.zonelets_enabled:
            raise ConfigError("allocator.zonelets_enabled", "all_zonelets requires zonelets")
        if self.mode == "zebram" and not self.all_zonelets:
            raise ConfigError("allocator.all_zonelets", "zebram places every allocation in zonelets")
        if self.mode == "siloz" and (self.n_guard != 0 or self.zonelets_enabled):
            raise ConfigError("allocator.n_guard", "siloz runs without guard rows and without zonelets")
        if (
            grt is not None
            and grt.rows_per_logical > 1
            and self.n_guard > 0
            and GROUP_ROWS % self.chunk_rows
        ):
            raise ConfigError(
                "allocator.chunk_rows",
                f"complex addressing with guard rows needs chunk_rows dividing {GROUP_ROWS}",
            )
        return self

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class Domain:
    domain_id: int
    footprint_pages: int = 0
    zones: List[int] = field(default_factory=list)
    zonelet_pages: int = 0
    above_threshold: bool = False


@dataclass
class Zone:
    zone_id: int
    domain: int
    start_chunk: int
    chunk_count: int

    @property
    def end(self) -> int:
        return self.start_chunk + self.chunk_count

    def chunks(self) -> range:
        return range(self.start_chunk, self.end)


@dataclass
class ZoneletRegion:
    chunk: int
    seq: int
    owners: Dict[int, int] = field(default_factory=dict)  # relative page -> domain


class PageAllocator(ABC):
    """
    Common surface of every simulated allocator.

    Keeps the domain registry and a ledger of live blocks keyed by first PFN,
    which the verifier and the replay use regardless of placement policy.
    """

    def __init__(self, geo: DramGeometry, grt: GlobalRowTable, params: AllocatorParams):
        self.geo = geo
        self.grt = grt
        self.params = params
        self.domains: Dict[int, Domain] = {}
        self.stats: Counter = Counter()
        self._next_domain = 0
        self._blocks: Dict[int, Tuple[int, int]] = {}

    def create_domain(self) -> int:
        domain_id = self._next_domain
        self._next_domain += 1
        self.domains[domain_id] = Domain(domain_id)
        self.stats["domains_created"] += 1
        return domain_id

    def _domain(self, domain_id: int) -> Domain:
        try:
            return self.domains[domain_id]
        except KeyError:
            raise UnknownDomainError(f"unknown domain {domain_id}") from None

    def destroy_domain(self, domain_id: int):
        dom = self._domain(domain_id)
        if dom.footprint_pages:
            raise InUseError(f"domain {domain_id} still holds {dom.footprint_pages} pages")
        self._release_domain(dom)
        del self.domains[domain_id]

    def _release_domain(self, dom: Domain):
        pass

    def _check_order(self, order: int) -> int:
        if not 0 <= order <= self.params.max_order:
            raise OrderError(f"order {order} outside [0, {self.params.max_order}]")
        return 1 << order

    def _record(self, dom: Domain, pfn: int, order: int):
        self._blocks[pfn] = (dom.domain_id, order)
        dom.footprint_pages += 1 << order
        if not dom.above_threshold and (
            dom.footprint_pages * self.geo.page_bytes >= self.params.switch_threshold_bytes
        ):
            dom.above_threshold = True
            logger.debug("domain %d crossed the switch threshold", dom.domain_id)

    def _unrecord(self, dom: Domain, pfn: int, order: int) -> int:
        entry = self._blocks.get(pfn)
        if entry != (dom.domain_id, order):
            if entry is None:
                raise OwnershipError(f"pfn {pfn} is not the start of a live block")
            raise OwnershipError(
                f"pfn {pfn} is held by domain {entry[0]} at order {entry[1]}, "
                f"not domain {dom.domain_id} at order {order}"
            )
        del self._blocks[pfn]
        dom.footprint_pages -= 1 << order
        return 1 << order

    def ownership(self) -> Iterator[Tuple[int, int, int]]:
        """Yields (first_pfn, n_pages, domain) for every live block."""
        for pfn, (domain, order) in self._blocks.items():
            yield pfn, 1 << order, domain

    @property
    def live_pages(self) -> int:
        return sum(d.footprint_pages for d in self.domains.values())

    @abstractmethod
    def alloc_pages(self, domain_id: int, order: int) -> List[int]: ...

    @abstractmethod
    def free_pages(self, domain_id: int, pfn: int, order: int) -> int: ...

    @abstractmethod
    def page_breakdown(self) -> Dict[str, int]: ...

    @abstractmethod
    def metadata_size(self) -> Tuple[int, int]: ...

    @abstractmethod
    def export_state(self) -> Dict: ...


class AllocatorState(PageAllocator):
    """
    Chunk-based isolating allocator.

    Large domains get guard-fronted zones of contiguous chunks; small domains
    share striped zonelet regions, one data row between n_guard guard rows.
    """

    def __init__(
        self,
        geo: DramGeometry,
        grt: GlobalRowTable,
        params: AllocatorParams,
        chunk_map: Optional[ChunkMap] = None,
    ):
        super().__init__(geo, grt, params.validate(grt))
        self.chunks = chunk_map if chunk_map is not None else ChunkMap(geo, grt, params.chunk_rows)
        cm = self.chunks
        n = cm.n_chunks
        g = params.n_guard

        self.kind = np.zeros(n, dtype=np.int8)
        self.chunk_zone = np.full(n, -1, dtype=np.int64)
        self.occupancy = np.zeros((n, cm.slots_per_chunk), dtype=bool)
        self.used = np.zeros(n, dtype=np.int64)
        self.zones: Dict[int, Zone] = {}
        self.regions: Dict[int, ZoneletRegion] = {}
        self._open_regions: List[Tuple[int, int]] = []
        self._next_zone = 0
        self._next_region = 0

        self.zonelets_per_chunk = params.chunk_rows // (g + 1)
        offsets = np.arange(params.chunk_rows)
        zonelet_rows = ((offsets % (g + 1)) == g) & (offsets < self.zonelets_per_chunk * (g + 1))
        self._row_tables = {
            (FREE, False): np.zeros(params.chunk_rows, dtype=bool),
            (ZONE, True): offsets >= g,
            (ZONE, False): np.ones(params.chunk_rows, dtype=bool),
            (ZONELET, False): zonelet_rows,
        }

        valid = cm.row_offset >= 0
        safe = np.where(valid, cm.row_offset, 0)
        self._guard_rows = valid & (safe < g)
        self._guard_pages = self._guard_rows.sum(axis=1) * cm.ppr
        self._zonelet_data_pages = (valid & zonelet_rows[safe]).sum(axis=1) * cm.ppr
        self._capacity = cm.row_count * cm.ppr
        self._masks: Dict[int, Tuple[Tuple[int, bool], np.ndarray, int]] = {}

        logger.info(
            "allocator ready: mode=%s chunks=%d chunk_rows=%d n_guard=%d",
            params.mode, n, params.chunk_rows, g,
        )

    # -- layout ---------------------------------------------------------

    def _is_first(self, chunk: int) -> bool:
        return self.kind[chunk] == ZONE and self.zones[int(self.chunk_zone[chunk])].start_chunk == chunk

    def _layout(self, chunk: int) -> Tuple[np.ndarray, int]:
        key = (int(self.kind[chunk]), self._is_first(chunk))
        cached = self._masks.get(chunk)
        if cached is not None and cached[0] == key:
            return cached[1], cached[2]
        offsets = self.chunks.row_offset[chunk]
        rows = (offsets >= 0) & self._row_tables[key][np.where(offsets >= 0, offsets, 0)]
        mask = np.repeat(rows, self.chunks.ppr)
        data = int(mask.sum())
        self._masks[chunk] = (key, mask, data)
        return mask, data

    def data_mask(self, chunk: int) -> np.ndarray:
        """Boolean per relative page: True where domain data may live."""
        return self._layout(chunk)[0]

    def _free_data(self, chunk: int) -> int:
        return self._layout(chunk)[1] - int(self.used[chunk])

    def _front_clear(self, chunk: int) -> bool:
        occ = self.occupancy[chunk].reshape(self.chunks.width, self.chunks.ppr)
        return not occ[self._guard_rows[chunk]].any()

    def _find_run(self, chunk: int, npages: int) -> Optional[int]:
        usable = self.data_mask(chunk) & ~self.occupancy[chunk]
        if npages == 1:
            idx = int(np.argmax(usable))
            return idx if usable[idx] else None
        blocks = usable.size // npages
        fits = usable[: blocks * npages].reshape(blocks, npages).all(axis=1)
        for b in np.flatnonzero(fits):
            rel = int(b) * npages
            first = self.chunks.select_frame(chunk, rel)
            last = self.chunks.select_frame(chunk, rel + npages - 1)
            if first % npages == 0 and last - first == npages - 1:
                return rel
        return None

    def _place(self, chunk: int, rel: int, npages: int) -> int:
        self.occupancy[chunk, rel : rel + npages] = True
        self.used[chunk] += npages
        return self.chunks.select_frame(chunk, rel)

    def select_frame(self, chunk: int, rel: int) -> int:
        """PFN of relative page `rel`; guard and remainder positions are refused."""
        if not 0 <= chunk < self.chunks.n_chunks:
            raise IndexError(f"chunk {chunk} outside [0, {self.chunks.n_chunks})")
        if self.kind[chunk] != FREE:
            mask = self.data_mask(chunk)
            if not 0 <= rel < mask.size or not mask[rel]:
                raise IndexError(f"page {rel} of chunk {chunk} is a guard position")
        return self.chunks.select_frame(chunk, rel)

    # -- chunk pool -----------------------------------------------------

    @property
    def free_chunks(self) -> int:
        return int((self.kind == FREE).sum())

    def _reserve_chunk(self) -> int:
        free = self.kind == FREE
        if not free.any():
            self.stats["oom"] += 1
            raise OutOfMemoryError("no free chunk left")
        padded = np.append(free, True)
        roomy = np.flatnonzero(free & padded[self.chunks.neighbor_matrix].all(axis=1))
        if roomy.size:
            return int(roomy[0])
        return int(np.flatnonzero(free)[0])

    def _free_chunk(self, chunk: int):
        if self.used[chunk]:
            raise OwnershipError(f"chunk {chunk} released with {self.used[chunk]} live pages")
        self.kind[chunk] = FREE
        self.chunk_zone[chunk] = -1
        self._masks.pop(chunk, None)

    def _sealed(self, start: int, count: int) -> bool:
        g = self.params.n_guard
        members = range(start, start + count)
        return all(self.chunks.lower_neighbors(y, g).issubset(members) for y in members[1:])

    # -- zones ----------------------------------------------------------

    def _new_zone(self, dom: Domain, start: int, count: int) -> Zone:
        zone = Zone(self._next_zone, dom.domain_id, start, count)
        self._next_zone += 1
        self.zones[zone.zone_id] = zone
        dom.zones.append(zone.zone_id)
        self.kind[start : start + count] = ZONE
        self.chunk_zone[start : start + count] = zone.zone_id
        logger.debug("domain %d: zone %d at chunk %d", dom.domain_id, zone.zone_id, start)
        return zone

    def _release_zone(self, zone: Zone):
        for chunk in zone.chunks():
            self._free_chunk(chunk)
        self.domains[zone.domain].zones.remove(zone.zone_id)
        del self.zones[zone.zone_id]
        self.stats["zones_released"] += 1

    def try_expand_zone(self, domain_id: int) -> Optional[Zone]:
        dom = self._domain(domain_id)
        nb = self.chunks.neighbor_matrix
        for zid in dom.zones:
            zone = self.zones[zid]
            cand = zone.end
            if cand >= self.chunks.n_chunks or self.kind[cand] != FREE:
                continue
            if cand not in nb[zone.end - 1]:
                continue
            if not self._sealed(zone.start_chunk, zone.chunk_count + 1):
                continue
            self.kind[cand] = ZONE
            self.chunk_zone[cand] = zid
            zone.chunk_count += 1
            self.stats["expansions"] += 1
            around = nb[cand][nb[cand] >= 0]
            foreign = [
                int(j) for j in around
                if self.kind[j] == ZONELET
                or (self.kind[j] == ZONE and self.zones[int(self.chunk_zone[j])].domain != domain_id)
            ]
            if foreign:
                self.stats["expansions_exposed"] += 1
            logger.debug("domain %d: zone %d expanded into chunk %d", domain_id, zid, cand)
            return zone
        return None

    def applicable_rule(self, zone: Zone) -> Optional[Tuple[str, int]]:
        """First shrink/split rule that applies to `zone`, as (action, chunk)."""
        s, e = zone.start_chunk, zone.end - 1
        if zone.chunk_count == 1 or not self.params.shrink_enabled:
            if not self.used[s : e + 1].any():
                return ("release", s)
            return None
        if not self.used[s] and self._front_clear(s + 1) and self._sealed(s + 1, zone.chunk_count - 1):
            return ("shrink_front", s)
        if not self.used[e] and self._sealed(s, zone.chunk_count - 1):
            return ("reclaim_last", e)
        for i in range(s + 1, e):
            if (
                not self.used[i]
                and self._front_clear(i + 1)
                and self._sealed(s, i - s)
                and self._sealed(i + 1, e - i)
            ):
                return ("split", i)
        return None

    def shrink_or_split(self, zone_id: int) -> List[str]:
        actions: List[str] = []
        pending = [zone_id]
        while pending:
            zone = self.zones.get(pending.pop())
            while zone is not None:
                rule = self.applicable_rule(zone)
                if rule is None:
                    break
                action, chunk = rule
                actions.append(action)
                self.stats[action] += 1
                logger.debug("zone %d: %s at chunk %d", zone.zone_id, action, chunk)
                if action == "release":
                    self._release_zone(zone)
                    zone = None
                elif action == "shrink_front":
                    self._free_chunk(chunk)
                    zone.start_chunk += 1
                    zone.chunk_count -= 1
                elif action == "reclaim_last":
                    self._free_chunk(chunk)
                    zone.chunk_count -= 1
                else:
                    tail_start, tail_count = chunk + 1, zone.end - chunk - 1
                    zone.chunk_count = chunk - zone.start_chunk
                    self._free_chunk(chunk)
                    tail = self._new_zone(self.domains[zone.domain], tail_start, tail_count)
                    pending.append(tail.zone_id)
        return actions

    def _alloc_zone(self, dom: Domain, npages: int) -> int:
        for zid in dom.zones:
            for chunk in self.zones[zid].chunks():
                if self._free_data(chunk) >= npages:
                    rel = self._find_run(chunk, npages)
                    if rel is not None:
                        return self._place(chunk, rel, npages)
        if self.params.expansion_enabled:
            zone = self.try_expand_zone(dom.domain_id)
            if zone is not None:
                rel = self._find_run(zone.end - 1, npages)
                if rel is not None:
                    return self._place(zone.end - 1, rel, npages)
                self.shrink_or_split(zone.zone_id)
        zone = self._new_zone(dom, self._reserve_chunk(), 1)
        self.stats["zones_created"] += 1
        rel = self._find_run(zone.start_chunk, npages)
        if rel is None:
            self._release_zone(zone)
            raise OrderError(f"a block of {npages} pages does not fit one chunk")
        return self._place(zone.start_chunk, rel, npages)

    # -- zonelets -------------------------------------------------------

    def provision_zonelet_region(self) -> int:
        free = np.flatnonzero(self.kind == FREE)
        if not free.size:
            self.stats["oom"] += 1
            raise OutOfMemoryError("no free chunk left for a zonelet region")
        chunk = int(free[0])
        self.kind[chunk] = ZONELET
        region = ZoneletRegion(chunk, self._next_region)
        self._next_region += 1
        self.regions[chunk] = region
        bisect.insort(self._open_regions, (region.seq, chunk))
        self.stats["zonelet_regions"] += 1
        logger.debug("zonelet region provisioned at chunk %d", chunk)
        return chunk

    def _release_region(self, chunk: int):
        region = self.regions.pop(chunk)
        key = (region.seq, chunk)
        idx = bisect.bisect_left(self._open_regions, key)
        if idx < len(self._open_regions) and self._open_regions[idx] == key:
            del self._open_regions[idx]
        self._free_chunk(chunk)
        self.stats["zonelet_regions_released"] += 1

    def _alloc_zonelet(self, dom: Domain, npages: int) -> int:
        for _, chunk in list(self._open_regions):
            if self._free_data(chunk) >= npages:
                rel = self._find_run(chunk, npages)
                if rel is not None:
                    return self._place_zonelet(dom, chunk, rel, npages)
        chunk = self.provision_zonelet_region()
        rel = self._find_run(chunk, npages)
        if rel is None:
            self._release_region(chunk)
            raise OutOfMemoryError(f"a block of {npages} pages does not fit a zonelet data row")
        return self._place_zonelet(dom, chunk, rel, npages)

    def _place_zonelet(self, dom: Domain, chunk: int, rel: int, npages: int) -> int:
        region = self.regions[chunk]
        pfn = self._place(chunk, rel, npages)
        for k in range(rel, rel + npages):
            region.owners[k] = dom.domain_id
        dom.zonelet_pages += npages
        if not self._free_data(chunk):
            idx = bisect.bisect_left(self._open_regions, (region.seq, chunk))
            del self._open_regions[idx]
        return pfn

    def alloc_from_zonelet(self, domain_id: int, count: int) -> List[int]:
        if not self.params.zonelets_enabled:
            raise ConfigError("allocator.zonelets_enabled", "zonelets are disabled in this mode")
        dom = self._domain(domain_id)
        pfns: List[int] = []
        try:
            for _ in range(count):
                pfn = self._alloc_zonelet(dom, 1)
                self._record(dom, pfn, 0)
                pfns.append(pfn)
        except OutOfMemoryError:
            for pfn in pfns:
                self.free_pages(domain_id, pfn, 0)
            raise
        return pfns

    # -- page interface -------------------------------------------------

    def alloc_pages(self, domain_id: int, order: int) -> List[int]:
        dom = self._domain(domain_id)
        npages = self._check_order(order)
        p = self.params
        fits_row = npages <= self.chunks.ppr
        if p.all_zonelets:
            if not fits_row:
                self.stats["oom"] += 1
                raise OutOfMemoryError(f"order {order} exceeds a zonelet data row")
            pfn = self._alloc_zonelet(dom, npages)
        elif p.zonelets_enabled and fits_row and not dom.above_threshold:
            pfn = self._alloc_zonelet(dom, npages)
        else:
            pfn = self._alloc_zone(dom, npages)
        self._record(dom, pfn, order)
        return list(range(pfn, pfn + npages))

    def free_pages(self, domain_id: int, pfn: int, order: int) -> int:
        dom = self._domain(domain_id)
        if order < 0 or pfn not in self._blocks:
            raise OwnershipError(f"pfn {pfn} is not the start of a live block")
        npages = 1 << order
        chunk, rel = self.chunks.locate(pfn)
        if not self.occupancy[chunk, rel : rel + npages].all():
            raise OwnershipError(f"pages {pfn}..{pfn + npages - 1} are not all allocated")
        self._unrecord(dom, pfn, order)
        self.occupancy[chunk, rel : rel + npages] = False
        self.used[chunk] -= npages
        if self.kind[chunk] == ZONELET:
            region = self.regions[chunk]
            for k in range(rel, rel + npages):
                del region.owners[k]
            dom.zonelet_pages -= npages
            if not self.used[chunk]:
                self._release_region(chunk)
            else:
                key = (region.seq, chunk)
                idx = bisect.bisect_left(self._open_regions, key)
                if idx == len(self._open_regions) or self._open_regions[idx] != key:
                    self._open_regions.insert(idx, key)
        else:
            self.shrink_or_split(int(self.chunk_zone[chunk]))
        return npages

    def _release_domain(self, dom: Domain):
        for zid in list(dom.zones):
            self._release_zone(self.zones[zid])

    # -- accounting -----------------------------------------------------

    def page_breakdown(self) -> Dict[str, int]:
        cap = self._capacity
        zone = self.kind == ZONE
        zonelet = self.kind == ZONELET
        first = np.zeros(self.chunks.n_chunks, dtype=bool)
        for z in self.zones.values():
            first[z.start_chunk] = True
        zone_loss = int(self._guard_pages[first].sum())
        zone_reserved = int(cap[zone].sum())
        zonelet_loss = int((cap - self._zonelet_data_pages)[zonelet].sum())
        zonelet_free = int((self._zonelet_data_pages - self.used)[zonelet].sum())
        allocated = int(self.used.sum())
        return {
            "allocated": allocated,
            "loss": zone_loss + zonelet_loss,
            "stranded": zone_reserved - int(self.used[zone].sum()) - zone_loss,
            "free": int(cap[self.kind == FREE].sum()) + zonelet_free,
            "zone_guard_pages": zone_loss,
            "zone_reserved_pages": zone_reserved,
            "zonelet_loss_pages": zonelet_loss,
        }

    def metadata_size(self) -> Tuple[int, int]:
        n = self.chunks.n_chunks
        static = n * -(-self.chunks.slots_per_chunk // 8)
        static += self.grt.serialized_bytes + n * CHUNK_STATE_BYTES
        if self.grt.rows_per_logical > 1:
            static += self.geo.total_global_rows * GRT_ENTRY_BYTES
        dynamic = (
            len(self.domains) * DOMAIN_RECORD_BYTES
            + len(self.zones) * ZONE_RECORD_BYTES
            + len(self.regions) * ZONELET_RECORD_BYTES
            + sum(len(r.owners) for r in self.regions.values()) * ZONELET_OWNER_BYTES
        )
        return static, dynamic

    def export_state(self) -> Dict:
        occupied = np.flatnonzero(self.kind != FREE)
        return {
            "mode": self.params.mode,
            "params": self.params.to_dict(),
            "geometry": self.geo.to_dict(),
            "chunks": {
                "total": self.chunks.n_chunks,
                "free": self.free_chunks,
                "zone": int((self.kind == ZONE).sum()),
                "zonelet": len(self.regions),
            },
            "domains": [
                {
                    "domain_id": d.domain_id,
                    "footprint_pages": d.footprint_pages,
                    "zonelet_pages": d.zonelet_pages,
                    "above_threshold": d.above_threshold,
                    "zones": list(d.zones),
                }
                for d in self.domains.values()
            ],
            "zones": [asdict(z) for z in self.zones.values()],
            "zonelet_regions": [
                {
                    "chunk": r.chunk,
                    "owned_pages": len(r.owners),
                    "owners": {str(k): v for k, v in sorted(Counter(r.owners.values()).items())},
                }
                for r in self.regions.values()
            ],
            "occupancy": [
                {"chunk": int(c), "kind": KIND_NAMES[int(self.kind[c])], "used": int(self.used[c])}
                for c in occupied
            ],
            "stats": dict(self.stats),
            "pages": self.page_breakdown(),
        }


def metadata_size(state: PageAllocator) -> Tuple[int, int]:
    return state.metadata_size()
