import logging
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Dict, List, Mapping, Optional, Set, Tuple

import numpy as np
import pandas as pd

from core.errors import ConfigError, TransformConfigError

logger = logging.getLogger(__name__)

KIB = 1024
MIB = 1024 * KIB
GIB = 1024 * MIB

RANK_PARITIES = ("even", "odd")
SIDES = ("A", "B")
SPACES: Tuple[Tuple[str, str], ...] = tuple((p, s) for p in RANK_PARITIES for s in SIDES)

# scrambling only permutes rows inside aligned groups of 8
GROUP_BITS = 3
GROUP_ROWS = 1 << GROUP_BITS
GRT_ENTRY_BYTES = 2


@dataclass(frozen=True)
class DramGeometry:
    row_bytes: int = 8192
    rows_per_bank: int = 131072
    banks: int = 128
    page_bytes: int = 4096
    ranks_per_dimm: int = 2
    global_row_bytes: int = MIB
    half_rows_per_row: int = 2

    @property
    def pages_per_global_row(self) -> int:
        return self.global_row_bytes // self.page_bytes

    @property
    def total_global_rows(self) -> int:
        return self.rows_per_bank

    @property
    def total_bytes(self) -> int:
        return self.total_global_rows * self.global_row_bytes

    @property
    def total_pages(self) -> int:
        return self.total_global_rows * self.pages_per_global_row

    @property
    def row_bits(self) -> int:
        return self.rows_per_bank.bit_length() - 1

    def to_dict(self) -> Dict:
        return {
            "row_bytes": self.row_bytes,
            "rows_per_bank": self.rows_per_bank,
            "banks": self.banks,
            "page_bytes": self.page_bytes,
            "ranks_per_dimm": self.ranks_per_dimm,
            "global_row_bytes": self.global_row_bytes,
        }


_GEOMETRY_FIELDS = (
    "row_bytes",
    "rows_per_bank",
    "banks",
    "page_bytes",
    "ranks_per_dimm",
    "global_row_bytes",
    "half_rows_per_row",
)


def _positive_int(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if value <= 0:
        raise ConfigError(name, f"must be positive, got {value}")
    return value


def build_geometry(config: Optional[Mapping] = None) -> DramGeometry:
    """
    Build a DramGeometry from key-value parameters.
    Missing keys take the defaults (8KB rows, 128K rows per bank, 128 banks,
    4KB pages). global_row_bytes defaults to row_bytes x banks.
    """
    config = dict(config or {})
    unknown = sorted(set(config) - set(_GEOMETRY_FIELDS))
    if unknown:
        raise ConfigError(f"dram.{unknown[0]}", "unknown geometry field")

    defaults = DramGeometry()
    values = {}
    for name in _GEOMETRY_FIELDS:
        if name == "global_row_bytes":
            continue
        values[name] = _positive_int(f"dram.{name}", config.get(name, getattr(defaults, name)))

    if values["half_rows_per_row"] != 2:
        raise ConfigError("dram.half_rows_per_row", "each DRAM row is managed as exactly 2 half-rows")

    rows = values["rows_per_bank"]
    if rows & (rows - 1):
        raise ConfigError("dram.rows_per_bank", f"must be a power of two, got {rows}")

    global_row_bytes = _positive_int(
        "dram.global_row_bytes",
        config.get("global_row_bytes", values["row_bytes"] * values["banks"]),
    )
    if global_row_bytes % values["page_bytes"]:
        raise ConfigError(
            "dram.global_row_bytes",
            f"{global_row_bytes} is not a multiple of page_bytes {values['page_bytes']}",
        )

    return DramGeometry(global_row_bytes=global_row_bytes, **values)


def page_to_global_row(pfn: int, geo: DramGeometry) -> int:
    if not 0 <= pfn < geo.total_pages:
        raise IndexError(f"pfn {pfn} outside [0, {geo.total_pages})")
    return pfn // geo.pages_per_global_row


# ---------------------------------------------------------------------------
# In-DRAM row address transformations


def _matrix_apply(matrix: Tuple[Tuple[int, ...], ...], value: int) -> int:
    out = 0
    for j, row in enumerate(matrix):
        bit = 0
        for i, coeff in enumerate(row):
            bit ^= coeff & (value >> i) & 1
        out |= bit << j
    return out


@lru_cache(maxsize=None)
def _scramble_tables(matrix: Tuple[Tuple[int, ...], ...]) -> Tuple[np.ndarray, np.ndarray]:
    forward = np.array([_matrix_apply(matrix, v) for v in range(GROUP_ROWS)], dtype=np.int64)
    backward = np.empty_like(forward)
    backward[forward] = np.arange(GROUP_ROWS, dtype=np.int64)
    return forward, backward


def _swap_bits(x, a: int, b: int):
    d = ((x >> a) ^ (x >> b)) & 1
    return x ^ ((d << a) | (d << b))


def _gf2_invertible(matrix) -> bool:
    rows = [sum((bit & 1) << i for i, bit in enumerate(r)) for r in matrix]
    rank = 0
    for col in range(GROUP_BITS):
        pivot = next((k for k in range(rank, len(rows)) if (rows[k] >> col) & 1), None)
        if pivot is None:
            continue
        rows[rank], rows[pivot] = rows[pivot], rows[rank]
        for k in range(len(rows)):
            if k != rank and (rows[k] >> col) & 1:
                rows[k] ^= rows[rank]
        rank += 1
    return rank == GROUP_BITS


@dataclass(frozen=True)
class TransformConfig:
    """
    Row-ID transformations applied inside the DIMM.
      - scramble: 3x3 binary matrix over row-ID bits [2:0] (row j lists the
        input bits XOR-ed into output bit j) plus optional (low, high) taps
        that XOR a higher bit into a low bit.
      - mirror_pairs: bit pairs swapped on odd-numbered ranks.
      - inversion_mask: bits inverted on the B side half-rows.
    In simple mode every transformation is the identity.
    """

    mode: str = "simple"
    scramble_matrix: Tuple[Tuple[int, int, int], ...] = ((1, 1, 0), (0, 1, 1), (0, 0, 1))
    scramble_taps: Tuple[Tuple[int, int], ...] = ()
    mirror_pairs: Tuple[Tuple[int, int], ...] = ((3, 4), (5, 6), (7, 8))
    inversion_mask: int = 1 << 11

    @property
    def complex(self) -> bool:
        return self.mode == "complex"

    def scramble(self, rows):
        if not self.complex:
            return rows
        forward, _ = _scramble_tables(self.scramble_matrix)
        low = forward[rows & (GROUP_ROWS - 1)]
        for lo, hi in self.scramble_taps:
            low = low ^ (((rows >> hi) & 1) << lo)
        return (rows & ~(GROUP_ROWS - 1)) | low

    def unscramble(self, rows):
        if not self.complex:
            return rows
        _, backward = _scramble_tables(self.scramble_matrix)
        low = rows & (GROUP_ROWS - 1)
        for lo, hi in self.scramble_taps:
            low = low ^ (((rows >> hi) & 1) << lo)
        return (rows & ~(GROUP_ROWS - 1)) | backward[low]

    def mirror(self, rows):
        if not self.complex:
            return rows
        for a, b in self.mirror_pairs:
            rows = _swap_bits(rows, a, b)
        return rows

    def invert(self, rows):
        if not self.complex:
            return rows
        return rows ^ self.inversion_mask

    def to_dict(self) -> Dict:
        return {
            "mode": self.mode,
            "scramble": [list(r) for r in self.scramble_matrix],
            "scramble_taps": [list(t) for t in self.scramble_taps],
            "mirror_pairs": [list(p) for p in self.mirror_pairs],
            "inversion_mask": self.inversion_mask,
        }


def validate_transforms(transforms: TransformConfig, geo: DramGeometry) -> TransformConfig:
    if transforms.mode not in ("simple", "complex"):
        raise TransformConfigError("dram.mode", f"expected simple|complex, got {transforms.mode!r}")
    if not transforms.complex:
        return transforms

    bits = geo.row_bits
    matrix = transforms.scramble_matrix
    if len(matrix) != GROUP_BITS or any(len(r) != GROUP_BITS for r in matrix):
        raise TransformConfigError("dram.scramble", "expected a 3x3 binary matrix")
    if any(v not in (0, 1) for r in matrix for v in r):
        raise TransformConfigError("dram.scramble", "matrix entries must be 0 or 1")
    if not _gf2_invertible(matrix):
        raise TransformConfigError("dram.scramble", "matrix is not invertible over GF(2)")

    for lo, hi in transforms.scramble_taps:
        if not 0 <= lo < GROUP_BITS or not GROUP_BITS <= hi < bits:
            raise TransformConfigError(
                "dram.scramble_taps", f"tap ({lo}, {hi}) must XOR a bit in [3:{bits - 1}] into bits [2:0]"
            )

    seen: Set[int] = set()
    for pair in transforms.mirror_pairs:
        if len(pair) != 2 or pair[0] == pair[1]:
            raise TransformConfigError("dram.mirror_pairs", f"invalid pair {pair!r}")
        for b in pair:
            if not GROUP_BITS <= b < bits:
                raise TransformConfigError(
                    "dram.mirror_pairs", f"bit {b} outside row-ID bits [{GROUP_BITS}:{bits - 1}]"
                )
            if b in seen:
                raise TransformConfigError("dram.mirror_pairs", f"bit {b} appears in two pairs")
            seen.add(b)

    mask = transforms.inversion_mask
    if mask < 0 or mask >> bits:
        raise TransformConfigError("dram.inversion_mask", f"mask {mask:#x} exceeds {bits} row-ID bits")
    if mask & (GROUP_ROWS - 1):
        raise TransformConfigError("dram.inversion_mask", "mask must not touch row-ID bits [2:0]")
    return transforms


def build_transforms(config: Optional[Mapping], geo: DramGeometry) -> TransformConfig:
    """Parse the transform keys of the "dram" config section."""
    config = dict(config or {})
    defaults = TransformConfig()
    try:
        mask = config.get("inversion_mask", defaults.inversion_mask)
        if isinstance(mask, (list, tuple)):
            mask = sum(1 << int(b) for b in mask)
        transforms = TransformConfig(
            mode=str(config.get("mode", defaults.mode)),
            scramble_matrix=tuple(tuple(int(v) for v in r) for r in config.get("scramble", defaults.scramble_matrix)),
            scramble_taps=tuple(tuple(int(v) for v in t) for t in config.get("scramble_taps", defaults.scramble_taps)),
            mirror_pairs=tuple(tuple(int(v) for v in p) for p in config.get("mirror_pairs", defaults.mirror_pairs)),
            inversion_mask=int(mask),
        )
    except (TypeError, ValueError) as e:
        raise TransformConfigError("dram", f"malformed transform description ({e})")
    return validate_transforms(transforms, geo)


def physical_rows(rows: np.ndarray, rank_parity: str, side: str, transforms: TransformConfig) -> np.ndarray:
    x = transforms.scramble(rows)
    if rank_parity == "odd":
        x = transforms.mirror(x)
    if side == "B":
        x = transforms.invert(x)
    return x


def row_ids_at(physical: np.ndarray, rank_parity: str, side: str, transforms: TransformConfig) -> np.ndarray:
    """Inverse of physical_rows: the row-ID stored at each physical row index."""
    x = physical
    if side == "B":
        x = transforms.invert(x)
    if rank_parity == "odd":
        x = transforms.mirror(x)
    return transforms.unscramble(x)


def physical_row(
    row_id: int,
    rank_parity: str,
    side: str,
    transforms: TransformConfig,
    geo: Optional[DramGeometry] = None,
) -> int:
    if rank_parity not in RANK_PARITIES or side not in SIDES:
        raise ValueError(f"unknown location ({rank_parity}, {side})")
    if row_id < 0 or (geo is not None and row_id >= geo.rows_per_bank):
        raise IndexError(f"row_id {row_id} out of range")
    return int(physical_rows(row_id, rank_parity, side, transforms))


# ---------------------------------------------------------------------------
# Global Row Table


@dataclass(frozen=True, eq=False)
class GlobalRowTable:
    """
    Logical global rows and the global row-IDs composing them.
      members[L]  : row-IDs of logical row L (short orbits repeat entries)
      physical[L] : physical row indices the logical row occupies
      inverse[r]  : logical row holding row-ID r
    """

    transforms: TransformConfig
    members: np.ndarray
    physical: np.ndarray
    inverse: np.ndarray
    widths: np.ndarray
    rows_per_logical: int
    short_orbits: int = 0

    @property
    def n_logical(self) -> int:
        return int(self.members.shape[0])

    @property
    def serialized_bytes(self) -> int:
        return int(self.members.size) * GRT_ENTRY_BYTES

    def to_records(self) -> np.ndarray:
        # low 3 bits of each member follow from the logical row's position
        return (self.members >> GROUP_BITS).astype(np.uint16)

    def logical_of(self, row_id: int) -> int:
        return int(self.inverse[row_id])

    def row_ids(self, logical: int) -> Tuple[int, ...]:
        return tuple(sorted({int(r) for r in self.members[logical]}))

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame(
            self.members,
            columns=[f"rowid{i}" for i in range(self.rows_per_logical)],
        )
        df.insert(0, "logical_index", np.arange(self.n_logical))
        return df


def build_grt(geo: DramGeometry, transforms: TransformConfig) -> GlobalRowTable:
    validate_transforms(transforms, geo)
    rows = np.arange(geo.total_global_rows, dtype=np.int64)

    if not transforms.complex:
        identity = rows.reshape(-1, 1)
        return GlobalRowTable(
            transforms=transforms,
            members=identity,
            physical=identity.copy(),
            inverse=rows.copy(),
            widths=np.ones(rows.size, dtype=np.int64),
            rows_per_logical=1,
        )

    if geo.row_bits < GROUP_BITS:
        raise ConfigError("dram.rows_per_bank", "complex addressing needs at least 8 rows per bank")
    if geo.row_bits - GROUP_BITS > 8 * GRT_ENTRY_BYTES:
        raise ConfigError("dram.rows_per_bank", "row-ID groups do not fit 2-byte GRT entries")

    # orbits are taken over physical row indices; mirror and inversion
    # leave bits [2:0] alone, so every orbit keeps one intra-group position
    m = transforms.mirror(rows)
    i = transforms.invert(rows)
    mi = transforms.mirror(i)
    im = transforms.invert(m)
    clash = mi != im
    if np.any(clash):
        bad = int(rows[np.argmax(clash)])
        raise TransformConfigError(
            "dram.mirror_pairs",
            f"mirroring and inversion do not commute; the orbit of row {bad} exceeds 4 members",
        )

    orbit = np.sort(np.stack([rows, m, i, mi], axis=1), axis=1)
    canonical = orbit[:, 0]
    blocks, block_of = np.unique(canonical >> GROUP_BITS, return_inverse=True)
    logical_of_phys = block_of.reshape(-1) * GROUP_ROWS + (rows & (GROUP_ROWS - 1))
    n_logical = blocks.size * GROUP_ROWS

    reps = rows[rows == canonical]
    physical = np.empty((n_logical, 4), dtype=np.int64)
    physical[logical_of_phys[reps]] = orbit[reps]

    members = transforms.unscramble(physical)
    widths = 1 + (np.diff(physical, axis=1) != 0).sum(axis=1)
    inverse = np.empty(rows.size, dtype=np.int64)
    inverse[transforms.unscramble(rows)] = logical_of_phys

    short = int((widths < 4).sum())
    if short:
        logger.warning(
            "GRT: %d of %d logical rows have fewer than 4 distinct row-IDs (mirror/inversion fixed points)",
            short,
            n_logical,
        )
    logger.info("GRT built: %d logical rows, %d bytes", n_logical, members.size * GRT_ENTRY_BYTES)
    return GlobalRowTable(
        transforms=transforms,
        members=members,
        physical=physical,
        inverse=inverse,
        widths=widths,
        rows_per_logical=4,
        short_orbits=short,
    )


@dataclass
class InvariantResult:
    name: str
    passed: bool
    counterexample: Optional[Dict] = None


@dataclass
class TransformReport:
    results: List[InvariantResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "invariants": [
                {"name": r.name, "passed": r.passed, "counterexample": r.counterexample} for r in self.results
            ],
        }


def verify_transform_invariants(
    grt: GlobalRowTable, transforms: TransformConfig, geo: DramGeometry
) -> TransformReport:
    """
    Exhaustively check the two addressing invariants:
      - closure: every physical row a logical row occupies holds, across the
        four (rank parity, side) locations, exactly the logical row's row-IDs
      - index consistency: the i-th row of a logical row sits at position i
        in each of its physical locations, for all 8 rows of the group
    """
    report = TransformReport()
    n = grt.n_logical
    all_rows = np.arange(geo.total_global_rows, dtype=np.int64)
    stored = np.stack([row_ids_at(all_rows, p, s, transforms) for p, s in SPACES], axis=1)

    expected = grt.members
    closure_cx = None
    for j in range(grt.physical.shape[1]):
        observed = stored[grt.physical[:, j]]
        fwd = (observed[:, :, None] == expected[:, None, :]).any(axis=2).all(axis=1)
        back = (expected[:, :, None] == observed[:, None, :]).any(axis=2).all(axis=1)
        bad = np.flatnonzero(~(fwd & back))
        if bad.size:
            L = int(bad[0])
            closure_cx = {
                "logical": L,
                "physical_row": int(grt.physical[L, j]),
                "observed": sorted({int(v) for v in observed[L]}),
                "expected": list(grt.row_ids(L)),
            }
            break
    report.results.append(InvariantResult("orbit_closure", closure_cx is None, closure_cx))

    index_cx = None
    position = np.arange(n) % GROUP_ROWS
    wrong_pos = np.flatnonzero(((grt.physical & (GROUP_ROWS - 1)) != position[:, None]).any(axis=1))
    wrong_group = np.empty(0, dtype=np.int64)
    if n % GROUP_ROWS == 0:
        groups = (grt.physical >> GROUP_BITS).reshape(-1, GROUP_ROWS, grt.physical.shape[1])
        wrong_group = np.flatnonzero((groups != groups[:, :1, :]).any(axis=(1, 2)))
    if wrong_pos.size:
        L = int(wrong_pos[0])
        index_cx = {"logical": L, "physical_rows": [int(v) for v in grt.physical[L]], "position": int(position[L])}
    elif wrong_group.size:
        b = int(wrong_group[0])
        index_cx = {"group": b, "physical_groups": groups[b].tolist()}
    report.results.append(InvariantResult("index_consistency", index_cx is None, index_cx))
    return report


# ---------------------------------------------------------------------------
# Reservation chunks over the logical row space


class ChunkMap:
    """
    Partition of the logical global rows into fixed-size chunks.

    Each chunk's page slots are numbered in ascending row-ID order
    (relative page index = slot_of_row x pages_per_row + page in row), so in
    simple addressing relative index k of chunk c is PFN c*chunk_rows*ppr + k.
    """

    def __init__(self, geo: DramGeometry, grt: GlobalRowTable, chunk_rows: int):
        if chunk_rows <= 0 or grt.n_logical % chunk_rows:
            raise ConfigError(
                "allocator.chunk_rows",
                f"{chunk_rows} does not divide {grt.n_logical} logical global rows",
            )
        self.geo = geo
        self.grt = grt
        self.chunk_rows = chunk_rows
        self.n_chunks = grt.n_logical // chunk_rows
        self.ppr = geo.pages_per_global_row

        width = chunk_rows * grt.rows_per_logical
        ordered = np.sort(grt.members.reshape(self.n_chunks, width), axis=1)
        keep = np.ones_like(ordered, dtype=bool)
        keep[:, 1:] = ordered[:, 1:] != ordered[:, :-1]
        self.row_count = keep.sum(axis=1)
        packed = np.take_along_axis(ordered, np.argsort(~keep, axis=1, kind="stable"), axis=1)
        valid = np.arange(width)[None, :] < self.row_count[:, None]
        packed[~valid] = -1
        self.rowids = packed
        self.width = width

        self.chunk_of_row = grt.inverse // chunk_rows
        self.slot_of_row = np.empty(geo.total_global_rows, dtype=np.int64)
        self.slot_of_row[packed[valid]] = np.nonzero(valid)[1]

        safe = np.where(valid, packed, 0)
        self.row_offset = np.where(
            valid, grt.inverse[safe] - np.arange(self.n_chunks)[:, None] * chunk_rows, -1
        )

        all_rows = np.arange(geo.total_global_rows, dtype=np.int64)
        self.phys: Dict[Tuple[str, str], np.ndarray] = {}
        self.owner: Dict[Tuple[str, str], np.ndarray] = {}
        for space in SPACES:
            self.phys[space] = np.where(valid, physical_rows(safe, *space, grt.transforms), -1)
            owner = np.empty(geo.total_global_rows, dtype=np.int64)
            owner[physical_rows(all_rows, *space, grt.transforms)] = self.chunk_of_row
            self.owner[space] = owner
        self._lower: Dict[Tuple[int, int], frozenset] = {}

    @property
    def slots_per_chunk(self) -> int:
        return self.width * self.ppr

    def capacity(self, chunk: int) -> int:
        return int(self.row_count[chunk]) * self.ppr

    def _check(self, chunk: int):
        if not 0 <= chunk < self.n_chunks:
            raise IndexError(f"chunk {chunk} outside [0, {self.n_chunks})")

    def select_frame(self, chunk: int, rel: int) -> int:
        self._check(chunk)
        if not 0 <= rel < self.capacity(chunk):
            raise IndexError(f"page {rel} outside chunk {chunk}")
        return int(self.rowids[chunk, rel // self.ppr]) * self.ppr + rel % self.ppr

    def locate(self, pfn: int) -> Tuple[int, int]:
        row = page_to_global_row(pfn, self.geo)
        return int(self.chunk_of_row[row]), int(self.slot_of_row[row]) * self.ppr + pfn % self.ppr

    def _adjacent(self, chunk: int, offsets) -> Set[int]:
        limit = self.geo.total_global_rows
        found: Set[int] = set()
        for space in SPACES:
            rows = self.phys[space][chunk]
            rows = rows[rows >= 0]
            for d in offsets:
                cand = rows + d
                cand = cand[(cand >= 0) & (cand < limit)]
                found.update(int(v) for v in np.unique(self.owner[space][cand]))
        found.discard(chunk)
        return found

    def neighbors(self, chunk: int, distance: int = 1) -> Set[int]:
        self._check(chunk)
        return self._adjacent(chunk, [d for k in range(1, distance + 1) for d in (-k, k)])

    def lower_neighbors(self, chunk: int, distance: int) -> frozenset:
        """Chunks owning rows up to `distance` below any row of `chunk`."""
        key = (chunk, distance)
        if key not in self._lower:
            self._check(chunk)
            self._lower[key] = frozenset(self._adjacent(chunk, range(-1, -distance - 1, -1)))
        return self._lower[key]

    @cached_property
    def _pair_codes(self) -> np.ndarray:
        n = self.n_chunks
        codes = []
        for space in SPACES:
            a = self.owner[space][:-1]
            b = self.owner[space][1:]
            cut = a != b
            codes.append(a[cut] * n + b[cut])
            codes.append(b[cut] * n + a[cut])
        return np.unique(np.concatenate(codes))

    @cached_property
    def neighbor_matrix(self) -> np.ndarray:
        """(n_chunks, max_neighbors) distance-1 neighbors, padded with -1."""
        codes = self._pair_codes
        first, second = codes // self.n_chunks, codes % self.n_chunks
        counts = np.bincount(first, minlength=self.n_chunks)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        matrix = np.full((self.n_chunks, max(int(counts.max(initial=0)), 1)), -1, dtype=np.int64)
        matrix[first, np.arange(codes.size) - starts[first]] = second
        return matrix

    def neighbor_histogram(self) -> Dict[int, int]:
        counts = np.bincount(self._pair_codes // self.n_chunks, minlength=self.n_chunks)
        values, freq = np.unique(counts, return_counts=True)
        return {int(v): int(f) for v, f in zip(values, freq)}


def chunk_neighbors(chunk_index: int, grt: GlobalRowTable, geo: DramGeometry, chunk_rows: int) -> Set[int]:
    return ChunkMap(geo, grt, chunk_rows).neighbors(chunk_index)
