from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from core.allocator import FREE, ZONE, ZONELET, AllocatorParams, AllocatorState, metadata_size
from core.baselines import make_mode
from core.dram import KIB, MIB, ChunkMap, TransformConfig, build_geometry, build_grt
from core.errors import (
    ConfigError,
    InUseError,
    OrderError,
    OutOfMemoryError,
    OwnershipError,
    UnknownDomainError,
)
from core.verifier import audit_state, check_isolation


@pytest.fixture(scope="module")
def default_chunks(default_geo, default_grt):
    """Chunk map of the default geometry, shared so each state skips the rebuild."""
    return ChunkMap(default_geo, default_grt, 16)


@pytest.fixture
def default_state(default_geo, default_grt, default_chunks):
    return AllocatorState(default_geo, default_grt, AllocatorParams(), default_chunks)


def _fill(state, domain, n):
    return [state.alloc_pages(domain, 0)[0] for _ in range(n)]


# -- parameters -------------------------------------------------------------


@pytest.mark.parametrize(
    "params, field",
    [
        (AllocatorParams(chunk_rows=2, n_guard=2), "allocator.chunk_rows"),
        (AllocatorParams(mode="tcmalloc"), "allocator.mode"),
        (AllocatorParams(max_order=12), "allocator.max_order"),
        (AllocatorParams(n_guard=-1), "allocator.n_guard"),
        (AllocatorParams(mode="zebram"), "allocator.all_zonelets"),
        (AllocatorParams(mode="siloz"), "allocator.n_guard"),
        (AllocatorParams(all_zonelets=True, zonelets_enabled=False), "allocator.zonelets_enabled"),
    ],
)
def test_invalid_params(params, field):
    with pytest.raises(ConfigError) as exc:
        params.validate()
    assert exc.value.field == field


def test_complex_guards_need_group_sized_chunks(complex_grt):
    with pytest.raises(ConfigError):
        AllocatorParams(chunk_rows=16).validate(complex_grt)
    assert AllocatorParams(chunk_rows=8).validate(complex_grt).chunk_rows == 8


def test_chunk_rows_must_divide_the_row_space(make_state):
    with pytest.raises(ConfigError):
        make_state(chunk_rows=15)


# -- chunk pool and domains -------------------------------------------------


def test_fresh_default_state(default_state):
    """All 8192 chunks of the default geometry start free."""
    assert default_state.free_chunks == 8192
    assert default_state.zonelets_per_chunk == 5


def test_domains_are_numbered_in_order(make_state):
    state = make_state()
    assert [state.create_domain() for _ in range(3)] == [0, 1, 2]


def test_unknown_domain(make_state):
    state = make_state()
    with pytest.raises(UnknownDomainError):
        state.alloc_pages(7, 0)


def test_destroy_domain_with_live_pages(make_state):
    state = make_state()
    d = state.create_domain()
    state.alloc_pages(d, 0)
    with pytest.raises(InUseError):
        state.destroy_domain(d)


def test_order_out_of_range(make_state):
    state = make_state()
    d = state.create_domain()
    with pytest.raises(OrderError):
        state.alloc_pages(d, 20)


def test_block_larger_than_a_chunk(make_state):
    """128 pages cannot fit a 64-page chunk; the reserved chunk goes back."""
    state = make_state(zonelets_enabled=False)
    d = state.create_domain()
    with pytest.raises(OrderError):
        state.alloc_pages(d, 7)
    assert state.free_chunks == 16
    assert state.domains[d].zones == []


def test_domain_exhaustion(make_state):
    """One zone per domain: the seventeenth domain finds no chunk."""
    state = make_state(zonelets_enabled=False)
    domains = [state.create_domain() for _ in range(17)]
    placed = [state.alloc_pages(d, 0)[0] for d in domains[:16]]
    assert state.free_chunks == 0
    with pytest.raises(OutOfMemoryError):
        state.alloc_pages(domains[16], 0)
    for d, pfn in zip(domains, placed):
        state.free_pages(d, pfn, 0)
        state.destroy_domain(d)
    assert state.free_chunks == 16


# -- zonelets ----------------------------------------------------------------


def test_small_domain_lands_in_a_zonelet(make_state):
    state = make_state()
    d = state.create_domain()
    pfns = _fill(state, d, 5)
    assert state.kind[0] == ZONELET
    # data rows sit at offsets 2, 5, 8, ... of the striped chunk
    assert pfns == [8, 9, 10, 11, 20]
    assert state.domains[d].zonelet_pages == 5


def test_striped_layout(make_state):
    state = make_state()
    chunk = state.provision_zonelet_region()
    assert state.zonelets_per_chunk == 5
    assert int(state.data_mask(chunk).sum()) == 20
    assert make_state(chunk_rows=32).zonelets_per_chunk == 10


def test_regions_fill_in_provisioning_order(make_state):
    state = make_state(switch_threshold_bytes=MIB)
    d = state.create_domain()
    pfns = _fill(state, d, 21)
    assert state.kind[0] == ZONELET and state.kind[1] == ZONELET
    for pfn in pfns[:20]:
        state.free_pages(d, pfn, 0)
    assert state.kind[0] == FREE
    assert 0 not in state.regions
    nxt = state.alloc_pages(d, 0)[0]
    assert state.chunks.locate(nxt)[0] == 1


def test_alloc_from_zonelet_above_threshold(make_state):
    state = make_state()
    d = state.create_domain()
    _fill(state, d, 17)
    assert state.domains[d].above_threshold
    pfns = state.alloc_from_zonelet(d, 2)
    assert all(state.kind[state.chunks.locate(p)[0]] == ZONELET for p in pfns)
    assert state.alloc_from_zonelet(d, 0) == []


def test_alloc_from_zonelet_needs_zonelets(make_state):
    state = make_state(zonelets_enabled=False)
    d = state.create_domain()
    with pytest.raises(ConfigError):
        state.alloc_from_zonelet(d, 1)


def test_alloc_from_zonelet_rolls_back_on_exhaustion(make_state):
    """Sixteen striped chunks hold 320 pages; asking for 321 leaves nothing behind."""
    state = make_state()
    d = state.create_domain()
    with pytest.raises(OutOfMemoryError):
        state.alloc_from_zonelet(d, 321)
    assert state.free_chunks == 16
    assert state.domains[d].footprint_pages == 0
    assert list(state.ownership()) == []


def test_every_chunk_striped(default_state):
    """Striping all 8192 chunks leaves 5 of 16 rows usable."""
    for _ in range(8192):
        default_state.provision_zonelet_region()
    pages = default_state.page_breakdown()
    total = default_state.geo.total_pages
    assert pages["free"] == 10_485_760
    assert pages["allocated"] == 0 and pages["stranded"] == 0
    assert Fraction(pages["loss"], total) == Fraction(11, 16)
    with pytest.raises(OutOfMemoryError):
        default_state.provision_zonelet_region()


# -- zones -------------------------------------------------------------------


def test_threshold_switch_small(make_state):
    """The 17th page of a domain goes to a guard-fronted zone, away from the zonelet chunk."""
    state = make_state()
    d = state.create_domain()
    pfns = _fill(state, d, 17)
    assert all(state.chunks.locate(p)[0] == 0 for p in pfns[:16])
    assert state.kind[2] == ZONE
    assert pfns[16] == (2 * 16 + 2) * 4


def test_threshold_switch_default(default_state):
    """
    16 MiB in 4 KiB steps: 12 MiB in zonelets (chunks 0-2), then a zone
    at chunk 4 whose rows 64 and 65 stay empty as guards.
    """
    state = default_state
    d = state.create_domain()
    pfns = _fill(state, d, 4096)
    rows = np.array(pfns) // 256
    assert (rows[:3072] < 48).all()
    assert state.domains[d].zonelet_pages == 3072
    assert list(state.kind[:5]) == [ZONELET, ZONELET, ZONELET, FREE, ZONE]
    assert pfns[3072] == 66 * 256
    assert ((rows[3072:] >= 66) & (rows[3072:] < 80)).all()


def test_threshold_latch_survives_frees(make_state):
    state = make_state()
    d = state.create_domain()
    pfns = _fill(state, d, 16)
    for pfn in pfns:
        state.free_pages(d, pfn, 0)
    assert state.domains[d].above_threshold
    pfn = state.alloc_pages(d, 0)[0]
    assert state.kind[state.chunks.locate(pfn)[0]] == ZONE


def test_stranding_in_a_fresh_zone(default_state):
    """One global row in a 16-row zone: 2 rows lost, 13 rows stranded."""
    state = AllocatorState(
        default_state.geo, default_state.grt, AllocatorParams(zonelets_enabled=False), default_state.chunks
    )
    d = state.create_domain()
    assert state.alloc_pages(d, 8)[0] == 512
    pages = state.page_breakdown()
    assert pages["allocated"] == 256
    assert pages["loss"] == 512
    assert pages["stranded"] == 3328
    assert Fraction(pages["stranded"], 4096 - pages["loss"]) == Fraction(13, 14)


def test_select_frame(make_state):
    state = make_state(zonelets_enabled=False)
    d = state.create_domain()
    state.alloc_pages(d, 0)
    with pytest.raises(IndexError):
        state.select_frame(0, 0)
    assert state.select_frame(0, 8) == 8
    assert state.select_frame(3, 9) == (48 + 2) * 4 + 1
    with pytest.raises(IndexError):
        state.select_frame(16, 0)


def test_zone_expands_into_the_next_chunk(make_state):
    state = make_state(zonelets_enabled=False)
    d = state.create_domain()
    pfns = _fill(state, d, 57)
    zone = state.zones[state.domains[d].zones[0]]
    assert (zone.start_chunk, zone.chunk_count) == (0, 2)
    assert pfns[56] == 64
    assert int(state.data_mask(0).sum()) == 56
    assert int(state.data_mask(1).sum()) == 64
    assert state.stats["expansions"] == 1


def test_no_expansion_into_an_occupied_chunk(make_state):
    state = make_state(zonelets_enabled=False)
    d = state.create_domain()
    state.alloc_pages(d, 0)
    assert state.provision_zonelet_region() == 1
    assert state.try_expand_zone(d) is None


def test_reclaim_last_chunk(make_state):
    state = make_state(zonelets_enabled=False)
    d = state.create_domain()
    pfns = _fill(state, d, 57)
    state.free_pages(d, pfns[56], 0)
    zone = state.zones[state.domains[d].zones[0]]
    assert zone.chunk_count == 1
    assert state.kind[1] == FREE
    assert state.stats["reclaim_last"] == 1


def test_shrink_front(make_state):
    """Emptying the first chunk hands the guard role to the next one."""
    state = make_state(zonelets_enabled=False)
    d = state.create_domain()
    pfns = _fill(state, d, 65)
    for pfn in pfns[56:64]:
        state.free_pages(d, pfn, 0)
    for pfn in pfns[:56]:
        state.free_pages(d, pfn, 0)
    zone = state.zones[state.domains[d].zones[0]]
    assert (zone.start_chunk, zone.chunk_count) == (1, 1)
    assert state.kind[0] == FREE
    assert audit_state(state) == []


def test_split_around_an_empty_middle_chunk(make_state):
    state = make_state(zonelets_enabled=False)
    d = state.create_domain()
    pfns = _fill(state, d, 129)
    for pfn in pfns[120:128]:
        state.free_pages(d, pfn, 0)
    for pfn in pfns[56:120]:
        state.free_pages(d, pfn, 0)
    runs = sorted((z.start_chunk, z.chunk_count) for z in state.zones.values())
    assert runs == [(0, 1), (2, 1)]
    assert state.kind[1] == FREE
    assert len(state.domains[d].zones) == 2
    assert state.stats["split"] == 1
    assert audit_state(state) == []


def test_occupied_zone_does_not_shrink(make_state):
    state = make_state(zonelets_enabled=False)
    d = state.create_domain()
    _fill(state, d, 57)
    assert state.shrink_or_split(state.domains[d].zones[0]) == []


def test_shrink_disabled_keeps_chunks_until_empty(make_state):
    state = make_state(zonelets_enabled=False, shrink_enabled=False)
    d = state.create_domain()
    pfns = _fill(state, d, 57)
    state.free_pages(d, pfns[56], 0)
    assert state.zones[state.domains[d].zones[0]].chunk_count == 2
    for pfn in pfns[:56]:
        state.free_pages(d, pfn, 0)
    assert state.free_chunks == 16


# -- frees -------------------------------------------------------------------


@pytest.mark.parametrize("zonelets", [True, False])
def test_alloc_free_round_trip(make_state, zonelets):
    state = make_state(zonelets_enabled=zonelets)
    d = state.create_domain()
    pfns = state.alloc_pages(d, 2)
    assert pfns == list(range(pfns[0], pfns[0] + 4))
    assert state.free_pages(d, pfns[0], 2) == 4
    assert state.free_chunks == 16
    assert not state.occupancy.any()
    assert not state.used.any()
    assert state.regions == {} and state.zones == {}


def test_free_errors(make_state):
    state = make_state()
    a, b = state.create_domain(), state.create_domain()
    pfn = state.alloc_pages(a, 0)[0]
    with pytest.raises(OwnershipError):
        state.free_pages(b, pfn, 0)
    with pytest.raises(OwnershipError):
        state.free_pages(a, pfn + 1, 0)
    with pytest.raises(OwnershipError):
        state.free_pages(a, pfn, 1)
    state.free_pages(a, pfn, 0)
    with pytest.raises(OwnershipError):
        state.free_pages(a, pfn, 0)


# -- metadata ----------------------------------------------------------------


def test_default_metadata(default_state):
    """4 MiB of chunk bitvectors; everything static lands near 4.26 MiB."""
    static, dynamic = metadata_size(default_state)
    cm = default_state.chunks
    assert cm.n_chunks * cm.slots_per_chunk // 8 == 4 * MIB
    assert static == 4 * MIB + 262144 + 2 * 8192
    assert abs(static - 4.26 * MIB) / (4.26 * MIB) < 0.10
    assert dynamic == 0
    default_state.create_domain()
    assert default_state.metadata_size()[1] == 32


def test_minimal_geometry_metadata():
    geo = build_geometry({"rows_per_bank": 8, "global_row_bytes": 16 * KIB})
    grt = build_grt(geo, TransformConfig())
    state = AllocatorState(geo, grt, make_mode("aegis", geo, grt))
    static, _ = state.metadata_size()
    assert state.chunks.n_chunks == 1
    assert static < KIB


# -- properties --------------------------------------------------------------

OPS = st.lists(
    st.tuples(st.sampled_from(["alloc", "free"]), st.integers(0, 3), st.integers(0, 3)),
    max_size=60,
)


def _drive(state, ops, check):
    domains = [state.create_domain() for _ in range(4)]
    live = {d: [] for d in domains}
    for act, k, arg in ops:
        d = domains[k]
        if act == "alloc":
            try:
                live[d].append((state.alloc_pages(d, arg)[0], arg))
            except OutOfMemoryError:
                continue
        elif live[d]:
            pfn, order = live[d].pop(arg % len(live[d]))
            state.free_pages(d, pfn, order)
        check(state)
    return live


def _small(small_geo, small_grt, **overrides):
    params = AllocatorParams(switch_threshold_bytes=16 * small_geo.page_bytes, **overrides)
    return AllocatorState(small_geo, small_grt, params)


def _conserved(state):
    pages = state.page_breakdown()
    assert pages["allocated"] + pages["loss"] + pages["stranded"] + pages["free"] == state.geo.total_pages
    assert pages["allocated"] == state.live_pages
    assert audit_state(state) == []


@given(OPS, st.booleans())
@settings(max_examples=80, deadline=None)
def test_pages_are_conserved(small_geo, small_grt, ops, zonelets):
    _drive(_small(small_geo, small_grt, zonelets_enabled=zonelets), ops, _conserved)


@given(OPS)
@settings(max_examples=80, deadline=None)
def test_guard_rows_stay_empty(small_geo, small_grt, ops):
    def check(state):
        for c in np.flatnonzero(state.kind != FREE):
            assert not (state.occupancy[c] & ~state.data_mask(int(c))).any()

    _drive(_small(small_geo, small_grt), ops, check)


@given(OPS)
@settings(max_examples=80, deadline=None)
def test_domains_stay_isolated(small_geo, small_grt, ops):
    def check(state):
        assert check_isolation(state, state.grt).violation_count == 0

    _drive(_small(small_geo, small_grt), ops, check)


@given(OPS)
@settings(max_examples=40, deadline=None)
def test_domains_stay_isolated_complex(medium_geo, complex_grt, ops):
    state = AllocatorState(
        medium_geo, complex_grt, AllocatorParams(chunk_rows=8, switch_threshold_bytes=16 * medium_geo.page_bytes)
    )

    def check(s):
        assert check_isolation(s, s.grt).violation_count == 0
        assert audit_state(s) == []

    _drive(state, ops, check)


@given(OPS)
@settings(max_examples=60, deadline=None)
def test_everything_returns_to_the_pool(small_geo, small_grt, ops):
    state = _small(small_geo, small_grt)
    live = _drive(state, ops, lambda s: None)
    for d, blocks in live.items():
        for pfn, order in blocks:
            state.free_pages(d, pfn, order)
        state.destroy_domain(d)
    assert state.free_chunks == state.chunks.n_chunks
    assert not state.occupancy.any()
    assert state.domains == {}
