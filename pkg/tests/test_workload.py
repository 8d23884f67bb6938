import io
import logging
from collections import Counter
from dataclasses import replace

import pytest

from core.allocator import AllocatorState
from core.baselines import BuddyState, create_allocator, make_mode
from core.dram import KIB, MIB
from core.errors import ConfigError, TraceError
from core.workload import (
    APP_CLASSES,
    MixSpec,
    TraceEvent,
    generate_mix,
    load_mix,
    mix_footprints,
    parse_trace,
    read_trace,
    replay,
    serialize_trace,
    validate_trace,
    write_trace,
)


def ev(t, dom, act, order=0, n=1):
    return TraceEvent(t, dom, act, order, n)


@pytest.fixture
def aegis(small_geo, small_grt):
    """Aegis on the small geometry with a 64 KiB switch threshold."""
    params = replace(make_mode("aegis", small_geo, small_grt), switch_threshold_bytes=64 * KIB)
    return AllocatorState(small_geo, small_grt, params)


@pytest.fixture
def zebram(small_geo, small_grt):
    return AllocatorState(small_geo, small_grt, make_mode("zebram", small_geo, small_grt))


TWO_DOMAINS = [
    ev(0, "a", "spawn"),
    ev(1, "a", "alloc", n=30),
    ev(2, "b", "spawn"),
    ev(3, "b", "alloc", order=3, n=2),
    ev(4, "a", "free", n=30),
    ev(5, "b", "free", order=3, n=2),
    ev(6, "a", "exit"),
    ev(7, "b", "exit"),
]

NEIGHBORS = [
    ev(0, "a", "spawn"),
    ev(1, "b", "spawn"),
    ev(2, "a", "alloc", order=2),
    ev(3, "b", "alloc", order=2),
]


# -- mix generation ----------------------------------------------------------


def test_single_app_ramps_up_and_down():
    """A 16 MiB app without churn allocates 4096 pages and frees them all."""
    spec = MixSpec(apps={"x": 1}, classes={"x": (16, 16)}, churn_cycles=0, restart=False)
    events = generate_mix(spec)
    acts = Counter(e.act for e in events)
    assert acts == {"spawn": 1, "alloc": 16, "free": 1, "exit": 1}
    assert sum(e.n for e in events if e.act == "alloc") == 4096
    assert sum(e.n for e in events if e.act == "free") == 4096
    assert [e.t for e in events] == list(range(len(events)))


def test_churn_keeps_alloc_and_free_balanced():
    spec = MixSpec(apps={"x": 1}, classes={"x": (8, 8)}, churn_cycles=3, restart=False, seed=4)
    events = validate_trace(generate_mix(spec))
    allocs = sum(e.n for e in events if e.act == "alloc")
    frees = sum(e.n for e in events if e.act == "free")
    assert allocs == frees > 2048


def test_restarts_until_the_duration_runs_out():
    spec = MixSpec(apps={"x": 1}, classes={"x": (1, 1)}, duration=50)
    events = validate_trace(generate_mix(spec))
    acts = Counter(e.act for e in events)
    assert acts["spawn"] > 1
    assert acts["spawn"] == acts["exit"]


def test_page_tables_are_separate_domains():
    """A 100 MiB app gets 50 one-page page-table domains."""
    spec = MixSpec(apps={"x": 1}, classes={"x": (100, 100)}, page_tables=True, churn_cycles=0, restart=False)
    events = validate_trace(generate_mix(spec))
    pt_spawns = [e for e in events if e.act == "spawn" and e.dom.startswith("pt/x/0/")]
    assert len(pt_spawns) == 50
    assert all(e.n == 1 for e in events if e.dom.startswith("pt/") and e.act == "alloc")


def test_background_footprints_follow_the_mean():
    footprints = mix_footprints(MixSpec(background=2000, seed=3))
    mean_mib = sum(footprints.values()) / len(footprints) / 256
    assert mean_mib == pytest.approx(4.9, rel=0.10)
    assert min(footprints.values()) >= 1


def test_generation_is_deterministic():
    spec = MixSpec(apps={"spec-s": 2}, background=5, duration=3000, seed=11)
    assert serialize_trace(generate_mix(spec)) == serialize_trace(generate_mix(spec))
    other = replace(spec, seed=12)
    assert serialize_trace(generate_mix(spec)) != serialize_trace(generate_mix(other))


def test_oversubscribed_mix_warns(caplog):
    spec = MixSpec(apps={"gap-kron": 20}, duration=100, restart=False)
    with caplog.at_level(logging.WARNING, logger="core.workload"):
        events = generate_mix(spec)
    assert "more than" in caplog.text
    validate_trace(events)


def test_mix_spec_from_dict_merges_classes():
    spec = MixSpec.from_dict({"apps": {"mine": 2}, "classes": {"mine": [5, 10]}})
    assert spec.classes["mine"] == (5, 10)
    assert spec.classes["spec-s"] == APP_CLASSES["spec-s"]


@pytest.mark.parametrize(
    "data, field",
    [
        ({"bogus": 1}, "workload.spec.bogus"),
        ({"apps": {"nope": 1}}, "workload.spec.apps.nope"),
        ({"classes": {"odd": [1]}}, "workload.spec.classes.odd"),
        ({"classes": {"odd": [5, 1]}}, "workload.spec.classes.odd"),
        ({"churn_min": 0.5, "churn_max": 0.1}, "workload.spec.churn_min"),
    ],
)
def test_mix_spec_errors(data, field):
    with pytest.raises(ConfigError) as exc:
        MixSpec.from_dict(data)
    assert exc.value.field == field


def test_load_mix(tmp_path):
    with pytest.raises(ConfigError):
        load_mix(tmp_path / "missing.json")
    path = tmp_path / "mix.json"
    path.write_text('{"apps": {"spec-m": 1}, "seed": 3}')
    assert load_mix(path).apps == {"spec-m": 1}


# -- trace files ---------------------------------------------------------------


def test_trace_round_trip(tmp_path):
    assert parse_trace(io.StringIO(serialize_trace(TWO_DOMAINS))) == TWO_DOMAINS
    path = write_trace(TWO_DOMAINS, tmp_path / "t" / "trace.jsonl")
    assert read_trace(path) == TWO_DOMAINS


def test_empty_trace():
    assert parse_trace([]) == []
    assert parse_trace(["\n", "   \n"]) == []


@pytest.mark.parametrize(
    "lines, line",
    [
        (['{"t": 0, "dom": "a", "act": "alloc"}'], 1),
        (['{"t": 0, "dom": "a", "act": "spawn"}', "", "{oops"], 3),
        (['{"t": 5, "dom": "a", "act": "spawn"}', '{"t": 4, "dom": "b", "act": "spawn"}'], 2),
        (['{"t": 0, "dom": "a", "act": "spawn"}', '{"t": 1, "dom": "a", "act": "free"}'], 2),
        (['{"t": 0, "dom": "a", "act": "spawn"}', '{"t": 1, "dom": "a", "act": "spawn"}'], 2),
        (['{"t": 0, "dom": "a", "act": "spawn", "colour": 1}'], 1),
        (['{"t": 0, "dom": "a", "act": "dance"}'], 1),
        (['{"t": 0, "dom": "a", "act": "spawn"}', '{"t": 1, "dom": "a", "act": "alloc", "order": 12}'], 2),
        (['{"t": 0, "dom": "a", "act": "spawn"}', '{"t": 1, "dom": "a", "act": "alloc"}',
          '{"t": 2, "dom": "a", "act": "exit"}'], 3),
        (['[1, 2]'], 1),
    ],
)
def test_trace_errors_carry_line_numbers(lines, line):
    with pytest.raises(TraceError) as exc:
        parse_trace(lines)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}: ")


def test_missing_trace_file(tmp_path):
    with pytest.raises(TraceError):
        read_trace(tmp_path / "nothing.jsonl")


# -- replay --------------------------------------------------------------------


def test_replay_returns_to_empty(aegis):
    result = replay(TWO_DOMAINS, aegis, sample_interval=2)
    assert [s.tick for s in result.timeline] == [0, 2, 4, 6, 8]
    assert result.timeline[0].allocated == 0
    assert result.timeline[-1].allocated == 0
    assert max(s.allocated for s in result.timeline) == 46
    assert result.supported and result.secure
    assert result.events == 8
    assert result.domains == {"a": 0, "b": 1}
    assert aegis.free_chunks == 16


def test_replay_checkpoints(aegis):
    result = replay(TWO_DOMAINS, aegis, sample_interval=100, verify_every=2)
    assert [r.tick for r in result.checks] == [1, 3, 5, 7, 8]
    assert result.violations == 0 and result.findings == []


def test_replay_sample_interval_must_be_positive(aegis):
    with pytest.raises(ConfigError):
        replay(TWO_DOMAINS, aegis, sample_interval=0)


def test_out_of_memory_is_absorbed(zebram):
    """zebram fits 320 pages here; the 80 missing ones are skipped and their frees ignored."""
    trace = [ev(0, "a", "spawn"), ev(1, "a", "alloc", n=400), ev(2, "a", "free", n=400), ev(3, "a", "exit")]
    result = replay(trace, zebram)
    assert not result.supported
    assert result.oom_events == 80
    assert result.oom_domains == ["a"]
    assert result.secure
    assert zebram.free_chunks == 16


def test_same_trace_fits_aegis(aegis):
    trace = [ev(0, "a", "spawn"), ev(1, "a", "alloc", n=400), ev(2, "a", "free", n=400), ev(3, "a", "exit")]
    result = replay(trace, aegis, sample_interval=1)
    assert result.supported
    assert result.timeline[2].allocated == 400


def test_buddy_trace_is_flagged(small_geo, small_grt, aegis):
    buddy = BuddyState(small_geo, small_grt, make_mode("buddy", small_geo))
    assert replay(NEIGHBORS, buddy).violations > 0
    assert replay(NEIGHBORS, aegis).secure


def test_page_tables_charged_to_the_app(medium_geo, medium_grt):
    siloz = create_allocator(medium_geo, medium_grt, make_mode("siloz", medium_geo, medium_grt))
    trace = [
        ev(0, "x/0", "spawn"),
        ev(1, "pt/x/0/0", "spawn"),
        ev(2, "pt/x/0/0", "alloc"),
        ev(3, "x/0", "alloc", n=10),
        ev(4, "x/0", "free", n=10),
        ev(5, "x/0", "exit"),
        ev(6, "pt/x/0/0", "free"),
        ev(7, "pt/x/0/0", "exit"),
    ]
    result = replay(trace, siloz, sample_interval=1, subarray_rows=512)
    at = {s.tick: s for s in result.timeline}
    assert (at[3].pt_pages, at[3].pt_loss) == (1, 8)
    assert at[3].allocated == 1
    assert at[8].pt_pages == 0
    assert "pt/x/0/0" not in result.domains
    assert result.secure


def test_replay_is_deterministic(aegis, small_geo, small_grt):
    spec = MixSpec(apps={"tiny": 2}, classes={"tiny": (1, 1)}, background=4, background_mean_mib=0.1,
                   duration=400, seed=2)
    events = generate_mix(spec, small_geo)
    first = replay(events, aegis, sample_interval=25)
    again = AllocatorState(small_geo, small_grt, aegis.params)
    second = replay(events, again, sample_interval=25)
    assert [s.row() for s in first.timeline] == [s.row() for s in second.timeline]


@pytest.mark.parametrize("mode", ["aegis", "zebram", "siloz"])
@pytest.mark.parametrize("addressing", ["simple", "complex"])
def test_isolating_modes_survive_a_mix(mode, addressing, medium_geo, medium_grt, complex_grt):
    grt = complex_grt if addressing == "complex" else medium_grt
    params = make_mode(mode, medium_geo, grt)
    if mode == "aegis":
        params = replace(params, switch_threshold_bytes=MIB)
    spec = MixSpec(apps={"tiny": 2}, classes={"tiny": (2, 6)}, background=12, background_mean_mib=0.5,
                   duration=800, seed=5)
    events = generate_mix(spec, medium_geo)
    result = replay(
        events,
        create_allocator(medium_geo, grt, params),
        sample_interval=100,
        verify_every=200,
        subarray_rows=params.chunk_rows if mode == "siloz" else None,
    )
    assert result.violations == 0
    assert result.findings == []


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("mode", ["aegis", "zebram", "siloz"])
@pytest.mark.parametrize("addressing", ["simple", "complex"])
def test_isolation_holds_across_seeds(seed, mode, addressing, medium_geo, medium_grt, complex_grt):
    grt = complex_grt if addressing == "complex" else medium_grt
    params = make_mode(mode, medium_geo, grt)
    if mode == "aegis":
        params = replace(params, switch_threshold_bytes=MIB)
    spec = MixSpec(apps={"tiny": 2}, classes={"tiny": (2, 4)}, background=8, background_mean_mib=0.5,
                   duration=400, seed=seed)
    result = replay(
        generate_mix(spec, medium_geo),
        create_allocator(medium_geo, grt, params),
        sample_interval=100,
        verify_every=100,
        subarray_rows=params.chunk_rows if mode == "siloz" else None,
    )
    assert len(result.checks) > 1
    assert result.violations == 0
    assert result.findings == []


@pytest.mark.parametrize("addressing", ["simple", "complex"])
def test_buddy_interleaving_domains_is_caught(addressing, medium_geo, medium_grt, complex_grt):
    """Alternating 8-row blocks of two domains must leave them adjacent somewhere."""
    grt = complex_grt if addressing == "complex" else medium_grt
    trace = [ev(0, "a", "spawn"), ev(1, "b", "spawn")]
    for i in range(8):
        trace.append(ev(2 + i, "ab"[i % 2], "alloc", order=5))
    buddy = BuddyState(medium_geo, grt, make_mode("buddy", medium_geo))
    result = replay(trace, buddy, sample_interval=1, verify_every=1)
    assert result.violations >= 1
    assert not result.secure
