import random
from fractions import Fraction

import numpy as np
import pytest

from hammersim.dram import ALL_ONES, Command, Geometry, Kind, TimingParams
from hammersim.engine import EccConfig, Engine, MitigationConfig, SimConfig, run
from hammersim.faults import PROFILES, VictimMap, VictimProfile
from hammersim.workloads import PatternSpec, expand_trace, generate_trace, hammer_every_row

from oracles import recount_flips

G = Geometry(banks=1, rows_per_bank=16, words_per_row=4)


def vmap(geom, *cells):
    return VictimMap(geom, *zip(*cells)) if cells else VictimMap.empty(geom)


def hammer(row, count, period=50, bank=0, geom=G):
    return generate_trace(PatternSpec("single_sided", bank, (row,), count, period), TimingParams(), geom)


def test_null_profile_no_flips():
    cfg = SimConfig(geometry=G, profile=PROFILES["NULL"])
    m, flips = Engine(cfg).run(hammer(5, 5000))
    assert m.flips_total == 0 and flips == []
    assert m.ecc_corrected == m.ecc_detected_uncorrectable == m.ecc_silent_corruption == 0


def test_single_victim_flips_on_tenth_act():
    cfg = SimConfig(geometry=G)
    m, flips = Engine(cfg, vmap(G, (0, 7, 1, 3, 10))).run(hammer(6, 20))
    assert m.flips_total == 1 and len(flips) == 1
    assert m.first_flip_time_ns == 9 * 50
    assert m.total_activations == 20 and m.commands == 60
    assert m.ecc_corrected == 1 and m.ecc_clean == 0


def test_full_counter_table_example():
    cfg = SimConfig(geometry=G, mitigation=MitigationConfig(kind="counter", threshold=5))
    m, _ = Engine(cfg, vmap(G, (0, 7, 1, 3, 10))).run(hammer(6, 20))
    assert m.flips_total == 0
    assert m.mitigation_extra_activations == 8
    assert m.total_activations == 28


def test_counter_default_threshold_from_profile():
    g = Geometry(banks=1, rows_per_bank=16, words_per_row=4)
    cfg = SimConfig(geometry=g, profile=VictimProfile("t", (0, 0, 0, 0), 50, 60),
                    mitigation=MitigationConfig(kind="counter"))
    assert Engine(cfg).policy.table.threshold == 49


@pytest.mark.parametrize("mit", [
    MitigationConfig(),
    MitigationConfig(kind="para", p=0.05),
    MitigationConfig(kind="para", p=0.2, both_sides=True),
    MitigationConfig(kind="counter", threshold=17),
    MitigationConfig(kind="counter", threshold=7, capacity=1),
    MitigationConfig(kind="counter", threshold=1, capacity=1),
    MitigationConfig(kind="refresh", scale=Fraction(3)),
])
def test_fast_path_matches_expanded(mit):
    g = Geometry(banks=1, rows_per_bank=12, words_per_row=2)
    t = TimingParams(retention_window_ns=40_000, ref_commands_per_window=6)
    rng = np.random.default_rng(2)
    cells = [(0, int(r), 0, int(b), int(x)) for r, b, x in
             zip(rng.integers(0, 12, 30), rng.permutation(64)[:30], rng.integers(5, 300, 30))]
    cfg = SimConfig(geometry=g, timing=t, mitigation=mit, seed=4)
    items = []
    start = 0
    for row, n, period in [(3, 700, 50), (4, 333, 77), (3, 5, 50), (9, 1200, 60), (0, 90, 50), (11, 400, 55)]:
        items += generate_trace(PatternSpec("single_sided", 0, (row,), n, period, start_ns=start), t, g)
        start += n * period + 13
    fast = Engine(cfg, vmap(g, *cells)).run(items)
    slow = Engine(cfg, vmap(g, *cells)).run(list(expand_trace(items)))
    assert fast[0] == slow[0]
    assert fast[1] == slow[1]


def test_violations_are_counted_and_dropped():
    trace = [
        Command(0, Kind.ACT, 0, 1, line=1),
        Command(10, Kind.ACT, 0, 2, line=2),   # bank open
        Command(20, Kind.PRE, 0, line=3),
        Command(30, Kind.ACT, 0, 2, line=4),   # inside tRC
        Command(25, Kind.ACT, 0, 2, line=5),   # out of order
        Command(60, Kind.ACT, 0, 2, line=6),
        Command(70, Kind.REF, line=7),         # REF while auto-refresh is on
    ]
    e = Engine(SimConfig(geometry=G))
    m, _ = e.run(trace)
    assert m.protocol_violations == 4
    assert m.total_activations == 2 and m.commands == 3
    assert [line for line, _ in e.rejections] == [2, 4, 5, 7]


def test_manual_refresh_mode():
    g = Geometry(banks=1, rows_per_bank=4, words_per_row=1)
    t = TimingParams(retention_window_ns=4000, ref_commands_per_window=4)
    cfg = SimConfig(geometry=g, timing=t, auto_refresh=False)
    trace = [Command(i * 50, k, 0 if k is not Kind.REF else None, 1 if k is Kind.ACT else None, 0 if k is Kind.RD else None)
             for i, k in enumerate([Kind.ACT, Kind.RD, Kind.PRE])]
    trace += [Command(200, Kind.REF), Command(300, Kind.REF)]
    trace += [Command(400 + i * 50, Kind.ACT if i % 2 == 0 else Kind.PRE, 0, 1 if i % 2 == 0 else None) for i in range(4)]
    m, flips = Engine(cfg, vmap(g, (0, 2, 0, 0, 3))).run(trace)
    # REF at 200 refreshes row 0, REF at 300 refreshes row 1; row 2 keeps counting
    assert m.refresh_rounds == 2 and m.flips_total == 1 and flips[0].time_ns == 500


def test_write_and_read_back():
    g = Geometry(banks=1, rows_per_bank=16, words_per_row=4)
    e = Engine(SimConfig(geometry=g, fault_enabled=False))
    e.run([Command(0, Kind.ACT, 0, 3), Command(1, Kind.WR, 0, col=2, data=0xDEADBEEF), Command(2, Kind.PRE, 0)])
    assert e.memory.read(0, 3, 2) == 0xDEADBEEF
    assert e.memory.read(0, 3, 1) == ALL_ONES


def ecc_trace(victim_row, aggressor, n, read_col, period=50):
    out = list(expand_trace(hammer(aggressor, n, period)))
    t = n * period + 100
    out += [Command(t, Kind.ACT, 0, victim_row), Command(t + 1, Kind.RD, 0, col=read_col), Command(t + 2, Kind.PRE, 0)]
    return out


def test_ecc_read_corrects_single_flip():
    cfg = SimConfig(geometry=G, ecc=EccConfig(True))
    e = Engine(cfg, vmap(G, (0, 7, 1, 3, 10)))
    m, _ = e.run(ecc_trace(7, 6, 20, 1))
    assert m.ecc_corrections == 1 and m.ecc_corrected == 1
    assert e.memory.error_mask(0, 7, 1) == 0


def test_ecc_detects_double_flip():
    cfg = SimConfig(geometry=G, ecc=EccConfig(True))
    e = Engine(cfg, vmap(G, (0, 7, 1, 3, 10), (0, 7, 1, 4, 12)))
    m, _ = e.run(ecc_trace(7, 6, 20, 1))
    assert m.ecc_detections == 1 and m.ecc_detected_uncorrectable == 1
    assert e.memory.error_mask(0, 7, 1) == 0b11000


def test_ecc_scrub_at_refresh():
    g = Geometry(banks=1, rows_per_bank=8, words_per_row=2)
    t = TimingParams(retention_window_ns=8000, ref_commands_per_window=8)
    cfg = SimConfig(geometry=g, timing=t, ecc=EccConfig(True))
    e = Engine(cfg, vmap(g, (0, 3, 1, 0, 4)))
    trace = list(expand_trace(generate_trace(PatternSpec("single_sided", 0, (2,), 6, 50, start_ns=3100), t, g)))
    trace.append(Command(20_000, Kind.ACT, 0, 0))
    m, _ = e.run(trace)
    assert m.flips_total == 1 and m.ecc_corrections == 1
    assert e.memory.error_mask(0, 3, 1) == 0
    off = Engine(SimConfig(geometry=g, timing=t, ecc=EccConfig(True, scrub_on_refresh=False)), vmap(g, (0, 3, 1, 0, 4)))
    assert off.run(trace)[0].ecc_corrections == 0


def test_dynamic_remap_retires_row():
    g = Geometry(banks=1, rows_per_bank=32, words_per_row=4)
    cfg = SimConfig(geometry=g, ecc=EccConfig(True), mitigation=MitigationConfig(kind="dynamic_remap", reserve_rows=4))
    e = Engine(cfg, vmap(g, (0, 12, 0, 0, 5), (0, 12, 2, 9, 8)))
    trace = ecc_trace(12, 11, 6, 0)
    t = trace[-1].time_ns + 100
    trace += list(expand_trace(generate_trace(PatternSpec("single_sided", 0, (11,), 50, 50, start_ns=t), cfg.timing, g)))
    m, flips = e.run(trace)
    assert m.remaps == 1
    assert e.adj.physical(0, 12) == 28
    # later flips land in the retired physical row only; logical row 12 is safe
    assert m.flips_in_service == 1 and flips[0].bit == 0
    assert all(f.row == 12 for f in flips)
    assert all(e.memory.read(0, 28, w) == ALL_ONES for w in range(4))


def test_dynamic_remap_requires_ecc():
    with pytest.raises(ValueError):
        Engine(SimConfig(geometry=G, mitigation=MitigationConfig(kind="dynamic_remap")))


def test_static_remap_rerun_has_no_in_service_flips():
    g = Geometry(banks=1, rows_per_bank=64, words_per_row=8)
    cfg = SimConfig(geometry=g, profile=VictimProfile("t", (3, 0, 0, 0), 10, 20), seed=5,
                    mitigation=MitigationConfig(kind="static_remap", reserve_rows=4))
    e = Engine(cfg)
    assert len(e.remap.overrides) == 3
    m, flips = e.run(hammer_every_row(g, cfg.timing, 100))
    assert m.flips_in_service == 0
    assert all(not e.remap.in_service(f.bank, f.row) for f in flips)


def test_refresh_mitigation_scales_schedule():
    cfg = SimConfig(geometry=G, mitigation=MitigationConfig(kind="refresh", scale=Fraction(78, 10)))
    assert Engine(cfg).timing.effective_refi_ns == 1001


def test_determinism_and_invariants(tmp_path):
    g = Geometry(banks=2, rows_per_bank=64, words_per_row=16)
    cfg = SimConfig(geometry=g, profile=VictimProfile("t", (200, 40, 5, 1), 20, 400), seed=9,
                    mitigation=MitigationConfig(kind="para", p=0.01))
    trace = generate_trace(PatternSpec("random", 1, (), 20_000, 50, seed=3), cfg.timing, g)
    runs = [Engine(cfg).run(trace) for _ in range(2)]
    assert runs[0][0].to_text() == runs[1][0].to_text()
    assert runs[0][1] == runs[1][1]
    m, flips = runs[0]
    assert m.flips_total == len(flips) == sum(m.flips_by_row.values())
    assert [f.time_ns for f in flips] == sorted(f.time_ns for f in flips)
    assert all(f.time_ns <= m.simulated_end_time_ns for f in flips)
    assert all(abs(f.row - f.aggressor_row) == 1 for f in flips)
    assert m.mitigation_extra_activations <= m.total_activations


def test_below_threshold_trace_never_flips():
    g = Geometry(banks=1, rows_per_bank=32, words_per_row=4)
    cfg = SimConfig(geometry=g, profile=VictimProfile("t", (60, 0, 0, 0), 1000, 2000), seed=1)
    trace = []
    t = 0
    for row in range(32):
        trace += generate_trace(PatternSpec("single_sided", 0, (row,), 499, 50, start_ns=t), cfg.timing, g)
        t += 499 * 50
    assert Engine(cfg).run(trace)[0].flips_total == 0


def test_run_reads_trace_file(tmp_path):
    from hammersim.dram import write_trace
    path = tmp_path / "t.trace"
    write_trace(expand_trace(hammer(6, 20)), path)
    cfg = SimConfig(geometry=G, victim_map_path=None, trace_path=str(path))
    m, _ = run(cfg)
    assert m.total_activations == 20
    with pytest.raises(ValueError):
        run(SimConfig())


@pytest.mark.parametrize("seed", range(12))
def test_matches_recount_oracle(seed):
    rnd = random.Random(seed)
    g = Geometry(banks=rnd.randint(1, 2), rows_per_bank=rnd.randint(2, 16), words_per_row=2)
    t = TimingParams(retention_window_ns=rnd.choice([5_000, 20_000, 200_000]), ref_commands_per_window=rnd.randint(1, 8))
    cells = {(rnd.randrange(g.banks), rnd.randrange(g.rows_per_bank), rnd.randrange(2), rnd.randrange(64))
             for _ in range(rnd.randint(0, 12))}
    victims = sorted((*c, rnd.randint(1, 25)) for c in cells)
    trace = random_trace(rnd, g, 600)
    m, flips = Engine(SimConfig(geometry=g, timing=t), vmap(g, *victims)).run(trace)
    assert sorted(tuple(f) for f in flips) == recount_flips(g, t, victims, trace)


def random_trace(rnd, g, n):
    out, t = [], 0
    for _ in range(n):
        t += rnd.choice([0, 1, 10, 50, 50, 120])
        kind = rnd.choice([Kind.ACT, Kind.ACT, Kind.PRE, Kind.PRE, Kind.RD, Kind.WR])
        out.append(Command(t, kind, rnd.randrange(g.banks), rnd.randrange(g.rows_per_bank) if kind is Kind.ACT else None,
                           rnd.randrange(2) if kind in (Kind.RD, Kind.WR) else None,
                           rnd.getrandbits(64) if kind is Kind.WR else None))
    return out
