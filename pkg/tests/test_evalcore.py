import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clutterbench.errors import InvalidInputError, ParseError
from clutterbench.evalcore import (
    TABLE_COLUMNS,
    EpisodeLog,
    EpisodeOutcome,
    PolicyRow,
    Stage,
    StepRecord,
    agreement,
    classify_outcome,
    compute_metrics,
    curves_csv,
    dumps_logs,
    loads_logs,
    per_bin_curves,
    reach_failure_distribution,
    read_logs,
    stage_for,
    table_csv,
    table_markdown,
    write_logs,
)
from clutterbench.scenario import ScenarioRecord, Skill, default_base_scene
from clutterbench.scene import ObjectSpec, Shape

BASE = default_base_scene(Skill.MOVE)  # target apple, anchor sponge
SCENE = BASE.with_objects(
    BASE.objects + (ObjectSpec.on_table("mug", Shape.CYLINDER, (0.04, 0.09), (0.2, 0.3, 0.8), -0.3, 0.2),)
)
RECORD = ScenarioRecord("sc-1", Skill.MOVE, "move apple near sponge", SCENE, 1, 0.0, 2.0)
TARGET = tuple(SCENE.target.center)


def step(t, pos, grasped=None, contacts=()):
    return StepRecord(t, pos, grasped, tuple(contacts))


def log_of(steps, success=False, max_steps=80, sid="sc-1", policy="p"):
    return EpisodeLog(sid, policy, max_steps, success, tuple(steps))


def near(dist):
    x, y, z = TARGET
    return (x + dist, y, z)


# --- classification -------------------------------------------------------------


def test_success_without_contacts():
    o = classify_outcome(log_of([step(0, near(0.2)), step(1, near(0.0), "apple")], success=True), RECORD)
    assert o.stage is Stage.SUCCESS
    assert not o.collided
    assert o.grasped_target
    assert o.steps_used == 2


def test_far_failure_is_fail_reach():
    o = classify_outcome(log_of([step(0, near(0.5)), step(3, near(0.30))]), RECORD)
    assert o.stage is Stage.FAIL_REACH
    assert o.min_target_distance == pytest.approx(0.30)


def test_reached_and_grasped_failure_is_after_grasp():
    o = classify_outcome(log_of([step(0, near(0.2)), step(1, near(0.03), "apple"), step(2, near(0.2))]), RECORD)
    assert o.stage is Stage.FAIL_AFTER_GRASP


def test_reached_without_grasp_is_fail_grasp():
    o = classify_outcome(log_of([step(0, near(0.04)), step(1, near(0.01), "mug")]), RECORD)
    assert o.stage is Stage.FAIL_GRASP
    assert not o.grasped_target


def test_only_distractor_contacts_collide():
    assert not classify_outcome(log_of([step(0, near(0.1), contacts=["sponge", "__table__"])]), RECORD).collided
    assert classify_outcome(log_of([step(0, near(0.1), contacts=["mug"])]), RECORD).collided


def test_empty_episode_never_reaches():
    o = classify_outcome(log_of([]), RECORD)
    assert o.stage is Stage.FAIL_REACH
    assert math.isinf(o.min_target_distance)


def test_mismatched_scenario_rejected():
    with pytest.raises(InvalidInputError):
        classify_outcome(log_of([], sid="other"), RECORD)


def test_log_invariants():
    with pytest.raises(InvalidInputError):
        log_of([step(2, near(0)), step(2, near(0))])
    with pytest.raises(InvalidInputError):
        log_of([step(i, near(0)) for i in range(4)], max_steps=3)


@given(st.booleans(), st.booleans(), st.booleans())
def test_stage_is_success_iff_success(success, reached, grasped):
    stage = stage_for(success, reached, grasped)
    assert (stage is Stage.SUCCESS) == success


# --- metrics ------------------------------------------------------------------------


def outcome(i, success, collided, grasped, steps=40, max_steps=80, stage=None):
    stage = stage or stage_for(success, True, grasped)
    return EpisodeOutcome(f"s{i}", "p", success, collided, grasped, steps, max_steps, 0.01, stage)


def hand_count_fixture():
    # successes {1,2}, collisions {2,3}, grasped {1,2,3}
    return [
        outcome(1, True, False, True),
        outcome(2, True, True, True),
        outcome(3, False, True, True),
        outcome(4, False, False, False),
    ]


def test_hand_count_fixture():
    m = compute_metrics(hand_count_fixture())
    assert (m.sr, m.h_sr, m.cr, m.gfr) == (0.5, 0.25, 0.5, 0.25)
    assert sum(m.stage_histogram.values()) == m.n_episodes == 4
    assert m.n_success == 2
    assert m.er == 0.5


def test_all_success_no_collision():
    m = compute_metrics([outcome(i, True, False, True) for i in range(5)])
    assert m.sr == m.h_sr == 1.0
    assert m.cr == m.gfr == 0.0


def test_er_over_successes_only():
    outs = [outcome(0, True, False, True, steps=20), outcome(1, True, False, True, steps=60), outcome(2, False, False, True, steps=80)]
    assert compute_metrics(outs).er == pytest.approx(0.5)
    assert compute_metrics([outcome(0, False, False, False)]).er is None


def test_empty_metrics_rejected():
    with pytest.raises(InvalidInputError):
        compute_metrics([])


outcome_lists = st.lists(
    st.tuples(st.booleans(), st.booleans(), st.booleans(), st.integers(0, 50)), min_size=1, max_size=30
)


@given(outcome_lists, st.randoms())
def test_metric_invariants(rows, rnd):
    outs = [outcome(i, s, c, g, steps=k) for i, (s, c, g, k) in enumerate(rows)]
    m = compute_metrics(outs)
    assert m.h_sr <= m.sr
    if m.cr == 0:
        assert m.h_sr == m.sr
    for v in (m.sr, m.h_sr, m.cr, m.gfr):
        assert 0 <= v <= 1
    assert sum(m.stage_histogram.values()) == len(outs)
    shuffled = list(outs)
    rnd.shuffle(shuffled)
    m2 = compute_metrics(shuffled)
    assert (m2.sr, m2.h_sr, m2.cr, m2.gfr, m2.stage_histogram) == (m.sr, m.h_sr, m.cr, m.gfr, m.stage_histogram)
    assert m2.er == pytest.approx(m.er) if m.er is not None else m2.er is None


# --- curves -----------------------------------------------------------------------


def scenario_map(rows):
    """rows: (id, dvfc, n_distractors, occlusion)"""
    return {
        sid: ScenarioRecord(sid, Skill.MOVE, "x", SCENE, n, occ, d) for sid, d, n, occ in rows
    }


def test_step_shaped_sr_curve():
    rng = random.Random(0)
    rows = [(f"s{i}", i / 10, rng.randint(1, 12), 0.0) for i in range(80)]
    scen = scenario_map(rows)
    median = np.median([r[1] for r in rows])
    outs = [outcome(int(sid[1:]), d < median, False, True) for sid, d, _, _ in rows]
    curves = per_bin_curves(outs, scen, 8)
    assert [r.sr for r in curves.per_bin] == [1, 1, 1, 1, 0, 0, 0, 0]
    assert [r.n for r in curves.per_bin] == [10] * 8


def test_curves_recompose_global_rates_and_keep_empty_groups():
    rng = random.Random(4)
    rows = [(f"s{i}", rng.random() ** 2, rng.choice([1, 2, 5, 9]), rng.choice([0.0, 0.05, 0.33, 0.5])) for i in range(60)]
    scen = scenario_map(rows)
    outs = [outcome(i, rng.random() < 0.5, rng.random() < 0.6, rng.random() < 0.7) for i in range(60)]
    m = compute_metrics(outs, scen, 8)
    for rows_ in (m.per_bin, m.per_set_size, m.per_occlusion):
        total = sum(r.n for r in rows_)
        assert total == 60
        for attr in ("sr", "cr", "gfr"):
            recomposed = sum(r.n * getattr(r, attr) for r in rows_ if r.n) / total
            assert abs(recomposed - getattr(m, attr)) <= 1e-12
        for r in rows_:
            assert (r.n == 0) == (r.sr is None)
    # set sizes 1..9 are all present as rows, unused ones empty
    assert [r.lo for r in m.per_set_size] == list(range(1, 10))
    assert m.per_set_size[2].n == 0 and m.per_set_size[2].sr is None
    assert len(m.per_occlusion) == 10
    assert m.sr_noocc + m.sr_occ == pytest.approx(m.sr)


def test_concentrated_outcomes_single_bin_and_decile():
    scen = scenario_map([(f"s{i}", 1.5, 3, 0.0) for i in range(5)])
    outs = [outcome(i, True, False, True) for i in range(5)]
    curves = per_bin_curves(outs, scen, 8)
    assert [r.n for r in curves.per_bin] == [5, 0, 0, 0, 0, 0, 0, 0]
    assert all(r.sr is None for r in curves.per_bin[1:])
    assert [r.n for r in curves.per_occlusion] == [5] + [0] * 9
    assert "occlusion_decile" in curves_csv(compute_metrics(outs, scen), "p")


# --- agreement -----------------------------------------------------------------------


def test_identical_sets():
    a = agreement({"A": {1, 2, 3}, "B": {1, 2, 3}}, 10)
    assert a.regions[frozenset({"A", "B"})] == 1.0
    assert a.union_sr == 0.3


def test_disjoint_sets():
    a = agreement({"A": set(range(10)), "B": set(range(10, 20))}, 40)
    assert a.union_sr == 0.5
    assert a.regions[frozenset({"A"})] == 0.5 and a.regions[frozenset({"B"})] == 0.5


@given(st.lists(st.sets(st.integers(0, 49)), min_size=2, max_size=3))
def test_regions_partition_union(sets):
    names = "ABC"[: len(sets)]
    a = agreement(dict(zip(names, sets)), 50)
    assert len(a.regions) == 2 ** len(sets) - 1
    union = set().union(*sets)
    assert sum(a.region_counts.values()) == len(union)
    if union:
        assert sum(a.regions.values()) == pytest.approx(1.0)


def test_more_than_three_policies_fall_back_to_pairs():
    a = agreement({k: {i} for i, k in enumerate("ABCD")}, 10)
    assert a.regions == {}
    assert len(a.pairwise) == 6
    assert a.union_sr == 0.4


# --- reach failures ----------------------------------------------------------------------


def reach_fail(i, d):
    return EpisodeOutcome(f"s{i}", "p", False, False, False, 10, 80, d, Stage.FAIL_REACH)


def test_reach_distribution():
    assert reach_failure_distribution([outcome(0, True, False, True)]).entries == []
    r = reach_failure_distribution([reach_fail(0, 0.1), reach_fail(1, 0.5), outcome(2, True, False, True)])
    assert r.median == pytest.approx(0.3)
    assert not r.dispersed
    assert reach_failure_distribution([reach_fail(0, 0.1), reach_fail(1, 0.62)]).dispersed


# --- table ---------------------------------------------------------------------------


def test_cogact_row():
    row = PolicyRow.from_dict(
        {"policy": "CogACT", "sr_base": 0.743, "sr": 0.480, "sr_noocc": 0.348, "sr_occ": 0.132,
         "h_sr": 0.102, "cr": 0.872, "gfr": 0.395, "er": 0.367}
    )
    lines = table_csv([row]).splitlines()
    assert lines[0] == ",".join(TABLE_COLUMNS)
    assert lines[1] == "CogACT,0.743,0.480,0.348,0.132,0.102,0.872,0.395,0.367"
    md = table_markdown([row])
    assert "| CogACT | 0.743 | 0.480 | 0.348 | 0.132 | 0.102 | 0.872 | 0.395 | 0.367 |" in md
    assert "successful episodes" in md.splitlines()[0]


def test_row_validation():
    with pytest.raises(InvalidInputError):
        PolicyRow.from_dict({"policy": "x", "sr": 1.5})
    with pytest.raises(InvalidInputError):
        PolicyRow.from_dict({"policy": "x", "bogus": 0.1})
    assert PolicyRow.from_dict({"policy": "x"}).cells()[1:] == [""] * 8


# --- log files -------------------------------------------------------------------------


def test_log_round_trip(tmp_path):
    logs = [
        log_of([step(0, (0.1, 0.2, 0.3)), step(5, (0.0, 0.0, 0.1), "apple", ["mug"])], success=True),
        log_of([], policy="q"),
    ]
    write_logs(logs, tmp_path / "l.jsonl")
    assert read_logs(tmp_path / "l.jsonl") == logs


def test_log_errors_name_the_line():
    text = dumps_logs([log_of([step(0, (0, 0, 0)), step(1, (0, 0, 0))])])
    lines = text.splitlines()
    lines[3] = lines[3].replace('"t":1', '"t":0')
    with pytest.raises(ParseError) as info:
        loads_logs("\n".join(lines))
    assert info.value.lineno == 2  # the episode whose steps are out of order
    lines = text.splitlines()
    lines[2] = lines[2].replace("[0.0,0.0,0.0]", '"here"')
    with pytest.raises(ParseError) as info:
        loads_logs("\n".join(lines))
    assert info.value.lineno == 3
    with pytest.raises(ParseError) as info:
        loads_logs(text.splitlines()[0] + '\n{"type":"step","t":0,"ee":[0,0,0]}\n')
    assert info.value.lineno == 2
