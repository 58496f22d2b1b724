import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiddenworld.agent_runtime import Runner, TaskRunLog
from hiddenworld.errors import InitMismatch, LengthMismatch
from hiddenworld.evaluation import (ScoreCard, action_f1, aggregate_long_horizon, changed_slots, gt_run_log,
                                    paired_bootstrap, score_run, script_run_log, slot_values, tcr,
                                    tsr_tcr_validity, wsr_replay)
from hiddenworld.planners import HeuristicPlanner
from hiddenworld.rules import PrimitiveAction, execute_primitive
from hiddenworld.world_graph import instantiate


def end_state(c, acts):
    g, agent = c.task_pre(0)
    for a in acts:
        g, agent, _ = execute_primitive(g, agent, c.episode.rules, PrimitiveAction.parse(a))
    return g


def chain(c, k):
    return [a.render() for a in c.episode.tasks[k].gt_chain]


def test_f1_counts_action_types():
    p, r, f1 = action_f1(["open", "insert", "turn_on"], ["open", "insert", "wait"])
    assert (p, r) == (2 / 3, 2 / 3)
    assert f1 == pytest.approx(2 / 3)
    assert action_f1([], []) == (1.0, 1.0, 1.0)
    assert action_f1(["open"], []) == (0.0, 0.0, 0.0)
    # multiset, not set
    assert action_f1(["go_to", "go_to"], ["go_to"])[1] == 0.5


def test_tcr_matches_key_actions():
    keys = [("take_out", "capsule"), ("insert", "capsule")]
    assert tcr(keys, [("take_out", "capsule")]) == 0.5
    assert tcr(keys, [("take_out", "capsule"), ("take_out", "capsule")]) == 0.5
    assert tcr([], []) == 1.0


def test_gt_log_scores_perfectly(compiled):
    card = score_run(compiled, gt_run_log(compiled))
    assert (card.f1, card.tsr, card.tcr, card.wsr) == (1.0, 1.0, 1.0, 1.0)
    assert card.episode_success
    # redundant context steps in the source stay in the chain and fail harmlessly
    skipped = sum(r.exec_meta["outcomes"].count("skipped") for r in compiled.records)
    attempted = sum(len(t.gt_chain) for t in compiled.episode.tasks)
    assert card.validity == (attempted - skipped) / attempted


def test_partial_prefix(coffee):
    # stop right after the capsule goes in: two of five key actions done
    log = script_run_log(coffee, {"make_coffee": chain(coffee, 0)[:5]})
    res = tsr_tcr_validity(coffee, log)
    assert res["make_coffee"] == (False, 0.4, 1.0)
    assert res["rinse_cup"][1] == 0.0


def test_wsr_counts_changed_slots(coffee):
    pre = instantiate(coffee.episode.init)
    post = coffee.task_post(0)[0]
    slots = changed_slots(pre, post)
    assert ("cup_01", "location") not in slots
    assert ("capsule_01", "containment") in slots
    values = slot_values(post)
    assert values[("capsule_01", "containment")] == "coffee_machine"
    # the lid ends where it started, so leaving it open is invisible to the metric
    acts = chain(coffee, 0)
    acts.remove("close(coffee_machine)")
    assert ("coffee_machine", "state") not in slots
    assert wsr_replay(coffee, script_run_log(coffee, {"make_coffee": acts}))["make_coffee"] == 1.0
    # never brewing misses every slot the brew touches
    acts = chain(coffee, 0)[:-2]
    end = slot_values(end_state(coffee, acts))
    want = sum(end.get(k) == values.get(k) for k in slots) / len(slots)
    wsr = wsr_replay(coffee, script_run_log(coffee, {"make_coffee": acts}))["make_coffee"]
    assert 0 < wsr < 1 and wsr == pytest.approx(want)


def test_wsr_is_per_task_from_ground_truth_start(coffee):
    # the second task is judged from its own start state, whatever the first did
    log = script_run_log(coffee, {"dispose_capsule": chain(coffee, 1)})
    wsr = wsr_replay(coffee, log)
    assert wsr["dispose_capsule"] == 1.0 and wsr["make_coffee"] < 1.0


def test_steps_beyond_budget_are_ignored(coffee):
    n = len(coffee.episode.tasks[0].gt_chain)
    padded = ["wait()"] * (4 * n) + chain(coffee, 0)
    card = score_run(coffee, script_run_log(coffee, {"make_coffee": padded}))
    assert card.tasks[0].attempted == 4 * n
    assert not card.tasks[0].tsr


def test_init_mismatch(coffee, compiled_all):
    log = gt_run_log(compiled_all["juice"])
    with pytest.raises(InitMismatch):
        score_run(coffee, log)


def test_score_card_documents(coffee):
    log = Runner(coffee.episode, HeuristicPlanner.for_episode(coffee.episode)).run()
    card = score_run(coffee, log)
    assert ScoreCard.from_doc(card.to_doc()) == card
    rows = card.table().splitlines()
    assert rows[0] == f"episode\tcoffee\tf1\t{card.f1:.4f}"
    assert "task\tmake_coffee\ttsr\t1" in rows
    assert card.replan_mean == pytest.approx(sum(t.replans for t in card.tasks) / 3)
    # scoring reads only the replayable log
    assert score_run(coffee, TaskRunLog.loads(log.dumps())) == card


def test_long_horizon_positions(compiled_all):
    cards = [score_run(c, gt_run_log(c)) for c in compiled_all.values()]
    rows = aggregate_long_horizon(cards)
    assert [r.position for r in rows] == list(range(max(len(c.tasks) for c in cards)))
    assert rows[0].n == len(cards)
    assert all(r.f1 == 1.0 and r.tsr == 1.0 for r in rows)
    assert aggregate_long_horizon([]) == []


def _loop_bootstrap(a, b, resamples, seed):
    diff = np.asarray(b, float) - np.asarray(a, float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(diff), size=(resamples, len(diff)))
    means = []
    for row in idx:
        means.append(sum(diff[i] for i in row) / len(row))
    means = np.array(means)
    below = sum(m <= 0 for m in means) / resamples
    above = sum(m >= 0 for m in means) / resamples
    return np.percentile(means, 2.5), np.percentile(means, 97.5), min(1.0, 2 * min(below, above))


def test_bootstrap_matches_reference_loop():
    rng = np.random.default_rng(5)
    a, b = rng.random(12), rng.random(12) + 0.2
    res = paired_bootstrap(a, b, 500, seed=9)
    lo, hi, p = _loop_bootstrap(a, b, 500, 9)
    assert res.delta == pytest.approx(float(np.mean(b - a)))
    assert (res.ci_low, res.ci_high, res.p) == pytest.approx((lo, hi, p))
    delta, *_ = res
    assert delta == res.delta


def test_bootstrap_errors():
    with pytest.raises(LengthMismatch):
        paired_bootstrap([1, 2], [1])
    with pytest.raises(LengthMismatch):
        paired_bootstrap([], [])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.sampled_from(["open(cup_01)", "wash(coffee_machine)",
                                                               "consume(cup_01)", "go_to(nowhere)"])),
                max_size=4))
def test_invalid_actions_are_neutral(coffee, inserts):
    acts = chain(coffee, 0)
    noisy = list(acts)
    for pos, bad in sorted(inserts, reverse=True):
        noisy.insert(pos, bad)
    clean = tsr_tcr_validity(coffee, script_run_log(coffee, {"make_coffee": acts}))["make_coffee"]
    dirty = tsr_tcr_validity(coffee, script_run_log(coffee, {"make_coffee": noisy}))["make_coffee"]
    assert dirty[:2] == clean[:2]
    assert dirty[2] == pytest.approx(len(acts) / len(noisy))
    assert wsr_replay(coffee, script_run_log(coffee, {"make_coffee": noisy}))["make_coffee"] == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 9))
def test_tcr_is_monotone_in_prefix_length(coffee, n):
    acts = chain(coffee, 0)
    short = tsr_tcr_validity(coffee, script_run_log(coffee, {"make_coffee": acts[:n]}))["make_coffee"][1]
    longer = tsr_tcr_validity(coffee, script_run_log(coffee, {"make_coffee": acts[:n + 1]}))["make_coffee"][1]
    assert short <= longer
