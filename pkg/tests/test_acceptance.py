"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
"""
import json
import random
import socket
import sys
import threading
import time

import numpy as np
import pytest

from constructed import random_tidy, tidy_scenario
from fuzzing import corpus
from hiddenworld.agent_runtime import Environment, Runner
from hiddenworld.belief import BeliefConfig, init_from_observation, update
from hiddenworld.compiler import (TransitionRecord, audit, bundled_scenarios, compile_episode, parse_scenario,
                                  read_scenario, replay_records)
from hiddenworld.config import RuntimeConfig
from hiddenworld.evaluation import (gt_run_log, paired_bootstrap, score_run, script_run_log, tsr_tcr_validity,
                                    wsr_replay)
from hiddenworld.observation import Observation, apply_delta, diff_graphs, local_subgraph, observe
from hiddenworld.planners import HeuristicPlanner, ScriptedPlanner, SequencePlanner
from hiddenworld.protocol import PlannerClient, _socket_channel, serve_session, spawn
from hiddenworld.rules import SUCCESS, Feedback, PrimitiveAction, execute_primitive
from hiddenworld.world_graph import instantiate, snapshot_hash, to_document

RESULTS = {}
FUZZ_N = 10_000


def report(n: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {title}" + (f" ({detail})" if detail else "")
    RESULTS[n] = line
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------------

def test_criterion_01_gt_replay_perfection():
    t0 = time.perf_counter()
    rows, n_tasks = [], 0
    for name in bundled_scenarios():
        c = compile_episode(read_scenario(name))
        card = score_run(c, gt_run_log(c))
        n_tasks += len(card.tasks)
        rows.append((name, card.f1, card.tsr, card.tcr, card.wsr))
    elapsed = time.perf_counter() - t0
    perfect = all(f1 == tsr == tcr == wsr == 1.0 for _, f1, tsr, tcr, wsr in rows)
    ok = perfect and len(rows) >= 3 and n_tasks >= 8 and elapsed < 5.0
    report(1, "GT replay F1=TSR=TCR=WSR=1.0", ok,
           f"{len(rows)} scenarios, {n_tasks} tasks, {elapsed:.2f}s; " +
           ", ".join(f"{n}: f1={a} tsr={b} tcr={c} wsr={d}" for n, a, b, c, d in rows))


# 2 -------------------------------------------------------------------------------

def test_criterion_02_audit_row(compiled_all):
    rows = {name: audit(c) for name, c in compiled_all.items()}
    ok = all((a.coverage, a.hallucination, a.missing_key_state, a.replay_success, a.temporal_error)
             == (1.0, 0.0, 0.0, 1.0, 0.0) for a in rows.values())
    report(2, "compiler-grounded audit row", ok,
           "; ".join(f"{n}: cov={a.coverage} hal={a.hallucination} miss={a.missing_key_state} "
                     f"replay={a.replay_success} temp={a.temporal_error}" for n, a in rows.items()))


# 3 and 4 -------------------------------------------------------------------------

def _fuzz_engine(c, seqs):
    """Failure idempotence and diff round trip over direct engine execution."""
    ep = c.episode
    g0 = instantiate(ep.init)
    local0 = {a: local_subgraph(g0, a) for a in g0.areas}
    idem_bad = diff_bad = steps = fails = 0
    for seq in seqs:
        g, agent = g0, ep.initial_agent()
        for a in seq:
            before = snapshot_hash(g)
            out = execute_primitive(g, agent, ep.rules, a)
            steps += 1
            if not out.feedback.ok:
                fails += 1
                if snapshot_hash(out.graph) != before or out.agent != agent:
                    idem_bad += 1
            g, agent = out.graph, out.agent
            area = agent.current_area
            obs = observe(g0, g, area, steps)
            if apply_delta(local0[area], obs.delta_set) != local_subgraph(g, area):
                diff_bad += 1
    return idem_bad, diff_bad, steps, fails


def _fuzz_counters(c, seqs):
    """Runtime counters against a recount from the log and an independent replay."""
    ep = c.episode
    task = ep.tasks[0]
    g0 = instantiate(ep.init)
    bad = 0
    for seq in seqs:
        log = Runner(ep, SequencePlanner({task.task_id: seq})).run(upto=0)
        steps = log.steps(task.task_id)
        end = log.task_end(task.task_id)["counters"]
        by_log = sum(s["feedback"]["outcome"] == SUCCESS for s in steps)
        g, agent, by_replay = g0, ep.initial_agent(), 0
        for s in steps:
            out = execute_primitive(g, agent, ep.rules, PrimitiveAction.parse(s["action"]))
            by_replay += out.feedback.ok
            g, agent = out.graph, out.agent
        _, _, validity = tsr_tcr_validity(c, log)[task.task_id]
        expect = by_log / len(steps) if steps else 1.0
        if (end["primitives_attempted"] != len(steps) or end["primitives_valid"] != by_log
                or by_replay != by_log or validity != expect):
            bad += 1
    return bad


@pytest.fixture(scope="module")
def fuzz_corpus(compiled_all):
    return {name: corpus(c.episode, FUZZ_N, seed=7) for name, c in compiled_all.items()}


@pytest.fixture(scope="module")
def engine_fuzz(compiled_all, fuzz_corpus):
    return {name: _fuzz_engine(c, fuzz_corpus[name]) for name, c in compiled_all.items()}


def test_criterion_03_failure_idempotence(compiled_all, fuzz_corpus, engine_fuzz):
    counter_bad = {name: _fuzz_counters(c, fuzz_corpus[name]) for name, c in compiled_all.items()}
    idem_bad = {name: r[0] for name, r in engine_fuzz.items()}
    fails = sum(r[3] for r in engine_fuzz.values())
    ok = not any(idem_bad.values()) and not any(counter_bad.values()) and fails > 0
    report(3, "failure idempotence and counter recount", ok,
           f"{FUZZ_N} sequences per scenario, {fails} failed steps; idempotence violations={idem_bad}, "
           f"counter mismatches={counter_bad}")


def test_criterion_04_diff_round_trip(engine_fuzz):
    bad = {name: r[1] for name, r in engine_fuzz.items()}
    steps = sum(r[2] for r in engine_fuzz.values())
    report(4, "observation diff round trip", not any(bad.values()), f"{steps} steps; violations={bad}")


# 5 -------------------------------------------------------------------------------

def _record(c, seq):
    """Run a sequence in the environment and keep (obs, feedback) as JSON text."""
    env = Environment(c.episode)
    lines = [json.dumps({"obs": env.observe(initial=True).to_doc(), "fb": None})]
    for a in seq:
        obs, fb = env.step(a)
        lines.append(json.dumps({"obs": obs.to_doc(), "fb": fb.to_doc()}))
    return lines


def _belief_trace(lines, cfg):
    first = json.loads(lines[0])
    b = init_from_observation(Observation.from_doc(first["obs"]), cfg)
    out = [(b.dumps(), b)]
    for line in lines[1:]:
        rec = json.loads(line)
        b = update(b, Observation.from_doc(rec["obs"]), Feedback.from_doc(rec["fb"]), cfg)
        out.append((b.dumps(), b))
    return out


def test_criterion_05_belief_determinism(compiled_all, fuzz_corpus):
    cfg = BeliefConfig()
    recorded = []
    for name, c in compiled_all.items():
        recorded += [_record(c, seq) for seq in fuzz_corpus[name][:34]]
    recorded = recorded[:100]
    mismatch = deleted = bad_conf = 0
    for lines in recorded:
        a, b = _belief_trace(lines, cfg), _belief_trace(lines, cfg)
        mismatch += [x for x, _ in a] != [y for y, _ in b]
        seen = set()
        for _, belief in a:
            ids = set(belief.nodes)
            deleted += not seen <= ids
            seen |= ids
            bad_conf += sum(not 0.0 <= n.meta.confidence <= 1.0 for n in belief.nodes.values())
    ok = len(recorded) == 100 and mismatch == deleted == bad_conf == 0
    report(5, "belief determinism and retention", ok,
           f"{len(recorded)} sequences; mismatches={mismatch}, deletions={deleted}, bad confidences={bad_conf}")


# 6 -------------------------------------------------------------------------------

def _brute_slots(doc):
    """Slot table straight from a graph document."""
    held = {}
    for src, kind, dst in doc["edges"]:
        if kind in ("contains", "supports"):
            held[(dst, "containment" if kind == "contains" else "support")] = src
    table = {}
    for n in doc["nodes"]:
        if n["kind"] == "area":
            continue
        i = n["instance_id"]
        for slot in ("location", "state", "amount"):
            table[(i, slot)] = n.get(slot)
        table[(i, "containment")] = held.get((i, "containment"))
        table[(i, "support")] = held.get((i, "support"))
        for k, v in n.items():
            if k.startswith("state."):
                table[(i, k)] = v
    return table


def _brute_wsr(c, k, actions):
    pre, agent = c.task_pre(k)
    want_graph = c.task_post(k)[0]
    start, want = _brute_slots(to_document(pre)), _brute_slots(to_document(want_graph))
    changed = [s for s in sorted(set(start) | set(want), key=str) if start.get(s) != want.get(s)]
    if not changed:
        return 1.0, 0
    g = pre
    for a in actions:
        out = execute_primitive(g, agent, c.episode.rules, a)
        if out.feedback.outcome == SUCCESS:
            g, agent = out.graph, out.agent
    got = _brute_slots(to_document(g))
    return sum(got.get(s) == want.get(s) for s in changed) / len(changed), len(changed)


def _mutate(rng, chain, cups):
    out = list(chain)
    roll = rng.random()
    if roll < 0.25 and out:
        del out[rng.randrange(len(out)):]
    elif roll < 0.5:
        out = [PrimitiveAction(a.action_type, rng.choice(cups) if a.object in cups else a.object, a.target)
               for a in out]
    elif roll < 0.75:
        out.insert(rng.randrange(len(out) + 1), PrimitiveAction("wash", rng.choice(cups)))
        out.insert(rng.randrange(len(out) + 1), PrimitiveAction("place", rng.choice(cups), "shelf"))
    return out


def test_criterion_06_wsr_oracle_equivalence():
    rng = random.Random(11)
    tasks = diffs = 0
    worst = 0.0
    while tasks < 40:
        c = compile_episode(parse_scenario(random_tidy(rng).encode(), "tidy.yaml"))
        cups = sorted(n for n in c.task_pre(0)[0].nodes if n.startswith("cup_"))
        scripts = {t.task_id: _mutate(rng, t.gt_chain, cups) for t in c.episode.tasks}
        log = script_run_log(c, scripts)
        got = wsr_replay(c, log)
        for k, t in enumerate(c.episode.tasks):
            ref, n_changed = _brute_wsr(c, k, scripts[t.task_id])
            if n_changed == 0 or n_changed > 4:
                continue
            tasks += 1
            worst = max(worst, abs(got[t.task_id] - ref))
            diffs += got[t.task_id] != ref
    report(6, "WSR equals brute-force slot comparison", tasks >= 20 and diffs == 0 and worst < 1e-12,
           f"{tasks} constructed tasks with 1-4 changed slots, max |diff|={worst:g}")


# 7 -------------------------------------------------------------------------------

def test_criterion_07_heuristic_coffee(coffee):
    ep = coffee.episode
    runs = [Runner(ep, HeuristicPlanner.for_episode(ep), RuntimeConfig(seed=3)).run() for _ in range(2)]
    log = runs[0]
    card = score_run(coffee, log)
    first = ep.tasks[0].task_id
    replans = [r for r in log.events("replan") if r["task_id"] == first]
    oracle = [r for r in log.events("oracle") if r["task_id"] == first]
    steps = [s["action"] for s in log.steps(first)]
    failed_insert = next((s for s in log.steps(first) if s["action"].startswith("insert")
                          and s["feedback"]["outcome"] != SUCCESS), None)
    replanned = log.events("plan")[1]["skills"] if len(log.events("plan")) > 1 else []
    centers = [s["center"] for s in replanned]
    structure = (failed_insert is not None and any("capsule" in r["violated"] for r in replans)
                 and any(o["target"].startswith("capsule") for o in oracle)
                 and centers[:1] == ["take_out(capsule_01, storage_cabinet)"]
                 and "go_to(storage_cabinet)" in steps)
    ok = card.tsr == 1.0 and len(replans) >= 1 and structure and runs[0].dumps() == runs[1].dumps()
    report(7, "heuristic planner on coffee", ok,
           f"tsr={card.tsr}, replans in {first}={len(replans)}, oracle queries={len(oracle)}, "
           f"deterministic={runs[0].dumps() == runs[1].dumps()}, replanned centers={centers}")


# 8 -------------------------------------------------------------------------------

def test_criterion_08_overlap_overestimates_state():
    c = compile_episode(parse_scenario(tidy_scenario(2, [("shelve", "cup_01")]).encode(), "two_cups.yaml"))
    task = c.episode.tasks[0]
    wrong = [PrimitiveAction(a.action_type, "cup_02" if a.object == "cup_01" else a.object, a.target)
             for a in task.gt_chain]
    log = Runner(c.episode, SequencePlanner({task.task_id: wrong})).run()
    card = score_run(c, log)
    report(8, "high F1 with wrong binding, low WSR", card.f1 > 0.7 and card.wsr < 0.5,
           f"gt={[a.render() for a in task.gt_chain]}, pred={[a.render() for a in wrong]}, "
           f"f1={card.f1:.3f}, wsr={card.wsr:.3f}")


# 9 -------------------------------------------------------------------------------

def test_criterion_09_paired_bootstrap():
    x = np.random.default_rng(5).uniform(0, 1, 20)
    same = paired_bootstrap(x, x.copy(), 10_000, seed=0)
    shifted = paired_bootstrap(x, x + 0.1, 10_000, seed=0)
    ok = (same.delta == 0.0 and same.p >= 0.99 and same.ci_low == same.ci_high == 0.0
          and shifted.ci_low > 0.0 and abs(shifted.delta - 0.1) < 1e-12)
    report(9, "paired bootstrap sanity", ok,
           f"identical: delta={same.delta}, p={same.p}; +0.1: delta={shifted.delta:.6f}, "
           f"CI=[{shifted.ci_low:.6f}, {shifted.ci_high:.6f}], p={shifted.p}")


# 10 ------------------------------------------------------------------------------

def test_criterion_10_protocol_equivalence(coffee, tmp_path):
    ep = coffee.episode
    reference = Runner(ep, ScriptedPlanner(ep)).run().dumps()

    a, b = socket.socketpair()
    server, client = _socket_channel(a, 30), _socket_channel(b, 30)
    t = threading.Thread(target=lambda: PlannerClient(ScriptedPlanner(ep), client).run())
    t.start()
    over_socket = serve_session(coffee, server)
    t.join()
    server.close()
    client.close()

    channel = spawn([sys.executable, "-m", "hiddenworld", "client", "coffee", "--planner", "scripted"], timeout=60)
    try:
        over_stdio = serve_session(coffee, channel)
    finally:
        channel.close()
    ok = over_socket.log.dumps() == reference and over_stdio.log.dumps() == reference
    report(10, "wire client log byte-identical to in-process", ok,
           f"{len(reference)} bytes; socket={over_socket.log.dumps() == reference}, "
           f"subprocess={over_stdio.log.dumps() == reference}, RUN_END tsr={over_socket.scorecard['tsr']}")


# 11 ------------------------------------------------------------------------------

def _chained_records(c, n, seed=0):
    ep = c.episode
    g0 = instantiate(ep.init)
    pool = [a for t in ep.tasks for a in t.gt_chain] + [PrimitiveAction("go_to", x) for x in g0.areas]
    rng = random.Random(seed)
    g, agent, recs = g0, ep.initial_agent(), []
    while len(recs) < n:
        a = rng.choice(pool)
        out = execute_primitive(g, agent, ep.rules, a)
        if not out.feedback.ok:
            continue
        recs.append(TransitionRecord("walk", len(recs), f"s{len(recs)}", snapshot_hash(g), (a,),
                                     snapshot_hash(out.graph), diff_graphs(g, out.graph),
                                     {"status": "success", "outcomes": ["success"]}, agent, out.agent))
        g, agent = out.graph, out.agent
    return g0, recs


def test_criterion_11_replay_throughput(compiled_all):
    g0, recs = _chained_records(compiled_all["salad"], 10_000)
    t0 = time.perf_counter()
    matched, total = replay_records(recs, g0)
    elapsed = time.perf_counter() - t0
    report(11, "10k chained transition records replay < 1s", matched == total == 10_000 and elapsed < 1.0,
           f"{matched}/{total} matched in {elapsed:.3f}s")
