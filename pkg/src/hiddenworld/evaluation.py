"""Scoring of run logs by deterministic replay against the hidden world.

Every metric is recomputed from the logged primitive actions; counters the
runtime wrote into the log are only used for replans and visual queries,
which have no physical trace.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .agent_runtime import LOG_FORMAT, TaskRunLog
from .compiler import Compiled, normalise
from .config import RuntimeConfig
from .errors import InitMismatch, LengthMismatch
from .rules import AgentPhysState, PrimitiveAction, execute_primitive
from .task_episode import check_goal
from .world_graph import WorldGraph, snapshot_hash

SLOT_ATTRS = ("location", "containment", "support", "state", "amount")


# -- action overlap ----------------------------------------------------------

def action_f1(gt_actions: Iterable[str], pred_actions: Iterable[str]) -> tuple:
    """Precision, recall and F1 over action-type multisets."""
    gt, pred = Counter(gt_actions), Counter(pred_actions)
    n_gt, n_pred = sum(gt.values()), sum(pred.values())
    if n_gt == 0 and n_pred == 0:
        return 1.0, 1.0, 1.0
    if n_gt == 0 or n_pred == 0:
        return 0.0, 0.0, 0.0
    hit = sum((gt & pred).values())
    p, r = hit / n_pred, hit / n_gt
    f1 = 0.0 if hit == 0 else 2 * p * r / (p + r)
    return p, r, f1


# -- slots -------------------------------------------------------------------

def slot_values(g: WorldGraph) -> dict:
    """Map ``(instance_id, slot) -> value`` for every non-area node.

    Containment and support are read as the id of the containing or
    supporting node; absent values are ``None``.
    """
    holder = {}
    for e in g.edges:
        if e.kind in ("contains", "supports"):
            holder[(e.dst, "containment" if e.kind == "contains" else "support")] = e.src
    out = {}
    for n in g.nodes.values():
        if n.kind == "area":
            continue
        out[(n.instance_id, "location")] = n.location
        out[(n.instance_id, "state")] = n.state
        out[(n.instance_id, "amount")] = n.amount
        out[(n.instance_id, "containment")] = holder.get((n.instance_id, "containment"))
        out[(n.instance_id, "support")] = holder.get((n.instance_id, "support"))
        for k, v in n.flags:
            out[(n.instance_id, k)] = v
    return out


def changed_slots(g0: WorldGraph, g_end: WorldGraph) -> frozenset:
    """Slots whose value differs between two snapshots, over the union of ids."""
    a, b = slot_values(g0), slot_values(g_end)
    return frozenset(k for k in set(a) | set(b) if a.get(k) != b.get(k))


def replay_actions(g: WorldGraph, agent: AgentPhysState, rules, actions: Sequence[PrimitiveAction]):
    """Apply ``actions`` in order; failed ones leave the world untouched."""
    for a in actions:
        g, agent, _ = execute_primitive(g, agent, rules, a)
    return g, agent


def _check_init(compiled: Compiled, log: TaskRunLog) -> None:
    logged = log.header.get("init_state")
    if logged != compiled.init_digest:
        raise InitMismatch(f"run log init {logged!r} does not match episode init {compiled.init_digest!r}")


def _budget(compiled: Compiled, log: TaskRunLog, k: int) -> int:
    factor = log.header.get("config", {}).get("step_factor", RuntimeConfig.step_factor)
    return RuntimeConfig(step_factor=factor).step_budget(len(compiled.episode.tasks[k].gt_chain))


def _logged_actions(compiled: Compiled, log: TaskRunLog, k: int) -> list:
    verbs = compiled.episode.verbs
    acts = [normalise(a, verbs) for a in log.actions(compiled.episode.tasks[k].task_id)]
    return acts[:_budget(compiled, log, k)]


def wsr_replay(compiled: Compiled, log: TaskRunLog) -> dict:
    """Per-task changed-slot accuracy.

    Each task's predicted primitives are replayed from that task's
    ground-truth start state; tasks with no changed slot score 1.
    """
    _check_init(compiled, log)
    rules = compiled.episode.rules
    out = {}
    for k, task in enumerate(compiled.episode.tasks):
        pre, agent_pre = compiled.task_pre(k)
        gt_end = compiled.task_post(k)[0]
        slots = changed_slots(pre, gt_end)
        if not slots:
            out[task.task_id] = 1.0
            continue
        pred_end, _ = replay_actions(pre, agent_pre, rules, _logged_actions(compiled, log, k))
        want, got = slot_values(gt_end), slot_values(pred_end)
        out[task.task_id] = sum(got.get(s) == want.get(s) for s in slots) / len(slots)
    return out


# -- success, key actions, validity ------------------------------------------

@dataclass
class TaskScore:
    task_id: str
    position: int
    tsr: bool
    tcr: float
    wsr: float
    validity: float
    precision: float
    recall: float
    f1: float
    attempted: int
    valid: int
    replans: int = 0
    visual_queries: int = 0

    def to_doc(self) -> dict:
        return asdict(self)


def _label_of(g: WorldGraph, ref: Optional[str]) -> Optional[str]:
    node = g.nodes.get(ref) if ref else None
    return node.label if node is not None else ref


def _replay_chain(compiled: Compiled, log: TaskRunLog) -> list:
    """Replay every logged task from the episode init, in order.

    Returns one ``(goal_met, key_pairs, attempted, valid)`` tuple per task.
    """
    ep = compiled.episode
    g = compiled.snapshots.get(compiled.init_digest) or compiled.task_pre(0)[0]
    agent = ep.initial_agent()
    rows = []
    for k, task in enumerate(ep.tasks):
        executed, attempted, valid = [], 0, 0
        for a in _logged_actions(compiled, log, k):
            label = _label_of(g, a.object)
            g, agent, fb = execute_primitive(g, agent, ep.rules, a)
            attempted += 1
            if fb.ok:
                valid += 1
                executed.append((a.action_type, label))
        rows.append((check_goal(task.goal, g, ep.labels), executed, attempted, valid))
    return rows


def tcr(key_actions: Iterable[tuple], executed: Iterable[tuple]) -> float:
    keys = Counter(tuple(k) for k in key_actions)
    if not keys:
        return 1.0
    return sum((keys & Counter(executed)).values()) / sum(keys.values())


def tsr_tcr_validity(compiled: Compiled, log: TaskRunLog) -> dict:
    """Per task ``(tsr_flag, tcr, validity)``; an empty run has validity 1."""
    _check_init(compiled, log)
    out = {}
    for task, (goal, executed, attempted, valid) in zip(compiled.episode.tasks, _replay_chain(compiled, log)):
        out[task.task_id] = (goal, tcr(task.key_actions, executed), valid / attempted if attempted else 1.0)
    return out


# -- score card --------------------------------------------------------------

@dataclass
class ScoreCard:
    episode_id: str
    f1: float
    precision: float
    recall: float
    tsr: float
    tcr: float
    wsr: float
    validity: float
    replan_mean: float
    visual_queries: int
    episode_success: bool
    tasks: list = field(default_factory=list)

    def to_doc(self) -> dict:
        doc = asdict(self)
        doc["tasks"] = [t.to_doc() for t in self.tasks]
        return doc

    @classmethod
    def from_doc(cls, doc: Mapping) -> "ScoreCard":
        d = dict(doc)
        d["tasks"] = [TaskScore(**t) for t in d.get("tasks", ())]
        return cls(**d)

    def table(self) -> str:
        """Flat tab-separated rows, stable for diffing."""
        lines = [f"episode\t{self.episode_id}\t{k}\t{_fmt(getattr(self, k))}"
                 for k in ("f1", "precision", "recall", "tsr", "tcr", "wsr", "validity",
                           "replan_mean", "visual_queries", "episode_success")]
        for t in self.tasks:
            for k in ("tsr", "tcr", "wsr", "validity", "f1", "replans", "visual_queries"):
                lines.append(f"task\t{t.task_id}\t{k}\t{_fmt(getattr(t, k))}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def score_run(compiled: Compiled, log: TaskRunLog) -> ScoreCard:
    _check_init(compiled, log)
    ep = compiled.episode
    wsr = wsr_replay(compiled, log)
    chain = _replay_chain(compiled, log)
    tasks = []
    for k, (task, (goal, executed, attempted, valid)) in enumerate(zip(ep.tasks, chain)):
        pred = [a.action_type for a in _logged_actions(compiled, log, k)]
        p, r, f1 = action_f1([a.action_type for a in task.gt_chain], pred)
        end = log.task_end(task.task_id) or {}
        counters = end.get("counters", {})
        tasks.append(TaskScore(
            task.task_id, k, bool(goal), tcr(task.key_actions, executed), wsr[task.task_id],
            valid / attempted if attempted else 1.0, p, r, f1, attempted, valid,
            counters.get("replans", 0), counters.get("visual_queries", 0)))
    n = len(tasks) or 1
    attempted = sum(t.attempted for t in tasks)

    def mean(name):
        return sum(getattr(t, name) for t in tasks) / n

    return ScoreCard(
        ep.episode_id, mean("f1"), mean("precision"), mean("recall"), mean("tsr"), mean("tcr"),
        mean("wsr"), sum(t.valid for t in tasks) / attempted if attempted else 1.0,
        mean("replans"), sum(t.visual_queries for t in tasks),
        bool(tasks) and all(t.tsr for t in tasks), tasks)


def script_run_log(compiled: Compiled, scripts: Mapping[str, Sequence[PrimitiveAction]],
                   config: Optional[RuntimeConfig] = None) -> TaskRunLog:
    """A run log that executes fixed primitive scripts, task by task, with no planner.

    Tasks missing from ``scripts`` get an empty script.
    """
    cfg = config or RuntimeConfig()
    ep = compiled.episode
    log = TaskRunLog()
    g = compiled.snapshots.get(compiled.init_digest) or compiled.task_pre(0)[0]
    agent = ep.initial_agent()
    log.append("run_start", format=LOG_FORMAT, episode_id=ep.episode_id, init_state=snapshot_hash(g),
               config=cfg.to_doc(), tasks=[t.task_id for t in ep.tasks])
    step = 0
    for k, task in enumerate(ep.tasks):
        log.append("task_start", task_id=task.task_id, position=k, instruction=task.instruction,
                   step_budget=cfg.step_budget(len(task.gt_chain)))
        script = [a if isinstance(a, PrimitiveAction) else PrimitiveAction.parse(a)
                  for a in scripts.get(task.task_id, ())]
        valid = 0
        for a in script:
            g, agent, fb = execute_primitive(g, agent, ep.rules, a)
            step += 1
            valid += fb.ok
            log.append("step", task_id=task.task_id, step=step, phase="script", action=a.render(),
                       feedback=fb.to_doc())
        counters = {"primitives_attempted": len(script), "primitives_valid": valid,
                    "replans": 0, "repairs": 0, "visual_queries": 0}
        log.append("task_end", task_id=task.task_id, position=k,
                   goal_reached=check_goal(task.goal, g, ep.labels), reason="script",
                   steps=len(script), counters=counters)
    log.append("run_end", steps=step)
    return log


def gt_run_log(compiled: Compiled, config: Optional[RuntimeConfig] = None) -> TaskRunLog:
    """A run log that executes each task's ground-truth chain verbatim."""
    return script_run_log(compiled, {t.task_id: t.gt_chain for t in compiled.episode.tasks}, config)


# -- aggregation and statistics ----------------------------------------------

@dataclass
class PositionRow:
    position: int
    n: int
    f1: float
    visual_queries: float
    tsr: float


def aggregate_long_horizon(cards: Iterable[ScoreCard]) -> list:
    """Per-position means across episodes; positions without samples are omitted."""
    groups: dict = {}
    for card in cards:
        for t in card.tasks:
            groups.setdefault(t.position, []).append(t)
    rows = []
    for pos in sorted(groups):
        ts = groups[pos]
        n = len(ts)
        rows.append(PositionRow(pos, n, sum(t.f1 for t in ts) / n,
                                sum(t.visual_queries for t in ts) / n, sum(t.tsr for t in ts) / n))
    return rows


@dataclass(frozen=True)
class BootstrapResult:
    delta: float
    ci_low: float
    ci_high: float
    p: float

    def __iter__(self):
        return iter((self.delta, self.ci_low, self.ci_high, self.p))


def paired_bootstrap(first: Sequence[float], second: Sequence[float], resamples: int = 10_000,
                     seed: int = 0) -> BootstrapResult:
    """Paired bootstrap of ``mean(second - first)``.

    The interval is the 2.5/97.5 percentile range of resampled means. The
    two-sided p-value is twice the smaller tail fraction of resampled means
    at or beyond zero, capped at 1.
    """
    a, b = np.asarray(first, dtype=float), np.asarray(second, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired samples differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise LengthMismatch("paired samples are empty")
    diff = b - a
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, diff.size, size=(resamples, diff.size))
    means = diff[idx].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    p = min(1.0, 2.0 * min(float(np.mean(means <= 0)), float(np.mean(means >= 0))))
    return BootstrapResult(float(diff.mean()), float(lo), float(hi), p)
