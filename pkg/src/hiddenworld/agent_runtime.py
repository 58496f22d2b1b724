"""The plan / ground / execute / update loop.

:class:`Environment` is the simulator side of the hidden-state firewall: it
owns the world graph and only ever hands out observations, feedback and
visual reports. :class:`Runner` is the agent side: it keeps the belief
graph, talks to a planner, binds and routes skills, triggers the visual
oracle and repair/replan, and writes a :class:`TaskRunLog`.
"""
from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

from .belief import (
    BeliefGraph,
    apply_forgetting,
    flag_stale,
    init_from_observation,
    integrate_visual_report,
    update,
)
from .config import INTERFACES, RuntimeConfig
from .errors import HiddenWorldError, MalformedResponse, NoTemplate, PlannerDisconnected, UnknownArea
from .observation import Observation, VisualReport, describe_view, observe
from .planners import (
    NAVIGATE,
    PlannerInterface,
    PlanRequest,
    RepairRequest,
    belief_satisfies,
    bind_instance,
    known_position,
)
from .rules import EMPTY, AgentPhysState, Feedback, PrimitiveAction, execute_primitive
from .task_episode import Episode, GoalPredicate, Skill, Task, check_goal, expand_skill
from .world_graph import instantiate, snapshot_hash

LOG_FORMAT = "hiddenworld-runlog/1"


class BudgetExhausted(HiddenWorldError):
    """Step budget used up; caught by the runner and recorded in the log."""


# --------------------------------------------------------------------------
# simulator side

class Environment:
    """Owns the hidden world. Nothing returned from here is a graph."""

    def __init__(self, episode: Episode, interface: str = "diff"):
        if interface not in INTERFACES:
            raise ValueError(f"interface must be one of {INTERFACES}, got {interface!r}")
        self._episode = episode
        self._g_init = instantiate(episode.init)
        self._world = self._g_init
        self._agent = episode.initial_agent()
        self._step = 0
        self._flow = interface == "flow"
        self._images = dict(episode.init.area_images)

    @property
    def areas(self) -> tuple:
        return self._g_init.areas

    @property
    def step_count(self) -> int:
        return self._step

    @property
    def body(self) -> AgentPhysState:
        """The agent's own body state (proprioception, not world state)."""
        return self._agent

    @property
    def init_digest(self) -> str:
        return snapshot_hash(self._g_init)

    def observe(self, initial: bool = False) -> Observation:
        return observe(self._g_init, self._world, self._agent.current_area, self._step,
                       self._images, self._flow, initial)

    def step(self, action: PrimitiveAction):
        out = execute_primitive(self._world, self._agent, self._episode.rules, action)
        self._step += 1
        self._world, self._agent = out.graph, out.agent
        return self.observe(), out.feedback

    def oracle(self, area: str) -> VisualReport:
        """Truthful report of ``area`` as its anchor image shows it, closed storage included."""
        if area not in self._g_init.areas:
            raise UnknownArea(area)
        return VisualReport(area, describe_view(self._world, area, include_closed=True))

    def goal_satisfied(self, task: Task) -> bool:
        return check_goal(task.goal, self._world, self._episode.labels)

    def unmet_clauses(self, task: Task) -> list:
        """World-diff hint: goal clauses that do not hold yet (Diff interface)."""
        return [c.render() for c in task.goal.clauses
                if not check_goal(GoalPredicate((c,)), self._world, self._episode.labels)]


# --------------------------------------------------------------------------
# agent side

@dataclass
class RunCounters:
    primitives_attempted: int = 0
    primitives_valid: int = 0
    replans: int = 0
    repairs: int = 0
    visual_queries: int = 0

    def to_doc(self) -> dict:
        return asdict(self)

    def add(self, other: "RunCounters") -> None:
        for k, v in asdict(other).items():
            setattr(self, k, getattr(self, k) + v)


class TaskRunLog:
    """Ordered JSON-lines record of one run: every step, feedback and counter."""

    def __init__(self, records: Optional[list] = None):
        self.records = list(records or [])

    def append(self, event: str, **fields) -> dict:
        rec = {"event": event, **fields}
        self.records.append(rec)
        return rec

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def loads(cls, text: str) -> "TaskRunLog":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    @classmethod
    def load(cls, path) -> "TaskRunLog":
        return cls.loads(Path(path).read_text())

    def events(self, kind: str) -> list:
        return [r for r in self.records if r["event"] == kind]

    @property
    def header(self) -> dict:
        return self.records[0] if self.records and self.records[0]["event"] == "run_start" else {}

    def task_ids(self) -> list:
        return [r["task_id"] for r in self.events("task_start")]

    def steps(self, task_id: str) -> list:
        return [r for r in self.records if r["event"] == "step" and r["task_id"] == task_id]

    def actions(self, task_id: str) -> list:
        return [PrimitiveAction.parse(r["action"]) for r in self.steps(task_id)]

    def task_end(self, task_id: str) -> Optional[dict]:
        return next((r for r in self.events("task_end") if r["task_id"] == task_id), None)


def _digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def route_area(b: BeliefGraph, skill: Skill, agent: AgentPhysState, areas) -> Optional[str]:
    """Area to stand in before running ``skill``; ``None`` means no constraint.

    Navigation skills route to their target. Otherwise the first argument
    that names a believed, non-held object decides; failing that, an area
    argument. A ``?not:`` hypothesis gives no route.
    """
    areas = tuple(areas)
    a = skill.center_action
    if a.action_type == NAVIGATE:
        return a.object
    for arg in (a.object, a.target):
        node = b.nodes.get(arg) if arg else None
        if node is None or agent.holds(arg):
            continue
        pos = known_position(node)
        if pos is None:
            continue
        if pos not in areas:
            raise UnknownArea(f"{arg} believed at {pos!r}, which is not an area")
        return pos
    for arg in (a.object, a.target):
        if arg in areas:
            return arg
    return None


def _violated_objects(fb: Feedback) -> list:
    p = fb.violated
    if p is None:
        return []
    if p.kind in ("at", "state"):
        return [p.args[0]]
    if p.kind == "contains":
        return [p.args[1], p.args[0]]
    if p.kind == "hand" and p.args[1] != EMPTY:
        return [p.args[1]]
    return []


class Runner:
    """Runs every task of an episode in order without resetting the world."""

    def __init__(self, episode: Episode, planner: PlannerInterface, config: RuntimeConfig = RuntimeConfig(),
                 log: Optional[TaskRunLog] = None):
        self.episode = episode
        self.planner = planner
        self.config = config
        self.log = log if log is not None else TaskRunLog()
        self.env = Environment(episode, config.interface)
        self.rng = random.Random(config.seed)
        self.belief: Optional[BeliefGraph] = None
        self.last_obs: Optional[Observation] = None
        self.totals = RunCounters()
        self._counters = RunCounters()
        self._task: Optional[Task] = None
        self._steps = 0
        self._budget = 0

    @property
    def areas(self) -> tuple:
        return self.env.areas

    # -- whole episode ------------------------------------------------------

    def start(self) -> None:
        """Initial observation and belief; logs ``run_start``."""
        obs = self.env.observe(initial=True)
        self.last_obs = obs
        self.belief = init_from_observation(obs, self.config.belief)
        self.log.append("run_start", format=LOG_FORMAT, episode_id=self.episode.episode_id,
                        init_state=self.env.init_digest, config=self.config.to_doc(),
                        tasks=[t.task_id for t in self.episode.tasks],
                        obs_digest=_digest(obs.to_doc()), belief_digest=self.belief.digest())

    def run(self, upto: Optional[int] = None) -> TaskRunLog:
        """Run tasks ``0..upto`` (all by default) in order, then log ``run_end``."""
        self.start()
        tasks = self.episode.tasks if upto is None else self.episode.tasks[:upto + 1]
        for k, task in enumerate(tasks):
            if k:
                self.belief = apply_forgetting(self.belief, self.config.memory, self.env.body.current_area,
                                               self.rng)
            self.run_task(k, task)
        self.log.append("run_end", counters=self.totals.to_doc(), steps=self.env.step_count)
        return self.log

    # -- one task ------------------------------------------------------------

    def run_task(self, position: int, task: Task) -> dict:
        self._task = task
        self._counters = RunCounters()
        self._steps = 0
        self._budget = self.config.step_budget(len(task.gt_chain))
        self.log.append("task_start", task_id=task.task_id, position=position, instruction=task.instruction,
                        step_budget=self._budget)
        self.planner.on_task_start(self._context(position))
        try:
            reason = self._loop(task)
        except BudgetExhausted:
            reason = "budget"
        except PlannerDisconnected:
            reason = "disconnected"
        goal = self.env.goal_satisfied(task)
        if goal:
            reason = "goal"
        self.totals.add(self._counters)
        return self.log.append("task_end", task_id=task.task_id, position=position, goal_reached=goal,
                               reason=reason, steps=self._steps, counters=self._counters.to_doc())

    def _loop(self, task: Task) -> str:
        if self.env.goal_satisfied(task):
            return "goal"
        completed: list = []
        plan = self._plan(task, completed, None)
        if plan is None:
            return "no_template"
        while True:
            if self.env.goal_satisfied(task):
                return "goal"
            if not plan:
                if self._counters.replans >= self.config.replan_budget:
                    return "replan_budget"
                self._counters.replans += 1
                violated = "plan finished but the goal is not reached"
                self.log.append("replan", task_id=task.task_id, step=self.env.step_count, violated=violated,
                                completed=[s.skill_id for s in completed])
                plan = self._plan(task, completed, self._hint(violated))
                if not plan:
                    return "plan_exhausted"
                continue
            skill = plan.pop(0)
            status, text = self._execute_skill(task, skill)
            if status == "done":
                completed.append(skill)
                continue
            # center failure or stale belief: replan with the completed prefix kept
            if self._counters.replans >= self.config.replan_budget:
                return "replan_budget"
            self._counters.replans += 1
            self.log.append("replan", task_id=task.task_id, step=self.env.step_count, violated=text,
                            completed=[s.skill_id for s in completed])
            plan = self._plan(task, completed, self._hint(text))
            if plan is None:
                return "no_template"

    def _plan(self, task: Task, completed: list, violated: Optional[str]):
        req = PlanRequest(task.task_id, task.instruction, task.goal, self.belief.to_doc(), self.env.body,
                          tuple(completed), violated, self._obs_text(), self.episode.vocabulary, self.areas,
                          self._counters.replans)
        try:
            skills = list(self.planner.plan(req))
        except NoTemplate as exc:
            self.log.append("plan", task_id=task.task_id, step=self.env.step_count, skills=[], error=str(exc))
            return None
        except MalformedResponse as exc:
            self._counters.repairs += 1
            self.log.append("plan", task_id=task.task_id, step=self.env.step_count, skills=[],
                            error=f"malformed: {exc}")
            return []
        self.log.append("plan", task_id=task.task_id, step=self.env.step_count,
                        skills=[s.to_doc() for s in skills])
        return skills

    # -- skills and primitives ----------------------------------------------

    def _ground(self, skill: Skill) -> Skill:
        def norm(a: PrimitiveAction) -> PrimitiveAction:
            verb = self.episode.verbs.get(a.action_type, a.action_type)
            return PrimitiveAction(verb, self._bind(a.object), self._bind(a.target))
        return Skill(skill.skill_id, norm(skill.center_action), tuple(norm(a) for a in skill.pre_context),
                     tuple(norm(a) for a in skill.post_context), skill.source)

    def _bind(self, arg: Optional[str]) -> Optional[str]:
        if arg is None or arg in self.areas or arg in self.belief.nodes:
            return arg
        nid = bind_instance(self.belief, arg, None, self.env.body)
        # unbound labels go out as-is; the engine's feedback will name the instance
        return arg if nid is None else nid

    def _execute_skill(self, task: Task, skill: Skill):
        skill = self._ground(skill)
        prims = expand_skill(skill)
        center = len(skill.pre_context)
        navigates = skill.center_action.action_type == NAVIGATE or any(
            a.action_type == NAVIGATE for a in skill.pre_context)
        if not navigates:
            stale = self._stale_target(skill)
            if stale is not None:
                nid, area = stale
                self._do(task, PrimitiveAction(NAVIGATE, area), "refresh")
                return "stale", f"{nid} was not observed for over {self.config.belief.stale_after} steps"
            area = route_area(self.belief, skill, self.env.body, self.areas)
            if area is not None and area != self.env.body.current_area:
                prims.insert(0, PrimitiveAction(NAVIGATE, area))
                center += 1
        for i, a in enumerate(prims):
            fb = self._do(task, a, "center" if i == center else "context")
            if fb.ok:
                continue
            self._explore(task, fb)
            if self._repair(task, a, fb):
                continue
            if i == center:
                return "failed", f"{a.render()} failed: {fb.text}"
        return "done", None

    def _stale_target(self, skill: Skill):
        stale = flag_stale(self.belief, self.config.belief.stale_after)
        here = self.env.body.current_area
        for arg in (skill.center_action.object, skill.center_action.target):
            if arg not in stale or self.env.body.holds(arg):
                continue
            area = known_position(self.belief.nodes[arg])
            if area is not None and area != here and area in self.areas:
                return arg, area
        return None

    def _do(self, task: Task, action: PrimitiveAction, phase: str) -> Feedback:
        if self._steps >= self._budget:
            raise BudgetExhausted(task.task_id)
        obs, fb = self.env.step(action)
        self._steps += 1
        self._counters.primitives_attempted += 1
        if fb.ok:
            self._counters.primitives_valid += 1
        self.belief = update(self.belief, obs, fb, self.config.belief)
        self.last_obs = obs
        self.log.append("step", task_id=task.task_id, step=self.env.step_count, phase=phase,
                        action=action.render(), feedback=fb.to_doc(), obs_digest=_digest(obs.to_doc()),
                        belief_digest=self.belief.digest(), counters=self._counters.to_doc())
        self.planner.on_feedback({"step": self.env.step_count, "action": action.render(), "outcome": fb.outcome,
                                  "text": fb.text, "violated": fb.violated.render() if fb.violated else None})
        self.planner.on_observation({"step": obs.step, "area": obs.area, "image_ref": obs.image_ref,
                                     "text": self._obs_text()})
        return fb

    def _explore(self, task: Task, fb: Feedback) -> None:
        """Query the visual oracle for objects the failure names but belief cannot place."""
        here = self.env.body.current_area
        for x in _violated_objects(fb):
            if x in self.areas:
                continue
            if not oracle_allowed(self.belief, x, here, self.config.oracle_threshold):
                continue
            nid = bind_instance(self.belief, x)
            node = self.belief.nodes.get(nid) if nid else None
            label = node.label if node is not None and node.label != "?" else re.sub(r"_\d+$", "", x)
            for area in self._search_order(label, here):
                report = self.env.oracle(area)
                self._counters.visual_queries += 1
                self.belief = integrate_visual_report(self.belief, report, self.env.step_count, self.config.belief)
                self.log.append("oracle", task_id=task.task_id, step=self.env.step_count, area=area, target=x,
                                entries=len(report.entries))
                if self._located(x, label):
                    break

    def _search_order(self, label: str, here: str) -> list:
        priors = [a for a in self.episode.area_priors.get(label, ()) if a in self.areas]
        order = priors + [a for a in self.areas if a not in priors]
        return [a for a in order if a != here]

    def _located(self, x: str, label: str) -> bool:
        node = self.belief.nodes.get(x)
        if node is not None:
            return known_position(node) is not None and node.meta.source == "vlm_exploration"
        return any(n.label == label and n.meta.source == "vlm_exploration" for n in self.belief.nodes.values())

    def _repair(self, task: Task, action: PrimitiveAction, fb: Feedback) -> bool:
        for attempt in range(1, self.config.repair_budget + 1):
            req = RepairRequest(task.task_id, action, fb, self.belief.to_doc(), self.env.body, attempt,
                                self.episode.vocabulary, self.areas)
            try:
                fix = self.planner.repair(req)
            except MalformedResponse as exc:
                self._counters.repairs += 1
                self.log.append("repair", task_id=task.task_id, step=self.env.step_count, failed=action.render(),
                                attempt=attempt, proposal=None, error=f"malformed: {exc}")
                continue
            self.log.append("repair", task_id=task.task_id, step=self.env.step_count, failed=action.render(),
                            attempt=attempt, proposal=fix.render() if fix else None)
            if fix is None:
                return False
            self._counters.repairs += 1
            rfb = self._do(task, self._ground_action(fix), "repair")
            if not rfb.ok:
                self._explore(task, rfb)
                continue
            fb = self._do(task, action, "retry")
            if fb.ok:
                return True
            self._explore(task, fb)
        return False

    def _ground_action(self, a: PrimitiveAction) -> PrimitiveAction:
        verb = self.episode.verbs.get(a.action_type, a.action_type)
        return PrimitiveAction(verb, self._bind(a.object), self._bind(a.target))

    # -- text for the planner -------------------------------------------------

    def _obs_text(self) -> str:
        if self.last_obs is None:
            return ""
        return self.last_obs.state_text if self.config.interface == "flow" else self.last_obs.delta_text

    def _hint(self, text: str) -> str:
        if self.config.interface == "flow":
            return f"{text}\ncurrent state:\n{self.last_obs.state_text}"
        unmet = self.env.unmet_clauses(self._task)
        return f"{text}\nunmet goal: {', '.join(unmet)}" if unmet else text

    def _context(self, position: int) -> dict:
        body = self.env.body
        return {
            "task_id": self._task.task_id,
            "position": position,
            "instruction": self._task.instruction,
            "goal": self._task.goal.to_doc(),
            "vocabulary": list(self.episode.vocabulary),
            "areas": list(self.areas),
            "current_region": body.current_area,
            "holding": {"left": body.left_hand, "right": body.right_hand},
            "known_objects": sorted(self.belief.nodes),
            "step_budget": self._budget,
        }


def run_episode(episode: Episode, planner: PlannerInterface, config: RuntimeConfig = RuntimeConfig()) -> TaskRunLog:
    return Runner(episode, planner, config).run()


def run_task(episode: Episode, planner: PlannerInterface, task_index: int = 0,
             config: RuntimeConfig = RuntimeConfig()) -> TaskRunLog:
    """Run the episode's tasks up to and including ``task_index`` (earlier ones first: no reset)."""
    return Runner(episode, planner, config).run(upto=task_index)


def oracle_allowed(b: BeliefGraph, target: str, current_area: str, threshold: float = 0.6) -> bool:
    """Oracle trigger rule: target unbound, or not believed here and below the confidence threshold."""
    nid = bind_instance(b, target)
    if nid is None:
        return True
    node = b.nodes[nid]
    return node.position != current_area and node.meta.confidence < threshold
