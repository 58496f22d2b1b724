"""Planner side of the agent loop.

Planners see only what crosses the firewall: the instruction and goal, a
serialized belief snapshot, the agent's own body state, the completed skill
prefix and failure text. Two in-process planners ship with the package:
:class:`HeuristicPlanner` (goal-pattern templates grounded against belief)
and :class:`ScriptedPlanner` (replays the ground-truth skills).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

from .belief import BeliefGraph, BeliefNode, excluded_value, is_hypothesis
from .errors import NoTemplate
from .rules import AgentPhysState, Feedback, PrimitiveAction
from .task_episode import Episode, GoalClause, GoalPredicate, Skill

NAVIGATE = "go_to"
UNBOUND = None


@dataclass(frozen=True)
class PlanRequest:
    task_id: str
    instruction: str
    goal: GoalPredicate
    belief: Mapping[str, Any]            # BeliefGraph.to_doc()
    agent: AgentPhysState
    completed: tuple = ()                # Skill
    violated: Optional[str] = None
    observation: str = ""
    vocabulary: tuple = ()
    areas: tuple = ()
    attempt: int = 0                     # 0 = first plan, n = n-th replan

    def to_doc(self) -> dict:
        return {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "goal": self.goal.to_doc(),
            "belief": self.belief,
            "agent": self.agent.to_doc(),
            "completed": [s.to_doc() for s in self.completed],
            "violated": self.violated,
            "observation": self.observation,
            "vocabulary": list(self.vocabulary),
            "areas": list(self.areas),
            "attempt": self.attempt,
        }

    @classmethod
    def from_doc(cls, doc) -> "PlanRequest":
        return cls(doc["task_id"], doc["instruction"], GoalPredicate.from_doc(doc["goal"]), doc["belief"],
                   AgentPhysState.from_doc(doc["agent"]), tuple(Skill.from_doc(s) for s in doc["completed"]),
                   doc.get("violated"), doc.get("observation", ""), tuple(doc.get("vocabulary", ())),
                   tuple(doc.get("areas", ())), doc.get("attempt", 0))


@dataclass(frozen=True)
class RepairRequest:
    task_id: str
    failed: PrimitiveAction
    feedback: Feedback
    belief: Mapping[str, Any]
    agent: AgentPhysState
    attempt: int = 1
    vocabulary: tuple = ()
    areas: tuple = ()

    def to_doc(self) -> dict:
        return {
            "task_id": self.task_id,
            "failed": self.failed.render(),
            "feedback": self.feedback.to_doc(),
            "belief": self.belief,
            "agent": self.agent.to_doc(),
            "attempt": self.attempt,
            "vocabulary": list(self.vocabulary),
            "areas": list(self.areas),
        }

    @classmethod
    def from_doc(cls, doc) -> "RepairRequest":
        return cls(doc["task_id"], PrimitiveAction.parse(doc["failed"]), Feedback.from_doc(doc["feedback"]),
                   doc["belief"], AgentPhysState.from_doc(doc["agent"]), doc.get("attempt", 1),
                   tuple(doc.get("vocabulary", ())), tuple(doc.get("areas", ())))


class PlannerInterface:
    """What the runner needs from a planner.

    ``plan`` returns an ordered skill list; ``repair`` proposes one corrected
    primitive or ``None`` to give up and let the runner replan. The ``on_*``
    hooks let wire adapters forward context; in-process planners ignore them.
    """

    name = "planner"

    def plan(self, request: PlanRequest) -> list:
        raise NotImplementedError

    def repair(self, request: RepairRequest) -> Optional[PrimitiveAction]:
        return None

    def on_task_start(self, context: Mapping[str, Any]) -> None:
        pass

    def on_observation(self, payload: Mapping[str, Any]) -> None:
        pass

    def on_feedback(self, payload: Mapping[str, Any]) -> None:
        pass


# --------------------------------------------------------------------------
# grounding against belief

def _rank(node: BeliefNode):
    stamp = node.meta.last_observed_step
    uncertain = node.position is None or is_hypothesis(node.position)
    return (uncertain, -node.meta.confidence, -(stamp if stamp is not None else -1), node.instance_id)


def bind_instance(b: BeliefGraph, label: str, constraints: Optional[Mapping[str, Any]] = None,
                  agent: Optional[AgentPhysState] = None) -> Optional[str]:
    """Best belief node for ``label`` under attribute constraints, or ``UNBOUND``.

    Ranking: observed positions before hypotheses, then higher confidence,
    then more recent observation, then instance id.
    """
    if label in b.nodes and not constraints:
        return label
    found = []
    for node in b.nodes.values():
        if node.label != label and node.instance_id != label:
            continue
        if constraints and not _meets(node, constraints, agent):
            continue
        found.append(node)
    if not found:
        return UNBOUND
    return min(found, key=_rank).instance_id


def _meets(node: BeliefNode, constraints: Mapping[str, Any], agent: Optional[AgentPhysState]) -> bool:
    for key, want in constraints.items():
        if key == "held":
            held = agent is not None and agent.holds(node.instance_id)
            if held != bool(want):
                return False
        elif key in ("position", "location"):
            if node.position != want:
                return False
        else:
            slot = GoalClause.from_doc({"slot": ["_", key, want]})
            if node.get(slot.slot) != slot.value:
                return False
    return True


def known_position(node: Optional[BeliefNode]) -> Optional[str]:
    """Area a node is believed in: observed value, or the area named by a positive hypothesis."""
    if node is None or node.position is None:
        return None
    if not is_hypothesis(node.position):
        return node.position
    if excluded_value(node.position) is not None:
        return None
    return node.position[1:]


def _subjects(b: BeliefGraph, selector: str) -> list:
    if selector in b.nodes:
        return [b.nodes[selector]]
    return [b.nodes[k] for k in sorted(b.nodes) if b.nodes[k].label == selector]


def clause_holds(b: BeliefGraph, clause: GoalClause) -> bool:
    """Evaluate one goal clause against belief (label selectors are existential)."""
    subjects = _subjects(b, clause.subject)
    if clause.kind == "absent":
        # belief never deletes nodes; a downgraded node counts as gone
        return all(s.meta.confidence <= 0.5 for s in subjects)
    if clause.kind == "contains":
        items = {n.instance_id for n in _subjects(b, clause.value)}
        return any((s.instance_id, "contains", o) in b.edges for s in subjects for o in items)
    return any(s.get(clause.slot) == clause.value for s in subjects)


def belief_satisfies(b: BeliefGraph, goal: GoalPredicate) -> bool:
    return all(clause_holds(b, c) for c in goal.clauses)


# --------------------------------------------------------------------------
# heuristic planner

@dataclass(frozen=True)
class TemplateStep:
    do: PrimitiveAction
    pre: tuple = ()
    skip_if: tuple = ()               # ("held", label) | ("slot", GoalClause)
    requires_known: tuple = ()
    bind: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)

    @classmethod
    def from_doc(cls, doc) -> "TemplateStep":
        skips = []
        for item in doc.get("skip_if") or ():
            if "held" in item:
                skips.append(("held", str(item["held"])))
            else:
                skips.append(("slot", GoalClause.from_doc(item)))
        return cls(PrimitiveAction.parse(doc["do"]), tuple(PrimitiveAction.parse(x) for x in doc.get("pre") or ()),
                   tuple(skips), tuple(doc.get("requires_known") or ()), dict(doc.get("bind") or {}))


@dataclass(frozen=True)
class PlanTemplate:
    template_id: str
    when: GoalPredicate
    steps: tuple

    @classmethod
    def from_doc(cls, doc) -> "PlanTemplate":
        return cls(str(doc["id"]), GoalPredicate.from_doc(doc.get("when") or ()),
                   tuple(TemplateStep.from_doc(s) for s in doc.get("steps") or ()))

    def matches(self, goal: GoalPredicate) -> bool:
        return all(c in goal.clauses for c in self.when.clauses)


class _Grounder:
    """Binds template labels to belief instances, consistently within one plan."""

    def __init__(self, belief: BeliefGraph, agent: AgentPhysState, areas: Sequence[str]):
        self.belief = belief
        self.agent = agent
        self.areas = set(areas)
        self.bound: dict = {}

    def resolve(self, label: Optional[str], constraints=None) -> Optional[str]:
        if label is None or label in self.areas:
            return label
        if label in self.bound:
            return self.bound[label]
        nid = bind_instance(self.belief, label, constraints, self.agent)
        if nid is UNBOUND:
            return label
        self.bound[label] = nid
        return nid

    def node(self, label: str) -> Optional[BeliefNode]:
        nid = self.resolve(label)
        return self.belief.nodes.get(nid)

    def known(self, label: str) -> bool:
        node = self.node(label)
        return node is not None and node.position is not None and not is_hypothesis(node.position)

    def held(self, label: str) -> bool:
        for nid in self.agent.holding():
            node = self.belief.nodes.get(nid)
            if nid == label or self.bound.get(label) == nid or (node is not None and node.label == label):
                return True
        return False

    def skip(self, cond) -> bool:
        kind, arg = cond
        if kind == "held":
            return self.held(arg)
        if arg.kind == "slot" and arg.subject in self.bound:
            node = self.belief.nodes.get(self.bound[arg.subject])
            return node is not None and node.get(arg.slot) == arg.value
        return clause_holds(self.belief, arg)

    def action(self, a: PrimitiveAction, bind: Mapping) -> Optional[PrimitiveAction]:
        obj = self.resolve(a.object, bind.get(a.object)) if a.object else None
        target = a.target
        if target == "@position":
            target = known_position(self.belief.nodes.get(obj))
            if target is None:
                return None
        elif target is not None:
            target = self.resolve(target, bind.get(target))
        return PrimitiveAction(a.action_type, obj, target)


class HeuristicPlanner(PlannerInterface):
    """Rule-template planner keyed by goal-clause patterns, grounded against belief."""

    name = "heuristic"

    def __init__(self, templates: Sequence[Any], verbs: Optional[Mapping[str, str]] = None):
        self.templates = tuple(t if isinstance(t, PlanTemplate) else PlanTemplate.from_doc(t) for t in templates)
        self.verbs = dict(verbs or {})

    @classmethod
    def for_episode(cls, episode: Episode) -> "HeuristicPlanner":
        return cls(episode.heuristics, episode.verbs)

    def template_for(self, goal: GoalPredicate) -> PlanTemplate:
        for t in self.templates:
            if t.matches(goal):
                return t
        raise NoTemplate(f"no plan template for goal {goal.render()}")

    def plan(self, request: PlanRequest) -> list:
        template = self.template_for(request.goal)
        belief = BeliefGraph.from_doc(request.belief)
        if belief_satisfies(belief, request.goal):
            return []
        g = _Grounder(belief, request.agent, request.areas)
        skills = []
        for i, step in enumerate(template.steps):
            if any(g.skip(c) for c in step.skip_if):
                continue
            if not all(g.known(label) for label in step.requires_known):
                continue
            center = g.action(self._norm(step.do), step.bind)
            if center is None:
                continue
            pre = tuple(x for x in (g.action(self._norm(p), step.bind) for p in step.pre) if x is not None)
            skills.append(Skill(f"{template.template_id}/{i + 1}", center, pre))
        return skills

    def repair(self, request: RepairRequest) -> Optional[PrimitiveAction]:
        p = request.feedback.violated
        if p is None:
            return None
        if p.kind == "state" and p.args[1] == "state" and p.args[2] in ("open", "closed"):
            verb = "open" if p.args[2] == "open" else "close"
            fix = PrimitiveAction(verb, p.args[0])
            return None if fix == request.failed else fix
        if p.kind == "agent_at":
            return PrimitiveAction(NAVIGATE, p.args[0])
        return None

    def _norm(self, a: PrimitiveAction) -> PrimitiveAction:
        return PrimitiveAction(self.verbs.get(a.action_type, a.action_type), a.object, a.target)


class ScriptedPlanner(PlannerInterface):
    """Replays the ground-truth skills that are not yet completed; never repairs."""

    name = "scripted"

    def __init__(self, episode: Episode, chains: Optional[Mapping[str, Sequence[Skill]]] = None):
        self.chains = {t.task_id: tuple(t.gt_skills) for t in episode.tasks}
        if chains:
            self.chains.update({k: tuple(v) for k, v in chains.items()})

    def plan(self, request: PlanRequest) -> list:
        chain = self.chains.get(request.task_id, ())
        return list(chain[len(request.completed):])


class SequencePlanner(PlannerInterface):
    """Emits a fixed primitive sequence per task, one skill per primitive."""

    name = "sequence"

    def __init__(self, actions: Mapping[str, Sequence[Any]]):
        self.actions = {k: tuple(a if isinstance(a, PrimitiveAction) else PrimitiveAction.parse(a) for a in v)
                        for k, v in actions.items()}

    def plan(self, request: PlanRequest) -> list:
        if request.attempt:
            return []
        return [Skill(f"seq/{i + 1}", a) for i, a in enumerate(self.actions.get(request.task_id, ()))]
