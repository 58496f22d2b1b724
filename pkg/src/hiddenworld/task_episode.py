"""Skills, tasks with goal predicates, and no-reset episodes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .errors import UnknownLabel
from .rules import AgentPhysState, PrimitiveAction, RuleBase
from .world_graph import Edge, ScenarioInit, WorldGraph, flag_slot, CORE_SLOTS


@dataclass(frozen=True)
class Skill:
    skill_id: str
    center_action: PrimitiveAction
    pre_context: tuple = ()
    post_context: tuple = ()
    source: tuple = ()

    def to_doc(self) -> dict:
        doc = {"id": self.skill_id, "center": self.center_action.render()}
        if self.pre_context:
            doc["pre"] = [a.render() for a in self.pre_context]
        if self.post_context:
            doc["post"] = [a.render() for a in self.post_context]
        if self.source:
            doc["source"] = list(self.source)
        return doc

    @classmethod
    def from_doc(cls, doc) -> "Skill":
        def acts(xs):
            return tuple(PrimitiveAction.parse(x) if isinstance(x, str) else PrimitiveAction.from_doc(x)
                         for x in xs or ())
        center = doc["center"]
        center = PrimitiveAction.parse(center) if isinstance(center, str) else PrimitiveAction.from_doc(center)
        src = doc.get("source") or ()
        return cls(doc.get("id", center.render()), center, acts(doc.get("pre")), acts(doc.get("post")),
                   tuple(src) if isinstance(src, (list, tuple)) else (src,))


def expand_skill(s: Skill) -> list:
    """Primitive sequence of a skill: setup, center action, cleanup."""
    return [*s.pre_context, s.center_action, *s.post_context]


@dataclass(frozen=True)
class GoalClause:
    kind: str                 # "slot", "contains" or "absent"
    subject: str              # instance id or label
    slot: Optional[str] = None
    value: Optional[str] = None

    def render(self) -> str:
        if self.kind == "contains":
            return f"contains({self.subject}, {self.value})"
        if self.kind == "absent":
            return f"absent({self.subject})"
        return f"{self.subject}.{self.slot}={self.value}"

    def to_doc(self) -> dict:
        if self.kind == "contains":
            return {"contains": [self.subject, self.value]}
        if self.kind == "absent":
            return {"absent": self.subject}
        return {"slot": [self.subject, self.slot, self.value]}

    @classmethod
    def from_doc(cls, doc) -> "GoalClause":
        if "contains" in doc:
            c, o = doc["contains"]
            return cls("contains", c, None, o)
        if "absent" in doc:
            return cls("absent", str(doc["absent"]))
        subject, slot, value = doc["slot"]
        if isinstance(value, bool):
            value = "true" if value else "false"
        slot = slot if slot in CORE_SLOTS else flag_slot(slot)
        return cls("slot", subject, slot, None if value is None else str(value))


@dataclass(frozen=True)
class GoalPredicate:
    clauses: tuple = ()

    def render(self) -> str:
        return " and ".join(c.render() for c in self.clauses) if self.clauses else "true"

    def to_doc(self) -> list:
        return [c.to_doc() for c in self.clauses]

    @classmethod
    def from_doc(cls, docs) -> "GoalPredicate":
        return cls(tuple(GoalClause.from_doc(d) for d in docs or ()))

    def selectors(self) -> set:
        out = set()
        for c in self.clauses:
            out.add(c.subject)
            if c.kind == "contains":
                out.add(c.value)
        return out


def _select(g: WorldGraph, selector: str, labels: Optional[set]) -> list:
    if selector in g.nodes:
        return [selector]
    found = sorted(nid for nid, n in g.nodes.items() if n.label == selector)
    if not found and labels is not None and selector not in labels:
        raise UnknownLabel(selector)
    return found


def check_goal(goal: GoalPredicate, g: WorldGraph, labels: Optional[Iterable[str]] = None) -> bool:
    """True iff every clause holds; label selectors are existential.

    ``labels`` is the scenario's declared id/label vocabulary; a selector
    outside it raises ``UnknownLabel`` instead of silently failing.
    """
    vocab = set(labels) if labels is not None else None
    for c in goal.clauses:
        subjects = _select(g, c.subject, vocab)
        if c.kind == "absent":
            if subjects:
                return False
        elif c.kind == "contains":
            items = _select(g, c.value, vocab)
            if not any(Edge(s, "contains", o) in g.edges for s in subjects for o in items):
                return False
        elif not any(g.nodes[s].get(c.slot) == c.value for s in subjects):
            return False
    return True


@dataclass(frozen=True)
class Task:
    task_id: str
    instruction: str
    goal: GoalPredicate
    key_actions: tuple = ()      # (action_type, object label)
    gt_skills: tuple = ()

    @property
    def gt_chain(self) -> list:
        return [a for s in self.gt_skills for a in expand_skill(s)]


@dataclass(frozen=True)
class Episode:
    episode_id: str
    init: ScenarioInit
    tasks: tuple
    rules: RuleBase
    labels: frozenset = frozenset()
    verbs: Mapping[str, str] = field(default_factory=dict)
    area_priors: Mapping[str, tuple] = field(default_factory=dict)
    heuristics: tuple = ()

    @property
    def gt_chains(self) -> list:
        return [t.gt_chain for t in self.tasks]

    def initial_agent(self) -> AgentPhysState:
        return AgentPhysState(self.init.agent_area or self.init.areas[0])

    @property
    def vocabulary(self) -> tuple:
        return self.rules.vocabulary


EPISODE_DONE = None


@dataclass
class EpisodeState:
    """Mutable cursor over an episode; the world is carried across tasks unmodified."""

    episode: Episode
    world: WorldGraph
    agent: AgentPhysState
    g_init: WorldGraph
    task_index: int = 0
    finished: list = field(default_factory=list)

    @classmethod
    def start(cls, episode: Episode, world: WorldGraph) -> "EpisodeState":
        return cls(episode, world, episode.initial_agent(), world)

    @property
    def current_task(self) -> Optional[Task]:
        if self.task_index < len(self.episode.tasks):
            return self.episode.tasks[self.task_index]
        return None


def advance_task(state: EpisodeState) -> Optional[Task]:
    """Close the current task and move to the next; ``EPISODE_DONE`` (None) at the end.

    The world snapshot and the agent's body are carried over untouched, so
    failures in one task persist into the next.
    """
    if state.task_index < len(state.episode.tasks):
        state.finished.append(state.episode.tasks[state.task_index].task_id)
        state.task_index += 1
    return state.current_task
