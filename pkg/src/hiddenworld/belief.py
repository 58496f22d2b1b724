"""Agent-side belief graph and its update operator.

The belief graph is built only from observations, execution feedback and
visual reports. It can be incomplete, stale or simply wrong; nothing here
ever looks at the hidden world graph.

Values the agent has inferred rather than seen are stored as tagged
hypothesis strings (``?not:open``); :func:`is_hypothesis` tells them apart.
"""
from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional

from .observation import Observation, VisualReport
from .rules import EMPTY, FAIL, SUCCESS, Feedback, Predicate

SOURCES = ("initial_observation", "state_change", "action_feedback", "hypothesis", "vlm_exploration")
HYPOTHESIS_PREFIX = "?"
UNKNOWN_LABEL = "?"


def hypothesis(value: str) -> str:
    return HYPOTHESIS_PREFIX + value


def negated(value: str) -> str:
    """Hypothesis that a slot holds anything except ``value``."""
    return hypothesis("not:" + str(value))


def is_hypothesis(value) -> bool:
    return isinstance(value, str) and value.startswith(HYPOTHESIS_PREFIX)


def excluded_value(value) -> Optional[str]:
    """For ``?not:x`` return ``x``; otherwise ``None``."""
    if is_hypothesis(value) and value[1:].startswith("not:"):
        return value[5:]
    return None


@dataclass(frozen=True)
class BeliefConfig:
    rho_absent: float = 0.5
    rho_fail: float = 0.3
    stale_after: int = 10
    visual_confidence: float = 0.85

    def __post_init__(self):
        for name in ("rho_absent", "rho_fail", "visual_confidence"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.stale_after < 1:
            raise ValueError("stale_after must be >= 1")


@dataclass(frozen=True)
class BeliefMeta:
    source: str
    confidence: float
    last_observed_step: Optional[int]

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown belief source {self.source!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_doc(self) -> dict:
        return {"source": self.source, "confidence": self.confidence,
                "last_observed_step": self.last_observed_step}


@dataclass(frozen=True)
class BeliefNode:
    instance_id: str
    label: str
    position: Optional[str]
    states: tuple = ()          # sorted (slot, value)
    meta: BeliefMeta = BeliefMeta("hypothesis", 0.0, None)

    @property
    def state_map(self) -> dict:
        return dict(self.states)

    def get(self, slot: str):
        if slot in ("location", "position"):
            return self.position
        if slot == "label":
            return self.label
        return self.state_map.get(slot)

    def with_states(self, **updates) -> "BeliefNode":
        s = self.state_map
        s.update(updates)
        return replace(self, states=tuple(sorted(s.items())))

    def to_doc(self) -> dict:
        return {"instance_id": self.instance_id, "label": self.label, "position": self.position,
                "states": dict(self.states), "meta": self.meta.to_doc()}

    @classmethod
    def from_doc(cls, doc) -> "BeliefNode":
        m = doc["meta"]
        return cls(doc["instance_id"], doc["label"], doc.get("position"),
                   tuple(sorted(doc.get("states", {}).items())),
                   BeliefMeta(m["source"], m["confidence"], m.get("last_observed_step")))


@dataclass(frozen=True)
class BeliefGraph:
    nodes: Mapping[str, BeliefNode] = field(default_factory=dict)
    edges: frozenset = frozenset()
    current_step: int = 0
    # what the agent knows of the episode-start view: id -> (area, sorted (slot, value) pairs).
    # A node absent from a later diff of that area must still hold these values.
    # Area None: seen appearing somewhere, so not part of that area's start view.
    baseline: Mapping[str, tuple] = field(default_factory=dict)

    def __contains__(self, instance_id) -> bool:
        return instance_id in self.nodes

    def get(self, instance_id) -> Optional[BeliefNode]:
        return self.nodes.get(instance_id)

    def to_doc(self) -> dict:
        edges = set(self.edges)
        edges.update((n.instance_id, "located_in", n.position) for n in self.nodes.values()
                     if n.position and not is_hypothesis(n.position))
        return {
            "current_step": self.current_step,
            "nodes": [self.nodes[k].to_doc() for k in sorted(self.nodes)],
            "edges": [list(e) for e in sorted(edges)],
            "baseline": {k: {"area": a, "states": dict(s)} for k, (a, s) in sorted(self.baseline.items())},
        }

    @classmethod
    def from_doc(cls, doc) -> "BeliefGraph":
        nodes = {d["instance_id"]: BeliefNode.from_doc(d) for d in doc.get("nodes", ())}
        edges = frozenset(tuple(e) for e in doc.get("edges", ()) if e[1] != "located_in")
        base = {k: (v["area"], tuple(sorted(v["states"].items()))) for k, v in doc.get("baseline", {}).items()}
        return cls(nodes, edges, doc.get("current_step", 0), base)

    def dumps(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def _guess_label(instance_id: str) -> str:
    return re.sub(r"_\d+$", "", instance_id)


def _stamp(old: Optional[int], t: int) -> int:
    return t if old is None else max(old, t)


def _entry_edges(instance_id: str, detail: str) -> set:
    rel, _, holder = (detail or "").partition(" ")
    if rel == "in" and holder:
        return {(holder, "contains", instance_id)}
    if rel == "on" and holder:
        return {(holder, "supports", instance_id)}
    return set()


def _occluded(nid: str, nodes: Mapping[str, BeliefNode], edges) -> bool:
    """Believed to sit inside a container that is believed closed."""
    seen = set()
    while nid not in seen:
        seen.add(nid)
        holder = next((e[0] for e in sorted(edges) if e[1] == "contains" and e[2] == nid), None)
        if holder is None:
            return False
        node = nodes.get(holder)
        if node is not None and node.get("state") == "closed":
            return True
        nid = holder
    return False


def init_from_observation(obs: Observation, config: BeliefConfig = BeliefConfig()) -> BeliefGraph:
    """Step-0 belief: one node per object visible in the starting view."""
    nodes, edges, base = {}, set(), {}
    for e in obs.initial_view:
        states = tuple(sorted((k, v) for k, v in e.states if k != "kind"))
        nodes[e.instance_id] = BeliefNode(e.instance_id, e.label, e.position, states,
                                          BeliefMeta("initial_observation", 1.0, obs.step))
        base[e.instance_id] = (e.position, states)
        edges |= _entry_edges(e.instance_id, e.detail)
    return BeliefGraph(nodes, frozenset(edges), obs.step, base)


def update(b: BeliefGraph, obs: Observation, fb: Optional[Feedback],
           config: BeliefConfig = BeliefConfig()) -> BeliefGraph:
    """Two-pass update: integrate the observed diff, then the execution feedback."""
    t = max(obs.step, b.current_step)
    nodes = dict(b.nodes)
    edges = set(b.edges)
    delta = obs.delta_set
    touched = set()
    base = dict(b.baseline)

    # Pass 1: observation
    for n in delta.appeared:
        states = {k: v for k, v in n.slots().items() if k not in ("label", "location", "kind")}
        old = nodes.get(n.instance_id)
        stamp = _stamp(old.meta.last_observed_step if old else None, t)
        nodes[n.instance_id] = BeliefNode(n.instance_id, n.label, n.location,
                                          tuple(sorted(states.items())),
                                          BeliefMeta("state_change", 1.0, stamp))
        # an appearance means it was not part of this area's start view
        base.setdefault(n.instance_id, (None, ()))
        touched.add(n.instance_id)
    for nid, slot, old, new in delta.changed_attrs:
        node = nodes.get(nid)
        if node is None:
            node = BeliefNode(nid, UNKNOWN_LABEL, obs.area)
        # a changed attribute means the node sits in this area both now and at episode start
        node = replace(node, position=obs.area)
        _, known = base.get(nid, (obs.area, ()))
        if slot not in dict(known) and slot not in ("location", "label", "kind"):
            base[nid] = (obs.area, tuple(sorted((*known, (slot, old)))))
        stamp = _stamp(node.meta.last_observed_step, t)
        if slot == "location":
            node = replace(node, position=new)
        elif slot == "label":
            node = replace(node, label=new)
        elif slot != "kind":
            s = node.state_map
            if new is None:
                s.pop(slot, None)
            else:
                s[slot] = new
            node = replace(node, states=tuple(sorted(s.items())))
        nodes[nid] = replace(node, meta=BeliefMeta("state_change", 1.0, stamp))
        touched.add(nid)
    for nid in delta.disappeared:
        node = nodes.get(nid)
        touched.add(nid)
        if node is None or node.position != obs.area:
            continue
        nodes[nid] = replace(node, meta=BeliefMeta(node.meta.source, min(node.meta.confidence, config.rho_absent),
                                                   _stamp(node.meta.last_observed_step, t)))
    added = {tuple(e) for e, how in delta.edge_changes if how == "added"}
    for e, how in delta.edge_changes:
        if how == "removed":
            edges.discard(tuple(e))
    # edges touching a node outside the start view can only exist as "added"
    fresh = {n.instance_id for n in delta.appeared}
    edges = {e for e in edges if e in added or not (e[0] in fresh or e[2] in fresh)} | added
    # slots absent from the diff of a node visible at episode start are back at their start values
    changed = {(c[0], c[1]) for c in delta.changed_attrs}
    skip = set(delta.disappeared) | {n.instance_id for n in delta.appeared}
    for nid, (area, states) in sorted(base.items()):
        node = nodes.get(nid)
        if area != obs.area or nid in skip or node is None:
            continue
        current = node.state_map
        restored = dict(current)
        for k, v in states:
            if (nid, k) in changed:
                continue
            if v is None:
                restored.pop(k, None)
            else:
                restored[k] = v
        if node.position != area or restored != current:
            meta = node.meta if nid in touched else BeliefMeta("state_change", 1.0,
                                                               _stamp(node.meta.last_observed_step, t))
            nodes[nid] = replace(node, position=area, states=tuple(sorted(restored.items())), meta=meta)
            touched.add(nid)
    vanished = set(delta.disappeared)
    for nid, node in list(nodes.items()):
        if nid in touched or node.position != obs.area:
            continue
        start_area = base[nid][0] if nid in base else obs.area
        if start_area != obs.area:
            # not in this area's start view, so it would be listed as appeared if still visible
            if not _occluded(nid, nodes, edges) and node.meta.confidence > config.rho_absent:
                vanished.add(nid)
                nodes[nid] = replace(node, meta=BeliefMeta(node.meta.source, config.rho_absent,
                                                           _stamp(node.meta.last_observed_step, t)))
            continue
        # objects believed here and not reported gone are confirmed by the view
        if node.meta.last_observed_step is None or node.meta.last_observed_step < t:
            nodes[nid] = replace(node, meta=replace(node.meta, last_observed_step=t))

    # Pass 2: feedback
    if fb is not None and fb.outcome == FAIL and fb.violated is not None:
        nodes, edges = _integrate_failure(nodes, edges, fb, t, config)
        return BeliefGraph(nodes, frozenset(edges), t, base)
    elif fb is not None and fb.outcome == SUCCESS and fb.action is not None:
        for nid in (fb.action.object, fb.action.target):
            node = nodes.get(nid) if nid and nid not in vanished else None
            if node is not None and node.meta.confidence < 1.0:
                nodes[nid] = replace(node, meta=replace(node.meta, confidence=1.0))
    return BeliefGraph(nodes, frozenset(edges), t, base)


def _integrate_failure(nodes: dict, edges: set, fb: Feedback, t: int, config: BeliefConfig):
    p: Predicate = fb.violated
    meta = BeliefMeta("action_feedback", config.rho_fail, t)

    def ensure(nid: str) -> BeliefNode:
        node = nodes.get(nid)
        if node is not None:
            return node
        label = _guess_label(nid)
        if fb.action is not None:
            for arg in (fb.action.object, fb.action.target):
                if arg and arg != nid and arg not in nodes and nid.startswith(arg):
                    label = arg
        return BeliefNode(nid, label, None)

    if p.kind == "at":
        obj, area = p.args
        node = ensure(obj)
        position = node.position
        if position is None or position == area or is_hypothesis(position):
            position = negated(area)
        node = replace(node, position=position,
                       meta=replace(meta, last_observed_step=_stamp(node.meta.last_observed_step, t)))
        nodes[obj] = node
    elif p.kind == "state":
        obj, slot, value = p.args
        node = ensure(obj)
        current = node.get(slot)
        if current is None or current == value or is_hypothesis(current):
            node = node.with_states(**{slot: negated(value)})
        nodes[obj] = replace(node, meta=replace(meta, last_observed_step=_stamp(node.meta.last_observed_step, t)))
    elif p.kind == "contains":
        container, item = p.args
        edges.discard((container, "contains", item))
        if item in nodes:
            node = nodes[item]
            nodes[item] = replace(node, meta=replace(meta, last_observed_step=_stamp(node.meta.last_observed_step, t)))
    elif p.kind == "hand" and p.args[1] != EMPTY and p.args[1] in nodes:
        node = nodes[p.args[1]]
        nodes[p.args[1]] = replace(node, meta=replace(meta, last_observed_step=_stamp(node.meta.last_observed_step, t)))
    else:
        # nothing in the graph to correct (agent_at, empty hands); mark exercised nodes instead
        for nid in (fb.action.object, fb.action.target) if fb.action else ():
            if nid in nodes:
                node = nodes[nid]
                nodes[nid] = replace(node, meta=replace(node.meta, source="hypothesis"))
    return nodes, edges


def flag_stale(b: BeliefGraph, stale_after: int) -> set:
    """Ids not observed for more than ``stale_after`` steps (never-observed nodes count)."""
    if stale_after < 1:
        raise ValueError("stale_after must be >= 1")
    return {nid for nid, n in b.nodes.items()
            if n.meta.last_observed_step is None
            or b.current_step - n.meta.last_observed_step > stale_after}


def integrate_visual_report(b: BeliefGraph, report: VisualReport, step: Optional[int] = None,
                            config: BeliefConfig = BeliefConfig()) -> BeliefGraph:
    t = b.current_step if step is None else max(step, b.current_step)
    if not report.entries:
        return b
    nodes = dict(b.nodes)
    edges = set(b.edges)
    for e in report.entries:
        old = nodes.get(e.instance_id)
        stamp = _stamp(old.meta.last_observed_step if old else None, t)
        states = dict(old.states) if old else {}
        states.update((k, v) for k, v in e.states if k != "kind")
        nodes[e.instance_id] = BeliefNode(e.instance_id, e.label, e.position, tuple(sorted(states.items())),
                                          BeliefMeta("vlm_exploration", config.visual_confidence, stamp))
        edges = {x for x in edges if not (x[2] == e.instance_id and x[1] in ("contains", "supports"))}
        edges |= _entry_edges(e.instance_id, e.detail)
    return BeliefGraph(nodes, frozenset(edges), t, b.baseline)


@dataclass(frozen=True)
class MemoryMode:
    kind: str = "full"          # "full" | "none" | "bounded"
    cap: int = 20
    rate: float = 0.1

    def __post_init__(self):
        if self.kind not in ("full", "none", "bounded"):
            raise ValueError(f"unknown memory mode {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "MemoryMode":
        return cls(text)


FULL = MemoryMode("full")
NONE = MemoryMode("none")


def bounded(cap: int = 20, rate: float = 0.1) -> MemoryMode:
    return MemoryMode("bounded", cap, rate)


def apply_forgetting(b: BeliefGraph, mode: MemoryMode, current_area: Optional[str] = None,
                     rng: Optional[random.Random] = None) -> BeliefGraph:
    """Task-boundary memory policy."""
    if mode.kind == "full":
        return b
    if mode.kind == "none":
        keep = {k: n for k, n in b.nodes.items() if n.position == current_area}
    else:
        order = sorted(b.nodes.values(), key=lambda n: (
            n.meta.confidence,
            -1 if n.meta.last_observed_step is None else n.meta.last_observed_step,
            n.instance_id))
        excess = max(0, len(order) - mode.cap)
        keep = {n.instance_id: n for n in order[excess:]}
        if mode.rate > 0:
            if rng is None:
                raise ValueError("bounded forgetting needs the run's seeded rng")
            for nid in sorted(keep):
                if keep[nid].position == current_area:
                    continue
                if rng.random() < mode.rate:
                    del keep[nid]
    edges = frozenset(e for e in b.edges if e[0] in keep and e[2] in keep)
    base = {k: v for k, v in b.baseline.items() if k in keep}
    return BeliefGraph(keep, edges, b.current_step, base)
