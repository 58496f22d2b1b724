"""Hidden world state as a typed attributed graph.

A :class:`WorldGraph` is an immutable snapshot. Nothing in this module
mutates a published graph; the rule engine builds successor snapshots
through :meth:`WorldGraph._successor`, which is private to the package.

Object placement is carried by the ``location`` attribute of each node.
``located_in`` edges are a derived view (:meth:`WorldGraph.located_in_edges`)
and are never stored, hashed or diffed.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Any, Iterable, Iterator, Mapping, NamedTuple, Optional

from .errors import (
    ContainmentCycle,
    DuplicateInstanceId,
    InvariantViolation,
    UnknownAreaReference,
)

NODE_KINDS = ("area", "object", "substance", "product")
EDGE_KINDS = ("located_in", "contains", "supports", "functional")
STORED_EDGE_KINDS = ("contains", "supports", "functional")
AMOUNTS = ("full", "partial", "empty")

# Slots addressable on every node; flags use the "state.<key>" form.
CORE_SLOTS = ("label", "kind", "location", "state", "amount")
FLAG_PREFIX = "state."

GRAPH_FORMAT = "hiddenworld-graph/1"


class Edge(NamedTuple):
    src: str
    kind: str
    dst: str

    def render(self) -> str:
        return f"{self.src} {self.kind} {self.dst}"


def flag_slot(key: str) -> str:
    """Normalise a flag key (``loaded`` or ``state.loaded``) to slot form."""
    return key if key.startswith(FLAG_PREFIX) else FLAG_PREFIX + key


@dataclass(frozen=True)
class Node:
    instance_id: str
    label: str
    kind: str = "object"
    location: Optional[str] = None
    state: Optional[str] = None
    amount: Optional[str] = None
    # sorted (slot, value) pairs, slot always "state.<key>"
    flags: tuple = ()

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise InvariantViolation(f"{self.instance_id}: unknown node kind {self.kind!r}")
        if self.amount is not None and self.amount not in AMOUNTS:
            raise InvariantViolation(f"{self.instance_id}: amount must be one of {AMOUNTS}, got {self.amount!r}")
        if self.kind == "substance" and self.amount is None:
            raise InvariantViolation(f"{self.instance_id}: substance nodes need an amount")
        if self.kind == "area" and (self.location is not None or self.state is not None):
            raise InvariantViolation(f"{self.instance_id}: area nodes carry no location or state")

    @classmethod
    def build(cls, instance_id: str, label: str, kind: str = "object", location=None,
              state=None, amount=None, flags: Optional[Mapping[str, str]] = None) -> "Node":
        pairs = tuple(sorted((flag_slot(k), str(v)) for k, v in (flags or {}).items()))
        return cls(instance_id, label, kind, location, state, amount, pairs)

    @property
    def flag_map(self) -> dict:
        return dict(self.flags)

    def get(self, slot: str) -> Optional[str]:
        """Read a slot by name; unknown flags read as ``None``."""
        if slot in CORE_SLOTS:
            return getattr(self, slot)
        if slot == "instance_id":
            return self.instance_id
        slot = flag_slot(slot)
        for k, v in self.flags:
            if k == slot:
                return v
        return None

    def slots(self) -> dict:
        """All non-empty slots as a flat mapping."""
        out = {s: getattr(self, s) for s in CORE_SLOTS if getattr(self, s) is not None}
        out.update(self.flags)
        return out

    def with_slot(self, slot: str, value: Optional[str]) -> "Node":
        if slot in ("label", "kind"):
            if value is None:
                raise InvariantViolation(f"{self.instance_id}: {slot} cannot be cleared")
            return replace(self, **{slot: value})
        if slot in ("location", "state", "amount"):
            return replace(self, **{slot: value})
        slot = flag_slot(slot)
        flags = dict(self.flags)
        if value is None:
            flags.pop(slot, None)
        else:
            flags[slot] = value
        return replace(self, flags=tuple(sorted(flags.items())))

    def to_doc(self) -> dict:
        doc = {
            "instance_id": self.instance_id,
            "label": self.label,
            "kind": self.kind,
            "location": self.location,
            "state": self.state,
            "amount": self.amount,
        }
        doc.update(self.flags)
        return doc

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Node":
        flags = {k: v for k, v in doc.items() if k.startswith(FLAG_PREFIX)}
        return cls.build(doc["instance_id"], doc["label"], doc.get("kind", "object"),
                         doc.get("location"), doc.get("state"), doc.get("amount"), flags)

    def canonical(self) -> str:
        # cached by hand: frozen dataclass, so go through object.__setattr__
        try:
            return self.__dict__["_canon"]
        except KeyError:
            text = json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))
            object.__setattr__(self, "_canon", text)
            return text


@dataclass(frozen=True)
class ScenarioInit:
    """Everything needed to instantiate the hidden world at episode start."""

    areas: tuple
    objects: tuple = ()
    edges: tuple = ()
    area_labels: Mapping[str, str] = field(default_factory=dict)
    area_images: Mapping[str, str] = field(default_factory=dict)
    agent_area: Optional[str] = None


class WorldGraph:
    """Immutable hidden world snapshot: nodes, stored edges, ordered areas."""

    __slots__ = ("_nodes", "_edges", "_areas", "_step", "_view")

    def __init__(self, nodes: Mapping[str, Node], edges: Iterable, areas: Iterable[str],
                 step_counter: int = 0, check: bool = True):
        self._nodes = dict(nodes)
        self._edges = frozenset(Edge(*e) for e in edges)
        self._areas = tuple(areas)
        self._step = int(step_counter)
        self._view = None
        if check:
            check_invariants(self)

    # read-only surface
    @property
    def nodes(self) -> Mapping[str, Node]:
        if self._view is None:
            self._view = MappingProxyType(self._nodes)
        return self._view

    @property
    def edges(self) -> frozenset:
        return self._edges

    @property
    def areas(self) -> tuple:
        return self._areas

    @property
    def step_counter(self) -> int:
        return self._step

    def __contains__(self, instance_id: str) -> bool:
        return instance_id in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def objects(self) -> Iterator[Node]:
        return (n for n in self._nodes.values() if n.kind != "area")

    def located_in_edges(self) -> list:
        return sorted(Edge(n.instance_id, "located_in", n.location) for n in self.objects())

    def incoming(self, instance_id: str, kind: Optional[str] = None) -> list:
        return sorted(e for e in self._edges if e.dst == instance_id and (kind is None or e.kind == kind))

    def outgoing(self, instance_id: str, kind: Optional[str] = None) -> list:
        return sorted(e for e in self._edges if e.src == instance_id and (kind is None or e.kind == kind))

    def __eq__(self, other) -> bool:
        if not isinstance(other, WorldGraph):
            return NotImplemented
        return (self._nodes == other._nodes and self._edges == other._edges
                and self._areas == other._areas)

    def __hash__(self):
        return hash(snapshot_hash(self))

    def __repr__(self) -> str:
        return f"WorldGraph({len(self._nodes)} nodes, {len(self._edges)} edges, step={self._step})"

    def __deepcopy__(self, memo):
        return WorldGraph(copy.deepcopy(self._nodes, memo), set(self._edges), self._areas,
                          self._step, check=False)

    def __reduce__(self):
        return (WorldGraph, (self._nodes, tuple(self._edges), self._areas, self._step, False))

    def _successor(self, nodes: Mapping[str, Node], edges: Iterable, steps: int = 1) -> "WorldGraph":
        """Build the next snapshot. Only the rule engine and delta replay call this."""
        return WorldGraph(nodes, edges, self._areas, self._step + steps)


def check_invariants(g: WorldGraph) -> None:
    """Raise if ``g`` breaks any structural invariant."""
    areas = set(g._areas)
    if len(areas) != len(g._areas):
        raise DuplicateInstanceId(f"duplicate area ids in {g._areas}")
    for nid, node in g._nodes.items():
        if nid != node.instance_id:
            raise InvariantViolation(f"node keyed {nid!r} carries id {node.instance_id!r}")
        if node.kind == "area":
            if nid not in areas:
                raise UnknownAreaReference(f"area node {nid!r} missing from area list")
        elif node.location not in areas:
            raise UnknownAreaReference(f"{nid}: location {node.location!r} is not an area")
    for a in g._areas:
        if a not in g._nodes or g._nodes[a].kind != "area":
            raise UnknownAreaReference(f"area {a!r} has no area node")
    children: dict = {}
    for e in g._edges:
        if e.kind not in STORED_EDGE_KINDS:
            raise InvariantViolation(f"edge kind {e.kind!r} cannot be stored: {e}")
        if e.src not in g._nodes or e.dst not in g._nodes:
            raise InvariantViolation(f"dangling edge {e.render()}")
        if e.kind == "contains":
            children.setdefault(e.src, []).append(e.dst)
    _check_acyclic(children)


def _check_acyclic(children: Mapping[str, list]) -> None:
    done, active = set(), set()
    for root in sorted(children):
        if root in done:
            continue
        stack = [(root, iter(children.get(root, ())))]
        active.add(root)
        while stack:
            nid, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                active.discard(nid)
                done.add(nid)
            elif nxt in active:
                raise ContainmentCycle(f"containment cycle through {nxt!r}")
            elif nxt not in done:
                active.add(nxt)
                stack.append((nxt, iter(children.get(nxt, ()))))


def instantiate(init: ScenarioInit) -> WorldGraph:
    """Build the step-0 world graph for a validated scenario."""
    nodes: dict = {}
    for a in init.areas:
        if a in nodes:
            raise DuplicateInstanceId(f"area {a!r} declared twice")
        nodes[a] = Node(a, init.area_labels.get(a, a), "area")
    for obj in init.objects:
        if obj.instance_id in nodes:
            raise DuplicateInstanceId(f"instance id {obj.instance_id!r} declared twice")
        if obj.location not in init.areas:
            raise UnknownAreaReference(f"{obj.instance_id}: unknown area {obj.location!r}")
        nodes[obj.instance_id] = obj
    return WorldGraph(nodes, init.edges, init.areas, 0)


def lookup_instance(g: WorldGraph, instance_id: str) -> Optional[Node]:
    return g.nodes.get(instance_id)


def to_document(g: WorldGraph) -> dict:
    """Canonical graph document (stable ordering, no step counter)."""
    return {
        "format": GRAPH_FORMAT,
        "areas": list(g.areas),
        "nodes": [g.nodes[k].to_doc() for k in sorted(g.nodes)],
        "edges": [list(e) for e in sorted(g.edges)],
    }


def from_document(doc: Mapping[str, Any], step_counter: int = 0) -> WorldGraph:
    nodes = {}
    for nd in doc["nodes"]:
        node = Node.from_doc(nd)
        if node.instance_id in nodes:
            raise DuplicateInstanceId(node.instance_id)
        nodes[node.instance_id] = node
    edges = [Edge(*e) for e in doc["edges"] if e[1] != "located_in"]
    return WorldGraph(nodes, edges, doc["areas"], step_counter)


def dumps(g: WorldGraph) -> str:
    return json.dumps(to_document(g), sort_keys=True, indent=1)


def loads(text: str) -> WorldGraph:
    return from_document(json.loads(text))


def canonical_bytes(g: WorldGraph) -> bytes:
    parts = [",".join(json.dumps(a) for a in g.areas)]
    parts.extend(g.nodes[k].canonical() for k in sorted(g.nodes))
    parts.extend("|".join(e) for e in sorted(g.edges))
    return "\n".join(parts).encode()


def snapshot_hash(g: WorldGraph) -> str:
    """Deterministic digest of nodes, edges and attributes (insertion-order free)."""
    return hashlib.sha256(canonical_bytes(g)).hexdigest()
