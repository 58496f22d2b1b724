"""Restricted, area-local views of the hidden world.

An observation pairs the episode-start reference image of the agent's area
with a symbolic diff between that area's episode-start subgraph and its
current subgraph. The diff baseline is always the episode start.

Rendered diff grammar (one line per change, sorted by instance id)::

    <id>: <slot> <old> -> <new>
    appeared: <id> (<label>) at <area> [<slot>=<value>, ...]
    disappeared: <id>
    edge added: <src> <kind> <dst>
    edge removed: <src> <kind> <dst>

An absent value renders as ``(none)``; an empty diff renders as
``no changes since episode start``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

from .errors import UnknownArea
from .world_graph import CORE_SLOTS, Edge, Node, WorldGraph

NO_CHANGES = "no changes since episode start"
ABSENT = "(none)"


@dataclass(frozen=True)
class DeltaSet:
    changed_attrs: tuple = ()   # (instance_id, slot, old, new)
    appeared: tuple = ()        # Node
    disappeared: tuple = ()     # instance ids
    edge_changes: tuple = ()    # (Edge, "added" | "removed")

    def is_empty(self) -> bool:
        return not (self.changed_attrs or self.appeared or self.disappeared or self.edge_changes)

    def ids(self) -> set:
        out = {c[0] for c in self.changed_attrs}
        out.update(n.instance_id for n in self.appeared)
        out.update(self.disappeared)
        for e, _ in self.edge_changes:
            out.update((e.src, e.dst))
        return out

    def to_doc(self) -> dict:
        return {
            "changed_attrs": [list(c) for c in self.changed_attrs],
            "appeared": [n.to_doc() for n in self.appeared],
            "disappeared": list(self.disappeared),
            "edge_changes": [[list(e), how] for e, how in self.edge_changes],
        }

    @classmethod
    def from_doc(cls, doc) -> "DeltaSet":
        return cls(tuple(tuple(c) for c in doc.get("changed_attrs", ())),
                   tuple(Node.from_doc(n) for n in doc.get("appeared", ())),
                   tuple(doc.get("disappeared", ())),
                   tuple((Edge(*e), how) for e, how in doc.get("edge_changes", ())))


@dataclass(frozen=True)
class VisualEntry:
    instance_id: str
    label: str
    position: str
    detail: str = ""
    states: tuple = ()          # (slot, value) pairs

    def to_doc(self) -> dict:
        return {"instance_id": self.instance_id, "label": self.label, "position": self.position,
                "detail": self.detail, "states": dict(self.states)}

    @classmethod
    def from_doc(cls, doc) -> "VisualEntry":
        return cls(doc["instance_id"], doc["label"], doc["position"], doc.get("detail", ""),
                   tuple(sorted(doc.get("states", {}).items())))


@dataclass(frozen=True)
class VisualReport:
    area: str
    entries: tuple = ()

    def to_doc(self) -> dict:
        return {"area": self.area, "entries": [e.to_doc() for e in self.entries]}

    @classmethod
    def from_doc(cls, doc) -> "VisualReport":
        return cls(doc["area"], tuple(VisualEntry.from_doc(e) for e in doc.get("entries", ())))


@dataclass(frozen=True)
class Observation:
    area: str
    image_ref: str
    delta_text: str
    delta_set: DeltaSet
    step: int = 0
    # what the reference image shows; only filled for the episode-start observation
    initial_view: tuple = ()
    # full current local state, filled when the Flow interface is active
    state_text: str = ""

    def to_doc(self) -> dict:
        return {
            "area": self.area,
            "image_ref": self.image_ref,
            "step": self.step,
            "delta_text": self.delta_text,
            "delta_set": self.delta_set.to_doc(),
            "initial_view": [e.to_doc() for e in self.initial_view],
            "state_text": self.state_text,
        }

    @classmethod
    def from_doc(cls, doc) -> "Observation":
        return cls(doc["area"], doc["image_ref"], doc["delta_text"],
                   DeltaSet.from_doc(doc["delta_set"]), doc.get("step", 0),
                   tuple(VisualEntry.from_doc(e) for e in doc.get("initial_view", ())),
                   doc.get("state_text", ""))


def _hidden_by_closed_container(g: WorldGraph, candidates) -> set:
    parent = {}
    for e in g.edges:
        if e.kind == "contains":
            parent[e.dst] = e.src
    hidden = set()
    for nid in candidates:
        cur, seen = nid, set()
        while cur in parent and cur not in seen:
            seen.add(cur)
            cur = parent[cur]
            if g.nodes[cur].state == "closed":
                hidden.add(nid)
                break
    return hidden


def visible_ids(g: WorldGraph, area: str, include_closed: bool = False) -> set:
    if area not in g.areas:
        raise UnknownArea(area)
    ids = {n.instance_id for n in g.objects() if n.location == area}
    if not include_closed:
        ids -= _hidden_by_closed_container(g, ids)
    return ids


def local_subgraph(g: WorldGraph, area: str, include_closed: bool = False) -> WorldGraph:
    """Nodes located in ``area`` (minus closed-container contents), their edges, the area node."""
    keep = visible_ids(g, area, include_closed)
    keep.add(area)
    nodes = {nid: g.nodes[nid] for nid in keep}
    edges = [e for e in g.edges if e.src in keep and e.dst in keep]
    return WorldGraph(nodes, edges, (area,), g.step_counter, check=False)


def _slot_union(a: Node, b: Node) -> list:
    keys = set(a.slots()) | set(b.slots())
    core = [s for s in CORE_SLOTS if s in keys]
    return core + sorted(keys - set(CORE_SLOTS))


def diff_graphs(a: WorldGraph, b: WorldGraph) -> DeltaSet:
    """Symbolic difference between two (sub)graphs."""
    changed = []
    for nid in sorted(set(a.nodes) & set(b.nodes)):
        na, nb = a.nodes[nid], b.nodes[nid]
        if na == nb:
            continue
        for slot in _slot_union(na, nb):
            old, new = na.get(slot), nb.get(slot)
            if old != new:
                changed.append((nid, slot, old, new))
    appeared = tuple(b.nodes[k] for k in sorted(set(b.nodes) - set(a.nodes)))
    disappeared = tuple(sorted(set(a.nodes) - set(b.nodes)))
    edges = [(e, "added") for e in b.edges - a.edges] + [(e, "removed") for e in a.edges - b.edges]
    edges.sort(key=lambda x: (x[0], x[1]))
    return DeltaSet(tuple(changed), appeared, disappeared, tuple(edges))


def graph_diff(g_a: WorldGraph, g_b: WorldGraph, area: Optional[str] = None) -> DeltaSet:
    """Diff restricted to ``area``'s local subgraph; ``area=None`` diffs whole graphs."""
    if area is None:
        return diff_graphs(g_a, g_b)
    return diff_graphs(local_subgraph(g_a, area), local_subgraph(g_b, area))


def apply_delta(base: WorldGraph, delta: DeltaSet) -> WorldGraph:
    """Replay a delta onto the graph it was computed from."""
    nodes = dict(base.nodes)
    for nid in delta.disappeared:
        nodes.pop(nid)
    for n in delta.appeared:
        nodes[n.instance_id] = n
    for nid, slot, _old, new in delta.changed_attrs:
        nodes[nid] = nodes[nid].with_slot(slot, new)
    edges = set(base.edges)
    for e, how in delta.edge_changes:
        if how == "added":
            edges.add(e)
        else:
            edges.discard(e)
    return WorldGraph(nodes, edges, base.areas, base.step_counter, check=False)


def _fmt(v) -> str:
    return ABSENT if v is None else str(v)


def _node_suffix(n: Node) -> str:
    parts = [f"{k}={v}" for k, v in (("kind", n.kind), ("state", n.state), ("amount", n.amount))
             if v is not None]
    parts += [f"{k}={v}" for k, v in n.flags]
    return f" [{', '.join(parts)}]" if parts else ""


def render_diff(d: DeltaSet) -> str:
    if d.is_empty():
        return NO_CHANGES
    lines = []
    for n in d.appeared:
        lines.append(((n.instance_id, 0, ""),
                      f"appeared: {n.instance_id} ({n.label}) at {_fmt(n.location)}{_node_suffix(n)}"))
    for nid, slot, old, new in d.changed_attrs:
        lines.append(((nid, 1, slot), f"{nid}: {slot} {_fmt(old)} -> {_fmt(new)}"))
    for nid in d.disappeared:
        lines.append(((nid, 2, ""), f"disappeared: {nid}"))
    for e, how in d.edge_changes:
        lines.append(((e.src, 3, f"{e.kind} {e.dst} {how}"), f"edge {how}: {e.render()}"))
    lines.sort(key=lambda x: x[0])
    return "\n".join(text for _, text in lines)


def render_state(local: WorldGraph) -> str:
    """Flow-interface rendering of a full local subgraph."""
    lines = []
    for nid in sorted(local.nodes):
        n = local.nodes[nid]
        if n.kind == "area":
            continue
        lines.append(f"present: {nid} ({n.label}) at {_fmt(n.location)}{_node_suffix(n)}")
    for e in sorted(local.edges):
        lines.append(f"edge: {e.render()}")
    return "\n".join(lines) if lines else "nothing visible"


def describe_view(g: WorldGraph, area: str, include_closed: bool) -> tuple:
    """Visual entries for everything in ``area`` (as a reference image would show it)."""
    local = local_subgraph(g, area, include_closed=include_closed)
    holders = {}
    for e in local.edges:
        if e.kind in ("contains", "supports"):
            holders[e.dst] = ("in" if e.kind == "contains" else "on", e.src)
    out = []
    for nid in sorted(local.nodes):
        n = local.nodes[nid]
        if n.kind == "area":
            continue
        rel = holders.get(nid)
        detail = f"{rel[0]} {rel[1]}" if rel else ""
        states = {k: v for k, v in n.slots().items() if k not in ("label", "location")}
        out.append(VisualEntry(nid, n.label, area, detail, tuple(sorted(states.items()))))
    return tuple(out)


def observe(g_init: WorldGraph, g_now: WorldGraph, area: str, step: int = 0,
            images: Optional[Mapping[str, str]] = None, flow: bool = False,
            initial: bool = False) -> Observation:
    """Two-part observation for ``area``: reference image plus diff since episode start."""
    if area not in g_now.areas:
        raise UnknownArea(area)
    delta = graph_diff(g_init, g_now, area)
    image = (images or {}).get(area) or f"anchor://{area}"
    view = describe_view(g_init, area, include_closed=False) if initial else ()
    state_text = render_state(local_subgraph(g_now, area)) if flow else ""
    return Observation(area, image, render_diff(delta), delta, step, view, state_text)
