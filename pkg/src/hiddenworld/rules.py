"""Precondition/effect world rules and primitive execution.

Rules are the only way a :class:`~hiddenworld.world_graph.WorldGraph` changes.
A rule is matched against a primitive action, its preconditions are checked
in authored order (the first failing one is reported), and its effect
template is grounded into a concrete :class:`EffectSet` whose footprint is
exactly what :func:`~hiddenworld.observation.graph_diff` will later see.

Terms used inside rule definitions:

``$object`` / ``$target``
    the instance (or literal) bound to the action's roles
``$name``
    a variable bound by a ``where`` selector
``$var.slot``
    a slot read from the bound node, e.g. ``$object.location``
``@here``
    the agent's current area
anything else
    a literal
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, NamedTuple, Optional, Sequence

from .errors import EffectIntegrityError, HiddenWorldError, UnboundVariable
from .world_graph import (
    CORE_SLOTS,
    STORED_EDGE_KINDS,
    Edge,
    Node,
    WorldGraph,
    flag_slot,
)

PREDICATE_ARITY = {"at": 2, "state": 3, "contains": 2, "agent_at": 1, "hand": 2}
HANDS = ("left", "right", "any")
EMPTY = "empty"
HERE = "@here"

SUCCESS = "SUCCESS"
FAIL = "FAIL"
NO_RULE = "NO_RULE"

_ACTION_RE = re.compile(r"^\s*([A-Za-z_][\w\-]*)\s*\(\s*([^,()]*?)\s*(?:,\s*([^,()]*?)\s*)?\)\s*$")


class RuleDefinitionError(HiddenWorldError):
    pass


@dataclass(frozen=True)
class PrimitiveAction:
    action_type: str
    object: Optional[str] = None
    target: Optional[str] = None

    def __post_init__(self):
        # the text form cannot express a target without an object
        if self.object is None and self.target is not None:
            raise ValueError(f"{self.action_type}: target {self.target!r} given without an object")

    def render(self) -> str:
        args = [a for a in (self.object, self.target) if a is not None]
        return f"{self.action_type}({', '.join(args)})"

    __str__ = render

    def to_doc(self) -> dict:
        return {"action_type": self.action_type, "object": self.object, "target": self.target}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "PrimitiveAction":
        return cls(doc["action_type"], doc.get("object") or None, doc.get("target") or None)

    @classmethod
    def parse(cls, text: str) -> "PrimitiveAction":
        """Parse ``verb(obj[, target])``; a bare ``verb`` has no arguments."""
        text = text.strip()
        if "(" not in text:
            return cls(text)
        m = _ACTION_RE.match(text)
        if not m:
            raise ValueError(f"cannot parse primitive action {text!r}")
        verb, obj, target = m.groups()
        return cls(verb, obj or None, target or None)


@dataclass(frozen=True)
class AgentPhysState:
    current_area: Optional[str]
    left_hand: Optional[str] = None
    right_hand: Optional[str] = None

    def holding(self) -> tuple:
        return tuple(h for h in (self.left_hand, self.right_hand) if h is not None)

    def holds(self, instance_id: str) -> bool:
        return instance_id in (self.left_hand, self.right_hand)

    def to_doc(self) -> dict:
        return {"current_area": self.current_area, "left_hand": self.left_hand,
                "right_hand": self.right_hand}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "AgentPhysState":
        return cls(doc.get("current_area"), doc.get("left_hand"), doc.get("right_hand"))


@dataclass(frozen=True)
class Predicate:
    kind: str
    args: tuple

    def __post_init__(self):
        if self.kind not in PREDICATE_ARITY:
            raise RuleDefinitionError(f"unknown predicate kind {self.kind!r}")
        if len(self.args) != PREDICATE_ARITY[self.kind]:
            raise RuleDefinitionError(
                f"{self.kind} takes {PREDICATE_ARITY[self.kind]} arguments, got {self.args!r}")
        if self.kind == "hand" and self.args[0] not in HANDS:
            raise RuleDefinitionError(f"hand predicate needs one of {HANDS}, got {self.args[0]!r}")

    def render(self) -> str:
        if self.kind == "state":
            obj, slot, value = self.args
            if slot == "state":
                return f"state({obj}, {value})"
            return f"state({obj}, {slot.removeprefix('state.')}={value})"
        return f"{self.kind}({', '.join(str(a) for a in self.args)})"

    __str__ = render

    def to_doc(self) -> dict:
        return {"kind": self.kind, "args": list(self.args)}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Predicate":
        return cls(doc["kind"], tuple(doc["args"]))

    def variables(self) -> set:
        out = set()
        for a in self.args:
            if isinstance(a, str) and a.startswith("$"):
                out.add(a[1:].split(".", 1)[0])
        return out


@dataclass(frozen=True)
class EffectSet:
    node_add: tuple = ()
    node_remove: frozenset = frozenset()
    edge_add: frozenset = frozenset()
    edge_remove: frozenset = frozenset()
    # ((instance_id, slot), value) pairs, sorted
    attr_updates: tuple = ()

    def __post_init__(self):
        added = {n.instance_id for n in self.node_add}
        if added & set(self.node_remove):
            raise EffectIntegrityError(f"nodes both added and removed: {sorted(added & set(self.node_remove))}")

    @property
    def attr_map(self) -> dict:
        return dict(self.attr_updates)

    def is_empty(self) -> bool:
        return not (self.node_add or self.node_remove or self.edge_add or self.edge_remove
                    or self.attr_updates)


@dataclass(frozen=True)
class Feedback:
    outcome: str
    action: Optional[PrimitiveAction] = None
    violated: Optional[Predicate] = None
    text: str = ""
    rule_id: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.outcome == SUCCESS

    def render(self) -> str:
        if self.outcome == SUCCESS:
            return "success"
        if self.outcome == NO_RULE:
            return f"no_rule({self.text})"
        return f"fail({self.text})"

    def to_doc(self) -> dict:
        return {
            "outcome": self.outcome,
            "action": self.action.to_doc() if self.action else None,
            "violated": self.violated.to_doc() if self.violated else None,
            "text": self.text,
            "rule_id": self.rule_id,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Feedback":
        return cls(doc["outcome"],
                   PrimitiveAction.from_doc(doc["action"]) if doc.get("action") else None,
                   Predicate.from_doc(doc["violated"]) if doc.get("violated") else None,
                   doc.get("text", ""), doc.get("rule_id"))


@dataclass(frozen=True)
class RolePattern:
    labels: tuple = ()
    kinds: tuple = ()
    values: tuple = ()

    def accepts_node(self, node: Node) -> bool:
        if self.values and not (self.labels or self.kinds):
            return False
        # areas are only addressed through an explicit kind pattern
        if self.labels and not self.kinds and node.kind == "area":
            return False
        if self.labels and node.label not in self.labels:
            return False
        if self.kinds and node.kind not in self.kinds:
            return False
        return True

    def accepts_nodes(self) -> bool:
        return bool(self.labels or self.kinds or not self.values)

    @classmethod
    def from_doc(cls, doc) -> "RolePattern":
        if doc in ("*", "any", {}):
            return cls()
        if isinstance(doc, str):
            return cls(labels=(doc,))

        def tup(v):
            if v is None:
                return ()
            return tuple(v) if isinstance(v, (list, tuple)) else (v,)
        return cls(tup(doc.get("label")), tup(doc.get("kind")), tup(doc.get("value")))

    def to_doc(self) -> dict:
        doc = {}
        if self.labels:
            doc["label"] = list(self.labels)
        if self.kinds:
            doc["kind"] = list(self.kinds)
        if self.values:
            doc["value"] = list(self.values)
        return doc


@dataclass(frozen=True)
class Selector:
    """Binds an extra rule variable to the lowest-id node matching all fields."""

    label: str
    location: Optional[str] = None
    contained_in: Optional[str] = None
    supported_by: Optional[str] = None

    def to_doc(self) -> dict:
        return {k: v for k, v in (("label", self.label), ("location", self.location),
                                  ("contained_in", self.contained_in),
                                  ("supported_by", self.supported_by)) if v is not None}


@dataclass(frozen=True)
class NodeTemplate:
    id: str
    label: str
    kind: str = "product"
    location: Optional[str] = None
    state: Optional[str] = None
    amount: Optional[str] = None
    flags: tuple = ()


@dataclass(frozen=True)
class EffectTemplate:
    set: tuple = ()            # ((term, slot), value-term)
    add_nodes: tuple = ()      # NodeTemplate
    remove_nodes: tuple = ()   # terms
    add_edges: tuple = ()      # (term, kind, term)
    remove_edges: tuple = ()
    detach: tuple = ()         # terms: drop stored contains/supports edges into them
    hold: Optional[str] = None
    release: Optional[str] = None
    move_to: Optional[str] = None

    def variables(self) -> set:
        terms = [x for (t, _), v in self.set for x in (t, v)]
        terms += list(self.remove_nodes) + list(self.detach)
        terms += [x for e in self.add_edges + self.remove_edges for x in (e[0], e[2])]
        terms += [self.hold, self.release, self.move_to]
        out = set()
        for t in self.add_nodes:
            terms += [t.location, t.state] + [v for _, v in t.flags]
            out.update(re.findall(r"\{(\w+)\}", t.id))
        for t in terms:
            if isinstance(t, str) and t.startswith("$"):
                out.add(t[1:].split(".", 1)[0])
        return out


@dataclass(frozen=True)
class WorldRule:
    rule_id: str
    action_type: str
    object_pattern: Optional[RolePattern]
    target_pattern: Optional[RolePattern]
    preconditions: tuple
    effects: EffectTemplate
    where: tuple = ()           # ((var, Selector), ...)
    source: Optional[str] = None

    def bound_variables(self) -> set:
        out = {"here"}
        if self.object_pattern is not None:
            out.add("object")
        if self.target_pattern is not None:
            out.add("target")
        out.update(v for v, _ in self.where)
        return out

    def slots_referenced(self) -> set:
        """Slot names this rule reads or writes (for vocabulary checks)."""
        out = {p.args[1] for p in self.preconditions if p.kind == "state"}
        out.update(slot for (_, slot), _ in self.effects.set)
        return out


@dataclass(frozen=True)
class RuleBase:
    rules: tuple

    def __iter__(self):
        return iter(self.rules)

    def __len__(self):
        return len(self.rules)

    @property
    def vocabulary(self) -> tuple:
        seen = []
        for r in self.rules:
            if r.action_type not in seen:
                seen.append(r.action_type)
        return tuple(seen)

    def by_id(self, rule_id: str) -> WorldRule:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        raise KeyError(rule_id)


class Outcome(NamedTuple):
    graph: WorldGraph
    agent: AgentPhysState
    feedback: Feedback


# --------------------------------------------------------------------------
# rule definitions <-> documents

def _slot_name(slot: str) -> str:
    return slot if slot in CORE_SLOTS else flag_slot(slot)


def _norm_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return None
    return str(v)


def parse_predicate(doc: Mapping[str, Any]) -> Predicate:
    """Authored form: one-key mapping, e.g. ``{state: [$target, loaded, false]}``."""
    if not isinstance(doc, Mapping) or len(doc) != 1:
        raise RuleDefinitionError(f"predicate must be a one-key mapping, got {doc!r}")
    (kind, args), = doc.items()
    if not isinstance(args, (list, tuple)):
        args = [args]
    args = [_norm_value(a) for a in args]
    if kind == "state":
        if len(args) == 2:
            args = [args[0], "state", args[1]]
        if len(args) == 3:
            args[1] = _slot_name(args[1])
    if kind == "hand" and len(args) == 1:
        args = ["any", args[0]]
    return Predicate(kind, tuple(args))


def predicate_doc(p: Predicate) -> dict:
    if p.kind == "state":
        return {"state": [p.args[0], p.args[1], p.args[2]]}
    return {p.kind: list(p.args)}


def parse_rule(doc: Mapping[str, Any]) -> WorldRule:
    try:
        rule_id = doc["id"]
        action = doc["action"]
    except KeyError as exc:
        raise RuleDefinitionError(f"rule missing field {exc}") from None
    obj = RolePattern.from_doc(doc["object"]) if doc.get("object") is not None else None
    tgt = RolePattern.from_doc(doc["target"]) if doc.get("target") is not None else None
    where = []
    for item in doc.get("where") or []:
        (var, sel), = item.items()
        var = var.lstrip("$")
        where.append((var, Selector(sel["label"], sel.get("location"), sel.get("contained_in"),
                                    sel.get("supported_by"))))
    pre = tuple(parse_predicate(p) for p in doc.get("pre") or [])
    eff = doc.get("effects") or {}
    sets = []
    for key, value in (eff.get("set") or {}).items():
        term, _, slot = key.partition(".")
        if not slot:
            raise RuleDefinitionError(f"{rule_id}: set key {key!r} needs a slot")
        sets.append(((term, _slot_name(slot)), _norm_value(value)))
    nodes = []
    for nd in eff.get("add_nodes") or []:
        flags = tuple(sorted((flag_slot(k), _norm_value(v)) for k, v in (nd.get("flags") or {}).items()))
        nodes.append(NodeTemplate(nd["id"], nd["label"], nd.get("kind", "product"), nd.get("location"),
                                  _norm_value(nd.get("state")), nd.get("amount"), flags))
    template = EffectTemplate(
        set=tuple(sets),
        add_nodes=tuple(nodes),
        remove_nodes=tuple(eff.get("remove_nodes") or ()),
        add_edges=tuple(tuple(e) for e in eff.get("add_edges") or ()),
        remove_edges=tuple(tuple(e) for e in eff.get("remove_edges") or ()),
        detach=tuple(eff.get("detach") or ()),
        hold=eff.get("hold"),
        release=eff.get("release"),
        move_to=eff.get("move_to"),
    )
    rule = WorldRule(rule_id, action, obj, tgt, pre, template, tuple(where), doc.get("source"))
    check_rule_variables(rule)
    return rule


def check_rule_variables(rule: WorldRule) -> None:
    bound = rule.bound_variables()
    used = set().union(*(p.variables() for p in rule.preconditions)) if rule.preconditions else set()
    used |= rule.effects.variables()
    for _, sel in rule.where:
        for t in (sel.location, sel.contained_in, sel.supported_by):
            if t and t.startswith("$"):
                used.add(t[1:].split(".", 1)[0])
    missing = used - bound
    if missing:
        raise RuleDefinitionError(f"{rule.rule_id}: unbound variables {sorted(missing)}")
    for e in rule.effects.add_edges + rule.effects.remove_edges:
        if e[1] not in STORED_EDGE_KINDS:
            raise RuleDefinitionError(f"{rule.rule_id}: edge kind {e[1]!r} cannot be stored")


def rule_to_doc(rule: WorldRule) -> dict:
    eff = rule.effects
    doc: dict = {"id": rule.rule_id, "action": rule.action_type}
    if rule.object_pattern is not None:
        doc["object"] = rule.object_pattern.to_doc()
    if rule.target_pattern is not None:
        doc["target"] = rule.target_pattern.to_doc()
    if rule.where:
        doc["where"] = [{"$" + v: s.to_doc()} for v, s in rule.where]
    doc["pre"] = [predicate_doc(p) for p in rule.preconditions]
    effects: dict = {}
    if eff.set:
        effects["set"] = {f"{t}.{s}": v for (t, s), v in eff.set}
    if eff.add_nodes:
        effects["add_nodes"] = [
            {k: v for k, v in (("id", t.id), ("label", t.label), ("kind", t.kind),
                               ("location", t.location), ("state", t.state), ("amount", t.amount),
                               ("flags", dict(t.flags) or None)) if v is not None}
            for t in eff.add_nodes]
    for name in ("remove_nodes", "add_edges", "remove_edges", "detach"):
        if getattr(eff, name):
            effects[name] = [list(x) if isinstance(x, tuple) else x for x in getattr(eff, name)]
    for name in ("hold", "release", "move_to"):
        if getattr(eff, name):
            effects[name] = getattr(eff, name)
    doc["effects"] = effects
    if rule.source:
        doc["source"] = rule.source
    return doc


def load_rule_base(docs: Iterable[Mapping[str, Any]]) -> RuleBase:
    rules = [parse_rule(d) for d in docs]
    ids = [r.rule_id for r in rules]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise RuleDefinitionError(f"duplicate rule ids {dup}")
    return RuleBase(tuple(rules))


# --------------------------------------------------------------------------
# matching and binding

def _resolve_role(arg: Optional[str], pattern: Optional[RolePattern], g: WorldGraph,
                  agent: Optional[AgentPhysState]):
    """Return (matched, value, provisional) for one action role."""
    if pattern is None:
        return (arg is None, None, False)
    if arg is None:
        return (False, None, False)
    if arg in pattern.values:
        return (True, arg, False)
    node = g.nodes.get(arg)
    if node is not None:
        return (pattern.accepts_node(node), arg, False)
    if not pattern.accepts_nodes():
        return (False, None, False)
    candidates = [n for n in g.nodes.values() if n.label == arg and pattern.accepts_node(n)]
    if candidates:
        return (True, _prefer(candidates, agent).instance_id, False)
    if any(n.label == arg for n in g.nodes.values()):
        return (False, None, False)
    # areas are never hidden, so an unknown name cannot be one
    if pattern.kinds and set(pattern.kinds) <= {"area"}:
        return (False, None, False)
    # unknown instance: let the rule's preconditions report the absence
    return (True, arg, True)


def _prefer(candidates: Sequence[Node], agent: Optional[AgentPhysState]) -> Node:
    def key(n: Node):
        held = agent is not None and agent.holds(n.instance_id)
        here = agent is not None and n.location == agent.current_area
        return (not held, not here, n.instance_id)
    return min(candidates, key=key)


def match_rule(rules: RuleBase, action: PrimitiveAction, g: WorldGraph,
               agent: Optional[AgentPhysState] = None):
    """First rule (load order) unifying with ``action``; ``None`` means NO_RULE.

    Returns ``(rule, binding)``. Arguments naming no node, label or literal
    match provisionally, but only when no rule unifies outright.
    """
    provisional = None
    for rule in rules:
        if rule.action_type != action.action_type:
            continue
        ok_o, obj, prov_o = _resolve_role(action.object, rule.object_pattern, g, agent)
        if not ok_o:
            continue
        ok_t, tgt, prov_t = _resolve_role(action.target, rule.target_pattern, g, agent)
        if not ok_t:
            continue
        binding = {}
        if rule.object_pattern is not None:
            binding["object"] = obj
        if rule.target_pattern is not None:
            binding["target"] = tgt
        if prov_o or prov_t:
            if provisional is None:
                provisional = (rule, binding)
            continue
        return rule, binding
    if provisional is not None:
        return provisional
    return None


def resolve_term(term, binding: Mapping[str, str], g: WorldGraph, agent: Optional[AgentPhysState]):
    if term is None or not isinstance(term, str):
        return term
    if term == HERE:
        if agent is None:
            raise UnboundVariable("@here needs an agent state")
        return agent.current_area
    if not term.startswith("$"):
        return term
    var, _, slot = term[1:].partition(".")
    if var == "here":
        value = agent.current_area if agent else None
    elif var not in binding:
        raise UnboundVariable(f"variable ${var} is unbound")
    else:
        value = binding[var]
    if not slot:
        return value
    node = g.nodes.get(value)
    return node.get(slot) if node is not None else None


def _format_id(template: str, binding: Mapping[str, str]) -> str:
    def sub(m):
        var = m.group(1)
        if var not in binding:
            raise UnboundVariable(f"variable ${var} is unbound in id template {template!r}")
        return binding[var]
    return re.sub(r"\{(\w+)\}", sub, template)


def bind_where(rule: WorldRule, g: WorldGraph, agent: Optional[AgentPhysState],
               binding: Mapping[str, str]):
    """Extend ``binding`` with ``where`` selectors.

    Returns ``(binding, unresolved)`` where ``unresolved`` maps each variable
    no node satisfied to the predicate describing what was missing.
    """
    out = dict(binding)
    if agent is not None:
        out.setdefault("here", agent.current_area)
    unresolved: dict = {}
    for var, sel in rule.where:
        deps = {t[1:].split(".", 1)[0] for t in (sel.location, sel.contained_in, sel.supported_by)
                if t and t.startswith("$")}
        blocked = next((unresolved[d] for d in sorted(deps) if d in unresolved), None)
        if blocked is not None:
            unresolved[var] = blocked
            continue
        loc = resolve_term(sel.location, out, g, agent)
        cont = resolve_term(sel.contained_in, out, g, agent)
        sup = resolve_term(sel.supported_by, out, g, agent)
        found = None
        for nid in sorted(g.nodes):
            n = g.nodes[nid]
            if n.label != sel.label:
                continue
            if loc is not None and n.location != loc:
                continue
            if cont is not None and Edge(cont, "contains", nid) not in g.edges:
                continue
            if sup is not None and Edge(sup, "supports", nid) not in g.edges:
                continue
            found = nid
            break
        if found is None:
            if cont is not None:
                unresolved[var] = Predicate("contains", (cont, sel.label))
            else:
                unresolved[var] = Predicate("at", (sel.label, loc if loc is not None else "?"))
        else:
            out[var] = found
    return out, unresolved


# --------------------------------------------------------------------------
# preconditions

def holds(p: Predicate, g: WorldGraph, agent: Optional[AgentPhysState]) -> bool:
    """Evaluate one grounded predicate."""
    a = p.args
    if p.kind == "at":
        n = g.nodes.get(a[0])
        return n is not None and n.location == a[1]
    if p.kind == "state":
        n = g.nodes.get(a[0])
        return n is not None and n.get(a[1]) == a[2]
    if p.kind == "contains":
        return Edge(a[0], "contains", a[1]) in g.edges
    if agent is None:
        return False
    if p.kind == "agent_at":
        return agent.current_area == a[0]
    # hand
    hand, content = a
    want = None if content == EMPTY else content
    if hand == "left":
        return agent.left_hand == want
    if hand == "right":
        return agent.right_hand == want
    return want in (agent.left_hand, agent.right_hand)


def ground_predicate(p: Predicate, binding: Mapping[str, str], g: WorldGraph,
                     agent: Optional[AgentPhysState]) -> Predicate:
    if p.kind == "state":
        return Predicate("state", (resolve_term(p.args[0], binding, g, agent), p.args[1],
                                   resolve_term(p.args[2], binding, g, agent)))
    if p.kind == "hand":
        return Predicate("hand", (p.args[0], resolve_term(p.args[1], binding, g, agent)))
    return Predicate(p.kind, tuple(resolve_term(x, binding, g, agent) for x in p.args))


def check_preconditions(rule: WorldRule, g: WorldGraph, agent: Optional[AgentPhysState],
                        binding: Mapping[str, str],
                        unresolved: Optional[Mapping[str, Predicate]] = None) -> Optional[Predicate]:
    """``None`` when every precondition holds, else the first violated one (grounded).

    ``unresolved`` comes from :func:`bind_where`: a precondition mentioning an
    unresolved variable fails with the selector's predicate at its position
    in the authored order. If all preconditions pass but a selector variable
    is still unresolved, its predicate is reported last.
    """
    binding = dict(binding)
    unresolved = dict(unresolved or {})
    if agent is not None:
        binding.setdefault("here", agent.current_area)
    missing = rule.bound_variables() - set(binding) - set(unresolved)
    if agent is None:
        missing.discard("here")
    if missing:
        raise UnboundVariable(f"{rule.rule_id}: binding lacks {sorted(missing)}")
    for p in rule.preconditions:
        blocked = sorted(p.variables() & set(unresolved))
        if blocked:
            return unresolved[blocked[0]]
        gp = ground_predicate(p, binding, g, agent)
        if not holds(gp, g, agent):
            return gp
    if unresolved:
        return unresolved[next(v for v, _ in rule.where if v in unresolved)]
    return None


def describe_violation(p: Predicate, g: WorldGraph, agent: Optional[AgentPhysState]) -> str:
    a = p.args
    here = agent.current_area if agent else None
    if p.kind == "at":
        if a[0] not in g.nodes and a[0] not in {n.label for n in g.nodes.values()}:
            return f"{a[0]} not in current region" if a[1] == here else f"{a[0]} not at {a[1]}"
        if a[0] not in g.nodes:
            return f"no {a[0]} at {a[1]}"
        return f"{a[0]} not in current region" if a[1] == here else f"{a[0]} not at {a[1]}"
    if p.kind == "state":
        obj, slot, value = a
        return f"{obj}.{slot.removeprefix('state.')} must be {value}"
    if p.kind == "contains":
        return f"{a[0]} does not contain {a[1]}"
    if p.kind == "agent_at":
        return f"agent must be at {a[0]}"
    hand, content = a
    who = "a hand" if hand == "any" else f"{hand} hand"
    return f"{who} must be empty" if content == EMPTY else f"{who} must hold {content}"


# --------------------------------------------------------------------------
# effects

def ground_effects(rule: WorldRule, g: WorldGraph, agent: Optional[AgentPhysState],
                   binding: Mapping[str, str]):
    """Ground the effect template into an exact ``EffectSet`` plus the next agent state.

    No-op updates (value already present, edge already there or already
    absent) are dropped so the result is the true footprint of the rule.
    """
    eff = rule.effects
    b = dict(binding)
    if agent is not None:
        b.setdefault("here", agent.current_area)

    def term(t):
        return resolve_term(t, b, g, agent)

    left = agent.left_hand if agent else None
    right = agent.right_hand if agent else None
    area = agent.current_area if agent else None

    removed = []
    for t in eff.remove_nodes:
        nid = term(t)
        if nid not in g.nodes:
            raise EffectIntegrityError(f"{rule.rule_id}: cannot remove missing node {nid!r}")
        if g.nodes[nid].kind == "area":
            raise EffectIntegrityError(f"{rule.rule_id}: cannot remove area {nid!r}")
        removed.append(nid)
    removed_set = frozenset(removed)

    added = []
    for t in eff.add_nodes:
        nid = _format_id(t.id, b)
        if nid in g.nodes and nid not in removed_set:
            raise EffectIntegrityError(f"{rule.rule_id}: node {nid!r} already exists")
        added.append(Node(nid, t.label, t.kind, term(t.location), term(t.state), t.amount,
                          tuple(sorted((k, term(v)) for k, v in t.flags))))

    edge_rm = set()
    for nid in removed:
        edge_rm.update(e for e in g.edges if nid in (e.src, e.dst))
    for t in eff.detach:
        nid = term(t)
        edge_rm.update(e for e in g.edges if e.dst == nid and e.kind in ("contains", "supports"))
    for s, k, d in eff.remove_edges:
        e = Edge(term(s), k, term(d))
        if e in g.edges:
            edge_rm.add(e)
    edge_add = set()
    for s, k, d in eff.add_edges:
        e = Edge(_format_id(term(s), b), k, _format_id(term(d), b))
        if e in edge_rm:
            edge_rm.discard(e)
        elif e not in g.edges:
            edge_add.add(e)

    updates: dict = {}
    for (t, slot), v in eff.set:
        nid = term(t)
        updates[(nid, slot)] = term(v)

    # agent body
    hold = term(eff.hold) if eff.hold else None
    release = term(eff.release) if eff.release else None
    for nid in removed:
        if nid == left:
            left = None
        if nid == right:
            right = None
    if release is not None:
        if left == release:
            left = None
        elif right == release:
            right = None
        else:
            raise EffectIntegrityError(f"{rule.rule_id}: agent does not hold {release!r}")
    if hold is not None:
        if hold in (left, right):
            pass
        elif left is None:
            left = hold
        elif right is None:
            right = hold
        else:
            raise EffectIntegrityError(f"{rule.rule_id}: both hands full")
    if eff.move_to:
        area = term(eff.move_to)
        if area not in g.areas:
            raise EffectIntegrityError(f"{rule.rule_id}: {area!r} is not an area")
        for nid in (left, right):
            if nid is not None and nid not in removed_set:
                updates[(nid, "location")] = area

    added_ids = {n.instance_id for n in added}
    attr = []
    for (nid, slot), v in sorted(updates.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        if nid in removed_set:
            continue
        if nid in added_ids:
            current = next(n for n in added if n.instance_id == nid).get(slot)
        elif nid in g.nodes:
            current = g.nodes[nid].get(slot)
        else:
            raise EffectIntegrityError(f"{rule.rule_id}: update targets missing node {nid!r}")
        if current != v:
            attr.append(((nid, slot), v))

    new_agent = AgentPhysState(area, left, right) if agent is not None else None
    effects = EffectSet(tuple(sorted(added, key=lambda n: n.instance_id)), removed_set,
                        frozenset(edge_add), frozenset(edge_rm), tuple(attr))
    return effects, new_agent


def apply_effects(g: WorldGraph, eff: EffectSet) -> WorldGraph:
    """Apply a grounded effect set; raises ``EffectIntegrityError`` on any broken invariant."""
    nodes = dict(g.nodes)
    try:
        for nid in eff.node_remove:
            del nodes[nid]
        for n in eff.node_add:
            nodes[n.instance_id] = n
        for (nid, slot), v in eff.attr_updates:
            nodes[nid] = nodes[nid].with_slot(slot, v)
        edges = (set(g.edges) - set(eff.edge_remove)) | set(eff.edge_add)
        return g._successor(nodes, edges)
    except KeyError as exc:
        raise EffectIntegrityError(f"effect touches missing node {exc}") from exc
    except HiddenWorldError as exc:
        raise EffectIntegrityError(str(exc)) from exc


def apply_rule(g: WorldGraph, rule: WorldRule, binding: Mapping[str, str],
               agent: Optional[AgentPhysState] = None) -> WorldGraph:
    effects, _ = ground_effects(rule, g, agent, binding)
    return apply_effects(g, effects)


def execute_primitive(g: WorldGraph, agent: AgentPhysState, rules: RuleBase,
                      action: PrimitiveAction) -> Outcome:
    """Validate and run one primitive.

    On FAIL or NO_RULE the very same graph and agent objects come back.
    """
    matched = match_rule(rules, action, g, agent)
    if matched is None:
        return Outcome(g, agent, Feedback(NO_RULE, action, None,
                                          f"no rule for {action.render()}"))
    rule, binding = matched
    binding, unresolved = bind_where(rule, g, agent, binding)
    failed = check_preconditions(rule, g, agent, binding, unresolved)
    if failed is not None:
        return Outcome(g, agent, Feedback(FAIL, action, failed,
                                          describe_violation(failed, g, agent), rule.rule_id))
    effects, new_agent = ground_effects(rule, g, agent, binding)
    new_g = apply_effects(g, effects)
    return Outcome(new_g, new_agent, Feedback(SUCCESS, action, None, "", rule.rule_id))
