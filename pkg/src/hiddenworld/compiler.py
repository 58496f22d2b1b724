"""Scenario files: parsing, deterministic validation, GT replay and the transition dataset.

A scenario is a YAML document with a versioned ``format`` header. Parsing
turns it into a :class:`ScenarioFile` (or raises
:class:`~hiddenworld.errors.ScenarioSyntaxError` with line positions),
:func:`validate_scenario` runs the static checks, and
:func:`compile_episode` replays every ground-truth chain against the hidden
world to produce an :class:`~hiddenworld.task_episode.Episode` plus its
:class:`TransitionRecord` list.
"""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

import yaml

from .errors import (
    HiddenWorldError,
    ReplayFailure,
    ScenarioInvalid,
    ScenarioSyntaxError,
)
from .observation import DeltaSet, apply_delta, diff_graphs
from .rules import (
    AgentPhysState,
    PrimitiveAction,
    RuleBase,
    RuleDefinitionError,
    execute_primitive,
    load_rule_base,
    parse_rule,
)
from .task_episode import Episode, GoalClause, GoalPredicate, Skill, Task, check_goal, expand_skill
from .world_graph import (
    CORE_SLOTS,
    EDGE_KINDS,
    STORED_EDGE_KINDS,
    Edge,
    Node,
    ScenarioInit,
    WorldGraph,
    dumps as graph_dumps,
    flag_slot,
    from_document,
    instantiate,
    snapshot_hash,
)

SCENARIO_FORMAT = "hiddenworld-scenario/1"
DATASET_FORMAT = "hiddenworld-dataset/1"


# --------------------------------------------------------------------------
# YAML front end

class _Mapping(dict):
    """dict that remembers where it started in the source."""

    line = 0
    col = 0


def _bool_free_resolvers():
    # YAML 1.1 reads on/off/yes/no as booleans; scenario values such as
    # power: off must stay strings, so only true/false are booleans here.
    table = {}
    for first, pairs in yaml.SafeLoader.yaml_implicit_resolvers.items():
        kept = [(tag, rx) for tag, rx in pairs if tag != "tag:yaml.org,2002:bool"]
        if kept:
            table[first] = kept
    return table


class _Loader(yaml.SafeLoader):
    yaml_implicit_resolvers = _bool_free_resolvers()

    def __init__(self, stream):
        super().__init__(stream)
        self.diagnostics = []

    def construct_mapping(self, node, deep=False):
        seen = {}
        for key_node, _ in node.value:
            if not isinstance(key_node, yaml.ScalarNode):
                continue
            key = key_node.value
            line = key_node.start_mark.line + 1
            if key in seen:
                self.diagnostics.append((line, key_node.start_mark.column + 1,
                                         f"duplicate key {key!r} (first defined at line {seen[key]})"))
            else:
                seen[key] = line
        return super().construct_mapping(node, deep=deep)


_Loader.add_implicit_resolver("tag:yaml.org,2002:bool",
                              re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$"), list("tTfF"))


def _construct_map(loader, node):
    data = _Mapping()
    data.line = node.start_mark.line + 1
    data.col = node.start_mark.column + 1
    yield data
    data.update(loader.construct_mapping(node))


_Loader.add_constructor("tag:yaml.org,2002:map", _construct_map)


def load_yaml(text: str):
    loader = _Loader(text)
    try:
        doc = loader.get_single_data()
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line, col = (mark.line + 1, mark.column + 1) if mark else (0, 0)
        msg = " ".join(x for x in (exc.context, exc.problem) if x)
        raise ScenarioSyntaxError([(line, col, msg or "invalid YAML")]) from None
    except yaml.YAMLError as exc:
        raise ScenarioSyntaxError([(0, 0, str(exc))]) from None
    finally:
        loader.dispose()
    if loader.diagnostics:
        raise ScenarioSyntaxError(loader.diagnostics)
    return doc


# --------------------------------------------------------------------------
# scenario structure

@dataclass(frozen=True)
class AreaDecl:
    area_id: str
    label: str
    image: str
    line: int = 0


@dataclass(frozen=True)
class SourceDecl:
    source_id: str
    kind: str
    text: str
    line: int = 0


@dataclass(frozen=True)
class SkillDecl:
    skill_id: str
    center: PrimitiveAction          # raw verbs, as authored
    pre: tuple = ()
    post: tuple = ()
    source: tuple = ()
    line: int = 0

    def primitives(self) -> tuple:
        return (*self.pre, self.center, *self.post)


@dataclass(frozen=True)
class TaskDecl:
    task_id: str
    instruction: str
    goal: GoalPredicate
    skills: tuple
    key_actions: Optional[tuple] = None
    line: int = 0


@dataclass
class ScenarioFile:
    scenario_id: str
    title: str
    areas: tuple
    agent_start: Optional[str]
    objects: tuple                   # (Node, line)
    edges: tuple                     # (Edge, line)
    verbs: Mapping[str, str]
    rule_docs: tuple
    skills: tuple
    tasks: tuple
    sources: tuple = ()
    area_priors: Mapping[str, tuple] = field(default_factory=dict)
    heuristics: tuple = ()
    text: str = ""
    name: str = "<scenario>"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def skill(self, skill_id: str) -> Optional[SkillDecl]:
        return next((s for s in self.skills if s.skill_id == skill_id), None)

    def area_ids(self) -> tuple:
        return tuple(a.area_id for a in self.areas)


def _line(doc) -> int:
    return getattr(doc, "line", 0)


def _value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return None if v is None else str(v)


def _action(text, where: str, diags: list, line: int) -> Optional[PrimitiveAction]:
    if not isinstance(text, str):
        diags.append((line, 0, f"{where}: action must be a string like verb(obj, target), got {text!r}"))
        return None
    try:
        return PrimitiveAction.parse(text)
    except ValueError as exc:
        diags.append((line, 0, f"{where}: {exc}"))
        return None


def _as_list(v) -> list:
    if v is None:
        return []
    return list(v) if isinstance(v, (list, tuple)) else [v]


def parse_scenario(data, name: str = "<scenario>") -> ScenarioFile:
    """Parse scenario bytes/text; raises ``ScenarioSyntaxError`` with positions."""
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else str(data)
    doc = load_yaml(text)
    diags: list = []
    if not isinstance(doc, Mapping):
        end = text.count("\n") + 1
        raise ScenarioSyntaxError([(end if not doc else 1, 1, "scenario must be a mapping")])
    fmt = doc.get("format")
    if fmt != SCENARIO_FORMAT:
        diags.append((1, 1, f"format header must be {SCENARIO_FORMAT!r}, got {fmt!r}"))
    sid = doc.get("id")
    if not isinstance(sid, str) or not sid:
        diags.append((_line(doc), 1, "scenario needs a string 'id'"))

    areas = []
    for a in _as_list(doc.get("areas")):
        if isinstance(a, str):
            areas.append(AreaDecl(a, a, f"anchor://{a}", _line(doc)))
        elif isinstance(a, Mapping) and isinstance(a.get("id"), str):
            areas.append(AreaDecl(a["id"], a.get("label", a["id"]), a.get("image") or f"anchor://{a['id']}",
                                  _line(a)))
        else:
            diags.append((_line(a) or _line(doc), 1, f"area entries need an 'id', got {a!r}"))
    if not doc.get("areas"):
        diags.append((_line(doc), 1, "scenario declares no areas"))

    agent = doc.get("agent") or {}
    start = agent.get("start") if isinstance(agent, Mapping) else None

    objects, first_seen = [], {a.area_id: a.line for a in areas}
    for o in _as_list(doc.get("objects")):
        ln = _line(o)
        if not isinstance(o, Mapping) or not isinstance(o.get("id"), str):
            diags.append((ln, 1, f"object entries need an 'id', got {o!r}"))
            continue
        oid = o["id"]
        if oid in first_seen:
            diags.append((ln, 1, f"duplicate instance id {oid!r}: defined at line {first_seen[oid]} and line {ln}"))
            continue
        first_seen[oid] = ln
        flags = {k: _value(v) for k, v in (o.get("flags") or {}).items()}
        try:
            node = Node.build(oid, o.get("label", oid), o.get("kind", "object"), o.get("at"),
                              _value(o.get("state")), _value(o.get("amount")), flags)
        except HiddenWorldError as exc:
            diags.append((ln, 1, str(exc)))
            continue
        objects.append((node, ln))

    edges = []
    for e in _as_list(doc.get("edges")):
        if not (isinstance(e, (list, tuple)) and len(e) == 3 and all(isinstance(x, str) for x in e)):
            diags.append((_line(doc), 1, f"edges are [src, kind, dst] triples, got {e!r}"))
            continue
        edges.append((Edge(*e), _line(doc)))

    verbs = doc.get("verbs") or {}
    if not isinstance(verbs, Mapping):
        diags.append((_line(doc), 1, "verbs must map raw verbs to action types"))
        verbs = {}

    rule_docs = tuple(_as_list(doc.get("rules")))
    for r in rule_docs:
        if not isinstance(r, Mapping):
            diags.append((_line(doc), 1, f"rule entries must be mappings, got {r!r}"))

    skills, skill_lines = [], {}
    for s in _as_list(doc.get("skills")):
        ln = _line(s)
        if not isinstance(s, Mapping) or not isinstance(s.get("id"), str):
            diags.append((ln, 1, f"skill entries need an 'id', got {s!r}"))
            continue
        if s["id"] in skill_lines:
            diags.append((ln, 1, f"duplicate skill id {s['id']!r}: defined at line {skill_lines[s['id']]} and line {ln}"))
            continue
        skill_lines[s["id"]] = ln
        center = _action(s.get("center"), f"skill {s['id']}", diags, ln)
        pre = [_action(x, f"skill {s['id']}", diags, ln) for x in _as_list(s.get("pre"))]
        post = [_action(x, f"skill {s['id']}", diags, ln) for x in _as_list(s.get("post"))]
        if center is None or None in pre or None in post:
            continue
        skills.append(SkillDecl(s["id"], center, tuple(pre), tuple(post),
                                tuple(str(x) for x in _as_list(s.get("source"))), ln))

    tasks, task_lines = [], {}
    for t in _as_list(doc.get("tasks")):
        ln = _line(t)
        if not isinstance(t, Mapping) or not isinstance(t.get("id"), str):
            diags.append((ln, 1, f"task entries need an 'id', got {t!r}"))
            continue
        if t["id"] in task_lines:
            diags.append((ln, 1, f"duplicate task id {t['id']!r}: defined at line {task_lines[t['id']]} and line {ln}"))
            continue
        task_lines[t["id"]] = ln
        try:
            goal = GoalPredicate.from_doc(t.get("goal") or [])
        except (KeyError, TypeError, ValueError) as exc:
            diags.append((ln, 1, f"task {t['id']}: malformed goal clause ({exc})"))
            continue
        keys = None
        if t.get("key_actions") is not None:
            keys = tuple(tuple(k) for k in t["key_actions"])
        tasks.append(TaskDecl(t["id"], str(t.get("instruction", "")), goal,
                              tuple(str(x) for x in _as_list(t.get("skills"))), keys, ln))

    sources = []
    for src in _as_list(doc.get("sources")):
        if isinstance(src, Mapping) and "id" in src:
            sources.append(SourceDecl(str(src["id"]), str(src.get("kind", "step")), str(src.get("text", "")),
                                      _line(src)))
        else:
            diags.append((_line(doc), 1, f"source entries need an 'id', got {src!r}"))

    priors = {str(k): tuple(_as_list(v)) for k, v in (doc.get("area_priors") or {}).items()}

    if diags:
        raise ScenarioSyntaxError(sorted(diags))
    return ScenarioFile(sid, str(doc.get("title", "")), tuple(areas), start, tuple(objects), tuple(edges),
                        dict(verbs), rule_docs, tuple(skills), tuple(tasks), tuple(sources), priors,
                        tuple(_as_list(doc.get("heuristics"))), text, name)


def bundled_scenarios() -> list:
    """Names of the scenarios shipped with the package."""
    root = resources.files("hiddenworld") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def read_scenario(ref: str) -> ScenarioFile:
    """Load a scenario by path, or by bundled name (``coffee``)."""
    path = Path(ref)
    if path.is_file():
        return parse_scenario(path.read_bytes(), str(path))
    res = resources.files("hiddenworld") / "scenarios" / f"{ref}.yaml"
    if res.is_file():
        return parse_scenario(res.read_bytes(), f"{ref}.yaml")
    raise FileNotFoundError(f"no scenario file or bundled scenario named {ref!r}")


# --------------------------------------------------------------------------
# validation

@dataclass
class CheckResult:
    name: str
    failures: list = field(default_factory=list)   # (location, message)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, location: str, message: str) -> None:
        self.failures.append((location, message))


@dataclass
class ValidationReport:
    scenario_id: str
    checks: list

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def check(self, name: str) -> CheckResult:
        return next(c for c in self.checks if c.name == name)

    def render(self) -> str:
        lines = []
        for c in self.checks:
            lines.append(f"{'PASS' if c.ok else 'FAIL'} {c.name}")
            lines.extend(f"  {loc}: {msg}" for loc, msg in c.failures)
        return "\n".join(lines)

    def diagnostics(self) -> list:
        """Machine-parsable ``check<TAB>location<TAB>message`` lines."""
        return [f"{c.name}\t{loc}\t{msg}" for c in self.checks for loc, msg in c.failures]

    def to_doc(self) -> dict:
        return {"scenario": self.scenario_id, "ok": self.ok,
                "checks": [{"name": c.name, "ok": c.ok,
                            "failures": [{"location": l, "message": m} for l, m in c.failures]}
                           for c in self.checks]}


CHECKS = ("structure", "rule-definitions", "slot-vocabulary", "action-coverage",
          "verb-normalization", "storage-pairing")


def _parse_rules(s: ScenarioFile, check: CheckResult) -> list:
    rules, seen = [], {}
    for i, doc in enumerate(s.rule_docs):
        rid = doc.get("id", f"#{i}") if isinstance(doc, Mapping) else f"#{i}"
        loc = f"rule {rid} (line {_line(doc)})"
        if rid in seen:
            check.fail(loc, f"duplicate rule id (first at line {seen[rid]})")
            continue
        seen[rid] = _line(doc)
        try:
            rules.append(parse_rule(doc))
        except (RuleDefinitionError, KeyError, TypeError, ValueError, AttributeError) as exc:
            check.fail(loc, str(exc))
    return rules


def slot_vocabulary(s: ScenarioFile, rules: Iterable) -> set:
    slots = set(CORE_SLOTS)
    for node, _ in s.objects:
        slots.update(k for k, _ in node.flags)
    for r in rules:
        for t in r.effects.add_nodes:
            slots.update(k for k, _ in t.flags)
    return slots


def producible_values(s: ScenarioFile, rules: Iterable) -> dict:
    """slot -> set of literal values the scenario can ever put there (``None`` = any)."""
    values: dict = {}

    def add(slot, v):
        bucket = values.setdefault(slot, set())
        if bucket is not None:
            bucket.add(v)

    for node, _ in s.objects:
        for slot, v in node.slots().items():
            add(slot, v)
    for a in s.areas:
        add("location", a.area_id)
    for r in rules:
        for (_, slot), v in r.effects.set:
            if isinstance(v, str) and v.startswith("$"):
                role = v[1:].split(".", 1)[0]
                pattern = r.object_pattern if role == "object" else r.target_pattern if role == "target" else None
                if pattern is not None and pattern.values and "." not in v:
                    for lit in pattern.values:
                        add(slot, lit)
                else:
                    values[slot] = None
            else:
                add(slot, v)
        for t in r.effects.add_nodes:
            for slot, v in (("state", t.state), ("amount", t.amount), *t.flags):
                if v is not None and not str(v).startswith("$"):
                    add(slot, v)
    return values


def created_labels(rules: Iterable) -> set:
    return {t.label for r in rules for t in r.effects.add_nodes}


def created_id_patterns(rules: Iterable) -> list:
    return [re.compile("^" + re.sub(r"\\\{\w+\\\}", r"[\\w\\-]+", re.escape(t.id)) + "$")
            for r in rules for t in r.effects.add_nodes]


def _vocabulary_labels(s: ScenarioFile, rules) -> set:
    out = {n.label for n, _ in s.objects} | {n.instance_id for n, _ in s.objects}
    out |= {a.area_id for a in s.areas} | {a.label for a in s.areas}
    out |= created_labels(rules)
    return out


def validate_scenario(s: ScenarioFile) -> ValidationReport:
    checks = {name: CheckResult(name) for name in CHECKS}
    structure = checks["structure"]
    area_ids = set(s.area_ids())
    object_ids = {n.instance_id for n, _ in s.objects}
    nodes = area_ids | object_ids

    # structure: dangling references and anomalies
    if len(area_ids) != len(s.areas):
        dup = [a for a, n in Counter(s.area_ids()).items() if n > 1]
        structure.fail("areas", f"duplicate area ids {dup}")
    if s.agent_start is not None and s.agent_start not in area_ids:
        structure.fail("agent", f"start area {s.agent_start!r} is not declared")
    for node, ln in s.objects:
        if node.location not in area_ids:
            structure.fail(f"line {ln}", f"{node.instance_id}: unknown area {node.location!r}")
    for e, ln in s.edges:
        if e.kind not in STORED_EDGE_KINDS:
            structure.fail(f"line {ln}", f"edge {e.render()}: kind must be one of {STORED_EDGE_KINDS}")
        for end in (e.src, e.dst):
            if end not in nodes:
                structure.fail(f"line {ln}", f"edge {e.render()} references unknown node {end!r}")
    source_ids = {src.source_id for src in s.sources}
    skill_ids = {sk.skill_id for sk in s.skills}
    for sk in s.skills:
        for ref in sk.source:
            if ref not in source_ids:
                structure.fail(f"skill {sk.skill_id} (line {sk.line})", f"unknown source {ref!r}")
    for t in s.tasks:
        loc = f"task {t.task_id} (line {t.line})"
        if not t.skills:
            structure.fail(loc, "task has no ground-truth skills")
        for ref in t.skills:
            if ref not in skill_ids:
                structure.fail(loc, f"unknown skill {ref!r}")

    rules = _parse_rules(s, checks["rule-definitions"])
    for r in rules:
        for ref in _as_list(r.source):
            if ref not in source_ids:
                structure.fail(f"rule {r.rule_id}", f"unknown source {ref!r}")
    labels = _vocabulary_labels(s, rules)
    for t in s.tasks:
        for sel in sorted(t.goal.selectors()):
            if sel not in labels:
                structure.fail(f"task {t.task_id} (line {t.line})", f"goal names unknown label {sel!r}")
    for label, areas in s.area_priors.items():
        if label not in labels:
            structure.fail("area_priors", f"unknown label {label!r}")
        for a in areas:
            if a not in area_ids:
                structure.fail("area_priors", f"{label}: unknown area {a!r}")

    # slot vocabulary
    vocab = slot_vocabulary(s, rules)
    for r in rules:
        for slot in sorted(r.slots_referenced()):
            if slot not in vocab:
                checks["slot-vocabulary"].fail(f"rule {r.rule_id}", f"undefined slot {slot!r}")
    for t in s.tasks:
        for c in t.goal.clauses:
            if c.kind == "slot" and c.slot not in vocab:
                checks["slot-vocabulary"].fail(f"task {t.task_id}", f"undefined slot {c.slot!r}")

    # action coverage: GT verbs have rules; literal preconditions are producible
    coverage = checks["action-coverage"]
    action_types = {r.action_type for r in rules}
    reachable = producible_values(s, rules)
    for r in rules:
        for p in r.preconditions:
            if p.kind != "state":
                continue
            _, slot, value = p.args
            if isinstance(value, str) and value.startswith("$"):
                continue
            allowed = reachable.get(slot, set())
            if allowed is not None and value not in allowed:
                coverage.fail(f"rule {r.rule_id}", f"precondition {p.render()} can never hold: "
                                                   f"no object or rule yields {slot}={value}")
    for sk in s.skills:
        for a in sk.primitives():
            verb = s.verbs.get(a.action_type)
            if verb is not None and verb not in action_types:
                coverage.fail(f"skill {sk.skill_id} (line {sk.line})", f"no rule handles {verb!r}")
            for arg in (a.object, a.target):
                if arg is not None and arg not in nodes and not _is_literal(arg, rules):
                    coverage.fail(f"skill {sk.skill_id} (line {sk.line})",
                                  f"{a.render()} names undeclared symbol {arg!r}")

    # verb normalisation
    verbs = checks["verb-normalization"]
    for raw, norm in s.verbs.items():
        if norm not in action_types:
            verbs.fail(f"verbs.{raw}", f"normalised verb {norm!r} has no rule")
    normalised = set(s.verbs.values())
    for r in rules:
        if r.action_type not in normalised:
            verbs.fail(f"rule {r.rule_id}", f"action type {r.action_type!r} missing from the verb table")
    for sk in s.skills:
        for a in sk.primitives():
            if a.action_type not in s.verbs:
                verbs.fail(f"skill {sk.skill_id} (line {sk.line})",
                           f"verb {a.action_type!r} missing from the normalization map")

    # storage pairing: open/close act on declared containers, opens get closed
    storage = checks["storage-pairing"]
    states = {n.instance_id: n.state for n, _ in s.objects}
    skill_map = {sk.skill_id: sk for sk in s.skills}
    for t in s.tasks:
        pending: Counter = Counter()
        for ref in t.skills:
            sk = skill_map.get(ref)
            if sk is None:
                continue
            for a in sk.primitives():
                verb = s.verbs.get(a.action_type)
                if verb not in ("open", "close"):
                    continue
                if a.object not in object_ids:
                    storage.fail(f"skill {sk.skill_id}", f"{a.render()}: {a.object!r} is not a declared object")
                    continue
                if states.get(a.object) not in ("open", "closed"):
                    storage.fail(f"skill {sk.skill_id}", f"{a.render()}: {a.object!r} is not a container "
                                                         "(needs an open/closed state)")
                if verb == "open":
                    pending[a.object] += 1
                elif pending[a.object]:
                    pending[a.object] -= 1
        for obj, n in sorted(pending.items()):
            if n:
                storage.fail(f"task {t.task_id}", f"open({obj}) is never closed within the task")

    return ValidationReport(s.scenario_id or s.name, [checks[n] for n in CHECKS])


def _is_literal(arg: str, rules) -> bool:
    for r in rules:
        for pattern in (r.object_pattern, r.target_pattern):
            if pattern is not None and arg in pattern.values:
                return True
    return False


# --------------------------------------------------------------------------
# compilation

@dataclass(frozen=True)
class TransitionRecord:
    task_id: str
    index: int
    skill_id: str
    pre_state_ref: str
    primitives: tuple
    post_state_ref: str
    delta: DeltaSet
    exec_meta: Mapping[str, Any]
    agent_pre: AgentPhysState
    agent_post: AgentPhysState

    @property
    def status(self) -> str:
        return self.exec_meta["status"]

    def to_doc(self) -> dict:
        return {
            "task_id": self.task_id,
            "index": self.index,
            "skill_id": self.skill_id,
            "pre_state_ref": self.pre_state_ref,
            "primitives": [a.render() for a in self.primitives],
            "post_state_ref": self.post_state_ref,
            "delta": self.delta.to_doc(),
            "exec_meta": dict(self.exec_meta),
            "agent_pre": self.agent_pre.to_doc(),
            "agent_post": self.agent_post.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc) -> "TransitionRecord":
        return cls(doc["task_id"], doc["index"], doc["skill_id"], doc["pre_state_ref"],
                   tuple(PrimitiveAction.parse(a) for a in doc["primitives"]), doc["post_state_ref"],
                   DeltaSet.from_doc(doc["delta"]), doc["exec_meta"],
                   AgentPhysState.from_doc(doc["agent_pre"]), AgentPhysState.from_doc(doc["agent_post"]))


@dataclass
class Compiled:
    """A compiled scenario: the episode, its transition records and the snapshot store."""

    episode: Episode
    records: list
    snapshots: dict                  # digest -> WorldGraph
    scenario: Optional[ScenarioFile] = None

    def __iter__(self):
        return iter((self.episode, self.records))

    @property
    def init_digest(self) -> str:
        return self.records[0].pre_state_ref if self.records else snapshot_hash(instantiate(self.episode.init))

    def task_records(self, task_id: str) -> list:
        return [r for r in self.records if r.task_id == task_id]

    def task_pre(self, k: int):
        """GT world and agent at the start of task ``k``."""
        recs = self.task_records(self.episode.tasks[k].task_id)
        return self.snapshots[recs[0].pre_state_ref], recs[0].agent_pre

    def task_post(self, k: int):
        recs = self.task_records(self.episode.tasks[k].task_id)
        return self.snapshots[recs[-1].post_state_ref], recs[-1].agent_post


def normalise(action: PrimitiveAction, verbs: Mapping[str, str]) -> PrimitiveAction:
    return PrimitiveAction(verbs.get(action.action_type, action.action_type), action.object, action.target)


def scenario_init(s: ScenarioFile) -> ScenarioInit:
    return ScenarioInit(
        areas=s.area_ids(),
        objects=tuple(n for n, _ in s.objects),
        edges=tuple(e for e, _ in s.edges),
        area_labels={a.area_id: a.label for a in s.areas},
        area_images={a.area_id: a.image for a in s.areas},
        agent_area=s.agent_start,
    )


def build_episode(s: ScenarioFile, rules: Optional[RuleBase] = None) -> Episode:
    """Episode structure without replay (rules must already validate)."""
    if rules is None:
        rules = load_rule_base(s.rule_docs)
    labels = {n.instance_id: n.label for n, _ in s.objects}
    labels.update({a.area_id: a.label for a in s.areas})
    skills = {}
    for sk in s.skills:
        skills[sk.skill_id] = Skill(sk.skill_id, normalise(sk.center, s.verbs),
                                    tuple(normalise(a, s.verbs) for a in sk.pre),
                                    tuple(normalise(a, s.verbs) for a in sk.post), sk.source)
    tasks = []
    for t in s.tasks:
        gt = tuple(skills[ref] for ref in t.skills)
        keys = t.key_actions
        if keys is None:
            keys = tuple((sk.center_action.action_type,
                          labels.get(sk.center_action.object, sk.center_action.object)) for sk in gt)
        tasks.append(Task(t.task_id, t.instruction, t.goal, keys, gt))
    vocab = frozenset(_vocabulary_labels(s, rules))
    return Episode(s.scenario_id, scenario_init(s), tuple(tasks), rules, vocab, dict(s.verbs),
                   {k: tuple(v) for k, v in s.area_priors.items()}, tuple(s.heuristics))


def compile_episode(s: ScenarioFile, validate: bool = True) -> Compiled:
    """Validate, instantiate and replay every GT chain into transition records.

    A failing center action or an unmet goal raises ``ReplayFailure``; a
    failing contextual primitive is recorded as skipped.
    """
    if validate:
        report = validate_scenario(s)
        if not report.ok:
            raise ScenarioInvalid(report)
    episode = build_episode(s)
    g = instantiate(episode.init)
    agent = episode.initial_agent()
    snapshots = {snapshot_hash(g): g}
    records = []
    for task in episode.tasks:
        step = 0
        for skill in task.gt_skills:
            pre_g, pre_agent, pre_ref = g, agent, snapshot_hash(g)
            prims = expand_skill(skill)
            outcomes = []
            for i, a in enumerate(prims):
                out = execute_primitive(g, agent, episode.rules, a)
                if out.feedback.ok:
                    g, agent = out.graph, out.agent
                    outcomes.append("success")
                elif i == len(skill.pre_context):
                    raise ReplayFailure(task.task_id, step, out.feedback.violated.render()
                                        if out.feedback.violated else out.feedback.text)
                else:
                    outcomes.append("skipped")
                step += 1
            post_ref = snapshot_hash(g)
            snapshots.setdefault(post_ref, g)
            status = "success" if all(o == "success" for o in outcomes) else "skipped"
            records.append(TransitionRecord(task.task_id, len(records), skill.skill_id, pre_ref, tuple(prims),
                                            post_ref, diff_graphs(pre_g, g),
                                            {"status": status, "outcomes": outcomes}, pre_agent, agent))
        if not check_goal(task.goal, g, episode.labels):
            raise ReplayFailure(task.task_id, step, f"goal not satisfied: {task.goal.render()}")
    return Compiled(episode, records, snapshots, s)


# --------------------------------------------------------------------------
# replay and the dataset directory

def replay_record(rec: TransitionRecord, pre: WorldGraph, rules: RuleBase):
    """Re-execute a record's primitives; returns (post graph, post agent)."""
    g, agent = pre, rec.agent_pre
    for a in rec.primitives:
        out = execute_primitive(g, agent, rules, a)
        if out.feedback.ok:
            g, agent = out.graph, out.agent
    return g, agent


def replay_records(records: Iterable[TransitionRecord], init: WorldGraph, rules: Optional[RuleBase] = None,
                   mode: str = "delta") -> tuple:
    """Replay records sequentially from ``init``; returns (matched, total).

    ``mode="delta"`` applies the stored DeltaSets, ``mode="execute"``
    re-runs the primitives through the rule engine. Either way every
    intermediate digest is compared to the recorded post_state_ref.
    """
    g = init
    matched = total = 0
    for rec in records:
        total += 1
        if snapshot_hash(g) != rec.pre_state_ref:
            continue
        if mode == "delta":
            g = apply_delta(g, rec.delta)
        else:
            g, _ = replay_record(rec, g, rules)
        if snapshot_hash(g) == rec.post_state_ref:
            matched += 1
    return matched, total


def write_dataset(compiled: Compiled, outdir, scenario_text: Optional[str] = None) -> Path:
    """Write manifest, scenario copy, snapshots and per-task record files."""
    out = Path(outdir)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    (out / "records").mkdir(exist_ok=True)
    text = scenario_text if scenario_text is not None else (compiled.scenario.text if compiled.scenario else "")
    (out / "scenario.yaml").write_text(text)
    for digest in sorted(compiled.snapshots):
        (out / "snapshots" / f"{digest}.json").write_text(graph_dumps(compiled.snapshots[digest]) + "\n")
    ep = compiled.episode
    tasks = []
    for k, task in enumerate(ep.tasks):
        recs = compiled.task_records(task.task_id)
        path = f"records/{task.task_id}.jsonl"
        (out / path).write_text("".join(json.dumps(r.to_doc(), sort_keys=True) + "\n" for r in recs))
        tasks.append({
            "task_id": task.task_id,
            "position": k,
            "instruction": task.instruction,
            "goal": task.goal.to_doc(),
            "key_actions": [list(x) for x in task.key_actions],
            "gt_chain": [a.render() for a in task.gt_chain],
            "records": path,
            "pre_state": recs[0].pre_state_ref if recs else None,
            "post_state": recs[-1].post_state_ref if recs else None,
        })
    manifest = {
        "format": DATASET_FORMAT,
        "episode_id": ep.episode_id,
        "scenario_file": "scenario.yaml",
        "scenario_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "init_state": compiled.init_digest,
        "tasks": tasks,
        "snapshots": sorted(compiled.snapshots),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return out


def load_dataset(path) -> Compiled:
    """Load a compiled dataset directory (or compile a scenario file / bundled name)."""
    root = Path(path)
    if not (root / "manifest.json").is_file():
        return compile_episode(read_scenario(str(path)))
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{root}: not a {DATASET_FORMAT} directory")
    s = parse_scenario((root / manifest["scenario_file"]).read_bytes(), str(root / manifest["scenario_file"]))
    episode = build_episode(s)
    snapshots = {}
    for digest in manifest["snapshots"]:
        doc = json.loads((root / "snapshots" / f"{digest}.json").read_text())
        snapshots[digest] = from_document(doc)
    records = []
    for t in manifest["tasks"]:
        for line in (root / t["records"]).read_text().splitlines():
            if line.strip():
                records.append(TransitionRecord.from_doc(json.loads(line)))
    return Compiled(episode, records, snapshots, s)


# --------------------------------------------------------------------------
# audit

@dataclass(frozen=True)
class AuditReport:
    coverage: float
    hallucination: float
    missing_key_state: float
    replay_success: float
    temporal_error: float

    def to_doc(self) -> dict:
        return {"coverage": self.coverage, "hallucination": self.hallucination,
                "missing_key_state": self.missing_key_state, "replay_success": self.replay_success,
                "temporal_error": self.temporal_error}


def audit(compiled: Compiled) -> AuditReport:
    """Graph-audit metrics computed from provenance annotations and replay."""
    s = compiled.scenario
    ep = compiled.episode
    rules = list(ep.rules)

    steps = {src.source_id for src in s.sources if src.kind == "step"} if s else set()
    skill_src = {sk.skill_id: set(sk.source) for t in ep.tasks for sk in t.gt_skills}
    covered = set().union(*(skill_src.get(r.skill_id, set()) for r in compiled.records)) if compiled.records else set()
    coverage = len(covered & steps) / len(steps) if steps else 1.0

    declared_ids = {n.instance_id for n in ep.init.objects} | set(ep.init.areas)
    patterns = created_id_patterns(rules)
    values = producible_values(s, rules) if s else {}
    labels = set(ep.labels)
    verbs = set(ep.rules.vocabulary)

    def id_ok(nid):
        return nid in declared_ids or any(p.match(nid) for p in patterns)

    def value_ok(slot, v):
        allowed = values.get(slot, set())
        return v is None or allowed is None or v in allowed

    symbols = bad = 0
    for rec in compiled.records:
        for a in rec.primitives:
            symbols += 1
            bad += a.action_type not in verbs
        for n in rec.delta.appeared:
            symbols += 2
            bad += (not id_ok(n.instance_id)) + (n.label not in labels)
            for slot, v in n.slots().items():
                if slot not in ("label", "kind"):
                    symbols += 1
                    bad += not value_ok(slot, v)
        for nid, slot, _old, new in rec.delta.changed_attrs:
            symbols += 2
            bad += (not id_ok(nid)) + (not value_ok(slot, new))
        for e, _ in rec.delta.edge_changes:
            symbols += 2
            bad += (not id_ok(e.src)) + (not id_ok(e.dst))
    hallucination = bad / symbols if symbols else 0.0

    clauses = missing = 0
    for k, task in enumerate(ep.tasks):
        post, _ = compiled.task_post(k)
        for c in task.goal.clauses:
            clauses += 1
            missing += not check_goal(GoalPredicate((c,)), post, ep.labels)
    missing_rate = missing / clauses if clauses else 0.0

    init = compiled.snapshots[compiled.init_digest]
    matched, total = replay_records(compiled.records, init, ep.rules, mode="execute")
    replay_success = matched / total if total else 1.0

    order = {t.task_id: k for k, t in enumerate(ep.tasks)}
    errors = 0
    prev = None
    for rec in compiled.records:
        if prev is not None:
            out_of_order = (rec.index <= prev.index or order[rec.task_id] < order[prev.task_id]
                            or rec.pre_state_ref != prev.post_state_ref)
            errors += out_of_order
        prev = rec
    temporal = errors / max(len(compiled.records) - 1, 1) if compiled.records else 0.0
    return AuditReport(coverage, hallucination, missing_rate, replay_success, temporal)
