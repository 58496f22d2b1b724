"""Run configuration: budgets, belief parameters, interface and memory mode."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

from .belief import BeliefConfig, MemoryMode

INTERFACES = ("diff", "flow")

# environment variable -> (section, field, type)
ENV_OVERRIDES = {
    "HIDDENWORLD_STEP_FACTOR": ("run", "step_factor", int),
    "HIDDENWORLD_REPLAN_BUDGET": ("run", "replan_budget", int),
    "HIDDENWORLD_REPAIR_BUDGET": ("run", "repair_budget", int),
    "HIDDENWORLD_ORACLE_THRESHOLD": ("run", "oracle_threshold", float),
    "HIDDENWORLD_PLANNER_TIMEOUT": ("run", "planner_timeout", float),
    "HIDDENWORLD_RHO_ABSENT": ("belief", "rho_absent", float),
    "HIDDENWORLD_RHO_FAIL": ("belief", "rho_fail", float),
    "HIDDENWORLD_STALE_AFTER": ("belief", "stale_after", int),
    "HIDDENWORLD_VISUAL_CONFIDENCE": ("belief", "visual_confidence", float),
    "HIDDENWORLD_MEMORY_CAP": ("memory", "cap", int),
    "HIDDENWORLD_FORGET_RATE": ("memory", "rate", float),
}


@dataclass(frozen=True)
class RuntimeConfig:
    step_factor: int = 4            # step budget = step_factor * |gt chain|
    replan_budget: int = 5
    repair_budget: int = 3          # per failed action
    oracle_threshold: float = 0.6
    interface: str = "diff"
    memory: MemoryMode = MemoryMode("full")
    belief: BeliefConfig = field(default_factory=BeliefConfig)
    seed: int = 0
    planner_timeout: float = 30.0

    def __post_init__(self):
        if self.interface not in INTERFACES:
            raise ValueError(f"interface must be one of {INTERFACES}, got {self.interface!r}")
        for name in ("step_factor", "replan_budget", "repair_budget"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def step_budget(self, gt_chain_length: int) -> int:
        return self.step_factor * max(gt_chain_length, 1)

    def to_doc(self) -> dict:
        return {
            "step_factor": self.step_factor,
            "replan_budget": self.replan_budget,
            "repair_budget": self.repair_budget,
            "oracle_threshold": self.oracle_threshold,
            "interface": self.interface,
            "memory": {"kind": self.memory.kind, "cap": self.memory.cap, "rate": self.memory.rate},
            "belief": {"rho_absent": self.belief.rho_absent, "rho_fail": self.belief.rho_fail,
                       "stale_after": self.belief.stale_after,
                       "visual_confidence": self.belief.visual_confidence},
            "seed": self.seed,
        }


def memory_mode(name: str, cap: int = 20, rate: float = 0.1) -> MemoryMode:
    if name == "bounded":
        return MemoryMode("bounded", cap, rate)
    return MemoryMode(name)


def from_env(base: Optional[RuntimeConfig] = None, environ: Optional[Mapping[str, str]] = None) -> RuntimeConfig:
    """Apply ``HIDDENWORLD_*`` overrides on top of ``base``."""
    cfg = base or RuntimeConfig()
    env = os.environ if environ is None else environ
    run, belief, memory = {}, {}, {}
    sections = {"run": run, "belief": belief, "memory": memory}
    for var, (section, name, kind) in ENV_OVERRIDES.items():
        raw = env.get(var)
        if raw is None or raw == "":
            continue
        try:
            sections[section][name] = kind(raw)
        except ValueError:
            raise ValueError(f"{var}={raw!r} is not a valid {kind.__name__}") from None
    if belief:
        run["belief"] = replace(cfg.belief, **belief)
    if memory:
        run["memory"] = replace(cfg.memory, **memory)
    return replace(cfg, **run) if run else cfg
