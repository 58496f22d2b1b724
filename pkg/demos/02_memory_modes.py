"""How much does the agent's memory matter?

Runs the heuristic planner on every bundled scenario under the three
memory modes. With no memory the belief is cut back to the current area
between tasks, so objects seen earlier must be found again with the
visual oracle.

    python demos/02_memory_modes.py
"""
from hiddenworld.agent_runtime import Runner
from hiddenworld.compiler import bundled_scenarios, compile_episode, read_scenario
from hiddenworld.config import RuntimeConfig, memory_mode
from hiddenworld.evaluation import score_run
from hiddenworld.planners import HeuristicPlanner

MODES = {"full": memory_mode("full"), "bounded": memory_mode("bounded", cap=4, rate=0.3), "none": memory_mode("none")}


def main() -> None:
    print(f"{'scenario':<10}{'memory':<9}{'TSR':>6}{'F1':>7}{'queries':>9}{'replans':>9}")
    for name in bundled_scenarios():
        compiled = compile_episode(read_scenario(name))
        for label, mode in MODES.items():
            cfg = RuntimeConfig(memory=mode, seed=1)
            card = score_run(compiled, Runner(compiled.episode, HeuristicPlanner.for_episode(compiled.episode),
                                              cfg).run())
            print(f"{name:<10}{label:<9}{card.tsr:>6.2f}{card.f1:>7.2f}{card.visual_queries:>9}"
                  f"{card.replan_mean:>9.2f}")


if __name__ == "__main__":
    main()
