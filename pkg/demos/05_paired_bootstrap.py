"""Is full memory better than no memory? A paired bootstrap over tasks.

Each (scenario, seed, task) cell is run twice, once per memory mode, and
the per-task visual-query counts are paired. The bootstrap gives the mean
difference with a 95% interval and a two-sided p-value.

    python demos/05_paired_bootstrap.py
"""
from hiddenworld.agent_runtime import Runner
from hiddenworld.compiler import bundled_scenarios, compile_episode, read_scenario
from hiddenworld.config import RuntimeConfig, memory_mode
from hiddenworld.evaluation import paired_bootstrap, score_run
from hiddenworld.planners import HeuristicPlanner


def per_task_queries(compiled, mode, seed) -> list:
    cfg = RuntimeConfig(memory=memory_mode(mode, cap=3, rate=0.5) if mode == "bounded" else memory_mode(mode),
                        seed=seed)
    log = Runner(compiled.episode, HeuristicPlanner.for_episode(compiled.episode), cfg).run()
    return [t.visual_queries for t in score_run(compiled, log).tasks]


def main() -> None:
    full, forgetful = [], []
    for name in bundled_scenarios():
        compiled = compile_episode(read_scenario(name))
        for seed in range(5):
            full += per_task_queries(compiled, "full", seed)
            forgetful += per_task_queries(compiled, "bounded", seed)
    res = paired_bootstrap(full, forgetful, resamples=10_000, seed=0)
    print(f"{len(full)} paired tasks")
    print(f"extra visual queries with bounded memory: {res.delta:+.3f} "
          f"(95% CI {res.ci_low:+.3f} .. {res.ci_high:+.3f}, p={res.p:.4f})")


if __name__ == "__main__":
    main()
