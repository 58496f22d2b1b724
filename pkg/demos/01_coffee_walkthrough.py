"""Walk the heuristic planner through the coffee episode and narrate each event.

The capsule is hidden in the storage cabinet. The planner first tries to
insert it from the coffee area, the rule engine rejects the step, the
visual oracle looks into the cabinet, and a replan fetches the capsule.

    python demos/01_coffee_walkthrough.py
"""
from hiddenworld.agent_runtime import Runner
from hiddenworld.compiler import compile_episode, read_scenario
from hiddenworld.evaluation import score_run
from hiddenworld.planners import HeuristicPlanner


def narrate(record: dict) -> str | None:
    kind = record["event"]
    if kind == "task_start":
        return f"\n== task {record['position']}: {record['instruction']} (budget {record['step_budget']} steps)"
    if kind == "plan":
        if record.get("error"):
            return f"   plan rejected: {record['error']}"
        return "   plan: " + ", ".join(s["center"] for s in record["skills"])
    if kind == "step":
        fb = record["feedback"]
        tail = "" if fb["outcome"] == "SUCCESS" else f"  <- {fb['outcome']}: {fb['text'] or 'no rule'}"
        return f"   {record['step']:>3} [{record['phase']:<7}] {record['action']}{tail}"
    if kind == "oracle":
        return f"       oracle looks at {record['area']} for {record['target']} ({record['entries']} objects seen)"
    if kind == "repair":
        return f"       repair #{record['attempt']}: {record['proposal'] or 'none offered'}"
    if kind == "replan":
        return f"       replan because {record['violated']}"
    if kind == "task_end":
        return f"   -> {record['reason']} after {record['steps']} steps"
    return None


def main() -> None:
    compiled = compile_episode(read_scenario("coffee"))
    episode = compiled.episode
    log = Runner(episode, HeuristicPlanner.for_episode(episode)).run()
    for record in log.records:
        line = narrate(record)
        if line:
            print(line)
    card = score_run(compiled, log)
    print(f"\nscore: TSR {card.tsr:.2f}  F1 {card.f1:.2f}  WSR {card.wsr:.2f}  "
          f"validity {card.validity:.2f}  visual queries {card.visual_queries}")


if __name__ == "__main__":
    main()
