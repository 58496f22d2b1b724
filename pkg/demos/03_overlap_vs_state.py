"""Action overlap is not world-state correctness.

Three hand-written attempts at the coffee task are scored. One uses nearly
the same verbs as the ground truth but handles the spare capsule instead of
the right objects, so its F1 stays high while the replayed world state is
wrong.

    python demos/03_overlap_vs_state.py
"""
from hiddenworld.compiler import compile_episode, read_scenario
from hiddenworld.evaluation import score_run, script_run_log

ATTEMPTS = {
    "ground truth": None,
    "forgot to close the lid": ["go_to(storage_cabinet)", "take_out(capsule_01, storage_cabinet)",
                                "go_to(coffee_area)", "open(coffee_machine)", "insert(capsule_01, coffee_machine)",
                                "pick_up(cup_01)", "place(cup_01, under_dispenser)", "turn_on(coffee_machine)",
                                "wait()"],
    "right verbs, wrong objects": ["go_to(storage_cabinet)", "take_out(capsule_02, storage_cabinet)",
                                   "go_to(coffee_area)", "open(coffee_machine)", "close(coffee_machine)",
                                   "pick_up(capsule_02)", "place(capsule_02, under_dispenser)",
                                   "turn_on(coffee_machine)", "wait()"],
}


def main() -> None:
    compiled = compile_episode(read_scenario("coffee"))
    task = compiled.episode.tasks[0]
    print(f"task: {task.instruction}\n")
    print(f"{'attempt':<28}{'F1':>6}{'WSR':>7}{'TCR':>7}{'TSR':>6}")
    for name, script in ATTEMPTS.items():
        actions = task.gt_chain if script is None else script
        card = score_run(compiled, script_run_log(compiled, {task.task_id: actions}))
        t = card.tasks[0]
        print(f"{name:<28}{t.f1:>6.2f}{t.wsr:>7.2f}{t.tcr:>7.2f}{int(t.tsr):>6}")
    print("\nThe lid ends closed in the ground truth too, so leaving it open changes no scored slot;"
          "\nthe wrong-object attempt shares most action types but leaves the world unchanged where it matters.")


if __name__ == "__main__":
    main()
