"""``hiddenworld`` command line.

Diagnostics go to stderr as ``hiddenworld: <kind>: <message>`` lines (scenario
syntax errors as ``<file>:<line>:<col>: <message>``). Exit status is 0 on
success, 1 for failed checks or runs, 2 for usage errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .agent_runtime import Runner, TaskRunLog
from .compiler import audit, compile_episode, load_dataset, read_scenario, validate_scenario, write_dataset
from .config import RuntimeConfig, from_env, memory_mode
from .errors import HiddenWorldError, ScenarioInvalid, ScenarioSyntaxError
from .evaluation import aggregate_long_horizon, paired_bootstrap, score_run
from .planners import HeuristicPlanner, ScriptedPlanner


def _diag(kind: str, msg: str) -> None:
    print(f"hiddenworld: {kind}: {msg}", file=sys.stderr)


def _config(args) -> RuntimeConfig:
    return from_env(RuntimeConfig(interface=args.interface, memory=memory_mode(args.memory), seed=args.seed))


def _local_planner(name: str, episode):
    if name == "heuristic":
        return HeuristicPlanner.for_episode(episode)
    return ScriptedPlanner(episode)


def _write_json(doc, path) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# -- subcommands -----------------------------------------------------------------

def cmd_validate(args) -> int:
    report = validate_scenario(read_scenario(args.scenario))
    print(report.render())
    for line in report.diagnostics():
        print(line, file=sys.stderr)
    return 0 if report.ok else 1


def cmd_compile(args) -> int:
    compiled = compile_episode(read_scenario(args.scenario))
    out = Path(args.out or f"{compiled.episode.episode_id}.episode")
    write_dataset(compiled, out)
    a = audit(compiled)
    print(f"compiled {compiled.episode.episode_id}: {len(compiled.episode.tasks)} tasks, "
          f"{len(compiled.records)} transition records -> {out}")
    print(f"audit coverage={a.coverage:.2f} hallucination={a.hallucination:.2f} "
          f"missing_key_state={a.missing_key_state:.2f} replay_success={a.replay_success:.2f} "
          f"temporal_error={a.temporal_error:.2f}")
    return 0


def cmd_run(args) -> int:
    compiled = load_dataset(args.episode)
    config = _config(args)
    if args.planner == "external":
        from .protocol import spawn, serve_session
        if not args.planner_cmd:
            _diag("usage", "--planner external needs --planner-cmd")
            return 2
        channel = spawn(args.planner_cmd, timeout=config.planner_timeout)
        try:
            session = serve_session(compiled, channel, config)
        finally:
            channel.close()
        log = session.log
        if args.transcript:
            channel.write_transcript(args.transcript)
        if session.disconnected:
            _diag("protocol", f"planner disconnected: {session.disconnected}")
    else:
        log = Runner(compiled.episode, _local_planner(args.planner, compiled.episode), config).run()
    if args.out in (None, "-"):
        sys.stdout.write(log.dumps())
    else:
        log.write(args.out)
    ends = log.events("task_end")
    reached = sum(bool(e["goal_reached"]) for e in ends)
    print(f"{reached}/{len(ends)} task goals reached", file=sys.stderr)
    return 0


def cmd_score(args) -> int:
    compiled = load_dataset(args.episode)
    cards = [score_run(compiled, TaskRunLog.load(p)) for p in args.logs]
    if args.out:
        docs = [c.to_doc() for c in cards]
        _write_json(docs[0] if len(docs) == 1 else docs, args.out)
    for c in cards:
        sys.stdout.write(c.table())
    if len(cards) > 1:
        for row in aggregate_long_horizon(cards):
            print(f"position\t{row.position}\tn={row.n}\tf1={row.f1:.4f}\t"
                  f"visual_queries={row.visual_queries:.4f}\ttsr={row.tsr:.4f}")
    return 0


def _read_pairs(path: str) -> tuple:
    text = sys.stdin.read() if path == "-" else Path(path).read_text()
    if text.lstrip().startswith("["):
        rows = json.loads(text)
    else:
        rows = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{n}: expected two numbers per line")
            rows.append(parts)
    return [float(a) for a, _ in rows], [float(b) for _, b in rows]


def cmd_bootstrap(args) -> int:
    first, second = _read_pairs(args.pairs)
    res = paired_bootstrap(first, second, args.resamples, args.seed)
    _write_json({"n": len(first), "resamples": args.resamples, "seed": args.seed, "delta": res.delta,
                 "ci_low": res.ci_low, "ci_high": res.ci_high, "p": res.p}, args.out)
    return 0


def cmd_serve(args) -> int:
    from .protocol import serve
    compiled = load_dataset(args.episode)
    config = _config(args)
    sessions = serve(compiled, args.listen, config, out_dir=args.out, max_sessions=args.sessions,
                     timeout=args.timeout or config.planner_timeout)
    for n, s in enumerate(sessions, 1):
        state = f"disconnected ({s.disconnected})" if s.disconnected else "complete"
        print(f"session {n}: {state}, tsr={s.scorecard['tsr']:.4f}", file=sys.stderr)
    return 0


def cmd_client(args) -> int:
    from .protocol import PlannerClient, connect
    compiled = load_dataset(args.episode)
    channel = connect(args.connect, timeout=args.timeout)
    try:
        end = PlannerClient(_local_planner(args.planner, compiled.episode), channel).run()
    finally:
        channel.close()
    if args.out:
        _write_json(end["scorecard"], args.out)
    return 0


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiddenworld", description="Hidden-world household task simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="run the scenario checks and print the report")
    s.add_argument("scenario", help="scenario file or bundled name")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("compile", help="validate, then write the episode and transition dataset")
    s.add_argument("scenario")
    s.add_argument("--out", help="output directory (default <id>.episode)")
    s.set_defaults(func=cmd_compile)

    def run_flags(s):
        s.add_argument("--interface", choices=("diff", "flow"), default="diff")
        s.add_argument("--memory", choices=("none", "bounded", "full"), default="full")
        s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("run", help="run a planner through every task and write the run log")
    s.add_argument("episode", help="dataset directory, scenario file or bundled name")
    s.add_argument("--planner", choices=("heuristic", "scripted", "external"), default="heuristic")
    s.add_argument("--planner-cmd", help="command for --planner external; speaks the protocol on stdio")
    s.add_argument("--transcript", help="where to save the wire transcript (external planner)")
    s.add_argument("--out", help="run log path (default stdout)")
    run_flags(s)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("score", help="score run logs against the episode")
    s.add_argument("episode")
    s.add_argument("logs", nargs="+")
    s.add_argument("--out", help="write the score card JSON here")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("bootstrap", help="paired bootstrap over a two-column file")
    s.add_argument("pairs", help="two numbers per line, or a JSON list of pairs; - for stdin")
    s.add_argument("--resamples", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bootstrap)

    s = sub.add_parser("serve", help="host protocol sessions for external planners")
    s.add_argument("episode")
    s.add_argument("--listen", required=True, help="stdio, tcp:HOST:PORT or unix:PATH")
    s.add_argument("--out", help="directory for per-session logs, transcripts and score cards")
    s.add_argument("--sessions", type=int, help="stop after this many sessions")
    s.add_argument("--timeout", type=float, help="seconds to wait for each planner reply")
    run_flags(s)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("client", help="answer a server's requests with a built-in planner")
    s.add_argument("episode")
    s.add_argument("--connect", default="stdio", help="stdio, tcp:HOST:PORT or unix:PATH")
    s.add_argument("--planner", choices=("heuristic", "scripted"), default="scripted")
    s.add_argument("--timeout", type=float)
    s.add_argument("--out", help="write the score card from RUN_END here")
    s.set_defaults(func=cmd_client)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioSyntaxError as exc:
        name = getattr(args, "scenario", None) or getattr(args, "episode", "<scenario>")
        for line, col, msg in exc.diagnostics:
            print(f"{name}:{line}:{col}: {msg}", file=sys.stderr)
        return 1
    except ScenarioInvalid as exc:
        print(exc.report.render())
        for line in exc.report.diagnostics():
            print(line, file=sys.stderr)
        return 1
    except (HiddenWorldError, FileNotFoundError, ValueError, OSError) as exc:
        _diag(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
