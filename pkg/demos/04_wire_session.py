"""An external planner session over a socket pair.

The simulator side runs in the main thread and the planner side in a
worker thread, exactly as two processes would over TCP. The first lines
of the transcript show what an external planner is allowed to see.

    python demos/04_wire_session.py
"""
import socket
import threading

from hiddenworld.compiler import compile_episode, read_scenario
from hiddenworld.planners import HeuristicPlanner
from hiddenworld.protocol import Channel, PlannerClient, serve_session


def socket_channel(sock: socket.socket) -> Channel:
    return Channel(sock.makefile("rb"), sock.makefile("wb"), timeout=30, on_close=sock.close)


def main() -> None:
    compiled = compile_episode(read_scenario("coffee"))
    sim_sock, planner_sock = socket.socketpair()
    sim, planner = socket_channel(sim_sock), socket_channel(planner_sock)
    worker = threading.Thread(target=lambda: PlannerClient(HeuristicPlanner.for_episode(compiled.episode),
                                                           planner).run())
    worker.start()
    session = serve_session(compiled, sim)
    worker.join()
    sim.close()
    planner.close()

    for direction, line in session.transcript[:9]:
        arrow = "sim ->" if direction == "sent" else "<- planner"
        print(f"{arrow:>11} {line[:150]}{'...' if len(line) > 150 else ''}")
    print(f"... {len(session.transcript)} messages in total")
    print(f"RUN_END score card: TSR {session.scorecard['tsr']:.2f}, F1 {session.scorecard['f1']:.2f}")


if __name__ == "__main__":
    main()
