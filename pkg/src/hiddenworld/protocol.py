"""Line-delimited JSON wire protocol between the simulator and an external planner.

Every line is one message ``{"kind": ..., "seq": n, "payload": {...}}``.
Each side numbers its own messages from 1. The simulator drives: it sends
TASK_CONTEXT, OBSERVATION, FEEDBACK and the two request kinds; the planner
answers requests with PLAN_RESPONSE or REPAIR_RESPONSE. RUN_END closes the
session and carries the score card.

Payloads only ever hold what the agent is allowed to see: its own belief,
the feedback text and the local observation. No hidden-graph document is
serialised here.
"""
from __future__ import annotations

import json
import os
import queue
import shlex
import socket
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

from .agent_runtime import Runner, TaskRunLog
from .config import RuntimeConfig
from .errors import MalformedResponse, NoTemplate, PlannerDisconnected, ProtocolViolation
from .planners import PlannerInterface, PlanRequest, RepairRequest
from .rules import PrimitiveAction
from .task_episode import Skill

PROTOCOL = "hiddenworld-wire/1"

# kind -> required payload keys (exact match)
SCHEMA = {
    "TASK_CONTEXT": {"task_id", "position", "instruction", "goal", "vocabulary", "areas", "current_region",
                     "holding", "known_objects", "step_budget"},
    "OBSERVATION": {"step", "area", "image_ref", "text"},
    "FEEDBACK": {"step", "action", "outcome", "text", "violated"},
    "PLAN_REQUEST": {"task_id", "instruction", "goal", "belief", "agent", "completed", "violated",
                     "observation", "vocabulary", "areas", "attempt"},
    "PLAN_RESPONSE": {"skills"},
    "REPAIR_REQUEST": {"task_id", "failed", "feedback", "belief", "agent", "attempt", "vocabulary", "areas"},
    "REPAIR_RESPONSE": {"action"},
    "RUN_END": {"protocol", "scorecard"},
}
KINDS = tuple(SCHEMA)


@dataclass(frozen=True)
class Message:
    kind: str
    seq: int
    payload: Mapping[str, Any]

    def encode(self) -> bytes:
        doc = {"kind": self.kind, "seq": self.seq, "payload": self.payload}
        return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


def decode(line: bytes) -> Message:
    """Parse and schema-check one line; raises ``MalformedResponse``."""
    try:
        doc = json.loads(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedResponse(f"not a JSON line: {exc}") from None
    if not isinstance(doc, dict) or set(doc) != {"kind", "seq", "payload"}:
        raise MalformedResponse("message must have exactly the keys kind, seq, payload")
    kind, seq, payload = doc["kind"], doc["seq"], doc["payload"]
    if kind not in SCHEMA:
        raise MalformedResponse(f"unknown message kind {kind!r}")
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 1:
        raise MalformedResponse(f"bad sequence number {seq!r}")
    if not isinstance(payload, dict) or set(payload) != SCHEMA[kind]:
        want = ", ".join(sorted(SCHEMA[kind]))
        raise MalformedResponse(f"{kind} payload must have exactly the keys {want}")
    return Message(kind, seq, payload)


class Channel:
    """One end of a session over a pair of binary streams.

    A reader thread feeds lines into a queue so receives can time out on any
    stream type. ``transcript`` keeps every line in both directions.
    """

    def __init__(self, rfile, wfile, timeout: Optional[float] = None,
                 on_close: Optional[Callable[[], None]] = None):
        self._r, self._w = rfile, wfile
        self.timeout = timeout
        self._on_close = on_close
        self._lines: queue.Queue = queue.Queue()
        self._sent = 0
        self._last_seen = 0
        self.closed = False
        self.transcript: list = []
        self._lock = threading.Lock()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        try:
            for line in iter(self._r.readline, b""):
                self._lines.put(line)
        except (OSError, ValueError):
            pass
        self._lines.put(None)
        try:
            self._r.close()
        except OSError:
            pass

    def send(self, kind: str, payload: Mapping[str, Any]) -> Message:
        if self.closed:
            raise PlannerDisconnected("channel is closed")
        with self._lock:
            self._sent += 1
            msg = Message(kind, self._sent, dict(payload))
            data = msg.encode()
            self.transcript.append(("sent", data.decode().rstrip("\n")))
            try:
                self._w.write(data)
                self._w.flush()
            except (OSError, ValueError) as exc:
                self.closed = True
                raise PlannerDisconnected(f"peer went away: {exc}") from None
        return msg

    def recv(self, timeout: Optional[float] = None) -> Message:
        if self.closed:
            raise PlannerDisconnected("channel is closed")
        try:
            line = self._lines.get(timeout=timeout if timeout is not None else self.timeout)
        except queue.Empty:
            self.closed = True
            raise PlannerDisconnected("peer timed out") from None
        if line is None:
            self.closed = True
            raise PlannerDisconnected("peer closed the stream")
        self.transcript.append(("recv", line.decode(errors="replace").rstrip("\n")))
        msg = decode(line)
        if msg.seq <= self._last_seen:
            raise MalformedResponse(f"sequence number {msg.seq} does not increase")
        self._last_seen = msg.seq
        return msg

    def close(self) -> None:
        # the reader is left to the pump thread; closing it here would block on its lock
        self.closed = True
        try:
            self._w.close()
        except (OSError, ValueError):
            pass
        if self._on_close:
            self._on_close()
        # let the reader reach EOF so no thread holds the stream at exit
        self._reader.join(timeout=5)

    def write_transcript(self, path) -> Path:
        """One line per message, prefixed with ``>`` (sent) or ``<`` (received)."""
        path = Path(path)
        path.write_text("".join(f"{'>' if d == 'sent' else '<'} {line}\n" for d, line in self.transcript))
        return path


# -- simulator side ------------------------------------------------------------

def _actions_of(skill: Skill):
    yield skill.center_action
    yield from skill.pre_context
    yield from skill.post_context


class RemotePlanner(PlannerInterface):
    """Planner adapter that forwards every runner call over a channel."""

    name = "external"

    def __init__(self, channel: Channel):
        self.channel = channel
        self.vocabulary: frozenset = frozenset()
        self.disconnected: Optional[str] = None

    def _send(self, kind: str, payload) -> None:
        if self.disconnected:
            return
        try:
            self.channel.send(kind, payload)
        except PlannerDisconnected as exc:
            self.disconnected = str(exc)

    def _ask(self, kind: str, payload, reply: str) -> Mapping[str, Any]:
        if self.disconnected:
            raise PlannerDisconnected(self.disconnected)
        try:
            self.channel.send(kind, payload)
            msg = self.channel.recv()
        except PlannerDisconnected as exc:
            self.disconnected = str(exc)
            raise
        if msg.kind != reply:
            raise MalformedResponse(f"expected {reply}, got {msg.kind}")
        return msg.payload

    def on_task_start(self, context) -> None:
        self.vocabulary = frozenset(context["vocabulary"])
        self._send("TASK_CONTEXT", context)

    def on_observation(self, payload) -> None:
        self._send("OBSERVATION", payload)

    def on_feedback(self, payload) -> None:
        self._send("FEEDBACK", payload)

    def plan(self, request: PlanRequest) -> list:
        payload = self._ask("PLAN_REQUEST", request.to_doc(), "PLAN_RESPONSE")
        docs = payload["skills"]
        if docs is None:
            raise NoTemplate(f"remote planner has no plan for {request.task_id!r}")
        if not isinstance(docs, list):
            raise MalformedResponse("skills must be a list or null")
        try:
            skills = [Skill.from_doc(d) for d in docs]
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise MalformedResponse(f"bad skill document: {exc}") from None
        for s in skills:
            for a in _actions_of(s):
                self._check_verb(a)
        return skills

    def repair(self, request: RepairRequest) -> Optional[PrimitiveAction]:
        payload = self._ask("REPAIR_REQUEST", request.to_doc(), "REPAIR_RESPONSE")
        text = payload["action"]
        if text is None:
            return None
        if not isinstance(text, str):
            raise MalformedResponse("action must be a string or null")
        try:
            action = PrimitiveAction.parse(text)
        except Exception as exc:  # parse errors come in several types
            raise MalformedResponse(f"bad action {text!r}: {exc}") from None
        self._check_verb(action)
        return action

    def _check_verb(self, a: PrimitiveAction) -> None:
        if self.vocabulary and a.action_type not in self.vocabulary:
            raise MalformedResponse(f"verb {a.action_type!r} is not in the announced vocabulary")


@dataclass
class Session:
    log: TaskRunLog
    scorecard: Optional[dict]
    transcript: list = field(default_factory=list)
    disconnected: Optional[str] = None


def serve_session(compiled, channel: Channel, config: RuntimeConfig = RuntimeConfig()) -> Session:
    """Drive one full episode over ``channel`` and finish with RUN_END."""
    from .evaluation import score_run

    planner = RemotePlanner(channel)
    log = Runner(compiled.episode, planner, config).run()
    card = score_run(compiled, log).to_doc()
    if not planner.disconnected:
        try:
            channel.send("RUN_END", {"protocol": PROTOCOL, "scorecard": card})
        except PlannerDisconnected as exc:
            planner.disconnected = str(exc)
    return Session(log, card, list(channel.transcript), planner.disconnected)


# -- planner side --------------------------------------------------------------

class PlannerClient:
    """Answers a simulator's requests with an in-process planner."""

    def __init__(self, planner: PlannerInterface, channel: Channel):
        self.planner = planner
        self.channel = channel

    def run(self) -> Mapping[str, Any]:
        """Serve requests until RUN_END; returns its payload."""
        while True:
            msg = self.channel.recv()
            p = msg.payload
            if msg.kind == "RUN_END":
                return p
            if msg.kind == "TASK_CONTEXT":
                self.planner.on_task_start(p)
            elif msg.kind == "OBSERVATION":
                self.planner.on_observation(p)
            elif msg.kind == "FEEDBACK":
                self.planner.on_feedback(p)
            elif msg.kind == "PLAN_REQUEST":
                try:
                    skills = [s.to_doc() for s in self.planner.plan(PlanRequest.from_doc(p))]
                except NoTemplate:
                    skills = None
                self.channel.send("PLAN_RESPONSE", {"skills": skills})
            elif msg.kind == "REPAIR_REQUEST":
                fix = self.planner.repair(RepairRequest.from_doc(p))
                self.channel.send("REPAIR_RESPONSE", {"action": fix.render() if fix else None})
            else:
                raise ProtocolViolation(f"planner received {msg.kind}, which only planners send")


# -- endpoints -----------------------------------------------------------------

def parse_endpoint(text: str) -> tuple:
    """``stdio``, ``tcp:HOST:PORT`` or ``unix:PATH``."""
    if text == "stdio":
        return ("stdio",)
    kind, _, rest = text.partition(":")
    if kind == "tcp":
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad tcp endpoint {text!r}; expected tcp:HOST:PORT")
        return ("tcp", host, int(port))
    if kind == "unix" and rest:
        return ("unix", rest)
    raise ValueError(f"bad endpoint {text!r}; expected stdio, tcp:HOST:PORT or unix:PATH")


def stdio_channel(timeout: Optional[float] = None) -> Channel:
    """Take over the process's stdin and stdout for the protocol.

    The stdout pipe is moved to a private descriptor and fd 1 is pointed at
    stderr, so stray prints cannot corrupt the stream and closing the
    channel really signals EOF to the peer. Reads are unbuffered so a reader
    blocked at exit holds no interpreter-level lock.
    """
    sys.stdout.flush()
    wfd = os.dup(sys.stdout.fileno())
    os.dup2(sys.stderr.fileno(), sys.stdout.fileno())
    rfile = open(sys.stdin.fileno(), "rb", buffering=0, closefd=False)
    return Channel(rfile, open(wfd, "wb"), timeout)


def _socket_channel(sock: socket.socket, timeout: Optional[float]) -> Channel:
    def close():
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()
    return Channel(sock.makefile("rb"), sock.makefile("wb"), timeout, on_close=close)


def connect(endpoint: str, timeout: Optional[float] = None) -> Channel:
    ep = parse_endpoint(endpoint)
    if ep[0] == "stdio":
        return stdio_channel(timeout)
    if ep[0] == "tcp":
        sock = socket.create_connection((ep[1], ep[2]))
    else:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.connect(ep[1])
    return _socket_channel(sock, timeout)


def listen(endpoint: str) -> socket.socket:
    ep = parse_endpoint(endpoint)
    if ep[0] == "tcp":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((ep[1], ep[2]))
    elif ep[0] == "unix":
        if os.path.exists(ep[1]):
            os.unlink(ep[1])
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.bind(ep[1])
    else:
        raise ValueError("stdio cannot listen; use serve_session on a stdio channel")
    sock.listen()
    return sock


def accept(server: socket.socket, timeout: Optional[float] = None) -> Channel:
    conn, _ = server.accept()
    return _socket_channel(conn, timeout)


def spawn(command, timeout: Optional[float] = None) -> Channel:
    """Start a planner subprocess that speaks the protocol on its stdio."""
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

    def reap():
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
    return Channel(proc.stdout, proc.stdin, timeout, on_close=reap)


def serve(compiled, endpoint: str, config: RuntimeConfig = RuntimeConfig(), out_dir=None,
          max_sessions: Optional[int] = None, timeout: Optional[float] = None,
          ready: Optional[threading.Event] = None) -> list:
    """Host sessions on ``endpoint``; one thread per connection.

    Each session gets its own runner, so concurrent sessions never share
    world state. With ``out_dir`` every session writes its run log,
    transcript and score card under ``session-NNN/``.
    """
    results: list = []

    def finish(n: int, channel: Channel) -> None:
        try:
            session = serve_session(compiled, channel, config)
        finally:
            channel.close()
        results.append((n, session))
        if out_dir is not None:
            d = Path(out_dir) / f"session-{n:03d}"
            d.mkdir(parents=True, exist_ok=True)
            session.log.write(d / "runlog.jsonl")
            channel.write_transcript(d / "transcript.txt")
            (d / "scorecard.json").write_text(json.dumps(session.scorecard, indent=2, sort_keys=True) + "\n")

    if parse_endpoint(endpoint)[0] == "stdio":
        if ready:
            ready.set()
        finish(1, stdio_channel(timeout))
        return [s for _, s in results]

    server = listen(endpoint)
    if ready:
        ready.set()
    threads = []
    try:
        n = 0
        while max_sessions is None or n < max_sessions:
            channel = accept(server, timeout)
            n += 1
            t = threading.Thread(target=finish, args=(n, channel))
            t.start()
            threads.append(t)
    finally:
        for t in threads:
            t.join()
        server.close()
    return [s for _, s in sorted(results, key=lambda r: r[0])]
