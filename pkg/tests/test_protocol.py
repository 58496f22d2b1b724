import json
import os
import socket
import threading

import pytest

from hiddenworld.agent_runtime import Runner
from hiddenworld.compiler import compile_episode, parse_scenario, read_scenario
from hiddenworld.errors import MalformedResponse, PlannerDisconnected
from hiddenworld.planners import PlanRequest, ScriptedPlanner
from hiddenworld.protocol import (KINDS, PROTOCOL, SCHEMA, Channel, Message, PlannerClient, _socket_channel, connect,
                                  decode, parse_endpoint, serve, serve_session)


def pair(timeout=30):
    a, b = socket.socketpair()
    return _socket_channel(a, timeout), _socket_channel(b, timeout)


def run_pair(compiled, peer, config=None):
    """Serve one session to ``peer(channel)`` running in a thread."""
    server, client = pair()
    t = threading.Thread(target=peer, args=(client,))
    t.start()
    try:
        session = serve_session(compiled, server) if config is None else serve_session(compiled, server, config)
    finally:
        server.close()
        t.join(10)
        client.close()
    return session, server


def scripted_peer(compiled):
    return lambda ch: PlannerClient(ScriptedPlanner(compiled.episode), ch).run()


def test_message_encoding_is_canonical():
    m = Message("REPAIR_RESPONSE", 3, {"action": "open(fridge_01)"})
    line = m.encode()
    assert line == b'{"kind":"REPAIR_RESPONSE","payload":{"action":"open(fridge_01)"},"seq":3}\n'
    assert decode(line) == m
    assert set(KINDS) == set(SCHEMA) and KINDS[0] == "TASK_CONTEXT"


@pytest.mark.parametrize("line, fragment", [
    (b"not json\n", "not a JSON line"),
    (b'["REPAIR_RESPONSE"]\n', "exactly the keys kind, seq, payload"),
    (b'{"kind":"SHOUT","seq":1,"payload":{}}\n', "unknown message kind"),
    (b'{"kind":"REPAIR_RESPONSE","seq":0,"payload":{"action":null}}\n', "bad sequence number"),
    (b'{"kind":"REPAIR_RESPONSE","seq":true,"payload":{"action":null}}\n', "bad sequence number"),
    (b'{"kind":"REPAIR_RESPONSE","seq":1,"payload":{"action":null,"why":1}}\n', "exactly the keys action"),
])
def test_decode_rejects(line, fragment):
    with pytest.raises(MalformedResponse, match=fragment):
        decode(line)


def test_sequence_numbers_must_increase():
    a, b = pair()
    try:
        a.send("REPAIR_RESPONSE", {"action": None})
        assert b.recv().seq == 1
        a._sent = 0
        a.send("REPAIR_RESPONSE", {"action": None})
        with pytest.raises(MalformedResponse, match="does not increase"):
            b.recv()
    finally:
        a.close()
        b.close()


def test_timeout_and_closed_peer():
    a, b = pair(timeout=0.2)
    with pytest.raises(PlannerDisconnected, match="timed out"):
        b.recv()
    a.close()
    with pytest.raises(PlannerDisconnected):
        b.send("REPAIR_RESPONSE", {"action": None})
    b.close()


def test_socket_session_matches_in_process_run(coffee):
    session, server = run_pair(coffee, scripted_peer(coffee))
    assert session.disconnected is None
    assert session.log.dumps() == Runner(coffee.episode, ScriptedPlanner(coffee.episode)).run().dumps()
    kinds = [json.loads(line)["kind"] for _, line in session.transcript]
    assert kinds[0] == "TASK_CONTEXT" and kinds[-1] == "RUN_END"
    end = json.loads(session.transcript[-1][1])["payload"]
    assert end["protocol"] == PROTOCOL and end["scorecard"]["tsr"] == 1.0


def test_malformed_response_consumes_a_repair(coffee):
    def peer(ch):
        planner = ScriptedPlanner(coffee.episode)
        garbled = False
        while True:
            msg = ch.recv()
            if msg.kind == "RUN_END":
                return
            if msg.kind == "PLAN_REQUEST" and not garbled:
                garbled = True
                ch._w.write(b'{"kind":"PLAN_RESPONSE","seq":1,"payload":{"plan":[]}}\n')
                ch._w.flush()
                ch._sent = 1
                continue
            if msg.kind == "PLAN_REQUEST":
                ch.send("PLAN_RESPONSE", {"skills": [s.to_doc() for s in planner.plan(PlanRequest.from_doc(
                    msg.payload))]})
            elif msg.kind == "TASK_CONTEXT":
                planner.on_task_start(msg.payload)

    session, _ = run_pair(coffee, peer)
    assert session.disconnected is None
    first = session.log.task_end("make_coffee")
    assert first["counters"]["repairs"] == 1 and first["goal_reached"]
    plans = session.log.events("plan")
    assert "malformed" in plans[0]["error"]
    assert session.scorecard["tsr"] == 1.0


def test_unannounced_verb_is_malformed(coffee):
    def peer(ch):
        while True:
            msg = ch.recv()
            if msg.kind == "RUN_END":
                return
            if msg.kind == "PLAN_REQUEST":
                ch.send("PLAN_RESPONSE", {"skills": [{"id": "x", "center": "teleport(cup_01)"}]})

    session, _ = run_pair(coffee, peer)
    assert all("teleport" in p["error"] for p in session.log.events("plan"))
    assert {e["reason"] for e in session.log.events("task_end")} == {"plan_exhausted"}


def test_disconnect_scores_what_happened(coffee, tmp_path):
    def peer(ch):
        planner = PlannerClient(ScriptedPlanner(coffee.episode), ch)
        while True:
            msg = ch.recv()
            if msg.kind == "TASK_CONTEXT" and msg.payload["position"] == 1:
                ch.close()
                return
            if msg.kind == "TASK_CONTEXT":
                planner.planner.on_task_start(msg.payload)
            elif msg.kind == "PLAN_REQUEST":
                skills = planner.planner.plan(PlanRequest.from_doc(msg.payload))
                ch.send("PLAN_RESPONSE", {"skills": [s.to_doc() for s in skills]})

    session, server = run_pair(coffee, peer)
    assert session.disconnected
    reasons = [(e["task_id"], e["reason"]) for e in session.log.events("task_end")]
    assert reasons[0] == ("make_coffee", "goal")
    assert all(r == "disconnected" for _, r in reasons[1:])
    assert session.scorecard["tasks"][0]["tsr"] and session.scorecard["episode_success"] is False
    path = server.write_transcript(tmp_path / "t.txt")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("> ") and any(x.startswith("< ") for x in lines)


def test_hidden_only_objects_never_cross_the_wire():
    text = read_scenario("coffee").text.replace("capsule_02", "zz_canary_17")
    compiled = compile_episode(parse_scenario(text.encode(), "canary.yaml"))
    assert "zz_canary_17" in {n.instance_id for n in compiled.episode.init.objects}
    session, _ = run_pair(compiled, scripted_peer(compiled))
    assert session.scorecard["tsr"] == 1.0
    assert not any("zz_canary_17" in line for _, line in session.transcript)


def test_endpoints():
    assert parse_endpoint("stdio") == ("stdio",)
    assert parse_endpoint("tcp:127.0.0.1:9000") == ("tcp", "127.0.0.1", 9000)
    assert parse_endpoint("unix:/tmp/x.sock") == ("unix", "/tmp/x.sock")
    for bad in ("tcp:9000", "udp:x", "unix:"):
        with pytest.raises(ValueError):
            parse_endpoint(bad)


def _serve_in_thread(coffee, endpoint, out_dir, sessions):
    ready = threading.Event()
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("r", serve(coffee, endpoint, out_dir=out_dir,
                                                                   max_sessions=sessions, timeout=30,
                                                                   ready=ready)))
    t.start()
    assert ready.wait(10)
    return t, box


def _client(coffee, endpoint):
    ch = connect(endpoint, timeout=30)
    try:
        return PlannerClient(ScriptedPlanner(coffee.episode), ch).run()
    finally:
        ch.close()


def test_tcp_serve_writes_session_files(coffee, tmp_path):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    endpoint = f"tcp:127.0.0.1:{port}"
    t, box = _serve_in_thread(coffee, endpoint, tmp_path, 2)
    ends = [None, None]
    clients = [threading.Thread(target=lambda i=i: ends.__setitem__(i, _client(coffee, endpoint))) for i in (0, 1)]
    for c in clients:
        c.start()
    for c in clients:
        c.join(30)
    t.join(30)
    assert [e["scorecard"]["tsr"] for e in ends] == [1.0, 1.0]
    sessions = box["r"]
    assert len(sessions) == 2 and sessions[0].log.dumps() == sessions[1].log.dumps()
    for n in (1, 2):
        d = tmp_path / f"session-{n:03d}"
        assert sorted(p.name for p in d.iterdir()) == ["runlog.jsonl", "scorecard.json", "transcript.txt"]
        assert json.loads((d / "scorecard.json").read_text())["tsr"] == 1.0


@pytest.mark.skipif(not hasattr(socket, "AF_UNIX"), reason="no unix sockets")
def test_unix_endpoint(coffee, tmp_path):
    endpoint = f"unix:{tmp_path / 'hw.sock'}"
    t, box = _serve_in_thread(coffee, endpoint, None, 1)
    end = _client(coffee, endpoint)
    t.join(30)
    assert end["scorecard"]["tsr"] == 1.0
    assert os.path.exists(tmp_path / "hw.sock")


def test_channel_over_plain_pipes():
    r1, w1 = os.pipe()
    r2, w2 = os.pipe()
    a = Channel(os.fdopen(r1, "rb"), os.fdopen(w2, "wb"), 5)
    b = Channel(os.fdopen(r2, "rb"), os.fdopen(w1, "wb"), 5)
    b.send("PLAN_RESPONSE", {"skills": None})
    assert a.recv().payload == {"skills": None}
    b.close()
    with pytest.raises(PlannerDisconnected, match="closed"):
        a.recv()
    a.close()
