import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from searchrl.env import EpisodeConfig, oracle_retriever_for, run_episode
from searchrl.errors import ProtocolError, SchemaError, TransportError, UsageError
from searchrl.metrics import exact_match, normalize_answer
from searchrl.policy import (
    WRONG_ANSWER_POOL,
    PromptTemplate,
    RemotePolicy,
    ScriptedCapability,
    ScriptedPolicy,
    builtin_template,
    extract_answer_span,
    intermediate_answer,
    load_template,
    render_prompt,
    serialize_prefix,
)
from searchrl.rewards import score_trajectory
from searchrl.tasks import generate_tasks
from searchrl.trajectory import Step


def make_steps(n=1):
    return [
        Step(
            index=i,
            think=f"note {i}",
            search_query=f"query {i}",
            retrieved_doc_ids=(f"d{i}",),
            observation=f"observation {i}",
            intermediate_answer=None,
        )
        for i in range(1, n + 1)
    ]


class TestTemplates:
    def test_fixed_depth_phrasing(self):
        prompt = render_prompt(builtin_template("fixed_depth_2"), "Who?", [])
        assert "search exactly two times" in prompt
        assert "no less than two" in prompt

    def test_zero_depth_answers_directly(self):
        prompt = render_prompt(builtin_template("fixed_depth_0"), "Who?", [])
        assert "directly provide the answer" in prompt
        assert "<search>" not in prompt.split("Question:")[0].split("search engine")[0]

    def test_intermediate_template_mentions_trajectory(self):
        prompt = render_prompt(builtin_template("intermediate_answer"), "Who?", make_steps(1))
        assert "according to search trajectories" in prompt
        assert "<information>observation 1</information>" in prompt

    def test_unknown_template_rejected(self):
        with pytest.raises(UsageError):
            builtin_template("fixed_depth_9")

    def test_template_requires_placeholders(self):
        with pytest.raises(SchemaError):
            PromptTemplate("bad", "no placeholders here")

    def test_template_override_from_file(self, tmp_path):
        path = tmp_path / "custom.txt"
        path.write_text("Q: {question} T: {trajectory}", encoding="utf-8")
        template = load_template("rollout", path)
        assert render_prompt(template, "why", "prefix") == "Q: why T: prefix"

    def test_unresolved_placeholder_named(self):
        template = PromptTemplate("odd", "{question} {trajectory} {mystery}")
        with pytest.raises(SchemaError, match="mystery"):
            render_prompt(template, "q", [])

    def test_empty_prefix_has_no_information_span(self):
        prompt = render_prompt(builtin_template("intermediate_answer"), "Who?", [])
        assert "<information>" not in prompt

    def test_prefix_serialization_one_span_per_step(self):
        text = serialize_prefix(make_steps(3))
        assert text.count("<information>") == 3
        assert text.count("<search>") == 3

    def test_render_injective_in_prefix(self):
        question = "Who?"
        template = builtin_template("rollout")
        seen = set()
        for n in range(4):
            seen.add(render_prompt(template, question, make_steps(n)))
        assert len(seen) == 4


def scripted_session(task, *, prob=1.0, bias=0, fixed_depth=None, seed=0):
    backend = ScriptedPolicy(ScriptedCapability(hop_success_prob=prob, extraction_depth_bias=bias))
    return backend.session(record=task.record(), task=task, fixed_depth=fixed_depth, seed=seed)


class TestScriptedPolicy:
    def test_deterministic_given_seed(self):
        task = generate_tasks(1, [2], seed=0)[0]
        outputs = []
        for _ in range(2):
            session = scripted_session(task, prob=0.5, seed=123)
            outputs.append([session.generate("anything") for _ in range(4)])
        assert outputs[0] == outputs[1]

    def test_perfect_policy_reaches_capability_at_depth(self):
        for depth in (1, 2, 3):
            task = generate_tasks(1, [depth], seed=depth)[0]
            session = scripted_session(task)
            tasks = {task.id: task}
            traj = run_episode(
                session,
                oracle_retriever_for(tasks)(task.id),
                task.record(),
                EpisodeConfig(),
            )
            _, scored = score_trajectory(traj, task.record())
            assert scored.t_c == depth
            assert len(traj.steps) == depth
            assert traj.final_answer == task.answers[0]

    def test_wrong_answers_disjoint_from_gold(self):
        task = generate_tasks(1, [2], seed=1)[0]
        for wrong in WRONG_ANSWER_POOL:
            assert exact_match(wrong, task.answers) == 0
            assert not (
                set(normalize_answer(wrong)) & set(normalize_answer(task.answers[0]))
            )

    def test_negative_bias_answers_early(self):
        task = generate_tasks(1, [3], seed=2)[0]
        session = scripted_session(task, bias=-1)
        tasks = {task.id: task}
        traj = run_episode(
            session, oracle_retriever_for(tasks)(task.id), task.record(), EpisodeConfig()
        )
        assert len(traj.steps) == 2
        assert traj.final_answer == task.answers[0]

    def test_positive_bias_needs_extra_steps(self):
        task = generate_tasks(1, [1], seed=3)[0]
        session = scripted_session(task, bias=1)
        tasks = {task.id: task}
        traj = run_episode(
            session, oracle_retriever_for(tasks)(task.id), task.record(), EpisodeConfig()
        )
        assert len(traj.steps) == 2
        _, scored = score_trajectory(traj, task.record())
        assert scored.t_c == 2

    def test_lower_hop_success_increases_mean_capability_depth(self):
        task = generate_tasks(1, [2], seed=4)[0]
        tasks = {task.id: task}
        provider = oracle_retriever_for(tasks)

        def mean_tc(prob, episodes=200):
            total = 0
            counted = 0
            for i in range(episodes):
                session = scripted_session(task, prob=prob, seed=i)
                traj = run_episode(session, provider(task.id), task.record(), EpisodeConfig(max_turns=8))
                _, scored = score_trajectory(traj, task.record())
                if scored.t_c != -1:
                    total += scored.t_c
                    counted += 1
            return total / counted

        assert mean_tc(0.6) > mean_tc(1.0)

    def test_fixed_depth_quota_respected(self):
        task = generate_tasks(1, [1], seed=5)[0]
        session = scripted_session(task, fixed_depth=3)
        tasks = {task.id: task}
        traj = run_episode(
            session,
            oracle_retriever_for(tasks)(task.id),
            task.record(),
            EpisodeConfig(fixed_depth=3),
        )
        assert len(traj.steps) == 3
        assert traj.final_answer == task.answers[0]

    def test_scripted_requires_task(self):
        task = generate_tasks(1, [1], seed=6)[0]
        with pytest.raises(UsageError):
            ScriptedPolicy().session(record=task.record(), task=None)


class _CannedHandler(BaseHTTPRequestHandler):
    responses: list = []
    requests: list = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        type(self).requests.append({"path": self.path, "body": body, "auth": self.headers.get("Authorization")})
        if not type(self).responses:
            status, payload = 200, json.dumps({"text": ""})
        else:
            status, payload = type(self).responses.pop(0)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload.encode("utf-8"))

    def log_message(self, *args):
        pass


@pytest.fixture
def canned_server():
    _CannedHandler.responses = []
    _CannedHandler.requests = []
    server = HTTPServer(("127.0.0.1", 0), _CannedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server, _CannedHandler
    server.shutdown()
    thread.join(timeout=2)


class TestRemotePolicy:
    def _session(self, server, retries=2):
        host, port = server.server_address
        backend = RemotePolicy(base_url=f"http://{host}:{port}", max_retries=retries, retry_wait=0.0)
        return backend.session(record=None)

    def test_returns_text_field(self, canned_server):
        server, handler = canned_server
        handler.responses = [(200, json.dumps({"text": "<answer>x</answer>"}))]
        session = self._session(server)
        out = session.generate("prompt", stop=("</answer>",), max_new_text=64)
        assert out == "<answer>x</answer>"
        sent = handler.requests[0]
        assert sent["path"] == "/generate"
        assert sent["body"] == {"prompt": "prompt", "max_tokens": 64, "stop": ["</answer>"]}

    def test_retries_then_succeeds(self, canned_server):
        server, handler = canned_server
        handler.responses = [
            (500, "busted"),
            (200, json.dumps({"text": "ok"})),
        ]
        session = self._session(server)
        assert session.generate("p") == "ok"
        assert len(handler.requests) == 2

    def test_transport_error_after_retries(self, canned_server):
        server, handler = canned_server
        handler.responses = [(503, "no"), (503, "no"), (503, "no")]
        session = self._session(server, retries=2)
        with pytest.raises(TransportError) as err:
            session.generate("p")
        assert err.value.status == 503

    def test_protocol_error_on_missing_text(self, canned_server):
        server, handler = canned_server
        handler.responses = [(200, json.dumps({"output": "x"}))]
        session = self._session(server)
        with pytest.raises(ProtocolError):
            session.generate("p")

    def test_bearer_token_from_env(self, canned_server, monkeypatch):
        server, handler = canned_server
        monkeypatch.setenv("SEARCHRL_API_TOKEN", "sekrit")
        handler.responses = [(200, json.dumps({"text": "y"}))]
        session = self._session(server)
        session.generate("p")
        assert handler.requests[0]["auth"] == "Bearer sekrit"

    def test_connection_refused_is_transport_error(self):
        backend = RemotePolicy(base_url="http://127.0.0.1:9", max_retries=0, retry_wait=0.0, timeout=0.5)
        session = backend.session(record=None)
        with pytest.raises(TransportError):
            session.generate("p")


def test_extract_answer_span():
    assert extract_answer_span("<think>t</think><answer>legal drama</answer>") == "legal drama"
    assert extract_answer_span("no tags at all") == ""


def test_intermediate_answer_empty_without_span(canned_server):
    server, handler = canned_server
    handler.responses = [(200, json.dumps({"text": "<think>no idea</think>"}))]
    host, port = server.server_address
    backend = RemotePolicy(base_url=f"http://{host}:{port}", max_retries=0, retry_wait=0.0)
    session = backend.session(record=None)
    assert intermediate_answer(session, "Who?", make_steps(1)) == ""


def test_intermediate_answer_needs_steps():
    task = generate_tasks(1, [1], seed=7)[0]
    session = scripted_session(task)
    with pytest.raises(ValueError):
        intermediate_answer(session, "Who?", [])
