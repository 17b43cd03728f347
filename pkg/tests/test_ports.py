import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from kgworlds.ports import (CallLog, ChatBackend, EntityGuesser, FactExtractor, GenerationClient,
                            GenerationRequest, MockBackend, MockProfile, NameGenerator, PageWriter, QuestionWriter,
                            ReplayMissError, RequestError, TransportError, in_flight_from_env, link_first_mentions,
                            parse_json_object, parse_prefixed, render_messages, strip_links, substitute_labels,
                            template_variables)

TEMPLATES = ("synthetic_names", "synthetic_name_related", "page", "symbolic_refs", "restore", "novelty_guess",
             "page_facts", "single_hop", "compose")

FACTS = [
    {"fid": "F1", "subject": "Quor Vell", "relation": "award received",
     "object": {"kind": "entity", "label": "Drennic Prize", "id": "Q2"},
     "qualifiers": [{"relation": "point in time", "kind": "timestamp", "value": "1974-05-01"}]},
    {"fid": "F2", "subject": "Quor Vell", "relation": "date of birth",
     "object": {"kind": "timestamp", "value": "1974-01-15"}, "qualifiers": []},
    {"fid": "F3", "subject": "Quor Vell", "relation": "place of birth",
     "object": {"kind": "entity", "label": "Myrthwood", "id": "Q18419"}, "qualifiers": []},
]


def client(profile=None, **kw):
    return GenerationClient(MockBackend(profile), **kw)


def test_every_template_exists_and_declares_variables():
    for t in TEMPLATES:
        assert template_variables(t)


def test_unknown_template_and_unbound_variable_are_request_errors():
    with pytest.raises(RequestError):
        GenerationRequest("nope", {}).validate()
    with pytest.raises(RequestError, match="facts"):
        client().call(GenerationRequest("page", {"title": "x"}))


def test_render_messages_splits_roles():
    msgs = render_messages("novelty_guess", {"page": "Some page text."})
    assert [m["role"] for m in msgs] == ["system", "user"]
    assert "Some page text." in msgs[1]["content"]


def test_mock_page_one_sentence_per_fact():
    text = PageWriter(client()).write_page("Quor Vell", "human", FACTS, {}, {})
    lines = text.splitlines()
    assert len(lines) == 3
    assert lines[0] == "Quor Vell award received Drennic Prize, in 1 May 1974."
    assert lines[1] == "Quor Vell date of birth 15 January 1974."
    for f in FACTS:
        label = f["object"].get("label")
        if label:
            assert label in text


def test_mock_page_single_fact_and_determinism():
    w = PageWriter(client())
    one = w.write_page("Quor Vell", "human", FACTS[2:], {}, {})
    assert one == "Quor Vell place of birth Myrthwood."
    assert PageWriter(client()).write_page("Quor Vell", "human", FACTS, {}, {}) == \
        PageWriter(client()).write_page("Quor Vell", "human", FACTS, {}, {})


def test_glossed_page_keeps_sentence_and_adds_definition():
    w = PageWriter(client(MockProfile(page_style="glossed")))
    text = w.write_page("Quor Vell", "human", FACTS[2:], {"place of birth": "where the person was born"}, {})
    assert text.startswith("Quor Vell place of birth Myrthwood")
    assert "where the person was born" in text


def test_links_and_restore():
    w = PageWriter(client())
    linked = w.link_references("Quor Vell was born in Myrthwood. Myrthwood is small.", {"Q18419": "Myrthwood"})
    assert linked == "Quor Vell was born in [Myrthwood](<ref:Q18419>). Myrthwood is small."
    assert strip_links(linked) == "Quor Vell was born in Myrthwood. Myrthwood is small."
    back = w.restore(linked, "Quor Vell", "Robert Silverberg", {"Myrthwood": "Brooklyn"})
    assert back == "Robert Silverberg was born in [Brooklyn](<ref:Q18419>). Brooklyn is small."


def test_substitution_is_single_pass_and_longest_first():
    assert substitute_labels("A met A B.", {"A": "A B", "A B": "C"}) == "A B met C."
    assert substitute_labels("Annabel and Ann", {"Ann": "Zo"}) == "Annabel and Zo"


def test_link_first_mentions_prefers_longer_labels():
    out = link_first_mentions("Radford Rovers play in Radford.", {"Q1": "Radford", "Q2": "Radford Rovers"})
    assert out == "[Radford Rovers](<ref:Q2>) play in [Radford](<ref:Q1>)."


def test_guesser_strategies():
    g = EntityGuesser(client())
    assert g.guess("Quor Vell was born in Myrthwood.") == "Unknown"
    g2 = EntityGuesser(client(MockProfile(guess_strategy="table", guess_table={"Myrthwood": "Robert Silverberg"})))
    assert g2.guess("Quor Vell was born in Myrthwood.") == "Robert Silverberg"


def test_fact_extractor_reads_mock_page():
    page = PageWriter(client()).write_page("Quor Vell", "human", FACTS, {}, {})
    found = FactExtractor(client()).extract(page, {
        "T1": "Quor Vell -> award received -> <ANS>",
        "T2": "Quor Vell -> award received -> <ANS1> AND <ANS1> -> point in time -> <ANS2>",
        "T3": "Quor Vell -> spouse -> <ANS>"}, {})
    assert found == {"T1": ["Drennic Prize"], "T2": [["Drennic Prize", "1 May 1974"]], "T3": []}


def test_question_writer():
    qw = QuestionWriter(client())
    qs = qw.single_hop([{"subject": "Jorith Luque", "relation": "educated at"}], {})
    assert qs == {"Q1": "What is the educated at of Jorith Luque?"}
    composed = qw.compose([
        {"question": "What is the educated at of Jorith Luque?", "answer": "The Artistic Exchange", "bridges": []},
        {"question": "What is the founded by of The Artistic Exchange?", "answer": "Merith Watts",
         "bridges": ["The Artistic Exchange"]}])
    assert composed == "What is the founded by of the educated at of Jorith Luque?"
    assert "Artistic Exchange" not in composed
    none = QuestionWriter(client(MockProfile(no_composition=True)))
    assert none.compose([{"question": "What is x?", "answer": "y", "bridges": []}]) is None


def test_names_are_deterministic_and_related_names_embed_parents():
    ng = NameGenerator(client())
    a = ng.propose("human", [], 3, 0, "Q1")
    assert len(a) == 3 and a == NameGenerator(client()).propose("human", [], 3, 0, "Q1")
    assert ng.propose("human", [], 1, 1, "Q1") != a[:1]
    related = ng.propose("team", [{"new_label": "Metronis", "type_label": "city", "relation": "located in"}], 1, 0, "Q2")
    assert related[0].endswith(" Metronis")


def test_failure_schedule_gives_one_retry():
    log = CallLog()
    c = GenerationClient(MockBackend(MockProfile(fail_schedule={2: 1})), log)
    g = EntityGuesser(c)
    for _ in range(3):
        g.guess("text")
    assert [e["attempts"] for e in log.entries] == [1, 2, 1]
    assert log.retries() == 1


def test_exhausted_retries_propagate_and_are_logged():
    log = CallLog()
    c = GenerationClient(MockBackend(MockProfile(fail_schedule={1: 5})), log, max_retries=2)
    with pytest.raises(TransportError):
        EntityGuesser(c).guess("text")
    assert log.entries[0]["attempts"] == 3 and log.entries[0]["response"] is None


def test_call_log_file_and_replay(tmp_path):
    path = tmp_path / "calls.jsonl"
    c = GenerationClient(MockBackend(), CallLog(path))
    pages = [PageWriter(c).write_page("Quor Vell", "human", FACTS[i:], {}, {}) for i in range(3)]
    recorded = CallLog.read(path)
    assert len(recorded) == 3 and all(len(e["hash"]) == 64 for e in recorded)
    replay = GenerationClient(None, cassette=recorded)
    assert [PageWriter(replay).write_page("Quor Vell", "human", FACTS[i:], {}, {}) for i in range(3)] == pages
    with pytest.raises(ReplayMissError):
        PageWriter(replay).write_page("Other", "human", FACTS, {}, {})


def test_no_backend_is_transport_error():
    with pytest.raises(TransportError):
        GenerationClient(None).call(GenerationRequest("novelty_guess", {"page": "x"}))


def test_parsers():
    assert parse_json_object('```json\n{"a": 1}\n```') == {"a": 1}
    assert parse_json_object('Sure: {"a": [1, 2]} done') == {"a": [1, 2]}
    with pytest.raises(TransportError):
        parse_json_object("no json")
    assert parse_prefixed("Thought: hmm\nAnswer: Paris", "Answer:") == "Paris"
    assert parse_prefixed("just this", "Answer:") == "just this"


def test_in_flight_from_env(monkeypatch):
    monkeypatch.setenv("KGW_IN_FLIGHT", "7")
    assert in_flight_from_env() == 7
    monkeypatch.setenv("KGW_IN_FLIGHT", "lots")
    assert in_flight_from_env(3) == 3


def test_chat_backend_requires_configuration():
    with pytest.raises(RequestError, match="KGW_ENDPOINT"):
        ChatBackend.from_env({})


class _Handler(BaseHTTPRequestHandler):
    received = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.received.append((self.path, self.headers.get("Authorization"), body))
        if body["model"] == "broken":
            self.send_response(500)
            self.end_headers()
            return
        payload = json.dumps({"choices": [{"message": {"content": "Answer: Ghent"}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def local_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


def test_chat_backend_wire_shape(local_server):
    _Handler.received.clear()
    backend = ChatBackend.from_env({"KGW_ENDPOINT": local_server, "KGW_MODEL": "m1", "KGW_API_KEY": "k"})
    assert EntityGuesser(GenerationClient(backend)).guess("A page.") == "Ghent"
    path, auth, body = _Handler.received[0]
    assert path == "/chat/completions" and auth == "Bearer k"
    assert body["model"] == "m1" and body["messages"][0]["role"] == "system"


def test_chat_backend_http_error_is_transport_error(local_server):
    backend = ChatBackend(local_server, "broken")
    log = CallLog()
    with pytest.raises(TransportError):
        EntityGuesser(GenerationClient(backend, log, max_retries=1)).guess("A page.")
    assert log.entries[0]["attempts"] == 2
