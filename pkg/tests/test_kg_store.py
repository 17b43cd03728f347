import json
import random

import pytest
from hypothesis import given, strategies as st

from kgworlds.kg_store import (DanglingReferenceError, IngestError, KnowledgeGraph, Literal, Qualifier,
                               UnresolvedTypeError, filter_entities, ingest_kg, is_named_entity, load_kg,
                               resolve_type_label)

from conftest import ent, fact, lit_fact


def _lines(records):
    return [json.dumps(r) + "\n" for r in records]


ENTS = [
    {"id": "Q1", "label": "Vancouver", "aliases": ["Van"], "instance_of": ["Q10"], "flags": []},
    {"id": "Q2", "label": "Canada", "aliases": [], "instance_of": [], "flags": []},
    {"id": "Q10", "label": "city", "aliases": [], "instance_of": [], "flags": []},
]
FACTS = [
    {"subject": "Q1", "property": "P17", "property_label": "country", "object": {"entity": "Q2"}, "qualifiers": []},
    {"subject": "Q1", "property": "P571", "property_label": "inception",
     "object": {"literal": {"kind": "timestamp", "value": "1886-04-06"}},
     "qualifiers": [{"property": "P1", "property_label": "source", "value": {"kind": "string", "value": "x"}}]},
]


def test_minimal_ingest():
    kg = ingest_kg(_lines(ENTS[:2]), _lines(FACTS[:1]))
    assert len(kg.entities) == 2 and len(kg.facts) == 1
    assert kg.facts[0].object == "Q2"


def test_dangling_reference_names_missing_id():
    bad = dict(FACTS[0], object={"entity": "Q999"})
    with pytest.raises(DanglingReferenceError, match="Q999"):
        ingest_kg(_lines(ENTS), _lines([bad]))


def test_malformed_record_reports_line_number():
    lines = _lines(ENTS[:1]) + ["{not json\n"]
    with pytest.raises(IngestError, match="2"):
        ingest_kg(lines, [])


def test_literal_kind_is_checked():
    bad = dict(FACTS[1], object={"literal": {"kind": "blob", "value": "1"}})
    with pytest.raises(Exception):
        ingest_kg(_lines(ENTS), _lines([bad]))


def test_shuffled_input_gives_identical_content():
    a = ingest_kg(_lines(ENTS), _lines(FACTS))
    ents, facts = list(ENTS), list(FACTS) * 2  # duplicates collapse too
    random.Random(3).shuffle(ents)
    random.Random(4).shuffle(facts)
    b = ingest_kg(_lines(ents), _lines(facts))
    assert a.dumps() == b.dumps()
    assert a.fingerprint() == b.fingerprint()


def test_save_load_roundtrip_keeps_fact_ids(tmp_path):
    kg = ingest_kg(_lines(ENTS), _lines(FACTS))
    kg.save(tmp_path)
    again = load_kg(tmp_path)
    assert again.dumps() == kg.dumps()
    assert [f.fid for f in again.facts] == [f.fid for f in kg.facts]


@pytest.mark.parametrize("label,expected", [
    ("Geoffrey Hinton", True), ("dog", False), ("einsteinium", False), ("Mumbai", True),
    ("de Gaulle", False), ("'Ōmuaʻa", True), ("1999 Cup", True), ("", False), ("123", False),
    ("iPhone", False), ("Émile Zola", True),
])
def test_naming_rule(label, expected):
    assert is_named_entity(label) is expected


def _filter_fixture():
    ents = [
        ent("Q1", "Mumbai", ["Q9"]), ent("Q2", "2019", ["Q3"]), ent("Q3", "year", flags=["time_term"]),
        ent("Q4", ""), ent("Q5", "Route 66"), ent("Q6", "Category:Stuff", ["Q4167836"]),
        ent("Q7", "Colaba", ["Q9"]), ent("Q9", "city"), ent("Q8", "March", ["Q47018901"]),
    ]
    facts = [fact("Q1", "P1", "Q2"), fact("Q1", "P2", "Q7"), fact("Q7", "P3", "Q4"), fact("Q5", "P4", "Q1"),
             fact("Q6", "P5", "Q1"), fact("Q8", "P6", "Q7")]
    return KnowledgeGraph.build(ents, facts)


def test_filter_drops_the_right_entities():
    out = filter_entities(_filter_fixture())
    assert sorted(out.entities) == ["Q1", "Q7", "Q9"]
    assert [(f.subject, f.object) for f in out.facts] == [("Q1", "Q7")]


def test_filter_is_idempotent_and_leaves_no_dangling_facts():
    once = filter_entities(_filter_fixture())
    assert filter_entities(once).dumps() == once.dumps()
    for f in once.facts:
        assert all(x in once.entities for x in f.endpoints())


def _type_graph():
    ents = [ent("Q1", "Vancouver", ["Q10"]), ent("Q10", "city in British Columbia"),
            ent("Q2", "British Columbia", ["Q11"]), ent("Q11", "province of Canada"),
            ent("Q3", "Canada", ["Q12"]), ent("Q12", "country")]
    return KnowledgeGraph.build(ents, [])


def test_type_label_resolution_walks_named_entities():
    assert resolve_type_label("Q1", _type_graph()) == "city in province of country"


def test_type_label_without_named_entities_is_unchanged():
    assert resolve_type_label("Q3", _type_graph()) == "country"


def test_type_cycle_hits_depth_cap():
    ents = [ent("Q1", "Alpha", ["Q10"]), ent("Q10", "part of Beta"),
            ent("Q2", "Beta", ["Q11"]), ent("Q11", "part of Alpha")]
    with pytest.raises(UnresolvedTypeError) as info:
        resolve_type_label("Q1", KnowledgeGraph.build(ents, []))
    assert info.value.entity == "Q1"
    assert "part of" in info.value.partial


def test_timestamps_of_fact_collects_object_and_qualifiers():
    f = fact("Q1", "P166", "Q2", quals=[Qualifier("P585", "point in time", Literal("timestamp", "1990"))])
    assert [x.value for x in f.timestamps()] == ["1990"]
    g = lit_fact("Q1", "P569", "timestamp", "1935-01-15")
    assert [x.value for x in g.timestamps()] == ["1935-01-15"]


@given(st.lists(st.text(alphabet="abcXYZ 1", min_size=0, max_size=6), min_size=1, max_size=8))
def test_naming_rule_matches_first_letter(labels):
    for label in labels:
        letters = [c for c in label if c.isalpha()]
        assert is_named_entity(label) == bool(letters and letters[0].isupper())
