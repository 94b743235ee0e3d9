from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vigtext.embed import ToyProvider
from vigtext.errors import FixtureFormatError
from vigtext.textgraph import (
    ExplanationRecord,
    attach_dependencies,
    build_text_graph,
    chain_dependencies,
    format_records,
    load_dep_fixture,
    parse_explanations,
    prompt_template,
    sentence_digest,
    tokenize,
    tokenize_record,
    write_dep_fixture,
)

DATA = Path(__file__).parent / "data"


def sample_text():
    return (DATA / "sample_explanations.txt").read_text()


# ---------------------------------------------------------------------------
# parsing

def test_sample_explanations_parse_to_three_records():
    records, diags = parse_explanations(sample_text(), 4)
    assert diags == []
    assert [r.labels for r in records] == [("B3", "B4"), ("D1", "D2"), ("D3",)]
    assert records[0].sentence.startswith("The window blinds have uneven spacing")
    assert records[1].sentence.endswith("expected perspective and lighting.")
    assert records[2].sentence.startswith("The drawer underneath the stove")
    assert all(r.tokens == () and r.dep_edges == () for r in records)


def test_parse_empty_text():
    assert parse_explanations("", 4) == ([], [])


def test_parse_out_of_grid_label():
    records, diags = parse_explanations("{Z9}: blurry edge", 4)
    assert records == []
    assert len(diags) == 1 and "outside" in diags[0]


def test_parse_mixed_validity_and_formats():
    text = "\n".join(
        [
            "Here is my analysis of the image:",  # prose, ignored
            "[{A1, B2}]: soft textures",  # bracketed + spaces
            "{C9, a2}: one bad one good",  # C9 out of grid for n=2 grid? use n=2
            "",
        ]
    )
    records, diags = parse_explanations(text, 2)
    assert len(records) == 2
    assert records[0].labels == ("A1", "B2")
    assert records[1].labels == ("A2",)
    assert records[1].sentence == "one bad one good"
    assert any("C9" in d for d in diags)


def test_parse_dedupes_and_sorts_labels():
    records, _ = parse_explanations("{B1, A2, B1}: twice", 2)
    assert records[0].labels == ("A2", "B1")


def test_format_parse_round_trip():
    records, _ = parse_explanations(sample_text(), 4)
    again, diags = parse_explanations(format_records(records), 4)
    assert diags == []
    assert again == records


@settings(max_examples=30, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=4, unique=True
    ),
    st.text(
        alphabet=st.characters(whitelist_categories=("Lu", "Ll", "Nd"), max_codepoint=127),
        min_size=1,
        max_size=20,
    ),
)
def test_parse_format_idempotent_property(cells, sentence):
    from vigtext.raster import label_for

    labels = tuple(label_for(r, c) for r, c in sorted(set(cells)))
    rec = ExplanationRecord(labels=labels, sentence=sentence.strip())
    records, _ = parse_explanations(format_records([rec]), 4)
    assert len(records) == 1
    assert records[0].labels == labels
    assert records[0].sentence == rec.sentence


# ---------------------------------------------------------------------------
# tokenization

def test_tokenize_examples():
    assert tokenize("The window blinds.") == ["The", "window", "blinds", "."]
    assert tokenize("") == []
    assert tokenize("don't stop") == ["don't", "stop"]


def test_tokenize_boundary_punctuation():
    assert tokenize('"Hello," she said.') == ['"', "Hello", ",", '"', "she", "said", "."]
    assert tokenize("well-lit room") == ["well-lit", "room"]
    assert tokenize("...") == [".", ".", "."]


def test_tokenize_preserves_case():
    assert tokenize("The AI") == ["The", "AI"]


# ---------------------------------------------------------------------------
# dependency attachment

def tokenized(sentence, labels=("A1",)):
    return tokenize_record(ExplanationRecord(labels=labels, sentence=sentence))


def test_attach_single_token():
    rec, diags = attach_dependencies(tokenized("fake"), [])
    assert rec.dep_edges == () and diags == []


def test_attach_tree_edges():
    rec, diags = attach_dependencies(tokenized("a b c d"), [(1, 0), (1, 2), (2, 3)])
    assert rec.dep_edges == ((1, 0), (1, 2), (2, 3))
    assert diags == []


def test_attach_removes_self_loops_and_duplicates():
    rec, diags = attach_dependencies(tokenized("a b c"), [(0, 0), (0, 1), (1, 0), (1, 2)])
    assert rec.dep_edges == ((0, 1), (1, 2))
    assert len(diags) == 2


def test_attach_rejects_out_of_range():
    with pytest.raises(ValueError):
        attach_dependencies(tokenized("a b"), [(0, 5)])
    with pytest.raises(ValueError):
        attach_dependencies(ExplanationRecord(labels=("A1",), sentence="x"), [])


def test_chain_dependencies_is_tree():
    assert chain_dependencies(["a"]) == []
    assert chain_dependencies(["a", "b", "c"]) == [(0, 1), (1, 2)]


# ---------------------------------------------------------------------------
# text graphs

def test_build_singleton_graph():
    provider = ToyProvider(seed=0, text_dim=8)
    rec, _ = attach_dependencies(tokenized("fake"), [])
    g = build_text_graph(rec, provider)
    assert len(g.features) == 1 and g.edges == []
    assert g.anchor_labels == ("A1",)


def test_build_rejects_untokenized():
    provider = ToyProvider(seed=0)
    with pytest.raises(ValueError):
        build_text_graph(ExplanationRecord(labels=("A1",), sentence="x"), provider)


def test_identical_sentences_give_equal_features():
    provider = ToyProvider(seed=0, text_dim=8)
    a = build_text_graph(tokenized("same words here"), provider)
    b = build_text_graph(tokenized("same words here", labels=("B2",)), provider)
    assert all(np.array_equal(x, y) for x, y in zip(a.features, b.features))
    assert a.edges == b.edges


def test_fixture_record_is_a_tree():
    # third sample record, parse frozen in the committed fixture
    records, _ = parse_explanations(sample_text(), 4)
    table = load_dep_fixture(DATA / "sample_deps.jsonl")
    tokens, edges = table[sentence_digest(records[2].sentence)]
    rec, diags = attach_dependencies(
        ExplanationRecord(records[2].labels, records[2].sentence, tuple(tokens)), edges
    )
    assert diags == []
    assert len(rec.dep_edges) == len(rec.tokens) - 1
    g = build_text_graph(rec, ToyProvider(seed=0, text_dim=8))
    assert len(g.features) == len(tokens)
    assert all(0 <= i < len(tokens) and 0 <= j < len(tokens) for i, j in g.edges)
    assert all(i != j for i, j in g.edges)


def test_all_fixture_records_cover_sample_sentences():
    records, _ = parse_explanations(sample_text(), 4)
    table = load_dep_fixture(DATA / "sample_deps.jsonl")
    for rec in records:
        tokens, edges = table[sentence_digest(rec.sentence)]
        assert len(edges) == len(tokens) - 1


def test_dep_fixture_round_trip(tmp_path):
    path = tmp_path / "deps.jsonl"
    write_dep_fixture(path, [("a b", ["a", "b"], [(0, 1)])])
    table = load_dep_fixture(path)
    assert table[sentence_digest("a b")] == (["a", "b"], [(0, 1)])


def test_dep_fixture_errors(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    with pytest.raises(FixtureFormatError):
        load_dep_fixture(bad)
    shaped = tmp_path / "shaped.jsonl"
    shaped.write_text('{"sentence_digest": "ab", "tokens": [], "edges": []}\n')
    with pytest.raises(FixtureFormatError):
        load_dep_fixture(shaped)
    with pytest.raises(FixtureFormatError):
        load_dep_fixture(tmp_path / "absent.jsonl")


def test_prompt_template_shape(tmp_path):
    text = prompt_template()
    assert "[{listofpatches}]:{explanation}" in text
    assert "{A1, A2}" in text
    override = tmp_path / "p.txt"
    override.write_text("custom prompt")
    assert prompt_template(override) == "custom prompt"
