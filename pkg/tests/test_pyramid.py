import json
import logging
from itertools import chain, combinations
from math import comb

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyramem.llm import Gateway, ScriptedProvider
from pyramem.prompts import PromptSet
from pyramem.pyramid import (
    PyramidUnavailable,
    build_pyramid,
    next_group,
    select_query_keywords,
)

PROMPTS = PromptSet.load()
VOCAB = ["james", "adventure", "book", "paris", "travel", "tennis", "cat"]


def sel(*words):
    return Gateway(ScriptedProvider().on("select", json.dumps({"keywords": list(words)})))


def test_select_scripted():
    assert select_query_keywords("q", VOCAB, sel("james", "adventure", "book"), PROMPTS) == [
        "james",
        "adventure",
        "book",
    ]


def test_select_drops_unknown(caplog):
    with caplog.at_level(logging.WARNING):
        out = select_query_keywords("q", VOCAB, sel("james", "unicorn"), PROMPTS)
    assert out == ["james"]
    assert "unicorn" in caplog.text


def test_select_caps_depth():
    six = VOCAB[:6]
    assert select_query_keywords("q", VOCAB, sel(*six), PROMPTS, depth_cap=4) == six[:4]


def test_select_unavailable():
    with pytest.raises(PyramidUnavailable):
        select_query_keywords("q", VOCAB, sel("unicorn"), PROMPTS)
    with pytest.raises(PyramidUnavailable):
        select_query_keywords("q", [], sel("james"), PROMPTS)


def test_select_one_aux_call():
    gw = sel("james")
    select_query_keywords("q", VOCAB, gw, PROMPTS)
    assert gw.usage.calls == 1


def test_level_sizes():
    p = build_pyramid(["a", "b", "c"], {})
    assert [len(p.levels[l]) for l in (1, 2, 3)] == [3, 3, 1]
    assert len(p) == 7


def test_intersection_and_order():
    p = build_pyramid(["a", "b"], {"a": [1, 2], "b": [2, 3]})
    assert p.traversal[0].keywords == ("a", "b")
    assert p.traversal[0].memories == (2,)
    assert [g.keywords for g in p.traversal[1:]] == [("a",), ("b",)]


def test_within_level_size_descending():
    p = build_pyramid(["a", "b"], {"a": [1], "b": [1, 2, 3]})
    assert [g.keywords for g in p.levels[1]] == [("b",), ("a",)]


def test_equal_postings_lexicographic_ties():
    post = {k: [0, 1] for k in "dcba"}
    p = build_pyramid(list("dcba"), post)
    assert len(p) == 15
    expected = [
        tuple(c) for l in range(4, 0, -1) for c in combinations("abcd", l)
    ]
    assert [g.keywords for g in p.traversal] == expected


def test_callable_postings_and_validation():
    p = build_pyramid(["x"], lambda k: [4, 9])
    assert p.traversal[0].memories == (4, 9)
    with pytest.raises(ValueError):
        build_pyramid([], {})
    with pytest.raises(ValueError):
        build_pyramid(list("abcdefghi"), {})


def test_next_group():
    p = build_pyramid(["a", "b", "c"], {})
    group, cursor = next_group(p, 0)
    assert group.level == 3 and cursor == 1
    assert next_group(p, 7) is None
    with pytest.raises(IndexError):
        next_group(p, 8)


def test_to_dict_shape():
    d = build_pyramid(["a", "b"], {"a": [1]}).to_dict()
    assert d["traversal"] == [["a", "b"], ["a"], ["b"]]
    assert d["levels"]["1"][0] == {"keywords": ["a"], "size": 1, "memories": [1]}


def brute_force(q, postings):
    q = sorted(set(q))
    out = {}
    for subset in chain.from_iterable(combinations(q, l) for l in range(1, len(q) + 1)):
        sets = [set(postings.get(k, ())) for k in subset]
        out[subset] = tuple(sorted(set.intersection(*sets)))
    return out


postings_st = st.dictionaries(
    st.sampled_from([f"k{i}" for i in range(12)]),
    st.lists(st.integers(0, 49), unique=True).map(sorted),
)


@settings(max_examples=200, deadline=None)
@given(postings_st, st.lists(st.sampled_from([f"k{i}" for i in range(12)]), min_size=1, max_size=6, unique=True))
def test_pyramid_matches_brute_force(postings, q):
    p = build_pyramid(q, postings)
    oracle = brute_force(q, postings)
    n = len(q)
    assert len(p) == 2**n - 1
    for l in range(1, n + 1):
        assert len(p.levels[l]) == comb(n, l)
    assert {g.keywords: g.memories for g in p.traversal} == oracle
    levels = [g.level for g in p.traversal]
    assert levels == sorted(levels, reverse=True)
    for l in range(1, n + 1):
        keys = [(-len(g.memories), g.keywords) for g in p.levels[l]]
        assert keys == sorted(keys)
    # subset monotonicity
    for g in p.traversal:
        for h in p.traversal:
            if set(g.keywords) <= set(h.keywords):
                assert set(h.memories) <= set(g.memories)
