import time

import pytest
from hypothesis import given, settings, strategies as st

from narravoc import npe

EXAMPLE = [
    "#C C cuts a potato",
    "cuts  a potato",
    "open door",
    "open door slowly",
    "open door slowly with key",
    "walk around",
]


def oracle_encode(texts):
    """Independent re-derivation of the compression from first principles.

    Bases are narrations with no strictly shorter narration as word-prefix;
    an extension decomposes against its longest base prefix; the suffix set
    collects s relative to every narration n that is a proper word-prefix
    of s.
    """
    toks = {t: tuple(t.split()) for t in texts}

    def is_prefix(a, b):
        return len(toks[a]) < len(toks[b]) and toks[b][: len(toks[a])] == toks[a]

    bases = [t for t in texts if not any(is_prefix(o, t) for o in texts)]
    decomp = {}
    for t in texts:
        cands = [b for b in bases if is_prefix(b, t)]
        if cands:
            b = max(cands, key=lambda x: len(toks[x]))
            decomp[t] = (b, " ".join(toks[t][len(toks[b]) :]))
    suffixes = {""}
    for n in texts:
        for s in texts:
            if is_prefix(n, s):
                suffixes.add(" ".join(toks[s][len(toks[n]) :]))
    return set(bases), suffixes, decomp


def test_example_corpus():
    r = npe.encode_corpus(EXAMPLE)
    assert r.prefixes == ["cuts a potato", "open door", "walk around"]
    assert r.postfixes[0] == npe.EMPTY_POSTFIX == ""
    assert set(r.postfixes) == {"", "slowly", "slowly with key", "with key"}
    assert r.decomposition["open door slowly"] == ("open door", "slowly")
    assert r.decomposition["open door slowly with key"] == ("open door", "slowly with key")


def test_report_counts():
    r = npe.encode_corpus(EXAMPLE + ["", "#C C"])
    rep = r.report
    assert rep.input_count == 8
    assert rep.dropped_empty == 2
    assert rep.dedup_count == 5  # tag-stripped duplicate collapses
    assert rep.prefix_count == 3
    assert rep.extension_count == 2
    assert rep.postfix_count == len(r.postfixes)


def test_tag_stripping_and_whitespace():
    assert npe.normalize_text("#C C cuts  a  potato ") == "cuts a potato"
    assert npe.normalize_text("#O washes hands") == "washes hands"
    assert npe.normalize_text("  #unsure  ") == ""


def test_normalize_corpus_dedups_in_order():
    out = npe.normalize_corpus(["b x", "a y", "b  x"])
    assert [n.text for n in out] == ["b x", "a y"]


def test_decomposition_reconstructs():
    r = npe.encode_corpus(EXAMPLE)
    for ext, (base, suffix) in r.decomposition.items():
        assert f"{base} {suffix}" == ext


def test_empty_corpus():
    r = npe.encode_corpus([])
    assert r.prefixes == []
    assert r.postfixes == [""]


corpora = st.lists(
    st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=5).map(" ".join),
    min_size=0,
    max_size=30,
)


@settings(max_examples=120, deadline=None)
@given(corpora)
def test_property_matches_oracle(raw):
    r = npe.encode_corpus(raw)
    texts = [n.text for n in npe.normalize_corpus(raw)]
    bases, suffixes, decomp = oracle_encode(texts)
    assert set(r.prefixes) == bases
    assert set(r.postfixes) == suffixes
    assert r.decomposition == decomp
    # every narration is representable
    for t in texts:
        assert t in r.prefixes or t in r.decomposition


@settings(max_examples=60, deadline=None)
@given(corpora)
def test_property_prefixes_are_fixed_point(raw):
    r = npe.encode_corpus(raw)
    again = npe.encode_corpus(list(r.prefixes))
    assert again.prefixes == r.prefixes
    assert again.postfixes == [""]
