import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twinbranch.automaton import (
    KM,
    L,
    NEW,
    SCHEMES,
    SPIKE,
    TRUNK,
    build_periodic_cell,
    build_topology,
    closed_interface_count,
    count_cell_interfaces,
    count_spikes_born,
    direct_interface_count,
    get_scheme,
    interface_count_float,
    is_valid_word,
    mirror,
    rewrite,
    spike_count,
)

PELL = [1, 2, 5, 12, 29, 70, 169, 408, 985, 2378, 5741, 13860]


TABLES = {
    "NEW": {"f": "f|s|f", "s": "t", "t": "f|s|f", "|": "|"},
    "KM": {"f": "f|s|f", "s": "t", "t": "t", "|": "|"},
    "L": {"f": "f|s|f", "s": "f|s|f", "|": "|"},
}


def literal(scheme, k):
    """Plain string rewriting with tables kept independent of the package."""
    table = TABLES[scheme.name]
    w = "f"
    for _ in range(k):
        w = "".join(table[c] for c in w)
    return w


def test_rules_as_tables():
    assert NEW.rules["f"] == "f|s|f" and NEW.rules["s"] == "t" and NEW.rules["t"] == "f|s|f"
    assert KM.rules["s"] == "t" and KM.rules["t"] == "t"
    assert L.rules["s"] == "f|s|f"


def test_three_rewrites_of_new():
    words = build_topology("new", 3).words
    assert words == [
        "f",
        "f|s|f",
        "f|s|f|t|f|s|f",
        "f|s|f|t|f|s|f|f|s|f|f|s|f|t|f|s|f",
    ]


@pytest.mark.parametrize("name", list(SCHEMES))
def test_topology_words_match_literal_rewriting(name):
    sch = SCHEMES[name]
    top = build_topology(sch, 7)
    for k in range(8):
        assert top.word(k) == literal(sch, k)


def test_li_words_have_no_trunks():
    for k in range(1, 8):
        assert "t" not in build_topology("L", 7).word(k)


@pytest.mark.parametrize("name", list(SCHEMES))
@pytest.mark.parametrize("k", range(1, 13))
def test_interface_count_closed_form_matches_literal(name, k):
    sch = SCHEMES[name]
    w = literal(sch, k)
    # the full word spans [1/4, 3/4]; the cell adds its mirror and the two straight interfaces
    assert closed_interface_count(sch, k) == 2 * (w.count("|") + 1)
    assert direct_interface_count(sch, k) == closed_interface_count(sch, k)


def test_new_spike_counts_are_pell_numbers():
    assert [spike_count(NEW, i) for i in range(1, 13)] == PELL
    for i in range(1, 10):
        assert spike_count(NEW, i) == literal(NEW, i).count("s")


@pytest.mark.parametrize("name", ["KM", "L"])
def test_spike_counts_other_schemes(name):
    sch = SCHEMES[name]
    for i in range(1, 10):
        assert spike_count(sch, i) == literal(sch, i).count("s")


@pytest.mark.parametrize("name", list(SCHEMES))
def test_spikes_born_per_level(name):
    top = build_topology(name, 8)
    for k in range(1, 9):
        assert count_spikes_born(top, k) == spike_count(name, k)


@pytest.mark.parametrize("name", list(SCHEMES))
def test_periodic_cell_counts(name):
    top = build_topology(name, 6)
    cells = build_periodic_cell(top)
    for k in range(1, 7):
        assert count_cell_interfaces(cells[k]) == closed_interface_count(name, k)


@pytest.mark.parametrize("name", list(SCHEMES))
def test_float_count_agrees(name):
    k = np.arange(1, 20)
    exact = np.array([closed_interface_count(name, int(j)) for j in k], dtype=float)
    assert np.allclose(interface_count_float(name, k), exact, rtol=1e-12)


@pytest.mark.parametrize("name", list(SCHEMES))
def test_theta_interval_is_growth_window(name):
    sch = SCHEMES[name]
    lo, hi = sch.theta_admissible
    ratio = closed_interface_count(sch, 30) / closed_interface_count(sch, 29)
    assert abs(ratio - sch.growth_base) < 1e-9
    assert abs(lo - 1 / ratio**2) < 1e-9 and abs(hi - 1 / ratio) < 1e-9


def test_new_theta_interval():
    lo, hi = NEW.theta_admissible
    assert abs(lo - 1 / (3 + 2 * np.sqrt(2))) < 1e-15
    assert abs(hi - (np.sqrt(2) - 1)) < 1e-15


def test_trunks_have_single_children():
    top = build_topology("NEW", 6)
    for k in range(1, 6):
        lev, nxt = top.levels[k], top.levels[k + 1]
        for i in np.flatnonzero(lev.kind == SPIKE):
            kids = np.flatnonzero(nxt.parent == i)
            assert len(kids) == 1 and nxt.kind[kids[0]] == TRUNK


def test_errors():
    with pytest.raises(ValueError):
        get_scheme("XYZ")
    with pytest.raises(ValueError):
        rewrite(NEW, "f||s")
    with pytest.raises(ValueError):
        spike_count(NEW, 0)
    with pytest.raises(ValueError):
        build_topology(NEW, 0)


words = st.lists(st.sampled_from("fst"), min_size=1, max_size=12).map("|".join)


@given(words, st.sampled_from(list(SCHEMES)))
def test_rewrite_keeps_words_valid(w, name):
    assert is_valid_word(rewrite(SCHEMES[name], w))


@given(words, st.sampled_from(list(SCHEMES)))
def test_rewrite_commutes_with_mirror(w, name):
    sch = SCHEMES[name]
    assert rewrite(sch, mirror(w)) == mirror(rewrite(sch, w))


@settings(max_examples=30)
@given(st.sampled_from(list(SCHEMES)), st.integers(1, 7))
def test_words_are_palindromes(name, k):
    w = build_topology(name, k).word(k)
    assert w == mirror(w)


@given(words, words, st.sampled_from(list(SCHEMES)))
def test_rewrite_is_a_morphism(a, b, name):
    sch = SCHEMES[name]
    assert rewrite(sch, a + "|" + b) == rewrite(sch, a) + "|" + rewrite(sch, b)
