"""Branching topologies generated by letter-by-letter word rewriting.

A word is a string over ``f`` (facet), ``s`` (spike), ``t`` (trunk) and
``|`` (interface).  Every scheme starts from ``"f"``; level ``k`` of the
pattern is the ``k``-fold rewrite.  Words are symmetric about their central
letter, so the geometry only needs the central letter and the letters below
it (the *half word*).  :class:`PatternTopology` stores those half words as
integer arrays together with the genealogy needed to place vertices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

import numpy as np

FACET, SPIKE, TRUNK = 0, 1, 2
LETTERS = "fst"
INTERFACE = "|"

ALPHA = 1.0 + sqrt(2.0)
BETA = 1.0 - sqrt(2.0)

MAX_COUNT_LEVEL = 40


@dataclass(frozen=True)
class Scheme:
    name: str
    rules: dict
    growth_base: float
    # I_k = sum(a * g**k for a, g in interface_terms)
    interface_terms: tuple

    @property
    def theta_admissible(self) -> tuple[float, float]:
        g = self.growth_base
        return 1.0 / g**2, 1.0 / g

    def expansion(self, letter: int) -> tuple[int, ...]:
        return tuple(LETTERS.index(c) for c in self.rules[LETTERS[letter]] if c != INTERFACE)

    def __str__(self) -> str:
        return self.name


NEW = Scheme(
    "NEW",
    {"f": "f|s|f", "s": "t", "t": "f|s|f", "|": "|"},
    ALPHA,
    ((ALPHA, ALPHA), (BETA, BETA)),
)
KM = Scheme(
    "KM",
    {"f": "f|s|f", "s": "t", "t": "t", "|": "|"},
    2.0,
    ((4.0, 2.0), (-2.0, 1.0)),
)
# trunks never occur in L; the identity rule only keeps the table total
L = Scheme(
    "L",
    {"f": "f|s|f", "s": "f|s|f", "t": "t", "|": "|"},
    3.0,
    ((2.0, 3.0),),
)

SCHEMES = {"NEW": NEW, "KM": KM, "L": L}


def get_scheme(name) -> Scheme:
    if isinstance(name, Scheme):
        return name
    try:
        return SCHEMES[str(name).upper()]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; expected one of {sorted(SCHEMES)}") from None


def is_valid_word(word: str) -> bool:
    if not word or word[0] == INTERFACE or word[-1] == INTERFACE:
        return False
    if INTERFACE * 2 in word:
        return False
    parts = word.split(INTERFACE)
    return all(len(p) == 1 and p in LETTERS for p in parts)


def rewrite(scheme: Scheme, word: str) -> str:
    """Apply the scheme's rules to every letter of ``word``."""
    scheme = get_scheme(scheme)
    if not is_valid_word(word):
        raise ValueError(f"invalid word {word!r}")
    return "".join(scheme.rules[c] for c in word)


def mirror(word: str) -> str:
    return word[::-1]


# -- exact counts ---------------------------------------------------------


def _pell_pair(n: int) -> tuple[int, int]:
    """Return integers (a, b) with (1 + sqrt 2)**n = a + b sqrt 2."""
    a, b = 1, 0
    for _ in range(n):
        a, b = a + 2 * b, a + b
    return a, b


def _check_level(k: int) -> None:
    if int(k) != k or k < 1:
        raise ValueError(f"level must be a positive integer, got {k}")
    if k > MAX_COUNT_LEVEL:
        raise OverflowError(f"counts are limited to level {MAX_COUNT_LEVEL}")


def spike_count(scheme, i: int) -> int:
    """Spikes born in stripe ``i`` of one half pattern.

    For NEW these are the Pell numbers 1, 2, 5, 12, 29, ...
    """
    scheme = get_scheme(scheme)
    _check_level(i)
    if scheme is NEW:
        # (alpha**i - beta**i) / (alpha - beta) = b for alpha**i = a + b sqrt 2
        return _pell_pair(i)[1]
    if scheme is KM:
        return 2 ** (i - 1)
    return 3 ** (i - 1)


def closed_interface_count(scheme, k: int) -> int:
    """Interfaces crossing stripe ``k`` of the periodic cell (closed form)."""
    scheme = get_scheme(scheme)
    _check_level(k)
    if scheme is NEW:
        # alpha**(k+1) + beta**(k+1) = 2a
        return 2 * _pell_pair(k + 1)[0]
    if scheme is KM:
        return 2 * (2 ** (k + 1) - 1)
    return 2 * 3**k


def direct_interface_count(scheme, k: int) -> int:
    scheme = get_scheme(scheme)
    return 2 * (1 + 2 * sum(spike_count(scheme, i) for i in range(1, k + 1)))


def interface_count_float(scheme, k):
    """Real-valued I_k; accepts arrays and k beyond the integer range."""
    scheme = get_scheme(scheme)
    k = np.asarray(k, dtype=float)
    return sum(a * g**k for a, g in scheme.interface_terms)


# -- topology -------------------------------------------------------------


@dataclass
class HalfLevel:
    """Letters of one level from the centre letter outward.

    ``needle`` holds the id of the spike whose tip line a needle letter
    shares (-1 for facets).  ``spike_id`` is set for spikes born on this
    level (-1 otherwise).
    """

    kind: np.ndarray
    phase: np.ndarray
    parent: np.ndarray
    needle: np.ndarray
    spike_id: np.ndarray

    @property
    def n_letters(self) -> int:
        return len(self.kind)

    @property
    def n_interfaces(self) -> int:
        return len(self.kind) - 1


@dataclass
class PatternTopology:
    scheme: Scheme
    K: int
    levels: list
    # spike id -> id of the spike whose tip ordinate it must share (itself if free)
    needle_roots: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    # spike id -> (level of birth, half index)
    spike_birth: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def word(self, k: int) -> str:
        """Full (unreflected) word of level ``k``."""
        half = "".join(LETTERS[c] for c in self.levels[k].kind)
        full = half[:0:-1] + half
        return INTERFACE.join(full)

    def half_word(self, k: int) -> str:
        return INTERFACE.join(LETTERS[c] for c in self.levels[k].kind)

    @property
    def words(self) -> list[str]:
        return [self.word(k) for k in range(self.K + 1)]

    def parent_letter(self, k: int, i: int) -> int:
        if k < 1:
            raise ValueError("level 0 has no parents")
        return int(self.levels[k].parent[i])


def _expand(scheme: Scheme, prev: HalfLevel, next_spike: int):
    n = prev.n_letters
    table = [scheme.expansion(c) for c in (FACET, SPIKE, TRUNK)]
    lens = np.array([len(e) for e in table])
    counts = lens[prev.kind].copy()
    # the centre letter keeps only its middle child and the lower half
    centre_skip = (counts[0] - 1) // 2
    counts[0] -= centre_skip
    parent = np.repeat(np.arange(n), counts)
    starts = np.cumsum(counts) - counts
    pos = np.arange(len(parent)) - starts[parent]
    pos[: counts[0]] += centre_skip

    pad = np.full((3, 3), -1)
    for c, e in enumerate(table):
        pad[c, : len(e)] = e
    kind = pad[prev.kind[parent], pos]
    # children alternate phase starting from the parent's phase
    phase = prev.phase[parent] * np.where(pos % 2 == 0, 1, -1)

    pkind = prev.kind[parent]
    born = (kind == SPIKE) & (lens[pkind] == 3)
    spike_id = np.full(len(kind), -1, dtype=np.int64)
    nb = int(born.sum())
    spike_id[born] = np.arange(next_spike, next_spike + nb)

    needle = np.full(len(kind), -1, dtype=np.int64)
    carried = (kind != FACET) & ~born
    needle[carried] = prev.needle[parent[carried]]
    # a spike born inside a needle letter shares that needle's tip line
    inner = born & (pkind != FACET) & (prev.needle[parent] >= 0)
    roots = np.where(inner, prev.needle[parent], spike_id)
    needle[born] = roots[born]
    level = HalfLevel(kind.astype(np.int8), phase.astype(np.int8), parent, needle, spike_id)
    return level, roots[born], np.flatnonzero(born)


def build_topology(scheme, K: int) -> PatternTopology:
    """Rewrite ``"f"`` K times, recording genealogy and needle roots."""
    scheme = get_scheme(scheme)
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K}")
    one = np.zeros(1, dtype=np.int64)
    levels = [
        HalfLevel(
            np.zeros(1, dtype=np.int8),
            np.ones(1, dtype=np.int8),
            -one - 1,
            -one - 1,
            -one - 1,
        )
    ]
    roots, births = [], []
    n_spikes = 0
    for k in range(1, K + 1):
        lev, r, idx = _expand(scheme, levels[-1], n_spikes)
        n_spikes += len(idx)
        roots.append(r)
        births.append(np.column_stack([np.full(len(idx), k), idx]))
        levels.append(lev)
    return PatternTopology(
        scheme,
        int(K),
        levels,
        np.concatenate(roots).astype(np.int64),
        np.concatenate(births).astype(np.int64),
    )


def build_periodic_cell(top: PatternTopology) -> list[str]:
    """Words of the y-periodic cell, one per stripe k = 0..K.

    The cell is ``mirror(upper half) | word | mirror(lower half)`` read from
    y = 0 to y = 1; its two ends belong to the same letter across the
    periodic seam.  The two added separators are the straight interfaces at
    y = 1/4 and y = 3/4.
    """
    cells = []
    for k in range(top.K + 1):
        half = top.half_word(k)
        w = top.word(k)
        cells.append(half + INTERFACE + w + INTERFACE + mirror(half))
    return cells


def count_cell_interfaces(cell: str) -> int:
    """Interfaces of a periodic cell word; the seam joins the end letters."""
    return cell.count(INTERFACE)


def count_spikes_born(top: PatternTopology, k: int) -> int:
    """Spikes born on level ``k`` in the full (unreflected) word."""
    born = top.levels[k].spike_id >= 0
    # the centre spike straddles the midline and is counted once
    return 2 * int(born[1:].sum()) + int(born[0])
