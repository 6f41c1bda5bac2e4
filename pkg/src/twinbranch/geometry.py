"""Piecewise-linear interface geometry on the quarter cell [x_K, l] x [1/4, 1/2].

Vertices live on the level lines x_k = theta**k * l.  Line ``k`` carries
the lower end of every interface of level ``k`` and the tips of spikes born
on level ``k + 1``.  Ordinates are kept in unit-cell coordinates; the 1/N
rescaling only enters the energy.

Each vertex either owns a free parameter, shares the parameter of an older
tip (nested needles keep their tips on one horizontal line) or is pinned to
the midline y = 1/2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .automaton import PatternTopology, build_topology, get_scheme

Y_MID = 0.5
Y_LOW = 0.25
DELTA_GEOM = 1e-9

IFACE, TIP = 0, 1


@dataclass
class GeometrySpec:
    scheme: object
    K: int
    theta: float
    l: float
    L: float = 0.5
    N: float = 2.0
    epsilon: float = 0.013

    def __post_init__(self):
        self.scheme = get_scheme(self.scheme)
        lo, hi = self.scheme.theta_admissible
        if not lo < self.theta < hi:
            raise ValueError(
                f"theta={self.theta} outside the admissible interval ({lo:.6g}, {hi:.6g}) for {self.scheme}"
            )
        if not 0.0 < self.l < self.L:
            raise ValueError(f"need 0 < l < L, got l={self.l}, L={self.L}")
        if self.N <= 0 or self.epsilon <= 0:
            raise ValueError("N and epsilon must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    def x(self, k):
        return self.theta**k * self.l

    def width(self, k):
        """Width of stripe k, x_{k-1} - x_k."""
        return self.theta ** (k - 1) * (1.0 - self.theta) * self.l

    def replace(self, **kw) -> "GeometrySpec":
        d = dict(
            scheme=self.scheme, K=self.K, theta=self.theta, l=self.l,
            L=self.L, N=self.N, epsilon=self.epsilon,
        )
        d.update(kw)
        return GeometrySpec(**d)

    def as_dict(self) -> dict:
        return {
            "scheme": self.scheme.name, "K": self.K, "theta": self.theta, "l": self.l,
            "L": self.L, "N": self.N, "epsilon": self.epsilon,
        }


@dataclass
class DofVector:
    """Ordinates per level line, top to bottom, including tied vertices."""

    lines: list

    def copy(self) -> "DofVector":
        return DofVector([a.copy() for a in self.lines])

    def flat(self) -> np.ndarray:
        return np.concatenate(self.lines)

    @property
    def K(self) -> int:
        return len(self.lines) - 1


@dataclass
class DegeneracyReport:
    line: int
    index: int
    gap: float
    message: str

    def __str__(self) -> str:
        return f"degenerate geometry on line {self.line}, vertex {self.index}: {self.message} (gap {self.gap:.3e})"


class DegenerateGeometryError(ValueError):
    def __init__(self, report: DegeneracyReport):
        super().__init__(str(report))
        self.report = report


@dataclass
class Stripe:
    """Index data of stripe k: interfaces from the midline outward."""

    k: int
    start: np.ndarray  # global vertex id on line k-1
    end: np.ndarray  # global vertex id on line k
    phase: np.ndarray  # u_y sign per letter (len = interfaces + 1)
    kind: np.ndarray


@dataclass
class Layout:
    top: PatternTopology
    line_start: np.ndarray
    src: np.ndarray  # vertex -> parameter index, -1 for the midline
    vkind: np.ndarray
    owner: np.ndarray  # parameter -> owning vertex
    stripes: list
    tip_vertex: np.ndarray  # spike id -> vertex of its tip
    tip_letter: list = field(default_factory=list)  # per line: letter index of each vertex

    @property
    def K(self) -> int:
        return self.top.K

    @property
    def scheme(self):
        return self.top.scheme

    @property
    def n_params(self) -> int:
        return len(self.owner)

    @property
    def n_vertices(self) -> int:
        return len(self.src)

    def line(self, k: int) -> slice:
        return slice(int(self.line_start[k]), int(self.line_start[k + 1]))

    def vertex_line(self) -> np.ndarray:
        return np.repeat(np.arange(self.K + 1), np.diff(self.line_start))

    def param_line(self) -> np.ndarray:
        return self.vertex_line()[self.owner]

    def values(self, z: np.ndarray) -> np.ndarray:
        """Global vertex ordinates from the parameter vector."""
        z = np.asarray(z, dtype=float)
        return np.where(self.src >= 0, z[np.maximum(self.src, 0)], Y_MID)

    def unpack(self, z: np.ndarray) -> DofVector:
        v = self.values(z)
        return DofVector([v[self.line(k)] for k in range(self.K + 1)])

    def pack(self, Y: DofVector) -> np.ndarray:
        return np.concatenate(Y.lines)[self.owner]

    def to_params(self, grad_v: np.ndarray) -> np.ndarray:
        """Chain a gradient over vertices down to the parameters."""
        m = self.src >= 0
        return np.bincount(self.src[m], weights=grad_v[m], minlength=self.n_params)

    @property
    def constraints(self):
        """Ordering constraints as (upper, lower) vertex ids; -1 is y=1/2, -2 is y=1/4."""
        if not hasattr(self, "_constraints"):
            ups, lows = [], []
            for k in range(self.K + 1):
                ids = np.arange(self.line_start[k], self.line_start[k + 1])
                up = np.concatenate([[-1], ids])
                low = np.concatenate([ids, [-2]])
                keep = np.ones(len(up), dtype=bool)
                if len(ids) and self.src[ids[0]] < 0:
                    keep[0] = False  # midline tip touches the boundary by construction
                ups.append(up[keep])
                lows.append(low[keep])
            self._constraints = (np.concatenate(ups), np.concatenate(lows))
        return self._constraints

    def gaps(self, v: np.ndarray) -> np.ndarray:
        up, low = self.constraints
        ext = np.concatenate([v, [Y_LOW, Y_MID]])  # index -2 -> Y_LOW, -1 -> Y_MID
        return ext[up] - ext[low]


def _build_layout(top: PatternTopology) -> Layout:
    K = top.K
    levels = top.levels
    n_spikes = len(top.needle_roots)
    tip_vertex = np.full(n_spikes, -1, dtype=np.int64)
    src_parts, kind_parts, letter_parts = [], [], []
    owner_parts = []
    line_start = [0]
    n_par = 0
    iface_end = []  # per line: global ids of interface ends
    tip_of_letter = []  # per line: letter -> tip vertex id (or -1)
    stripes = [None]
    for k in range(K + 1):
        lev = levels[k]
        n = lev.n_letters
        has_tip = np.zeros(n, dtype=bool)
        child_spike = np.full(n, -1, dtype=np.int64)
        if k < K:
            nxt = levels[k + 1]
            born = np.flatnonzero(nxt.spike_id >= 0)
            has_tip[nxt.parent[born]] = True
            child_spike[nxt.parent[born]] = nxt.spike_id[born]
        has_iface = np.arange(n) < n - 1
        counts = has_tip.astype(np.int64) + has_iface
        offs = np.cumsum(counts) - counts + line_start[-1]
        total = int(counts.sum())
        src = np.empty(total, dtype=np.int64)
        vkind = np.empty(total, dtype=np.int8)
        vletter = np.repeat(np.arange(n), counts)

        tip_ids = offs[has_tip]
        iface_ids = offs[has_iface] + has_tip[has_iface]
        vkind[iface_ids - line_start[-1]] = IFACE
        vkind[tip_ids - line_start[-1]] = TIP

        # interface ends are always free
        n_if = len(iface_ids)
        src[iface_ids - line_start[-1]] = np.arange(n_par, n_par + n_if)
        owner_parts.append(iface_ids)
        n_par += n_if

        # tips: midline, shared with an older tip, or free
        tip_letters = np.flatnonzero(has_tip)
        spikes = child_spike[tip_letters]
        roots = top.needle_roots[spikes] if len(spikes) else spikes
        tsrc = np.empty(len(spikes), dtype=np.int64)
        free = (roots == spikes) & (tip_letters != 0)
        centre = tip_letters == 0
        shared = ~free & ~centre
        tsrc[centre] = -1
        tsrc[free] = np.arange(n_par, n_par + int(free.sum()))
        owner_parts.append(tip_ids[free])
        n_par += int(free.sum())
        if shared.any():
            tsrc[shared] = np.concatenate(src_parts)[tip_vertex[roots[shared]]] if src_parts else -1
        src[tip_ids - line_start[-1]] = tsrc
        tip_vertex[spikes] = tip_ids

        src_parts.append(src)
        kind_parts.append(vkind)
        letter_parts.append(vletter)
        line_start.append(line_start[-1] + total)
        iface_end.append(iface_ids)
        tol = np.full(n, -1, dtype=np.int64)
        tol[tip_letters] = tip_ids
        tip_of_letter.append(tol)

        if k >= 1:
            par = lev.parent
            same = par[:-1] == par[1:]
            prev_ifaces = iface_end[k - 1]
            start = np.where(
                same,
                tip_of_letter[k - 1][par[:-1]],
                prev_ifaces[np.minimum(par[:-1], len(prev_ifaces) - 1)] if len(prev_ifaces) else -1,
            )
            stripes.append(Stripe(k, start.astype(np.int64), iface_ids, lev.phase.astype(float), lev.kind))

    src = np.concatenate(src_parts)
    owner = np.concatenate(owner_parts)
    order = np.argsort(src[owner], kind="stable")
    return Layout(
        top,
        np.array(line_start),
        src,
        np.concatenate(kind_parts),
        owner[order],
        stripes,
        tip_vertex,
        letter_parts,
    )


@lru_cache(maxsize=64)
def _layout_cached(scheme_name: str, K: int) -> Layout:
    return _build_layout(build_topology(scheme_name, K))


def layout_for(top_or_scheme, K: int | None = None) -> Layout:
    if isinstance(top_or_scheme, PatternTopology):
        return _layout_cached(top_or_scheme.scheme.name, top_or_scheme.K)
    return _layout_cached(get_scheme(top_or_scheme).name, int(K))


# -- construction ---------------------------------------------------------


def initial_geometry(top: PatternTopology, spec: GeometrySpec | None = None) -> DofVector:
    """Equispaced ordinates between the tied vertices of every line."""
    lay = layout_for(top)
    v = np.full(lay.n_vertices, np.nan)
    for k in range(lay.K + 1):
        sl = lay.line(k)
        ids = np.arange(sl.start, sl.stop)
        s = lay.src[ids]
        tied = np.zeros(len(ids), dtype=bool)
        vals = np.empty(len(ids))
        for j, vid in enumerate(ids):
            if s[j] < 0:
                tied[j], vals[j] = True, Y_MID
            elif lay.owner[s[j]] != vid:
                tied[j], vals[j] = True, v[lay.owner[s[j]]]
        anchors = [(-1, Y_MID)] + [(j, vals[j]) for j in np.flatnonzero(tied)] + [(len(ids), Y_LOW)]
        for (ja, ya), (jb, yb) in zip(anchors[:-1], anchors[1:]):
            if ja >= 0 and jb < len(ids) and not ya > yb:
                raise AssertionError(f"tied tips out of order on line {k}")
            n = jb - ja - 1
            if n > 0:
                vals[ja + 1 : jb] = ya - (ya - yb) * np.arange(1, n + 1) / (n + 1)
        v[ids] = vals
    Y = DofVector([v[lay.line(k)] for k in range(lay.K + 1)])
    rep = validate(top, spec, Y)
    if rep is not None:
        raise AssertionError(f"initial geometry infeasible: {rep}")
    return Y


def validate(top: PatternTopology, spec, Y: DofVector, delta: float = DELTA_GEOM):
    """Return None when Y is feasible with margin ``delta``, else a DegeneracyReport."""
    lay = layout_for(top)
    if len(Y.lines) != lay.K + 1:
        return DegeneracyReport(-1, -1, np.nan, f"expected {lay.K + 1} lines, got {len(Y.lines)}")
    for k, a in enumerate(Y.lines):
        if len(a) != lay.line_start[k + 1] - lay.line_start[k]:
            return DegeneracyReport(k, -1, np.nan, "wrong number of ordinates")
    v = Y.flat()
    if not np.all(np.isfinite(v)):
        bad = int(np.flatnonzero(~np.isfinite(v))[0])
        return _report_at(lay, bad, np.nan, "non-finite ordinate")
    tied_val = lay.values(v[lay.owner])
    off = np.abs(tied_val - v) > 1e-12
    if off.any():
        bad = int(np.flatnonzero(off)[0])
        return _report_at(lay, bad, float(tied_val[bad] - v[bad]), "tied tip off its tip line")
    g = lay.gaps(v)
    low = g < delta
    if low.any():
        c = int(np.flatnonzero(low)[0])
        up, lo = lay.constraints
        vid = lo[c] if lo[c] >= 0 else up[c]
        return _report_at(lay, int(vid), float(g[c]), "ordering violated")
    return None


def _report_at(lay: Layout, vid: int, gap: float, msg: str) -> DegeneracyReport:
    k = int(np.searchsorted(lay.line_start, vid, side="right") - 1)
    return DegeneracyReport(k, int(vid - lay.line_start[k]), gap, msg)


# -- regions ----------------------------------------------------------------


@dataclass
class Region:
    """Constant-slope quadrilateral of stripe k, index i counted from the midline.

    ``upper_edge`` holds the ordinates (at x_{k-1}, at x_k) of the interface
    between this region and region i + 1; it is None for the outermost one.
    """

    k: int
    i: int
    uy_sign: int
    ux: float
    area: float
    upper_edge: tuple | None
    top: tuple
    bottom: tuple


def stripe_arrays(lay: Layout, v: np.ndarray, k: int):
    """Start/end ordinates of stripe k's interfaces and its region boundaries."""
    st = lay.stripes[k]
    ys = v[st.start]
    ye = v[st.end]
    top_s = np.concatenate([[Y_MID], ys])
    top_e = np.concatenate([[Y_MID], ye])
    bot_s = np.concatenate([ys, [Y_LOW]])
    bot_e = np.concatenate([ye, [Y_LOW]])
    return ys, ye, top_s, top_e, bot_s, bot_e


def regions(top: PatternTopology, spec: GeometrySpec, Y: DofVector) -> list:
    from .energy import ux_fill

    rep = validate(top, spec, Y)
    if rep is not None:
        raise DegenerateGeometryError(rep)
    lay = layout_for(top)
    v = Y.flat()
    out = []
    for k in range(1, lay.K + 1):
        st = lay.stripes[k]
        w = spec.width(k)
        ys, ye, ts, te, bs, be = stripe_arrays(lay, v, k)
        ux = ux_fill(st.phase, ys, ye, w)
        area = w * 0.5 * ((ts - bs) + (te - be))
        stripe = []
        for i in range(len(st.phase)):
            edge = (float(ys[i]), float(ye[i])) if i < len(ys) else None
            stripe.append(
                Region(k, i, int(st.phase[i]), float(ux[i]), float(area[i]), edge,
                       (float(ts[i]), float(te[i])), (float(bs[i]), float(be[i])))
            )
        out.append(stripe)
    return out


# -- continuation -----------------------------------------------------------


def _spike_shapes(lay: Layout, v: np.ndarray, k: int):
    """Relative shape of every spike born at level k, keyed by parent letter.

    Returns arrays over the letters of level k-1: the tip position as a
    fraction of the parent letter on line k-1, and the opening of the upper
    and lower spike sides on line k as fractions of the room between the
    tip and the parent letter's bounds.  NaN where no spike was born.
    """
    lev = lay.top.levels[k]
    n_par = lay.top.levels[k - 1].n_letters
    frac, up, low = (np.full(n_par, np.nan) for _ in range(3))
    st = lay.stripes[k]
    ext = np.concatenate([v, [Y_LOW, Y_MID]])
    end = np.concatenate([st.end, [-2]])  # interface past the last letter lies on y = 1/4
    start_k1 = lay.line_start[k - 1]
    stop_k1 = lay.line_start[k]
    for c in np.flatnonzero(lev.spike_id >= 0):
        P = lev.parent[c]
        tip_vid = lay.tip_vertex[lev.spike_id[c]]
        tip = v[tip_vid]
        above = v[tip_vid - 1] if tip_vid - 1 >= start_k1 else Y_MID
        below = v[tip_vid + 1] if tip_vid + 1 < stop_k1 else Y_LOW
        s = lay.src[tip_vid]
        if s >= 0 and lay.owner[s] == tip_vid and above - below > 0:
            frac[P] = (tip - below) / (above - below)
        hi = ext[end[c - 2]] if c >= 2 else Y_MID
        lo = ext[end[c + 1]] if c + 1 < len(end) else Y_LOW
        if c >= 1 and hi - tip > 0:
            up[P] = (v[st.end[c - 1]] - tip) / (hi - tip)
        if c < len(st.end) and tip - lo > 0:
            low[P] = (tip - v[st.end[c]]) / (tip - lo)
    return frac, up, low


def _inherit(values, keys, fallback, lo=0.02, hi=0.98):
    """Per-key observed value, else the median observation, else fallback.

    Results are clipped to [lo, hi]: leaning spikes of an arbitrary geometry
    give fractions outside the unit interval.
    """
    ok = np.isfinite(values)
    default = float(np.median(values[ok])) if ok.any() else fallback
    out = values[keys] if len(values) else np.full(len(keys), np.nan)
    return np.clip(np.where(np.isfinite(out), out, default), lo, hi)


def _fit_between_anchors(v, ids, is_if, free_tip, pad=0.1):
    """Squeeze interface ends into the room left by tips fixed on their line.

    Tied tips keep the ordinate of their needle, which an arbitrary
    level-K geometry need not respect.  Runs of interface ends that cross
    such an anchor are mapped affinely into the open interval between the
    anchors, keeping their order.
    """
    anchor = ~is_if & ~free_tip
    bounds = [-1] + list(np.flatnonzero(anchor)) + [len(ids)]
    for a, b in zip(bounds[:-1], bounds[1:]):
        run = [j for j in range(a + 1, b) if is_if[j]]
        if not run:
            continue
        hi = v[ids[a]] if a >= 0 else Y_MID
        lo = v[ids[b]] if b < len(ids) else Y_LOW
        e = v[ids[run]]
        margin = 10 * DELTA_GEOM
        if e[0] < hi - margin and e[-1] > lo + margin:
            continue
        if not hi > lo:
            continue  # anchors out of order; validation reports it
        top_, bot = max(e[0], hi), min(e[-1], lo)
        t = (e - bot) / (top_ - bot) if top_ > bot else np.linspace(1, 0, len(run) + 2)[1:-1]
        room = pad / (len(run) + 1)
        v[ids[run]] = lo + (hi - lo) * (room + (1 - 2 * room) * t)


def extend_level(top_next: PatternTopology, spec: GeometrySpec, Y: DofVector,
                 spread: float = 1.0 / 3.0) -> DofVector:
    """Warm start for level K+1 from a feasible level-K geometry.

    Lines 0..K are copied.  Each new spike copies the shape of the spike
    its grandparent letter grew one level earlier (tip position within the
    letter, opening of both sides), falling back to the median observed
    shape and finally to a centred tip opening by ``spread``.  Continuing
    interfaces keep their last displacement scaled by theta.
    """
    K = Y.K
    if top_next.K != K + 1:
        raise ValueError("top_next must have exactly one more level than Y")
    old = layout_for(top_next.scheme, K)
    new = layout_for(top_next)
    v_old = Y.flat()
    theta = spec.theta
    v = np.full(new.n_vertices, np.nan)
    for k in range(K):
        v[new.line(k)] = Y.lines[k]

    if K >= 1:
        frac_o, up_o, low_o = _spike_shapes(old, v_old, K)
    else:
        frac_o = up_o = low_o = np.zeros(0)
    lev_K = top_next.levels[K]
    lev_n = top_next.levels[K + 1]
    # grandparent (level K-1 letter) of every level-K letter
    gp = lev_K.parent if K >= 1 else np.zeros(lev_K.n_letters, dtype=np.int64)

    # line K: interface ends copied, tips inserted
    ids = np.arange(new.line_start[K], new.line_start[K + 1])
    is_if = new.vkind[ids] == IFACE
    v[ids[is_if]] = Y.lines[K]
    letter = new.tip_letter[K]
    tip_frac = _inherit(frac_o, gp[letter[ids - ids[0]]], 0.5) if len(ids) else np.zeros(0)
    free_tip = np.zeros(len(ids), dtype=bool)
    for j in np.flatnonzero(~is_if):
        vid = ids[j]
        s = new.src[vid]
        if s < 0:
            v[vid] = Y_MID
        elif new.owner[s] != vid:
            v[vid] = v[new.owner[s]]
        else:
            free_tip[j] = True
    _fit_between_anchors(v, ids, is_if, free_tip)
    for j in np.flatnonzero(free_tip):
        vid = ids[j]
        above = v[ids[j - 1]] if j > 0 else Y_MID
        below = v[ids[j + 1]] if j + 1 < len(ids) else Y_LOW
        v[vid] = below + tip_frac[j] * (above - below)

    st_new = new.stripes[K + 1]
    st_old = old.stripes[K] if K >= 1 else None
    par = lev_n.parent
    same = par[:-1] == par[1:]
    cont = ~same
    # persisting interface j of level K+1 continues interface par[j] of level K
    disp_old = v_old[st_old.end] - v_old[st_old.start] if st_old is not None else np.zeros(0)
    open_up = _inherit(up_o, gp[par], spread)
    open_low = _inherit(low_o, gp[par], spread)

    def place(scale):
        ye = np.empty(len(st_new.start))
        ye[cont] = v[st_new.start[cont]] + scale * disp_old[par[:-1][cont]]
        # letter bounds at x_{K+1} from persisting interfaces of the parent
        n_par = int(par.max()) + 1 if len(par) else 0
        hi_p = np.full(n_par, Y_MID)
        lo_p = np.full(n_par, Y_LOW)
        cj = np.flatnonzero(cont)
        lo_p[par[cj]] = ye[cj]
        hi_p[par[cj] + 1] = ye[cj]
        bounds_hi, bounds_lo = hi_p[par], lo_p[par]
        for j in np.flatnonzero(same):
            tip = v[st_new.start[j]]
            # interface j separates letters j and j+1 of the same parent
            if st_new.kind[j] == 1 and j > 0 and par[j - 1] == par[j]:
                ye[j] = tip - open_low[j] * (tip - bounds_lo[j])  # lower side of the spike
            elif st_new.kind[j + 1] == 1:
                ye[j] = tip + open_up[j] * (bounds_hi[j] - tip)  # upper side
            else:
                ye[j] = tip - open_low[j] * (tip - bounds_lo[j])
        return ye

    Yn = None
    for scale in (theta, 0.0):
        v[st_new.end] = place(scale)
        Yn = DofVector([v[new.line(k)].copy() for k in range(K + 2)])
        if validate(top_next, spec, Yn) is None:
            return Yn
    raise DegenerateGeometryError(validate(top_next, spec, Yn))


# -- trace ------------------------------------------------------------------


@dataclass
class Profile:
    """Piecewise-linear u(x, .) on [0, 1] given by breakpoints."""

    y: np.ndarray
    u: np.ndarray

    def __call__(self, y):
        return np.interp(y, self.y, self.u)

    def norm2(self) -> float:
        """Exact squared L2 norm on [0, 1]."""
        h = np.diff(self.y)
        a, b = self.u[:-1], self.u[1:]
        return float(np.sum(h * (a * a + a * b + b * b) / 3.0))


def quarter_profile(phase: np.ndarray, tops: np.ndarray, bots: np.ndarray):
    """Breakpoints of u on [1/4, 1/2] (descending y) with u(1/2) = 0."""
    h = tops - bots
    u = np.concatenate([[0.0], -np.cumsum(phase * h)])
    y = np.concatenate([[Y_MID], bots])
    return y, u


def trace_profile(top: PatternTopology, spec: GeometrySpec, Y: DofVector, x: float) -> Profile:
    lay = layout_for(top)
    xK = spec.x(lay.K)
    if not xK <= x <= spec.L:
        raise ValueError(f"x={x} outside [{xK}, {spec.L}]")
    v = Y.flat()
    if x >= spec.l:
        phase = lay.top.levels[0].phase.astype(float)
        yq, uq = quarter_profile(phase, np.array([Y_MID]), np.array([Y_LOW]))
    else:
        k = 1
        while spec.x(k) > x:
            k += 1
        st = lay.stripes[k]
        t = (spec.x(k - 1) - x) / spec.width(k)  # 0 at x_{k-1}, 1 at x_k
        _, _, ts, te, bs, be = stripe_arrays(lay, v, k)
        tops = (1 - t) * ts + t * te
        bots = (1 - t) * bs + t * be
        yq, uq = quarter_profile(st.phase, tops, bots)
    return _periodize(yq, uq, spec.N)


def _periodize(yq, uq, N) -> Profile:
    # yq descends from 1/2 to 1/4; u is even about 1/4 and odd about 1/2
    y1, u1 = yq[::-1], uq[::-1]  # [1/4, 1/2]
    y0, u0 = (0.5 - yq)[:-1], uq[:-1]  # [0, 1/4)
    y_half = np.concatenate([y0, y1])
    u_half = np.concatenate([u0, u1])
    y_up = (1.0 - y_half[::-1])[1:]
    u_up = (-u_half[::-1])[1:]
    y_cell = np.concatenate([y_half, y_up])
    u_cell = np.concatenate([u_half, u_up])
    n = int(round(N))
    if abs(N - n) > 1e-12 or n < 1:
        # non-integer repetition counts: keep one cell scaled by 1/N
        return Profile(y_cell, u_cell / N)
    ys = np.concatenate([(y_cell[:-1] + i) / n for i in range(n)] + [[1.0]])
    us = np.concatenate([u_cell[:-1] / N] * n + [[u_cell[-1] / N]])
    return Profile(ys, us)


GEOMETRY_SCHEMA = "twinbranch.geometry/1"


def geometry_to_json(spec: GeometrySpec, Y: DofVector) -> str:
    d = {"schema": GEOMETRY_SCHEMA, "spec": spec.as_dict(), "lines": [a.tolist() for a in Y.lines]}
    return json.dumps(d, indent=1, sort_keys=True)


def geometry_from_json(text: str):
    """Inverse of geometry_to_json; returns (topology, spec, Y) after validation."""
    d = json.loads(text)
    if d.get("schema") != GEOMETRY_SCHEMA:
        raise ValueError(f"not a geometry file (schema {d.get('schema')!r})")
    spec = GeometrySpec(**d["spec"])
    top = build_topology(spec.scheme, spec.K)
    Y = DofVector([np.asarray(a, dtype=float) for a in d["lines"]])
    lay = layout_for(top)
    if [len(a) for a in Y.lines] != [lay.line(k).stop - lay.line(k).start for k in range(lay.K + 1)]:
        raise ValueError("ordinate lines do not match the topology")
    rep = validate(top, spec, Y)
    if rep is not None:
        raise DegenerateGeometryError(rep)
    return top, spec, Y
