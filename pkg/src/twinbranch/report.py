"""Derived quantities, scheme comparisons, scaling fits and pattern pictures."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .automaton import TRUNK, build_topology, get_scheme
from .geometry import (
    Y_LOW,
    Y_MID,
    DegenerateGeometryError,
    DofVector,
    GeometrySpec,
    layout_for,
    stripe_arrays,
    validate,
)
from .optimizer import OptimizationTrace, OptimizerConfig, continuation, _plain

# constant of the classical self-similar construction, kept as a reference row
REFERENCE_C = 6.86
REPORT_SCHEMA = "twinbranch.report/1"
SWEEP_SCHEMA = "twinbranch.sweep/1"
MIN_SWEEP_SPAN = 8.0  # three doublings of eps


def constant_C(minF: float, L: float, eps: float) -> float:
    """min F / (L**(1/3) eps**(2/3))."""
    if minF <= 0 or L <= 0 or eps <= 0:
        raise ValueError("minF, L and eps must be positive")
    return minF / (L ** (1.0 / 3.0) * eps ** (2.0 / 3.0))


def fit_exponent(x, y) -> float:
    """Least-squares slope of log y against log x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need at least two matching points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs positive data")
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


# -- scaling study ------------------------------------------------------------


class SweepError(RuntimeError):
    pass


@dataclass
class SweepPoint:
    epsilon: float
    K: int
    F: float
    N: float
    theta: float
    l: float
    converged: bool
    degenerate: bool


@dataclass
class SweepResult:
    scheme: str
    L: float
    points: list
    p_F: float
    p_N: float
    valid: bool = True
    note: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = list(SweepPoint.__dataclass_fields__)
        w.writerow(cols)
        for p in self.points:
            w.writerow([_cell(getattr(p, c)) for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        d = {"schema": SWEEP_SCHEMA, **asdict(self)}
        return json.dumps(_plain(d), indent=1, sort_keys=True)


def scaling_sweep(scheme, cfg: OptimizerConfig, eps_list, L: float = 0.5,
                  strict: bool = True, on_trace=None) -> SweepResult:
    """Fit min F ~ eps**p_F and N* ~ eps**p_N over a sweep of eps.

    With ``strict`` any point that did not converge (or degenerated) raises
    SweepError; otherwise the result is returned with ``valid=False``.
    """
    eps_list = sorted(float(e) for e in eps_list)
    if len(eps_list) < 4 or eps_list[-1] / eps_list[0] < MIN_SWEEP_SPAN - 1e-9:
        raise ValueError(f"need at least 4 eps values spanning a factor {MIN_SWEEP_SPAN:g}")
    scheme = get_scheme(scheme)
    pts = []
    for eps in eps_list:
        tr = continuation(scheme, cfg, eps, L)
        if on_trace is not None:
            on_trace(eps, tr)
        best = tr.best()
        pts.append(SweepPoint(eps, best.K, best.F_total, best.N, best.theta, best.l,
                              tr.converged, tr.degenerate))
    bad = [p.epsilon for p in pts if not p.converged or p.degenerate]
    note = f"unconverged or degenerate points at eps={bad}" if bad else ""
    if bad and strict:
        raise SweepError(note)
    e = [p.epsilon for p in pts]
    return SweepResult(scheme.name, L, pts, fit_exponent(e, [p.F for p in pts]),
                       fit_exponent(e, [p.N for p in pts]), not bad, note)


# -- needles ------------------------------------------------------------------


@dataclass
class Needle:
    """A spike together with the trunk letters it grows into."""

    spike: int
    level: int  # level on which the spike is born
    x: np.ndarray  # level-line abscissae from the tip line outward
    upper: np.ndarray  # unit-cell ordinates of the bounding interfaces
    lower: np.ndarray
    N: float

    @property
    def length(self) -> float:
        return float(self.x[0] - self.x[-1])

    @property
    def thickness(self) -> float:
        return float(np.max(self.upper - self.lower)) / self.N

    @property
    def aspect(self) -> float:
        return self.length / self.thickness

    @property
    def area(self) -> float:
        w = (self.upper - self.lower) / self.N
        return float(np.sum(0.5 * (w[:-1] + w[1:]) * -np.diff(self.x)))


def needles(top, spec: GeometrySpec, Y: DofVector) -> list:
    """All needles of the half pattern, largest area first."""
    rep = validate(top, spec, Y)
    if rep is not None:
        raise DegenerateGeometryError(rep)
    lay = layout_for(top)
    v = Y.flat()
    out = []
    for k in range(1, lay.K + 1):
        lev = top.levels[k]
        for c in np.flatnonzero(lev.spike_id >= 0):
            sid = int(lev.spike_id[c])
            tip = v[lay.tip_vertex[sid]]
            xs, ups, lows = [spec.x(k - 1)], [tip], [tip]
            m, idx = k, int(c)
            while True:
                _, ye, _, _, _, _ = stripe_arrays(lay, v, m)
                lo = ye[idx] if idx < len(ye) else Y_LOW
                up = ye[idx - 1] if idx >= 1 else 2 * Y_MID - lo
                xs.append(spec.x(m))
                ups.append(up)
                lows.append(lo)
                if m == lay.K:
                    break
                kids = np.flatnonzero(top.levels[m + 1].parent == idx)
                if len(kids) != 1 or top.levels[m + 1].kind[kids[0]] != TRUNK:
                    break
                m, idx = m + 1, int(kids[0])
            out.append(Needle(sid, k, np.array(xs), np.array(ups), np.array(lows), spec.N))
    out.sort(key=lambda n: (-n.area, n.spike))
    return out


def needle_aspect(top, spec: GeometrySpec, Y: DofVector, rank: int = 1) -> float:
    """Length over maximal thickness of the rank-th largest needle."""
    if rank < 1:
        raise ValueError("rank starts at 1")
    ns = needles(top, spec, Y)
    if rank > len(ns):
        raise ValueError(f"rank {rank} exceeds the {len(ns)} needles of the pattern")
    return ns[rank - 1].aspect


def diamond_aspect(x_extent: float, y_extent: float) -> float:
    if x_extent <= 0 or y_extent <= 0:
        raise ValueError("extents must be positive")
    return x_extent / y_extent


# -- SVG ------------------------------------------------------------------------

COLORS = {1: "#c8553d", -1: "#2d6a8f"}


@dataclass
class Window:
    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("empty window")

    @classmethod
    def parse(cls, text: str) -> "Window":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError("window needs x0,x1,y0,y1")
        return cls(*parts)


def _clip(poly, win: Window):
    """Sutherland-Hodgman clipping of a polygon to the window rectangle."""
    edges = [
        (lambda p: p[0] >= win.x0, lambda p, q: _cut_x(p, q, win.x0)),
        (lambda p: p[0] <= win.x1, lambda p, q: _cut_x(p, q, win.x1)),
        (lambda p: p[1] >= win.y0, lambda p, q: _cut_y(p, q, win.y0)),
        (lambda p: p[1] <= win.y1, lambda p, q: _cut_y(p, q, win.y1)),
    ]
    pts = list(poly)
    for inside, cut in edges:
        if not pts:
            break
        src, pts = pts, []
        prev = src[-1]
        for cur in src:
            if inside(cur):
                if not inside(prev):
                    pts.append(cut(prev, cur))
                pts.append(cur)
            elif inside(prev):
                pts.append(cut(prev, cur))
            prev = cur
    return pts


def _cut_x(p, q, x):
    t = (x - p[0]) / (q[0] - p[0])
    return (x, p[1] + t * (q[1] - p[1]))


def _cut_y(p, q, y):
    t = (y - p[1]) / (q[1] - p[1])
    return (p[0] + t * (q[0] - p[0]), y)


def _poly_area(pts) -> float:
    if len(pts) < 3:
        return 0.0
    a = np.asarray(pts)
    return 0.5 * abs(float(np.dot(a[:, 0], np.roll(a[:, 1], -1)) - np.dot(a[:, 1], np.roll(a[:, 0], -1))))


def cell_polygons(top, spec: GeometrySpec, Y: DofVector):
    """Regions of the reflected unit cell on [x_K, L] x [0, 1] as (sign, points).

    Mirroring about y = 1/2 keeps the sign of u_y, mirroring about y = 1/4
    flips it.
    """
    rep = validate(top, spec, Y)
    if rep is not None:
        raise DegenerateGeometryError(rep)
    lay = layout_for(top)
    v = Y.flat()
    maps = [
        (lambda y: y, 1),
        (lambda y: 1.0 - y, 1),
        (lambda y: 0.5 - y, -1),
        (lambda y: y + 0.5, -1),
    ]
    out = []
    s0 = int(top.levels[0].phase[0])
    # unbranched part between l and L
    out.append((s0, [(spec.l, 0.25), (spec.L, 0.25), (spec.L, 0.75), (spec.l, 0.75)]))
    out.append((-s0, [(spec.l, 0.0), (spec.L, 0.0), (spec.L, 0.25), (spec.l, 0.25)]))
    out.append((-s0, [(spec.l, 0.75), (spec.L, 0.75), (spec.L, 1.0), (spec.l, 1.0)]))
    for k in range(1, lay.K + 1):
        st = lay.stripes[k]
        xa, xb = spec.x(k - 1), spec.x(k)
        _, _, ts, te, bs, be = stripe_arrays(lay, v, k)
        for i in range(len(st.phase)):
            quad = [(xa, ts[i]), (xb, te[i]), (xb, be[i]), (xa, bs[i])]
            for f, sgn in maps:
                out.append((int(st.phase[i]) * sgn, [(x, float(f(y))) for x, y in quad]))
    return out


def cell_interfaces(top, spec: GeometrySpec, Y: DofVector):
    """Interface segments of the reflected cell, including the straight ones."""
    lay = layout_for(top)
    v = Y.flat()
    segs = []
    for y in (0.25, 0.75):
        segs.append(((spec.x(lay.K), y), (spec.L, y)))
    for k in range(1, lay.K + 1):
        st = lay.stripes[k]
        xa, xb = spec.x(k - 1), spec.x(k)
        for ys, ye in zip(v[st.start], v[st.end]):
            for f in (lambda y: y, lambda y: 1.0 - y, lambda y: 0.5 - y, lambda y: y + 0.5):
                segs.append(((xa, float(f(ys))), (xb, float(f(ye)))))
    return segs


def _num(a: float) -> str:
    s = f"{a:.3f}"
    return s.rstrip("0").rstrip(".") if "." in s else s


def render_svg(top, spec: GeometrySpec, Y: DofVector, window: Window | None = None,
               width_px: int = 800, level_lines: bool = True) -> str:
    """SVG picture of the reflected cell, regions colored by the sign of u_y.

    The window is given in (x, unit-cell y) coordinates; the picture keeps
    the physical aspect ratio, y being shrunk by 1/N.
    """
    xK = spec.x(layout_for(top).K)
    win = window or Window(xK, spec.L, 0.0, 1.0)
    sx = width_px / (win.x1 - win.x0)
    sy = sx / spec.N
    height_px = max(1, int(round((win.y1 - win.y0) * sy)))

    def px(p):
        # x grows to the right, y is drawn upward
        return _num((p[0] - win.x0) * sx), _num((win.y1 - p[1]) * sy)

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width_px}" height="{height_px}" '
        f'viewBox="0 0 {width_px} {height_px}">',
        f"<title>{spec.scheme.name} K={spec.K} theta={spec.theta:.6g} l={spec.l:.6g} N={spec.N:.6g}</title>",
        '<g id="regions" stroke="none">',
    ]
    n_poly = 0
    for sign, poly in cell_polygons(top, spec, Y):
        pts = _clip(poly, win)
        if _poly_area(pts) <= 0.0:
            continue
        n_poly += 1
        coords = " ".join(",".join(px(p)) for p in pts)
        lines.append(f'<polygon class="s{"p" if sign > 0 else "m"}" fill="{COLORS[sign]}" points="{coords}"/>')
    lines.append("</g>")
    lines.append('<g id="interfaces" stroke="#111111" stroke-width="0.6" fill="none">')
    for a, b in cell_interfaces(top, spec, Y):
        pts = _clip_segment(a, b, win)
        if pts is None:
            continue
        (x1, y1), (x2, y2) = px(pts[0]), px(pts[1])
        lines.append(f'<polyline points="{x1},{y1} {x2},{y2}"/>')
    lines.append("</g>")
    if level_lines:
        lines.append('<g id="levels" stroke="#888888" stroke-width="0.4" stroke-dasharray="3,3">')
        for k in range(spec.K + 1):
            x = spec.x(k)
            if win.x0 <= x <= win.x1:
                (x1, y1), (x2, y2) = px((x, win.y0)), px((x, win.y1))
                lines.append(f'<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}"/>')
        lines.append("</g>")
    lines.append(f"<!-- polygons: {n_poly} -->")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _clip_segment(a, b, win: Window):
    """Liang-Barsky clipping; None when the segment misses the window."""
    (x0, y0), (x1, y1) = a, b
    dx, dy = x1 - x0, y1 - y0
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, x0 - win.x0), (dx, win.x1 - x0), (-dy, y0 - win.y0), (dy, win.y1 - y0)):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return (x0 + t0 * dx, y0 + t0 * dy), (x0 + t1 * dx, y0 + t1 * dy)


def count_polygons(svg: str) -> int:
    return svg.count("<polygon ")


# -- comparison -----------------------------------------------------------------


@dataclass
class SchemeSummary:
    scheme: str
    best_K: int | None = None
    F: float | None = None
    F_elast: float | None = None
    F_surf: float | None = None
    F_bdry: float | None = None
    theta: float | None = None
    l: float | None = None
    N: float | None = None
    C: float | None = None
    aspect_1: float | None = None
    aspect_2: float | None = None
    degenerate: bool = False
    degeneracy_K: int | None = None
    converged: bool = True
    error: str | None = None


SUMMARY_COLUMNS = list(SchemeSummary.__dataclass_fields__)


@dataclass
class ComparisonReport:
    epsilon: float
    L: float
    mode_N: str
    config: dict
    rows: list = field(default_factory=list)
    reference_C: float = REFERENCE_C

    def row(self, scheme: str) -> SchemeSummary:
        for r in self.rows:
            if r.scheme == scheme:
                return r
        raise KeyError(scheme)

    def gaps(self) -> dict:
        """Relative energy gap (F_a - F_b) / F_b and Delta F for every ordered pair."""
        ok = [r for r in self.rows if r.F is not None]
        out = {}
        for a in ok:
            for b in ok:
                if a is not b:
                    out[f"{a.scheme}-{b.scheme}"] = {"rel": (a.F - b.F) / b.F, "dF": a.F - b.F}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in self.rows:
            w.writerow([_cell(getattr(r, c)) for c in SUMMARY_COLUMNS])
        ref = {c: "" for c in SUMMARY_COLUMNS}
        ref["scheme"] = "reference"
        ref["C"] = _cell(self.reference_C)
        w.writerow([ref[c] for c in SUMMARY_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        d = {
            "schema": REPORT_SCHEMA,
            "epsilon": self.epsilon,
            "L": self.L,
            "mode_N": self.mode_N,
            "config": self.config,
            "rows": [asdict(r) for r in self.rows],
            "reference": {"C": self.reference_C},
            "gaps": self.gaps(),
        }
        return json.dumps(_plain(d), indent=1, sort_keys=True)


def summarize(trace: OptimizationTrace) -> SchemeSummary:
    s = SchemeSummary(trace.scheme, converged=trace.converged, degenerate=trace.degenerate)
    if trace.degeneracy is not None:
        s.degeneracy_K = int(trace.degeneracy["K"])
    ok = [r for r in trace.records if not r.degenerate]
    if not ok:
        s.error = "no level finished without degeneracy"
        return s
    best = min(ok, key=lambda r: r.F_total)
    s.best_K, s.F = best.K, best.F_total
    s.F_elast, s.F_surf, s.F_bdry = best.F_elast, best.F_surf, best.F_bdry
    s.theta, s.l, s.N = best.theta, best.l, best.N
    s.C = constant_C(best.F_total, trace.L, trace.epsilon)
    if trace.final_Y is not None and trace.final_spec is not None:
        spec = GeometrySpec(**{k: v for k, v in trace.final_spec.items() if k != "scheme"},
                            scheme=trace.scheme)
        top = build_topology(trace.scheme, spec.K)
        Y = DofVector([np.asarray(a) for a in trace.final_Y])
        ns = needles(top, spec, Y)
        if ns:
            s.aspect_1 = ns[0].aspect
        if len(ns) > 1:
            s.aspect_2 = ns[1].aspect
    return s


def compare(schemes, cfg: OptimizerConfig, eps: float, L: float = 0.5, on_trace=None) -> ComparisonReport:
    rep = ComparisonReport(eps, L, cfg.mode_N, _plain(asdict(cfg)))
    for name in schemes:
        try:
            tr = continuation(name, cfg, eps, L)
        except Exception as exc:  # keep the other schemes
            rep.rows.append(SchemeSummary(get_scheme(name).name, error=f"{type(exc).__name__}: {exc}"))
            continue
        if on_trace is not None:
            on_trace(tr)
        rep.rows.append(summarize(tr))
    return rep


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -- figures --------------------------------------------------------------------


def plot_traces(traces, path, what: str = "C") -> None:
    """Energy (``what="F"``) or constant C against K, one curve per trace, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "twinbranch", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5.0, 3.6))
        for tr in traces:
            K = [r.K for r in tr.records if not r.degenerate]
            F = np.array([r.F_total for r in tr.records if not r.degenerate])
            if not K:
                continue
            y = F / (tr.L ** (1 / 3) * tr.epsilon ** (2 / 3)) if what == "C" else F
            label = f"{tr.scheme} ({tr.config.get('N') and 'N fixed' or 'N free'})"
            ax.plot(K, y, "o-", ms=3, label=label)
        if what == "C":
            ax.axhline(REFERENCE_C, color="0.5", ls="--", lw=0.8, label="reference 6.86")
            ax.set_ylabel("C")
        else:
            ax.set_ylabel("min F")
        ax.set_xlabel("K")
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
