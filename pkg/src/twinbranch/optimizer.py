"""Level-by-level minimisation of the reduced energy.

The unknowns are theta, l, optionally N, and the free ordinates.  theta, l
and N are mapped to unconstrained variables (logistic / log); the ordinates
keep their linear ordering constraints, which a ratio test enforces along
every search direction.  Directions come from limited-memory BFGS.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import nnls

from .automaton import build_topology, get_scheme
from .energy import EnergyBreakdown, evaluate
from .geometry import (
    DELTA_GEOM,
    IFACE,
    TIP,
    Y_LOW,
    Y_MID,
    DegeneracyReport,
    DegenerateGeometryError,
    DofVector,
    GeometrySpec,
    extend_level,
    initial_geometry,
    layout_for,
    validate,
)

log = logging.getLogger(__name__)

THETA_MARGIN = 1e-4
MIN_LEVEL_ITER = 20
TRACE_COLUMNS = ["K", "F_total", "F_elast", "F_surf", "F_bdry", "theta", "l", "N", "iters", "degenerate", "seconds"]


@dataclass
class OptimizerConfig:
    N: float | None = 2.0  # None: N is a free unknown
    K_start: int = 4
    K_max: int = 14
    g_tol: float = 1e-9
    f_tol: float = 1e-8
    x_tol: float = 1e-14
    max_iter: int = 5000
    delta_geom: float = DELTA_GEOM
    memory: int = 50
    stall_window: int = 50
    degeneracy_window: int = 50
    seed: int = 0
    max_work: float | None = None  # cap on iterations x parameters per level
    history_floats: float = 2e7  # cap on memory x parameters
    timing: bool = False  # wall-clock seconds in traces; off keeps output reproducible
    free_facet_tips: bool = True  # False keeps facet-born tips at their warm-start ordinates

    def __post_init__(self):
        if self.K_start < 1 or self.K_max < self.K_start:
            raise ValueError("need 1 <= K_start <= K_max")
        if min(self.g_tol, self.f_tol, self.x_tol, self.delta_geom) <= 0:
            raise ValueError("tolerances must be positive")
        if self.N is not None and self.N <= 0:
            raise ValueError("fixed N must be positive")

    def level_limits(self, n: int) -> tuple[int, int]:
        """Iteration cap and L-BFGS memory for a level with n parameters."""
        it = self.max_iter
        if self.max_work is not None:
            it = min(it, max(MIN_LEVEL_ITER, int(self.max_work // max(n, 1))))
        mem = max(3, min(self.memory, int(self.history_floats // max(n, 1))))
        return it, mem

    @property
    def free_N(self) -> bool:
        return self.N is None

    @property
    def mode_N(self) -> str:
        return "free" if self.N is None else f"fixed:{self.N:g}"


class NonConvergenceError(RuntimeError):
    pass


@dataclass
class LevelResult:
    Y: DofVector
    spec: GeometrySpec
    energy: EnergyBreakdown
    iterations: int
    converged: bool
    degeneracy: DegeneracyReport | None = None
    initial_total: float = float("nan")
    history: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.Y, self.spec, self.energy))


# -- variable maps ------------------------------------------------------------


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _logit(p):
    return float(np.log(p / (1.0 - p)))


class _Hierarchy:
    """Ordinates as offsets from the value their parent geometry predicts.

    An interface end is predicted by the start of its interface, a free tip
    by the midpoint of its two neighbours on the same line.  Moving one
    offset then translates the whole sub-pattern grown from that vertex,
    which removes the soft collective modes of the plain ordinates.
    """

    def __init__(self, lay):
        self.n = lay.n_params
        self.lines = []
        for k in range(lay.K + 1):
            sl = lay.line(k)
            ids = np.arange(sl.start, sl.stop)
            own = ids[lay.src[ids] >= 0]
            own = own[lay.owner[lay.src[own]] == own]
            iv = own[lay.vkind[own] == IFACE]
            tv = own[lay.vkind[own] == TIP]
            if k >= 1:
                st = lay.stripes[k]
                pred = st.start[np.searchsorted(st.end, iv)]
            else:
                pred = iv
            up = np.where(tv - 1 >= sl.start, tv - 1, -1)
            low = np.where(tv + 1 < sl.stop, tv + 1, -2)
            self.lines.append(
                (lay.src[iv], *self._ref(lay, pred), lay.src[tv], *self._ref(lay, up), *self._ref(lay, low))
            )

    @staticmethod
    def _ref(lay, vid):
        """Parameter index (or -1) and constant offset of each referenced vertex."""
        vid = np.asarray(vid, dtype=np.int64)
        p = np.where(vid >= 0, lay.src[np.maximum(vid, 0)], -1)
        const = np.where(vid == -2, Y_LOW, np.where(p < 0, Y_MID, 0.0))
        return p, const

    @staticmethod
    def _val(z, p, c, affine):
        out = np.where(p >= 0, z[np.maximum(p, 0)], 0.0)
        return out + c if affine else out

    def to_z(self, d, affine=True):
        z = np.zeros(self.n)
        for ip, pp, pc, tp, up, uc, lp, lc in self.lines:
            z[ip] = self._val(z, pp, pc, affine) + d[ip]
            z[tp] = 0.5 * (self._val(z, up, uc, affine) + self._val(z, lp, lc, affine)) + d[tp]
        return z

    def from_z(self, z):
        d = np.empty(self.n)
        for ip, pp, pc, tp, up, uc, lp, lc in self.lines:
            d[ip] = z[ip] - self._val(z, pp, pc, True)
            d[tp] = z[tp] - 0.5 * (self._val(z, up, uc, True) + self._val(z, lp, lc, True))
        return d

    def transpose(self, a):
        """Apply the transpose of the linear part of to_z (works on 2-D columns)."""
        a = np.array(a, dtype=float)
        for ip, pp, pc, tp, up, uc, lp, lc in reversed(self.lines):
            at = a[tp]
            for p in (up, lp):
                m = p >= 0
                np.add.at(a, p[m], 0.5 * at[m])
            m = pp >= 0
            np.add.at(a, pp[m], a[ip][m])
        return a

    def _lookup(self):
        if not hasattr(self, "_where"):
            line = np.full(self.n, -1)
            pos = np.zeros(self.n, dtype=np.int64)
            for k, (ip, _, _, tp, *_) in enumerate(self.lines):
                line[ip], pos[ip] = 2 * k, np.arange(len(ip))
                line[tp], pos[tp] = 2 * k + 1, np.arange(len(tp))
            self._where = line, pos
        return self._where

    def transpose_coo(self, rows, cols, vals):
        """transpose on a sparse matrix given as (row, column, value) triplets."""
        line, pos = self._lookup()
        for k in reversed(range(len(self.lines))):
            ip, pp, _, tp, up, _, lp, _ = self.lines[k]
            sel = line[rows] == 2 * k + 1
            j, c, v = pos[rows[sel]], cols[sel], vals[sel]
            new = [(rows, cols, vals)]
            for p in (up, lp):
                m = p[j] >= 0
                new.append((p[j][m], c[m], 0.5 * v[m]))
            rows, cols, vals = _coalesce(*new)
            sel = line[rows] == 2 * k
            j, c, v = pos[rows[sel]], cols[sel], vals[sel]
            m = pp[j] >= 0
            rows, cols, vals = _coalesce((rows, cols, vals), (pp[j][m], c[m], v[m]))
        return rows, cols, vals


def _coalesce(*parts):
    """Concatenate triplet lists and sum duplicate (row, column) entries."""
    rows, cols, vals = (np.concatenate(x) for x in zip(*parts))
    key, inv = np.unique(np.stack([rows, cols]), axis=1, return_inverse=True)
    return key[0], key[1], np.bincount(inv.ravel(), weights=vals, minlength=key.shape[1])


class _RunningSums:
    """Hierarchical offsets with chosen lines replaced by running sums.

    On line k the offset of an interface end from its start is the step of
    the alternating sum S_j = sum_{i<=j} sigma_i d_i.  The last stripe's
    energy is quadratic in exactly these sums, so its Hessian becomes banded
    and diagonally dominant.
    """

    def __init__(self, lay, hier: _Hierarchy, lines):
        self.n = hier.n
        self.hier = hier
        self.runs = []
        for k in lines:
            st = lay.stripes[k]
            p = lay.src[st.end]
            keep = (p >= 0) & (lay.owner[np.maximum(p, 0)] == st.end)
            self.runs.append((p[keep], st.phase[:-1][keep].astype(float)))

    def _steps(self, c):
        d = np.array(c, dtype=float)
        for p, sig in self.runs:
            S = c[p]
            d[p] = sig * np.diff(S, prepend=0.0, axis=0) if S.ndim == 1 else (
                sig[:, None] * np.diff(S, prepend=0.0, axis=0))
        return d

    def to_z(self, c, affine=True):
        return self.hier.to_z(self._steps(c), affine)

    def from_z(self, z):
        c = self.hier.from_z(z)
        for p, sig in self.runs:
            c[p] = np.cumsum(sig * c[p])
        return c

    def transpose(self, a):
        g = self.hier.transpose(a)
        out = g.copy()
        for p, sig in self.runs:
            gs = g[p] * (sig if g.ndim == 1 else sig[:, None])
            out[p] = gs
            out[p[:-1]] -= gs[1:]
        return out

    def transpose_coo(self, rows, cols, vals):
        rows, cols, vals = self.hier.transpose_coo(rows, cols, vals)
        if not hasattr(self, "_prev"):
            self._sig = np.ones(self.n)
            self._prev = np.full(self.n, -1)
            for p, sig in self.runs:
                self._sig[p] = sig
                self._prev[p[1:]] = p[:-1]
        v = vals * self._sig[rows]
        prev = self._prev[rows]
        m = prev >= 0
        return _coalesce((rows, cols, v), (prev[m], cols[m], -v[m]))


class _Plain:
    """Raw ordinates; used when individual parameters must stay put."""

    def __init__(self, n):
        self.n = n

    def to_z(self, c, affine=True):
        return np.array(c, dtype=float)

    def from_z(self, z):
        return np.array(z, dtype=float)

    def transpose(self, a):
        return np.array(a, dtype=float)

    def transpose_coo(self, rows, cols, vals):
        return rows, cols, vals


class _Problem:
    """Unconstrained globals plus scaled ordinates in running-sum coordinates."""

    def __init__(self, lay, spec: GeometrySpec, cfg: OptimizerConfig, Y0: DofVector,
                 basis=None, only=None):
        self.lay = lay
        self.base = spec
        self.cfg = cfg
        lo, hi = spec.scheme.theta_admissible
        self.th_lo, self.th_hi = lo + THETA_MARGIN, hi - THETA_MARGIN
        self.n_glob = 3 if cfg.free_N else 2
        self.hier = basis or _basis(lay)
        self.only = only
        self.scale = np.ones(self.n_glob + lay.n_params)
        self.scale = self._scaling(spec, lay.pack(Y0))

    def _scaling(self, spec, z0):
        """Inverse square root of sampled Hessian diagonals.

        Each global gets its own entry.  Ordinates are sampled once per line
        and vertex kind and share the median: per-group values steer iterates
        into collapsed local minima.
        """
        lay = self.lay
        x0 = self.encode(spec, z0)
        h = 1e-6

        def curvature(i):
            e = np.zeros(len(x0))
            e[i] = h
            return abs(self.fg(x0 + e)[1][i] - self.fg(x0 - e)[1][i]) / (2 * h)

        def inv_sqrt(c):
            return 1.0 / np.sqrt(c) if c > 0 else 1.0

        scale = np.ones(len(x0))
        for i in range(self.n_glob):
            scale[i] = inv_sqrt(curvature(i))
        groups = lay.param_line() * 2 + lay.vkind[lay.owner]
        if self.only is not None:
            groups = np.where(self.only, groups, -1)
        samples = []
        for grp in np.unique(groups[groups >= 0]):
            members = np.flatnonzero(groups == grp)
            samples.append(curvature(self.n_glob + int(members[len(members) // 2])))
        if samples:
            scale[self.n_glob:] = inv_sqrt(float(np.median(samples)))
        return scale

    def encode(self, spec: GeometrySpec, z):
        t = (spec.theta - self.th_lo) / (self.th_hi - self.th_lo)
        t = min(max(t, 1e-12), 1 - 1e-12)
        g = [_logit(t), _logit(spec.l / spec.L)]
        if self.cfg.free_N:
            g.append(float(np.log(spec.N)))
        return np.concatenate([g, self.hier.from_z(z)]) / self.scale

    def decode(self, x):
        u = x * self.scale
        th = self.th_lo + (self.th_hi - self.th_lo) * _sigmoid(u[0])
        l = self.base.L * _sigmoid(u[1])
        N = float(np.exp(u[2])) if self.cfg.free_N else self.cfg.N
        spec = self.base.replace(theta=float(th), l=float(l), N=N)
        z = self.hier.to_z(u[self.n_glob:])
        return spec, z

    def fg(self, x):
        spec, z = self.decode(x)
        bd, g = evaluate(self.lay, spec, self.lay.values(z), want_grad=True)
        gd = self.hier.transpose(self.lay.to_params(g["v"]))
        u = x * self.scale
        s0 = _sigmoid(u[0])
        s1 = _sigmoid(u[1])
        gx = [g["theta"] * (self.th_hi - self.th_lo) * s0 * (1 - s0), g["l"] * self.base.L * s1 * (1 - s1)]
        if self.cfg.free_N:
            gx.append(g["N"] * spec.N)
        return bd.total, np.concatenate([gx, gd]) * self.scale, bd

    def gaps(self, x):
        _, z = self.decode(x)
        return self.lay.gaps(self.lay.values(z))

    def rates(self, d):
        """Rate of change of every ordering gap along the direction d."""
        lay = self.lay
        dz = self.hier.to_z(d[self.n_glob:] * self.scale[self.n_glob:], affine=False)
        dv = np.where(lay.src >= 0, dz[np.maximum(lay.src, 0)], 0.0)
        up, low = lay.constraints
        ext = np.concatenate([dv, [0.0, 0.0]])
        return ext[up] - ext[low]

    def project(self, d, active):
        """Euclidean projection of d onto the cone where no active gap shrinks."""
        if len(active) == 0:
            return d
        lay = self.lay
        up, low = lay.constraints
        # each active row touches a vertex and its ancestors only
        rows, cols, vals = [], [], []
        for vid, sgn in ((up[active], 1.0), (low[active], -1.0)):
            m = vid >= 0
            m[m] = lay.src[vid[m]] >= 0
            rows.append(lay.src[vid[m]])
            cols.append(np.flatnonzero(m))
            vals.append(np.full(int(m.sum()), sgn))
        rows, cols, vals = self.hier.transpose_coo(*_coalesce(*zip(rows, cols, vals)))
        vals = vals * self.scale[self.n_glob + rows]
        m = vals != 0
        rows, cols, vals = rows[m], cols[m], vals[m]
        if len(rows) == 0:
            return d
        uniq, at = np.unique(rows, return_inverse=True)
        A = np.zeros((len(uniq), len(active)))
        A[at.ravel(), cols] = vals
        cols = uniq + self.n_glob
        lam, _ = nnls(A, -d[cols])
        out = d.copy()
        out[cols] += A @ lam
        return out


def _basis(lay) -> _RunningSums:
    b = getattr(lay, "_basis", None)
    if b is None:
        b = _RunningSums(lay, _hierarchy(lay), range(1, lay.K + 1))
        lay._basis = b
    return b


def _hierarchy(lay) -> _Hierarchy:
    h = getattr(lay, "_hierarchy", None)
    if h is None:
        h = _Hierarchy(lay)
        lay._hierarchy = h
    return h


def constrained_step(gaps, rates, margin: float, t: float = 1.0) -> float:
    """Largest step <= t that keeps every gap at or above ``margin``.

    Gaps already inside the margin may not shrink further.
    """
    shrinking = rates < 0
    if not shrinking.any():
        return t
    room = np.maximum(gaps[shrinking] - margin, 0.0)
    t_max = float(np.min(room / -rates[shrinking]))
    return min(t, t_max)


def _two_loop(g, S, Yv, rho):
    q = g.copy()
    alpha = []
    for s, y, r in zip(reversed(S), reversed(Yv), reversed(rho)):
        a = r * np.dot(s, q)
        alpha.append(a)
        q -= a * y
    if S:
        q *= np.dot(S[-1], Yv[-1]) / np.dot(Yv[-1], Yv[-1])
    for (s, y, r), a in zip(zip(S, Yv, rho), reversed(alpha)):
        b = r * np.dot(y, q)
        q += (a - b) * s
    return -q


def optimize_level(top, spec: GeometrySpec, Y0: DofVector, cfg: OptimizerConfig,
                   only=None) -> LevelResult:
    """Minimise the total energy over theta, l, (N) and the free ordinates.

    ``only`` optionally restricts the search to a boolean mask over the
    ordinate parameters; everything else, including theta, l and N, stays
    fixed.
    """
    lay = layout_for(top)
    rep = validate(top, spec, Y0, cfg.delta_geom)
    if rep is not None:
        raise DegenerateGeometryError(rep)
    if cfg.N is not None:
        spec = spec.replace(N=cfg.N)
    # pinned tips are frozen in raw ordinates, which the offset bases would move
    basis = _basis(lay) if cfg.free_facet_tips else _Plain(lay.n_params)
    prob = _Problem(lay, spec, cfg, Y0, basis, only)
    max_iter, memory = cfg.level_limits(lay.n_params)
    x = prob.encode(spec, lay.pack(Y0))
    frozen = None
    if only is not None:
        frozen = np.ones(len(x), dtype=bool)
        frozen[prob.n_glob:] = ~np.asarray(only, dtype=bool)
    if not cfg.free_facet_tips:
        if frozen is None:
            frozen = np.zeros(len(x), dtype=bool)
        frozen[prob.n_glob:] |= facet_tip_mask(lay)

    def fg(x):
        f, g, bd = prob.fg(x)
        if frozen is not None:
            g[frozen] = 0.0
        return f, g, bd

    f, g, bd = fg(x)
    f_start = f
    g0 = max(float(np.max(np.abs(g))), 1e-300)
    S, Yv, rho = [], [], []
    margin = cfg.delta_geom * 10.0
    history = [f]
    converged = False
    pinned = np.zeros(len(prob.gaps(x)), dtype=np.int64)
    degeneracy = None
    it = 0
    for it in range(1, max_iter + 1):
        d = _two_loop(g, S, Yv, rho)
        if not S:
            d *= 1e-2 / g0
        slope = float(np.dot(g, d))
        if slope >= 0:
            S, Yv, rho = [], [], []
            d = -g * (1e-2 / g0)
            slope = float(np.dot(g, d))
        gaps = prob.gaps(x)
        active = np.flatnonzero(gaps <= 2 * margin)
        inward = False
        if len(active):
            inward = bool(np.any(prob.rates(d)[active] < 0))
            if inward:
                d = prob.project(d, active)
                slope = float(np.dot(g, d))
                if slope >= -1e-300:
                    S, Yv, rho = [], [], []
                    d = prob.project(-g * (1e-2 / g0), active)
                    slope = float(np.dot(g, d))
                if frozen is not None:
                    d[frozen] = 0.0
                    slope = float(np.dot(g, d))
        rates = prob.rates(d)
        if len(active):
            # projected directions leave active gaps fixed up to roundoff
            ra = rates[active]
            tiny = 1e-10 * float(np.max(np.abs(rates))) if len(rates) else 0.0
            rates[active] = np.where(ra > -tiny, np.maximum(ra, 0.0), ra)
        t = constrained_step(gaps, rates, margin, 1.0)
        accepted = False
        while t > 1e-20 and slope < 0:
            xn = x + t * d
            fn, gn, bdn = fg(xn)
            if np.isfinite(fn) and fn <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        # the same gap held at its bound while the gradient keeps closing it
        closing = np.zeros(len(pinned), dtype=bool)
        if len(active):
            closing[active] = prob.rates(-g)[active] < 0
        pinned = np.where(closing, pinned + 1, 0)
        if pinned.max(initial=0) >= cfg.degeneracy_window:
            k = int(np.argmax(pinned))
            up, low = lay.constraints
            vid = int(low[k] if low[k] >= 0 else up[k])
            line = int(np.searchsorted(lay.line_start, vid, side="right") - 1)
            degeneracy = DegeneracyReport(
                line, vid - int(lay.line_start[line]), float(gaps[k]),
                "ordinate ordering collapses under the energy gradient",
            )
            break
        if not accepted:
            if S:
                S, Yv, rho = [], [], []
                continue
            converged = True
            break
        s = xn - x
        y = gn - g
        sy = float(np.dot(s, y))
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Yv.append(y)
            rho.append(1.0 / sy)
            if len(S) > memory:
                S.pop(0), Yv.pop(0), rho.pop(0)
        x, f, g, bd = xn, fn, gn, bdn
        history.append(f)
        pg = -g
        act = np.flatnonzero(prob.gaps(x) <= 2 * margin)
        if len(act):
            pg = prob.project(pg, act)
            if frozen is not None:
                pg[frozen] = 0.0
        if np.max(np.abs(pg)) <= cfg.g_tol * g0:
            converged = True
            break
        w = cfg.stall_window
        if len(history) > w and history[-w - 1] - f <= cfg.f_tol * abs(f):
            converged = True
            break
        if np.max(np.abs(s)) <= cfg.x_tol:
            converged = True
            break
    spec_out, z = prob.decode(x)
    spec_out = spec_out.replace(K=lay.K)
    Y = lay.unpack(z)
    return LevelResult(Y, spec_out, bd, it, converged, degeneracy, f_start, history)


# -- continuation ----------------------------------------------------------------


@dataclass
class LevelRecord:
    K: int
    F_total: float
    F_elast: float
    F_surf: float
    F_bdry: float
    theta: float
    l: float
    N: float
    iters: int
    degenerate: bool
    seconds: float
    converged: bool = True
    F_start: float = float("nan")

    def row(self) -> list:
        return [getattr(self, c) for c in TRACE_COLUMNS]


@dataclass
class OptimizationTrace:
    scheme: str
    epsilon: float
    L: float
    config: dict
    records: list = field(default_factory=list)
    degeneracy: dict | None = None
    final_spec: dict | None = None
    final_Y: list | None = None
    final_energy: dict | None = None

    @property
    def degenerate(self) -> bool:
        return self.degeneracy is not None

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.records)

    def best(self) -> LevelRecord:
        ok = [r for r in self.records if not r.degenerate] or self.records
        return min(ok, key=lambda r: r.F_total)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(v) for v in r.row()])
        return buf.getvalue()

    def to_json(self, include_geometry: bool = True) -> str:
        d = {
            "schema": "twinbranch.trace/1",
            "scheme": self.scheme,
            "epsilon": self.epsilon,
            "L": self.L,
            "config": self.config,
            "records": [asdict(r) for r in self.records],
            "degeneracy": self.degeneracy,
            "final_spec": self.final_spec,
            "final_energy": self.final_energy,
        }
        if include_geometry:
            d["final_Y"] = self.final_Y
        return json.dumps(_plain(d), indent=1, sort_keys=True)


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _plain(o):
    if isinstance(o, dict):
        return {k: _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return [_plain(v) for v in o.tolist()]
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    return o


def default_start(scheme, epsilon: float, L: float, N: float = 2.0, K: int = 4) -> GeometrySpec:
    """Geometric mean of the admissible theta range; l at half the domain."""
    scheme = get_scheme(scheme)
    lo, hi = scheme.theta_admissible
    return GeometrySpec(scheme, K, float(np.sqrt(lo * hi)), 0.5 * L, L, N, epsilon)


def facet_tip_mask(lay) -> np.ndarray:
    """Tip ordinates that are free parameters (spikes born inside a facet)."""
    return lay.vkind[lay.owner] == TIP


def new_level_mask(lay) -> np.ndarray:
    """Parameters created by extending to level K: the last line and the tips above it."""
    line = lay.param_line()
    tip = lay.vkind[lay.owner] == TIP
    return (line == lay.K) | ((line == lay.K - 1) & tip)


def fit_new_level(top, spec: GeometrySpec, Y: DofVector, cfg: OptimizerConfig) -> LevelResult:
    """Relax only the freshly extrapolated level before the joint optimisation."""
    return optimize_level(top, spec, Y, cfg, only=new_level_mask(layout_for(top)))


def continuation(scheme, cfg: OptimizerConfig, epsilon: float, L: float = 0.5,
                 on_level=None, start: GeometrySpec | None = None) -> OptimizationTrace:
    """Optimise from K_start upward, warm-starting each level by extrapolation.

    ``on_level(trace, result)`` runs after every level with the trace so far.
    """
    scheme = get_scheme(scheme)
    trace = OptimizationTrace(scheme.name, epsilon, L, _plain(asdict(cfg)))
    spec = start or default_start(scheme, epsilon, L, cfg.N or 2.0, cfg.K_start)
    spec = spec.replace(K=cfg.K_start, epsilon=epsilon, L=L)
    top = build_topology(scheme, cfg.K_start)
    Y = initial_geometry(top, spec)
    for K in range(cfg.K_start, cfg.K_max + 1):
        t0 = time.perf_counter()
        pre_iters, f_start = 0, float("nan")
        if K > cfg.K_start:
            pre = fit_new_level(top, spec, Y, cfg)
            Y, pre_iters, f_start = pre.Y, pre.iterations, pre.initial_total
        res = optimize_level(top, spec, Y, cfg)
        if K == cfg.K_start:
            f_start = res.initial_total
        dt = time.perf_counter() - t0
        bd = res.energy
        rec = LevelRecord(
            K, float(bd.total), float(bd.elastic), float(bd.surface), float(bd.boundary),
            res.spec.theta, res.spec.l, res.spec.N, pre_iters + res.iterations,
            res.degeneracy is not None, round(dt, 3) if cfg.timing else 0.0, res.converged, float(f_start),
        )
        trace.records.append(rec)
        log.info("%s K=%d F=%.8f theta=%.4f l=%.4f N=%.4f iters=%d %.1fs", scheme.name, K,
                 bd.total, res.spec.theta, res.spec.l, res.spec.N, res.iterations, dt)
        if res.degeneracy is not None:
            trace.degeneracy = {"K": K, **asdict(res.degeneracy)}
        else:
            trace.final_spec = res.spec.as_dict()
            trace.final_Y = [a.tolist() for a in res.Y.lines]
            trace.final_energy = _plain(bd.as_dict())
        if on_level is not None:
            on_level(trace, res)
        if res.degeneracy is not None:
            break
        if K == cfg.K_max:
            break
        top_next = build_topology(scheme, K + 1)
        spec = res.spec.replace(K=K + 1)
        try:
            Y = extend_level(top_next, spec, res.Y)
        except DegenerateGeometryError as exc:
            trace.degeneracy = {"K": K + 1, **asdict(exc.report)}
            break
        top = top_next
    return trace
