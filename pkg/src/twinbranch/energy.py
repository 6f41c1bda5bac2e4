"""Reduced sharp-interface energy and its gradient.

All geometric data are unit-cell ordinates; N only enters through the
closed-form scalings (elastic ~ 1/N**2, surface ~ N).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from math import sqrt

import numpy as np

from .automaton import closed_interface_count, get_scheme
from .geometry import (
    DegenerateGeometryError,
    DofVector,
    GeometrySpec,
    Layout,
    layout_for,
    quarter_profile,
    stripe_arrays,
    validate,
)


@dataclass
class EnergyBreakdown:
    elastic: float
    surface: float
    boundary: float
    total: float
    c_elast: float
    c_surf: float
    # pieces of the boundary-layer bound
    boundary_elastic: float = 0.0
    boundary_trace: float = 0.0
    boundary_surface: float = 0.0
    c_rem: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def epsilon_from_diffuse(eps_tilde: float, sigma: float) -> float:
    """Sharp-interface coefficient matching a diffuse model with well height sigma."""
    if eps_tilde <= 0 or sigma <= 0:
        raise ValueError("eps_tilde and sigma must be positive")
    return 2.0 * sqrt(2.0 * sigma) / 3.0 * eps_tilde


def ux_fill(phase, ys, ye, width):
    """u_x per region of one stripe, starting from 0 at the midline.

    ``phase`` has one entry per region, ``ys``/``ye`` the interface ordinates
    at the stripe's outer (x_{k-1}) and inner (x_k) line.
    """
    if width <= 0:
        raise ValueError("stripe width must be positive")
    phase = np.asarray(phase, dtype=float)
    d = phase[:-1] * (np.asarray(ys) - np.asarray(ye))
    return np.concatenate([[0.0], 2.0 * np.cumsum(d) / width])


# -- surface terms ------------------------------------------------------------


def _interface_sum(scheme, K, theta):
    """sum_{k=1..K} theta**(k-1) I_k and its theta-derivative."""
    k = np.arange(1, K + 1)
    I = np.array([float(closed_interface_count(scheme, int(j))) for j in k])
    s = np.sum(theta ** (k - 1) * I)
    ds = np.sum((k - 1) * theta ** np.maximum(k - 2, 0) * I * (k > 1))
    return s, ds


def _interface_tail(scheme, K, theta):
    """sum_{k>K} theta**(k-1) I_k in closed form and its theta-derivative."""
    scheme = get_scheme(scheme)
    t, dt = 0.0, 0.0
    for a, g in scheme.interface_terms:
        r = g * theta
        if abs(r) >= 1.0:
            raise ValueError(f"surface tail diverges for {scheme} at theta={theta}")
        t += a * g * r**K / (1.0 - r)
        dt += a * g * (K * g * r ** (K - 1) / (1.0 - r) + g * r**K / (1.0 - r) ** 2)
    return t, dt


def surface_energy(spec: GeometrySpec, scheme=None, K=None) -> float:
    scheme = get_scheme(scheme or spec.scheme)
    K = spec.K if K is None else K
    s, _ = _interface_sum(scheme, K, spec.theta)
    e, N, l = spec.epsilon, spec.N, spec.l
    return 2 * e * N * (1 - spec.theta) * l * s + 4 * e * N * (spec.L - l)


def surface_tail(spec: GeometrySpec, scheme=None, K=None) -> float:
    scheme = get_scheme(scheme or spec.scheme)
    K = spec.K if K is None else K
    if spec.theta * scheme.growth_base >= 1.0:
        raise ValueError(f"surface tail diverges for {scheme} at theta={spec.theta}")
    t, _ = _interface_tail(scheme, K, spec.theta)
    return 2 * spec.epsilon * spec.N * (1 - spec.theta) * spec.l * t


# -- full evaluation ------------------------------------------------------------


def _stripe_energy(lay: Layout, v, k, w, want_grad):
    """Unit-N elastic energy of stripe k, 4 * sum(ux**2 * area)."""
    st = lay.stripes[k]
    ys, ye, ts, te, bs, be = stripe_arrays(lay, v, k)
    sig = st.phase
    D = sig[:-1] * (ys - ye)
    B = np.concatenate([[0.0], np.cumsum(D)])
    H = 0.5 * ((ts - bs) + (te - be))
    c = 16.0 / w
    e = c * np.sum(B * B * H)
    if not want_grad:
        return e, None, None
    dH = c * B * B
    dB = 2.0 * c * B * H
    # dE/dD_i = sum_{j > i} dE/dB_j
    G = np.cumsum(dB[::-1])[::-1][1:]
    dh = 0.5 * (dH[1:] - dH[:-1])
    return e, sig[:-1] * G + dh, -sig[:-1] * G + dh


def _trace_quarter(lay: Layout, v, want_grad):
    """Q = int_{1/4}^{1/2} u(x_K, y)**2 dy on the unit cell, with dQ/dv."""
    K = lay.K
    st = lay.stripes[K]
    _, ye, _, te, _, be = stripe_arrays(lay, v, K)
    sig = st.phase
    h = te - be
    _, U = quarter_profile(sig, te, be)
    a, b = U[:-1], U[1:]
    Q = float(np.sum(h * (a * a + a * b + b * b) / 3.0))
    if not want_grad:
        return Q, None
    # explicit partials, then the adjoint of U_{j+1} = U_j - sig_j h_j
    dh_exp = (a * a + a * b + b * b) / 3.0
    dU = np.zeros(len(U))
    dU[:-1] += h * (2 * a + b) / 3.0
    dU[1:] += h * (a + 2 * b) / 3.0
    lam = np.cumsum(dU[::-1])[::-1]  # total derivative w.r.t. U_j
    dh = dh_exp - sig * lam[1:]
    # h_j = top_j - bot_j; interface j is bottom of letter j and top of letter j+1
    g_end = -dh[:-1] + dh[1:]
    return Q, g_end


def evaluate(lay: Layout, spec: GeometrySpec, v: np.ndarray, want_grad: bool = False):
    """Energy breakdown and, optionally, gradients.

    Returns ``(breakdown, grad)`` where ``grad`` is a dict with keys
    ``theta``, ``l``, ``N`` and ``v`` (per vertex) or None.
    """
    scheme = lay.scheme
    K = lay.K
    th, l, N, eps, Ld = spec.theta, spec.l, spec.N, spec.epsilon, spec.L
    g = scheme.growth_base
    e = np.empty(K)
    stripe_grads = []
    dlogw = np.empty(K)
    for k in range(1, K + 1):
        w = spec.width(k)
        ek, g_s, g_e = _stripe_energy(lay, v, k, w, want_grad)
        e[k - 1] = ek / N**2
        dlogw[k - 1] = (k - 1) / th - 1.0 / (1.0 - th)
        stripe_grads.append((g_s, g_e))
    elastic = float(np.sum(e))

    # boundary layer: continued branching closes as a geometric series
    q = 1.0 / (g * g * th)
    if K >= 2:
        base = e[-1] + e[-2]
        fac = q * q / (1 - q * q)
        dfac_dq = 2 * q / (1 - q * q) ** 2
        w_last = np.zeros(K)
        w_last[-2:] = fac
    else:
        base = e[-1]
        fac = q / (1 - q)
        dfac_dq = 1 / (1 - q) ** 2
        w_last = np.zeros(K)
        w_last[-1] = fac
    b_el = base * fac

    Q, gQ = _trace_quarter(lay, v, want_grad)
    xK = th**K * l
    b_tr = 4.0 * Q / (N**2 * xK)

    s, ds = _interface_sum(scheme, K, th)
    t, dt = _interface_tail(scheme, K, th)
    surface = 2 * eps * N * (1 - th) * l * s + 4 * eps * N * (Ld - l)
    b_sf = 2 * eps * N * (1 - th) * l * t
    boundary = b_el + b_tr + b_sf
    total = elastic + surface + boundary

    bd = EnergyBreakdown(
        elastic=elastic,
        surface=surface,
        boundary=boundary,
        total=total,
        c_elast=elastic * l * N**2,
        c_surf=(surface - 4 * eps * N * (Ld - l)) / (eps * l * N),
        boundary_elastic=b_el,
        boundary_trace=b_tr,
        boundary_surface=b_sf,
        c_rem=b_el * xK * N**2,
    )
    if not want_grad:
        return bd, None

    de = 1.0 + w_last  # d total / d e_k
    de_dth = -e * dlogw
    d_th = float(np.sum(de * de_dth)) + base * dfac_dq * (-q / th)
    d_th += -K * b_tr / th
    d_th += 2 * eps * N * l * (-s + (1 - th) * ds)
    d_th += 2 * eps * N * l * (-t + (1 - th) * dt)
    d_l = -float(np.sum(de * e)) / l - b_tr / l
    d_l += 2 * eps * N * (1 - th) * (s + t) - 4 * eps * N
    d_N = -2.0 * float(np.sum(de * e)) / N - 2 * b_tr / N + (surface + b_sf) / N

    # elastic vertex gradient weighted by the boundary closure
    gv = np.zeros(len(v))
    for k in range(1, K + 1):
        g_s, g_e = stripe_grads[k - 1]
        st = lay.stripes[k]
        wk = de[k - 1] / N**2
        gv += np.bincount(st.start, weights=wk * g_s, minlength=len(v))
        gv += np.bincount(st.end, weights=wk * g_e, minlength=len(v))
    gv[lay.stripes[K].end] += gQ * 4.0 / (N**2 * xK)
    return bd, {"theta": d_th, "l": d_l, "N": d_N, "v": gv}


def _checked(top, spec, Y):
    rep = validate(top, spec, Y)
    if rep is not None:
        raise DegenerateGeometryError(rep)
    lay = layout_for(top)
    if spec.K != lay.K:
        raise ValueError("spec.K does not match the topology")
    return lay, Y.flat()


def elastic_energy(top, spec: GeometrySpec, Y: DofVector) -> float:
    lay, v = _checked(top, spec, Y)
    return evaluate(lay, spec, v)[0].elastic


def boundary_energy(top, spec: GeometrySpec, Y: DofVector) -> float:
    lo, hi = spec.scheme.theta_admissible
    if not lo < spec.theta < hi:
        raise ValueError("theta outside the admissible interval")
    lay, v = _checked(top, spec, Y)
    return evaluate(lay, spec, v)[0].boundary


def total_energy(top, spec: GeometrySpec, Y: DofVector) -> EnergyBreakdown:
    lay, v = _checked(top, spec, Y)
    return evaluate(lay, spec, v)[0]


def gradient(top, spec: GeometrySpec, Y: DofVector) -> dict:
    """dF/dtheta, dF/dl, dF/dN and dF/dY over the free ordinates."""
    lay, v = _checked(top, spec, Y)
    _, g = evaluate(lay, spec, v, want_grad=True)
    return {"theta": g["theta"], "l": g["l"], "N": g["N"], "Y": lay.to_params(g["v"])}


def optimal_N(c_elast: float, c_surf: float, spec: GeometrySpec) -> float:
    """Minimiser of c_elast/(l N^2) + c_surf eps l N."""
    if c_elast <= 0 or c_surf <= 0:
        raise ValueError("prefactors must be positive")
    return (2.0 * c_elast / (c_surf * spec.epsilon * spec.l**2)) ** (1.0 / 3.0)
