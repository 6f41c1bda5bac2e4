"""End-to-end acceptance checks at desk scale.

Each criterion prints one PASS/FAIL line; the lines are repeated in the
terminal summary.  The full-depth runs take about half an hour on one core.
"""

import time

import numpy as np
import pytest

from twinbranch.automaton import SCHEMES, build_topology, closed_interface_count, spike_count
from twinbranch.cli import main
from twinbranch.energy import elastic_energy, gradient, total_energy
from twinbranch.optimizer import OptimizerConfig, continuation
from twinbranch.report import REFERENCE_C, constant_C, scaling_sweep, summarize

from conftest import random_geometry, random_spec
from test_automaton import PELL, literal
from test_energy import fd_check, raster_elastic, rel

EPS, L = 0.013, 0.5
LINES = []


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    return ok


def desk_config(N):
    return OptimizerConfig(N=N, K_start=4, K_max=14, max_work=1e8)


@pytest.fixture(scope="module")
def runs():
    """Full continuation runs shared by criteria 5 to 7."""
    out = {}
    for name, N in (("NEW", 2.0), ("NEW", None), ("L", 2.0), ("L", None), ("KM", 2.0)):
        out[name, N] = continuation(name, desk_config(N), EPS, L)
    return out


def test_criterion_1_count_identities():
    t0 = time.perf_counter()
    ok = all(
        closed_interface_count(sch, k) == 2 * (literal(sch, k).count("|") + 1)
        for sch in SCHEMES.values()
        for k in range(1, 13)
    )
    ok &= [spike_count("NEW", i) for i in range(1, 13)] == PELL
    dt = time.perf_counter() - t0
    assert report(1, ok and dt < 1.0, f"I_k exact for k=1..12, Pell spikes, {dt:.2f}s")


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    worst = 0.0
    for name in SCHEMES:
        for K in (2, 3, 4):
            rng = np.random.default_rng(1000 + 10 * K + len(name))
            top = build_topology(name, K)
            for _ in range(20):
                spec = random_spec(name, K, rng)
                Y = random_geometry(top, spec, rng)
                g = gradient(top, spec, Y)
                for key in ("theta", "l", "N"):
                    p = getattr(spec, key)
                    h = 1e-6 * p
                    fp = total_energy(top, spec.replace(**{key: p + h}), Y).total
                    fm = total_energy(top, spec.replace(**{key: p - h}), Y).total
                    worst = max(worst, rel((fp - fm) / (2 * h), g[key]))
                d = rng.normal(size=len(g["Y"]))
                d *= 1e-3 / np.max(np.abs(d))
                worst = max(worst, rel(fd_check(top, spec, Y, d, h=1e-3), float(g["Y"] @ d)))
    dt = time.perf_counter() - t0
    assert report(2, worst <= 1e-6 and dt < 30, f"max rel error {worst:.2e}, {dt:.1f}s")


def test_criterion_3_raster_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for name in SCHEMES:
        for K in (1, 2, 3):
            rng = np.random.default_rng(2000 + K + len(name))
            top = build_topology(name, K)
            spec = random_spec(name, K, rng)
            Y = random_geometry(top, spec, rng)
            exact = elastic_energy(top, spec, Y)
            worst = max(worst, abs(raster_elastic(top, spec, Y) - exact) / exact)
    dt = time.perf_counter() - t0
    assert report(3, worst <= 1e-3 and dt < 120, f"max rel error {worst:.2e}, {dt:.1f}s")


def test_criterion_4_scaling_exponents():
    cfg = OptimizerConfig(N=None, K_start=4, K_max=10, max_work=1e8)
    res = scaling_sweep("NEW", cfg, [0.004, 0.008, 0.016, 0.032], L)
    ok = abs(res.p_F - 2 / 3) <= 0.03 and abs(res.p_N + 1 / 3) <= 0.03
    assert report(4, ok, f"p_F={res.p_F:.4f} p_N={res.p_N:.4f}")


def c_sequence(trace):
    return {r.K: constant_C(r.F_total, L, EPS) for r in trace.records if not r.degenerate}


@pytest.mark.parametrize("name,N,target", [("NEW", 2.0, 4.81), ("NEW", None, 4.72),
                                            ("L", 2.0, 4.87), ("L", None, 4.78)])
def test_criterion_5_constants(runs, name, N, target):
    tr = runs[name, N]
    C = c_sequence(tr)
    best = min(C.values())
    below = all(c < REFERENCE_C for c in C.values())
    mode = "N=2" if N else "free N"
    if abs(best - target) <= 0.10:
        ok, how = below, "in band"
    else:
        # fallback: decreasing C(K) with C(14) < C(10) < 6.86
        Ks = sorted(C)
        mono = all(C[b] <= C[a] for a, b in zip(Ks, Ks[1:]))
        ok = below and mono and 14 in C and C[14] < C[10] < REFERENCE_C
        how = "outside band, monotone fallback"
    seq = " ".join(f"{C[k]:.4f}" for k in sorted(C))
    assert report(f"5 {name} {mode}", ok, f"C={best:.4f} target {target}+-0.10 ({how}); C(K)={seq}")


def test_criterion_6_geometry(runs):
    fixed = summarize(runs["NEW", 2.0])
    free = summarize(runs["NEW", None])
    ok_theta = abs(free.theta - 0.273) <= 0.01 and abs(fixed.theta - 0.273) <= 0.01
    ok_aspect = abs(fixed.aspect_1 - 2.7) <= 0.15 and fixed.aspect_2 < fixed.aspect_1
    detail = (f"theta free={free.theta:.4f} fixed={fixed.theta:.4f}; "
              f"aspect rank1={fixed.aspect_1:.3f} rank2={fixed.aspect_2:.3f} (N=2)")
    assert report(6, ok_theta and ok_aspect, detail)


def test_criterion_7_ordering(runs):
    new, li, km = (summarize(runs[s, 2.0]) for s in ("NEW", "L", "KM"))
    gap = (li.F - new.F) / li.F
    ok = new.F < li.F and gap >= 0.005 and km.degenerate and km.degeneracy_K <= 14
    assert report(7, ok, f"F NEW={new.F:.6f} L={li.F:.6f} gap={100 * gap:.2f}%; KM degenerate at K={km.degeneracy_K}")


def test_criterion_8_determinism(tmp_path):
    argv = ["--K-max", "7", "--seed", "11"]
    outs = []
    for d in ("a", "b"):
        out = tmp_path / d
        main(["report", *argv, "--out", str(out)])
        main(["sweep", "--scheme", "NEW", "--N", "free", "--K-start", "2", "--K-max", "4",
              "--eps-list", "0.004,0.008,0.016,0.032", "--out", str(out / "sweep")])
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    kinds = {p.suffix for p in files}
    same = all((outs[0] / p).read_bytes() == (outs[1] / p).read_bytes() for p in files)
    ok = same and {".csv", ".json", ".svg"} <= kinds
    assert report(8, ok, f"{len(files)} files byte-identical across two runs")
