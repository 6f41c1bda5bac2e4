import numpy as np
import pytest

from twinbranch.automaton import get_scheme
from twinbranch.geometry import DofVector, GeometrySpec, initial_geometry, layout_for


def random_spec(scheme, K, rng, L=0.5):
    lo, hi = get_scheme(scheme).theta_admissible
    pad = 0.05 * (hi - lo)
    return GeometrySpec(
        scheme,
        K,
        theta=float(rng.uniform(lo + pad, hi - pad)),
        l=float(rng.uniform(0.1, 0.9) * L),
        L=L,
        N=float(rng.uniform(0.7, 4.0)),
        epsilon=float(rng.uniform(0.004, 0.05)),
    )


def random_geometry(top, spec, rng, amp=0.3) -> DofVector:
    """Initial geometry with every parameter moved by up to amp times its nearest gap."""
    lay = layout_for(top)
    v = initial_geometry(top, spec).flat()
    up, low = lay.constraints
    ext = np.concatenate([v, [0.25, 0.5]])
    gap = ext[up] - ext[low]
    room = np.full(lay.n_vertices, np.inf)
    for ids in (up, low):
        m = ids >= 0
        np.minimum.at(room, ids[m], gap[m])
    m = lay.src >= 0
    prm = np.full(lay.n_params, np.inf)
    np.minimum.at(prm, lay.src[m], room[m])
    z = v[lay.owner] + amp * prm * rng.uniform(-1, 1, lay.n_params)
    return lay.unpack(z)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
