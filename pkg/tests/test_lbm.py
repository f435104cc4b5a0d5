from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coalesce.bench import BenchConfig, run_world
from coalesce.errors import HaloFormatError, NumericalError
from coalesce.lbm import (
    W,
    LatticeSlab,
    dump_fields,
    equilibrium,
    initial_density,
    load_fields,
)

# D2Q9 velocity set written out by hand for the reference kernel
E = [(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1)]
WEIGHTS = [4 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 36, 1 / 36, 1 / 36, 1 / 36]


def reference_step(f, tau, g):
    """Naive pull-stream, half-way bounce-back at the first and last row, BGK with Guo forcing."""
    nq, ny, nx = f.shape
    opp = [E.index((-ex, -ey)) for ex, ey in E]
    out = f.copy()
    for y in range(1, ny - 1):
        for x in range(nx):
            fin = np.empty(9)
            for i, (ex, ey) in enumerate(E):
                sy, sx = y - ey, (x - ex) % nx
                fin[i] = f[opp[i], y, x] if sy in (0, ny - 1) else f[i, sy, sx]
            rho = fin.sum()
            fx = rho * g
            ux = (sum(fin[i] * E[i][0] for i in range(9)) + 0.5 * fx) / rho
            uy = sum(fin[i] * E[i][1] for i in range(9)) / rho
            for i, (ex, ey) in enumerate(E):
                eu = ex * ux + ey * uy
                feq = WEIGHTS[i] * rho * (1 + 3 * eu + 4.5 * eu * eu - 1.5 * (ux * ux + uy * uy))
                src = (1 - 0.5 / tau) * WEIGHTS[i] * (3 * (ex - ux) * fx + 9 * eu * ex * fx)
                out[i, y, x] = fin[i] - (fin[i] - feq) / tau + src
    return out


def test_equilibrium_at_rest_is_weights():
    np.testing.assert_array_equal(equilibrium(1.0, 0.0, 0.0), W)
    assert W[0] == 4 / 9 and list(W[1:5]) == [1 / 9] * 4 and list(W[5:]) == [1 / 36] * 4


def test_equilibrium_along_x():
    f = equilibrium(1.0, 0.1, 0.0)
    assert f[1] == pytest.approx((1 / 9) * (1 + 0.3 + 0.045 - 0.015), abs=1e-15)
    assert f[1] == pytest.approx(0.1477777777777778, abs=1e-15)


@given(st.floats(0.5, 2.0), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2))
def test_equilibrium_moments(rho, ux, uy):
    f = equilibrium(rho, ux, uy)
    ex = np.array([e[0] for e in E])
    ey = np.array([e[1] for e in E])
    assert f.sum() == pytest.approx(rho, rel=1e-13)
    assert (f * ex).sum() == pytest.approx(rho * ux, abs=1e-13)
    assert (f * ey).sum() == pytest.approx(rho * uy, abs=1e-13)


def test_kernel_matches_naive_reference():
    rho = initial_density(7, 9, seed=3, amplitude=0.05)
    slab = LatticeSlab.from_fields(rho, 0.0, 0.0, tau=0.7, force=1e-4)
    ref = slab.populations()
    for _ in range(12):
        slab.step_local()
        ref = reference_step(ref, 0.7, 1e-4)
    np.testing.assert_allclose(slab.populations()[:, 1:-1], ref[:, 1:-1], rtol=0, atol=1e-14)


def test_uniform_rest_state_is_fixed_point():
    slab = LatticeSlab.from_fields(np.ones((10, 12)), 0.0, 0.0, tau=0.8)
    before = slab.populations()
    for _ in range(50):
        slab.step_local()
    np.testing.assert_allclose(slab.populations()[:, 1:-1], before[:, 1:-1], rtol=0, atol=1e-15)


def test_mass_conserved_with_forcing():
    slab = LatticeSlab.from_fields(initial_density(16, 16, seed=1), 0.0, 0.0, tau=0.8, force=1e-5)
    m0 = slab.populations()[:, 1:-1].sum()
    for _ in range(1000):
        slab.step_local()
    assert abs(slab.mass() - m0) / m0 <= 1e-10


def test_halo_size_and_round_trip():
    rng = np.random.default_rng(0)
    a = LatticeSlab.from_fields(np.ones((4, 8)), 0.0, 0.0, ny=8, has_above=True)
    b = LatticeSlab.from_fields(np.ones((4, 8)), 0.0, 0.0, y0=4, ny=8, has_below=True)
    a.f[:] = rng.random(a.f.shape)
    payload = a.pack_halo("above")
    assert len(payload) == 192 == a.halo_bytes
    b.unpack_halo("below", payload)
    np.testing.assert_array_equal(b.f[[2, 5, 6], 0], a.f[[2, 5, 6], 4])
    with pytest.raises(HaloFormatError):
        b.unpack_halo("below", payload[:-8])


def test_non_finite_state_raises():
    slab = LatticeSlab.from_fields(np.ones((6, 4)), 0.0, 0.0)
    slab.f[:, 3, 2] = np.nan
    with pytest.raises(NumericalError, match="non-finite populations at step 0"):
        slab.step_local()


def test_field_dump_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    rho, ux, uy = rng.random((3, 6, 5))
    path = tmp_path / "fields.bin"
    dump_fields(path, rho, ux, uy, 42)
    assert path.stat().st_size == 24 + 3 * 30 * 8
    step, r, u, v = load_fields(path)
    assert step == 42
    np.testing.assert_array_equal(r, rho)
    np.testing.assert_array_equal(u, ux)
    np.testing.assert_array_equal(v, uy)


def _world(ranks, steps, nx=16, ny=16):
    cfg = BenchConfig(ranks=ranks, steps=steps, images=(0,), mode="coalesced", nx=nx, ny=ny,
                      monitor_every=0, force=1e-5)
    return run_world(cfg, "coalesced", 0)


def test_rank_count_does_not_change_results():
    single = _world(1, 100)
    for ranks in (2, 4):
        multi = _world(ranks, 100)
        for name in ("populations", "rho", "ux", "uy"):
            np.testing.assert_allclose(multi.global_field(name), single.global_field(name),
                                       rtol=0, atol=1e-12)
