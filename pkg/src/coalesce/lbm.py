"""D2Q9 BGK lattice-Boltzmann channel split into horizontal slabs, one per rank.

The channel is periodic in x. Global rows 0 and ny-1 are solid walls with
half-way bounce-back, so the fluid occupies ny-2 rows. A body force drives the
flow along +x using Guo's forcing scheme.

Each slab stores post-collision populations with one ghost row above and
below. A step pulls populations from neighbouring rows (streaming) and then
collides. Rows whose pull sources are all local can be updated while the
halo exchange is in flight; the rows next to a neighbouring rank wait for the
ghost data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, HaloFormatError, NumericalError
from .phase import Phase
from .steps import ActionRegistration

# direction vectors: rest, E, N, W, S, NE, NW, SW, SE
EX = np.array([0, 1, 0, -1, 0, 1, -1, -1, 1])
EY = np.array([0, 0, 1, 0, -1, 1, 1, -1, -1])
W = np.array([4 / 9] + [1 / 9] * 4 + [1 / 36] * 4)
OPPOSITE = np.array([0, 3, 4, 1, 2, 7, 8, 5, 6])
_EX3 = EX.astype(float)[:, None]
_EY3 = EY.astype(float)[:, None]
_W3 = W[:, None]

UP_DIRS = (2, 5, 6)  # ey = +1, travel into the slab above
DOWN_DIRS = (4, 7, 8)  # ey = -1

HALO_TAG = 1
_HALO_DTYPE = np.dtype("<f8")

# declared virtual compute costs (microseconds)
SITE_UPDATE_US = 2.5
HALO_VALUE_US = 0.002


def equilibrium(rho, ux, uy):
    """Nine equilibrium populations; scalars or arrays broadcast together."""
    rho = np.asarray(rho, dtype=float)
    ux = np.asarray(ux, dtype=float)
    uy = np.asarray(uy, dtype=float)
    usq = 1.5 * (ux * ux + uy * uy)
    out = np.empty((9,) + np.broadcast(rho, ux, uy).shape)
    for i in range(9):
        eu = EX[i] * ux + EY[i] * uy
        out[i] = W[i] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - usq)
    return out


def _moments(f):
    # explicit summation order keeps results independent of array shape
    rho = f[0] + f[1] + f[2] + f[3] + f[4] + f[5] + f[6] + f[7] + f[8]
    jx = f[1] - f[3] + f[5] - f[6] - f[7] + f[8]
    jy = f[2] - f[4] + f[5] + f[6] - f[7] - f[8]
    return rho, jx, jy


def collide(f, tau: float, force: float):
    """BGK collision with Guo forcing (force is an acceleration along +x).

    Returns ``(f_post, rho, ux, uy)``.
    """
    rho, jx, jy = _moments(f)
    fx = rho * force
    ux = (jx + 0.5 * fx) / rho
    uy = jy / rho
    usq = 1.5 * (ux * ux + uy * uy)
    eu = _EX3 * ux + _EY3 * uy
    feq = _W3 * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - usq)
    omega = 1.0 / tau
    source = (1.0 - 0.5 * omega) * _W3 * (3.0 * (_EX3 - ux) * fx + 9.0 * eu * _EX3 * fx)
    return f - omega * (f - feq) + source, rho, ux, uy


def wall_rows(ny: int) -> np.ndarray:
    solid = np.zeros(ny, dtype=bool)
    solid[0] = solid[-1] = True
    return solid


def slab_bounds(ny: int, ranks: int, rank: int) -> tuple[int, int]:
    if ny % ranks:
        raise ConfigurationError(f"ny={ny} is not divisible by {ranks} ranks")
    n = ny // ranks
    return rank * n, (rank + 1) * n


def initial_density(nx: int, ny: int, seed: int | None = None, amplitude: float = 0.01):
    """Uniform unit density, optionally perturbed by seeded noise on fluid rows."""
    rho = np.ones((ny, nx))
    if seed is not None and amplitude:
        rng = np.random.default_rng(seed)
        noise = rng.uniform(-0.5, 0.5, size=(ny, nx))
        rho[1:-1] += amplitude * noise[1:-1]
    return rho


@dataclass
class LatticeSlab:
    """Rows ``[y0, y0 + ny_local)`` of an ``nx`` x ``ny`` channel.

    ``f`` has shape ``(9, ny_local + 2, nx)``; padded rows 0 and ``ny_local + 1``
    are ghosts.
    """

    nx: int
    ny: int
    y0: int
    ny_local: int
    tau: float
    force: float
    f: np.ndarray
    rho: np.ndarray
    ux: np.ndarray
    uy: np.ndarray
    has_below: bool
    has_above: bool
    step: int = 0
    solid: np.ndarray = field(init=False)
    _next: np.ndarray = field(init=False, repr=False)
    _plans: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.tau <= 0.5:
            raise ConfigurationError(f"tau must exceed 0.5, got {self.tau}")
        if self.ny_local < 1:
            raise ConfigurationError("a slab needs at least one row")
        rows = np.arange(self.y0 - 1, self.y0 + self.ny_local + 1)
        walls = wall_rows(self.ny)
        self.solid = np.array([(r < 0 or r >= self.ny) or walls[r] for r in rows])
        self._next = self.f.copy()
        self._plans = {}

    @classmethod
    def from_fields(cls, rho, ux, uy, *, y0=0, ny=None, tau=0.8, force=0.0,
                    has_below=False, has_above=False):
        rho = np.asarray(rho, dtype=float)
        ux = np.broadcast_to(np.asarray(ux, dtype=float), rho.shape).copy()
        uy = np.broadcast_to(np.asarray(uy, dtype=float), rho.shape).copy()
        ny_local, nx = rho.shape
        ny = ny_local if ny is None else ny
        f = np.zeros((9, ny_local + 2, nx))
        f[:, 1:-1] = equilibrium(rho, ux, uy)
        return cls(nx, ny, y0, ny_local, tau, force, f, rho.copy(), ux, uy,
                   has_below, has_above)

    @classmethod
    def for_rank(cls, rho_global, rank: int, ranks: int, *, tau=0.8, force=0.0):
        ny, nx = rho_global.shape
        lo, hi = slab_bounds(ny, ranks, rank)
        return cls.from_fields(rho_global[lo:hi], 0.0, 0.0, y0=lo, ny=ny, tau=tau, force=force,
                               has_below=rank > 0, has_above=rank < ranks - 1)

    # -- geometry ------------------------------------------------------------

    @property
    def fluid_rows(self) -> np.ndarray:
        """Padded row indices of local fluid rows."""
        return np.flatnonzero(~self.solid[1:-1]) + 1

    def interior_range(self) -> tuple[int, int]:
        lo = 2 if self.has_below else 1
        hi = self.ny_local - 1 if self.has_above else self.ny_local
        return lo, max(lo, hi + 1)

    def boundary_rows(self) -> list[int]:
        rows = []
        if self.has_below:
            rows.append(1)
        if self.has_above and self.ny_local not in rows:
            rows.append(self.ny_local)
        return rows

    def count_fluid(self, a: int, b: int) -> int:
        return int(np.count_nonzero(~self.solid[a:b])) * self.nx

    # -- update --------------------------------------------------------------

    def _stream_plan(self, a: int, b: int):
        plan = self._plans.get((a, b))
        if plan is None:
            rows = np.arange(a, b)
            src_rows = rows[None, :] - EY[:, None]
            src_cols = (np.arange(self.nx)[None, :] - EX[:, None]) % self.nx
            # flat indices into f[:, :, :] for a single gather
            n_rows = self.f.shape[1]
            gather = ((np.arange(9)[:, None, None] * n_rows + src_rows[:, :, None]) * self.nx
                      + src_cols[:, None, :])
            fluid = ~self.solid[a:b]
            bounce_dir, bounce_row = np.nonzero(self.solid[src_rows] & fluid[None, :])
            plan = (gather, fluid, bounce_dir, bounce_row, rows[fluid])
            self._plans[(a, b)] = plan
        return plan

    def update_rows(self, a: int, b: int) -> None:
        """Stream into padded rows ``[a, b)`` from the current state, then collide."""
        if a >= b:
            return
        gather, fluid, bounce_dir, bounce_row, rows = self._stream_plan(a, b)
        if not rows.size:
            return
        f = self.f
        streamed = f.reshape(-1)[gather]
        if bounce_dir.size:
            streamed[bounce_dir, bounce_row] = f[OPPOSITE[bounce_dir], a + bounce_row]
        # blow-ups are reported below with the offending site, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            post, rho, ux, uy = collide(streamed[:, fluid].reshape(9, -1), self.tau, self.force)
        if not np.isfinite(rho).all():
            bad = int(np.flatnonzero(~np.isfinite(rho))[0])
            y = self.y0 - 1 + rows[bad // self.nx]
            raise NumericalError(
                f"non-finite populations at step {self.step}, site (x={bad % self.nx}, y={y})"
            )
        shape = (rows.size, self.nx)
        self._next[:, rows] = post.reshape((9,) + shape)
        self.rho[rows - 1] = rho.reshape(shape)
        self.ux[rows - 1] = ux.reshape(shape)
        self.uy[rows - 1] = uy.reshape(shape)

    def finish_step(self) -> None:
        self.f, self._next = self._next, self.f
        self.step += 1

    def step_local(self) -> None:
        """A complete step for a slab without neighbours."""
        if self.has_below or self.has_above:
            raise ConfigurationError("slab has neighbours; use the halo exchange path")
        self.update_rows(1, self.ny_local + 1)
        self.finish_step()

    # -- halo ----------------------------------------------------------------

    def pack_halo(self, neighbor: str) -> bytes:
        """Populations leaving this slab towards ``neighbor`` ("above" or "below"),
        site-major, float64 little-endian."""
        if neighbor == "above":
            block = self.f[list(UP_DIRS), self.ny_local]
        elif neighbor == "below":
            block = self.f[list(DOWN_DIRS), 1]
        else:
            raise HaloFormatError(f"unknown neighbour {neighbor!r}")
        return np.ascontiguousarray(block.T, dtype=_HALO_DTYPE).tobytes()

    def unpack_halo(self, neighbor: str, payload: bytes) -> None:
        expected = self.halo_bytes
        if len(payload) != expected:
            raise HaloFormatError(f"halo from {neighbor} has {len(payload)} bytes, expected {expected}")
        block = np.frombuffer(payload, dtype=_HALO_DTYPE).reshape(self.nx, 3).T
        if neighbor == "below":
            self.f[list(UP_DIRS), 0] = block
        elif neighbor == "above":
            self.f[list(DOWN_DIRS), self.ny_local + 1] = block
        else:
            raise HaloFormatError(f"unknown neighbour {neighbor!r}")

    @property
    def halo_bytes(self) -> int:
        return self.nx * 3 * _HALO_DTYPE.itemsize

    # -- diagnostics ---------------------------------------------------------

    def mass(self) -> float:
        rows = self.fluid_rows - 1
        return float(self.rho[rows].sum())

    def populations(self) -> np.ndarray:
        """Local populations without ghost rows, shape (9, ny_local, nx)."""
        return self.f[:, 1:-1].copy()


class LBMClient:
    """Registers the kernel's callbacks with a step manager for one rank."""

    def __init__(self, slab: LatticeSlab, rank: int, world_size: int):
        self.slab = slab
        self.rank = rank
        self.world_size = world_size
        self.below = rank - 1 if slab.has_below else None
        self.above = rank + 1 if slab.has_above else None
        self._out: dict = {}
        self._tickets: dict = {}

    def registrations(self) -> list[ActionRegistration]:
        slab = self.slab
        lo, hi = slab.interior_range()
        halo_values = 3 * slab.nx * ((self.below is not None) + (self.above is not None))
        boundary = sum(slab.count_fluid(r, r + 1) for r in slab.boundary_rows())
        return [
            ActionRegistration(Phase.REQUEST_POSTING, self.post_requests),
            ActionRegistration(Phase.PRE_SEND, self.pack, declared_cost_us=halo_values * HALO_VALUE_US),
            ActionRegistration(Phase.PRE_WAIT, self.update_interior,
                               declared_cost_us=slab.count_fluid(lo, hi) * SITE_UPDATE_US),
            ActionRegistration(Phase.POST_WAIT, self.update_boundary,
                               declared_cost_us=boundary * SITE_UPDATE_US + halo_values * HALO_VALUE_US),
        ]

    def _neighbors(self):
        if self.below is not None:
            yield "below", self.below
        if self.above is not None:
            yield "above", self.above

    def post_requests(self, ctx) -> None:
        n = self.slab.halo_bytes
        self._out = {}
        self._tickets = {}
        for side, peer in self._neighbors():
            buf = bytearray(n)
            ctx.send(peer, HALO_TAG, buf)
            self._out[side] = buf
            self._tickets[side] = ctx.receive(peer, HALO_TAG, n)

    def pack(self, ctx) -> None:
        for side, buf in self._out.items():
            buf[:] = self.slab.pack_halo(side)

    def update_interior(self, ctx) -> None:
        self.slab.update_rows(*self.slab.interior_range())

    def update_boundary(self, ctx) -> None:
        slab = self.slab
        for side, ticket in self._tickets.items():
            slab.unpack_halo(side, ticket.read())
        for r in slab.boundary_rows():
            slab.update_rows(r, r + 1)
        slab.finish_step()


# -- field dump --------------------------------------------------------------

_DUMP_HEADER = struct.Struct("<QQQ")


def dump_fields(path, rho, ux, uy, step: int) -> None:
    """Write ``nx, ny, step`` as u64 followed by rho, ux, uy as row-major float64."""
    rho = np.asarray(rho)
    ny, nx = rho.shape
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(nx, ny, step))
        for a in (rho, ux, uy):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_fields(path):
    with open(path, "rb") as fh:
        data = fh.read()
    nx, ny, step = _DUMP_HEADER.unpack_from(data, 0)
    arrays = np.frombuffer(data, dtype="<f8", offset=_DUMP_HEADER.size).reshape(3, ny, nx)
    return step, arrays[0].copy(), arrays[1].copy(), arrays[2].copy()
