"""Coalesced-vs-direct benchmark: LBM + monitor + visualisation clients on N ranks.

Timings are virtual seconds from the in-process transport's cost model unless
the tcp transport is selected, in which case they are wall-clock seconds.
Communication time counts posting and waiting. With the causal clock option
it also includes time spent waiting on late senders.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import multiprocessing as mp
import os
import queue
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .comms import COALESCED, DIRECT, MODES, CommunicationsManager
from .errors import (
    ConfigurationError,
    DeadlockError,
    ShutdownError,
    TransportError,
    TransparencyViolation,
    UndefinedRatio,
)
from .lbm import LatticeSlab, LBMClient, dump_fields, initial_density
from .phase import Phase
from .steps import ActionRegistration, StepFilter, StepManager, format_trace
from .transport import CostModelParams, InProcTransport, TcpTransport, bind_listener
from .vis import ImageSink, VisClient

log = logging.getLogger(__name__)

MONITOR_TAG = 3
MONITOR_US = 1.0

CSV_COLUMNS = ["images", "mode", "total_s", "comm_s", "vis_s", "sync_points", "messages", "bytes"]


# -- report arithmetic -------------------------------------------------------

def overhead_ratio(coalesced_comm: float, direct_comm: float) -> float:
    """Coalesced communication time as a fraction of the direct one, to 3 decimals."""
    if not direct_comm > 0:
        raise UndefinedRatio(f"direct communication time must be positive, got {direct_comm}")
    return round(coalesced_comm / direct_comm, 3)


def per_image_vis_time(vis_time: float, images: int) -> float:
    if images <= 0:
        raise UndefinedRatio("per-image time is undefined without images")
    return vis_time / images


def monitor_reduce(values) -> float:
    """Global sum of one scalar per rank, correctly rounded regardless of order."""
    return math.fsum(values)


# -- monitor client ----------------------------------------------------------

class MonitorClient:
    """Gathers each rank's fluid mass on rank 0 every ``every`` steps."""

    _SCALAR = struct.Struct("<d")

    def __init__(self, slab: LatticeSlab, rank: int, world_size: int, every: int = 1):
        self.slab = slab
        self.rank = rank
        self.world_size = world_size
        self.step_filter = StepFilter(every=every, offset=0)
        self.history: list[tuple[int, float]] = []
        self._local = 0.0
        self._tickets: dict = {}

    def registrations(self) -> list[ActionRegistration]:
        regs = [ActionRegistration(Phase.REQUEST_POSTING, self.sample, self.step_filter,
                                   declared_cost_us=MONITOR_US)]
        if self.rank == 0:
            regs.append(ActionRegistration(Phase.POST_WAIT, self.reduce, self.step_filter,
                                           declared_cost_us=MONITOR_US))
        return regs

    def sample(self, ctx) -> None:
        self._local = self.slab.mass()
        if self.rank != 0:
            ctx.send(0, MONITOR_TAG, self._SCALAR.pack(self._local))
        else:
            self._tickets = {r: ctx.receive(r, MONITOR_TAG, self._SCALAR.size)
                             for r in range(1, self.world_size)}

    def reduce(self, ctx) -> None:
        values = [self._local] + [self._SCALAR.unpack(t.read())[0] for t in self._tickets.values()]
        total = monitor_reduce(values)
        self.history.append((ctx.step, total))
        log.debug("step %d: global mass %.17g", ctx.step, total)


# -- configuration -----------------------------------------------------------

@dataclass
class BenchConfig:
    ranks: int = 4
    steps: int = 2000
    images: tuple = (10,)
    mode: str = "both"
    transport: str = "inproc"
    alpha_us: float = 50.0
    beta_us_per_byte: float = 0.001
    sync_us: float = 100.0
    nx: int = 64
    ny: int = 64
    tau: float = 0.8
    force: float = 1e-5
    seed: int = 0
    monitor_every: int = 1  # 0 disables the monitor client
    overlap_credit: bool = False
    causal: bool = False
    timeout_s: float = 30.0
    out: str | None = None
    trace: str | None = None
    image_dir: str | None = None
    field_dump: str | None = None
    wall: bool = False

    def __post_init__(self):
        if isinstance(self.images, int):
            self.images = (self.images,)
        self.images = tuple(int(m) for m in self.images)

    def validate(self) -> None:
        if self.ranks < 1:
            raise ConfigurationError("ranks must be >= 1")
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        for m in self.images:
            if not 0 <= m <= self.steps:
                raise ConfigurationError(f"images={m} must lie in [0, steps={self.steps}]")
        if self.mode not in MODES + ("both",):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigurationError(f"unknown transport {self.transport!r}")
        if self.ny % self.ranks:
            raise ConfigurationError(f"ny={self.ny} must be divisible by ranks={self.ranks}")
        if self.nx < 1 or self.ny < 3:
            raise ConfigurationError("grid needs nx >= 1 and ny >= 3")
        if self.tau <= 0.5:
            raise ConfigurationError("tau must exceed 0.5")
        if self.monitor_every < 0:
            raise ConfigurationError("monitor_every must be >= 0")
        self.cost()

    def cost(self) -> CostModelParams:
        return CostModelParams(self.alpha_us, self.beta_us_per_byte, self.sync_us)

    @property
    def modes(self) -> tuple:
        return (COALESCED, DIRECT) if self.mode == "both" else (self.mode,)


# -- running one world -------------------------------------------------------

@dataclass
class RankResult:
    rank: int
    run: object  # RunReport
    populations: np.ndarray
    rho: np.ndarray
    ux: np.ndarray
    uy: np.ndarray
    step: int
    monitor: list = field(default_factory=list)
    images: list = field(default_factory=list)
    trace: list = field(default_factory=list)


@dataclass
class WorldResult:
    mode: str
    images: int
    ranks: list  # RankResult per rank
    wall_s: float

    def global_field(self, name: str) -> np.ndarray:
        axis = 1 if name == "populations" else 0
        return np.concatenate([getattr(r, name) for r in self.ranks], axis=axis)

    @property
    def runs(self) -> list:
        return [r.run for r in self.ranks]


def _build_rank(config: BenchConfig, mode: str, images: int, rank: int, transport, trace):
    rho = initial_density(config.nx, config.ny, config.seed)
    slab = LatticeSlab.for_rank(rho, rank, config.ranks, tau=config.tau, force=config.force)
    comms = CommunicationsManager(rank, transport, mode)
    manager = StepManager(comms, trace=trace, overlap_credit=config.overlap_credit)
    lbm = LBMClient(slab, rank, config.ranks)
    manager.register_client(lbm.registrations(), name="lbm")
    monitor = None
    if config.monitor_every:
        monitor = MonitorClient(slab, rank, config.ranks, config.monitor_every)
        manager.register_client(monitor.registrations(), name="monitor")
    image_dir = config.image_dir if rank == 0 else None
    if image_dir is not None and len(config.modes) * len(config.images) > 1:
        image_dir = os.path.join(image_dir, f"{mode}_{images}")
    vis = VisClient(slab, rank, config.ranks, StepFilter.evenly(images, config.steps),
                    ImageSink(image_dir))
    manager.register_client(vis.registrations(), vis=True, name="vis")
    return manager, slab, monitor, vis


def _run_rank(config, mode, images, rank, transport) -> RankResult:
    trace = [] if config.trace and rank == 0 else None
    manager, slab, monitor, vis = _build_rank(config, mode, images, rank, transport, trace)
    run = manager.run(config.steps)
    vis.sink.close()
    return RankResult(
        rank, run, slab.populations(), slab.rho.copy(), slab.ux.copy(), slab.uy.copy(), slab.step,
        monitor.history if monitor else [], vis.sink.images, trace or [],
    )


def _primary_error(errors):
    """The first failure that was not merely a consequence of another rank aborting."""
    def is_secondary(e):
        return isinstance(e, ShutdownError) or isinstance(getattr(e, "__cause__", None), ShutdownError)
    for e in errors:
        if not is_secondary(e):
            return e
    return errors[0]


def run_world(config: BenchConfig, mode: str, images: int) -> WorldResult:
    config.validate()
    t0 = time.perf_counter()
    if config.transport == "tcp":
        results = _run_world_tcp(config, mode, images)
    else:
        results = _run_world_inproc(config, mode, images)
    return WorldResult(mode, images, results, time.perf_counter() - t0)


def _run_world_inproc(config, mode, images) -> list[RankResult]:
    transport = InProcTransport(config.ranks, cost=config.cost(), timeout_s=config.timeout_s,
                                causal=config.causal)

    def work(rank):
        try:
            return _run_rank(config, mode, images, rank, transport)
        except BaseException as exc:
            transport.abort(exc)
            raise

    with transport, ThreadPoolExecutor(max_workers=config.ranks) as pool:
        futures = [pool.submit(work, r) for r in range(config.ranks)]
        errors = [f.exception() for f in futures if f.exception() is not None]
        if errors:
            raise _primary_error(errors)
        return [f.result() for f in futures]


def _tcp_rank_main(config, mode, images, rank, hello_q, plan_q, result_q):
    listener, endpoint = bind_listener()
    hello_q.put((rank, endpoint))
    endpoints = plan_q.get()
    transport = TcpTransport(config.ranks, local_ranks=[rank], endpoints=endpoints,
                             listeners={rank: listener}, cost=config.cost(),
                             timeout_s=config.timeout_s)
    try:
        result = _run_rank(config, mode, images, rank, transport)
        result_q.put(("ok", rank, result))
    except BaseException as exc:
        result_q.put(("error", rank, exc))
    plan_q.get()  # wait until every rank has finished before tearing sockets down
    transport.close()


def _collect(q, procs, limit_s: float) -> list:
    """One item per process from ``q``; fails early if a process dies without reporting."""
    items = []
    deadline = time.monotonic() + limit_s
    while len(items) < len(procs):
        try:
            items.append(q.get(timeout=0.2))
            continue
        except queue.Empty:
            pass
        dead = [p for p in procs if p.exitcode not in (None, 0)]
        if dead:
            raise TransportError(f"rank process {dead[0].name} exited with code {dead[0].exitcode}")
        if time.monotonic() > deadline:
            raise DeadlockError(f"no report from {len(procs) - len(items)} rank processes "
                                f"after {limit_s:g}s")
    return items


def _run_world_tcp(config, mode, images) -> list[RankResult]:
    ctx = mp.get_context("spawn")
    hello_q = ctx.Queue()
    result_q = ctx.Queue()
    plan_qs = [ctx.Queue() for _ in range(config.ranks)]
    procs = [
        ctx.Process(target=_tcp_rank_main,
                    args=(config, mode, images, r, hello_q, plan_qs[r], result_q), daemon=True)
        for r in range(config.ranks)
    ]
    for p in procs:
        p.start()
    try:
        limit = config.timeout_s + 60
        endpoints = dict(_collect(hello_q, procs, limit))
        for q in plan_qs:
            q.put(endpoints)
        outcomes = _collect(result_q, procs, limit + config.timeout_s * max(config.steps, 1))
    finally:
        for q in plan_qs:
            q.put("exit")
        for p in procs:
            p.join(timeout=10)
            if p.is_alive():
                p.terminate()
    errors = [payload for status, _, payload in outcomes if status == "error"]
    if errors:
        raise _primary_error(errors)
    return [payload for _, _, payload in sorted(outcomes, key=lambda o: o[1])]


# -- rows, transparency and output -------------------------------------------

@dataclass
class BenchRow:
    images: int
    mode: str
    total_time: float
    comm_time: float
    vis_time: float
    sync_points: int
    messages: int
    bytes: int
    wall_time: float = 0.0

    @classmethod
    def from_world(cls, world: WorldResult) -> "BenchRow":
        runs = world.runs
        n = len(runs)
        return cls(
            images=world.images,
            mode=world.mode,
            total_time=max(r.total_us for r in runs) / 1e6,
            comm_time=sum(r.comm_us for r in runs) / n / 1e6,
            vis_time=sum(r.vis_us for r in runs) / n / 1e6,
            sync_points=max(r.sync_points for r in runs),
            messages=sum(r.messages_sent for r in runs),
            bytes=sum(r.bytes_on_wire for r in runs),
            wall_time=world.wall_s,
        )


def check_transparency(a: WorldResult, b: WorldResult) -> None:
    """Both runs must leave bit-identical simulation state and client outputs."""
    for name in ("populations", "rho", "ux", "uy"):
        if not np.array_equal(a.global_field(name), b.global_field(name)):
            diff = np.argwhere(a.global_field(name) != b.global_field(name))
            raise TransparencyViolation(
                f"{name} differs between {a.mode} and {b.mode} runs at {len(diff)} entries, "
                f"first at index {tuple(diff[0])}"
            )
    if a.ranks[0].monitor != b.ranks[0].monitor:
        raise TransparencyViolation(f"monitor history differs between {a.mode} and {b.mode}")
    imgs_a, imgs_b = a.ranks[0].images, b.ranks[0].images
    if [s for s, _ in imgs_a] != [s for s, _ in imgs_b] or not all(
        np.array_equal(x, y) for (_, x), (_, y) in zip(imgs_a, imgs_b)
    ):
        raise TransparencyViolation(f"images differ between {a.mode} and {b.mode}")


def _sig3(x: float) -> str:
    return f"{x:.3g}"


def rows_to_csv(rows, wall: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS + (["wall_s"] if wall else []))
    for r in rows:
        line = [r.images, r.mode, _sig3(r.total_time), _sig3(r.comm_time), _sig3(r.vis_time),
                r.sync_points, r.messages, r.bytes]
        if wall:
            line.append(f"{r.wall_time:.3f}")
        writer.writerow(line)
    return buf.getvalue()


def render_table(rows, config: BenchConfig | None = None) -> str:
    """Text table with one row per (images, mode) run, followed by the ratio lines."""
    unit = "s" if config is None or config.transport == "inproc" else "s wall"
    lines = []
    if config is not None:
        clock = "virtual" if config.transport == "inproc" else "wall-clock"
        lines.append(
            f"# {config.ranks} ranks, {config.steps} steps, grid {config.nx}x{config.ny}, "
            f"{clock} time; alpha={config.alpha_us:g}us beta={config.beta_us_per_byte:g}us/B "
            f"sync={config.sync_us:g}us"
        )
        notes = ["comm time = posting + wait", "total = slowest rank", "comm, vis = mean over ranks"]
        if config.causal and config.transport == "inproc":
            notes.append("causal clock: waits include idle time on late senders")
        notes.append("overlap credit " + ("on" if config.overlap_credit else "off"))
        lines.append("# " + "; ".join(notes))
    header = (f"{'# of images':>11}  {'Coalesced Comm.':<15}  {'Total time':>10}  "
              f"{'Comm. time':>10}  {'Vis. time':>10}  {'sync pts':>8}  {'messages':>9}")
    lines.append(header)
    lines.append(f"{'':>11}  {'':<15}  {'[' + unit + ']':>10}  {'[' + unit + ']':>10}  "
                 f"{'[' + unit + ']':>10}")
    lines.append("-" * len(header))
    by_images: dict = {}
    for r in rows:
        by_images.setdefault(r.images, {})[r.mode] = r
        label = "enabled" if r.mode == COALESCED else "disabled"
        lines.append(f"{r.images:>11}  {label:<15}  {_sig3(r.total_time):>10}  "
                     f"{_sig3(r.comm_time):>10}  {_sig3(r.vis_time):>10}  "
                     f"{r.sync_points:>8}  {r.messages:>9}")
    ratios = []
    for m, pair in by_images.items():
        if COALESCED in pair and DIRECT in pair:
            c = float(_sig3(pair[COALESCED].comm_time))
            d = float(_sig3(pair[DIRECT].comm_time))
            ratios.append(f"# images={m}: comm overhead ratio coalesced/direct = "
                          f"{overhead_ratio(c, d):.3f}")
        for r in pair.values():
            if m > 0:
                ratios.append(f"# images={m} {r.mode}: vis time per image = "
                              f"{per_image_vis_time(r.vis_time, m):.3g} {unit}")
    lines.append("-" * len(header))
    lines.extend(ratios)
    return "\n".join(lines) + "\n"


def _trace_path(config: BenchConfig, mode: str, images: int) -> str:
    if len(config.modes) * len(config.images) == 1:
        return config.trace
    stem, ext = os.path.splitext(config.trace)
    return f"{stem}.{mode}_{images}{ext}"


def run_bench(config: BenchConfig) -> list[BenchRow]:
    """Run every (images, mode) combination; with both modes, enforce field equality."""
    config.validate()
    rows = []
    for images in config.images:
        worlds = []
        for mode in config.modes:
            world = run_world(config, mode, images)
            worlds.append(world)
            rows.append(BenchRow.from_world(world))
            if config.trace:
                with open(_trace_path(config, mode, images), "w") as fh:
                    fh.write(format_trace(world.ranks[0].trace))
            if config.field_dump:
                path = config.field_dump
                if len(config.modes) * len(config.images) > 1:
                    stem, ext = os.path.splitext(path)
                    path = f"{stem}.{mode}_{images}{ext}"
                dump_fields(path, world.global_field("rho"), world.global_field("ux"),
                            world.global_field("uy"), world.ranks[0].step)
        if len(worlds) == 2:
            check_transparency(*worlds)
            log.info("images=%d: coalesced and direct fields are bit-identical", images)
    if config.out:
        with open(config.out, "w", newline="") as fh:
            fh.write(rows_to_csv(rows, wall=config.wall))
    return rows


__all__ = [
    "BenchConfig",
    "BenchRow",
    "MonitorClient",
    "RankResult",
    "WorldResult",
    "check_transparency",
    "monitor_reduce",
    "overhead_ratio",
    "per_image_vis_time",
    "render_table",
    "rows_to_csv",
    "run_bench",
    "run_world",
]
