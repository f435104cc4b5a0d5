from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from ..errors import (
    ConfigurationError,
    DeadlockError,
    ShutdownError,
    TransportError,
    TruncationError,
)

SEND = "send"
RECEIVE = "receive"

DEFAULT_TIMEOUT_S = 30.0


@dataclass(frozen=True)
class CostModelParams:
    """Per-message latency, per-byte cost and per-wait cost, all in microseconds."""

    alpha_us: float = 50.0
    beta_us_per_byte: float = 0.001
    sync_us: float = 100.0

    def __post_init__(self):
        for name in ("alpha_us", "beta_us_per_byte", "sync_us"):
            value = getattr(self, name)
            if not value >= 0:
                raise ConfigurationError(f"{name} must be >= 0, got {value!r}")

    def message_us(self, nbytes: int) -> float:
        return self.alpha_us + self.beta_us_per_byte * nbytes


_handle_ids = itertools.count()


@dataclass(eq=False)
class TransferHandle:
    direction: str
    owner: int
    peer: int
    size: int  # payload bytes for sends, capacity for receives
    id: int = field(default_factory=lambda: next(_handle_ids))
    state: str = "pending"
    _matched: bool = field(default=False, repr=False)
    _data: bytes | None = field(default=None, repr=False)
    _error: Exception | None = field(default=None, repr=False)
    _stamp_us: float = field(default=0.0, repr=False)

    @property
    def payload(self) -> bytes | None:
        """Received bytes once the handle has completed."""
        if self.state != "complete" or self.direction != RECEIVE:
            return None
        return self._data

    @property
    def nbytes(self) -> int:
        if self.direction == SEND:
            return self.size
        return len(self._data) if self._data is not None else 0

    def describe(self) -> str:
        arrow = "->" if self.direction == SEND else "<-"
        return f"{self.direction} #{self.id} rank {self.owner} {arrow} rank {self.peer}"


@dataclass
class WaitResult:
    payloads: list  # one entry per handle; None for sends
    elapsed_us: float
    credit_used_us: float = 0.0


@dataclass
class _Message:
    payload: bytes
    stamp_us: float
    sender: TransferHandle | None = None


class _Matcher:
    """FIFO pairing of messages and receives per ordered (src, dst) pair.

    Callers hold the owning transport's lock.
    """

    def __init__(self):
        self.messages: dict[tuple[int, int], deque] = {}
        self.receives: dict[tuple[int, int], deque] = {}

    def offer_message(self, src: int, dst: int, msg: _Message) -> None:
        waiting = self.receives.get((src, dst))
        if waiting:
            self._match(waiting.popleft(), msg)
        else:
            self.messages.setdefault((src, dst), deque()).append(msg)

    def offer_receive(self, handle: TransferHandle) -> None:
        queued = self.messages.get((handle.peer, handle.owner))
        if queued:
            self._match(handle, queued.popleft())
        else:
            self.receives.setdefault((handle.peer, handle.owner), deque()).append(handle)

    @staticmethod
    def _match(recv: TransferHandle, msg: _Message) -> None:
        recv._data = msg.payload
        recv._stamp_us = msg.stamp_us
        if len(msg.payload) > recv.size:
            recv._error = TruncationError(
                f"rank {recv.owner} received {len(msg.payload)} bytes from rank "
                f"{recv.peer} into a {recv.size}-byte buffer"
            )
        recv._matched = True
        if msg.sender is not None:
            msg.sender._matched = True

    def outstanding(self) -> list[str]:
        out = []
        for (src, dst), q in sorted(self.messages.items()):
            out.extend(f"unreceived message rank {src} -> rank {dst} ({len(m.payload)} B)" for m in q)
        for (src, dst), q in sorted(self.receives.items()):
            out.extend(h.describe() for h in q)
        return out


class Transport:
    """Non-blocking point-to-point byte transport shared by ``world_size`` ranks.

    Subclasses provide ``_deliver`` and the clock; matching and ``wait_all``
    are common.
    """

    virtual = False
    name = "base"

    def __init__(self, world_size: int, *, cost: CostModelParams | None = None,
                 timeout_s: float = DEFAULT_TIMEOUT_S):
        if world_size < 1:
            raise ConfigurationError(f"world_size must be >= 1, got {world_size}")
        if not timeout_s > 0:
            raise ConfigurationError("timeout_s must be positive")
        self.world_size = world_size
        self.cost = cost or CostModelParams()
        self.timeout_s = timeout_s
        self._cond = threading.Condition()
        self._matcher = _Matcher()
        self._closed = False
        self._abort_reason: BaseException | None = None
        self._sync_points = [0] * world_size

    # -- validation ----------------------------------------------------------

    def _check_rank(self, rank: int) -> None:
        if not (isinstance(rank, int) and 0 <= rank < self.world_size):
            raise ConfigurationError(f"unknown rank {rank!r} (world size {self.world_size})")

    def _check_open(self) -> None:
        if self._abort_reason is not None:
            raise ShutdownError(f"transport aborted: {self._abort_reason}")
        if self._closed:
            raise ShutdownError("transport is closed")

    def _check_pair(self, a: int, b: int) -> None:
        self._check_rank(a)
        self._check_rank(b)
        if a == b:
            raise ConfigurationError(f"rank {a} cannot message itself")
        self._check_open()

    # -- public operations ---------------------------------------------------

    def post_send(self, src: int, dst: int, payload) -> TransferHandle:
        self._check_pair(src, dst)
        data = bytes(payload)
        handle = TransferHandle(SEND, src, dst, len(data))
        self._deliver(handle, data)
        return handle

    def post_receive(self, at: int, src: int, capacity: int) -> TransferHandle:
        self._check_pair(at, src)
        if capacity < 0:
            raise ConfigurationError("receive capacity must be >= 0")
        handle = TransferHandle(RECEIVE, at, src, int(capacity))
        with self._cond:
            self._matcher.offer_receive(handle)
            self._cond.notify_all()
        return handle

    def wait_all(self, rank: int, handles, *, overlap_credit_us: float = 0.0) -> WaitResult:
        self._check_rank(rank)
        handles = list(handles)
        for h in handles:
            if h.owner != rank:
                raise TransportError(f"{h.describe()} is not owned by rank {rank}")
            if h.state != "pending":
                raise TransportError(f"{h.describe()} already completed")
        start = self.now(rank)
        deadline = time.monotonic() + self.timeout_s
        with self._cond:
            while True:
                if self._abort_reason is not None:
                    raise ShutdownError(f"transport aborted: {self._abort_reason}")
                for h in handles:
                    if h._error is not None:
                        raise h._error
                unmatched = [h for h in handles if not h._matched]
                if not unmatched:
                    break
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    lines = [h.describe() for h in unmatched]
                    raise DeadlockError(
                        f"rank {rank} waited {self.timeout_s:g}s; unmatched: " + "; ".join(lines),
                        unmatched,
                    )
                self._cond.wait(remaining)
            for h in handles:
                h.state = "complete"
            self._sync_points[rank] += 1
        elapsed, credit = self._charge_wait(rank, handles, start, overlap_credit_us)
        return WaitResult([h.payload for h in handles], elapsed, credit)

    def sync_points(self, rank: int) -> int:
        return self._sync_points[rank]

    def outstanding(self) -> list[str]:
        with self._cond:
            return self._matcher.outstanding()

    def abort(self, reason: BaseException) -> None:
        """Wake every blocked rank with a ShutdownError."""
        with self._cond:
            if self._abort_reason is None:
                self._abort_reason = reason
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- clock ---------------------------------------------------------------

    def now(self, rank: int) -> float:
        raise NotImplementedError

    def advance(self, rank: int, us: float) -> None:
        """Charge declared compute time; only meaningful for virtual clocks."""

    def _charge_wait(self, rank, handles, start_us, overlap_credit_us) -> tuple[float, float]:
        """Advance the clock past a finished wait; return (elapsed_us, credit_used_us)."""
        raise NotImplementedError

    def _deliver(self, handle: TransferHandle, data: bytes) -> None:
        raise NotImplementedError
