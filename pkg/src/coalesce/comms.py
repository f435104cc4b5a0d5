"""Central store of per-step communication requests.

Clients register sends and receive buffers while the step is in its
request-posting phase. The manager then posts every receive, every send and
finally completes the whole batch. In ``"coalesced"`` mode all traffic to one
peer travels as a single envelope and the step has one wait; in ``"direct"``
mode every request is its own message and each client waits separately, which
is the baseline the coalesced mode is measured against.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from . import wire
from .errors import (
    BufferNotReady,
    ConfigurationError,
    DuplicateRequest,
    PhaseViolation,
    RoutingError,
    ShutdownError,
    TruncationError,
)
from .phase import Phase
from .transport import RECEIVE, SEND, Transport, TransferHandle

COALESCED = "coalesced"
DIRECT = "direct"
MODES = (COALESCED, DIRECT)


@dataclass(frozen=True)
class CommRequest:
    client_id: int
    direction: str
    peer: int
    tag: int
    payload: bytes | None = None
    capacity: int = 0


class BufferTicket:
    """A receive buffer that becomes readable once the step's wait has finished."""

    def __init__(self, client_id: int, peer: int, tag: int, capacity: int):
        self.client_id = client_id
        self.peer = peer
        self.tag = tag
        self.capacity = capacity
        self._data: bytes | None = None

    @property
    def ready(self) -> bool:
        return self._data is not None

    def read(self) -> bytes:
        if self._data is None:
            raise BufferNotReady(
                f"buffer for client {self.client_id} tag {self.tag} from rank {self.peer} "
                "is not readable before the wait completes"
            )
        return self._data

    def _fill(self, data: bytes) -> None:
        if len(data) > self.capacity:
            raise TruncationError(
                f"client {self.client_id} tag {self.tag} from rank {self.peer}: "
                f"{len(data)} bytes into a {self.capacity}-byte buffer"
            )
        self._data = data

    def __repr__(self):
        state = "ready" if self.ready else "pending"
        return f"BufferTicket(client={self.client_id}, peer={self.peer}, tag={self.tag}, {state})"


@dataclass
class PostedBatch:
    mode: str
    handles: list[TransferHandle] = field(default_factory=list)
    # client id owning each handle in direct mode, None for a shared envelope
    owners: list[int | None] = field(default_factory=list)
    routing: dict[tuple[int, int, int], BufferTicket] = field(default_factory=dict)

    @property
    def send_handles(self) -> list[TransferHandle]:
        return [h for h in self.handles if h.direction == SEND]

    @property
    def receive_handles(self) -> list[TransferHandle]:
        return [h for h in self.handles if h.direction == RECEIVE]


@dataclass
class DeliveryReport:
    received_bytes: dict[int, int] = field(default_factory=dict)
    sync_points_used: int = 0
    messages_sent: int = 0
    bytes_on_wire: int = 0
    comm_us: float = 0.0
    # one entry per wait performed: the client id in direct mode, None when coalesced
    waits: list = field(default_factory=list)

    def counters(self) -> dict[str, int]:
        return {
            "sync_points": self.sync_points_used,
            "messages_sent": self.messages_sent,
            "bytes_on_wire": self.bytes_on_wire,
        }


def coalesce(requests, step_index: int):
    """Group requests by peer.

    Returns ``(sends, receives)``: ``sends`` maps each destination peer to one
    envelope, ``receives`` maps each source peer to the sorted list of
    ``(client_id, tag, capacity)`` it is expected to deliver. Both maps iterate
    in ascending peer order, whatever order the requests were registered in.
    """
    outgoing = defaultdict(list)
    incoming = defaultdict(list)
    for req in requests:
        if req.direction == SEND:
            outgoing[req.peer].append(wire.SubMessage(req.client_id, req.tag, bytes(req.payload)))
        else:
            incoming[req.peer].append((req.client_id, req.tag, req.capacity))
    sends = {peer: wire.Envelope.build(step_index, outgoing[peer]) for peer in sorted(outgoing)}
    receives = {peer: sorted(incoming[peer]) for peer in sorted(incoming)}
    return sends, receives


class CommunicationsManager:
    """Per-rank request store; see the module docstring for the step protocol."""

    def __init__(self, rank: int, transport: Transport, mode: str = COALESCED):
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
        transport._check_rank(rank)
        self.rank = rank
        self.transport = transport
        self.mode = mode
        self.phase = Phase.END_STEP
        self.step_index: int | None = None
        self._requests: list[CommRequest] = []
        self._keys: set = set()
        self._tickets: dict[tuple[int, int, int], BufferTicket] = {}
        self._batch: PostedBatch | None = None
        self._sends_posted = False

    # -- request phase -------------------------------------------------------

    def begin_step(self, step_index: int) -> None:
        self.step_index = step_index
        self.phase = Phase.REQUEST_POSTING
        self._requests = []
        self._keys = set()
        self._tickets = {}
        self._batch = None
        self._sends_posted = False

    def enter(self, phase: Phase) -> None:
        self.phase = phase

    def _admit(self, direction, client_id, peer, tag) -> None:
        if self.phase != Phase.REQUEST_POSTING:
            raise PhaseViolation(
                f"client {client_id} registered a {direction} during {self.phase.label}; "
                "requests are accepted only in RequestPosting"
            )
        if peer == self.rank:
            raise ConfigurationError(f"client {client_id} addressed its own rank {peer}")
        self.transport._check_rank(peer)
        key = (direction, peer, client_id, tag)
        if key in self._keys:
            raise DuplicateRequest(
                f"client {client_id} already registered a {direction} with tag {tag} "
                f"for rank {peer} this step"
            )
        self._keys.add(key)

    def request_send(self, client_id: int, peer: int, tag: int, payload) -> None:
        """Queue ``payload`` for ``peer``.

        The payload is read when sends are posted, so a ``bytearray`` registered
        here may still be filled by a later pre-send callback.
        """
        self._admit(SEND, client_id, peer, tag)
        self._requests.append(CommRequest(client_id, SEND, peer, tag, payload=payload))

    def request_receive(self, client_id: int, peer: int, tag: int, capacity: int) -> BufferTicket:
        if capacity <= 0:
            raise ConfigurationError(f"receive capacity must be positive, got {capacity}")
        self._admit(RECEIVE, client_id, peer, tag)
        self._requests.append(CommRequest(client_id, RECEIVE, peer, tag, capacity=capacity))
        ticket = BufferTicket(client_id, peer, tag, capacity)
        self._tickets[(peer, client_id, tag)] = ticket
        return ticket

    @property
    def requests(self) -> list[CommRequest]:
        return list(self._requests)

    # -- posting -------------------------------------------------------------

    def _post(self, fn, peer, *args) -> TransferHandle:
        try:
            return fn(self.rank, peer, *args)
        except (ShutdownError, ConfigurationError) as exc:
            raise type(exc)(f"posting to rank {peer}: {exc}") from exc

    def post_receives(self) -> PostedBatch:
        if self.step_index is None or self._batch is not None:
            raise PhaseViolation("receives already posted or no step in progress")
        self.phase = Phase.RECEIVE_POST
        batch = PostedBatch(self.mode, routing=dict(self._tickets))
        recvs = sorted(
            (r for r in self._requests if r.direction == RECEIVE),
            key=lambda r: (r.peer, r.client_id, r.tag),
        )
        if self.mode == COALESCED:
            _, shapes = coalesce(recvs, self.step_index)
            for peer, expected in shapes.items():
                capacity = wire.encoded_size(cap for _, _, cap in expected)
                batch.handles.append(self._post(self.transport.post_receive, peer, capacity))
                batch.owners.append(None)
        else:
            for r in recvs:
                capacity = wire.encoded_size([r.capacity])
                batch.handles.append(self._post(self.transport.post_receive, r.peer, capacity))
                batch.owners.append(r.client_id)
        self._batch = batch
        return batch

    def post_sends(self) -> PostedBatch:
        if self._batch is None or self._sends_posted:
            raise PhaseViolation("sends must follow posted receives, once per step")
        self.phase = Phase.SEND_POST
        batch = self._batch
        snapshot = [
            CommRequest(r.client_id, SEND, r.peer, r.tag, payload=bytes(r.payload))
            for r in self._requests if r.direction == SEND
        ]
        if self.mode == COALESCED:
            envelopes, _ = coalesce(snapshot, self.step_index)
            for peer, env in envelopes.items():
                batch.handles.append(self._post(self.transport.post_send, peer, wire.encode(env)))
                batch.owners.append(None)
        else:
            for r in sorted(snapshot, key=lambda r: (r.peer, r.client_id, r.tag)):
                env = wire.Envelope(self.step_index, (wire.SubMessage(r.client_id, r.tag, r.payload),))
                batch.handles.append(self._post(self.transport.post_send, r.peer, wire.encode(env)))
                batch.owners.append(r.client_id)
        self._sends_posted = True
        return batch

    def post_all(self) -> PostedBatch:
        """Post receives, then sends."""
        self.post_receives()
        return self.post_sends()

    # -- completion ----------------------------------------------------------

    def complete(self, *, overlap_credit_us: float = 0.0) -> DeliveryReport:
        if not self._sends_posted:
            raise PhaseViolation("complete() called before the batch was posted")
        self.phase = Phase.WAIT
        batch = self._batch
        report = DeliveryReport(received_bytes={})
        sends = batch.send_handles
        report.messages_sent = len(sends)
        report.bytes_on_wire = sum(h.size for h in sends)

        if self.mode == COALESCED:
            groups = [(None, batch.handles)] if batch.handles else []
        else:
            by_client = defaultdict(list)
            for h, owner in zip(batch.handles, batch.owners):
                by_client[owner].append(h)
            groups = [(c, by_client[c]) for c in sorted(by_client)]

        credit = overlap_credit_us
        for owner, handles in groups:
            result = self.transport.wait_all(self.rank, handles, overlap_credit_us=credit)
            credit -= result.credit_used_us
            report.sync_points_used += 1
            report.waits.append(owner)
            report.comm_us += result.elapsed_us
            for h, data in zip(handles, result.payloads):
                if h.direction == RECEIVE:
                    self._route(h.peer, data, batch.routing, report)

        for ticket in batch.routing.values():
            if not ticket.ready:
                raise RoutingError(
                    f"expected sub-message (client {ticket.client_id}, tag {ticket.tag}) "
                    f"from rank {ticket.peer} was not delivered in step {self.step_index}"
                )
        return report

    def _route(self, peer, data, routing, report) -> None:
        env = wire.decode(data)
        if env.step_index != self.step_index:
            raise RoutingError(
                f"envelope from rank {peer} is for step {env.step_index}, "
                f"expected {self.step_index}"
            )
        for sub in env.sub_messages:
            ticket = routing.get((peer, sub.client_id, sub.tag))
            if ticket is None:
                raise RoutingError(
                    f"no receive registered for (client {sub.client_id}, tag {sub.tag}) "
                    f"from rank {peer}"
                )
            ticket._fill(sub.payload)
            report.received_bytes[sub.client_id] = (
                report.received_bytes.get(sub.client_id, 0) + len(sub.payload)
            )


__all__ = [
    "BufferTicket",
    "COALESCED",
    "CommRequest",
    "CommunicationsManager",
    "DIRECT",
    "DeliveryReport",
    "MODES",
    "PostedBatch",
    "coalesce",
]
