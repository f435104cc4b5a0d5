"""Client registry and per-step phase orchestration.

Each step walks the phases of :class:`~coalesce.phase.Phase` in order.
Client callbacks run in the callback phases, sorted by (priority, client_id);
the communications manager acts in ReceivePost, SendPost and Wait. PreWait is
the overlap window: transfers are in flight while clients compute.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

from .comms import CommunicationsManager, DeliveryReport
from .errors import RegistrationError, StepError
from .phase import Phase

log = logging.getLogger(__name__)

COMM_PHASES = (Phase.RECEIVE_POST, Phase.SEND_POST, Phase.WAIT)


@dataclass(frozen=True)
class StepFilter:
    """Which steps a callback fires on: ``step % every == offset % every``,
    or membership in an explicit ``steps`` set when one is given."""

    every: int = 1
    offset: int = 0
    steps: frozenset | None = None

    def __post_init__(self):
        if self.every < 1:
            raise RegistrationError(f"step filter period must be >= 1, got {self.every}")

    def matches(self, step: int) -> bool:
        if self.steps is not None:
            return step in self.steps
        return step % self.every == self.offset % self.every

    @classmethod
    def evenly(cls, count: int, n_steps: int) -> "StepFilter":
        """``count`` firings spread evenly over ``range(n_steps)``, the last one on the final step."""
        if count < 0 or count > n_steps:
            raise RegistrationError(f"cannot fit {count} firings into {n_steps} steps")
        if count == 0:
            return cls(steps=frozenset())
        if n_steps % count == 0:
            k = n_steps // count
            return cls(every=k, offset=k - 1)
        return cls(steps=frozenset((j + 1) * n_steps // count - 1 for j in range(count)))


EVERY_STEP = StepFilter()


@dataclass(frozen=True)
class ActionRegistration:
    phase: Phase
    callback: Callable
    step_filter: StepFilter = EVERY_STEP
    priority: int = 0
    declared_cost_us: float = 0.0
    client_id: int | None = None


@dataclass
class CallbackContext:
    step: int
    phase: Phase
    client_id: int
    rank: int
    world_size: int
    comms: CommunicationsManager

    def send(self, peer: int, tag: int, payload) -> None:
        self.comms.request_send(self.client_id, peer, tag, payload)

    def receive(self, peer: int, tag: int, capacity: int):
        return self.comms.request_receive(self.client_id, peer, tag, capacity)


@dataclass(frozen=True)
class TraceEvent:
    step: int
    phase: Phase
    client: int | None
    event: str

    def format(self) -> str:
        client = "-" if self.client is None else self.client
        return f"step={self.step} phase={self.phase.label} client={client} event={self.event}"


def format_trace(events) -> str:
    return "".join(e.format() + "\n" for e in events)


@dataclass
class StepReport:
    step_index: int
    phase_us: dict
    delivery: DeliveryReport
    callback_counts: dict
    compute_us: float = 0.0
    vis_us: float = 0.0

    @property
    def total_us(self) -> float:
        return sum(self.phase_us.values())

    @property
    def comm_us(self) -> float:
        return sum(self.phase_us.get(p, 0.0) for p in COMM_PHASES)


@dataclass
class RunReport:
    rank: int
    mode: str
    overlap_credit: bool = False
    steps: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def total_us(self) -> float:
        return sum(s.total_us for s in self.steps)

    @property
    def comm_us(self) -> float:
        return sum(s.comm_us for s in self.steps)

    @property
    def compute_us(self) -> float:
        return sum(s.compute_us for s in self.steps)

    @property
    def vis_us(self) -> float:
        return sum(s.vis_us for s in self.steps)

    @property
    def sync_points(self) -> int:
        return sum(s.delivery.sync_points_used for s in self.steps)

    @property
    def messages_sent(self) -> int:
        return sum(s.delivery.messages_sent for s in self.steps)

    @property
    def bytes_on_wire(self) -> int:
        return sum(s.delivery.bytes_on_wire for s in self.steps)

    def callback_counts(self) -> dict:
        out: dict = {}
        for s in self.steps:
            for client, n in s.callback_counts.items():
                out[client] = out.get(client, 0) + n
        return out


@dataclass(frozen=True)
class _Client:
    client_id: int
    name: str
    vis: bool


class StepManager:
    """Runs the phase sequence for one rank.

    ``trace`` receives a :class:`TraceEvent` per callback, post and wait when a
    list is supplied. With ``overlap_credit`` the declared PreWait compute of a
    step is subtracted from its wait cost, up to that cost.
    """

    def __init__(self, comms: CommunicationsManager, *, trace: list | None = None,
                 overlap_credit: bool = False):
        self.comms = comms
        self.transport = comms.transport
        self.rank = comms.rank
        self.trace = trace
        self.overlap_credit = overlap_credit
        self.clients: list[_Client] = []
        self._actions: dict = {p: [] for p in Phase if not p.is_framework}
        self._started = False
        self._next_step = 0
        self.reports: list[StepReport] = []

    def register_client(self, registrations, *, vis: bool = False, name: str | None = None) -> int:
        if self._started:
            raise RegistrationError("clients must register before the run starts")
        client_id = len(self.clients)
        seen = set()
        stamped = []
        for reg in registrations:
            if not isinstance(reg.phase, Phase):
                raise RegistrationError(f"not a phase: {reg.phase!r}")
            if reg.phase.is_framework:
                raise RegistrationError(
                    f"{reg.phase.label} is a framework phase; clients cannot register callbacks there"
                )
            if reg.declared_cost_us < 0:
                raise RegistrationError("declared cost must be >= 0")
            key = (reg.phase, reg.priority)
            if key in seen:
                raise RegistrationError(
                    f"client {client_id} registered {reg.phase.label} twice at priority {reg.priority}"
                )
            seen.add(key)
            stamped.append(replace(reg, client_id=client_id))
        self.clients.append(_Client(client_id, name or f"client{client_id}", vis))
        for reg in stamped:
            actions = self._actions[reg.phase]
            actions.append(reg)
            actions.sort(key=lambda r: (r.priority, r.client_id))
        return client_id

    def _record(self, step, phase, client, event) -> None:
        if self.trace is not None:
            self.trace.append(TraceEvent(step, phase, client, event))

    def _run_callbacks(self, step, phase, report: StepReport) -> float:
        declared = 0.0
        for reg in self._actions[phase]:
            if not reg.step_filter.matches(step):
                continue
            ctx = CallbackContext(step, phase, reg.client_id, self.rank,
                                  self.transport.world_size, self.comms)
            t0 = self.transport.now(self.rank)
            try:
                reg.callback(ctx)
            except Exception as exc:
                raise StepError(
                    f"step {step}, phase {phase.label}, client {reg.client_id}: {exc}",
                    step=step, phase=phase, client_id=reg.client_id,
                ) from exc
            if self.transport.virtual:
                cost = reg.declared_cost_us
                self.transport.advance(self.rank, cost)
            else:
                cost = self.transport.now(self.rank) - t0
            declared += cost
            if self.clients[reg.client_id].vis:
                report.vis_us += cost
            else:
                report.compute_us += cost
            report.callback_counts[reg.client_id] = report.callback_counts.get(reg.client_id, 0) + 1
            self._record(step, phase, reg.client_id, "callback")
        return declared

    def run_step(self, step_index: int) -> StepReport:
        self._started = True
        comms = self.comms
        now = self.transport.now
        report = StepReport(step_index, {}, DeliveryReport(), {})
        comms.begin_step(step_index)
        prewait_us = 0.0
        for phase in Phase:
            t0 = now(self.rank)
            if phase.is_framework:
                try:
                    if phase == Phase.RECEIVE_POST:
                        comms.post_receives()
                        self._record(step_index, phase, None, "post")
                    elif phase == Phase.SEND_POST:
                        comms.post_sends()
                        self._record(step_index, phase, None, "post")
                    else:
                        credit = prewait_us if self.overlap_credit else 0.0
                        report.delivery = comms.complete(overlap_credit_us=credit)
                        for owner in report.delivery.waits:
                            self._record(step_index, phase, owner, "wait")
                except StepError:
                    raise
                except Exception as exc:
                    raise StepError(
                        f"step {step_index}, phase {phase.label}: {exc}",
                        step=step_index, phase=phase,
                    ) from exc
            else:
                comms.enter(phase)
                spent = self._run_callbacks(step_index, phase, report)
                if phase == Phase.PRE_WAIT:
                    prewait_us = spent
            report.phase_us[phase] = now(self.rank) - t0
        self.reports.append(report)
        return report

    def run(self, n_steps: int) -> RunReport:
        """Run ``n_steps`` further steps; a failure carries the partial report as ``exc.report``."""
        if n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        run = RunReport(self.rank, self.comms.mode, self.overlap_credit)
        for step in range(self._next_step, self._next_step + n_steps):
            try:
                run.steps.append(self.run_step(step))
            except StepError as exc:
                exc.report = run
                self._next_step = step + 1
                raise
        self._next_step += n_steps
        return run
