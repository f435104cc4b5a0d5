from __future__ import annotations

from ..errors import ConfigurationError
from .base import RECEIVE, CostModelParams, Transport, TransferHandle, _Message, DEFAULT_TIMEOUT_S


class InProcTransport(Transport):
    """In-process transport with a deterministic per-rank virtual clock.

    ``wait_all`` charges ``sync_us + sum(alpha_us + beta_us_per_byte * bytes)``
    over its handles. With ``causal=True`` a receive also cannot
    complete before its message was sent: the wait ends no earlier than the
    sender's clock at posting time plus that message's transfer cost. Any time
    spent waiting for a late sender is therefore reported as communication.
    """

    virtual = True
    name = "inproc"

    def __init__(self, world_size: int, *, cost: CostModelParams | None = None,
                 timeout_s: float = DEFAULT_TIMEOUT_S, causal: bool = False):
        super().__init__(world_size, cost=cost, timeout_s=timeout_s)
        self.causal = causal
        self._clock = [0.0] * world_size

    def now(self, rank: int) -> float:
        return self._clock[rank]

    def advance(self, rank: int, us: float) -> None:
        if us < 0:
            raise ConfigurationError(f"cannot advance a clock by {us} us")
        self._clock[rank] += us

    def _deliver(self, handle: TransferHandle, data: bytes) -> None:
        msg = _Message(data, self._clock[handle.owner], sender=handle)
        with self._cond:
            self._matcher.offer_message(handle.owner, handle.peer, msg)
            self._cond.notify_all()

    def _charge_wait(self, rank, handles, start_us, overlap_credit_us):
        cost = self.cost.sync_us
        for h in handles:
            cost += self.cost.message_us(h.nbytes)
        credit = min(max(overlap_credit_us, 0.0), cost)
        done = start_us + cost - credit
        if self.causal:
            for h in handles:
                if h.direction == RECEIVE:
                    done = max(done, h._stamp_us + self.cost.message_us(h.nbytes))
        self._clock[rank] = done
        return done - start_us, credit
