from __future__ import annotations

from ..errors import ConfigurationError
from .base import (
    DEFAULT_TIMEOUT_S,
    RECEIVE,
    SEND,
    CostModelParams,
    Transport,
    TransferHandle,
    WaitResult,
)
from .inproc import InProcTransport
from .tcp import TcpTransport, bind_listener

TRANSPORTS = ("inproc", "tcp")


def make_transport(kind: str, world_size: int, **kwargs) -> Transport:
    if kind == "inproc":
        return InProcTransport(world_size, **kwargs)
    if kind == "tcp":
        kwargs.pop("causal", None)
        return TcpTransport(world_size, **kwargs)
    raise ConfigurationError(f"unknown transport {kind!r}; expected one of {TRANSPORTS}")


__all__ = [
    "CostModelParams",
    "DEFAULT_TIMEOUT_S",
    "InProcTransport",
    "RECEIVE",
    "SEND",
    "TcpTransport",
    "Transport",
    "TransferHandle",
    "WaitResult",
    "bind_listener",
    "make_transport",
]
