"""Coalesced per-step communication for multi-client parallel simulations."""

from .comms import COALESCED, DIRECT, BufferTicket, CommunicationsManager, DeliveryReport
from .errors import CoalesceError
from .phase import Phase
from .steps import ActionRegistration, RunReport, StepFilter, StepManager, StepReport
from .transport import CostModelParams, InProcTransport, TcpTransport, make_transport
from .wire import Envelope, SubMessage, decode, encode

__version__ = "0.1.0"

__all__ = [
    "ActionRegistration",
    "BufferTicket",
    "COALESCED",
    "CoalesceError",
    "CommunicationsManager",
    "CostModelParams",
    "DIRECT",
    "DeliveryReport",
    "Envelope",
    "InProcTransport",
    "Phase",
    "RunReport",
    "StepFilter",
    "StepManager",
    "StepReport",
    "SubMessage",
    "TcpTransport",
    "decode",
    "encode",
    "make_transport",
]
