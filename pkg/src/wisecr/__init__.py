"""Secure simultaneous firmware dissemination to energy-harvesting RFID
tokens: protocol library, deterministic discrete-event simulator, and an
adversary harness.

The protocol pieces compose bottom-up: :mod:`wisecr.crypto` (block cipher,
MAC, seedable randomness), :mod:`wisecr.wire` (frames, CRC, chunking),
:mod:`wisecr.power` (powering channel and harvester model),
:mod:`wisecr.token` (the device state machine), :mod:`wisecr.server` (the
update orchestrator), :mod:`wisecr.simnet` (the event-driven air
interface), :mod:`wisecr.adversary` (scripted attacks), and
:mod:`wisecr.scenario` / :mod:`wisecr.cli` (experiment runner).
"""

from . import adversary, cli, crypto, power, scenario, server, simnet, token, wire

__all__ = [
    "adversary",
    "cli",
    "crypto",
    "power",
    "scenario",
    "server",
    "simnet",
    "token",
    "wire",
]

__version__ = "0.1.0"
