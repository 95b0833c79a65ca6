"""Shared builders for simulator-level tests."""

from __future__ import annotations

from wisecr import crypto, power, simnet, server
from wisecr.token import SecureStorage, TokenState


def make_fleet(
    seed: int,
    n: int = 4,
    distance=0.2,
    initial_version: int = 1,
    multipath_sigma: float = 0.0,
    firmware_len: int = 407,
    payload_size: int = 2,
    send_mode: server.SendMode = server.SendMode.BROADCAST,
    strategy: server.PilotStrategy = server.PilotStrategy.LOWEST_VT,
    pam_enabled: bool = True,
    max_attempts: int = 10,
    errors: simnet.ErrorModel | None = None,
    interceptor: simnet.Interceptor | None = None,
    new_version: int = 2,
):
    """A ready-to-run fleet: tokens, simulation, and a server session."""
    rng = crypto.RandomSource(seed)
    h_rng = rng.fork("multipath")
    db = server.TokenDb()
    tokens = []
    for i in range(n):
        token_id = bytes([0x30 + i]) * 12
        key = crypto.RandomSource(f"helper-key/{i}").key()
        db.add(server.DbEntry(token_id, key, initial_version))
        state = TokenState(
            SecureStorage(token_id, key, initial_version), app_image=b"factory app"
        )
        d = distance[i] if isinstance(distance, (list, tuple)) else distance
        h = 1.0
        if multipath_sigma > 0:
            h = max(0.1, 1.0 + h_rng.gauss(0.0, multipath_sigma))
        tokens.append(
            simnet.SimToken(state, power.ChannelState(distance_m=d, multipath=h))
        )
    sim = simnet.Simulation(tokens=tokens, rng=rng, errors=errors, interceptor=interceptor)
    sim.start_tokens()
    firmware = crypto.RandomSource("helper-fw").bytes(firmware_len)
    options = server.SessionOptions(
        new_version=new_version,
        payload_size=payload_size,
        strategy=strategy,
        send_mode=send_mode,
        pam_enabled=pam_enabled,
        max_attempts=max_attempts,
    )
    session = server.ServerSession(sim, db, firmware, options)
    return sim, session, tokens, db, firmware
