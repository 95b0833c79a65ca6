"""Deterministic discrete-event air interface and energy accounting.

One kernel owns simulated time (microseconds). Frames sent by the reader
reach every powered token (the medium is a physical broadcast); a per-token
error model may drop or corrupt them. Token reception, replies, and compute
work are charged both in time (clock cycles at the relevant clock) and in
energy (harvester drain per load mode). Every frame on the air lands in an
append-only transcript, which is simultaneously the metrics source and the
adversary's eavesdrop surface.

Identical (scenario, seed) inputs replay to byte-identical transcripts:
events with equal timestamps fire in insertion order and every random draw
comes from a labelled, seeded stream.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable

from . import crypto, power, wire
from .token import TokenState

US_PER_S = 1_000_000.0


def cycles_to_time(cycles: float, clock_mhz: float) -> float:
    """Microseconds to execute `cycles` at `clock_mhz`."""
    if cycles <= 0 or clock_mhz <= 0:
        raise ValueError("cycles and clock must be positive")
    return cycles / clock_mhz


@dataclass(frozen=True)
class CostModel:
    """Clock-cycle costs per operation and role, plus the clock domains."""

    pilot_receive_cycles: int = 23_082
    pilot_reply_cycles: int = 1_131
    observer_receive_cycles: int = 22_002
    association_cycles: int = 2_302
    broadcast_cycles_per_240b: int = 11_604  # decrypting the stored download
    validation_cycles_per_240b: int = 26_724  # tag recomputation over the image
    attest_fast_cycles: int = 5_574
    attest_elaborate_setup_cycles: int = 4_397
    attest_elaborate_block_cycles: int = 1_060  # per 16-byte block attested
    receive_clock_mhz: float = 16.0
    transmit_clock_mhz: float = 12.0
    compute_clock_mhz: float = 16.0

    def receive_us(self, replies: bool) -> float:
        cycles = self.pilot_receive_cycles if replies else self.observer_receive_cycles
        return cycles_to_time(cycles, self.receive_clock_mhz)

    def reply_us(self) -> float:
        return cycles_to_time(self.pilot_reply_cycles, self.transmit_clock_mhz)

    def association_us(self) -> float:
        return cycles_to_time(self.association_cycles, self.compute_clock_mhz)

    def finalize_cycles(self, ciphertext_len: int, firmware_len: int) -> float:
        """Decrypt-the-download plus recompute-the-tag work, scaled by size."""
        decrypt = self.broadcast_cycles_per_240b * ciphertext_len / 240.0
        mac_len = firmware_len + 8  # image plus the two version words
        validate = self.validation_cycles_per_240b * mac_len / 240.0
        return decrypt + validate

    def attest_cycles(self, mode: int, segment_len: int = 0) -> float:
        """Fast mode is a constant; elaborate pays per attested 16-byte block,
        plus n+2 cycles to pad a trailing partial block of 16-n bytes."""
        if mode == wire.ATTEST_FAST:
            return float(self.attest_fast_cycles)
        blocks, rem = divmod(segment_len, 16)
        cycles = self.attest_elaborate_setup_cycles + self.attest_elaborate_block_cycles * (
            blocks + (1 if rem else 0)
        )
        if rem:
            cycles += (16 - rem) + 2
        return float(cycles)


@dataclass(frozen=True)
class LinkParams:
    """Air-time model: frame bits over a configurable link rate.

    `cmd_overhead_bits` folds the per-command protocol envelope (handle
    handshake, preambles, mandated turnaround gaps) into an equivalent bit
    cost, which is what makes a two-byte-payload write command cost tens of
    milliseconds of air time, as it does on real readers.
    """

    downlink_bps: float = 26_700.0
    uplink_bps: float = 53_400.0
    cmd_overhead_bits: int = 1_200
    reply_overhead_bits: int = 60
    ack_timeout_us: float = 20_000.0  # protocol timeout for an absent ACK
    broadcast_retry_limit: int = 3
    inventory_round_us: float = 40_000.0
    inventory_reply_spacing_us: float = 3_000.0
    validation_poll_us: float = 60_000.0
    max_validation_polls: int = 80

    def downlink_air_us(self, frame_bytes: int) -> float:
        bits = frame_bytes * 8 + self.cmd_overhead_bits
        return bits / self.downlink_bps * US_PER_S

    def uplink_air_us(self, frame_bytes: int) -> float:
        bits = frame_bytes * 8 + self.reply_overhead_bits
        return bits / self.uplink_bps * US_PER_S


@dataclass(frozen=True)
class ErrorModel:
    """Independent per-frame, per-token delivery faults."""

    crc_flip_prob: float = 0.0
    frame_loss_prob: float = 0.0

    def __post_init__(self) -> None:
        for p in (self.crc_flip_prob, self.frame_loss_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Transcript


@dataclass(frozen=True)
class TranscriptRecord:
    seq: int
    t_us: float
    sender: str  # "server", "adversary", or a token id in hex
    kind: str
    handle: int | None
    payload_hex: str
    delivered_to: tuple[str, ...]
    dropped_for: tuple[str, ...] = ()
    corrupted_for: tuple[str, ...] = ()
    tampered: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "t_us": self.t_us,
                "sender": self.sender,
                "kind": self.kind,
                "handle": self.handle,
                "payload": self.payload_hex,
                "delivered_to": list(self.delivered_to),
                "dropped_for": list(self.dropped_for),
                "corrupted_for": list(self.corrupted_for),
                "tampered": self.tampered,
            },
            sort_keys=True,
        )


class Transcript:
    """Append-only, time-ordered record of every frame on the air."""

    def __init__(self) -> None:
        self.records: list[TranscriptRecord] = []

    def append(self, record: TranscriptRecord) -> None:
        if self.records and record.t_us < self.records[-1].t_us:
            raise ValueError("transcript must stay time-ordered")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    @staticmethod
    def parse_jsonl(text: str) -> list[dict]:
        rows = []
        for line in text.splitlines():
            if line.strip():
                rows.append(json.loads(line))
        return rows


# ---------------------------------------------------------------------------
# Event kernel


class EventKernel:
    """Minimal event heap: timestamps in µs, ties broken by insertion order."""

    def __init__(self) -> None:
        self.now_us = 0.0
        self._seq = 0
        self._heap: list[tuple[float, int, Callable[[], None]]] = []

    def schedule(self, at_us: float, fn: Callable[[], None]) -> None:
        if at_us < self.now_us:
            raise ValueError("cannot schedule into the past")
        self._seq += 1
        heapq.heappush(self._heap, (at_us, self._seq, fn))

    def schedule_in(self, delay_us: float, fn: Callable[[], None]) -> None:
        self.schedule(self.now_us + delay_us, fn)

    def run_until(self, t_us: float, stop: Callable[[], bool] | None = None) -> None:
        """Process every event at or before `t_us`, then land the clock there.

        `stop` short-circuits the run as soon as it returns true (checked
        after each event); the clock then rests at that event's time.
        """
        while self._heap and self._heap[0][0] <= t_us:
            at, _, fn = heapq.heappop(self._heap)
            self.now_us = at
            fn()
            if stop is not None and stop():
                return
        self.now_us = max(self.now_us, t_us)


# ---------------------------------------------------------------------------
# Simulated token: protocol state plus powering dynamics


@dataclass(frozen=True)
class ActivityRecord:
    """One charged stretch of a load mode, attributable to a cause."""

    start_us: float
    duration_us: float
    mode: str
    label: str
    frame_seq: int | None = None


@dataclass(frozen=True)
class InventoryResponse:
    token_id: bytes
    version: int
    vt: float
    handle: int
    read_rate: float
    rssi: float


class SimToken:
    """A token placed in the field.

    Two generation counters keep stale events harmless: `_gen` invalidates
    power-crossing predictions whenever the load mode or operating point
    changes, and `_life` invalidates protocol continuations (replies,
    compute slices, pending resets) whenever the token reboots or browns
    out.
    """

    def __init__(
        self,
        state: TokenState,
        channel: power.ChannelState,
        harvester: power.HarvesterParams | None = None,
        distance_schedule: power.DistanceSchedule | None = None,
    ):
        self.sim: "Simulation" | None = None
        self.state = state
        self.base_channel = channel
        self.harvester = harvester or power.HarvesterParams()
        self.distance_schedule = distance_schedule
        self.index = 0
        self.v_cap = 0.0
        self.mode = power.LoadMode.OFF
        self.busy_until_us = 0.0
        self._segment_start_us = 0.0
        self._gen = 0
        self._life = 0
        self._activity = 0  # newest charge wins over stale idle-returns
        self.ledger: list[ActivityRecord] = []
        self.drain_volts = 0.0  # cumulative charged load drain

    # -- powering ------------------------------------------------------------

    def _now(self) -> float:
        assert self.sim is not None
        return self.sim.kernel.now_us

    def channel_now(self) -> power.ChannelState:
        ch = self.base_channel
        if self.distance_schedule is not None:
            ch = replace(ch, distance_m=self.distance_schedule.at(self._now() / US_PER_S))
        return ch

    def received_power(self) -> float:
        return power.received_power(self.channel_now())

    def sync(self) -> None:
        """Integrate the capacitor up to the kernel clock."""
        now = self._now()
        dt = (now - self._segment_start_us) / US_PER_S
        if dt > 0:
            state = power.HarvesterState(self.harvester, self.v_cap)
            self.v_cap = power.step(state, self.mode, self.received_power(), dt).v_cap
        self._segment_start_us = now

    def _set_mode(self, mode: power.LoadMode) -> None:
        self.sync()
        self.mode = mode
        self._reschedule_power_events()

    def _reschedule_power_events(self) -> None:
        """Predict the next brownout or recharge-boot crossing exactly."""
        assert self.sim is not None
        self._gen += 1
        gen = self._gen
        state = power.HarvesterState(self.harvester, self.v_cap)
        p_r = self.received_power()
        if self.state.powered:
            ttb = power.time_to_brownout(state, self.mode, p_r)
            if math.isfinite(ttb):

                def brownout() -> None:
                    if gen == self._gen:
                        self._brownout()

                self.sim.kernel.schedule_in(ttb * US_PER_S, brownout)
        else:
            ttr = power.time_to_reach(state, self.mode, p_r, self.harvester.v_release)
            if math.isfinite(ttr):

                def cold_boot() -> None:
                    if gen == self._gen:
                        self.sync()
                        self.begin_boot()

                self.sim.kernel.schedule_in(ttr * US_PER_S, cold_boot)

    def _brownout(self) -> None:
        self.sync()
        self.v_cap = self.harvester.v_brownout
        self.state.on_power_loss()
        self._life += 1
        self.busy_until_us = self._now()
        self._set_mode(power.LoadMode.OFF)

    def on_power_change(self) -> None:
        """Distance-schedule step: the operating point moved."""
        self._set_mode(self.mode)

    # -- boot ----------------------------------------------------------------

    def begin_boot(self) -> None:
        """Cold boot at the release threshold, then the measurement window."""
        self._life += 1
        self.state.boot(vt=None)
        self._run_boot_window()

    def soft_reboot(self) -> None:
        """Software reset: volatile state gone, then the same boot window."""
        self._life += 1
        self.state.soft_reset()
        self._run_boot_window()

    def _run_boot_window(self) -> None:
        window_us = self.harvester.sniff_window_s * US_PER_S
        self._set_mode(power.LoadMode.LPM)
        self.ledger.append(
            ActivityRecord(
                start_us=self._now(),
                duration_us=window_us,
                mode=power.LoadMode.LPM.value,
                label="boot_sniff",
            )
        )
        self.drain_volts += self.harvester.drains[power.LoadMode.LPM] * window_us / US_PER_S
        self.busy_until_us = self._now() + window_us
        life = self._life

        def finish() -> None:
            if life != self._life or not self.state.powered:
                return
            self.sync()
            self.state.measured_vt = self.v_cap

        assert self.sim is not None
        self.sim.kernel.schedule_in(window_us, finish)

    # -- charged activities ----------------------------------------------------

    def charge(
        self,
        mode: power.LoadMode,
        duration_us: float,
        label: str,
        frame_seq: int | None = None,
    ) -> None:
        """Run `mode` for `duration_us` starting now, then fall back to idle."""
        assert self.sim is not None
        self._set_mode(mode)
        self._activity += 1
        act = self._activity
        self.ledger.append(
            ActivityRecord(
                start_us=self._now(),
                duration_us=duration_us,
                mode=mode.value,
                label=label,
                frame_seq=frame_seq,
            )
        )
        self.drain_volts += self.harvester.drains[mode] * duration_us / US_PER_S
        life = self._life

        def back_to_idle() -> None:
            # A newer activity may have started at this exact timestamp;
            # its segment must not be clobbered back to idle.
            if act == self._activity and life == self._life and self.state.powered:
                self._set_mode(power.LoadMode.LPM)

        self.sim.kernel.schedule_in(duration_us, back_to_idle)

    def busy(self) -> bool:
        return self._now() < self.busy_until_us

    def id_hex(self) -> str:
        return self.state.storage.token_id.hex()


# ---------------------------------------------------------------------------
# Adversary hook surface


class Interceptor:
    """Delivery-layer attacker hooks; the default implementation is passive.

    Attacks see and may rewrite frames on the air, which is exactly the
    input/output attacker surface: they never touch token or server
    internals.
    """

    def transform_downlink(self, frame: wire.Frame) -> list[tuple[wire.Frame, bool]]:
        """Return (frame, tampered) pairs to put on the air instead."""
        return [(frame, False)]

    def transform_uplink(
        self, frame: wire.Frame, sender_id: str
    ) -> list[tuple[wire.Frame, bool]]:
        return [(frame, False)]

    def deliver_to(self, frame: wire.Frame, token_id: str) -> bool:
        """Selective jamming: False suppresses this token's copy."""
        return True

    def inventory_spoofs(self) -> list[wire.Frame]:
        """Frames the attacker injects into an inventory round, if any."""
        return []


# ---------------------------------------------------------------------------
# The simulation


class Simulation:
    """Owns the kernel, the tokens, the transcript, and the reader's inbox."""

    def __init__(
        self,
        tokens: Iterable[SimToken] = (),
        costs: CostModel | None = None,
        link: LinkParams | None = None,
        errors: ErrorModel | None = None,
        rng: crypto.RandomSource | None = None,
        interceptor: Interceptor | None = None,
    ):
        self.kernel = EventKernel()
        self.costs = costs or CostModel()
        self.link = link or LinkParams()
        self.errors = errors or ErrorModel()
        self.rng = rng or crypto.RandomSource(0)
        self.error_rng = self.rng.fork("errors")
        self.handle_rng = self.rng.fork("handles")
        self.noise_rng = self.rng.fork("noise")
        self.interceptor = interceptor or Interceptor()
        self.transcript = Transcript()
        self.inbox: list[tuple[float, str, wire.Frame]] = []
        self.tokens: list[SimToken] = []
        for tok in tokens:
            self.add_token(tok)

    # -- construction ---------------------------------------------------------

    def add_token(self, tok: SimToken) -> None:
        tok.sim = self
        tok.index = len(self.tokens)
        self.tokens.append(tok)
        if tok.distance_schedule is not None:
            for t_s in tok.distance_schedule.change_times():
                if t_s > 0:
                    self.kernel.schedule(t_s * US_PER_S, tok.on_power_change)

    def start_tokens(self, charged: bool = True) -> None:
        """Place tokens in the field; charged tokens boot immediately."""
        for tok in self.tokens:
            if charged:
                tok.v_cap = tok.harvester.v_release
                tok.begin_boot()
            else:
                tok.v_cap = 0.0
                tok._set_mode(power.LoadMode.OFF)

    def advance(self, until_us: float) -> None:
        """Process all events up to `until_us` in deterministic order."""
        self.kernel.run_until(until_us)

    def now_us(self) -> float:
        return self.kernel.now_us

    def token_by_id(self, id_hex: str) -> SimToken | None:
        for tok in self.tokens:
            if tok.id_hex() == id_hex:
                return tok
        return None

    # -- transmission ----------------------------------------------------------

    def _record(
        self,
        sender: str,
        frame: wire.Frame,
        delivered: tuple[str, ...],
        dropped: tuple[str, ...] = (),
        corrupted: tuple[str, ...] = (),
        tampered: bool = False,
        t_us: float | None = None,
    ) -> int:
        seq = len(self.transcript)
        self.transcript.append(
            TranscriptRecord(
                seq=seq,
                t_us=self.kernel.now_us if t_us is None else t_us,
                sender=sender,
                kind=frame.kind.name,
                handle=frame.handle,
                payload_hex=frame.payload.hex(),
                delivered_to=delivered,
                dropped_for=dropped,
                corrupted_for=corrupted,
                tampered=tampered,
            )
        )
        return seq

    def send_downlink(self, frame: wire.Frame, sender: str = "server") -> float:
        """Put a reader command on the air. Returns its arrival time in µs.

        When an interceptor substitutes several frames for one, they share
        the medium back to back: each copy starts transmitting after the
        previous one has finished (deferred as a kernel event, so the
        transcript stays time-ordered).
        """
        arrival = self.kernel.now_us
        offset = 0.0
        for out_frame, tampered in self.interceptor.transform_downlink(frame):
            air_us = self.link.downlink_air_us(len(wire.encode(out_frame)))
            if offset == 0.0:
                arrival = self._transmit_downlink(out_frame, sender, tampered)
            else:
                self.kernel.schedule_in(
                    offset,
                    lambda f=out_frame, tp=tampered: self._transmit_downlink(f, sender, tp),
                )
                arrival = self.kernel.now_us + offset + air_us
            offset += air_us
        return arrival

    # The medium is a physical broadcast: "deliver" is the same operation
    # viewed from the tokens' side.
    deliver = send_downlink

    def _transmit_downlink(self, frame: wire.Frame, sender: str, tampered: bool) -> float:
        encoded = wire.encode(frame)
        start = self.kernel.now_us
        arrival = start + self.link.downlink_air_us(len(encoded))

        delivered: list[str] = []
        dropped: list[str] = []
        corrupted: list[str] = []
        plan: list[tuple[SimToken, bool]] = []
        for tok in self.tokens:  # fixed sampling order keeps runs replayable
            if not self.interceptor.deliver_to(frame, tok.id_hex()):
                dropped.append(tok.id_hex())
            elif self.error_rng.uniform() < self.errors.frame_loss_prob:
                dropped.append(tok.id_hex())
            elif self.error_rng.uniform() < self.errors.crc_flip_prob:
                corrupted.append(tok.id_hex())
                plan.append((tok, True))
            else:
                delivered.append(tok.id_hex())
                plan.append((tok, False))

        seq = self._record(
            sender, frame, tuple(delivered), tuple(dropped), tuple(corrupted), tampered, t_us=start
        )
        for tok, garbled in plan:
            self.kernel.schedule(
                arrival,
                lambda t=tok, g=garbled: self._receive_at_token(t, frame, g, seq),
            )
        return arrival

    def _receive_at_token(
        self, tok: SimToken, frame: wire.Frame, garbled: bool, seq: int
    ) -> None:
        """Frame hits one token: charge reception, then act on it."""
        tok.sync()
        if not tok.state.powered or tok.busy():
            return  # radio unattended: mid-compute, mid-reply, or dark
        reaction = tok.state.garbled_frame() if garbled else tok.state.handle_command(frame)
        rx_us = self.costs.receive_us(replies=reaction.reply is not None)
        tok.charge(power.LoadMode.RFID_RECEIVE, rx_us, f"rx_{frame.kind.name.lower()}", seq)
        tok.busy_until_us = self.kernel.now_us + rx_us
        done_us = tok.busy_until_us
        life = tok._life

        if reaction.reply is not None:
            reply = reaction.reply
            tx_total = self.costs.reply_us() + self.link.uplink_air_us(len(wire.encode(reply)))
            tok.busy_until_us = done_us + tx_total

            def transmit() -> None:
                if life == tok._life and tok.state.powered:
                    self._token_transmit(tok, reply, seq)

            self.kernel.schedule(done_us, transmit)
            done_us += tx_total

        if garbled:
            return

        if frame.kind is wire.CommandKind.AUTHENTICATE and reaction.reply is not None:
            assoc_us = self.costs.association_us()
            tok.busy_until_us = done_us + assoc_us

            def associate_work() -> None:
                if life == tok._life and tok.state.powered:
                    tok.charge(power.LoadMode.ACTIVE_CPU, assoc_us, "association", seq)

            self.kernel.schedule(done_us, associate_work)
            done_us += assoc_us

        if reaction.start_finalize:
            self._begin_finalize(tok, start_us=done_us)

        if reaction.start_attest is not None:
            self._begin_attest(tok, reaction.start_attest, start_us=done_us)

        if reaction.soft_reset:

            def do_reset() -> None:
                if life == tok._life and tok.state.powered:
                    tok.soft_reboot()

            self.kernel.schedule(done_us, do_reset)

    def _token_transmit(self, tok: SimToken, frame: wire.Frame, cause_seq: int | None) -> None:
        """Backscatter a token reply to the reader."""
        tok.sync()
        if not tok.state.powered:
            return
        tx_us = self.costs.reply_us()
        air_us = self.link.uplink_air_us(len(wire.encode(frame)))
        tok.charge(
            power.LoadMode.RFID_TRANSMIT, tx_us + air_us, f"tx_{frame.kind.name.lower()}", cause_seq
        )
        sender = tok.id_hex()
        for out_frame, tampered in self.interceptor.transform_uplink(frame, sender):
            self._record(sender, out_frame, ("server",), tampered=tampered)
            arrival = self.kernel.now_us + tx_us + air_us

            def deliver(f: wire.Frame = out_frame) -> None:
                self.inbox.append((self.kernel.now_us, sender, f))

            self.kernel.schedule(arrival, deliver)

    # -- compute scheduling ------------------------------------------------------

    def _begin_finalize(self, tok: SimToken, start_us: float) -> None:
        scratch = tok.state.scratch
        if scratch is None:
            return
        ct_len = sum(len(c) for c in scratch.download.values())
        if ct_len == 0:
            self.kernel.schedule(start_us, lambda: self._finish_finalize(tok, tok._life))
            return
        fw_len = max(ct_len - 16, 0)  # best estimate before unpadding
        cycles = self.costs.finalize_cycles(ct_len, fw_len)
        life = tok._life
        self._schedule_pam_compute(
            tok,
            cycles,
            scratch.pam,
            start_us=start_us,
            label="validate",
            on_done=lambda: self._finish_finalize(tok, life),
        )

    def _finish_finalize(self, tok: SimToken, life: int) -> None:
        if life != tok._life or not tok.state.powered:
            return
        tok.state.finalize_update()
        tok.soft_reboot()

    def _begin_attest(self, tok: SimToken, req: wire.AttestRequestPayload, start_us: float) -> None:
        seg_len = req.segment_length if req.mode == wire.ATTEST_ELABORATE else 0
        duration = cycles_to_time(self.costs.attest_cycles(req.mode, seg_len), self.costs.compute_clock_mhz)
        life = tok._life

        def run() -> None:
            if life != tok._life or not tok.state.powered:
                return
            tok.charge(power.LoadMode.ACTIVE_CPU, duration, "attest")
            tok.busy_until_us = self.kernel.now_us + duration

            def reply() -> None:
                if life != tok._life or not tok.state.powered:
                    return
                frame = tok.state.attest_respond(req)
                self._token_transmit(tok, frame, None)
                tok.soft_reboot()

            self.kernel.schedule_in(duration, reply)

        self.kernel.schedule(max(start_us, self.kernel.now_us), run)

    def _schedule_pam_compute(
        self,
        tok: SimToken,
        total_cycles: float,
        pam: power.PamParams,
        start_us: float,
        label: str,
        on_done: Callable[[], None],
    ) -> None:
        """Run compute in active bursts separated by low-power sleeps.

        An unbounded schedule runs the work in one stretch. A brownout in
        the middle invalidates the chain and the work never completes.
        """
        total_us = cycles_to_time(total_cycles, self.costs.compute_clock_mhz)
        burst_us = math.inf if pam.unbounded else pam.t_active_ms * 1000.0
        sleep_us = 0.0 if pam.unbounded else pam.t_lpm_ms * 1000.0
        life = tok._life

        def run_slice(remaining_us: float) -> None:
            if life != tok._life or not tok.state.powered:
                return
            this_us = min(burst_us, remaining_us)
            tok.charge(power.LoadMode.ACTIVE_CPU, this_us, label)
            tok.busy_until_us = self.kernel.now_us + this_us
            left = remaining_us - this_us

            def after_burst() -> None:
                if life != tok._life or not tok.state.powered:
                    return
                if left <= 0:
                    on_done()
                else:
                    tok.busy_until_us = self.kernel.now_us + sleep_us
                    self.kernel.schedule_in(sleep_us, lambda: run_slice(left))

            self.kernel.schedule_in(this_us, after_burst)

        self.kernel.schedule(max(start_us, self.kernel.now_us), lambda: run_slice(total_us))

    # -- singulation -------------------------------------------------------------

    def singulate(self) -> list[InventoryResponse]:
        """One abstracted anti-collision round.

        The inventory command goes out like any broadcast frame; every awake
        token in a responsive phase answers with (id, version, Vt). Handles
        are drawn fresh per round and assigned to the tokens whose replies
        the reader actually heard, so an interceptor can drop or forge
        replies and the reader's view follows suit.
        """
        inv = wire.Frame(wire.CommandKind.INVENTORY)
        arrival = self.send_downlink(inv)

        slot = 0
        for frame in self.interceptor.inventory_spoofs():
            self._record("adversary", frame, ("server",), tampered=True)
            at = arrival + (slot + 1) * self.link.inventory_reply_spacing_us
            slot += 1

            def deliver(f: wire.Frame = frame) -> None:
                self.inbox.append((self.kernel.now_us, "adversary", f))

            self.kernel.schedule(at, deliver)

        self.kernel.run_until(arrival + self.link.inventory_round_us)

        used: set[int] = set()
        responses: list[InventoryResponse] = []
        kept: list[tuple[float, str, wire.Frame]] = []
        for at, sender, frame in self.inbox:
            if frame.kind is not wire.CommandKind.INVENTORY_REPLY:
                kept.append((at, sender, frame))
                continue
            info = wire.InventoryReply.unpack(frame.payload)
            handle = int.from_bytes(self.handle_rng.bytes(2), "big")
            while handle in used:  # collisions resolved by re-draw
                handle = int.from_bytes(self.handle_rng.bytes(2), "big")
            used.add(handle)
            tok = self.token_by_id(sender)
            if tok is not None:
                tok.state.handle = handle
                ch = tok.channel_now()
                read_rate = max(
                    0.0,
                    power.received_power(ch) * 1000.0 * (1.0 + self.noise_rng.gauss(0.0, 0.1)),
                )
                sig = power.rssi(ch)
            else:
                read_rate, sig = 1.0, 1.0
            responses.append(
                InventoryResponse(
                    token_id=info.token_id,
                    version=info.version,
                    vt=info.vt_millivolts / 1000.0,
                    handle=handle,
                    read_rate=read_rate,
                    rssi=sig,
                )
            )
        self.inbox = kept
        return responses

    # -- reader-side waiting -------------------------------------------------------

    def wait_reply(
        self,
        predicate: Callable[[str, wire.Frame], bool],
        timeout_us: float,
    ) -> tuple[str, wire.Frame] | None:
        """Advance time until a matching uplink frame arrives or the timeout."""
        deadline = self.kernel.now_us + timeout_us
        while True:
            for i, (_, sender, frame) in enumerate(self.inbox):
                if predicate(sender, frame):
                    del self.inbox[i]
                    return sender, frame
            if self.kernel.now_us >= deadline:
                return None
            seen = len(self.inbox)
            self.kernel.run_until(deadline, stop=lambda: len(self.inbox) > seen)
