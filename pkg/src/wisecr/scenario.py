"""Scenario files, run orchestration, CSV reporting, and cross-checks.

A scenario is a TOML file (JSON is accepted too) describing the fleet, the
powering geometry, the firmware, and the protocol knobs. Repetitions run
with per-repetition seeds derived from the base seed; rerunning a scenario
file reproduces the CSV and every transcript byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

from . import crypto, power, simnet, wire
from .server import (
    DbEntry,
    PilotStrategy,
    SendMode,
    ServerSession,
    SessionOptions,
    SessionReport,
    TokenDb,
)
from .token import SecureStorage, TokenState


class ConfigError(Exception):
    """Scenario file problem, with enough context to fix it."""


class ParseError(Exception):
    """Transcript file is empty or not JSON-lines."""


@dataclass(frozen=True)
class TokenPlacement:
    token_id: bytes
    device_key: bytes
    version: int
    valid: bool
    distance_m: float
    schedule: power.DistanceSchedule | None = None
    in_db: bool = True


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    repetitions: int = 1
    max_attempts: int = 10
    send_mode: SendMode = SendMode.BROADCAST
    strategy: PilotStrategy = PilotStrategy.LOWEST_VT
    pam_enabled: bool = True
    filter_outliers: bool = False
    attest_mode: int | None = None
    payload_size: int = 2
    firmware_len: int = 407
    firmware_path: str | None = None
    firmware_seed: str = "firmware"
    new_version: int = 2
    initial_version: int = 1
    tokens: list[TokenPlacement] = field(default_factory=list)
    tx_power_w: float = 1.0
    gain_tx: float = 7.943
    gain_rx: float = 1.64
    wavelength_m: float = 0.327
    multipath_sigma: float = 0.0
    crc_flip_prob: float = 0.0
    frame_loss_prob: float = 0.0
    link: simnet.LinkParams = field(default_factory=simnet.LinkParams)
    costs: simnet.CostModel = field(default_factory=simnet.CostModel)
    harvester: power.HarvesterParams = field(default_factory=power.HarvesterParams)
    start_charged: bool = True

    def firmware(self) -> bytes:
        if self.firmware_path:
            return Path(self.firmware_path).read_bytes()
        return crypto.RandomSource(self.firmware_seed).bytes(self.firmware_len)


def default_token_id(index: int) -> bytes:
    return bytes([0x20 + index]) * wire.TOKEN_ID_SIZE


def default_device_key(name: str, index: int) -> bytes:
    # Device keys are provisioning material: fixed per fleet, independent of
    # the per-repetition seed.
    return crypto.RandomSource(f"{name}/device-key/{index}").key()


# ---------------------------------------------------------------------------
# Loading


def _get(table: dict, key: str, kind, default, where: str):
    value = table.get(key, default)
    if value is default:
        return default
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {value!r}")
    return value


def _override_dataclass(instance, table: dict, where: str):
    names = {f.name for f in dc_fields(instance)}
    updates = {}
    for key, value in table.items():
        if key not in names:
            raise ConfigError(f"{where}.{key}: unknown field")
        current = getattr(instance, key)
        if isinstance(current, float) and isinstance(value, int):
            value = float(value)
        updates[key] = value
    from dataclasses import replace

    return replace(instance, **updates)


def load_token_db(path: str | Path) -> list[TokenPlacement]:
    """Read a fleet database file: `[[token]]` entries with id/key hex,
    version, and the scheduled-for-update flag."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such token database")
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    placements: list[TokenPlacement] = []
    for i, entry in enumerate(raw.get("token", [])):
        where = f"{path}:token[{i}]"
        try:
            token_id = bytes.fromhex(entry["id_hex"])
            key = bytes.fromhex(entry["key_hex"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{where}: id_hex and key_hex are required hex") from exc
        placements.append(
            TokenPlacement(
                token_id=token_id,
                device_key=key,
                version=int(entry.get("version", 0)),
                valid=bool(entry.get("valid", True)),
                distance_m=float(entry.get("distance_m", 0.2)),
            )
        )
    if not placements:
        raise ConfigError(f"{path}: no [[token]] entries")
    return placements


def load_scenario(path: str | Path) -> Scenario:
    """Read a scenario from TOML (or JSON, by extension)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such file")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    else:
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return scenario_from_dict(raw, base_dir=path.parent)


def scenario_from_dict(raw: dict, base_dir: Path | None = None) -> Scenario:
    sc = Scenario()
    s = raw.get("scenario", {})
    sc.name = _get(s, "name", str, sc.name, "scenario")
    sc.seed = _get(s, "seed", int, sc.seed, "scenario")
    sc.repetitions = _get(s, "repetitions", int, sc.repetitions, "scenario")
    if sc.repetitions < 1:
        raise ConfigError("scenario.repetitions: must be >= 1")
    sc.max_attempts = _get(s, "max_attempts", int, sc.max_attempts, "scenario")
    sc.payload_size = _get(s, "payload_size", int, sc.payload_size, "scenario")
    sc.pam_enabled = _get(s, "pam_enabled", bool, sc.pam_enabled, "scenario")
    sc.filter_outliers = _get(s, "filter_outliers", bool, sc.filter_outliers, "scenario")
    sc.start_charged = _get(s, "start_charged", bool, sc.start_charged, "scenario")
    mode = _get(s, "send_mode", str, sc.send_mode.value, "scenario")
    try:
        sc.send_mode = SendMode(mode)
    except ValueError as exc:
        raise ConfigError(f"scenario.send_mode: {mode!r} is not a mode") from exc
    strat = _get(s, "pilot_strategy", str, sc.strategy.value, "scenario")
    try:
        sc.strategy = PilotStrategy(strat)
    except ValueError as exc:
        raise ConfigError(f"scenario.pilot_strategy: {strat!r} is not a strategy") from exc
    attest = s.get("attest_mode")
    if attest is not None:
        try:
            sc.attest_mode = {"fast": wire.ATTEST_FAST, "elaborate": wire.ATTEST_ELABORATE}[attest]
        except KeyError as exc:
            raise ConfigError(f"scenario.attest_mode: {attest!r}") from exc

    fw = raw.get("firmware", {})
    sc.firmware_len = _get(fw, "size_bytes", int, sc.firmware_len, "firmware")
    sc.firmware_seed = _get(fw, "content_seed", str, sc.firmware_seed, "firmware")
    sc.new_version = _get(fw, "new_version", int, sc.new_version, "firmware")
    fw_path = fw.get("path")
    if fw_path is not None:
        p = Path(fw_path)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        if not p.exists():
            raise ConfigError(f"firmware.path: {p} does not exist")
        sc.firmware_path = str(p)

    ch = raw.get("channel", {})
    sc.tx_power_w = _get(ch, "tx_power_w", float, sc.tx_power_w, "channel")
    sc.gain_tx = _get(ch, "gain_tx", float, sc.gain_tx, "channel")
    sc.gain_rx = _get(ch, "gain_rx", float, sc.gain_rx, "channel")
    sc.wavelength_m = _get(ch, "wavelength_m", float, sc.wavelength_m, "channel")
    sc.multipath_sigma = _get(ch, "multipath_sigma", float, sc.multipath_sigma, "channel")

    em = raw.get("error_model", {})
    sc.crc_flip_prob = _get(em, "crc_flip_prob", float, sc.crc_flip_prob, "error_model")
    sc.frame_loss_prob = _get(em, "frame_loss_prob", float, sc.frame_loss_prob, "error_model")

    if "link" in raw:
        sc.link = _override_dataclass(sc.link, raw["link"], "link")
    if "costs" in raw:
        sc.costs = _override_dataclass(sc.costs, raw["costs"], "costs")
    if "harvester" in raw:
        hv = dict(raw["harvester"])
        drains = hv.pop("drains", None)
        sc.harvester = _override_dataclass(sc.harvester, hv, "harvester")
        if drains:
            table = dict(sc.harvester.drains)
            for mode_name, rate in drains.items():
                try:
                    table[power.LoadMode(mode_name)] = float(rate)
                except ValueError as exc:
                    raise ConfigError(f"harvester.drains.{mode_name}: unknown mode") from exc
            from dataclasses import replace

            sc.harvester = replace(sc.harvester, drains=table)

    tk = raw.get("tokens", {})
    sc.initial_version = _get(tk, "initial_version", int, sc.initial_version, "tokens")
    explicit = tk.get("explicit")
    db_path = tk.get("db_path")
    if db_path is not None:
        from dataclasses import replace

        p = Path(db_path)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        placements = load_token_db(p)
        distances = tk.get("distances_m")
        if distances is not None:
            if len(distances) != len(placements):
                raise ConfigError("tokens.distances_m: length must match the database")
            placements = [
                replace(pl, distance_m=float(d)) for pl, d in zip(placements, distances)
            ]
        sc.tokens.extend(placements)
    elif explicit:
        for i, entry in enumerate(explicit):
            where = f"tokens.explicit[{i}]"
            try:
                token_id = bytes.fromhex(entry["id_hex"])
                key = bytes.fromhex(entry["key_hex"])
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"{where}: id_hex and key_hex are required hex") from exc
            schedule = None
            if "schedule" in entry:
                steps = tuple((float(t), float(d)) for t, d in entry["schedule"])
                schedule = power.DistanceSchedule(steps=steps)
            sc.tokens.append(
                TokenPlacement(
                    token_id=token_id,
                    device_key=key,
                    version=int(entry.get("version", sc.initial_version)),
                    valid=bool(entry.get("valid", True)),
                    distance_m=float(entry.get("distance_m", 0.2)),
                    schedule=schedule,
                    in_db=bool(entry.get("in_db", True)),
                )
            )
    else:
        count = _get(tk, "count", int, 4, "tokens")
        distances = tk.get("distances_m", [0.2] * count)
        if len(distances) != count:
            raise ConfigError("tokens.distances_m: length must equal tokens.count")
        for i in range(count):
            sc.tokens.append(
                TokenPlacement(
                    token_id=default_token_id(i),
                    device_key=default_device_key(sc.name, i),
                    version=sc.initial_version,
                    valid=True,
                    distance_m=float(distances[i]),
                )
            )
    if not sc.tokens:
        raise ConfigError("tokens: at least one token is required")
    return sc


# ---------------------------------------------------------------------------
# Building and running


@dataclass
class RunHandle:
    sim: simnet.Simulation
    session: ServerSession
    tokens: list[simnet.SimToken]
    db: TokenDb
    firmware: bytes
    seed: int


def build_run(sc: Scenario, seed: int) -> RunHandle:
    rng = crypto.RandomSource(seed)
    multipath_rng = rng.fork("multipath")
    db = TokenDb()
    sim_tokens: list[simnet.SimToken] = []
    for placement in sc.tokens:
        h = 1.0
        if sc.multipath_sigma > 0:
            h = max(0.1, 1.0 + multipath_rng.gauss(0.0, sc.multipath_sigma))
        channel = power.ChannelState(
            distance_m=placement.distance_m,
            tx_power_w=sc.tx_power_w,
            gain_tx=sc.gain_tx,
            gain_rx=sc.gain_rx,
            wavelength_m=sc.wavelength_m,
            multipath=h,
        )
        state = TokenState(
            SecureStorage(placement.token_id, placement.device_key, placement.version),
            app_image=b"factory app",
        )
        sim_tokens.append(
            simnet.SimToken(
                state,
                channel,
                harvester=sc.harvester,
                distance_schedule=placement.schedule,
            )
        )
        if placement.in_db:
            db.add(
                DbEntry(
                    placement.token_id,
                    placement.device_key,
                    placement.version,
                    placement.valid,
                )
            )
    sim = simnet.Simulation(
        tokens=sim_tokens,
        costs=sc.costs,
        link=sc.link,
        errors=simnet.ErrorModel(sc.crc_flip_prob, sc.frame_loss_prob),
        rng=rng,
    )
    sim.start_tokens(charged=sc.start_charged)
    options = SessionOptions(
        new_version=sc.new_version,
        payload_size=sc.payload_size,
        strategy=sc.strategy,
        send_mode=sc.send_mode,
        max_attempts=sc.max_attempts,
        pam_enabled=sc.pam_enabled,
        attest_mode=sc.attest_mode,
    )
    session = ServerSession(sim, db, sc.firmware(), options)
    return RunHandle(sim=sim, session=session, tokens=sim_tokens, db=db, firmware=sc.firmware(), seed=seed)


CSV_COLUMNS = [
    "scenario",
    "seed",
    "send_mode",
    "strategy",
    "tokens",
    "firmware_bytes",
    "latency_s",
    "throughput_bps",
    "attempts",
    "updated",
    "failed",
    "excluded",
    "all_updated",
    "outcomes",
]


def report_row(sc: Scenario, seed: int, report: SessionReport) -> dict:
    outcome_str = ";".join(f"{k}={v}" for k, v in sorted(report.outcomes.items()))
    counts = {"updated": 0, "failed": 0, "excluded": 0}
    for v in report.outcomes.values():
        counts[v] = counts.get(v, 0) + 1
    return {
        "scenario": sc.name,
        "seed": seed,
        "send_mode": sc.send_mode.value,
        "strategy": sc.strategy.value,
        "tokens": len(sc.tokens),
        "firmware_bytes": len(sc.firmware()),
        "latency_s": report.latency_s,
        "throughput_bps": report.throughput_bps,
        "attempts": report.attempts,
        "updated": counts["updated"],
        "failed": counts["failed"],
        "excluded": counts["excluded"],
        "all_updated": report.all_updated,
        "outcomes": outcome_str,
    }


@dataclass
class ScenarioResult:
    rows: list[dict]
    reports: list[SessionReport]
    transcripts: list[str]  # JSON-lines per repetition
    summary: dict


def run_scenario(
    sc: Scenario,
    seed_override: int | None = None,
    repetitions_override: int | None = None,
    keep_transcripts: bool = True,
) -> ScenarioResult:
    """Run every repetition and aggregate. One CSV row per repetition."""
    base_seed = sc.seed if seed_override is None else seed_override
    reps = sc.repetitions if repetitions_override is None else repetitions_override
    rows: list[dict] = []
    reports: list[SessionReport] = []
    transcripts: list[str] = []
    for rep in range(reps):
        seed = base_seed + rep
        handle = build_run(sc, seed)
        report = handle.session.run_update()
        reports.append(report)
        rows.append(report_row(sc, seed, report))
        if keep_transcripts:
            transcripts.append(handle.sim.transcript.to_jsonl())
    summary = summarize(rows, filter_outliers=sc.filter_outliers)
    return ScenarioResult(rows=rows, reports=reports, transcripts=transcripts, summary=summary)


def summarize(rows: list[dict], filter_outliers: bool = False) -> dict:
    """Mean/stdev of latency and throughput over successful repetitions."""
    kept = [r for r in rows if r["latency_s"] > 0]
    removed = 0
    if filter_outliers and len(kept) >= 4:
        ordered = sorted(r["latency_s"] for r in kept)
        q1 = ordered[len(ordered) // 4]
        q3 = ordered[(3 * len(ordered)) // 4]
        lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
        before = len(kept)
        kept = [r for r in kept if lo <= r["latency_s"] <= hi]
        removed = before - len(kept)
    latencies = [r["latency_s"] for r in kept]
    throughputs = [r["throughput_bps"] for r in kept]

    def stats(vals: list[float]) -> tuple[float, float]:
        if not vals:
            return 0.0, 0.0
        mean = statistics.fmean(vals)
        std = statistics.pstdev(vals) if len(vals) > 1 else 0.0
        return mean, std

    lat_mean, lat_std = stats(latencies)
    thr_mean, thr_std = stats(throughputs)
    return {
        "runs": len(rows),
        "all_updated_runs": sum(1 for r in rows if r["all_updated"]),
        "latency_mean_s": lat_mean,
        "latency_std_s": lat_std,
        "throughput_mean_bps": thr_mean,
        "throughput_std_bps": thr_std,
        "outliers_removed": removed,
    }


def write_csv(rows: list[dict], out: io.TextIOBase | str | Path) -> None:
    close = False
    if isinstance(out, (str, Path)):
        out = open(out, "w", newline="")
        close = True
    try:
        writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    finally:
        if close:
            out.close()


# ---------------------------------------------------------------------------
# Transcript cross-check: re-derive the CSV row from the air record


def derive_row_from_transcript(
    jsonl_text: str, sc: Scenario, seed: int
) -> dict:
    """Recompute the reportable fields of a CSV row from a transcript alone.

    Works for broadcast mode; in sequential mode the attempt count is not
    recoverable from frames and is reported as None.
    """
    rows = simnet.Transcript.parse_jsonl(jsonl_text)
    if not rows:
        raise ParseError("empty transcript")
    known_ids = {p.token_id.hex() for p in sc.tokens if p.in_db}
    valid_ids = {p.token_id.hex() for p in sc.tokens if p.in_db and p.valid}

    t_first = rows[0]["t_us"]
    last_ver: dict[str, int] = {}
    respondents: set[str] = set()
    final_round_inv_t: float | None = None
    current_inv_t: float | None = None
    for row in rows:
        if row["kind"] == "INVENTORY" and row["sender"] == "server":
            current_inv_t = row["t_us"]
        if row["kind"] == "INVENTORY_REPLY" and not row["tampered"]:
            info = wire.InventoryReply.unpack(bytes.fromhex(row["payload"]))
            sender_id = info.token_id.hex()
            respondents.add(sender_id)
            prev = last_ver.get(sender_id)
            last_ver[sender_id] = info.version
            if (
                info.version == sc.new_version
                and prev != sc.new_version
                and sender_id in valid_ids
            ):
                final_round_inv_t = current_inv_t

    updated = {t for t, v in last_ver.items() if v == sc.new_version and t in valid_ids}
    excluded = {t for t in respondents if t not in valid_ids}
    failed = respondents - updated - excluded

    latency_s = 0.0
    if final_round_inv_t is not None:
        inv_air = sc.link.downlink_air_us(len(wire.encode(wire.Frame(wire.CommandKind.INVENTORY))))
        t_done = final_round_inv_t + inv_air + sc.link.inventory_round_us
        latency_s = (t_done - t_first) / 1e6

    throughput = 0.0
    if latency_s > 0:
        throughput = len(sc.firmware()) * 8 * len(updated) / latency_s

    attempts: int | None = None
    if sc.send_mode is SendMode.BROADCAST:
        attempts = 0
        in_burst = False
        for row in rows:
            if row["kind"] == "ENTER_WISECR":
                if not in_burst:
                    attempts += 1
                    in_burst = True
            elif row["kind"] not in ("ACK",):
                in_burst = False

    return {
        "scenario": sc.name,
        "seed": seed,
        "latency_s": latency_s,
        "throughput_bps": throughput,
        "attempts": attempts,
        "updated": len(updated),
        "failed": len(failed),
        "excluded": len(excluded),
    }


# ---------------------------------------------------------------------------
# Attestation benchmark


def attest_bench(
    sizes: list[int],
    costs: simnet.CostModel | None = None,
    seed: int = 0,
) -> list[dict]:
    """Simulated attestation times per firmware size, fast and elaborate."""
    costs = costs or simnet.CostModel()
    rows: list[dict] = []
    for size in sizes:
        if size < 1:
            raise ConfigError("attest sizes must be positive")
        for mode_name, mode in (("fast", wire.ATTEST_FAST), ("elaborate", wire.ATTEST_ELABORATE)):
            seg = size if mode == wire.ATTEST_ELABORATE else 0
            cycles = costs.attest_cycles(mode, seg)
            compute_ms = simnet.cycles_to_time(cycles, costs.compute_clock_mhz) / 1000.0
            rows.append(
                {
                    "firmware_bytes": size,
                    "mode": mode_name,
                    "cycles": cycles,
                    "compute_ms": compute_ms,
                }
            )
    return rows


# ---------------------------------------------------------------------------
# Transcript replay (human-readable trace)


_STAGE_BY_KIND = {
    "ENTER_WISECR": "Security Association",
    "AUTHENTICATE": "Security Association",
    "SECURE_COMM": "Secure Broadcast",
    "EOB": "Secure Broadcast",
    "ATTEST_REQUEST": "Remote Attestation",
    "ATTEST_REPLY": "Remote Attestation",
}


def replay_transcript(path: str | Path) -> list[str]:
    """Render a stored transcript as annotated, ordered trace lines."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    text = path.read_text()
    try:
        rows = simnet.Transcript.parse_jsonl(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: empty transcript")

    lines = []
    stage = "Inventory"
    seen_broadcast = False
    for row in rows:
        kind = row["kind"]
        if kind in _STAGE_BY_KIND:
            stage = _STAGE_BY_KIND[kind]
            if stage == "Secure Broadcast":
                seen_broadcast = True
        elif kind == "INVENTORY" and seen_broadcast:
            stage = "Validation"
        handle = row.get("handle")
        handle_txt = f" h=0x{handle:04X}" if handle is not None else ""
        flags = " TAMPERED" if row.get("tampered") else ""
        payload = row.get("payload", "")
        lines.append(
            f"[{row['t_us'] / 1e6:10.6f}s] {stage:20s} {row['sender']:>12s} "
            f"{kind:<15s}{handle_txt} {len(payload) // 2:4d}B{flags}"
        )
    return lines
