"""Server-side stages: prelude, association, election, validation, attestation."""

from __future__ import annotations

import logging

import pytest
from hypothesis import given, settings, strategies as st

from wisecr import crypto, wire
from wisecr.server import (
    DbEntry,
    NoEligibleTokens,
    PilotStrategy,
    SendMode,
    TokenDb,
    UnknownToken,
    attest_challenge,
    attest_verify,
    elect_pilot,
    prelude,
    security_association,
    validate,
)
from wisecr.simnet import InventoryResponse

from helpers import make_fleet


def resp(token_id: bytes, version: int = 1, vt: float = 2.3, read_rate: float = 1.0, rssi: float = 1.0):
    return InventoryResponse(
        token_id=token_id, version=version, vt=vt, handle=1, read_rate=read_rate, rssi=rssi
    )


def make_db(n: int = 4, version: int = 1) -> TokenDb:
    db = TokenDb()
    for i in range(n):
        db.add(DbEntry(bytes([0x40 + i]) * 12, crypto.RandomSource(f"sk/{i}").key(), version))
    return db


# -- prelude -------------------------------------------------------------------


def test_prelude_pads_encrypts_and_chunks():
    plan = prelude(bytes(240), 2, crypto.RandomSource(1), payload_size=2)
    assert len(plan.chain.ciphertext) == 256  # always-pad adds a full block
    assert plan.chunks.count == 128
    recovered = crypto.skp_decrypt(plan.session_key, plan.chain)
    assert recovered == bytes(240)


def test_prelude_uses_fresh_randomness_per_session():
    rng = crypto.RandomSource(2)
    a = prelude(b"same firmware bytes!", 2, rng.fork("s1"))
    b = prelude(b"same firmware bytes!", 2, rng.fork("s2"))
    assert a.session_key != b.session_key
    assert a.chain.ciphertext != b.chain.ciphertext


def test_chunks_reassemble_to_ciphertext():
    plan = prelude(crypto.RandomSource(3).bytes(407), 2, crypto.RandomSource(4))
    assert plan.chunks.reassemble() == plan.chain.ciphertext


# -- association ------------------------------------------------------------------


def test_association_builds_material_for_all_valid_tokens():
    db = make_db(4)
    plan = prelude(b"fw", 2, crypto.RandomSource(5))
    responses = [resp(tid) for tid in sorted(db.entries)]
    material = security_association(db, plan, responses)
    assert set(material) == set(db.entries)
    for token_id, m in material.items():
        entry = db.get(token_id)
        unwrapped = crypto.skp_decrypt(
            entry.device_key,
            crypto.CipherBlockChain(iv=crypto.ZERO_IV, ciphertext=m.wrapped_key),
        )
        assert unwrapped == plan.session_key
        assert m.tag == crypto.mac_compute(
            entry.device_key, wire.validation_mac_input(b"fw", 1, 2)
        )


def test_association_excludes_unknown_ids_but_proceeds(caplog):
    db = make_db(2)
    plan = prelude(b"fw", 2, crypto.RandomSource(6))
    responses = [resp(bytes([0x99]) * 12)] + [resp(tid) for tid in sorted(db.entries)]
    with caplog.at_level(logging.WARNING):
        material = security_association(db, plan, responses)
    assert set(material) == set(db.entries)
    assert any("unknown token id" in r.message for r in caplog.records)


def test_association_strict_mode_aborts_on_unknown_id():
    db = make_db(1)
    plan = prelude(b"fw", 2, crypto.RandomSource(7))
    responses = [resp(bytes([0x99]) * 12)]
    with pytest.raises(NoEligibleTokens):
        security_association(db, plan, responses, strict_abort=True)


def test_association_skips_tokens_not_scheduled():
    db = make_db(2)
    first = sorted(db.entries)[0]
    db.get(first).valid = False
    plan = prelude(b"fw", 2, crypto.RandomSource(8))
    material = security_association(db, plan, [resp(t) for t in sorted(db.entries)])
    assert first not in material and len(material) == 1


def test_association_warns_when_update_not_advised(caplog):
    db = make_db(1)
    plan = prelude(b"fw", 2, crypto.RandomSource(9))
    target = sorted(db.entries)[0]
    with caplog.at_level(logging.WARNING):
        material = security_association(db, plan, [resp(target, vt=2.10)])
    pam = material[target].pam
    assert (pam.t_active_ms, pam.t_lpm_ms, pam.update_advised) == (9.0, 30.0, False)
    assert any("not advised" in r.message for r in caplog.records)


def test_association_with_no_eligible_tokens_raises():
    db = make_db(1)
    plan = prelude(b"fw", 2, crypto.RandomSource(10))
    with pytest.raises(NoEligibleTokens):
        security_association(db, plan, [])


def test_association_trusts_reported_version_for_the_tag(caplog):
    db = make_db(1, version=4)
    target = sorted(db.entries)[0]
    plan = prelude(b"fw", 9, crypto.RandomSource(11))
    with caplog.at_level(logging.WARNING):
        material = security_association(db, plan, [resp(target, version=6)])
    entry = db.get(target)
    assert material[target].tag == crypto.mac_compute(
        entry.device_key, wire.validation_mac_input(b"fw", 6, 9)
    )
    assert any("trusting the token" in r.message for r in caplog.records)


# -- pilot election ------------------------------------------------------------------


def test_lowest_vt_election():
    a, b, c = (bytes([x]) * 12 for x in (0x41, 0x42, 0x43))
    responses = [resp(a, vt=2.25), resp(b, vt=2.18), resp(c, vt=2.30)]
    assert elect_pilot(responses, PilotStrategy.LOWEST_VT) == b


def test_election_tie_breaks_to_smallest_id():
    a, b = bytes([0x41]) * 12, bytes([0x42]) * 12
    responses = [resp(b, vt=2.20), resp(a, vt=2.20)]
    assert elect_pilot(responses, PilotStrategy.LOWEST_VT) == a


def test_random_election_is_seed_stable():
    responses = [resp(bytes([x]) * 12) for x in (0x41, 0x42, 0x43)]
    first = elect_pilot(responses, PilotStrategy.RANDOM, crypto.RandomSource(7))
    second = elect_pilot(responses, PilotStrategy.RANDOM, crypto.RandomSource(7))
    assert first == second


@pytest.mark.parametrize(
    "strategy,expected_x",
    [
        (PilotStrategy.HIGHEST_VT, 0x43),
        (PilotStrategy.LOWEST_READ_RATE, 0x41),
        (PilotStrategy.HIGHEST_READ_RATE, 0x43),
        (PilotStrategy.LOWEST_RSSI, 0x41),
        (PilotStrategy.HIGHEST_RSSI, 0x43),
    ],
)
def test_other_strategies(strategy, expected_x):
    responses = [
        resp(bytes([0x41]) * 12, vt=2.1, read_rate=1.0, rssi=0.1),
        resp(bytes([0x42]) * 12, vt=2.2, read_rate=2.0, rssi=0.2),
        resp(bytes([0x43]) * 12, vt=2.3, read_rate=3.0, rssi=0.3),
    ]
    assert elect_pilot(responses, strategy) == bytes([expected_x]) * 12


@settings(max_examples=40, deadline=None)
@given(
    scale=st.floats(min_value=0.01, max_value=100.0, allow_nan=False),
    offset=st.floats(min_value=-1.0, max_value=1.0, allow_nan=False),
)
def test_lowest_vt_invariant_under_affine_rescaling(scale, offset):
    responses = [
        resp(bytes([0x41]) * 12, vt=2.25),
        resp(bytes([0x42]) * 12, vt=2.18),
        resp(bytes([0x43]) * 12, vt=2.30),
    ]
    rescaled = [
        InventoryResponse(r.token_id, r.version, r.vt * scale + offset, r.handle, r.read_rate, r.rssi)
        for r in responses
    ]
    assert elect_pilot(responses, PilotStrategy.LOWEST_VT) == elect_pilot(
        rescaled, PilotStrategy.LOWEST_VT
    )


# -- validation ------------------------------------------------------------------------


def test_validate_marks_updated_and_refreshes_db():
    db = make_db(2)
    plan = prelude(b"fw", 2, crypto.RandomSource(12))
    ids = sorted(db.entries)
    security_association(db, plan, [resp(t) for t in ids])
    outcome = validate(plan, [resp(ids[0], version=2), resp(ids[1], version=1)], db)
    assert outcome == {ids[0]: True, ids[1]: False}
    assert db.get(ids[0]).version == 2
    assert db.get(ids[1]).version == 1


# -- attestation -------------------------------------------------------------------------


def test_attest_challenge_round_trips_with_honest_token():
    db = make_db(1, version=2)
    target = sorted(db.entries)[0]
    reference = crypto.RandomSource(13).bytes(96)
    ch = attest_challenge(db, target, wire.ATTEST_ELABORATE, reference, crypto.RandomSource(14))
    entry = db.get(target)
    session_key = crypto.skp_decrypt(
        entry.device_key, crypto.CipherBlockChain(crypto.ZERO_IV, ch.wrapped_key)
    )
    honest = crypto.mac_compute(
        session_key, wire.attest_mac_input(ch.challenge, reference, target, 2)
    )
    assert attest_verify(ch.expected, honest)


def test_attest_detects_stale_firmware():
    db = make_db(1, version=2)
    target = sorted(db.entries)[0]
    reference = crypto.RandomSource(15).bytes(96)
    stale = crypto.RandomSource(16).bytes(96)
    ch = attest_challenge(db, target, wire.ATTEST_ELABORATE, reference, crypto.RandomSource(17))
    entry = db.get(target)
    session_key = crypto.skp_decrypt(
        entry.device_key, crypto.CipherBlockChain(crypto.ZERO_IV, ch.wrapped_key)
    )
    liar = crypto.mac_compute(
        session_key, wire.attest_mac_input(ch.challenge, stale, target, 2)
    )
    assert not attest_verify(ch.expected, liar)


def test_fast_mode_is_firmware_independent():
    db = make_db(1, version=2)
    target = sorted(db.entries)[0]
    rng_a = crypto.RandomSource(18)
    a = attest_challenge(db, target, wire.ATTEST_FAST, b"image one", rng_a)
    rng_b = crypto.RandomSource(18)
    b = attest_challenge(db, target, wire.ATTEST_FAST, b"image two", rng_b)
    assert a.expected == b.expected


def test_attest_replayed_response_fails_fresh_challenge():
    db = make_db(1, version=2)
    target = sorted(db.entries)[0]
    reference = b"fw"
    first = attest_challenge(db, target, wire.ATTEST_ELABORATE, reference, crypto.RandomSource(19))
    second = attest_challenge(db, target, wire.ATTEST_ELABORATE, reference, crypto.RandomSource(20))
    assert not attest_verify(second.expected, first.expected)


def test_attest_unknown_token_raises():
    db = make_db(1)
    with pytest.raises(UnknownToken):
        attest_challenge(db, b"\x00" * 12, wire.ATTEST_FAST, b"", crypto.RandomSource(21))


def test_random_forgery_fails():
    assert not attest_verify(crypto.RandomSource(22).bytes(16), crypto.RandomSource(23).bytes(16))


# -- end-to-end sessions -------------------------------------------------------------------


def test_happy_path_all_updated_first_attempt():
    sim, session, tokens, db, firmware = make_fleet(seed=30, n=4, firmware_len=407)
    report = session.run_update()
    assert report.all_updated and report.attempts == 1
    assert all(t.state.app_image == firmware for t in tokens)
    assert all(db.get(t.state.storage.token_id).version == 2 for t in tokens)
    # Every token ends with clean volatile state.
    assert all(t.state.scratch is None for t in tokens)


def test_report_throughput_recomputes_exactly():
    _, session, _, _, firmware = make_fleet(seed=31, n=2, firmware_len=115)
    report = session.run_update()
    assert report.throughput_bps == len(firmware) * 8 * report.updated / report.latency_s


def test_session_keys_never_repeat_across_sessions():
    keys = set()
    for label in ("one", "two", "three"):
        rng = crypto.RandomSource(40).fork(label)
        keys.add(prelude(b"fw", 2, rng).session_key)
    assert len(keys) == 3


def test_sequential_mode_updates_everyone():
    _, session, tokens, _, firmware = make_fleet(
        seed=32, n=2, firmware_len=115, send_mode=SendMode.SEQUENTIAL
    )
    report = session.run_update()
    assert report.all_updated
    assert all(t.state.app_image == firmware for t in tokens)


def test_end_to_end_attestation_over_the_air():
    _, session, tokens, _, _ = make_fleet(seed=33, n=1, firmware_len=64)
    report = session.run_update()
    assert report.all_updated
    assert session.attest(tokens[0].state.storage.token_id, wire.ATTEST_ELABORATE)
    assert session.attest(tokens[0].state.storage.token_id, wire.ATTEST_FAST)
