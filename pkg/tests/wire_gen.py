"""Random valid wire messages for round-trip and fuzz tests."""

import random

from spotsync.wire import (
    AckStatus,
    AdjustBody,
    ClientMode,
    Kind,
    Message,
    ProbeBody,
    ProbeRespBody,
    RegisterAckBody,
    RegistrationBody,
    Timestamps,
    WireStyle,
)

I64 = (-(2**63), 2**63 - 1)


def _i64(rng):
    # mix extremes with ordinary magnitudes
    r = rng.random()
    if r < 0.05:
        return rng.choice(I64)
    if r < 0.5:
        return rng.randint(-(10**13), 10**13)
    return rng.randint(*I64)


def random_message(rng: random.Random) -> Message:
    kind = Kind(rng.randint(1, 7))
    if kind in (Kind.THICK_REQ, Kind.THICK_RESP):
        body = Timestamps(_i64(rng), _i64(rng), _i64(rng), _i64(rng))
    elif kind is Kind.REGISTER:
        body = RegistrationBody(
            rng.choice(list(ClientMode)), rng.choice(list(WireStyle)), rng.randint(1, 2**32 - 1), rng.randint(0, 255)
        )
    elif kind is Kind.REGISTER_ACK:
        body = RegisterAckBody(rng.choice(list(AckStatus)), rng.randint(0, 2**32 - 1))
    elif kind is Kind.PROBE:
        body = ProbeBody(_i64(rng))
    elif kind is Kind.PROBE_RESP:
        body = ProbeRespBody(_i64(rng), _i64(rng), _i64(rng))
    else:
        body = AdjustBody(_i64(rng), _i64(rng), rng.randint(0, 2**32 - 1))
    return Message(kind, rng.randint(0, 2**64 - 1), rng.randint(0, 2**32 - 1), body)
