#!/usr/bin/env python3
"""Writes the test corpus: four short public-domain tunes as raw SMF bytes.

The files deliberately mix format 0 and 1, several divisions, running status
and note-on-velocity-0 note-offs so the reader sees the common variants.

    python3 scripts/make_fixtures.py crates/core/tests/fixtures/corpus
"""

import struct
import sys
from pathlib import Path

NAMES = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}


def pitch(name):
    """'C4' -> 60, 'F#4' -> 66."""
    step = NAMES[name[0]]
    rest = name[1:]
    if rest.startswith("#"):
        step += 1
        rest = rest[1:]
    return 12 * (int(rest) + 1) + step


def vlq(n):
    out = [n & 0x7F]
    n >>= 7
    while n:
        out.append(0x80 | (n & 0x7F))
        n >>= 7
    return bytes(reversed(out))


def chunk(tag, body):
    return tag + struct.pack(">I", len(body)) + body


def header(fmt, ntracks, division):
    return chunk(b"MThd", struct.pack(">HHH", fmt, ntracks, division))


def tempo_event(bpm):
    micros = round(60_000_000 / bpm)
    return b"\xff\x51\x03" + micros.to_bytes(3, "big")


def timeline(notes, unit, channel, velocity):
    """notes: list of (name or None, length in units). Returns absolute events."""
    events = []
    t = 0
    for i, (name, length) in enumerate(notes):
        if name is not None:
            v = velocity(i)
            events.append((t, 1, bytes([0x90 | channel, pitch(name), v])))
            events.append((t + length * unit - unit // 8, 0, (channel, pitch(name))))
        t += length * unit
    return events, t


def encode(events, running_status, off_as_zero_on):
    """events: (tick, order, payload). Note-offs (order 0) sort first at a tick."""
    body = b""
    last = 0
    status = None
    for tick, order, payload in sorted(events, key=lambda e: (e[0], e[1])):
        if order == 0:
            ch, p = payload
            payload = bytes([0x90 | ch, p, 0]) if off_as_zero_on else bytes([0x80 | ch, p, 0x40])
        body += vlq(tick - last)
        last = tick
        if payload[0] < 0xF0 and running_status and payload[0] == status:
            body += payload[1:]
        else:
            body += payload
            status = payload[0] if payload[0] < 0xF0 else None
    return body


def end_of_track(delta=0):
    return vlq(delta) + b"\xff\x2f\x00"


def accent(period, strong=96, weak=72):
    return lambda i: strong if i % period == 0 else weak


TWINKLE = [
    ("C4", 2), ("C4", 2), ("G4", 2), ("G4", 2), ("A4", 2), ("A4", 2), ("G4", 4),
    ("F4", 2), ("F4", 2), ("E4", 2), ("E4", 2), ("D4", 2), ("D4", 2), ("C4", 4),
    ("G4", 2), ("G4", 2), ("F4", 2), ("F4", 2), ("E4", 2), ("E4", 2), ("D4", 4),
    ("G4", 2), ("G4", 2), ("F4", 2), ("F4", 2), ("E4", 2), ("E4", 2), ("D4", 4),
    ("C4", 2), ("C4", 2), ("G4", 2), ("G4", 2), ("A4", 2), ("A4", 2), ("G4", 4),
    ("F4", 2), ("F4", 2), ("E4", 2), ("E4", 2), ("D4", 2), ("D4", 2), ("C4", 4),
]
TWINKLE_BASS = [
    ("C3", 8), ("F3", 4), ("C3", 4), ("F3", 4), ("C3", 4), ("G3", 4), ("C3", 4),
    ("C3", 4), ("G3", 4), ("C3", 4), ("G3", 4),
    ("C3", 8), ("F3", 4), ("C3", 4), ("F3", 4), ("C3", 4), ("G3", 4), ("C3", 4),
]

ODE = [
    ("E4", 2), ("E4", 2), ("F4", 2), ("G4", 2), ("G4", 2), ("F4", 2), ("E4", 2), ("D4", 2),
    ("C4", 2), ("C4", 2), ("D4", 2), ("E4", 2), ("E4", 3), ("D4", 1), ("D4", 4),
    ("E4", 2), ("E4", 2), ("F4", 2), ("G4", 2), ("G4", 2), ("F4", 2), ("E4", 2), ("D4", 2),
    ("C4", 2), ("C4", 2), ("D4", 2), ("E4", 2), ("D4", 3), ("C4", 1), ("C4", 4),
]

FRERE = (
    [("C4", 2), ("D4", 2), ("E4", 2), ("C4", 2)] * 2
    + [("E4", 2), ("F4", 2), ("G4", 4)] * 2
    + [("G4", 1), ("A4", 1), ("G4", 1), ("F4", 1), ("E4", 2), ("C4", 2)] * 2
    + [("C4", 2), ("G3", 2), ("C4", 4)] * 2
)

MINUET = [
    ("D5", 2), ("G4", 1), ("A4", 1), ("B4", 1), ("C5", 1),
    ("D5", 2), ("G4", 2), ("G4", 2),
    ("E5", 2), ("C5", 1), ("D5", 1), ("E5", 1), ("F#5", 1),
    ("G5", 2), ("G4", 2), ("G4", 2),
    ("C5", 2), ("D5", 1), ("C5", 1), ("B4", 1), ("A4", 1),
    ("B4", 2), ("C5", 1), ("B4", 1), ("A4", 1), ("G4", 1),
    ("F#4", 2), ("G4", 1), ("A4", 1), ("B4", 1), ("G4", 1),
    ("A4", 6),
]
MINUET_BASS = [
    ("G3", 4), ("A3", 2), ("B3", 6), ("C4", 6), ("B3", 6),
    ("A3", 6), ("G3", 6), ("D4", 2), ("B3", 2), ("G3", 2), ("D4", 2), ("D3", 2), ("C4", 2),
]


def twinkle():
    # format 1, 480 tpq, conductor track + two instrument tracks
    unit = 240
    conductor = chunk(b"MTrk", vlq(0) + tempo_event(100) + end_of_track())
    tracks = [conductor]
    for notes, ch, program, vel in [(TWINKLE, 0, 0, accent(4)), (TWINKLE_BASS, 1, 32, accent(2, 80, 64))]:
        events, end = timeline(notes, unit, ch, vel)
        events.append((0, -1, bytes([0xC0 | ch, program])))
        body = encode(events, running_status=False, off_as_zero_on=False)
        last = max(t for t, _, _ in events)
        tracks.append(chunk(b"MTrk", body + end_of_track(end - last)))
    return header(1, len(tracks), 480) + b"".join(tracks)


def ode_to_joy():
    # format 1, a single track at 96 tpq with no tempo event
    unit = 48
    events, _ = timeline(ODE, unit, 0, lambda i: 60 + (i % 3) * 12)
    events.append((0, -1, bytes([0xC0, 73])))
    body = encode(events, running_status=True, off_as_zero_on=False)
    return header(1, 1, 96) + chunk(b"MTrk", body + end_of_track())


def frere_jacques():
    # format 0, 240 tpq, running status with note-on velocity 0 as note-off
    unit = 120
    events, _ = timeline(FRERE, unit, 0, accent(4, 88, 70))
    events.append((0, -2, tempo_event(120)))
    events.append((0, -1, bytes([0xC0, 19])))
    body = encode(events, running_status=True, off_as_zero_on=True)
    return header(0, 1, 240) + chunk(b"MTrk", body + end_of_track())


def minuet():
    # format 0, 480 tpq, two channels interleaved in one chunk
    unit = 240
    high, _ = timeline(MINUET, unit, 0, accent(6, 90, 70))
    low, _ = timeline(MINUET_BASS, unit, 1, accent(3, 76, 60))
    events = high + low
    events.append((0, -2, tempo_event(132)))
    events.append((0, -1, bytes([0xC0, 6])))
    events.append((0, -1, bytes([0xC1, 42])))
    body = encode(events, running_status=True, off_as_zero_on=False)
    return header(0, 1, 480) + chunk(b"MTrk", body + end_of_track())


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/corpus")
    out.mkdir(parents=True, exist_ok=True)
    for name, build in [
        ("twinkle.mid", twinkle),
        ("ode_to_joy.mid", ode_to_joy),
        ("frere_jacques.mid", frere_jacques),
        ("minuet.mid", minuet),
    ]:
        (out / name).write_bytes(build())
        print(out / name)


if __name__ == "__main__":
    main()
