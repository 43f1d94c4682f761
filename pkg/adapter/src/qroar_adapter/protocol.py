"""Line-delimited JSON evaluator protocol, backend side.

One message per line over a child process's standard streams. Message
grammar (version 1), identical on both sides of the pipe:

    {"type":"hello","version":1}
    {"type":"eval","plan":{...},"lengths":[...],"window":N}
    {"type":"ok","ppl":{"<length>":ppl,...}}
    {"type":"error","message":"..."}

Encoding is canonical JSON: sorted keys, no whitespace. The validator is
closed over the exact key sets above so both ends reject anything outside
the grammar instead of guessing.
"""
from __future__ import annotations

import json
import math

PROTOCOL_VERSION = 1


class ProtocolError(ValueError):
    """A line violated the message grammar."""


def encode_message(message: dict) -> str:
    return json.dumps(message, sort_keys=True, separators=(",", ":"))


def hello_message() -> dict:
    return {"type": "hello", "version": PROTOCOL_VERSION}


def _fail(line: str, why: str) -> ProtocolError:
    shown = line if len(line) <= 200 else line[:200] + "..."
    return ProtocolError(f"{why}; offending line: {shown!r}")


def decode_message(line: str) -> dict:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise _fail(line, f"not valid JSON ({exc.msg})") from exc
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        raise _fail(line, "message must be an object with a string 'type'")
    mtype = msg["type"]
    if mtype == "hello":
        if set(msg) != {"type", "version"} or not isinstance(msg["version"], int):
            raise _fail(line, "hello must carry exactly an integer 'version'")
    elif mtype == "eval":
        if set(msg) != {"type", "plan", "lengths", "window"}:
            raise _fail(line, "eval must carry exactly 'plan', 'lengths', 'window'")
        plan = msg["plan"]
        if not isinstance(plan, dict) or set(plan) != {"mode", "scales", "bands", "pairing"}:
            raise _fail(line, "eval plan must carry exactly mode/scales/bands/pairing")
        if plan["mode"] not in ("shared", "symmetric"):
            raise _fail(line, f"unknown plan mode {plan['mode']!r}")
        if plan["pairing"] not in ("half_split", "interleaved"):
            raise _fail(line, f"unknown plan pairing {plan['pairing']!r}")
        scales = plan["scales"]
        if (
            not isinstance(scales, list)
            or not scales
            or any(
                not isinstance(g, (int, float)) or not math.isfinite(g) or g <= 0
                for g in scales
            )
        ):
            raise _fail(line, "plan scales must be a non-empty list of positive numbers")
        bands = plan["bands"]
        if (
            not isinstance(bands, list)
            or len(bands) != len(scales)
            or any(
                not (
                    isinstance(rng, list)
                    and len(rng) == 2
                    and all(isinstance(x, int) for x in rng)
                    and rng[0] < rng[1]
                )
                for rng in bands
            )
        ):
            raise _fail(line, "plan bands must be [lo, hi) integer ranges, one per scale")
        lengths = msg["lengths"]
        if (
            not isinstance(lengths, list)
            or not lengths
            or any(not isinstance(length, int) or length < 1 for length in lengths)
        ):
            raise _fail(line, "lengths must be a non-empty list of positive integers")
        if not isinstance(msg["window"], int) or msg["window"] < 1:
            raise _fail(line, "window must be a positive integer")
    elif mtype == "ok":
        if set(msg) != {"type", "ppl"} or not isinstance(msg["ppl"], dict) or not msg["ppl"]:
            raise _fail(line, "ok must carry exactly a non-empty 'ppl' object")
        for key, value in msg["ppl"].items():
            if not (isinstance(key, str) and key.isdigit() and int(key) > 0):
                raise _fail(line, f"ppl key {key!r} is not a positive integer string")
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
                raise _fail(line, f"ppl value for {key} must be a positive finite number")
    elif mtype == "error":
        if set(msg) != {"type", "message"} or not isinstance(msg["message"], str):
            raise _fail(line, "error must carry exactly a string 'message'")
    else:
        raise _fail(line, f"unknown message type {mtype!r}")
    return msg
