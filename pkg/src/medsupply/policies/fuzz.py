"""Adversarial external policy for robustness testing.

Run as ``python -m medsupply.policies.fuzz [--seed N] [--max-delay-ms M] [--die-after K]``.
Each reply is drawn from a seeded mix of valid answers, out-of-range and
negative quantities, wrong types, stale ids, garbage bytes, oversized or
missing lines, slow replies, and (optionally) abrupt exit.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
import time

from ..policy_adapter import PolicyRequest, encode_response
from .echo import decide

MODES = (
    "valid", "scaled", "negative", "huge", "float", "string", "missing_field", "extra_region",
    "stale", "wrong_day", "garbage", "empty_object", "nan", "deep", "silent", "slow", "double",
)


def _mutate_vectors(body, fn):
    if isinstance(body, dict):
        return {k: _mutate_vectors(v, fn) for k, v in body.items()}
    if isinstance(body, list) and body and all(isinstance(v, int) for v in body):
        return [fn(v) for v in body]
    return body


def reply(req: PolicyRequest, mode: str, rng: random.Random) -> bytes | None:
    good = json.loads(encode_response(req.agent_id, req.day, decide(req)))
    body = good["decision"]
    if mode == "valid":
        pass
    elif mode == "scaled":
        body = _mutate_vectors(body, lambda v: int(v * rng.uniform(0, 3)) + rng.randint(0, 50))
    elif mode == "negative":
        body = _mutate_vectors(body, lambda v: -v - 1)
    elif mode == "huge":
        body = _mutate_vectors(body, lambda v: 10**rng.randint(9, 40))
    elif mode == "float":
        body = _mutate_vectors(body, lambda v: v + 0.5)
    elif mode == "string":
        body = _mutate_vectors(body, str)
    elif mode == "missing_field":
        body = {}
    elif mode == "extra_region":
        body = dict(body)
        body["allocations" if "allocations" in body else "shipments"] = {"99": [1]}
    elif mode == "stale":
        good["agent_id"] = "hospital-999"
    elif mode == "wrong_day":
        good["day"] = req.day - 1
    elif mode == "garbage":
        return bytes(rng.randrange(256) for _ in range(rng.randint(1, 80))).replace(b"\n", b"") + b"\n"
    elif mode == "empty_object":
        return b"{}\n"
    elif mode == "nan":
        return (json.dumps(good).replace("[", "[NaN, ", 1)).encode() + b"\n"
    elif mode == "deep":
        return b"[" * 100000 + b"]" * 100000 + b"\n"
    elif mode == "silent":
        return None
    good["decision"] = body
    return json.dumps(good).encode() + b"\n"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="medsupply.policies.fuzz")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-delay-ms", type=int, default=0)
    ap.add_argument("--die-after", type=int, default=0, help="exit abruptly after this many requests (0 = never)")
    args = ap.parse_args(argv)
    rng = random.Random(args.seed)
    out = sys.stdout.buffer
    for n, line in enumerate(sys.stdin.buffer, start=1):
        if args.die_after and n > args.die_after:
            return 3
        try:
            req = PolicyRequest.from_line(line)
        except Exception:
            continue
        mode = rng.choice(MODES)
        if mode == "slow" and args.max_delay_ms:
            time.sleep(rng.uniform(0, args.max_delay_ms) / 1000.0)
            mode = "valid"
        elif mode == "slow":
            mode = "valid"
        if mode == "double":
            out.write(reply(req, "garbage", rng))
            mode = "valid"
        data = reply(req, mode, rng)
        if data is not None:
            out.write(data)
        out.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
