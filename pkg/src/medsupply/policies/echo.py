"""External policy that answers every request with the built-in decision.

Run as ``python -m medsupply.policies.echo``. A run driven through it must be
identical to a built-in run, which makes it the adapter's equivalence harness.
"""

from __future__ import annotations

import sys

from ..agents import distributor_decide, hospital_decide, manufacturer_decide
from ..policy_adapter import PolicyRequest, encode_response


def decide(req: PolicyRequest):
    obs = req.observation
    if req.role == "hospital":
        return hospital_decide(obs)
    if req.role == "distributor":
        return distributor_decide(obs, req.orders)
    return manufacturer_decide(obs, req.regional_demand)


def main() -> int:
    out = sys.stdout.buffer
    for line in sys.stdin.buffer:
        if not line.strip():
            continue
        req = PolicyRequest.from_line(line)
        out.write(encode_response(req.agent_id, req.day, decide(req)))
        out.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
