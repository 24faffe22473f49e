"""Integer apportionment helpers shared by the agent layer and the ledger.

All quantities in the simulator are whole units, so every proportional split
goes through :func:`largest_remainder`. Remainders are quantized before ranking
so that float noise at the 1e-12 level (for example from adding a constant to
every severity score) cannot reorder regions.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Sequence

_QUANT = 1e-9


def exact_fraction(value: float) -> Fraction:
    """Decimal-faithful Fraction of a config float (0.29 -> 29/100, not its binary neighbour)."""
    if not math.isfinite(value):
        raise ValueError(f"non-finite value {value!r}")
    return Fraction(repr(float(value)))


def floor_share(epsilon: float, total: int) -> int:
    """floor(epsilon * total), evaluated exactly."""
    return math.floor(exact_fraction(epsilon) * int(total))


def largest_remainder(
    weights: Sequence[float],
    total: int,
    prefer: Sequence[int] | None = None,
) -> list[int]:
    """Split ``total`` units in proportion to ``weights``.

    Each entry gets ``floor(quota)``; leftover units go to the largest remainders.
    Ties go to the smallest ``prefer`` value (when given), then the lowest index.
    A zero weight vector yields all zeros unless ``total`` is zero too.
    """
    total = int(total)
    if total < 0:
        raise ValueError("total must be >= 0")
    n = len(weights)
    if n == 0:
        if total:
            raise ValueError("cannot apportion units over zero recipients")
        return []
    w = [float(x) for x in weights]
    if any(not math.isfinite(x) or x < 0 for x in w):
        raise ValueError(f"weights must be finite and non-negative: {weights!r}")
    s = math.fsum(w)
    if s <= 0:
        if total:
            raise ValueError("cannot apportion units with all-zero weights")
        return [0] * n

    base = []
    rems = []
    for x in w:
        q = round(x / s * total / _QUANT) * _QUANT
        f = math.floor(q)
        base.append(int(f))
        rems.append(round(q - f, 9))
    left = total - sum(base)
    assert 0 <= left <= n, (left, n)
    pref = list(prefer) if prefer is not None else [0] * n
    order = sorted(range(n), key=lambda i: (-rems[i], pref[i], i))
    for i in order[:left]:
        base[i] += 1
    return base
