"""Slow, obviously-correct reference implementations used only by the tests."""

from decimal import Decimal, getcontext
from fractions import Fraction

getcontext().prec = 50


def softmax_decimal(severity, alpha):
    e = [(Decimal(repr(float(alpha))) * Decimal(repr(float(s)))).exp() for s in severity]
    tot = sum(e)
    return [x / tot for x in e]


def apportion(weights, total):
    """Hamilton apportionment on exact rationals; ties to the lowest index."""
    w = [Fraction(x) if not isinstance(x, Decimal) else Fraction(str(x)) for x in weights]
    s = sum(w)
    quotas = [x * total / s for x in w]
    base = [q.numerator // q.denominator for q in quotas]
    left = total - sum(base)
    order = sorted(range(len(w)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def floor_by_brute_force(alloc, eps, total):
    """Raise deficits to floor(eps*total), taking the shortfall from donors by exact Hamilton split of their surplus."""
    floor = (Fraction(repr(eps)) * total).__floor__()
    x = list(alloc)
    need = sum(max(0, floor - v) for v in x)
    donors = [i for i, v in enumerate(x) if v > floor]
    surplus = {i: x[i] - floor for i in donors}
    target = apportion([surplus[i] for i in donors], need) if need else [0] * len(donors)
    for i, c in zip(donors, target):
        x[i] -= c
    return [max(v, floor) for v in x]


def allocation_checker(alloc, available, eps, weights, demand=None):
    """Independent validator returning the set of violated rule names."""
    if any(type(v) is not int or v < 0 for v in alloc):
        return {"malformed"}
    bad = set()
    if sum(alloc) > available:
        bad.add("budget")
    floor = (Fraction(repr(eps)) * available).__floor__()
    for r, v in enumerate(alloc):
        if demand is None:
            need = floor
        elif demand[r] == 0:
            need = 0
        else:
            need = min(floor, demand[r])
        if v < need:
            bad.add("min_support")
    for a in range(len(alloc)):
        capped = demand is not None and alloc[a] >= demand[a]
        for b in range(len(alloc)):
            if a != b and not capped and weights[a] >= weights[b] and alloc[a] + 1 < alloc[b]:
                bad.add("severity")
    return bad
