"""Closed-form solution of one microgrid's trading subproblem.

Given its own selling price and the prices of connected sellers, a node
chooses how much to generate, buy and offer for sale to minimize

    C(e_gen) + sum_j gamma(e_buy[j]) + sum_j price_j * e_buy[j]
             - own_price * e_sell

subject to the internal energy balance

    e_gen = demand + e_sell - sum_j e_buy[j],   all quantities >= 0.

The optimum falls into exactly one of six regimes, distinguished by which
of (sell, buy, generate) are active:

    1  neither sells nor buys (generates exactly its demand)
    2  buys only
    3  generates and buys
    4  generates and sells
    5  buys and sells (generates nothing)
    6  generates, buys and sells

Each regime has a closed-form solution built from the inverse marginal
costs; regimes 2 and 3 need a scalar root (the premium of the node's
internal energy value over its own price), found by scanning the
piecewise-smooth supply curve between seller-activation breakpoints and
bisecting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .cost_models import CostModel

__all__ = [
    "LocalProblem",
    "LocalSolution",
    "CaseClassificationError",
    "classify",
    "solve_local",
    "solve_eta",
    "net_expenditure",
    "verify_kkt",
]

# Tolerance on every inequality in the case conditions. Boundaries between
# regimes are measure-zero and the solutions coincide there, so this only
# disambiguates ties.
CASE_EPS = 1e-9

# Energies below this are treated as inactive when checking multipliers.
ACTIVE_ATOL = 1e-9


class CaseClassificationError(RuntimeError):
    """No regime's conditions hold, even with boundary tolerance."""


@dataclass(frozen=True)
class LocalProblem:
    """One node's view of the market for a single round."""

    node: int
    demand: float                 # MWh it must consume this round
    gen_cost: CostModel
    transfer_cost: CostModel
    seller_prices: dict           # node -> $/MWh, connected sellers only
    own_price: float              # $/MWh this node charges buyers

    def __post_init__(self):
        if self.demand < 0:
            raise ValueError(f"demand must be >= 0, got {self.demand}")
        if not math.isfinite(self.own_price):
            raise ValueError(f"own price must be finite, got {self.own_price}")
        for j, lam in self.seller_prices.items():
            if not math.isfinite(lam):
                raise ValueError(f"seller {j} price must be finite, got {lam}")


@dataclass(frozen=True)
class LocalSolution:
    node: int
    case_id: int                  # 1..6
    e_gen: float                  # MWh generated
    e_sell: float                 # MWh offered for sale
    e_buy: dict                   # seller node -> MWh bought
    active_sellers: frozenset
    eta: float                    # $/MWh internal-price premium, 0 when unused

    def total_bought(self) -> float:
        return sum(self.e_buy.values())

    def balance_residual(self, demand: float) -> float:
        return self.e_gen - (demand + self.e_sell - self.total_bought())


class _Quantities:
    """Derived prices and clamped inverse marginals shared by the regimes."""

    def __init__(self, p: LocalProblem):
        self.p = p
        gen, tr = p.gen_cost, p.transfer_cost
        self.transfer = tr
        self.gen_at = gen.inverse_marginal      # clamped to 0 below cp0
        self.cp0 = gen.marginal(0.0)            # marginal cost of the first MWh
        self.cp_dem = gen.marginal(p.demand)    # marginal cost at own demand
        self.g0 = tr.marginal(0.0)              # marginal transfer cost at zero
        self.lam = p.own_price
        self.sellers = sorted(p.seller_prices)
        self.prices = p.seller_prices
        self.lam_min = min(p.seller_prices.values()) if p.seller_prices else math.inf
        # Supply available if the node prices energy internally at lam.
        self.own_gen = self.gen_at(self.lam)
        self.buy_at_own = self.total_buy_at(self.lam)
        # Purchases if the internal price sat exactly at the first-MWh
        # generation cost (the buy-only / buy-and-generate threshold).
        self.buy_at_cp0 = self.total_buy_at(self.cp0)

    def buy_at(self, q: float) -> dict:
        # Each seller supplies the quantity whose marginal transfer cost
        # matches the price headroom q - lam_j (zero when q is below the
        # delivered price of the first MWh).
        return {
            j: self.transfer.inverse_marginal(q - self.prices[j])
            for j in self.sellers
        }

    def total_buy_at(self, q: float) -> float:
        return sum(self.buy_at(q).values())


def _margins(q: _Quantities):
    """Per-regime margin = min over the regime's conditions of (lhs - rhs).

    A regime's conditions all hold iff its margin >= 0; the six regions
    partition price space, sharing only their boundaries.
    """
    e_c = q.p.demand
    lam, cp0, cp_dem, g0, lam_min = q.lam, q.cp0, q.cp_dem, q.g0, q.lam_min
    supply_own = q.own_gen + q.buy_at_own       # energy available at price lam

    if e_c > 0.0:
        m1 = min(cp_dem - lam, lam_min - (cp_dem - g0))
        m2 = min(cp0 - lam, e_c - supply_own, q.buy_at_cp0 - e_c)
        m3 = min(e_c - supply_own, e_c - q.buy_at_cp0, (cp_dem - g0) - lam_min)
    else:
        # With nothing to consume, buying only ever pays if it can be resold,
        # so the buy-to-consume regimes vanish and regime 1 widens.
        m1 = min(cp0 - lam, lam_min - (lam - g0))
        m2 = -math.inf
        m3 = -math.inf
    m4 = min(lam - cp_dem, lam_min - (lam - g0))
    m5 = min(cp0 - lam, (lam - g0) - lam_min, q.buy_at_own - e_c)
    m6 = min(lam - cp0, (lam - g0) - lam_min, supply_own - e_c)
    return (m1, m2, m3, m4, m5, m6)


def _classify(q: _Quantities):
    margins = _margins(q)
    for case_id, margin in enumerate(margins, start=1):
        if margin >= -CASE_EPS:
            if case_id in (2, 3):
                eta, active = _solve_eta(case_id, q)
                return case_id, active, eta
            if case_id in (5, 6):
                active = frozenset(
                    j for j in q.sellers if q.prices[j] < q.lam - q.g0
                )
                return case_id, active, 0.0
            return case_id, frozenset(), 0.0
    p = q.p
    raise CaseClassificationError(
        f"node {p.node}: no regime matched. own_price={p.own_price}, "
        f"demand={p.demand}, seller_prices={p.seller_prices}, "
        f"margins={margins}"
    )


def classify(p: LocalProblem):
    """Return (case_id, active_sellers, eta) for the regime that holds at p.

    Regimes are checked in order 1..6 with CASE_EPS slack; the first whose
    conditions all hold wins (ties only happen on region boundaries, where
    the solutions coincide).
    """
    return _classify(_Quantities(p))


def _solve_eta(case_id: int, q: _Quantities):
    e_c = q.p.demand

    def shortfall(eta: float) -> float:
        # Supply minus demand at internal price own_price + eta.
        total = q.total_buy_at(q.lam + eta)
        if case_id == 3:
            total += q.gen_at(q.lam + eta)
        return total - e_c

    breakpoints = [q.prices[j] - q.lam + q.g0 for j in q.sellers]
    if case_id == 3:
        breakpoints.append(q.cp0 - q.lam)
    breakpoints = sorted(b for b in breakpoints if b > 0.0)

    lo = 0.0
    if shortfall(0.0) >= 0.0:
        # Boundary with the sell regimes: supply already meets demand at the
        # node's own price, so the premium collapses to zero.
        eta = 0.0
    else:
        hi = None
        for b in breakpoints:
            if shortfall(b) >= 0.0:
                hi = b
                break
            lo = b
        if hi is None:
            # Past the last breakpoint supply keeps growing without bound
            # (in regime 2 because there is at least one active seller, in
            # regime 3 because generation is unbounded), so keep doubling.
            if case_id == 2 and not q.sellers:
                raise CaseClassificationError(
                    f"node {q.p.node}: no sellers, regime 2 cannot cover "
                    f"demand {e_c}"
                )
            hi = max(lo, 1.0)
            for _ in range(200):
                if shortfall(hi) >= 0.0:
                    break
                lo, hi = hi, hi * 2.0
            else:
                raise CaseClassificationError(
                    f"node {q.p.node}: generation plus purchases never reach "
                    f"demand {e_c}"
                )
        # Bisect to float resolution: the balance and stationarity residuals
        # of the returned solution inherit this accuracy.
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if shortfall(mid) < 0.0:
                lo = mid
            else:
                hi = mid
        eta = 0.5 * (lo + hi)

    active = frozenset(j for j in q.sellers if q.lam + eta - q.prices[j] > q.g0)
    return eta, active


def solve_eta(case_id: int, p: LocalProblem):
    """Root of the internal-price equation for regimes 2 and 3.

    eta is the premium of the node's internal energy value over its own
    price. Purchases switch on one by one as eta passes each seller's
    activation breakpoint, so the supply curve is piecewise smooth and
    nondecreasing: scan the breakpoints for a sign change, then bisect.
    """
    if case_id not in (2, 3):
        raise ValueError(f"eta is only defined for regimes 2 and 3, got {case_id}")
    return _solve_eta(case_id, _Quantities(p))


def _buy_with_exact_total(q: _Quantities, internal_price: float, total: float):
    """Purchases at the given internal price, nudged to sum exactly to total.

    The root for the internal price is only accurate to float resolution, so
    the raw purchase sum can miss the target by ~1e-12 MWh; the residual is
    absorbed by the largest purchase to make the energy balance exact.
    """
    buys = q.buy_at(internal_price)
    bought = sum(buys.values())
    if bought > 0.0:
        j_big = max(buys, key=buys.get)
        buys[j_big] = max(0.0, buys[j_big] + (total - bought))
    return buys


def solve_local(p: LocalProblem) -> LocalSolution:
    """The unique minimizer of the node's subproblem at the given prices."""
    q = _Quantities(p)
    case_id, active, eta = _classify(q)
    zero_buys = {j: 0.0 for j in q.sellers}

    if case_id == 1:
        return LocalSolution(p.node, 1, p.demand, 0.0, zero_buys, active, 0.0)

    if case_id == 2:
        buys = _buy_with_exact_total(q, q.lam + eta, p.demand)
        return LocalSolution(p.node, 2, 0.0, 0.0, buys, active, eta)

    if case_id == 3:
        buys = q.buy_at(q.lam + eta)
        e_gen = p.demand - sum(buys.values())
        if e_gen < 0.0:  # boundary with regime 2, off by root tolerance
            buys = _buy_with_exact_total(q, q.lam + eta, p.demand)
            e_gen = 0.0
        return LocalSolution(p.node, 3, e_gen, 0.0, buys, active, eta)

    if case_id == 4:
        e_sell = max(0.0, q.own_gen - p.demand)
        return LocalSolution(p.node, 4, p.demand + e_sell, e_sell, zero_buys,
                             active, 0.0)

    if case_id == 5:
        buys = q.buy_at(q.lam)
        e_sell = max(0.0, sum(buys.values()) - p.demand)
        if e_sell == 0.0:  # boundary: purchases exactly cover demand
            buys = _buy_with_exact_total(q, q.lam, p.demand)
        return LocalSolution(p.node, 5, 0.0, e_sell, buys, active, 0.0)

    # regime 6
    buys = q.buy_at(q.lam)
    e_gen = q.own_gen
    e_sell = max(0.0, e_gen + sum(buys.values()) - p.demand)
    if e_sell == 0.0:  # boundary: demand exactly absorbs generation + buys
        e_gen = max(0.0, p.demand - sum(buys.values()))
    return LocalSolution(p.node, 6, e_gen, e_sell, buys, active, 0.0)


def net_expenditure(p: LocalProblem, s: LocalSolution) -> float:
    """Generation + transfer + purchase cost minus sale income, in $."""
    _check_feasible(p, s)
    total = p.gen_cost.value(s.e_gen) - p.own_price * s.e_sell
    for j, amount in s.e_buy.items():
        total += p.transfer_cost.value(amount) + p.seller_prices[j] * amount
    return total


def _check_feasible(p: LocalProblem, s: LocalSolution, atol: float = 1e-6):
    if s.e_gen < -atol or s.e_sell < -atol or any(v < -atol for v in s.e_buy.values()):
        raise ValueError(f"node {p.node}: negative energies in solution")
    unknown = set(s.e_buy) - set(p.seller_prices)
    if unknown:
        raise ValueError(f"node {p.node}: purchases from non-sellers {unknown}")
    residual = s.balance_residual(p.demand)
    if abs(residual) > atol:
        raise ValueError(
            f"node {p.node}: energy balance violated by {residual} MWh"
        )


def verify_kkt(p: LocalProblem, s: LocalSolution) -> float:
    """Max absolute first-order optimality residual of s for problem p.

    Multipliers are reconstructed from the regime: the internal energy value
    q is own_price + eta for regimes 2-3, own_price for 4-6, and for regime
    1 the marginal generation cost at demand (at zero demand the node's own
    price, where the multiplier is degenerate). Stationarity then requires
    marginal costs to meet q on every active quantity, and the
    complementary-slackness direction to hold on every inactive one.
    """
    _check_feasible(p, s)
    gen, tr = p.gen_cost, p.transfer_cost
    cp0 = gen.marginal(0.0)

    if s.case_id == 1:
        q = gen.marginal(p.demand) if p.demand > ACTIVE_ATOL else p.own_price
    elif s.case_id in (2, 3):
        q = p.own_price + s.eta
    else:
        q = p.own_price

    residual = abs(s.balance_residual(p.demand))
    # generation: marginal cost equals q when generating, else q may not
    # exceed the cost of the first MWh
    if s.e_gen > ACTIVE_ATOL:
        residual = max(residual, abs(gen.marginal(s.e_gen) - q))
    else:
        residual = max(residual, q - cp0 if q > cp0 else 0.0)
    # selling: q equals own price while selling, else own price cannot beat q
    if s.e_sell > ACTIVE_ATOL:
        residual = max(residual, abs(q - p.own_price))
    else:
        residual = max(residual, p.own_price - q if p.own_price > q else 0.0)
    # purchases: delivered marginal price equals q on active links, and is
    # not below q on inactive ones
    for j, lam_j in p.seller_prices.items():
        amount = s.e_buy.get(j, 0.0)
        if amount > ACTIVE_ATOL:
            residual = max(residual, abs(tr.marginal(amount) + lam_j - q))
        else:
            delivered0 = tr.marginal(0.0) + lam_j
            residual = max(residual, q - delivered0 if q > delivered0 else 0.0)
    return residual
