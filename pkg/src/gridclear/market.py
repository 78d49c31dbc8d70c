"""Round-based market clearing by subgradient price coordination.

Every node posts a selling price, solves its own cost minimization against
the neighbors' posted prices, bids for the energy it wants to buy, and then
moves its own price by the gap between what neighbors requested from it and
what it offered. The prices are the dual variables of the supply-demand
coupling constraints, so the trace tracks the dual value alongside a
feasibilized primal cost; their gap closing is the convergence signal.

All inter-node data flows through a transport (see transport module): the
in-process loopback for `run`, or TCP sockets when each node is a separate
process driving `run_agent`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cost_models import CostModel
from .local_solver import (LocalProblem, LocalSolution, net_expenditure,
                           solve_local)
from .topology import Topology, in_sellers, out_buyers
from .transport import (LoopbackTransport, Message, MessageKind,
                        ProtocolError, exchange_round)

__all__ = [
    "StepSchedule",
    "Scenario",
    "IterationTrace",
    "TradingAgent",
    "MarketState",
    "init_prices",
    "subgradient",
    "dual_value",
    "feasibilize_and_cost",
    "new_state",
    "step",
    "run",
    "run_agent",
]


@dataclass(frozen=True)
class StepSchedule:
    """Diminishing price-update step: alpha(k) = alpha0 / (1 + k/kappa)."""

    alpha0: float = 0.5     # ($/MWh) per MWh of mismatch, at round 0
    kappa: float = 1000.0   # rounds until the step has halved

    def __post_init__(self):
        if not (math.isfinite(self.alpha0) and self.alpha0 > 0):
            raise ValueError(f"alpha0 must be positive, got {self.alpha0}")
        if not (math.isfinite(self.kappa) and self.kappa > 0):
            raise ValueError(f"kappa must be positive, got {self.kappa}")

    def alpha(self, k: int) -> float:
        if k < 0:
            raise ValueError(f"round index must be nonnegative, got {k}")
        return self.alpha0 / (1.0 + k / self.kappa)


@dataclass(frozen=True)
class Scenario:
    """One market instance: who can trade with whom, at what cost."""

    topology: Topology
    demands: tuple               # MWh per node
    gen_costs: tuple             # CostModel per node
    transfer_cost: CostModel
    step: StepSchedule = StepSchedule()
    tol_gap: float = 1e-4        # relative duality gap at convergence
    tol_mismatch: float = 1e-3   # MWh, max supply-demand mismatch
    max_iters: int = 20000
    seed: int = 0

    def __post_init__(self):
        m = self.topology.m
        demands = tuple(float(d) for d in self.demands)
        gen_costs = tuple(self.gen_costs)
        object.__setattr__(self, "demands", demands)
        object.__setattr__(self, "gen_costs", gen_costs)
        if len(demands) != m:
            raise ValueError(f"{len(demands)} demands for {m} nodes")
        if len(gen_costs) != m:
            raise ValueError(f"{len(gen_costs)} generation costs for {m} nodes")
        for d in demands:
            if not (math.isfinite(d) and d >= 0.0):
                raise ValueError(f"demands must be nonnegative, got {d}")
        if not (math.isfinite(self.tol_gap) and self.tol_gap > 0):
            raise ValueError(f"tol_gap must be positive, got {self.tol_gap}")
        if not (math.isfinite(self.tol_mismatch) and self.tol_mismatch > 0):
            raise ValueError(
                f"tol_mismatch must be positive, got {self.tol_mismatch}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be at least 1, got {self.max_iters}")


@dataclass
class IterationTrace:
    """Per-round history of a market run.

    Row k holds the prices the nodes used during round k together with
    everything computed from them; the price update happens after the row
    is recorded, so the last row is self-consistent at convergence.
    """

    m: int
    prices: list = field(default_factory=list)        # tuple of $/MWh
    bids: list = field(default_factory=list)          # M×M tuples, row = seller
    subgradients: list = field(default_factory=list)  # tuple of MWh
    duals: list = field(default_factory=list)         # $
    best_duals: list = field(default_factory=list)    # $
    primals: list = field(default_factory=list)       # $
    gaps: list = field(default_factory=list)          # $, primal - best dual
    cases: list = field(default_factory=list)         # tuple of case ids
    converged: bool = False

    def rounds(self) -> int:
        return len(self.prices)

    @property
    def final_prices(self):
        return self.prices[-1]

    @property
    def final_bids(self):
        return self.bids[-1]

    @property
    def final_cases(self):
        return self.cases[-1]

    def append(self, prices, bids, subgrad, dual, primal, cases) -> None:
        best = max(self.best_duals[-1], dual) if self.best_duals else dual
        self.prices.append(tuple(float(x) for x in prices))
        self.bids.append(tuple(tuple(float(x) for x in row) for row in bids))
        self.subgradients.append(tuple(float(x) for x in subgrad))
        self.duals.append(float(dual))
        self.best_duals.append(float(best))
        self.primals.append(float(primal))
        self.gaps.append(float(primal) - float(best))
        self.cases.append(tuple(int(c) for c in cases))

    def trace_csv(self) -> str:
        """Full history, one row per round."""
        m = self.m
        header = (["k"]
                  + [f"lambda_{i}" for i in range(m)]
                  + [f"subgrad_{i}" for i in range(m)]
                  + ["dual", "best_dual", "primal", "gap"]
                  + [f"case_{i}" for i in range(m)])
        lines = [",".join(header)]
        for k in range(self.rounds()):
            row = ([str(k)]
                   + [repr(x) for x in self.prices[k]]
                   + [repr(x) for x in self.subgradients[k]]
                   + [repr(self.duals[k]), repr(self.best_duals[k]),
                      repr(self.primals[k]), repr(self.gaps[k])]
                   + [str(c) for c in self.cases[k]])
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def trades_csv(self) -> str:
        """Final bid matrix; row i lists what each node bought from node i."""
        lines = [",".join(repr(x) for x in row) for row in self.final_bids]
        return "\n".join(lines) + "\n"


class TradingAgent:
    """One node's market behavior.

    Holds only what the node itself may know: its own demand and costs, its
    own price, the prices its potential suppliers posted, and the bids
    addressed to it. Everything else arrives as messages.
    """

    def __init__(self, node: int, scenario: Scenario):
        self.node = node
        top = scenario.topology
        self.demand = scenario.demands[node]
        self.gen_cost = scenario.gen_costs[node]
        self.transfer_cost = scenario.transfer_cost
        self.sellers = sorted(in_sellers(top, node))   # nodes this one may buy from
        self.buyers = sorted(out_buyers(top, node))    # nodes that may buy from this one
        self.price = float(self.gen_cost.marginal(self.demand))
        self.seller_prices = {}
        self.received_bids = {}
        self.problem = None
        self.solution = None

    def price_messages(self, round_no: int):
        return [Message(round_no, self.node, j, MessageKind.PRICE, self.price)
                for j in self.buyers]

    def take_prices(self, inbox: dict) -> None:
        if set(inbox) != set(self.sellers):
            raise ProtocolError(
                f"node {self.node} expected prices from {self.sellers}, "
                f"got {sorted(inbox)}")
        self.seller_prices = {j: inbox[j].value for j in self.sellers}

    def solve(self) -> LocalSolution:
        self.problem = LocalProblem(
            node=self.node, demand=self.demand, gen_cost=self.gen_cost,
            transfer_cost=self.transfer_cost,
            seller_prices=dict(self.seller_prices), own_price=self.price)
        self.solution = solve_local(self.problem)
        return self.solution

    def bid_messages(self, round_no: int):
        if self.solution is None:
            raise RuntimeError(f"node {self.node} has not solved this round")
        return [Message(round_no, self.node, j, MessageKind.BID,
                        float(self.solution.e_buy.get(j, 0.0)))
                for j in self.sellers]

    def take_bids(self, inbox: dict) -> None:
        if set(inbox) != set(self.buyers):
            raise ProtocolError(
                f"node {self.node} expected bids from {self.buyers}, "
                f"got {sorted(inbox)}")
        self.received_bids = {j: inbox[j].value for j in self.buyers}

    def mismatch(self) -> float:
        """Energy requested from this node minus what it offered, MWh."""
        requested = 0.0
        for j in self.buyers:   # ascending ids: fixed summation order
            requested += self.received_bids[j]
        return requested - self.solution.e_sell

    def update_price(self, alpha: float) -> float:
        m = self.mismatch()
        self.price = max(0.0, self.price + alpha * m)
        return m


# ---------------------------------------------------------------------------
# whole-market views (initialization, instrumentation, primal recovery)
# ---------------------------------------------------------------------------

def init_prices(scenario: Scenario) -> np.ndarray:
    """Starting prices: each node's standalone marginal cost at its demand."""
    return np.array([scenario.gen_costs[i].marginal(scenario.demands[i])
                     for i in range(scenario.topology.m)], dtype=float)


def subgradient(solutions, top: Topology) -> np.ndarray:
    """Per-node supply-demand mismatch: requested-from-node minus offered."""
    if len(solutions) != top.m:
        raise ValueError(f"{len(solutions)} solutions for {top.m} nodes")
    out = np.zeros(top.m)
    for i in range(top.m):
        requested = 0.0
        for j in sorted(out_buyers(top, i)):
            requested += solutions[j].e_buy.get(i, 0.0)
        out[i] = requested - solutions[i].e_sell
    return out


def dual_value(prices, scenario: Scenario) -> float:
    """Sum of per-node optimal net expenditures at the given prices."""
    total = 0.0
    for i in range(scenario.topology.m):
        p = LocalProblem(
            node=i, demand=scenario.demands[i],
            gen_cost=scenario.gen_costs[i],
            transfer_cost=scenario.transfer_cost,
            seller_prices={j: float(prices[j])
                           for j in sorted(in_sellers(scenario.topology, i))},
            own_price=float(prices[i]))
        total += net_expenditure(p, solve_local(p))
    return total


def feasibilize_and_cost(bids, scenario: Scenario):
    """Turn a bid matrix into a feasible operating point and price it.

    Trades are taken verbatim (row = seller); each node then generates
    whatever its demand plus outgoing trades still require, floored at
    zero. Returns (trades, total cost in $).
    """
    top = scenario.topology
    m = top.m
    B = np.asarray(bids, dtype=float)
    if B.shape != (m, m):
        raise ValueError(f"bid matrix shape {B.shape}, expected {(m, m)}")
    for i in range(m):
        for j in range(m):
            if B[i][j] < 0.0:
                raise ValueError(f"negative bid {B[i][j]} at [{i}][{j}]")
            if B[i][j] != 0.0 and not top.adj[i][j]:
                raise ValueError(f"bid on missing edge {i}->{j}")
    sold = B.sum(axis=1)
    bought = B.sum(axis=0)
    cost = 0.0
    for i in range(m):
        g = max(0.0, scenario.demands[i] + sold[i] - bought[i])
        cost += scenario.gen_costs[i].value(g)
    for i, j in top.edges():
        cost += scenario.transfer_cost.value(B[i][j])
    return B.copy(), float(cost)


# ---------------------------------------------------------------------------
# loopback driver
# ---------------------------------------------------------------------------

@dataclass
class MarketState:
    round: int
    agents: list
    transport: LoopbackTransport
    trace: IterationTrace


def new_state(scenario: Scenario) -> MarketState:
    m = scenario.topology.m
    agents = [TradingAgent(i, scenario) for i in range(m)]
    return MarketState(0, agents, LoopbackTransport(m), IterationTrace(m))


def step(state: MarketState, scenario: Scenario) -> MarketState:
    """One full synchronous round: prices out, local solves, bids out,
    then every node updates its own price. Appends one trace row."""
    k = state.round
    agents = state.agents
    tr = state.transport

    for a in agents:
        tr.post(a.price_messages(k))
    for a in agents:
        a.take_prices(tr.collect(a.node, k, MessageKind.PRICE, a.sellers))

    for a in agents:
        try:
            a.solve()
        except Exception as e:
            raise RuntimeError(
                f"local solve failed at node {a.node}, round {k}: {e}") from e

    for a in agents:
        tr.post(a.bid_messages(k))
    for a in agents:
        a.take_bids(tr.collect(a.node, k, MessageKind.BID, a.buyers))

    m = len(agents)
    bids = [[0.0] * m for _ in range(m)]
    for j, a in enumerate(agents):
        for i, amount in a.solution.e_buy.items():
            bids[i][j] = float(amount)
    prices = [a.price for a in agents]
    sg = [a.mismatch() for a in agents]
    dual = 0.0
    for a in agents:
        dual += net_expenditure(a.problem, a.solution)
    _, primal = feasibilize_and_cost(bids, scenario)
    state.trace.append(prices, bids, sg, dual, primal,
                       [a.solution.case_id for a in agents])

    alpha = scenario.step.alpha(k)
    for a in agents:
        a.update_price(alpha)
    state.round += 1
    return state


def _row_converged(trace: IterationTrace, scenario: Scenario) -> bool:
    rel_gap = trace.gaps[-1] / max(1e-12, abs(trace.primals[-1]))
    worst = max(abs(x) for x in trace.subgradients[-1])
    return rel_gap <= scenario.tol_gap and worst <= scenario.tol_mismatch


def run(scenario: Scenario, rounds: int | None = None) -> IterationTrace:
    """Drive the market over the loopback transport.

    By default, iterates until the relative duality gap and the worst
    supply-demand mismatch both fall inside the scenario tolerances, or
    max_iters rounds elapse; the trace's `converged` flag tells which. Pass
    `rounds` to run a fixed number of rounds instead (the convergence test
    is still evaluated on the last row).
    """
    state = new_state(scenario)
    limit = scenario.max_iters if rounds is None else rounds
    for _ in range(limit):
        step(state, scenario)
        if rounds is None and _row_converged(state.trace, scenario):
            state.trace.converged = True
            return state.trace
    if rounds is not None and state.trace.rounds() > 0:
        state.trace.converged = _row_converged(state.trace, scenario)
    return state.trace


# ---------------------------------------------------------------------------
# per-process driver (socket mode)
# ---------------------------------------------------------------------------

def run_agent(scenario: Scenario, node: int, rounds: int, transport) -> dict:
    """Run one node for a fixed number of rounds over the given transport.

    Every process in the mesh must use the same round count. Returns the
    node's price history (the price used in each round, matching the trace
    rows of a loopback run) and its final post-update price.
    """
    if not 0 <= node < scenario.topology.m:
        raise ValueError(f"no node {node} in a {scenario.topology.m}-node scenario")
    agent = TradingAgent(node, scenario)
    history = []
    cases = []
    for k in range(rounds):
        inbox = exchange_round(transport, node, k, MessageKind.PRICE,
                               agent.price_messages(k), agent.sellers)
        agent.take_prices(inbox)
        agent.solve()
        inbox = exchange_round(transport, node, k, MessageKind.BID,
                               agent.bid_messages(k), agent.buyers)
        agent.take_bids(inbox)
        history.append(agent.price)
        cases.append(agent.solution.case_id)
        agent.update_price(scenario.step.alpha(k))
    return {
        "node": node,
        "rounds": rounds,
        "price_history": history,
        "final_price": agent.price,
        "case_history": cases,
    }
