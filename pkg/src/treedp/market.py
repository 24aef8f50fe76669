"""Financial market models on scenario trees.

A model holds, per node: marginal prices of the risky assets (the
riskless asset has price 1 at all times), a trading cost integrand
(none, or superlinear power costs of trade size), optional box
constraints on risky holdings, claims payable at the node, and an
endowment at the leaves.  Preferences are a nonconcave utility of
terminal wealth, equivalently the disutility V(c) = -u(-c) of terminal
expenditure.

Two builders turn a model into a solvable problem:

* ``build_problem_cash``: decisions are the risky holdings, cash is
  eliminated through the wealth dynamics, and the leaf objective values
  the liquidated terminal position.
* ``build_problem_terminal``: decisions are full portfolios (cash and
  risky), intermediate spending is constrained nonpositive, and the
  terminal disutility is applied to the final expenditure.

The two formulations have the same optimal value; the test suite checks
this on every fixture.  ``validate`` decides the standing assumptions
analytically per atom family and explains which existence route applies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import efun
from .dp import Problem, StateMap
from .efun import (
    AffinePrecompose,
    ExtFun,
    IndicatorBox,
    Sampled1D,
    SShapedDisutility,
    Sum,
)
from .tree import Node, ScenarioTree, TreeFormatError, tree_from_records, tree_to_records

INF = math.inf


class InvalidModel(ValueError):
    """The market data violate a structural requirement."""


class NoCashAccount(ValueError):
    """The cash-reduced builder needs a perfectly liquid riskless asset."""


# ---------------------------------------------------------------------------
# cost integrands
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Frictionless:
    """Zero trading cost beyond the marginal price."""

    def is_frictionless(self) -> bool:
        return True

    def cost_many(self, node: Node, D: np.ndarray) -> np.ndarray:
        return np.zeros(D.shape[0])

    def to_dict(self) -> dict:
        return {"kind": "frictionless"}


@dataclass(frozen=True)
class PowerIlliquidity:
    """Superlinear illiquidity cost: coeff * sum_i |d_i|**exponent per trade d.

    Parameters may be overridden per node (node id -> (coeff, exponent)).
    """

    coeff: float
    exponent: float
    per_node: Mapping[str, tuple[float, float]] | None = None

    def __post_init__(self):
        for lam, p in [(self.coeff, self.exponent)] + list((self.per_node or {}).values()):
            if not lam > 0:
                raise InvalidModel("cost coefficient must be > 0")
            if not p > 1:
                raise InvalidModel("cost exponent must be > 1 (superlinear)")

    def is_frictionless(self) -> bool:
        return False

    def params_at(self, node_id: str) -> tuple[float, float]:
        if self.per_node and node_id in self.per_node:
            return self.per_node[node_id]
        return self.coeff, self.exponent

    def cost_many(self, node: Node, D: np.ndarray) -> np.ndarray:
        lam, p = self.params_at(node.id)
        return lam * (np.abs(D) ** p).sum(axis=1)

    def to_dict(self) -> dict:
        d: dict = {"kind": "power", "coeff": self.coeff, "exponent": self.exponent}
        if self.per_node:
            d["per_node"] = {k: list(v) for k, v in self.per_node.items()}
        return d


# ---------------------------------------------------------------------------
# preferences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SShapedUtility:
    """Bounded-above S-shaped utility: kappa*w**gamma/(1+w**gamma) on gains,
    beta*w on losses.  Convex near zero on the gain side, concave beyond,
    so genuinely nonconcave."""

    gamma: float
    kappa: float
    beta: float

    def __post_init__(self):
        SShapedDisutility(self.gamma, self.kappa, self.beta)  # parameter checks

    def value(self, w: float) -> float:
        return -self.disutility().value([-float(w)])

    def sup(self) -> float:
        return self.kappa

    @property
    def loss_slope(self) -> float:
        """Asymptotic slope of u on deep losses (u(aw)/a -> loss_slope * w)."""
        return self.beta

    def disutility(self) -> ExtFun:
        return SShapedDisutility(self.gamma, self.kappa, self.beta)

    def to_dict(self) -> dict:
        return {
            "kind": "sshaped",
            "gamma": self.gamma,
            "kappa": self.kappa,
            "beta": self.beta,
        }


@dataclass(frozen=True)
class SampledUtility:
    """Utility given by samples plus asymptotic slopes.

    Upper semicontinuity and boundedness above are enforced at load time:
    the right tail slope must be <= 0 and the left tail slope >= 0 (a
    value of +inf on the left is allowed and gives the extended decay
    condition).  The loss decay condition needs slope_left > 0.
    """

    grid: np.ndarray
    values: np.ndarray
    slope_left: float
    slope_right: float

    def __post_init__(self):
        xs = np.atleast_1d(np.asarray(self.grid, dtype=float))
        ys = np.atleast_1d(np.asarray(self.values, dtype=float))
        if xs.shape != ys.shape or xs.size < 2 or not (np.diff(xs) > 0).all():
            raise InvalidModel("utility sample needs a strictly increasing grid")
        if not np.isfinite(ys).all():
            raise InvalidModel("utility sample values must be finite")
        sl, sr = float(self.slope_left), float(self.slope_right)
        if sr > 0 or sl < 0:
            raise InvalidModel(
                "utility must be bounded above: need slope_right <= 0 <= slope_left"
            )
        object.__setattr__(self, "grid", xs)
        object.__setattr__(self, "values", ys)
        object.__setattr__(self, "slope_left", sl)
        object.__setattr__(self, "slope_right", sr)

    def value(self, w: float) -> float:
        return -self.disutility().value([-float(w)])

    def sup(self) -> float:
        return float(self.values.max())

    @property
    def loss_slope(self) -> float:
        return self.slope_left

    def disutility(self) -> ExtFun:
        # V(c) = -u(-c): reflect the sample, swap and reuse the tail slopes
        return Sampled1D(
            -self.grid[::-1],
            -self.values[::-1],
            slope_left=self.slope_right,
            slope_right=self.slope_left,
        )

    def to_dict(self) -> dict:
        return {
            "kind": "sampled",
            "grid": self.grid.tolist(),
            "values": self.values.tolist(),
            "slope_left": self.slope_left,
            "slope_right": self.slope_right,
        }


Utility = SShapedUtility | SampledUtility


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarketModel:
    """Scenario tree plus market data; immutable."""

    tree: ScenarioTree
    n_risky: int
    prices: Mapping[str, np.ndarray]
    cost: Frictionless | PowerIlliquidity
    utility: Utility
    claims: Mapping[str, float] = field(default_factory=dict)
    endowment: Mapping[str, float] = field(default_factory=dict)
    initial_cash: float = 0.0
    constraints: Mapping[int, tuple[np.ndarray, np.ndarray]] | None = None
    utility_overrides: Mapping[str, Utility] = field(default_factory=dict)
    cash_account: bool = True
    #: stages at which the position may be changed (None: every t < T);
    #: at other stages the market is closed and the position is held
    trading_stages: frozenset[int] | None = None
    #: borrowing limit: the cash account may not drop below this (None: free)
    cash_lower: float | None = None

    def __post_init__(self):
        prices = {}
        for node in self.tree.nodes:
            if node.id not in self.prices:
                raise InvalidModel(f"no prices at node {node.id!r}")
            z = np.atleast_1d(np.asarray(self.prices[node.id], dtype=float))
            if z.shape != (self.n_risky,):
                raise InvalidModel(
                    f"prices at {node.id!r} have shape {z.shape}, want ({self.n_risky},)"
                )
            prices[node.id] = z
        object.__setattr__(self, "prices", prices)
        for nid in self.claims:
            if nid not in self.tree:
                raise InvalidModel(f"claim at unknown node {nid!r}")
        for nid in self.endowment:
            if not self.tree.is_leaf(nid):
                raise InvalidModel(f"endowment at non-leaf node {nid!r}")
        if self.constraints:
            for t, (lo, up) in self.constraints.items():
                IndicatorBox(lo, up)  # shape/order checks
                if np.atleast_1d(lo).shape != (self.n_risky,):
                    raise InvalidModel(f"constraint bounds at stage {t} have wrong shape")

    def Z(self, node_id: str) -> np.ndarray:
        return self.prices[node_id]

    def claim(self, node_id: str) -> float:
        return float(self.claims.get(node_id, 0.0))

    def endow(self, leaf_id: str) -> float:
        return float(self.endowment.get(leaf_id, 0.0))

    def utility_at(self, leaf_id: str) -> Utility:
        return self.utility_overrides.get(leaf_id, self.utility)

    def disutility_at(self, leaf_id: str) -> ExtFun:
        return self.utility_at(leaf_id).disutility()

    def can_trade(self, t: int) -> bool:
        if t >= self.tree.horizon:
            return False
        return self.trading_stages is None or t in self.trading_stages

    def holdings_bounds(self, t: int) -> tuple[np.ndarray, np.ndarray] | None:
        if self.constraints is None:
            return None
        if t not in self.constraints:
            return None
        lo, up = self.constraints[t]
        return np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(up, float))

    def total_cost_many(self, node: Node, D: np.ndarray) -> np.ndarray:
        """Total cost of the trade D at the node: price part plus friction."""
        return D @ self.Z(node.id) + self.cost.cost_many(node, D)

    def lower_bound(self) -> float:
        """Integrable lower bound of the leaf disutility: -sup u."""
        sups = [self.utility.sup()] + [u.sup() for u in self.utility_overrides.values()]
        return -max(sups)


def liquidation_value(
    model: MarketModel, node_id: str, phi, with_frictions: bool = False
) -> float:
    """Proceeds from closing the position ``phi`` at the node's prices.

    The frictional variant subtracts the cost of the closing trade -phi.
    """
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    node = model.tree.node(node_id)
    value = float(phi @ model.Z(node_id))
    if with_frictions:
        value -= float(model.cost.cost_many(node, -phi[None, :])[0])
    return value


# ---------------------------------------------------------------------------
# validation of the standing assumptions
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    """Per-condition verdicts with analytic evidence.

    Condition names:

    * ``cost_growth``: the total-cost growth rate dominates every revenue
      direction (holds with equality in the frictionless case);
    * ``cost_growth_strict``: strict domination off the solvent orthant,
      the condition that pins all trade directions analytically;
    * ``utility_loss_decay``: deep losses hurt at a linear rate
      (limsup u(a w)/a < 0 for w < 0);
    * ``disutility_growth``: terminal expenditure eventually hurts at a
      linear rate (the reflected form of the previous condition);
    * ``disutility_orthant``: nonpositive-expenditure directions are
      exactly the free ones;
    * ``inada``: the extended case of infinite loss slope;
    * ``free_disposal``: the total cost is nondecreasing componentwise
      (checked on the region where it can hold for power costs).
    """

    conditions: dict[str, dict]

    def status(self, name: str) -> str:
        return self.conditions[name]["status"]

    def holds(self, name: str) -> bool:
        return self.status(name) == "holds"

    def analytic_route_ok(self) -> bool:
        """True when existence follows without any arbitrage-type check."""
        return self.holds("cost_growth_strict") and self.holds("disutility_growth")

    def required_ok(self) -> bool:
        """The utility-side conditions every model must satisfy."""
        return self.holds("utility_loss_decay") and self.holds("disutility_growth")

    def report_dict(self) -> dict:
        return {"conditions": self.conditions}


def validate(model: MarketModel) -> ValidationReport:
    c: dict[str, dict] = {}
    frictionless = model.cost.is_frictionless()
    if frictionless:
        c["cost_growth"] = {
            "status": "equality",
            "note": "frictionless: total-cost growth is exactly linear in the trade",
        }
        c["cost_growth_strict"] = {
            "status": "fails",
            "note": (
                "frictionless model: existence needs the linear-space route; "
                "run the horizon positivity check (classical no-arbitrage)"
            ),
        }
    else:
        c["cost_growth"] = {
            "status": "holds",
            "note": "superlinear cost dominates any linear revenue at scale",
        }
        c["cost_growth_strict"] = {
            "status": "holds",
            "note": "power cost grows superlinearly in every nonzero trade direction",
        }

    utilities = [("<global>", model.utility)] + list(model.utility_overrides.items())
    slopes = {name: u.loss_slope for name, u in utilities}
    min_slope = min(slopes.values())
    if min_slope > 0:
        c["utility_loss_decay"] = {
            "status": "holds",
            "note": f"limsup u(a*w)/a = loss_slope*w < 0 for w < 0 (min slope {min_slope})",
        }
        c["disutility_growth"] = {
            "status": "holds",
            "note": f"liminf V(a*d)/a = loss_slope*d > 0 for d > 0 (min slope {min_slope})",
        }
        c["disutility_orthant"] = {
            "status": "holds",
            "note": "nonpositive directions are free, positive ones grow linearly",
        }
    else:
        bad = sorted(k for k, s in slopes.items() if not s > 0)
        c["utility_loss_decay"] = {
            "status": "fails",
            "note": f"loss slope is 0 at {bad}: deep losses do not hurt linearly",
        }
        c["disutility_growth"] = {"status": "fails", "note": f"reflected failure at {bad}"}
        c["disutility_orthant"] = {
            "status": "fails",
            "note": "positive expenditure directions are not penalized at scale",
        }
    inada = all(u.loss_slope == INF for _, u in utilities)
    c["inada"] = {
        "status": "holds" if inada else "fails",
        "note": (
            "infinite loss slope: disutility horizon is the nonpositive-orthant indicator"
            if inada
            else "finite loss slope; the growth condition is used instead"
        ),
    }
    c["free_disposal"] = _free_disposal_check(model)
    return ValidationReport(c)


def _free_disposal_check(model: MarketModel, samples: int = 64) -> dict:
    neg_price = [
        n.id for n in model.tree.nodes if (model.Z(n.id) < 0).any()
    ]
    if neg_price:
        return {
            "status": "fails",
            "note": f"negative marginal prices at {neg_price[:4]}: disposal can earn money",
        }
    if model.cost.is_frictionless():
        return {
            "status": "holds",
            "note": "linear cost with nonnegative prices is monotone everywhere",
        }
    # power costs are monotone only within |d_i| <= (Z_i/(p*coeff))**(1/(p-1))
    radius = INF
    for node in model.tree.nodes:
        lam, p = model.cost.params_at(node.id)
        z = model.Z(node.id)
        r = (np.minimum.reduce(z) / (lam * p)) ** (1.0 / (p - 1.0)) if z.size else INF
        radius = min(radius, float(r))
    rng = np.random.default_rng(7)
    for node in model.tree.nodes:
        base = rng.uniform(-radius, radius, size=(samples, model.n_risky))
        drop = rng.uniform(0.0, 1.0, size=(samples, model.n_risky))
        lower = np.maximum(base - drop, -radius)
        s_hi = model.total_cost_many(node, base)
        s_lo = model.total_cost_many(node, lower)
        if (s_lo > s_hi + 1e-9).any():
            return {
                "status": "fails",
                "note": f"monotonicity violated within radius {radius} at node {node.id}",
            }
    return {
        "status": "holds",
        "note": f"sampled monotone on componentwise-ordered pairs within radius {radius:.4g}",
    }


def _analysis_stamp(model: MarketModel, report: ValidationReport) -> dict:
    return {
        "cost_superlinear": not model.cost.is_frictionless(),
        "frictionless": model.cost.is_frictionless(),
        "disutility_growth": report.holds("disutility_growth"),
    }


# ---------------------------------------------------------------------------
# problem builders
# ---------------------------------------------------------------------------


def _constraint_stage_fun(model: MarketModel, t: int, state_dim: int) -> ExtFun | None:
    bounds = model.holdings_bounds(t)
    if bounds is None:
        return None
    lo, up = bounds
    sel = np.zeros((model.n_risky, state_dim + model.n_risky))
    sel[:, state_dim:] = np.eye(model.n_risky)
    return AffinePrecompose(IndicatorBox(lo, up), sel)


def _wealth_row_cash(model: MarketModel, leaf_id: str) -> tuple[np.ndarray, float]:
    """Coefficients of terminal wealth in the leaf's path decisions
    (frictionless), plus the decision-independent part."""
    tree = model.tree
    path = tree.path(leaf_id)
    J = model.n_risky
    T = tree.horizon
    row = np.zeros(T * J)
    for t in range(T):
        dz = model.Z(path[t + 1]) - model.Z(path[t])
        row[t * J : (t + 1) * J] = dz
    const = (
        model.initial_cash
        - sum(model.claim(nid) for nid in path)
        + model.endow(leaf_id)
    )
    return row, const


def _path_objectives_cash(model: MarketModel) -> dict[str, ExtFun] | None:
    if not model.cost.is_frictionless() or model.trading_stages is not None:
        return None
    tree = model.tree
    J, T = model.n_risky, tree.horizon
    out: dict[str, ExtFun] = {}
    for leaf in tree.leaves:
        row, const = _wealth_row_cash(model, leaf.id)
        terms: list[ExtFun] = [
            AffinePrecompose(model.disutility_at(leaf.id), -row[None, :], [-const])
        ]
        for t, nid in enumerate(tree.path(leaf.id)[:-1]):
            bounds = model.holdings_bounds(t)
            if bounds is None:
                continue
            sel = np.zeros((J, T * J))
            sel[:, t * J : (t + 1) * J] = np.eye(J)
            terms.append(AffinePrecompose(IndicatorBox(*bounds), sel))
        out[leaf.id] = terms[0] if len(terms) == 1 else Sum(tuple(terms))
    return out


def default_grids_cash(
    model: MarketModel, radius: float = 2.0, points: int = 33
) -> dict[int, tuple[np.ndarray, ...]]:
    """Rectangular state grids covering trades of size up to ``radius``."""
    tree = model.tree
    J, T = model.n_risky, tree.horizon
    max_z = max((float(np.abs(model.Z(n.id)).max()) for n in tree.nodes), default=1.0)
    max_claim = max((abs(model.claim(n.id)) for n in tree.nodes), default=0.0)
    trade = np.full((1, J), 2.0 * radius)
    max_cost = max(
        (float(model.cost.cost_many(n, trade)[0]) for n in tree.nodes), default=0.0
    )
    span = T * (2.0 * radius * J * max_z + max_cost + max_claim) + 0.5
    x0 = model.initial_cash
    cash_ax = np.linspace(x0 - span, x0 + span, points)
    phi_ax = np.linspace(-radius, radius, points)
    return {t: (cash_ax,) + (phi_ax,) * J for t in range(T)}


def build_problem_cash(
    model: MarketModel, radius: float = 2.0, points: int = 33
) -> Problem:
    """Optimal investment with the cash account eliminated.

    Decisions are the target risky holdings per node before the final
    stage; the state is (cash, holdings); the leaf objective is the
    negative utility of liquidated terminal wealth plus endowment, net of
    claims, so minimizing it maximizes expected utility.
    """
    if not model.cash_account:
        raise NoCashAccount("cash-reduced form needs a riskless asset of price 1")
    tree = model.tree
    J, T = model.n_risky, tree.horizon
    dims = tuple(J if model.can_trade(t) else 0 for t in range(T)) + (0,)
    state_dims = tuple([J + 1] * T + [1])

    def transition(node: Node, S: np.ndarray, X: np.ndarray) -> np.ndarray:
        if node.time < T:
            cash, phi = S[:, :1], S[:, 1:]
            target = X if model.can_trade(node.time) else phi
            delta = target - phi
            spend = delta @ model.Z(node.id) + model.cost.cost_many(node, delta)
            new_cash = cash[:, 0] - model.claim(node.id) - spend
            return np.hstack([new_cash[:, None], target])
        cash, phi = S[:, 0], S[:, 1:]
        liq = phi @ model.Z(node.id) - model.cost.cost_many(node, -phi)
        wealth = cash + liq - model.claim(node.id) + model.endow(node.id)
        return wealth[:, None]

    initial = np.concatenate([[model.initial_cash], np.zeros(J)])
    sm = StateMap(state_dims, initial, transition)
    leaf_obj = {
        leaf.id: AffinePrecompose(model.disutility_at(leaf.id), [[-1.0]])
        for leaf in tree.leaves
    }
    stage_funs: dict[str, ExtFun] = {}
    for node in tree.nodes:
        if node.time < T and model.can_trade(node.time):
            sf = _constraint_stage_fun(model, node.time, J + 1)
            if sf is not None:
                stage_funs[node.id] = sf
    report = validate(model)
    meta: dict = {
        "market": model,
        "form": "cash",
        "market_analysis": _analysis_stamp(model, report),
        "validation": report,
        "grids": default_grids_cash(model, radius, points),
    }
    paths = _path_objectives_cash(model)
    if paths is not None:
        meta["path_objectives"] = paths
    return Problem(
        tree=tree,
        decision_dims=dims,
        state_map=sm,
        leaf_objective=leaf_obj,
        stage_funs=stage_funs or None,
        lower_bound=model.lower_bound(),
        meta=meta,
    )


def _path_objectives_terminal(model: MarketModel) -> dict[str, ExtFun] | None:
    # decision block per stage t < T: (d_t, risky holdings), d_t = expenditure
    if not model.cost.is_frictionless():
        return None
    tree = model.tree
    J, T = model.n_risky, tree.horizon
    d = J + 1
    n = T * d
    out: dict[str, ExtFun] = {}
    for leaf in tree.leaves:
        path = tree.path(leaf.id)
        terms: list[ExtFun] = []
        const = -model.initial_cash - model.endow(leaf.id)
        row = np.zeros(n)
        for t in range(T):
            nid = path[t]
            sel = np.zeros((1, n))
            sel[0, t * d] = 1.0
            terms.append(AffinePrecompose(IndicatorBox([-INF], [0.0]), sel))
            bounds = model.holdings_bounds(t)
            if bounds is not None:
                selz = np.zeros((J, n))
                selz[:, t * d + 1 : (t + 1) * d] = np.eye(J)
                terms.append(AffinePrecompose(IndicatorBox(*bounds), selz))
            # terminal expenditure: claims minus all unspent budget and gains
            row[t * d] = -1.0
            dz = model.Z(path[t + 1]) - model.Z(nid)
            row[t * d + 1 : (t + 1) * d] = -dz
            const += model.claim(nid)
        const += model.claim(leaf.id)
        terms.append(
            AffinePrecompose(model.disutility_at(leaf.id), row[None, :], [const])
        )
        out[leaf.id] = Sum(tuple(terms))
    return out


def default_grids_terminal(
    model: MarketModel, radius: float = 2.0, points: int = 33
) -> dict[int, tuple[np.ndarray, ...]]:
    """Grids for the full-portfolio form.

    The cash axis only covers the binding-budget region (wasted slack
    never helps a nondecreasing disutility, so truncating it does not
    change the optimum) and is denser than the holdings axes because the
    value varies along it at every stage.
    """
    tree = model.tree
    J, T = model.n_risky, tree.horizon
    max_z = max((float(np.abs(model.Z(n.id)).max()) for n in tree.nodes), default=1.0)
    max_claim = max((abs(model.claim(n.id)) for n in tree.nodes), default=0.0)
    trade = np.full((1, J), 2.0 * radius)
    max_cost = max(
        (float(model.cost.cost_many(n, trade)[0]) for n in tree.nodes), default=0.0
    )
    x0 = model.initial_cash
    step = 2.0 * radius * J * max_z + max_cost + max_claim
    lo = x0 - T * step - 0.5
    hi = x0 + T * step + 0.5
    cash_ax = np.linspace(lo, hi, 2 * points - 1)
    phi_ax = np.linspace(-radius, radius, points)
    return {t: (cash_ax,) + (phi_ax,) * J for t in range(T)}


def build_problem_terminal(
    model: MarketModel, radius: float = 2.0, points: int = 33
) -> Problem:
    """Optimal investment in full portfolio variables with explicit budgets.

    Decisions at each node before the final stage are (d_t, risky
    holdings): d_t is the expenditure allowed at the node, constrained
    nonpositive, and the cash account absorbs exactly the budget identity
    (total cost of the trade plus the claim equals d_t).  The position is
    liquidated at the final stage and the terminal disutility applies to
    the final expenditure.  The expenditure variable keeps every stage
    constraint an axis-aligned box, which the coordinate pattern search
    can follow; an inequality-form budget would put the optimum on a
    diagonal wall.
    """
    tree = model.tree
    J, T = model.n_risky, tree.horizon
    if T == 0:
        # degenerate: no trading, terminal expenditure is the net claim
        leaf = tree.root
        dis = model.disutility_at(leaf.id)
        arg = model.claim(leaf.id) - model.initial_cash - model.endow(leaf.id)
        sm = StateMap((1,), np.zeros(0), lambda node, S, X: np.full((S.shape[0], 1), arg))
        return Problem(
            tree=tree,
            decision_dims=(0,),
            state_map=sm,
            leaf_objective={leaf.id: dis},
            lower_bound=model.lower_bound(),
            meta={
                "market": model,
                "form": "terminal",
                "market_analysis": _analysis_stamp(model, validate(model)),
                "validation": validate(model),
                "grids": {},
            },
        )
    d = J + 1
    dims = tuple([d] * T + [0])
    state_dims = tuple([d] * T + [1])

    def transition(node: Node, S: np.ndarray, X: np.ndarray) -> np.ndarray:
        if node.time < T:
            # state (cash, holdings); decision (expenditure d_t, holdings)
            claim = model.claim(node.id) - (model.initial_cash if node.time == 0 else 0.0)
            cash, phi = S[:, 0], S[:, 1:]
            target = X[:, 1:]
            delta = target - phi
            new_cash = (
                cash
                + X[:, 0]
                - (delta @ model.Z(node.id) + model.cost.cost_many(node, delta))
                - claim
            )
            return np.hstack([new_cash[:, None], target])
        # forced liquidation: the final trade is minus the held portfolio
        cash_prev, phi_prev = S[:, 0], S[:, 1:]
        spend = (
            -cash_prev
            + (-phi_prev) @ model.Z(node.id)
            + model.cost.cost_many(node, -phi_prev)
            + model.claim(node.id)
            - model.endow(node.id)
        )
        return spend[:, None]

    stage_funs: dict = {}
    for node in tree.nodes:
        if node.time >= T:
            continue
        lo = np.concatenate([[-INF], np.full(J, -INF)])
        up = np.concatenate([[0.0], np.full(J, INF)])
        bounds = model.holdings_bounds(node.time)
        if bounds is not None:
            lo[1:], up[1:] = bounds
        sel = np.zeros((d, d + d))
        sel[:, d:] = np.eye(d)
        box = AffinePrecompose(IndicatorBox(lo, up), sel)
        if model.cash_lower is None:
            stage_funs[node.id] = box
        else:
            # borrowing limit: the post-trade cash account stays above it
            def fn(node_: Node, S: np.ndarray, X: np.ndarray, _box=box) -> np.ndarray:
                vals = _box.value_many(np.hstack([S, X]))
                new_cash = transition(node_, S, X)[:, 0]
                return vals + np.where(new_cash >= model.cash_lower - 1e-12, 0.0, INF)

            stage_funs[node.id] = fn

    sm = StateMap(state_dims, np.zeros(d), transition)
    leaf_obj = {leaf.id: model.disutility_at(leaf.id) for leaf in tree.leaves}
    report = validate(model)
    meta: dict = {
        "market": model,
        "form": "terminal",
        "market_analysis": _analysis_stamp(model, report),
        "validation": report,
        "grids": default_grids_terminal(model, radius, points),
    }
    paths = _path_objectives_terminal(model)
    if paths is not None:
        meta["path_objectives"] = paths
    return Problem(
        tree=tree,
        decision_dims=dims,
        state_map=sm,
        leaf_objective=leaf_obj,
        stage_funs=stage_funs,
        lower_bound=model.lower_bound(),
        meta=meta,
    )


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------

MARKET_SCHEMA = {
    "type": "object",
    "required": ["assets", "cost", "utility", "tree"],
    "properties": {
        "assets": {"type": "integer", "minimum": 1},
        "initial_cash": {"type": "number"},
        "cash_lower": {"type": "number"},
        "cost": {"type": "object", "required": ["kind"]},
        "utility": {"type": "object", "required": ["kind"]},
        "constraints": {"type": "object"},
        "trading_stages": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "tree": {"type": "array"},
    },
    "additionalProperties": False,
}


def _cost_from_dict(d: Mapping) -> Frictionless | PowerIlliquidity:
    kind = d.get("kind")
    if kind == "frictionless":
        return Frictionless()
    if kind == "power":
        per_node = None
        if "per_node" in d:
            per_node = {k: (float(v[0]), float(v[1])) for k, v in d["per_node"].items()}
        return PowerIlliquidity(float(d["coeff"]), float(d["exponent"]), per_node)
    raise InvalidModel(f"unknown cost kind {kind!r}")


def _utility_from_dict(d: Mapping) -> Utility:
    kind = d.get("kind")
    if kind == "sshaped":
        return SShapedUtility(float(d["gamma"]), float(d["kappa"]), float(d["beta"]))
    if kind == "sampled":
        # float() parses "inf"/"-inf" spellings directly
        return SampledUtility(
            d["grid"], d["values"], float(d["slope_left"]), float(d["slope_right"])
        )
    raise InvalidModel(f"unknown utility kind {kind!r}")


def market_from_dict(d: Mapping) -> MarketModel:
    import jsonschema

    try:
        jsonschema.validate(d, MARKET_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path)
        raise InvalidModel(f"market file at {path or '<root>'}: {e.message}") from None
    tree = tree_from_records(list(d["tree"]))
    J = int(d["assets"])
    prices = {}
    claims = {}
    endowment = {}
    overrides = {}
    for node in tree.nodes:
        data = node.data
        if "Z" not in data:
            raise InvalidModel(f"node {node.id!r} carries no prices (data.Z)")
        prices[node.id] = np.asarray(data["Z"], dtype=float)
        if "claim" in data:
            claims[node.id] = float(data["claim"])
        if "endowment" in data:
            if not tree.is_leaf(node.id):
                raise InvalidModel(f"endowment at non-leaf node {node.id!r}")
            endowment[node.id] = float(data["endowment"])
        if "utility" in data:
            if not tree.is_leaf(node.id):
                raise InvalidModel(f"utility override at non-leaf node {node.id!r}")
            overrides[node.id] = _utility_from_dict(data["utility"])
    constraints = None
    if "constraints" in d:
        constraints = {}
        for k, v in d["constraints"].items():
            constraints[int(k)] = (
                np.asarray([efun._inf_ok(x) for x in v["lower"]], dtype=float),
                np.asarray([efun._inf_ok(x) for x in v["upper"]], dtype=float),
            )
    return MarketModel(
        tree=tree,
        n_risky=J,
        prices=prices,
        cost=_cost_from_dict(d["cost"]),
        utility=_utility_from_dict(d["utility"]),
        claims=claims,
        endowment=endowment,
        initial_cash=float(d.get("initial_cash", 0.0)),
        constraints=constraints,
        utility_overrides=overrides,
        cash_lower=float(d["cash_lower"]) if "cash_lower" in d else None,
        trading_stages=(
            frozenset(int(t) for t in d["trading_stages"])
            if "trading_stages" in d
            else None
        ),
    )


def market_to_dict(model: MarketModel) -> dict:
    records = tree_to_records(model.tree)
    for r in records:
        data = dict(r["data"])
        data["Z"] = [float(v) for v in model.Z(r["id"])]
        if r["id"] in model.claims:
            data["claim"] = model.claim(r["id"])
        if r["id"] in model.endowment:
            data["endowment"] = model.endow(r["id"])
        if r["id"] in model.utility_overrides:
            data["utility"] = model.utility_overrides[r["id"]].to_dict()
        r["data"] = data
    out: dict = {
        "assets": model.n_risky,
        "initial_cash": model.initial_cash,
        "cost": model.cost.to_dict(),
        "utility": model.utility.to_dict(),
        "tree": records,
    }
    if model.cash_lower is not None:
        out["cash_lower"] = model.cash_lower
    if model.trading_stages is not None:
        out["trading_stages"] = sorted(model.trading_stages)
    if model.constraints:
        out["constraints"] = {
            str(t): {"lower": list(map(float, lo)), "upper": list(map(float, up))}
            for t, (lo, up) in model.constraints.items()
        }
    return out


def load_market(path: str) -> MarketModel:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise InvalidModel(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    try:
        return market_from_dict(payload)
    except TreeFormatError as e:
        raise InvalidModel(str(e)) from None
