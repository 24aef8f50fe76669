"""Backward dynamic programming on scenario trees.

The recursion runs stage by stage from the leaves: at each node the
expected continuation table of the children is minimized over the stage
decision at every grid state (expanding-box grid search plus pattern
refinement), and conditional expectation combines sibling tables
gridwise.  No convexity is assumed anywhere; the growth condition checked
by the cones module is what makes the expanding search box provably
bracket the minimizers.

Interpolation cannot certify exact optimality, so every solve re-evaluates
the true objective of the extracted policy in a forward pass and reports
both numbers; for small trees an interpolation-free nested verifier is
available (``verify_optimality(..., method="exact")``).
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import efun
from .efun import ExtFun, HorizonConditionViolated
from .tree import AdaptedSequence, Node, ScenarioTree

INF = math.inf


class SearchBoxExhausted(RuntimeError):
    """The expanding search box hit its cap without bracketing a minimum.

    This signals a violated (or numerically marginal) horizon positivity
    condition at the reported node: values keep improving toward the
    boundary, so no minimizer exists in any bounded region.
    """

    def __init__(self, node: str, n_states: int, box: float):
        super().__init__(
            f"node {node!r}: search box reached {box} without boundary dominance "
            f"at {n_states} grid state(s); horizon positivity likely fails"
        )
        self.node = node


class GridTooCoarse(RuntimeError):
    """Forward-pass value exceeds the table value by more than the gap tolerance."""

    def __init__(self, value: float, forward: float, tol: float):
        super().__init__(
            f"forward value {forward} exceeds table value {value} by more than {tol}; "
            "refine the state grids"
        )
        self.value = value
        self.forward = forward


class BudgetExceeded(RuntimeError):
    """Brute-force enumeration would exceed its cardinality guard."""


@dataclass(frozen=True)
class SolveConfig:
    """Solver tolerances and search parameters (all overridable)."""

    grid_points: int = 33        # decision grid points per axis
    box_init: float = 1.0        # initial half-width of the search box
    box_max: float = 2.0 ** 10   # cap on the half-width
    margin: float = 1.0          # boundary must exceed incumbent by this much
    eps_ref: float = 1e-6        # pattern-search step at which refinement stops
    eps_opt: float = 1e-6        # optimality equality tolerance
    eps_gap: float = 1e-3        # relative table-vs-forward gap tolerance
    threads: int = 1
    state_chunk: int = 2048      # grid states evaluated per batch

    def __post_init__(self):
        if self.grid_points < 5 or self.grid_points % 2 == 0:
            raise ValueError("grid_points must be odd and >= 5")
        for name in ("eps_ref", "eps_opt", "eps_gap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def exact_refine(self) -> "SolveConfig":
        """Variant used by the interpolation-free nested recursion."""
        return replace(self, grid_points=21, eps_ref=1e-9, threads=1)


DEFAULT_CONFIG = SolveConfig()


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StateMap:
    """Sufficient statistic of decision history.

    ``dims[t]`` is the state dimension after the stage-t decision,
    ``initial`` the state entering stage 0, and ``transition`` the batched
    map (node, states (m, s_prev), decisions (m, n_t)) -> (m, dims[t]).
    The leaf objective composed with transitions along a path must equal
    the modeled objective for all decision paths; that soundness is the
    model builder's obligation.  The history map (state = concatenated
    decisions) is always sound and is the fallback for small problems.
    """

    dims: tuple[int, ...]
    initial: np.ndarray
    transition: Callable[[Node, np.ndarray, np.ndarray], np.ndarray]
    is_history: bool = False

    def __post_init__(self):
        object.__setattr__(
            self, "initial", np.atleast_1d(np.asarray(self.initial, dtype=float))
        )


StageFun = ExtFun | Callable[[Node, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Problem:
    """A dynamic stochastic optimization problem on a scenario tree.

    The objective along a path is the sum of per-node stage functions of
    (entering state, decision) plus a per-leaf function of the terminal
    state; all pieces are bounded below by the integrable bound
    ``lower_bound``, so expectations are well defined with values in
    R union {+inf}.
    """

    tree: ScenarioTree
    decision_dims: tuple[int, ...]
    state_map: StateMap
    leaf_objective: Mapping[str, ExtFun]
    stage_funs: Mapping[str, StageFun] | None = None
    lower_bound: float | Mapping[str, float] = 0.0
    decision_dim_overrides: Mapping[str, int] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.tree.horizon
        if len(self.decision_dims) != T + 1:
            raise ValueError(f"need decision dims for stages 0..{T}")
        for leaf in self.tree.leaves:
            if leaf.id not in self.leaf_objective:
                raise ValueError(f"no leaf objective at {leaf.id!r}")

    def decision_dim(self, node_id: str) -> int:
        if self.decision_dim_overrides and node_id in self.decision_dim_overrides:
            return self.decision_dim_overrides[node_id]
        return self.decision_dims[self.tree.node(node_id).time]

    def decision_nodes(self) -> list[Node]:
        return [n for n in self.tree.nodes if self.decision_dim(n.id) > 0]

    def stage_values(self, node: Node, S: np.ndarray, X: np.ndarray) -> np.ndarray:
        if self.stage_funs is None or node.id not in self.stage_funs:
            return np.zeros(S.shape[0])
        fn = self.stage_funs[node.id]
        if isinstance(fn, ExtFun):
            return fn.value_many(np.hstack([S, X]))
        return np.asarray(fn(node, S, X), dtype=float)

    def lower_bound_at(self, leaf_id: str) -> float:
        if isinstance(self.lower_bound, Mapping):
            return float(self.lower_bound[leaf_id])
        return float(self.lower_bound)

    def expected_lower_bound(self, node_id: str) -> float:
        """Conditional expectation of the lower bound given the node."""
        node = self.tree.node(node_id)
        leaves = [
            leaf for leaf in self.tree.leaves if node.id in self.tree.path(leaf.id)
        ]
        p_node = self.tree.probability(node.id)
        return sum(
            self.tree.probability(l.id) / p_node * self.lower_bound_at(l.id)
            for l in leaves
        )


def history_problem(
    tree: ScenarioTree,
    decision_dims: Sequence[int],
    leaf_objective: Mapping[str, ExtFun],
    lower_bound: float | Mapping[str, float],
    stage_funs: Mapping[str, StageFun] | None = None,
    meta: dict | None = None,
) -> Problem:
    """Problem whose state is the raw concatenated decision history."""
    dims = tuple(int(d) for d in decision_dims)
    cum = np.cumsum(dims)

    def transition(node: Node, S: np.ndarray, X: np.ndarray) -> np.ndarray:
        return np.hstack([S, X])

    sm = StateMap(
        dims=tuple(int(c) for c in cum),
        initial=np.zeros(0),
        transition=transition,
        is_history=True,
    )
    return Problem(
        tree=tree,
        decision_dims=dims,
        state_map=sm,
        leaf_objective=dict(leaf_objective),
        stage_funs=stage_funs,
        lower_bound=lower_bound,
        meta=meta or {},
    )


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------


def interp_multilinear(
    axes: Sequence[np.ndarray], values: np.ndarray, Q: np.ndarray
) -> np.ndarray:
    """Multilinear interpolation with +inf-aware corners and +inf outside.

    Any corner with positive weight and value +inf makes the result +inf
    (the lsc-safe convention).  Queries outside the grid return +inf: the
    grids declare the covered state region, and a wall keeps the search
    box bounded instead of silently extrapolating.
    """
    m, s = Q.shape
    if s == 0:
        return np.full(m, float(values))
    los: list[np.ndarray] = []
    ts: list[np.ndarray] = []
    outside = np.zeros(m, dtype=bool)
    for d in range(s):
        ax = axes[d]
        if len(ax) == 1:
            los.append(np.zeros(m, dtype=int))
            ts.append(np.zeros(m))
            continue
        q = Q[:, d]
        tol = 1e-9 * max(1.0, abs(ax[0]), abs(ax[-1]))
        outside |= (q < ax[0] - tol) | (q > ax[-1] + tol)
        hi = np.clip(np.searchsorted(ax, q), 1, len(ax) - 1)
        lo = hi - 1
        t = (q - ax[lo]) / (ax[hi] - ax[lo])
        los.append(lo)
        ts.append(np.clip(t, 0.0, 1.0))
    out = np.zeros(m)
    hit_inf = outside
    for bits in itertools.product((0, 1), repeat=s):
        w = np.ones(m)
        idx = []
        degenerate = False
        for d, b in enumerate(bits):
            if len(axes[d]) == 1:
                if b == 1:
                    degenerate = True
                    break
                idx.append(los[d])
                continue
            idx.append(los[d] + b)
            w = w * (ts[d] if b else 1.0 - ts[d])
        if degenerate:
            continue
        v = values[tuple(idx)]
        active = w > 0
        inf_here = active & np.isinf(v)
        hit_inf |= inf_here
        out += np.where(active & ~np.isinf(v), w * v, 0.0)
    out[hit_inf] = INF
    return out


# ---------------------------------------------------------------------------
# sectional minimization
# ---------------------------------------------------------------------------


def _decision_mesh(B: float, K: int, dim: int) -> np.ndarray:
    ax = np.linspace(-B, B, K)
    mesh = np.meshgrid(*([ax] * dim), indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, dim)


def minimize_batch(
    objective: Callable[[np.ndarray, np.ndarray], np.ndarray],
    dim: int,
    n_states: int,
    cfg: SolveConfig = DEFAULT_CONFIG,
    label: str = "",
    executor: ThreadPoolExecutor | None = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Minimize over the decision for each of ``n_states`` states at once.

    ``objective(I, X)`` evaluates paired rows: state index I[j] with
    decision X[j].  Grid search runs over an expanding box [-B, B]^dim (B
    doubling until every boundary grid value exceeds the incumbent by the
    margin), then batched coordinate pattern search refines each state's
    best point until the step drops below ``eps_ref``.  Ties break to the
    lexicographically smallest grid point.  States with no finite value
    anywhere up to the box cap get value +inf and a NaN argmin; states
    whose incumbent keeps improving toward the boundary raise
    :class:`SearchBoxExhausted`.
    """
    diag = {"expansions": 0, "sweeps": 0, "max_box": 0.0}
    if dim == 0:
        I = np.arange(n_states)
        vals = objective(I, np.zeros((n_states, 0)))
        return np.asarray(vals, dtype=float), np.zeros((n_states, 0)), diag

    best_val = np.full(n_states, INF)
    best_x = np.full((n_states, dim), np.nan)
    step0 = np.full(n_states, np.nan)
    active = np.ones(n_states, dtype=bool)
    B = cfg.box_init

    def eval_grid(states_idx: np.ndarray, mesh: np.ndarray) -> np.ndarray:
        k = mesh.shape[0]
        max_rows = max(cfg.state_chunk * 64, k)
        per = max(1, max_rows // k)
        chunks = [states_idx[i : i + per] for i in range(0, len(states_idx), per)]

        def run(chunk: np.ndarray) -> np.ndarray:
            I = np.repeat(chunk, k)
            X = np.tile(mesh, (len(chunk), 1))
            return np.asarray(objective(I, X), dtype=float).reshape(len(chunk), k)

        if executor is not None and len(chunks) > 1:
            parts = list(executor.map(run, chunks))
        else:
            parts = [run(c) for c in chunks]
        return np.vstack(parts) if parts else np.zeros((0, k))

    while True:
        mesh = _decision_mesh(B, cfg.grid_points, dim)
        spacing = 2.0 * B / (cfg.grid_points - 1)
        boundary = (np.abs(mesh) >= B * (1 - 1e-12)).any(axis=1)
        idx = np.where(active)[0]
        vals = eval_grid(idx, mesh)
        j = np.argmin(vals, axis=1)  # first minimum = lexicographically smallest
        gridbest = vals[np.arange(len(idx)), j]
        better = gridbest < best_val[idx]
        upd = idx[better]
        best_val[upd] = gridbest[better]
        best_x[upd] = mesh[j[better]]
        step0[upd] = spacing
        bmin = vals[:, boundary].min(axis=1)
        done = np.isfinite(best_val[idx]) & (bmin > best_val[idx] + cfg.margin)
        active[idx[done]] = False
        diag["max_box"] = B
        if not active.any():
            break
        B *= 2.0
        diag["expansions"] += 1
        if B > cfg.box_max:
            stuck = active & np.isfinite(best_val)
            if stuck.any():
                raise SearchBoxExhausted(label, int(stuck.sum()), cfg.box_max)
            active[:] = False
            break

    refine = np.where(np.isfinite(best_val))[0]
    if refine.size:
        x = best_x[refine].copy()
        fx = best_val[refine].copy()
        step = step0[refine].copy()
        live = step >= cfg.eps_ref
        while live.any():
            improved = np.zeros(len(refine), dtype=bool)
            for d in range(dim):
                for sgn in (1.0, -1.0):
                    rows = np.where(live)[0]
                    cand = x[rows].copy()
                    cand[:, d] += sgn * step[rows]
                    vals = np.asarray(
                        objective(refine[rows], cand), dtype=float
                    )
                    acc = vals < fx[rows]
                    hit = rows[acc]
                    x[hit, d] = cand[acc, d]
                    fx[hit] = vals[acc]
                    improved[hit] = True
            step[live & ~improved] *= 0.5
            live = step >= cfg.eps_ref
            diag["sweeps"] += 1
        best_x[refine] = x
        best_val[refine] = fx
    return best_val, best_x, diag


def minimize_single(
    fn: Callable[[np.ndarray], np.ndarray], dim: int, cfg: SolveConfig = DEFAULT_CONFIG,
    label: str = "",
) -> tuple[float, np.ndarray]:
    """Minimize a single batched objective X (m, dim) -> (m,)."""
    vals, xs, _ = minimize_batch(
        lambda I, X: fn(X), dim, 1, cfg, label=label
    )
    return float(vals[0]), xs[0]


def minimize_section(
    f: ExtFun,
    state,
    cfg: SolveConfig = DEFAULT_CONFIG,
    decision_horizon: ExtFun | None = None,
) -> tuple[float, np.ndarray]:
    """Minimize ``f(state, .)`` over the trailing decision block.

    ``f`` is an expression over (state, decision); the leading coordinates
    are fixed at ``state``.  When ``decision_horizon`` is supplied it is
    sanity-checked for positivity off the origin first, since that is what
    guarantees a minimizer exists and the search box terminates.
    Returns (+inf, empty) when no finite value exists.
    """
    state = np.atleast_1d(np.asarray(state, dtype=float))
    dim = f.dim - state.shape[0]
    if dim < 0:
        raise ValueError("state longer than the function's input")
    if decision_horizon is not None:
        verdict, witness = efun.positivity_off_origin(decision_horizon)
        if verdict == "fails":
            raise HorizonConditionViolated(
                "decision-block horizon is not positive off the origin", witness
            )

    def fn(X: np.ndarray) -> np.ndarray:
        S = np.repeat(state[None, :], X.shape[0], axis=0)
        return f.value_many(np.hstack([S, X]))

    val, x = minimize_single(fn, dim, cfg)
    return val, (x if math.isfinite(val) else np.zeros(0))


# ---------------------------------------------------------------------------
# tables, policy, solve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueTable:
    """Values on a rectangular state grid with multilinear queries."""

    node: str
    axes: tuple[np.ndarray, ...]
    values: np.ndarray
    kind: str  # "pre" (before the node's decision) or "post" (after)

    def __call__(self, Q: np.ndarray) -> np.ndarray:
        return interp_multilinear(self.axes, self.values, Q)

    def at(self, q) -> float:
        q = np.atleast_1d(np.asarray(q, dtype=float))
        return float(self(q[None, :])[0])


@dataclass(frozen=True)
class Policy:
    """Per-node optimal decisions on the entering-state grid.

    Lookup is nearest-neighbor in the state, which keeps the exported
    policy a plain array; the solver's forward pass re-optimizes at the
    exactly visited states instead of snapping.
    """

    entries: Mapping[str, tuple[tuple[np.ndarray, ...], np.ndarray]]

    def decision_at(self, node_id: str, state) -> np.ndarray:
        axes, arr = self.entries[node_id]
        state = np.atleast_1d(np.asarray(state, dtype=float))
        idx = []
        for d, ax in enumerate(axes):
            j = int(np.clip(np.searchsorted(ax, state[d]), 1, len(ax) - 1)) if len(ax) > 1 else 0
            if len(ax) > 1 and abs(state[d] - ax[j - 1]) <= abs(ax[j] - state[d]):
                j -= 1
            idx.append(j)
        return np.asarray(arr[tuple(idx)], dtype=float)


@dataclass
class SolveResult:
    value: float
    forward_value: float
    policy: Policy
    strategy: AdaptedSequence
    pre_tables: dict[str, ValueTable]
    post_tables: dict[str, ValueTable]
    diagnostics: dict

    @property
    def gap(self) -> float:
        if math.isinf(self.value) and math.isinf(self.forward_value):
            return 0.0
        return self.forward_value - self.value

    def report_dict(self) -> dict:
        return {
            "value": self.value,
            "forward_value": self.forward_value,
            "gap": self.gap,
            "strategy": {k: list(map(float, v)) for k, v in self.strategy.values.items()},
            "diagnostics": self.diagnostics,
        }


def _make_continuation(
    problem: Problem, node: Node, pre: Mapping[str, "ValueTable"]
) -> Callable[[np.ndarray], np.ndarray]:
    """Post-decision continuation value of a node as a batched callable.

    Leaves evaluate their objective exactly.  A node whose children are
    all decision-free leaves also evaluates them exactly (the terminal
    cost-to-go is known in closed form, so the last stage needs no
    interpolation); otherwise the children's gridded tables are combined
    by conditional expectation and interpolated.
    """
    tree = problem.tree
    if tree.is_leaf(node.id):
        fleaf = problem.leaf_objective[node.id]
        return lambda nxt: fleaf.value_many(nxt)
    kids = tree.children(node.id)
    exact_last = all(
        tree.is_leaf(c.id) and problem.decision_dim(c.id) == 0 for c in kids
    )
    if exact_last:

        def cont(nxt: np.ndarray) -> np.ndarray:
            out = np.zeros(nxt.shape[0])
            empty = np.zeros((nxt.shape[0], 0))
            for child in kids:
                v = problem.stage_values(child, nxt, empty)
                term = problem.state_map.transition(child, nxt, empty)
                v = v + problem.leaf_objective[child.id].value_many(term)
                out += child.prob * v
            return out

        return cont
    tables = [pre[c.id] for c in kids]
    probs = [c.prob for c in kids]

    def cont(nxt: np.ndarray) -> np.ndarray:
        out = np.zeros(nxt.shape[0])
        for p, tab in zip(probs, tables):
            out += p * tab(nxt)
        return out

    return cont


def _entering_axes(
    problem: Problem, grids: Mapping[int, Sequence[np.ndarray]], t: int
) -> tuple[np.ndarray, ...]:
    if t == 0:
        return tuple(np.array([v]) for v in problem.state_map.initial)
    if t - 1 not in grids:
        raise ValueError(f"no state grid supplied for stage {t - 1}")
    axes = grids[t - 1]
    want = problem.state_map.dims[t - 1]
    if len(axes) != want:
        raise ValueError(f"grids[{t-1}] must have {want} axes, got {len(axes)}")
    return tuple(np.asarray(a, dtype=float) for a in axes)


def backward_solve(
    problem: Problem,
    grids: Mapping[int, Sequence[np.ndarray]] | None = None,
    cfg: SolveConfig = DEFAULT_CONFIG,
    forward: str = "greedy",
    check_gap: bool = True,
) -> SolveResult:
    """Run the backward recursion and extract a policy.

    ``grids[t]`` are the per-dimension breakpoints of the stage-t
    post-decision state (t = 0..T-1); siblings share them, so the
    conditional-expectation step is a gridwise weighted sum.  Horizon
    positivity (cones.check_horizon_positivity) is a precondition: without
    it the expanding search box has nothing to bracket and the solve ends
    in :class:`SearchBoxExhausted`.

    The returned ``value`` is the table root value; ``forward_value``
    re-evaluates the true objective of the extracted policy (mode
    "greedy" re-optimizes against table continuations at the exactly
    visited states; "exact" polishes with the interpolation-free nested
    recursion; "nearest" uses raw policy lookup).
    """
    tree = problem.tree
    T = tree.horizon
    if grids is None:
        grids = problem.meta.get("grids", {})
    executor = (
        ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    )
    pre: dict[str, ValueTable] = {}
    post: dict[str, ValueTable] = {}
    policy_entries: dict[str, tuple[tuple[np.ndarray, ...], np.ndarray]] = {}
    diagnostics: dict = {"nodes": {}}
    try:
        for t in range(T, -1, -1):
            axes = _entering_axes(problem, grids, t)
            shape = tuple(len(a) for a in axes)
            mesh = (
                np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
                if axes
                else np.zeros((1, 0))
            )
            n_states = mesh.shape[0]
            for node in tree.nodes_at(t):
                ndim = problem.decision_dim(node.id)
                if t < T:
                    out_axes = tuple(np.asarray(a, dtype=float) for a in grids[t])
                    u = np.zeros(tuple(len(a) for a in out_axes))
                    for child in tree.children(node.id):
                        u = u + child.prob * pre[child.id].values
                    post[node.id] = ValueTable(node.id, out_axes, u, "post")
                continuation = _make_continuation(problem, node, pre)

                def objective(I: np.ndarray, X: np.ndarray, node=node, cont=continuation):
                    S = mesh[I]
                    vals = problem.stage_values(node, S, X)
                    nxt = problem.state_map.transition(node, S, X)
                    return vals + cont(nxt)

                vals, args, diag = minimize_batch(
                    objective, ndim, n_states, cfg, label=node.id, executor=executor
                )
                pre[node.id] = ValueTable(node.id, axes, vals.reshape(shape), "pre")
                policy_entries[node.id] = (axes, args.reshape(shape + (ndim,)))
                diagnostics["nodes"][node.id] = diag
    finally:
        if executor is not None:
            executor.shutdown()

    # spot-check the declared lower bound on the computed grids: a table
    # entry below the conditional expectation of m means the model builder
    # declared an invalid bound
    bound_violations = {}
    for nid, table in pre.items():
        bound = problem.expected_lower_bound(nid)
        finite = table.values[np.isfinite(table.values)]
        if finite.size and finite.min() < bound - cfg.eps_opt:
            bound_violations[nid] = float(finite.min() - bound)
    diagnostics["lower_bound_violations"] = bound_violations

    value = float(pre[tree.root.id].values.reshape(-1)[0])
    policy = Policy(policy_entries)
    forward_value, strategy = forward_pass(
        problem, pre, post, policy, cfg, mode=forward
    )
    result = SolveResult(
        value=value,
        forward_value=forward_value,
        policy=policy,
        strategy=strategy,
        pre_tables=pre,
        post_tables=post,
        diagnostics=diagnostics,
    )
    if check_gap and math.isfinite(value):
        tol = cfg.eps_gap * (1.0 + abs(value))
        if forward_value > value + tol:
            raise GridTooCoarse(value, forward_value, tol)
    return result


def forward_pass(
    problem: Problem,
    pre: Mapping[str, ValueTable],
    post: Mapping[str, ValueTable],
    policy: Policy,
    cfg: SolveConfig = DEFAULT_CONFIG,
    mode: str = "greedy",
) -> tuple[float, AdaptedSequence]:
    """Walk the tree with the extracted policy and price it exactly.

    Decisions are adapted by construction (one per visited node).  Mode
    "greedy" re-minimizes the table continuation at each exactly visited
    state, "nearest" uses raw nearest-neighbor policy lookup, and "exact"
    re-minimizes against the interpolation-free nested recursion.
    """
    tree = problem.tree
    decisions: dict[str, np.ndarray] = {}

    def visit(node: Node, state: np.ndarray, acc: float) -> float:
        ndim = problem.decision_dim(node.id)
        if ndim == 0:
            x = np.zeros(0)
        elif mode == "nearest":
            x = policy.decision_at(node.id, state)
            if np.isnan(x).any():
                x = np.zeros(ndim)
        elif mode == "exact":
            _, x = _exact_node_min(problem, node, state, cfg.exact_refine())
        else:
            cont = _make_continuation(problem, node, pre)

            def fn(X: np.ndarray) -> np.ndarray:
                S = np.repeat(state[None, :], X.shape[0], axis=0)
                vals = problem.stage_values(node, S, X)
                nxt = problem.state_map.transition(node, S, X)
                return vals + cont(nxt)

            _, x = minimize_single(fn, ndim, cfg, label=node.id)
            if np.isnan(x).any():
                x = np.zeros(ndim)
        if ndim > 0:
            decisions[node.id] = x
        S = state[None, :]
        X = x[None, :]
        stage = float(problem.stage_values(node, S, X)[0])
        nxt = problem.state_map.transition(node, S, X)[0]
        total = acc + stage
        if tree.is_leaf(node.id):
            return total + problem.leaf_objective[node.id].value(nxt)
        return sum(
            child.prob * visit(child, nxt, total) for child in tree.children(node.id)
        )

    value = visit(tree.root, problem.state_map.initial, 0.0)
    return float(value), AdaptedSequence(decisions)


# ---------------------------------------------------------------------------
# interpolation-free nested recursion (for verification on small trees)
# ---------------------------------------------------------------------------


def _exact_values_batch(
    problem: Problem, node: Node, states: np.ndarray, cfg: SolveConfig
) -> np.ndarray:
    """Pre-decision optimal values at a batch of entering states, no tables.

    The recursion stays batched all the way down (states x decisions per
    level), which keeps nested verification on small trees tractable.
    """
    ndim = problem.decision_dim(node.id)

    def objective(I: np.ndarray, X: np.ndarray) -> np.ndarray:
        S = states[I]
        vals = problem.stage_values(node, S, X)
        nxt = problem.state_map.transition(node, S, X)
        return vals + _exact_post_many(problem, node, nxt, cfg)

    vals, _, _ = minimize_batch(objective, ndim, states.shape[0], cfg, label=node.id)
    return vals


def _exact_node_min(
    problem: Problem, node: Node, state: np.ndarray, cfg: SolveConfig
) -> tuple[float, np.ndarray]:
    """min over the node's decision of stage cost + exact continuation."""
    ndim = problem.decision_dim(node.id)

    def fn(X: np.ndarray) -> np.ndarray:
        S = np.repeat(state[None, :], X.shape[0], axis=0)
        vals = problem.stage_values(node, S, X)
        nxt = problem.state_map.transition(node, S, X)
        return vals + _exact_post_many(problem, node, nxt, cfg)

    if ndim == 0:
        return float(fn(np.zeros((1, 0)))[0]), np.zeros(0)
    return minimize_single(fn, ndim, cfg, label=node.id)


def _exact_post_many(
    problem: Problem, node: Node, states: np.ndarray, cfg: SolveConfig
) -> np.ndarray:
    tree = problem.tree
    if tree.is_leaf(node.id):
        return problem.leaf_objective[node.id].value_many(states)
    out = np.zeros(states.shape[0])
    for child in tree.children(node.id):
        out += child.prob * _exact_values_batch(problem, child, states, cfg)
    return out


def exact_cost_to_go(
    problem: Problem, node_id: str, state, cfg: SolveConfig | None = None
) -> float:
    """Optimal cost-to-go from a node given its entering state (no tables)."""
    cfg = (cfg or DEFAULT_CONFIG).exact_refine()
    node = problem.tree.node(node_id)
    state = np.atleast_1d(np.asarray(state, dtype=float))
    return _exact_node_min(problem, node, state, cfg)[0]


def exact_root_value(problem: Problem, cfg: SolveConfig | None = None) -> float:
    """Optimal value by the nested recursion alone."""
    return exact_cost_to_go(problem, problem.tree.root.id, problem.state_map.initial, cfg)


# ---------------------------------------------------------------------------
# strategies: evaluation, expectation chains, verification
# ---------------------------------------------------------------------------


def _strategy_states(
    problem: Problem, strategy: AdaptedSequence
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict[str, float]]:
    """Entering state, post state, and accumulated stage cost per node."""
    tree = problem.tree
    entering: dict[str, np.ndarray] = {}
    after: dict[str, np.ndarray] = {}
    past: dict[str, float] = {}

    def visit(node: Node, state: np.ndarray, acc: float) -> None:
        ndim = problem.decision_dim(node.id)
        x = strategy.at(node.id) if ndim > 0 else np.zeros(0)
        if x.shape != (ndim,):
            raise ValueError(f"strategy at {node.id!r} has dimension {x.shape}, want {ndim}")
        entering[node.id] = state
        S, X = state[None, :], x[None, :]
        stage = float(problem.stage_values(node, S, X)[0])
        nxt = problem.state_map.transition(node, S, X)[0]
        after[node.id] = nxt
        past[node.id] = acc + stage
        if not tree.is_leaf(node.id):
            for child in tree.children(node.id):
                visit(child, nxt, acc + stage)

    visit(tree.root, problem.state_map.initial, 0.0)
    return entering, after, past


def evaluate_strategy(problem: Problem, strategy: AdaptedSequence) -> float:
    """Exact expected objective of an adapted strategy."""
    tree = problem.tree
    _, after, past = _strategy_states(problem, strategy)
    total = 0.0
    for leaf in tree.leaves:
        v = past[leaf.id] + problem.leaf_objective[leaf.id].value(after[leaf.id])
        total += tree.probability(leaf.id) * v
    return float(total)


def expectation_chain(
    problem: Problem,
    strategy: AdaptedSequence,
    result: "SolveResult | None" = None,
    cfg: SolveConfig | None = None,
    method: str = "tables",
) -> list[float]:
    """E h_t(x^t) for t = 0..T along the strategy.

    With ``method="tables"`` the post-decision continuation is the
    solver's own (gridded children tables, exact last stage); with
    ``method="exact"`` it is recomputed by the nested recursion, which is
    slower but free of interpolation error.  The final element is always
    the exact objective value of the strategy.
    """
    tree = problem.tree
    _, after, past = _strategy_states(problem, strategy)
    chain: list[float] = []
    for t in range(tree.horizon + 1):
        total = 0.0
        for node in tree.nodes_at(t):
            state = after[node.id]
            if tree.is_leaf(node.id):
                cont = problem.leaf_objective[node.id].value(state)
            elif method == "exact":
                cont = sum(
                    child.prob
                    * _exact_node_min(
                        problem, child, state, (cfg or DEFAULT_CONFIG).exact_refine()
                    )[0]
                    for child in tree.children(node.id)
                )
            else:
                if result is None:
                    raise ValueError("a solve result is required for method='tables'")
                cont = float(
                    _make_continuation(problem, node, result.pre_tables)(state[None, :])[0]
                )
            total += tree.probability(node.id) * (past[node.id] + cont)
        chain.append(float(total))
    return chain


@dataclass
class VerifyReport:
    """Optimality diagnosis of a candidate strategy against the recursion."""

    chain: list[float]
    node_gaps: dict[str, float]
    optimal: bool
    method: str

    def max_gap(self) -> float:
        finite = [g for g in self.node_gaps.values() if math.isfinite(g)]
        return max(finite, default=0.0)

    def report_dict(self) -> dict:
        return {
            "chain": self.chain,
            "node_gaps": self.node_gaps,
            "max_gap": self.max_gap(),
            "optimal": self.optimal,
            "method": self.method,
        }


def verify_optimality(
    problem: Problem,
    result: SolveResult | None,
    strategy: AdaptedSequence,
    cfg: SolveConfig = DEFAULT_CONFIG,
    method: str = "tables",
) -> VerifyReport:
    """Check the optimality characterization along a candidate strategy.

    Computes the expectation chain E h_t(x^t) and, nodewise, the gap
    between the value of the candidate's decision and the minimized value
    at the same entering state.  The strategy is flagged optimal iff every
    consecutive chain difference and every nodewise gap is within
    ``eps_opt``.  A gridded solve can certify this only up to
    interpolation error; ``method="exact"`` removes that caveat for small
    trees by re-minimizing with the nested recursion.
    """
    tree = problem.tree
    entering, after, _ = _strategy_states(problem, strategy)
    chain = expectation_chain(problem, strategy, result=result, cfg=cfg, method=method)
    node_gaps: dict[str, float] = {}
    for node in tree.nodes:
        ndim = problem.decision_dim(node.id)
        state = entering[node.id]
        x = strategy.at(node.id) if ndim > 0 else np.zeros(0)
        S, X = state[None, :], x[None, :]
        stage = float(problem.stage_values(node, S, X)[0])
        nxt = problem.state_map.transition(node, S, X)[0]
        if method == "exact":
            cont = float(_exact_post_many(problem, node, nxt[None, :], cfg.exact_refine())[0])
            best = _exact_node_min(problem, node, state, cfg.exact_refine())[0]
        else:
            if result is None:
                raise ValueError("a solve result is required for method='tables'")
            contf = _make_continuation(problem, node, result.pre_tables)
            cont = float(contf(nxt[None, :])[0])

            def fn(Xc: np.ndarray) -> np.ndarray:
                Sc = np.repeat(state[None, :], Xc.shape[0], axis=0)
                vals = problem.stage_values(node, Sc, Xc)
                nx = problem.state_map.transition(node, Sc, Xc)
                return vals + contf(nx)

            if ndim == 0:
                best = float(fn(np.zeros((1, 0)))[0])
            else:
                best, _ = minimize_single(fn, ndim, cfg, label=node.id)
        here = stage + cont
        if math.isinf(here) and math.isinf(best):
            node_gaps[node.id] = 0.0
        else:
            node_gaps[node.id] = here - best
    diffs = [abs(chain[t + 1] - chain[t]) for t in range(len(chain) - 1)]
    optimal = all(d <= cfg.eps_opt for d in diffs) and all(
        g <= cfg.eps_opt for g in node_gaps.values()
    )
    return VerifyReport(chain=chain, node_gaps=node_gaps, optimal=optimal, method=method)


# ---------------------------------------------------------------------------
# brute force oracle
# ---------------------------------------------------------------------------


def brute_force(
    problem: Problem,
    grids: Mapping[str, np.ndarray],
    guard: int = 10**7,
    chunk: int = 1 << 16,
) -> tuple[float, AdaptedSequence]:
    """Exhaustive enumeration over per-node decision grids.

    One decision per node (adaptedness), exact expectation per joint
    choice, global minimum returned; ties break to the first combination
    in lexicographic grid order.  Independent of the recursion: no tables,
    no interpolation, no refinement.
    """
    tree = problem.tree
    nodes = problem.decision_nodes()
    mats = []
    for n in nodes:
        g = np.atleast_2d(np.asarray(grids[n.id], dtype=float))
        if g.shape[0] == 1 and problem.decision_dim(n.id) == 1 and g.shape[1] > 1:
            g = g.T
        if g.shape[1] != problem.decision_dim(n.id):
            raise ValueError(f"grid at {n.id!r} has wrong decision dimension")
        mats.append(g)
    sizes = [m.shape[0] for m in mats]
    total = 1
    for s in sizes:
        total *= s
        if total > guard:
            raise BudgetExceeded(
                f"{total}+ combinations exceed the enumeration guard {guard}"
            )
    strides = np.ones(len(sizes), dtype=np.int64)
    for i in range(len(sizes) - 2, -1, -1):
        strides[i] = strides[i + 1] * sizes[i + 1]

    best_val = INF
    best_combo = -1
    for start in range(0, total, chunk):
        C = np.arange(start, min(start + chunk, total), dtype=np.int64)
        dec = {
            nodes[i].id: mats[i][(C // strides[i]) % sizes[i]] for i in range(len(nodes))
        }
        m = C.shape[0]

        def walk(node: Node, S: np.ndarray, acc: np.ndarray) -> np.ndarray:
            X = dec.get(node.id, np.zeros((m, 0)))
            acc2 = acc + problem.stage_values(node, S, X)
            nxt = problem.state_map.transition(node, S, X)
            if tree.is_leaf(node.id):
                return acc2 + problem.leaf_objective[node.id].value_many(nxt)
            out = np.zeros(m)
            for child in tree.children(node.id):
                out += child.prob * walk(child, nxt, acc2)
            return out

        S0 = np.repeat(problem.state_map.initial[None, :], m, axis=0)
        vals = walk(tree.root, S0, np.zeros(m))
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val = float(vals[j])
            best_combo = int(C[j])
    if best_combo < 0:
        return INF, AdaptedSequence({})
    decisions = {
        nodes[i].id: mats[i][(best_combo // int(strides[i])) % sizes[i]]
        for i in range(len(nodes))
    }
    return best_val, AdaptedSequence(decisions)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def export_tables_csv(result: SolveResult, path: str) -> None:
    """Plot-ready dump: node, table kind, grid coordinates, value."""
    tabs = list(result.pre_tables.values()) + list(result.post_tables.values())
    width = max((len(t.axes) for t in tabs), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "kind"] + [f"s{i}" for i in range(width)] + ["value"])
        for t in tabs:
            if not t.axes:
                w.writerow([t.node, t.kind] + [""] * width + [repr(float(t.values.reshape(-1)[0]))])
                continue
            for idx in itertools.product(*(range(len(a)) for a in t.axes)):
                coords = [repr(float(t.axes[d][idx[d]])) for d in range(len(t.axes))]
                coords += [""] * (width - len(coords))
                w.writerow([t.node, t.kind] + coords + [repr(float(t.values[idx]))])


def export_policy_csv(result: SolveResult, path: str) -> None:
    entries = result.policy.entries
    swidth = max((len(axes) for axes, _ in entries.values()), default=0)
    dwidth = max((arr.shape[-1] for _, arr in entries.values()), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["node"]
            + [f"s{i}" for i in range(swidth)]
            + [f"x{i}" for i in range(dwidth)]
        )
        for node, (axes, arr) in entries.items():
            ndim = arr.shape[-1]
            if not axes:
                dec = [repr(float(v)) for v in arr.reshape(-1)]
                w.writerow([node] + [""] * swidth + dec + [""] * (dwidth - ndim))
                continue
            for idx in itertools.product(*(range(len(a)) for a in axes)):
                coords = [repr(float(axes[d][idx[d]])) for d in range(len(axes))]
                coords += [""] * (swidth - len(coords))
                dec = [repr(float(v)) for v in arr[idx]]
                dec += [""] * (dwidth - ndim)
                w.writerow([node] + coords + dec)


def report_json(result: SolveResult, extra: dict | None = None) -> str:
    """Deterministic JSON report (sorted keys, repr floats)."""
    payload = result.report_dict()
    if extra:
        payload.update(extra)
    return json.dumps(payload, sort_keys=True, indent=2)
