import json
import math

import numpy as np
import pytest

import treedp as td
from treedp import cones, dp, market

from conftest import binomial_tree, exp_utility, sshaped_t2_model

INF = math.inf


class TestValidate:
    def test_superlinear_sshaped_all_hold(self):
        rep = market.validate(sshaped_t2_model())
        for name in ("cost_growth", "cost_growth_strict",
                     "utility_loss_decay", "disutility_growth",
                     "disutility_orthant", "free_disposal"):
            assert rep.holds(name), name
        assert rep.analytic_route_ok()

    def test_frictionless_strict_fails_and_directs_to_reference(self):
        tree = binomial_tree(1)
        model = market.MarketModel(
            tree=tree, n_risky=1,
            prices={"r": [1.0], "u": [2.0], "d": [0.5]},
            cost=market.Frictionless(),
            utility=market.SShapedUtility(2.0, 1.0, 1.0),
        )
        rep = market.validate(model)
        assert rep.status("cost_growth") == "equality"
        assert rep.status("cost_growth_strict") == "fails"
        assert "no-arbitrage" in rep.conditions["cost_growth_strict"]["note"]
        assert not rep.analytic_route_ok()
        assert rep.required_ok()

    def test_flat_utility_fails_loss_decay(self):
        flat = market.SampledUtility(
            np.array([-1.0, 0.0, 1.0]), np.array([0.99, 1.0, 1.0]),
            slope_left=0.0, slope_right=0.0,
        )
        tree = binomial_tree(1)
        model = market.MarketModel(
            tree=tree, n_risky=1,
            prices={"r": [1.0], "u": [2.0], "d": [0.5]},
            cost=market.PowerIlliquidity(0.1, 2.0), utility=flat,
        )
        rep = market.validate(model)
        assert rep.status("utility_loss_decay") == "fails"
        assert rep.status("disutility_growth") == "fails"
        assert not rep.required_ok()

    def test_inada_for_infinite_loss_slope(self):
        tree = binomial_tree(1)
        model = market.MarketModel(
            tree=tree, n_risky=1,
            prices={"r": [1.0], "u": [2.0], "d": [0.5]},
            cost=market.Frictionless(), utility=exp_utility(),
        )
        rep = market.validate(model)
        assert rep.holds("inada")
        sshaped = market.validate(sshaped_t2_model())
        assert sshaped.status("inada") == "fails"
        assert "growth condition" in sshaped.conditions["inada"]["note"]

    def test_validator_soundness_vs_cones(self):
        # whenever the strict cost growth is certified analytically, the
        # horizon positivity check must agree
        for model in (sshaped_t2_model(),):
            rep = market.validate(model)
            assert rep.holds("cost_growth_strict")
            chk = cones.check_horizon_positivity(market.build_problem_cash(model))
            assert chk.verdict == "holds"


class TestUtilityAtoms:
    def test_sshaped_reflection(self):
        u = market.SShapedUtility(2.0, 1.0, 1.5)
        V = u.disutility()
        for w in (-2.0, -0.5, 0.0, 0.7, 3.0):
            assert V.value([-w]) == pytest.approx(-u.value(w), rel=1e-12)
        assert u.value(1e9) <= u.sup() + 1e-12

    def test_sampled_reflection_and_bounds(self):
        u = exp_utility()
        V = u.disutility()
        for w in (-3.0, 0.0, 2.0):
            assert V.value([-w]) == pytest.approx(-u.value(w), rel=1e-9, abs=1e-12)
        with pytest.raises(market.InvalidModel, match="bounded above"):
            market.SampledUtility(
                np.array([0.0, 1.0]), np.array([0.0, 1.0]),
                slope_left=1.0, slope_right=1.0,
            )

    def test_disutility_bounded_below(self):
        for u in (market.SShapedUtility(2.0, 1.3, 0.7), exp_utility()):
            V = u.disutility()
            xs = np.linspace(-60, 60, 301)[:, None]
            assert (V.value_many(xs) >= -u.sup() - 1e-9).all()


class TestBuilders:
    def test_zero_strategy_feasible_terminal(self):
        model = sshaped_t2_model()
        problem = market.build_problem_terminal(model, radius=0.5, points=33)
        zero = td.AdaptedSequence({
            nid: np.zeros(2) for nid in ("r", "u", "d")
        })
        val = dp.evaluate_strategy(problem, zero)
        # all-zero trading leaves exactly the initial capital: V_T(-X0)
        assert val == pytest.approx(
            model.utility.disutility().value([-model.initial_cash])
        )

    def test_unpayable_claim_is_infeasible(self):
        tree = binomial_tree(1)
        model = market.MarketModel(
            tree=tree, n_risky=1,
            prices={"r": [1.0], "u": [2.0], "d": [0.5]},
            cost=market.PowerIlliquidity(0.1, 2.0),
            utility=market.SShapedUtility(2.0, 1.0, 1.0),
            claims={"r": 1.0},
            initial_cash=0.0,
            constraints={0: (np.array([0.0]), np.array([0.0]))},
            cash_lower=0.0,
        )
        problem = market.build_problem_terminal(model, radius=0.5, points=17)
        res = dp.backward_solve(problem, cfg=dp.SolveConfig(eps_gap=INF))
        assert res.value == INF  # budget impossible at the root

    def test_cash_and_terminal_agree_t1(self):
        tree = binomial_tree(1)
        model = market.MarketModel(
            tree=tree, n_risky=1,
            prices={"r": [1.0], "u": [2.0], "d": [0.5]},
            cost=market.PowerIlliquidity(0.1, 2.0),
            utility=market.SShapedUtility(2.0, 1.0, 1.0),
            initial_cash=1.0,
        )
        cash = dp.backward_solve(market.build_problem_cash(model, radius=1.0, points=65))
        term = dp.backward_solve(
            market.build_problem_terminal(model, radius=1.0, points=65),
            cfg=dp.SolveConfig(eps_gap=0.01),
        )
        assert term.forward_value == pytest.approx(cash.forward_value, abs=1e-3)

    def test_frictionless_zero_value_under_no_arbitrage(self):
        # loss-only utility (u(w) = min(w, 0)): without arbitrage every
        # nonzero trade has a losing branch, so the optimal value is
        # exactly zero; enumeration and the arbitrage reference agree
        from treedp import cones

        tree = binomial_tree(1)
        loss_only = market.SampledUtility(
            np.array([-100.0, 0.0, 100.0]), np.array([-100.0, 0.0, 0.0]),
            slope_left=1.0, slope_right=0.0,
        )
        model = market.MarketModel(
            tree=tree, n_risky=1,
            prices={"r": [1.0], "u": [2.0], "d": [0.5]},
            cost=market.Frictionless(), utility=loss_only,
            initial_cash=0.0,
        )
        assert cones.no_arbitrage_lp(
            tree, {n.id: model.Z(n.id) for n in tree.nodes}
        ) is None
        problem = market.build_problem_cash(model, radius=1.0, points=33)
        res = dp.backward_solve(problem)
        assert res.forward_value == pytest.approx(0.0, abs=1e-9)
        bf, _ = dp.brute_force(problem, {"r": np.linspace(-1, 1, 201)[:, None]})
        assert bf == pytest.approx(0.0, abs=1e-12)

    def test_constant_price_zero_pnl_value_exact(self):
        tree = binomial_tree(1)
        prices = {k: np.array([1.0]) for k in ("r", "u", "d")}
        model = market.MarketModel(
            tree=tree, n_risky=1, prices=prices, cost=market.Frictionless(),
            utility=exp_utility(), initial_cash=1.0,
        )
        problem = market.build_problem_cash(model)
        for z in (-0.5, 0.0, 0.8):
            val = dp.evaluate_strategy(problem, td.AdaptedSequence({"r": np.array([z])}))
            assert val == pytest.approx(-exp_utility().value(1.0), abs=1e-12)

    def test_trading_stage_gating(self):
        model = sshaped_t2_model()
        gated = market.MarketModel(
            tree=model.tree, n_risky=1, prices=model.prices, cost=model.cost,
            utility=model.utility, initial_cash=1.0,
            trading_stages=frozenset({0}),
        )
        problem = market.build_problem_cash(gated)
        assert problem.decision_dim("r") == 1
        assert problem.decision_dim("u") == 0


class TestDegenerateHorizon:
    def test_t0_forms_agree(self):
        tree = td.ScenarioTree([td.Node("r", 0, None)])
        model = market.MarketModel(
            tree=tree, n_risky=1, prices={"r": [1.0]},
            cost=market.PowerIlliquidity(0.1, 2.0),
            utility=market.SShapedUtility(2.0, 1.0, 1.0),
            initial_cash=1.0, endowment={"r": 0.25}, claims={"r": 0.05},
        )
        cash = dp.backward_solve(market.build_problem_cash(model))
        term = dp.backward_solve(market.build_problem_terminal(model))
        expected = -model.utility.value(1.0 + 0.25 - 0.05)
        assert cash.value == pytest.approx(expected, abs=1e-12)
        assert term.value == pytest.approx(expected, abs=1e-12)


class TestLiquidationValue:
    def test_zero_position(self):
        model = sshaped_t2_model()
        assert market.liquidation_value(model, "r", [0.0]) == 0.0

    def test_frictionless(self):
        tree = binomial_tree(1)
        model = market.MarketModel(
            tree=tree, n_risky=1,
            prices={"r": [3.0], "u": [2.0], "d": [0.5]},
            cost=market.Frictionless(),
            utility=market.SShapedUtility(2.0, 1.0, 1.0),
        )
        assert market.liquidation_value(model, "r", [2.0]) == 6.0

    def test_with_frictions_derived(self):
        tree = binomial_tree(1)
        model = market.MarketModel(
            tree=tree, n_risky=1,
            prices={"r": [1.0], "u": [2.0], "d": [0.5]},
            cost=market.PowerIlliquidity(1.0, 2.0),
            utility=market.SShapedUtility(2.0, 1.0, 1.0),
        )
        # closing one unit: proceeds 1, closing trade -1 costs |−1|^2 = 1
        assert model.cost.cost_many(tree.node("r"), np.array([[-1.0]]))[0] == 1.0
        assert market.liquidation_value(model, "r", [1.0], with_frictions=True) == 0.0


class TestModelProperties:
    def test_endowment_monotonicity(self):
        base = sshaped_t2_model()
        values = []
        for shift in (-0.1, 0.0, 0.1):
            model = market.MarketModel(
                tree=base.tree, n_risky=1, prices=base.prices, cost=base.cost,
                utility=base.utility, initial_cash=1.0,
                endowment={nid: shift for nid in ("uu", "ud", "du", "dd")},
            )
            problem = market.build_problem_cash(model, radius=1.0, points=65)
            values.append(dp.backward_solve(problem).forward_value)
        # richer endowment -> weakly better utility -> lower minimized value
        assert values[0] >= values[1] - 1e-9 >= values[2] - 2e-9

    def test_total_cost_monotone_in_sampled_region(self):
        rep = market.validate(sshaped_t2_model())
        assert rep.holds("free_disposal")
        tree = binomial_tree(1)
        model = market.MarketModel(
            tree=tree, n_risky=1,
            prices={"r": [1.0], "u": [-0.5], "d": [0.5]},
            cost=market.Frictionless(),
            utility=market.SShapedUtility(2.0, 1.0, 1.0),
        )
        assert market.validate(model).status("free_disposal") == "fails"


class TestNodeDependentParameters:
    def test_per_node_cost_parameters(self):
        tree = binomial_tree(1)
        cost = market.PowerIlliquidity(0.1, 2.0, per_node={"u": (0.5, 3.0)})
        assert cost.params_at("r") == (0.1, 2.0)
        assert cost.params_at("u") == (0.5, 3.0)
        d = np.array([[2.0]])
        assert cost.cost_many(tree.node("r"), d)[0] == pytest.approx(0.4)
        assert cost.cost_many(tree.node("u"), d)[0] == pytest.approx(4.0)
        model = market.MarketModel(
            tree=tree, n_risky=1,
            prices={"r": [1.0], "u": [2.0], "d": [0.5]},
            cost=cost, utility=market.SShapedUtility(2.0, 1.0, 1.0),
            initial_cash=1.0,
        )
        problem = market.build_problem_cash(model, radius=1.0, points=65)
        res = dp.backward_solve(problem)
        bf, _ = dp.brute_force(problem, {"r": np.linspace(-1, 1, 201)[:, None]})
        assert res.forward_value == pytest.approx(bf, abs=1e-4)

    def test_per_leaf_utility_overrides(self):
        # mild base loss slope: the investor jumps to a large position;
        # a steeper loss slope in the down scenario shrinks it sharply
        tree = binomial_tree(1)
        base = market.SShapedUtility(2.0, 1.0, 0.3)
        pessimist = market.SShapedUtility(2.0, 1.0, 3.0)
        prices = {"r": [1.0], "u": [3.0], "d": [0.8]}

        def solve(overrides):
            model = market.MarketModel(
                tree=tree, n_risky=1, prices=prices,
                cost=market.PowerIlliquidity(0.05, 2.0), utility=base,
                utility_overrides=overrides, initial_cash=0.0,
            )
            problem = market.build_problem_cash(model, radius=2.0, points=65)
            res = dp.backward_solve(problem)
            bf, _ = dp.brute_force(problem, {"r": np.linspace(-2, 2, 401)[:, None]})
            assert res.forward_value == pytest.approx(bf, abs=1e-4)
            return res

        res_plain = solve({})
        res_pess = solve({"d": pessimist})
        assert res_plain.strategy.at("r")[0] > 1.0
        assert res_pess.strategy.at("r")[0] < 0.7
        assert res_pess.forward_value > res_plain.forward_value


class TestJsonLoader:
    def model_dict(self):
        return {
            "assets": 1,
            "initial_cash": 1.0,
            "cost": {"kind": "power", "coeff": 0.1, "exponent": 2.0},
            "utility": {"kind": "sshaped", "gamma": 2.0, "kappa": 1.0, "beta": 1.0},
            "tree": [
                {"id": "r", "time": 0, "parent": None, "prob": 1.0,
                 "data": {"Z": [1.0]}},
                {"id": "u", "time": 1, "parent": "r", "prob": 0.5,
                 "data": {"Z": [2.0], "claim": 0.1, "endowment": 0.2}},
                {"id": "d", "time": 1, "parent": "r", "prob": 0.5,
                 "data": {"Z": [0.5]}},
            ],
        }

    def test_round_trip(self, tmp_path):
        d = self.model_dict()
        p = tmp_path / "m.json"
        p.write_text(json.dumps(d))
        model = market.load_market(str(p))
        assert model.n_risky == 1
        assert model.claim("u") == 0.1
        assert model.endow("u") == 0.2
        back = market.market_to_dict(model)
        p2 = tmp_path / "m2.json"
        p2.write_text(json.dumps(back))
        model2 = market.load_market(str(p2))
        assert model2.Z("d")[0] == 0.5

    def test_rejects_missing_prices(self, tmp_path):
        d = self.model_dict()
        del d["tree"][1]["data"]["Z"]
        p = tmp_path / "m.json"
        p.write_text(json.dumps(d))
        with pytest.raises(market.InvalidModel, match="prices"):
            market.load_market(str(p))

    def test_rejects_bad_schema(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"assets": 0, "cost": {}, "utility": {}, "tree": []}))
        with pytest.raises(market.InvalidModel):
            market.load_market(str(p))

    def test_rejects_malformed_json(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text("{")
        with pytest.raises(market.InvalidModel, match="line"):
            market.load_market(str(p))

    def test_rejects_endowment_off_leaf(self, tmp_path):
        d = self.model_dict()
        d["tree"][0]["data"]["endowment"] = 1.0
        p = tmp_path / "m.json"
        p.write_text(json.dumps(d))
        with pytest.raises(market.InvalidModel, match="non-leaf"):
            market.load_market(str(p))

    def test_utility_override_and_trading_stages_round_trip(self, tmp_path):
        d = self.model_dict()
        d["tree"][2]["data"]["utility"] = {
            "kind": "sshaped", "gamma": 3.0, "kappa": 2.0, "beta": 0.5,
        }
        d["trading_stages"] = [0]
        p = tmp_path / "m.json"
        p.write_text(json.dumps(d))
        model = market.load_market(str(p))
        assert model.utility_at("d").beta == 0.5
        assert model.utility_at("u").beta == 1.0
        assert model.trading_stages == frozenset({0})
        back = market.market_to_dict(model)
        assert back["trading_stages"] == [0]
        assert back["tree"][2]["data"]["utility"]["gamma"] == 3.0
        with pytest.raises(market.InvalidModel, match="non-leaf"):
            bad = self.model_dict()
            bad["tree"][0]["data"]["utility"] = {"kind": "sshaped", "gamma": 2, "kappa": 1, "beta": 1}
            p2 = tmp_path / "bad.json"
            p2.write_text(json.dumps(bad))
            market.load_market(str(p2))

    def test_constraints_parsed(self, tmp_path):
        d = self.model_dict()
        d["constraints"] = {"0": {"lower": [-1], "upper": ["inf"]}}
        p = tmp_path / "m.json"
        p.write_text(json.dumps(d))
        model = market.load_market(str(p))
        lo, up = model.holdings_bounds(0)
        assert lo[0] == -1.0 and up[0] == INF
