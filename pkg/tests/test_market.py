import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvxdnn.branch_bound import BBOptions
from cvxdnn.embeddings import BigM, CvxdLP, EmbeddingError, Hybrid, PCAR, PCTAR, Pwl
from cvxdnn.market import (DETAIL_HEADER, SUMMARY_HEADER, DomainError, MarketInstance, build_bidding_model,
                           detail_csv, evaluate_solution, generate_instance, incentive, ingest_prices,
                           purchase_cost, responsiveness, run_method, solve_bidding, summary_csv)
from cvxdnn.model import SolveResult, Status
from cvxdnn.network import TrainConfig, fit, init_network, make_dataset


@pytest.fixture(scope="module")
def nets():
    data = make_dataset(purchase_cost, n=3000, seed=0)
    out = {}
    for name, sizes, k in (("cvxd", [4, 10, 20, 10, 1], 1), ("uc", [4, 10, 20, 10, 1], None),
                           ("cvxd2", [4, 10, 20, 10, 1], 2)):
        net = init_network(sizes, k, seed=0)
        fit(net, data, TrainConfig(learning_rate=1e-3, epochs=5, batch_size=200))
        out[name] = net
    return out


def price_csv(scenarios=("a", "b"), T=24, drop=None, dup=None):
    lines = ["scenario,hour,price_dkk_per_mwh"]
    for s in scenarios:
        for h in range(1, T + 1):
            if (s, h) == drop:
                continue
            lines.append(f"{s},{h},{h * 1.5}")
            if (s, h) == dup:
                lines.append(f"{s},{h},{h * 1.5}")
    return "\n".join(lines) + "\n"


class TestResponse:
    def test_half_at_q_over_r(self):
        assert responsiveness(4.0, 3.0, 2.0, 1.5) == pytest.approx(2.0)

    def test_saturation(self):
        q, r, xt = 3.0, 2.0, 5.0
        assert abs(responsiveness(xt, q, r, q / r + 50 / r) - xt) <= 1e-9

    def test_zero_capacity(self):
        assert responsiveness(0.0, 3.0, 2.0, 10.0) == 0.0

    def test_incentive_examples(self):
        assert incentive(0.5, 1.0, 3.0, 2.0) == pytest.approx(1.5)
        assert incentive(0.75, 1.0, 2.0, 1.0) == pytest.approx(2 - math.log(1 / 3))
        assert incentive(0.75, 1.0, 2.0, 1.0) == pytest.approx(3.0986, abs=1e-4)

    @pytest.mark.parametrize("x", [0.0, 1.0, 1.5, -0.1])
    def test_incentive_domain(self, x):
        with pytest.raises(DomainError):
            incentive(x, 1.0, 2.0, 1.0)

    def test_cost_examples(self):
        assert purchase_cost(1.0, 2.0, 3.0, 2.0) == pytest.approx(1.5)
        assert purchase_cost(0.0, 2.0, 3.0, 2.0) == 0.0
        assert purchase_cost(0.75, 1.0, 2.0, 1.0) == pytest.approx(2.3240, abs=1e-4)

    def test_cost_domain(self):
        with pytest.raises(DomainError):
            purchase_cost(2.0, 2.0, 1.0, 1.0)

    @pytest.mark.parametrize("xt,q,r", [(2.0, 3.0, 2.0), (7.3, 1.2, 0.6), (0.4, 8.0, 5.0)])
    def test_cost_at_half(self, xt, q, r):
        assert purchase_cost(xt / 2, xt, q, r) == pytest.approx(xt * q / (2 * r), rel=1e-15)

    @pytest.mark.parametrize("xt,q,r", [(1.0, 1.0, 0.5), (10.0, 8.0, 5.0), (4.0, 3.0, 1.0)])
    def test_cost_increasing_where_incentive_nonnegative(self, xt, q, r):
        x0 = xt / (1 + math.exp(q))
        xs = np.linspace(x0, xt * (1 - 1e-6), 20_001)
        assert np.all(np.diff(purchase_cost(xs, xt, q, r)) > 0)

    def test_cost_dips_below_zero_near_origin(self):
        # negative incentives at tiny bids make the cost non-monotone there
        xs = np.array([1e-6, 1e-4])
        c = purchase_cost(xs, 1.0, 1.0, 0.5)
        assert c[1] < c[0] < 0

    def test_vectorised(self):
        out = purchase_cost(np.array([0.0, 1.0]), np.array([2.0, 2.0]), 3.0, 2.0)
        assert out.tolist() == [0.0, 1.5]


@settings(max_examples=200, deadline=None)
@given(xt=st.floats(0.01, 10), frac=st.floats(0.001, 0.999), q=st.floats(1, 8), r=st.floats(0.5, 5))
def test_round_trip(xt, frac, q, r):
    x = frac * xt
    assert abs(responsiveness(xt, q, r, incentive(x, xt, q, r)) - x) <= 1e-9


class TestInstances:
    def test_deterministic(self):
        assert generate_instance("low", 24, 3).dumps() == generate_instance("low", 24, 3).dumps()

    def test_seeds_differ(self):
        assert generate_instance("low", 24, 3).dumps() != generate_instance("low", 24, 4).dumps()

    @pytest.mark.parametrize("cat", ["low", "medium", "high"])
    def test_rebound_matrix(self, cat):
        A = generate_instance(cat, 24, 1).A
        assert np.all(np.diag(A) == 0) and np.all(np.triu(A) == 0)
        assert A.sum(axis=0).max() <= 1.0 and np.all(A >= 0)

    def test_profile_and_parameters(self):
        inst = generate_instance("low", 24, 2)
        assert np.all(inst.xbar > 0) and np.all(inst.r > 0) and np.all(inst.q >= 0)
        assert np.all((inst.q >= 1) & (inst.q <= 8) & (inst.r >= 0.5) & (inst.r <= 5))

    def test_low_prices_mostly_below_ten(self):
        prices = np.concatenate([generate_instance("low", 24, s).prices for s in range(200)])
        assert np.mean(prices < 10) >= 0.9

    def test_categories_are_ordered(self):
        med = [np.median(generate_instance(c, 24, 0).prices) for c in ("low", "medium", "high")]
        assert med[0] < med[1] < med[2]

    def test_json_round_trip(self, tmp_path):
        inst = generate_instance("medium", 6, 5)
        inst.save(tmp_path / "i.json")
        back = MarketInstance.load(tmp_path / "i.json")
        assert np.array_equal(back.A, inst.A) and np.array_equal(back.prices, inst.prices)
        assert back.category == "medium" and back.seed == 5

    def test_invalid_rebound(self):
        inst = generate_instance("low", 3, 0)
        A = inst.A.copy()
        A[0, 2] = 0.1
        with pytest.raises(ValueError):
            MarketInstance(inst.prices, inst.xbar, A, inst.q, inst.r)


class TestIngest:
    def test_two_scenarios(self):
        out = ingest_prices(price_csv())
        assert sorted(out) == ["a", "b"] and all(v.shape == (24,) for v in out.values())
        assert out["a"][12] == pytest.approx(13 * 1.5)

    def test_rows_sorted_by_hour(self):
        text = "scenario,hour,price_dkk_per_mwh\ns,2,5\ns,1,4\n"
        assert ingest_prices(text)["s"].tolist() == [4.0, 5.0]

    def test_missing_hour(self):
        with pytest.raises(ValueError, match=r"'b'.*hour 13"):
            ingest_prices(price_csv(drop=("b", 13)))

    def test_duplicate(self):
        with pytest.raises(ValueError, match="duplicate"):
            ingest_prices(price_csv(dup=("a", 3)))

    def test_non_numeric(self):
        with pytest.raises(ValueError, match="not numeric"):
            ingest_prices("scenario,hour,price_dkk_per_mwh\na,1,cheap\n")

    def test_header(self):
        with pytest.raises(ValueError, match="header"):
            ingest_prices("s,h,p\na,1,1\n")


class TestModel:
    def test_cvxd_counts(self, nets):
        bm = build_bidding_model(generate_instance("low", 24, 0), CvxdLP(), nets["cvxd"])
        # per period: x, xtilde, cost, net output, fixed q and r, 40 hidden neurons
        assert bm.model.n_vars == 24 * (6 + 40)
        # per period: rebound, capacity, cost epigraph, 40 ReLU rows, output row
        assert bm.model.n_cons == 24 * (3 + 40 + 1)
        assert bm.model.binaries == []

    def test_bigm_binary_count(self, nets):
        bm = build_bidding_model(generate_instance("low", 24, 0), BigM(), nets["uc"])
        assert 0 < len(bm.model.binaries) <= 24 * 40

    @pytest.mark.parametrize("method,net", [(CvxdLP(), "uc"), (Hybrid(2), "uc"), (Hybrid(2), "cvxd2")])
    def test_kind_mismatch(self, nets, method, net):
        if net == "cvxd2" and isinstance(method, Hybrid):
            build_bidding_model(generate_instance("low", 2, 0), method, nets[net])
            return
        with pytest.raises(EmbeddingError):
            build_bidding_model(generate_instance("low", 2, 0), method, nets[net])

    def test_needs_network(self):
        with pytest.raises(EmbeddingError):
            build_bidding_model(generate_instance("low", 2, 0), BigM())

    def test_zero_prices_give_zero_profit(self):
        inst = generate_instance("low", 3, 0)
        inst.prices[:] = 0.0
        res = solve_bidding(build_bidding_model(inst, Pwl(3)), BBOptions(gap=0.0))
        assert res.objective == pytest.approx(0.0, abs=1e-9)
        assert all(res.value(f"lp_{t}") == pytest.approx(0.0, abs=1e-9) for t in (1, 2, 3))

    @pytest.mark.parametrize("method,net", [(CvxdLP(), "cvxd"), (BigM(), "uc")])
    def test_zero_prices_only_pay_surrogate(self, nets, method, net):
        # a surrogate may be positive everywhere, so the optimum is minus its smallest total
        inst = generate_instance("low", 3, 0)
        inst.prices[:] = 0.0
        res = solve_bidding(build_bidding_model(inst, method, nets[net]), BBOptions(gap=0.0))
        lp = sum(res.value(f"lp_{t}") for t in (1, 2, 3))
        assert res.objective <= 1e-9
        assert res.objective == pytest.approx(-lp, abs=1e-7)

    @pytest.mark.parametrize("method,net", [(CvxdLP(), "cvxd"), (PCAR(1.0), "uc"), (PCTAR(10.0), "uc"),
                                            (BigM(), "uc"), (Hybrid(2), "cvxd2"), (Pwl(4), None)])
    def test_rebound_and_objective_consistency(self, nets, method, net):
        inst = generate_instance("medium", 4, 1)
        bm = build_bidding_model(inst, method, nets.get(net))
        res = solve_bidding(bm, BBOptions(gap=0.0, time_limit=120))
        assert res.status is Status.OPTIMAL
        x = np.array([res.value(f"x_{t}") for t in range(1, 5)])
        xt = np.array([res.value(f"xt_{t}") for t in range(1, 5)])
        lp = np.array([res.value(f"lp_{t}") for t in range(1, 5)])
        assert np.all(xt <= inst.xbar + 1e-9)
        assert np.all(x <= 0.99 * xt + 1e-9)
        full = {v.name: res.primal[v.name] for v in bm.model.variables}
        names = [v.name for v in bm.model.variables]
        penalty = sum(a * full[names[h]] for h, a in bm.penalty)
        assert res.objective == pytest.approx(float(inst.prices @ x - lp.sum()) - penalty, abs=1e-7)


class TestEvaluation:
    def fake_result(self, x, xt, lp, status=Status.OPTIMAL):
        primal = {}
        for t, (a, b, c) in enumerate(zip(x, xt, lp), start=1):
            primal.update({f"x_{t}": a, f"xt_{t}": b, f"lp_{t}": c})
        return SolveResult(status, objective=0.0, gap=0.0, primal=primal, wall_time=0.5)

    def instance(self, T=1, prices=(5.0,), q=(3.0,), r=(2.0,), xbar=(2.0,)):
        return MarketInstance(list(prices), list(xbar), np.zeros((T, T)), list(q), list(r))

    def test_hand_example(self):
        rep = evaluate_solution(self.instance(), self.fake_result([1.0], [2.0], [1.2]), "m")
        assert rep.profit == pytest.approx(3.5)
        assert rep.rmse == pytest.approx(0.3)

    def test_zero_bids(self):
        inst = self.instance(2, (5.0, 6.0), (3.0, 3.0), (2.0, 2.0), (2.0, 2.0))
        rep = evaluate_solution(inst, self.fake_result([0.0, 0.0], [2.0, 2.0], [0.3, 0.4]), "m")
        assert rep.profit == 0.0
        assert rep.rmse == pytest.approx(math.sqrt((0.09 + 0.16) / 2))

    def test_perfect_surrogate(self):
        lp = purchase_cost(1.0, 2.0, 3.0, 2.0)
        rep = evaluate_solution(self.instance(), self.fake_result([1.0], [2.0], [lp]), "m")
        assert rep.rmse == 0.0

    def test_clamp_warning(self):
        rep = evaluate_solution(self.instance(), self.fake_result([2.0], [2.0], [1.0]), "m")
        assert rep.warnings and math.isfinite(rep.profit)

    def test_missing_values(self):
        with pytest.raises(ValueError, match="lacks"):
            evaluate_solution(self.instance(), SolveResult(Status.OPTIMAL, primal={"x_1": 0.0}), "m")

    def test_csv_exports(self):
        rep = evaluate_solution(self.instance(), self.fake_result([1.0], [2.0], [1.2]), "m")
        d = detail_csv([(rep, "s1")]).splitlines()
        s = summary_csv([(rep, "s1")]).splitlines()
        assert d[0] == ",".join(DETAIL_HEADER) and d[1].startswith("m,s1,1,1.0,2.0,1.2,1.5")
        assert s[0] == ",".join(SUMMARY_HEADER) and s[1].endswith(",Optimal")


class TestTightnessInUse:
    def test_cvxd_surrogate_matches_forward_pass(self, nets):
        rep, res, _ = run_method(generate_instance("low", 6, 2), CvxdLP(), nets["cvxd"])
        assert rep.looseness <= 1e-6 * (1 + np.abs(rep.surrogate).max())

    def test_bigm_surrogate_matches_forward_pass(self, nets):
        rep, res, _ = run_method(generate_instance("medium", 3, 2), BigM(), nets["uc"], BBOptions(gap=0.0))
        assert rep.looseness <= 1e-5 * (1 + np.abs(rep.surrogate).max())
