import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvxdnn.branch_bound import BBOptions, solve_mip
from cvxdnn.embeddings import (EmbeddingError, PCTAR, PwlSpec, activation_start, build_pwl, embed_bigm,
                               embed_cvxd, embed_hybrid, embed_pcar, embed_pctar, pctar_cap,
                               penalty_vectors, propagate_bounds, tabulate_pwl)
from cvxdnn.market import purchase_cost
from cvxdnn.model import INF, ObjSense, OptModel, Sense, Status, VarKind
from cvxdnn.network import fold_normalization, init_network, relu_forward
from cvxdnn.simplex import solve_lp


def net_with_biases(sizes, convex_from=None, seed=0):
    rng = np.random.default_rng(seed)
    net = init_network(sizes, convex_from, seed=seed)
    for b in net.biases:
        b[:] = rng.normal(scale=0.3, size=b.shape)
    net.input_min = np.zeros(sizes[0])
    net.input_max = np.full(sizes[0], 3.0)
    net.output_min, net.output_max = -1.0, 2.0
    return net


def fixed_input_model(z, lo=None, hi=None):
    m = OptModel()
    xs = [m.add_variable(f"z{i}", z[i] if lo is None else lo[i], z[i] if hi is None else hi[i])
          for i in range(len(z))]
    out = m.add_variable("out", -INF, INF)
    return m, xs, out


def minimise(m, out):
    m.set_objective([(out, 1.0)], ObjSense.MINIMIZE)
    return solve_mip(m, BBOptions(gap=0.0)) if m.binaries else solve_lp(m)


class TestPenalties:
    def test_constant(self):
        net = init_network([4, 3, 5, 1])
        vecs = penalty_vectors(net, 0.5)
        assert [v.tolist() for v in vecs] == [[0.5] * 3, [0.5] * 5]

    @pytest.mark.parametrize("rule,expect", [("5^l", [5, 25]), ("2^-l", [0.5, 0.25]), ("10^-l", [0.1, 0.01])])
    def test_layer_rules(self, rule, expect):
        vecs = penalty_vectors(init_network([4, 2, 2, 1]), rule)
        assert [v[0] for v in vecs] == pytest.approx(expect)

    def test_bad_rule(self):
        with pytest.raises(EmbeddingError):
            penalty_vectors(init_network([4, 2, 1]), "3^k")

    def test_negative_rejected(self):
        with pytest.raises(EmbeddingError):
            penalty_vectors(init_network([4, 2, 1]), -1.0)

    def test_per_neuron_vectors(self):
        vecs = penalty_vectors(init_network([4, 2, 3, 1]), [[1, 2], [3, 4, 5]])
        assert vecs[1].tolist() == [3, 4, 5]

    def test_wrong_length(self):
        with pytest.raises(EmbeddingError):
            penalty_vectors(init_network([4, 2, 3, 1]), [1.0])


class TestPctarCap:
    def test_default_box(self):
        assert pctar_cap(-10, 10) == pytest.approx((0.5, 5.0))

    def test_line_passes_through_corners(self):
        k1, k2 = pctar_cap(-3.0, 7.0)
        assert k1 * -3.0 + k2 == pytest.approx(0.0)
        assert k1 * 7.0 + k2 == pytest.approx(7.0)

    @pytest.mark.parametrize("lb,ub", [(1, 10), (-10, -1), (0, 5)])
    def test_invalid_box(self, lb, ub):
        with pytest.raises(EmbeddingError):
            PCTAR(1.0, lb, ub)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_interval_bounds_are_sound(seed):
    rng = np.random.default_rng(seed)
    net = net_with_biases([4, 5, 4, 1], seed=seed)
    lo = rng.uniform(-1, 1, 4)
    hi = lo + rng.uniform(0, 2, 4)
    bounds = propagate_bounds(net, list(zip(lo, hi)))
    folded = fold_normalization(net)
    Z = rng.uniform(lo, hi, (200, 4))
    H = Z
    for (plo, phi), w, b in zip(bounds, folded.weights, folded.biases):
        pre = H @ w + b
        assert np.all(pre >= plo - 1e-9) and np.all(pre <= phi + 1e-9)
        H = np.maximum(pre, 0)


class TestCvxd:
    @pytest.mark.parametrize("seed", range(10))
    def test_tight_at_fixed_inputs(self, seed):
        net = net_with_biases([4, 6, 5, 1], convex_from=1, seed=seed)
        z = np.random.default_rng(seed).uniform(0, 3, 4)
        m, xs, out = fixed_input_model(z)
        emb = embed_cvxd(m, net, xs, out)
        assert not m.binaries and emb.binaries == []
        res = minimise(m, out)
        f = relu_forward(net, z)[0]
        assert abs(res.value("out") - f) <= 1e-6 * (1 + abs(f))

    def test_minimum_over_box_matches_sampling(self):
        net = net_with_biases([2, 8, 8, 1], convex_from=1, seed=4)
        m, xs, out = fixed_input_model([0, 0], lo=[0, 0], hi=[3, 3])
        embed_cvxd(m, net, xs, out)
        res = minimise(m, out)
        g = np.linspace(0, 3, 61)
        Z = np.array([[a, b] for a in g for b in g])
        assert res.value("out") <= net.predict(Z).min() + 1e-9
        z_star = [res.value("z0"), res.value("z1")]
        assert relu_forward(net, z_star)[0] == pytest.approx(res.value("out"), abs=1e-6)

    def test_rejects_unconstrained(self):
        m, xs, out = fixed_input_model([1, 1, 1, 1])
        with pytest.raises(EmbeddingError):
            embed_cvxd(m, init_network([4, 3, 1]), xs, out)

    def test_rejects_wrong_input_count(self):
        m, xs, out = fixed_input_model([1, 1])
        with pytest.raises(EmbeddingError):
            embed_cvxd(m, init_network([4, 3, 1], 1), xs, out)


class TestBigM:
    @pytest.mark.parametrize("seed", range(10))
    def test_exact_at_fixed_inputs(self, seed):
        net = net_with_biases([4, 6, 4, 1], seed=seed)
        z = np.random.default_rng(seed).uniform(0, 3, 4)
        m, xs, out = fixed_input_model(z)
        embed_bigm(m, net, [(0, 3)] * 4, xs, out)
        res = minimise(m, out)
        assert res.value("out") == pytest.approx(relu_forward(net, z)[0], abs=1e-6)

    def test_maximum_over_box(self):
        # the encoding is exact, so maximising also works (unlike the LP relaxations)
        net = net_with_biases([2, 6, 6, 1], seed=7)
        m, xs, out = fixed_input_model([0, 0], lo=[0, 0], hi=[3, 3])
        embed_bigm(m, net, [(0, 3), (0, 3)], xs, out)
        m.set_objective([(out, 1.0)], ObjSense.MAXIMIZE)
        res = solve_mip(m, BBOptions(gap=0.0))
        g = np.linspace(0, 3, 61)
        Z = np.array([[a, b] for a in g for b in g])
        assert res.objective >= net.predict(Z).max() - 1e-9
        z_star = [res.value("z0"), res.value("z1")]
        assert relu_forward(net, z_star)[0] == pytest.approx(res.objective, abs=1e-6)

    def test_stable_neurons_get_no_binary(self):
        net = net_with_biases([2, 5, 1], seed=1)
        m, xs, out = fixed_input_model([1.0, 2.0])
        emb = embed_bigm(m, net, [(1.0, 1.0), (2.0, 2.0)], xs, out)
        assert emb.binaries == []  # a point box fixes every neuron's phase

    def test_activation_start_is_feasible(self):
        net = net_with_biases([4, 6, 4, 1], seed=3)
        z = np.array([0.5, 1.0, 2.0, 2.5])
        m, xs, out = fixed_input_model(z, lo=[0] * 4, hi=[3] * 4)
        emb = embed_bigm(m, net, [(0, 3)] * 4, xs, out)
        for j, v in activation_start(net, emb, z).items():
            m.set_bounds(j, v, v)
        for i, zi in enumerate(z):
            m.set_bounds(xs[i], zi, zi)
        res = minimise(m, out)
        assert res.value("out") == pytest.approx(relu_forward(net, z)[0], abs=1e-6)

    def test_infinite_box_rejected(self):
        m, xs, out = fixed_input_model([0, 0])
        with pytest.raises(EmbeddingError):
            embed_bigm(m, init_network([2, 3, 1]), [(0, INF), (0, 1)], xs, out)


class TestHybrid:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_forward_pass(self, seed):
        net = net_with_biases([4, 6, 5, 1], convex_from=2, seed=seed)
        z = np.random.default_rng(seed).uniform(0, 3, 4)
        m, xs, out = fixed_input_model(z)
        embed_hybrid(m, net, 2, [(0, 3)] * 4, xs, out)
        res = minimise(m, out)
        assert res.value("out") == pytest.approx(relu_forward(net, z)[0], abs=1e-6)

    def test_k_one_is_cvxd(self):
        net = net_with_biases([4, 5, 1], convex_from=1, seed=2)
        m1, xs1, o1 = fixed_input_model([1, 1, 1, 1])
        m2, xs2, o2 = fixed_input_model([1, 1, 1, 1])
        embed_hybrid(m1, net, 1, [(0, 3)] * 4, xs1, o1)
        embed_cvxd(m2, net, xs2, o2)
        assert m1.n_vars == m2.n_vars and m1.n_cons == m2.n_cons and not m1.binaries

    def test_full_depth_is_bigm(self):
        net = net_with_biases([4, 5, 3, 1], seed=6)
        m1, xs1, o1 = fixed_input_model([1, 2, 0, 1], lo=[0] * 4, hi=[3] * 4)
        m2, xs2, o2 = fixed_input_model([1, 2, 0, 1], lo=[0] * 4, hi=[3] * 4)
        embed_hybrid(m1, net, 3, [(0, 3)] * 4, xs1, o1)
        embed_bigm(m2, net, [(0, 3)] * 4, xs2, o2)
        assert len(m1.binaries) == len(m2.binaries)

    def test_mismatched_kind(self):
        m, xs, out = fixed_input_model([1, 1, 1, 1])
        with pytest.raises(EmbeddingError):
            embed_hybrid(m, net_with_biases([4, 5, 5, 1]), 2, [(0, 3)] * 4, xs, out)


class TestPenalised:
    def test_pcar_collects_penalty_terms(self):
        net = net_with_biases([4, 3, 2, 1], seed=1)
        m, xs, out = fixed_input_model([1, 1, 1, 1])
        emb = embed_pcar(m, net, "2^l", xs, out)
        assert sorted({a for _, a in emb.penalty}) == [2.0, 4.0]
        assert len(emb.penalty) == 5

    def test_pcar_zero_penalty_adds_nothing(self):
        net = net_with_biases([4, 3, 1], seed=1)
        m, xs, out = fixed_input_model([1, 1, 1, 1])
        assert embed_pcar(m, net, 0.0, xs, out).penalty == []

    def test_pcar_never_overestimates_minimum(self):
        # the relaxation contains the exact graph, so its minimum is a lower bound
        net = net_with_biases([4, 6, 4, 1], seed=8)
        z = np.array([1.0, 2.0, 0.5, 1.5])
        m, xs, out = fixed_input_model(z)
        embed_pcar(m, net, 0.0, xs, out)
        res = minimise(m, out)
        assert res.status in (Status.OPTIMAL, Status.UNBOUNDED)
        if res.status is Status.OPTIMAL:
            assert res.value("out") <= relu_forward(net, z)[0] + 1e-9

    def test_pctar_adds_cap_rows(self):
        net = net_with_biases([4, 3, 2, 1], seed=1)
        m, xs, out = fixed_input_model([1, 1, 1, 1])
        embed_pctar(m, net, 1.0, -10, 10, xs, out)
        assert sum(c.name.startswith("nn_cap") for c in m.constraints) == 5


class TestPwl:
    def spec(self, n=4):
        return tabulate_pwl(lambda x, xt: purchase_cost(x, xt, 3.0, 2.0), 6.0, n)

    def test_grid(self):
        s = self.spec()
        assert s.u_grid[-1] == pytest.approx(0.99) and s.xt_grid[-1] == 6.0
        assert s.values.shape == (5, 5)

    @pytest.mark.parametrize("a,c", [(0, 4), (2, 2), (4, 4), (3, 1), (4, 1)])
    def test_exact_at_vertices(self, a, c):
        s = self.spec()
        u, xt = s.u_grid[a], s.xt_grid[c]
        for sense in (ObjSense.MINIMIZE, ObjSense.MAXIMIZE):
            m = OptModel()
            x = m.add_variable("x", u * xt, u * xt)
            t = m.add_variable("xt", xt, xt)
            cost = m.add_variable("cost", -INF, INF)
            build_pwl(s, m, x, t, cost)
            m.set_objective([(cost, 1.0)], sense)
            res = solve_mip(m, BBOptions(gap=0.0))
            assert res.value("cost") == pytest.approx(s.values[a, c], abs=1e-9)

    def test_one_cell_binary_per_cell(self):
        m = OptModel()
        x, t, c = m.add_variable("x"), m.add_variable("xt"), m.add_variable("c", -INF, INF)
        emb = build_pwl(self.spec(3), m, x, t, c)
        assert len(emb.binaries) == 9 and all(m.variables[j].kind is VarKind.BINARY for j in emb.binaries)

    def test_invalid_spec(self):
        with pytest.raises(EmbeddingError):
            PwlSpec([0, 0.5, 0.4], [0, 1], np.zeros((3, 2)))
        with pytest.raises(EmbeddingError):
            PwlSpec([0, 1], [0, 1], [[0, np.inf], [0, 0]])
        with pytest.raises(EmbeddingError):
            tabulate_pwl(lambda x, xt: x, 5.0, 0)
