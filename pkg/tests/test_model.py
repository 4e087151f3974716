import math

import pytest

from cvxdnn.model import INF, ModelError, ObjSense, OptModel, Sense, VarKind, write_lp_text


def small_model():
    m = OptModel("demo")
    x = m.add_variable("x", 0, 10)
    y = m.add_variable("y", -INF, INF)
    b = m.add_variable("b", 0, 1, VarKind.BINARY)
    m.add_constraint("c1", [(x, 1.0), (y, -2.5)], Sense.LE, 4)
    m.add_constraint("c2", [(x, 1.0)], Sense.GE, 1)
    m.add_constraint("c3", [(y, 1.0), (b, 3.0)], Sense.EQ, 0.5)
    m.set_objective([(x, 1.0), (y, -1.0), (b, 2.0)], ObjSense.MAXIMIZE, 1.5)
    return m


class TestBuilding:
    def test_indices_are_positions(self):
        m = small_model()
        assert [m.var(n) for n in ("x", "y", "b")] == [0, 1, 2]
        assert m.binaries == [2]

    def test_duplicate_name(self):
        m = OptModel()
        m.add_variable("x")
        with pytest.raises(ModelError, match="duplicate"):
            m.add_variable("x")

    @pytest.mark.parametrize("lo,hi", [(1.0, 0.0), (math.nan, 1.0)])
    def test_bad_bounds(self, lo, hi):
        with pytest.raises(ModelError):
            OptModel().add_variable("x", lo, hi)

    def test_binary_bounds(self):
        with pytest.raises(ModelError):
            OptModel().add_variable("b", 0, 2, VarKind.BINARY)

    def test_unknown_index(self):
        m = OptModel()
        m.add_variable("x")
        with pytest.raises(ModelError, match="unknown variable"):
            m.add_constraint("c", [(3, 1.0)], Sense.LE, 1)

    def test_non_finite_coefficient(self):
        m = OptModel()
        m.add_variable("x")
        with pytest.raises(ModelError, match="non-finite"):
            m.add_constraint("c", [(0, math.inf)], Sense.LE, 1)

    def test_duplicate_terms_are_summed(self):
        m = OptModel()
        m.add_variable("x")
        m.add_constraint("c", [(0, 1.0), (0, 2.0)], Sense.LE, 1)
        assert m.constraints[0].terms == [(0, 3.0)]

    def test_evaluation(self):
        m = small_model()
        vals = [2.0, -0.25, 0.0]
        assert m.evaluate_objective(vals) == pytest.approx(1.5 + 2.0 + 0.25)
        assert m.max_violation(vals) == pytest.approx(0.75)  # c3: -0.25 vs 0.5


class TestLpText:
    def test_sections(self):
        text = write_lp_text(small_model())
        lines = text.splitlines()
        assert lines[0] == "\\ demo"
        assert lines[1] == "Maximize"
        assert " obj: x - y + 2 b + 1.5" in lines
        assert " c1: x - 2.5 y <= 4" in lines
        assert " c2: x >= 1" in lines
        assert " c3: y + 3 b = 0.5" in lines
        assert " 0 <= x <= 10" in lines
        assert " y free" in lines
        assert lines[-1] == "End"
        assert lines[lines.index("Binaries") + 1] == " b"

    def test_deterministic(self):
        assert write_lp_text(small_model()) == write_lp_text(small_model())

    def test_full_precision(self):
        m = OptModel()
        m.add_variable("x")
        m.add_constraint("c", [(0, 0.1)], Sense.LE, 1 / 3)
        line = [ln for ln in write_lp_text(m).splitlines() if ln.startswith(" c:")][0]
        coef, rhs = line.split()[1], line.split()[-1]
        assert float(coef) == 0.1 and float(rhs) == 1 / 3

    def test_leading_negative(self):
        m = OptModel()
        m.add_variable("x")
        m.add_variable("y")
        m.add_constraint("c", [(0, -1.0), (1, -2.0)], Sense.GE, -3)
        assert " c: -x - 2 y >= -3" in write_lp_text(m).splitlines()

    def test_fixed_and_upper_only(self):
        m = OptModel()
        m.add_variable("f", 2, 2)
        m.add_variable("u", -INF, 5)
        lines = write_lp_text(m).splitlines()
        assert " f = 2" in lines and " -inf <= u <= 5" in lines
