import io

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tests.oracles import ccc_direct, fisher_direct
from xmaf import tensor as T
from xmaf.errors import ContractError, DegenerateLossError, DimensionError, InfinityGuardError
from xmaf.metrics import METRIC_CSV_HEADER, ccc, ccc_loss, ccc_tensor, fisher_z_test, write_metric_rows

# frozen from the erfc-based oracle
FISHER_Z = 1.38786494002008
FISHER_P = 0.16517817558930967

series = arrays(np.float64, st.integers(2, 60), elements=st.floats(-1, 1))


class TestCcc:
    def test_identical(self):
        x = [0.1, -0.3, 0.7, 0.2]
        assert ccc(x, x).ccc == pytest.approx(1.0, abs=1e-15)

    def test_reversed(self):
        assert ccc([1, 2, 3], [3, 2, 1]).ccc == pytest.approx(-1.0, abs=1e-15)

    def test_one_third(self):
        r = ccc([0, 1], [1, 2])
        assert r.ccc == pytest.approx(1 / 3, abs=1e-15)
        assert (r.rho, r.sigma_x, r.sigma_y, r.mu_x, r.mu_y) == pytest.approx((1.0, 0.5, 0.5, 0.5, 1.5))

    def test_degenerate(self):
        r = ccc([0.2] * 5, [0.1, 0.2, 0.3, 0.4, 0.5])
        assert r.ccc == 0.0 and r.degenerate

    @pytest.mark.parametrize("x,y", [([1, 2], [1, 2, 3]), ([1], [1])])
    def test_contract(self, x, y):
        with pytest.raises(ContractError):
            ccc(x, y)

    def test_matches_oracle_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(2, 200))
            x = rng.uniform(-1, 1, n)
            y = 0.5 * x + rng.normal(rng.normal(), rng.uniform(0.01, 1), n)
            assert abs(ccc(x, y).ccc - ccc_direct(x, y)) < 1e-10

    @settings(max_examples=200, deadline=None)
    @given(series)
    def test_self_concordance(self, x):
        assume(x.std() > 1e-6)
        assert ccc(x, x).ccc == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(series, st.floats(0.01, 5).flatmap(lambda a: st.sampled_from([a, -a])))
    def test_offset_lowers_concordance(self, x, a):
        assume(x.std() > 1e-3)
        assert ccc(x, x + a).ccc < ccc(x, x).ccc

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 60).flatmap(lambda n: st.tuples(
        arrays(np.float64, n, elements=st.floats(-1, 1)), arrays(np.float64, n, elements=st.floats(-1, 1)))))
    def test_symmetric_and_bounded(self, xy):
        x, y = xy
        r, s = ccc(x, y), ccc(y, x)
        assert abs(r.ccc - s.ccc) <= 1e-12
        assert -1 - 1e-12 <= r.ccc <= 1 + 1e-12
        assert abs(r.ccc) <= abs(r.rho) + 1e-12
        assert r.degenerate == (r.sigma_x == 0 or r.sigma_y == 0)
        if np.all(x == x[0]) or np.all(y == y[0]):
            assert r.degenerate and r.ccc == 0.0


class TestCccLoss:
    def test_perfect(self):
        y = np.tanh(np.random.default_rng(1).standard_normal((100, 2)))
        assert ccc_loss(y, y).item() == pytest.approx(0.0, abs=1e-14)

    def test_batch_is_mean_of_sequences(self):
        rng = np.random.default_rng(2)
        p, y = rng.uniform(-1, 1, (2, 100, 2)), rng.uniform(-1, 1, (2, 100, 2))
        per_seq = [1 - (ccc_direct(p[b, :, 0], y[b, :, 0]) + ccc_direct(p[b, :, 1], y[b, :, 1])) / 2
                   for b in range(2)]
        assert ccc_loss(p, y).item() == pytest.approx(np.mean(per_seq), abs=1e-12)

    def test_training_path_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            x, y = rng.uniform(-1, 1, 100), rng.uniform(-1, 1, 100)
            assert abs(ccc_tensor(T.Tensor(x), T.Tensor(y)).item() - ccc_direct(x, y)) < 1e-10

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        pred = T.parameter(rng.uniform(-1, 1, (100, 2)))
        target = rng.uniform(-1, 1, (100, 2))
        assert T.finite_diff_check(lambda: ccc_loss(pred, target), [pred], tol=1e-4).passed

    def test_degenerate_target(self):
        y = np.zeros((10, 2))
        y[:, 0] = np.linspace(-1, 1, 10)
        with pytest.raises(DegenerateLossError):
            ccc_loss(np.ones((10, 2)), y)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ccc_loss(np.ones((10, 2)), np.ones((9, 2)))


class TestFisher:
    def test_reference_values(self):
        r = fisher_z_test(0.5, 70, 0.3, 70)
        assert r.z_stat == pytest.approx(FISHER_Z, abs=1e-12)
        assert r.p_value == pytest.approx(FISHER_P, abs=1e-12)
        assert not r.significant

    def test_equal_inputs(self):
        r = fisher_z_test(0.4, 100, 0.4, 100)
        assert r.z_stat == 0.0 and r.p_value == 1.0 and not r.significant

    def test_antisymmetric(self):
        a, b = fisher_z_test(0.2, 50, 0.6, 80), fisher_z_test(0.6, 80, 0.2, 50)
        assert a.z_stat == -b.z_stat and a.p_value == b.p_value

    def test_significance_threshold(self):
        r = fisher_z_test(0.6, 5000, 0.5, 5000)
        assert r.significant and r.p_value < 0.01

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-0.999, 0.999), st.integers(4, 10**6), st.floats(-0.999, 0.999), st.integers(4, 10**6))
    def test_matches_oracle_and_p_in_unit_interval(self, r1, n1, r2, n2):
        res = fisher_z_test(r1, n1, r2, n2)
        z, p = fisher_direct(r1, n1, r2, n2)
        assert 0.0 <= res.p_value <= 1.0
        assert res.z_stat == pytest.approx(z, rel=1e-9, abs=1e-12)
        assert res.p_value == pytest.approx(p, rel=1e-6, abs=1e-300)

    def test_guards(self):
        with pytest.raises(InfinityGuardError):
            fisher_z_test(1.0, 10, 0.2, 10)
        with pytest.raises(ContractError):
            fisher_z_test(0.1, 3, 0.2, 10)


def test_metric_csv_header_and_rows():
    buf = io.StringIO()
    write_metric_rows(buf, [{"model_id": "m", "split": "test", "ccc_valence": 0.5, "ccc_arousal": 0.25,
                             "n_frames": 100}])
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(METRIC_CSV_HEADER) == "model_id,split,ccc_valence,ccc_arousal,n_frames"
    assert lines[1] == "m,test,0.5,0.25,100"


def test_constant_series_with_inexact_mean_is_degenerate():
    r = ccc(np.full(80, 0.1), np.linspace(-1, 1, 80))
    assert r.degenerate and r.ccc == 0.0 and r.sigma_x == 0.0
    with pytest.raises(DegenerateLossError):
        ccc_loss(np.zeros((80, 2)), np.column_stack([np.full(80, 0.1), np.linspace(-1, 1, 80)]))
