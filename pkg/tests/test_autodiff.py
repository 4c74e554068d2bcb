"""Value types, primitive ops, the backward sweep, and Adam."""

import numpy as np
import pytest

from conftest import check_gradients
from medres import autodiff as ad
from medres.autodiff import (MissingGradientError, ParameterStore, ShapeError,
                             SparseMatrix, Tape, Tensor)


class TestTensor:
    def test_rejects_nan_and_inf(self):
        with pytest.raises(ValueError):
            Tensor([[1.0, np.nan]])
        with pytest.raises(ValueError):
            Tensor([np.inf])

    def test_immutable(self):
        t = Tensor([[1.0, 2.0]])
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_shape(self):
        assert Tensor(np.zeros((3, 4))).shape == (3, 4)


class TestSparseMatrix:
    def test_sorted_row_major(self):
        s = SparseMatrix(3, 3, [2, 0, 1], [0, 1, 2], [1.0, 2.0, 3.0])
        assert s.entries() == [(0, 1, 2.0), (1, 2, 3.0), (2, 0, 1.0)]

    def test_duplicate_coordinate_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            SparseMatrix(2, 2, [0, 0], [1, 1], [1.0, 2.0])

    def test_out_of_bounds_rejected(self):
        with pytest.raises(IndexError):
            SparseMatrix(2, 2, [0], [2], [1.0])

    def test_densify(self):
        s = SparseMatrix.from_entries(2, 3, [(0, 1, 5.0), (1, 2, -1.0)])
        expect = np.array([[0, 5, 0], [0, 0, -1.0]])
        np.testing.assert_array_equal(s.densify().data, expect)

    def test_transpose_round_trip(self):
        s = SparseMatrix.from_entries(2, 3, [(0, 1, 5.0), (1, 0, 2.0)])
        back = s.transpose().transpose()
        np.testing.assert_array_equal(back.densify().data, s.densify().data)

    def test_nonfinite_value_rejected(self):
        with pytest.raises(ValueError):
            SparseMatrix(2, 2, [0], [0], [np.nan])


def _naive_matmul(a, b):
    m, n = a.shape
    n2, p = b.shape
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            for k in range(n):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self):
        t = Tape()
        a = t.constant(np.eye(2))
        b = t.constant([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).value, [[1, 2], [3, 4]])

    def test_zero(self):
        t = Tape()
        out = ad.matmul(t.constant([[1.0, 2.0]]), t.constant([[0.0], [0.0]]))
        np.testing.assert_array_equal(out.value, [[0.0]])

    def test_hand_case_and_naive_oracle(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        t = Tape()
        out = ad.matmul(t.constant(a), t.constant(b)).value
        np.testing.assert_array_equal(out, [[17.0], [39.0]])
        np.testing.assert_array_equal(out, _naive_matmul(a, b))

    def test_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError):
            ad.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))


class TestSpmm:
    def test_sparse_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        t = Tape()
        out = ad.spmm(SparseMatrix.identity(2), t.constant(x))
        np.testing.assert_array_equal(out.value, x)

    def test_empty_sparse_gives_zeros(self):
        t = Tape()
        out = ad.spmm(SparseMatrix.empty(3, 2), t.constant(np.ones((2, 4))))
        np.testing.assert_array_equal(out.value, np.zeros((3, 4)))

    def test_single_entry_oracle(self):
        s = SparseMatrix.from_entries(2, 2, [(0, 1, 2.0)])
        x = np.array([[1.0, 1.0], [3.0, 5.0]])
        t = Tape()
        out = ad.spmm(s, t.constant(x)).value
        np.testing.assert_array_equal(out, [[6.0, 10.0], [0.0, 0.0]])
        np.testing.assert_array_equal(out, s.densify().data @ x)

    def test_matches_densified_matmul_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            m, n, p = rng.integers(1, 9, size=3)
            nnz = int(rng.integers(0, min(64, m * n) + 1))
            flat = rng.choice(m * n, size=nnz, replace=False)
            s = SparseMatrix(m, n, flat // n, flat % n, rng.normal(size=nnz))
            x = rng.normal(size=(n, p))
            t = Tape()
            dense = s.densify().data @ x
            assert np.max(np.abs(ad.spmm(s, t.constant(x)).value - dense), initial=0.0) < 1e-12

    def test_dimension_error(self):
        t = Tape()
        with pytest.raises(ShapeError):
            ad.spmm(SparseMatrix.empty(2, 3), t.constant(np.ones((2, 2))))


class TestElementwise:
    def test_relu(self):
        t = Tape()
        out = ad.relu(t.constant([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(out.value, [[0.0, 0.0, 2.0]])

    def test_sigmoid_at_zero(self):
        t = Tape()
        assert ad.sigmoid(t.constant([[0.0]])).value[0, 0] == 0.5

    def test_sigmoid_extremes_stay_finite(self):
        t = Tape()
        out = ad.sigmoid(t.constant([[-800.0, 800.0]])).value
        assert np.all(np.isfinite(out))
        assert 0.0 <= out[0, 0] < 1e-100
        assert out[0, 1] == 1.0

    def test_concat_cols(self):
        t = Tape()
        out = ad.concat_cols([t.constant([[1.0]]), t.constant([[2.0, 3.0]])])
        np.testing.assert_array_equal(out.value, [[1.0, 2.0, 3.0]])

    def test_concat_row_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError):
            ad.concat_cols([t.constant(np.ones((2, 1))), t.constant(np.ones((3, 1)))])


class TestBce:
    def test_perfect_prediction_near_zero(self):
        t = Tape()
        loss = ad.bce(t.constant([[1.0], [0.0]]), np.array([[1.0], [0.0]]))
        assert 0.0 <= float(loss.value) < 1e-10

    def test_half_gives_ln2(self):
        t = Tape()
        loss = ad.bce(t.constant([[0.5], [0.5]]), np.array([[1.0], [0.0]]))
        assert abs(float(loss.value) - np.log(2.0)) < 1e-12

    def test_confident_wrong(self):
        t = Tape()
        loss = ad.bce(t.constant([[0.9]]), np.array([[0.0]]))
        assert abs(float(loss.value) - (-np.log(0.1))) < 1e-12

    def test_out_of_range_pred_rejected(self):
        t = Tape()
        with pytest.raises(ValueError, match="lie in"):
            ad.bce(t.constant([[1.5]]), np.array([[1.0]]))

    def test_non_binary_label_rejected(self):
        t = Tape()
        with pytest.raises(ValueError, match="labels"):
            ad.bce(t.constant([[0.5]]), np.array([[0.3]]))


class TestBackward:
    def test_sum_of_matrix_gives_ones(self):
        store = ParameterStore()
        store.add("w", np.arange(4.0).reshape(2, 2))
        t = Tape()
        grads = ad.backward(ad.sum_all(t.param(store, "w")))
        np.testing.assert_array_equal(grads["w"], np.ones((2, 2)))

    def test_sigmoid_slope_at_zero(self):
        store = ParameterStore()
        store.add("w", np.zeros((1, 1)))
        t = Tape()
        loss = ad.sum_all(ad.sigmoid(t.param(store, "w")))
        assert ad.backward(loss)["w"][0, 0] == 0.25

    def test_three_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        store = ParameterStore()
        store.add("w1", rng.normal(0, 0.5, (4, 5)))
        store.add("w2", rng.normal(0, 0.5, (5, 3)))
        store.add("w3", rng.normal(0, 0.5, (3, 1)))
        store.add("b1", rng.normal(0, 0.1, 5))
        x = rng.normal(size=(6, 4))
        y = (rng.random((6, 1)) < 0.5).astype(float)

        def loss():
            t = Tape()
            h1 = ad.relu(ad.add_row(ad.matmul(t.constant(x), t.param(store, "w1")),
                                    t.param(store, "b1")))
            h2 = ad.relu(ad.matmul(h1, t.param(store, "w2")))
            p = ad.sigmoid(ad.matmul(h2, t.param(store, "w3")))
            return ad.bce(p, y)

        assert check_gradients(store, loss) < 1e-4

    def test_unreached_parameter_gets_zero(self):
        store = ParameterStore()
        store.add("used", np.ones((2, 2)))
        store.add("unused", np.ones((3, 3)))
        t = Tape()
        used = t.param(store, "used")
        t.param(store, "unused")
        grads = ad.backward(ad.sum_all(used))
        np.testing.assert_array_equal(grads["unused"], np.zeros((3, 3)))

    def test_non_scalar_root_rejected(self):
        t = Tape()
        with pytest.raises(ShapeError):
            ad.backward(t.constant(np.ones((2, 2))))

    def test_fanout_accumulates(self):
        store = ParameterStore()
        store.add("w", np.full((1, 1), 3.0))
        t = Tape()
        w = t.param(store, "w")
        loss = ad.sum_all(ad.add(w, w))
        assert ad.backward(loss)["w"][0, 0] == 2.0


def _case_rng(seed):
    return np.random.default_rng(1_000_003 * seed + 17)


def _away_from_kinks(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < margin, margin * np.sign(x) + (x == 0) * margin, x)
    return x


def _primitive_cases(seed):
    """One FD check per primitive built from this seed; shapes <= 8x8."""
    rng = _case_rng(seed)
    m, n, p = (int(v) for v in rng.integers(1, 9, size=3))
    cases = []

    store = ParameterStore()
    store.add("a", rng.normal(size=(m, n)))
    store.add("b", rng.normal(size=(n, p)))
    def matmul_loss(s=store):
        t = Tape()
        return ad.sum_all(ad.matmul(t.param(s, "a"), t.param(s, "b")))
    cases.append((store, matmul_loss))

    store = ParameterStore()
    store.add("x", _away_from_kinks(rng, (m, n)))
    def relu_loss(s=store):
        t = Tape()
        return ad.sum_all(ad.relu(t.param(s, "x")))
    cases.append((store, relu_loss))

    store = ParameterStore()
    store.add("x", rng.normal(size=(m, n)))
    def sigmoid_loss(s=store):
        t = Tape()
        return ad.sum_all(ad.sigmoid(t.param(s, "x")))
    cases.append((store, sigmoid_loss))

    store = ParameterStore()
    store.add("x", rng.normal(size=(m, n)))
    store.add("y", rng.normal(size=(m, n)))
    store.add("bias", rng.normal(size=n))
    def mixed_loss(s=store):
        t = Tape()
        z = ad.add(ad.mul(t.param(s, "x"), t.param(s, "y")), t.param(s, "x"))
        return ad.sum_all(ad.scale(ad.add_row(z, t.param(s, "bias")), 0.7))
    cases.append((store, mixed_loss))

    store = ParameterStore()
    store.add("left", rng.normal(size=(m, n)))
    store.add("right", rng.normal(size=(m, p)))
    def concat_loss(s=store):
        t = Tape()
        cc = ad.concat_cols([t.param(s, "left"), t.param(s, "right")])
        cr = ad.concat_rows([t.param(s, "left"), t.param(s, "left")])
        return ad.add(ad.sum_all(ad.mul(cc, cc)), ad.sum_all(cr))
    cases.append((store, concat_loss))

    store = ParameterStore()
    store.add("x", rng.normal(size=(m, n)))
    ids = rng.integers(0, m, size=2 * m)
    def gather_loss(s=store, ids=ids):
        t = Tape()
        g = ad.gather_rows(t.param(s, "x"), ids)
        return ad.sum_all(ad.mul(g, g))
    cases.append((store, gather_loss))

    store = ParameterStore()
    store.add("p", rng.uniform(0.05, 0.95, size=(m, 1)))
    labels = (rng.random((m, 1)) < 0.5).astype(float)
    def bce_loss(s=store, y=labels):
        t = Tape()
        return ad.bce(t.param(s, "p"), y)
    cases.append((store, bce_loss))

    nnz = int(rng.integers(1, m * n + 1))
    flat = rng.choice(m * n, size=nnz, replace=False)
    sp = SparseMatrix(m, n, flat // n, flat % n, rng.normal(size=nnz))
    store = ParameterStore()
    store.add("x", rng.normal(size=(n, p)))
    def spmm_loss(s=store, sp=sp):
        t = Tape()
        y = ad.spmm(sp, t.param(s, "x"))
        return ad.sum_all(ad.mul(y, y))
    cases.append((store, spmm_loss))

    store = ParameterStore()
    store.add("vals", rng.normal(size=(nnz, 1)))
    store.add("x", rng.normal(size=(n, p)))
    row_idx, col_idx = flat // n, flat % n
    def spmm_dyn_loss(s=store):
        t = Tape()
        sv = ad.SparseVar(m, n, row_idx, col_idx, t.param(s, "vals"))
        y = ad.spmm_dyn(sv, t.param(s, "x"))
        return ad.sum_all(ad.mul(y, y))
    cases.append((store, spmm_dyn_loss))

    return cases


@pytest.mark.parametrize("seed", range(12))
def test_every_primitive_matches_finite_differences(seed):
    for store, build_loss in _primitive_cases(seed):
        assert check_gradients(store, build_loss) < 1e-4


class TestDeterminism:
    def test_identical_runs_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            store = ParameterStore()
            store.add("w", rng.normal(size=(5, 3)))
            x = rng.normal(size=(7, 5))
            y = (rng.random((7, 1)) < 0.5).astype(float)
            t = Tape()
            p = ad.sigmoid(ad.matmul(t.constant(x), ad.matmul(t.param(store, "w"),
                                                              t.constant(rng.normal(size=(3, 1))))))
            loss = ad.bce(p, y)
            return float(loss.value), ad.backward(loss)["w"]

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        store = ParameterStore()
        store.add("w", np.array([[1.0, -2.0]]))
        ad.adam_step(store, {"w": np.zeros((1, 2))}, lr=0.1)
        np.testing.assert_array_equal(store.value("w"), [[1.0, -2.0]])
        assert store.step_count("w") == 1

    def test_first_step_moves_by_lr(self):
        store = ParameterStore()
        store.add("w", np.array([[0.0]]))
        ad.adam_step(store, {"w": np.array([[1.0]])}, lr=0.1)
        # bias correction makes m_hat / sqrt(v_hat) = 1 on step one
        assert abs(store.value("w")[0, 0] + 0.1) < 1e-8

    def test_matches_scalar_reference_trace(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        theta, m, v = 0.7, 0.0, 0.0
        grads = [0.3, 0.3]
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        store = ParameterStore()
        store.add("w", np.array([[0.7]]))
        for g in grads:
            ad.adam_step(store, {"w": np.array([[g]])}, lr=lr, beta1=b1, beta2=b2, eps=eps)
        assert abs(store.value("w")[0, 0] - theta) < 1e-15

    def test_missing_gradient_errors(self):
        store = ParameterStore()
        store.add("w", np.ones((2, 2)))
        with pytest.raises(MissingGradientError):
            ad.adam_step(store, {}, lr=0.1)

    def test_gradient_shape_mismatch_errors(self):
        store = ParameterStore()
        store.add("w", np.ones((2, 2)))
        with pytest.raises(ShapeError):
            ad.adam_step(store, {"w": np.ones(3)}, lr=0.1)


class TestParameterStore:
    def test_duplicate_name_rejected(self):
        store = ParameterStore()
        store.add("w", np.ones(2))
        with pytest.raises(ValueError):
            store.add("w", np.ones(2))

    def test_snapshot_restore_round_trip(self):
        store = ParameterStore()
        store.add("w", np.array([1.0, 2.0]))
        snap = store.snapshot()
        ad.adam_step(store, {"w": np.array([1.0, 1.0])}, lr=0.5)
        assert not np.array_equal(store.value("w"), [1.0, 2.0])
        store.restore(snap)
        np.testing.assert_array_equal(store.value("w"), [1.0, 2.0])
        assert store.step_count("w") == 0

    def test_gather_out_of_range(self):
        t = Tape()
        with pytest.raises(IndexError):
            ad.gather_rows(t.constant(np.ones((2, 2))), [2])
