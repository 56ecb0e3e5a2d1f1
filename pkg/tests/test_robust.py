import math

import numpy as np
import pytest

from scer.regularizer import AlignmentReport
from scer.robust import (
    GroupLossTable,
    RobustState,
    compute_metrics,
    eg_update,
    group_loss_table,
    total_loss,
    weighted_group_loss,
)


def _table(losses, counts=None):
    losses = np.asarray(losses, dtype=float)
    counts = np.ones_like(losses, dtype=int) if counts is None else np.asarray(counts)
    return GroupLossTable(losses, counts)


def _report(loss_embedding):
    return AlignmentReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, loss_embedding)


class TestEgUpdate:
    def test_closed_form(self):
        state = RobustState(np.array([[0.5, 0.5]]), eta=math.log(2))
        q = eg_update(state, _table([[1.0, 0.0]])).q
        np.testing.assert_allclose(q, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_equal_losses(self):
        state = RobustState(np.array([[0.1, 0.2], [0.3, 0.4]]), eta=0.5)
        np.testing.assert_allclose(eg_update(state, _table(np.full((2, 2), 3.7))).q, state.q, atol=1e-15)

    def test_zero_eta(self):
        state = RobustState(np.array([[0.1, 0.2], [0.3, 0.4]]), eta=0.0)
        np.testing.assert_array_equal(eg_update(state, _table([[1.0, 5.0], [0.0, 2.0]])).q, state.q)

    def test_absent_group_keeps_weight(self):
        state = RobustState.uniform(2, 2, eta=1.0)
        q = eg_update(state, _table([[1.0, 0.0], [0.0, 0.0]], counts=[[3, 0], [2, 2]])).q
        # unnormalized: absent (0,1) stays 0.25, present ones get 0.25 * e^{L}
        raw = np.array([[0.25 * math.e, 0.25], [0.25, 0.25]])
        np.testing.assert_allclose(q, raw / raw.sum(), atol=1e-15)

    def test_overflow_guard(self):
        state = RobustState.uniform(1, 2, eta=1.0)
        q = eg_update(state, _table([[1000.0, 0.0]])).q
        assert np.all(np.isfinite(q)) and q[0, 0] > 0.999999

    def test_shift_invariance_and_simplex(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            m, k = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            if m * k < 2:
                continue
            q0 = rng.dirichlet(np.ones(m * k)).reshape(m, k) + 1e-3
            state = RobustState(q0 / q0.sum(), eta=float(rng.uniform(0, 2)))
            losses = rng.uniform(0, 5, size=(m, k))
            a = eg_update(state, _table(losses)).q
            b = eg_update(state, _table(losses + rng.uniform(0, 10))).q
            assert np.max(np.abs(a - b)) <= 1e-12
            assert np.all(a > 0) and np.all(a < 1) and abs(a.sum() - 1) <= 1e-12

    def test_invalid_state(self):
        with pytest.raises(ValueError):
            RobustState(np.array([[0.5, 0.6]]))
        with pytest.raises(ValueError):
            RobustState(np.array([[1.0, 0.0]]))
        with pytest.raises(ValueError):
            RobustState(np.array([[0.5, 0.5]]), eta=-1.0)


class TestGroupLoss:
    def test_table(self):
        t = group_loss_table([1.0, 3.0, 2.0], [0, 0, 1], [1, 1, 0], 2, 2)
        np.testing.assert_array_equal(t.losses, [[0.0, 2.0], [2.0, 0.0]])
        np.testing.assert_array_equal(t.counts, [[0, 2], [1, 0]])

    def test_uniform_weighted(self):
        assert weighted_group_loss(RobustState.uniform(2, 2), _table([[1.0, 2.0], [3.0, 4.0]])) == pytest.approx(2.5, abs=1e-15)

    def test_point_mass(self):
        q = np.array([[1.0 - 3e-12, 1e-12], [1e-12, 1e-12]])
        assert weighted_group_loss(RobustState(q), _table([[1.5, 2.0], [3.0, 4.0]])) == pytest.approx(1.5, abs=1e-10)

    def test_recomputation(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            q = rng.dirichlet(np.ones(6)).reshape(2, 3)
            losses = rng.uniform(0, 3, size=(2, 3))
            counts = rng.integers(0, 3, size=(2, 3))
            want = 0.0
            for i in range(2):
                for j in range(3):
                    if counts[i, j] > 0:
                        want += q[i, j] * losses[i, j]
            got = weighted_group_loss(RobustState(q / q.sum()), _table(losses, counts))
            assert abs(got - want) <= 1e-12


class TestTotalLoss:
    def test_examples(self):
        assert total_loss(2.0, _report(0.0)) == 2.0
        assert total_loss(1.0, _report(-0.5)) == 0.5

    def test_random(self):
        rng = np.random.default_rng(2)
        for a, b in rng.standard_normal((100, 2)):
            assert total_loss(a, _report(b)) == a + b


class TestMetrics:
    def test_all_correct(self):
        m = compute_metrics([0, 1, 1], [0, 1, 1], [0, 0, 1])
        assert m.avg_acc == 1.0 and m.worst_acc == 1.0

    def test_one_group_wrong(self):
        m = compute_metrics([0, 0, 1, 1], [0, 1, 1, 0], [0, 1, 0, 1])
        assert m.worst_acc == 0.0

    def test_hand_enumeration(self):
        labels = [0, 0, 0, 0, 1, 1, 1, 1]
        domains = [0, 0, 1, 1, 0, 0, 1, 1]
        preds = [0, 0, 0, 1, 1, 1, 1, 1]
        m = compute_metrics(preds, labels, domains)
        assert [m.per_group_acc[k] for k in sorted(m.per_group_acc)] == [1.0, 0.5, 1.0, 1.0]
        assert m.worst_acc == 0.5 and m.avg_acc == 7 / 8

    def test_worst_below_average(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(1, 50))
            m = compute_metrics(rng.integers(0, 2, n), rng.integers(0, 2, n), rng.integers(0, 2, n))
            assert m.worst_acc <= m.avg_acc + 1e-15

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_metrics([], [], [])

    def test_row(self):
        row = compute_metrics([0, 1], [0, 1], [0, 0]).as_row("test_")
        assert list(row) == ["test_avg_acc", "test_worst_acc", "test_acc_y0_d0", "test_acc_y1_d0"]
