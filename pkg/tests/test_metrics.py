import numpy as np
import pytest

from oracles import accuracy_oracle, f_score_oracle, k_chamfer_oracle, pairwise_sq
from voxrecon import metrics as M
from voxrecon import tensor as T


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_identical_sets():
    a = np.random.default_rng(0).random((50, 3))
    assert M.chamfer(a, a) == 0
    assert M.accuracy(a, a, 1e-6) == 100
    assert M.completeness(a, a, 1e-6) == 100


def test_unit_shift_singletons():
    a, b = np.zeros((1, 3)), np.array([[1.0, 0, 0]])
    assert M.chamfer(a, b) == 2.0
    assert M.accuracy(a, b, 0.5) == 0


def test_accuracy_uses_squared_distance():
    a, b = np.zeros((1, 3)), np.array([[0.1, 0, 0]])
    # squared distance 0.01 sits under 0.02 even though the distance 0.1 does not
    assert M.accuracy(a, b, 0.02) == 100


def test_f_score_examples():
    assert M.f_score(100, 100) == 100
    assert M.f_score(0, 0) == 0
    assert M.f_score(81.02, 40.41) == pytest.approx(53.92, abs=0.005)


@pytest.mark.parametrize("bad", [-1.0, 101.0])
def test_f_score_range(bad):
    with pytest.raises(ValueError):
        M.f_score(bad, 50)


def test_k_larger_than_set():
    with pytest.raises(ValueError):
        M.k_chamfer(np.zeros((2, 3)), np.zeros((3, 3)), 3)


def test_empty_or_bad_shape():
    with pytest.raises(ValueError):
        M.chamfer(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        M.chamfer(np.zeros((2, 2)), np.zeros((2, 2)))


def test_k1_is_plain_chamfer():
    rng = np.random.default_rng(1)
    a, b = rng.random((80, 3)), rng.random((60, 3))
    assert M.k_chamfer(a, b, 1) == M.chamfer(a, b)


def test_metrics_match_oracles():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a = rng.normal(size=(int(rng.integers(5, 600)), 3))
        b = rng.normal(size=(int(rng.integers(5, 600)), 3))
        th = float(rng.uniform(0.001, 0.5))
        for k in (1, 2, 4):
            assert rel(M.k_chamfer(a, b, k), k_chamfer_oracle(a, b, k)) < 1e-9
        acc = M.accuracy(a, b, th)
        comp = M.completeness(a, b, th)
        assert rel(acc, accuracy_oracle(a, b, th)) < 1e-9 or acc == accuracy_oracle(a, b, th)
        assert comp == M.accuracy(b, a, th)
        assert M.f_score(acc, comp) == pytest.approx(f_score_oracle(acc, comp), rel=1e-12)


def test_k_chamfer_non_decreasing():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.random((100, 3)), rng.random((90, 3))
        vals = [M.k_chamfer(a, b, k) for k in (1, 2, 4, 8)]
        assert all(x <= y for x, y in zip(vals, vals[1:]))


def test_chamfer_symmetric():
    rng = np.random.default_rng(4)
    a, b = rng.random((70, 3)), rng.random((40, 3))
    assert M.chamfer(a, b) == M.chamfer(b, a)


def test_accuracy_monotone_in_threshold():
    rng = np.random.default_rng(5)
    a, b = rng.random((200, 3)), rng.random((200, 3))
    vals = [M.accuracy(a, b, th) for th in np.linspace(0, 0.05, 20)]
    assert all(x <= y for x, y in zip(vals, vals[1:]))


def test_point_to_set():
    S = np.array([[0.0, 0, 0], [2.0, 0, 0], [0, 3.0, 0]])
    assert M.point_to_set_sq(np.array([1.0, 0, 0]), S, 2) == pytest.approx(1.0)
    assert M.point_to_set_sq(np.array([1.0, 0, 0]), S, 3) == pytest.approx((1 + 1 + 10) / 3)


def test_chamfer_loss_matches_pairwise_oracle():
    rng = np.random.default_rng(6)
    for _ in range(10):
        a, b = rng.normal(size=(40, 3)), rng.normal(size=(55, 3))
        d = pairwise_sq(a, b)
        oracle = d.min(axis=1).mean() + d.min(axis=0).mean()
        assert abs(M.chamfer_loss(T.Tensor(a), b).item() - oracle) < 1e-12


def test_chamfer_loss_gradient():
    rng = np.random.default_rng(7)
    gt = rng.normal(size=(30, 3))
    assert T.grad_check(lambda x: M.chamfer_loss(x, gt), rng.normal(size=(20, 3))) < 1e-6


def test_voxel_loss_examples():
    z, y = T.Tensor([20.0, -20.0]), np.array([1.0, 0.0])
    assert M.voxel_loss(z, y).item() < 1e-7
    assert M.voxel_loss(T.Tensor([0.0]), [1.0]).item() == pytest.approx(np.log(2), abs=1e-15)
    # hand-picked three-group case
    mids = [(T.Tensor([1.0, -2.0]), [1.0, 0.0]), (T.Tensor([0.5]), [0.0])]

    def bce(z, y):
        z, y = np.asarray(z), np.asarray(y)
        return np.mean(np.log1p(np.exp(-z)) * y + np.log1p(np.exp(z)) * (1 - y))

    oracle = bce([3.0], [1.0]) + 0.5 * (bce([1.0, -2.0], [1, 0]) + bce([0.5], [0])) / 2
    assert abs(M.voxel_loss(T.Tensor([3.0]), [1.0], mids).item() - oracle) < 1e-12


def test_voxel_loss_empty_group():
    with pytest.raises(ZeroDivisionError):
        M.voxel_loss(T.Tensor([1.0]), [1.0], [(T.Tensor(np.zeros(0)), np.zeros(0))])


def test_report_round_trip():
    rng = np.random.default_rng(8)
    a, b = rng.random((100, 3)), rng.random((120, 3))
    rep = M.evaluate(a, b, thresholds=(0.001, 0.02), ks=(1, 2, 4))
    text = rep.to_text()
    back = M.MetricReport.from_text(text)
    assert back.as_pairs() == rep.as_pairs()
    assert back.to_text() == text
    assert rep.n_pred == 100 and rep.n_gt == 120


def test_evaluate_identical():
    a = np.random.default_rng(9).random((30, 3))
    rep = M.evaluate(a, a)
    assert rep.k_chamfer[1] == 0
    assert all(v == 100 for v in rep.accuracy.values())
    assert all(v == 100 for v in rep.f_score.values())
