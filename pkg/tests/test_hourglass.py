import numpy as np
import pytest

from voxrecon import hourglass as H
from voxrecon import metrics as M
from voxrecon import sparse as S
from voxrecon import tensor as T
from voxrecon.data import random_shape, sample_surface

L = 0.1


@pytest.fixture(scope="module")
def scene():
    rng = np.random.default_rng(0)
    spec = random_shape("sphere", 3)
    pts = sample_surface(spec, 1500, rng)
    vox, _ = S.voxelize(pts, L)
    return vox, H.CellLabeler(pts, L)


def params_for(seed, widths=(8, 8, 8, 8)):
    p = H.init_stacked(np.random.default_rng(seed), 4, widths)
    return H.split_stacked(p)


def open_classifiers(p, value=10.0):
    """Copy of ``p`` whose classifiers keep every candidate."""
    q = dict(p)
    for name in q:
        if ".cls" in name and name.endswith(".b"):
            q[name] = T.Tensor(np.full(1, value))
        elif ".cls" in name and name.endswith(".w"):
            q[name] = T.Tensor(np.zeros_like(q[name].data))
    return q


def test_parameter_names():
    p = H.init_hourglass(np.random.default_rng(0), 4, (8, 16, 16), "x.")
    assert H.hourglass_levels(p, "x.") == 2
    for s in (0, 1):
        for part in ("gen", "skip", "dec", "cls"):
            assert f"x.{part}{s}.w" in p


def test_needs_a_level():
    with pytest.raises(ValueError):
        H.init_hourglass(np.random.default_rng(0), 4, (8,))


def test_output_is_subset_of_final_candidates(scene):
    vox, _ = scene
    p1, _ = params_for(1)
    out = H.hourglass_forward(vox, p1, "s1.", rescue=True)
    cand = {tuple(c) for c in out.levels[-1].candidates.tolist()}
    assert {tuple(c) for c in out.out.coords.tolist()} <= cand
    assert out.out.scale == 0


def test_open_classifiers_keep_everything(scene):
    vox, _ = scene
    p1, _ = params_for(2)
    out = H.hourglass_forward(vox, open_classifiers(p1), "s1.")
    assert len(out.out) == len(out.levels[-1].candidates)


def test_candidates_follow_coordinate_arithmetic(scene):
    vox, _ = scene
    p1, _ = params_for(3)
    out = H.hourglass_forward(vox, p1, "s1.", rescue=True)
    enc = {0: {tuple(c) for c in vox.coords.tolist()}}
    for s in (1, 2, 3):
        enc[s] = {tuple(v // 2 for v in c) for c in enc[s - 1]}
    parents = enc[3]
    for lv in out.levels:
        expect = {(2 * x + a, 2 * y + b, 2 * z + c) for x, y, z in parents
                  for a in (0, 1) for b in (0, 1) for c in (0, 1)}
        assert {tuple(c) for c in lv.candidates.tolist()} == expect
        parents = {tuple(c) for c in lv.candidates[lv.kept].tolist()}


def test_training_keep_includes_labels(scene):
    vox, lab = scene
    p1, _ = params_for(4)
    out = H.hourglass_forward(vox, p1, "s1.", labeler=lab, rescue=True)
    for lv in out.levels:
        kept = np.zeros(len(lv.candidates), bool)
        kept[lv.kept] = True
        assert np.all(kept[lv.labels > 0])
        np.testing.assert_array_equal(lv.labels, lab(lv.candidates, lv.scale))


def test_cell_labeler_scales():
    lab = H.CellLabeler(np.array([[0.05, 0.05, 0.05], [0.35, 0.05, 0.05]]), 0.1)
    assert lab(np.array([[0, 0, 0], [3, 0, 0], [1, 0, 0]]), 0).tolist() == [1, 1, 0]
    assert lab(np.array([[0, 0, 0], [1, 0, 0]]), 1).tolist() == [1, 1]
    assert lab(np.array([[0, 0, 0]]), 2).tolist() == [1]


def test_single_stack_reduces_to_hourglass(scene):
    vox, _ = scene
    p1, _ = params_for(5)
    a = H.stacked_forward(vox, p1, None, rescue=True)
    b = H.hourglass_forward(vox, p1, "s1.", rescue=True)
    np.testing.assert_array_equal(a.out.coords, b.out.coords)
    np.testing.assert_array_equal(a.out.feats.data, b.out.feats.data)
    assert len(a.mid) == 2


def test_mid_group_count(scene):
    vox, lab = scene
    p1, p2 = params_for(6)
    out = H.stacked_forward(vox, p1, p2, labeler=lab, rescue=True)
    # two intermediate levels per stack, plus the first stack's final level
    assert len(out.mid) == 3 - 1 + 3 - 1 + 1
    assert out.mid[-1] is out.stacks[0].levels[-1]
    assert out.final is out.stacks[1].levels[-1]
    assert out.f_v.shape == (len(out.out), H.feature_width((8, 8, 8, 8)))


def test_voxel_loss_matches_term_oracle(scene):
    vox, lab = scene
    p1, p2 = params_for(7)
    out = H.stacked_forward(vox, p1, p2, labeler=lab, rescue=True)
    got = M.voxel_loss(out.final.logits, out.final.labels, [(m.logits, m.labels) for m in out.mid]).item()

    def bce(z, y):
        z = z.data
        return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))

    mids = [bce(m.logits, m.labels) for m in out.mid]
    oracle = bce(out.final.logits, out.final.labels) + 0.5 * sum(mids) / len(mids)
    assert abs(got - oracle) < 1e-12


def test_stacked_forward_grad_check():
    rng = np.random.default_rng(8)
    cells = rng.choice(4 ** 3, size=20, replace=False)
    coords = np.stack(np.unravel_index(cells, (4, 4, 4)), axis=1)
    vox = S.SparseVoxelTensor(coords, rng.normal(size=(20, 4)))
    lab = H.CellLabeler((coords[:12] + 0.5) * L, L)
    p1, p2 = params_for(9, (4, 4, 4, 4))
    w = rng.normal(size=(1000, H.feature_width((4, 4, 4, 4))))

    def loss(f):
        out = H.stacked_forward(vox.with_feats(f), p1, p2, labeler=lab, rescue=True)
        vl = M.voxel_loss(out.final.logits, out.final.labels, [(m.logits, m.labels) for m in out.mid])
        n = out.f_v.shape[0]
        return T.add(vl, T.sum(T.mul(T.tanh(out.f_v), T.Tensor(w[:n]))))

    assert T.grad_check(loss, vox.feats.data) < 1e-4
