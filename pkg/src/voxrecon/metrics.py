"""Chamfer-style distances, thresholded percentage metrics and training losses.

All distances are squared Euclidean, and accuracy/completeness compare the
squared nearest-neighbor distance against ``d_thresh`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T


def _as_points(x, name):
    a = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if not len(a):
        raise ValueError(f"{name} is empty")
    return a


def knn_sq(src, dst, k=1):
    """Squared distances from each ``src`` point to its ``k`` nearest ``dst`` points, ascending.

    The tree only picks the neighbors; distances are recomputed directly.
    """
    src, dst = _as_points(src, "src"), _as_points(dst, "dst")
    if k < 1 or k > len(dst):
        raise ValueError(f"k={k} needs 1 <= k <= {len(dst)}")
    _, idx = cKDTree(dst).query(src, k=list(range(1, k + 1)))
    diff = src[:, None, :] - dst[idx]
    return np.sort((diff * diff).sum(axis=-1), axis=1)


def point_to_set_sq(p, S, k=1):
    """Mean of the ``k`` smallest squared distances from ``p`` to ``S``."""
    return float(knn_sq(np.asarray(p).reshape(1, 3), S, k)[0].mean())


def directed_k(src, dst, k=1):
    return knn_sq(src, dst, k).mean(axis=1)


def k_chamfer(pred, gt, k=1):
    return float(directed_k(pred, gt, k).mean() + directed_k(gt, pred, k).mean())


def chamfer(pred, gt):
    return k_chamfer(pred, gt, 1)


def accuracy(pred, gt, d_thresh):
    """Percentage of predicted points whose squared distance to ``gt`` is at most ``d_thresh``."""
    d = knn_sq(pred, gt, 1)[:, 0]
    return 100.0 * np.count_nonzero(d <= d_thresh) / len(d)


def completeness(pred, gt, d_thresh):
    return accuracy(gt, pred, d_thresh)


def f_score(acc, comp):
    if not (0 <= acc <= 100 and 0 <= comp <= 100):
        raise ValueError("percentages must lie in [0, 100]")
    if acc + comp == 0:
        return 0.0
    return 2.0 * acc * comp / (acc + comp)


# ---------------------------------------------------------------- losses

def chamfer_loss(pred, gt):
    """Differentiable chamfer distance from a ``[N, 3]`` tensor to fixed points."""
    pred = T.as_tensor(pred)
    gt = _as_points(gt, "gt")
    _, to_gt = cKDTree(gt).query(pred.data)
    _, to_pred = cKDTree(pred.data).query(gt)
    a = T.sub(pred, T.Tensor(gt[to_gt]))
    b = T.sub(T.gather_rows(pred, to_pred), T.Tensor(gt))
    return T.add(T.mean(T.sum(T.mul(a, a), axis=1)), T.mean(T.sum(T.mul(b, b), axis=1)))


def voxel_loss(final_logits, final_labels, mid_groups=()):
    """BCE on the final level plus half the mean BCE over intermediate groups.

    ``mid_groups`` is a sequence of ``(logits, labels)`` pairs.
    """
    total = T.bce_with_logits(final_logits, final_labels)
    mid_groups = list(mid_groups)
    if mid_groups:
        terms = [T.bce_with_logits(z, y) for z, y in mid_groups]
        acc = terms[0]
        for t in terms[1:]:
            acc = T.add(acc, t)
        total = T.add(total, T.scale(acc, 0.5 / len(terms)))
    return total


# ---------------------------------------------------------------- reports

DEFAULT_KS = (1, 2, 4)
DEFAULT_THRESHOLDS = (0.02,)


@dataclass
class MetricReport:
    n_pred: int
    n_gt: int
    k_chamfer: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    completeness: dict = field(default_factory=dict)
    f_score: dict = field(default_factory=dict)
    display_scale: float = 1000.0

    def as_pairs(self):
        pairs = [("n_pred", str(self.n_pred)), ("n_gt", str(self.n_gt))]
        for k in sorted(self.k_chamfer):
            pairs.append((f"k_chamfer.{k}", repr(self.k_chamfer[k])))
        for name in ("accuracy", "completeness", "f_score"):
            table = getattr(self, name)
            for th in sorted(table):
                pairs.append((f"{name}.{th!r}", repr(table[th])))
        return pairs

    def to_text(self):
        lines = ["point cloud evaluation report", f"points: pred={self.n_pred} gt={self.n_gt}"]
        for k in sorted(self.k_chamfer):
            lines.append(
                f"k-chamfer k={k}: {self.k_chamfer[k] * self.display_scale:.4f}"
                f" (x{self.display_scale:g} display scale; raw {self.k_chamfer[k]:.6e})"
            )
        for th in sorted(self.accuracy):
            lines.append(
                f"d_thresh={th:g} (squared distance): acc {self.accuracy[th]:.2f}%"
                f"  comp {self.completeness[th]:.2f}%  f-score {self.f_score[th]:.2f}%"
            )
        lines.append("[metrics]")
        lines.extend(f"{k}={v}" for k, v in self.as_pairs())
        lines.append("[end]")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        body = text.split("[metrics]\n", 1)[1].split("[end]", 1)[0]
        rep = cls(0, 0)
        for line in body.strip().splitlines():
            key, val = line.split("=", 1)
            if key in ("n_pred", "n_gt"):
                setattr(rep, key, int(val))
                continue
            name, arg = key.split(".", 1)
            table = getattr(rep, name)
            table[int(arg) if name == "k_chamfer" else float(arg)] = float(val)
        return rep


def evaluate(pred, gt, thresholds=DEFAULT_THRESHOLDS, ks=DEFAULT_KS):
    pred, gt = _as_points(pred, "pred"), _as_points(gt, "gt")
    rep = MetricReport(len(pred), len(gt))
    for k in ks:
        rep.k_chamfer[int(k)] = k_chamfer(pred, gt, int(k))
    for th in thresholds:
        th = float(th)
        a, c = accuracy(pred, gt, th), completeness(pred, gt, th)
        rep.accuracy[th], rep.completeness[th], rep.f_score[th] = a, c, f_score(a, c)
    return rep
