"""Sparse hourglass voxel generator and its two-stack arrangement.

Parameters live in flat ``name -> Tensor`` dicts so that both stacks and
the relocalization network share one checkpoint namespace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .sparse import (
    SparseVoxelTensor,
    gen_transposed_conv,
    prune,
    prune_mask,
    sparse_conv,
    sparse_interpolate,
)
from .voxhash import VoxelHashTable

DEFAULT_WIDTHS = (16, 32, 64, 64)
RELU_GAIN = np.sqrt(6.0)


def uniform_init(rng, shape, fan_in, gain=1.0):
    """U(-b, b) with b = gain * sqrt(1 / fan_in); gain sqrt(6) is He-uniform for relu layers."""
    bound = gain * np.sqrt(1.0 / fan_in)
    return T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_hourglass(rng, c_in, widths=DEFAULT_WIDTHS, prefix=""):
    """Parameters of one hourglass with ``len(widths) - 1`` levels.

    ``widths[s]`` is the channel count at scale ``s``.
    """
    levels = len(widths) - 1
    if levels < 1:
        raise ValueError("need at least one level")
    p = {}

    def conv(name, ci, co):
        p[f"{prefix}{name}.w"] = uniform_init(rng, (27, ci, co), 27 * ci, RELU_GAIN)
        p[f"{prefix}{name}.b"] = T.Tensor(np.zeros(co), requires_grad=True)

    conv("enc0", c_in, widths[0])
    for s in range(1, levels + 1):
        conv(f"down{s}", widths[s - 1], widths[s])
        conv(f"enc{s}", widths[s], widths[s])
    for s in range(levels - 1, -1, -1):
        ci, co = widths[s + 1], widths[s]
        p[f"{prefix}gen{s}.w"] = uniform_init(rng, (8, ci, co), ci, RELU_GAIN)
        p[f"{prefix}gen{s}.b"] = T.Tensor(np.zeros(co), requires_grad=True)
        p[f"{prefix}skip{s}.w"] = uniform_init(rng, (co, co), co, RELU_GAIN)
        conv(f"dec{s}", co, co)
        p[f"{prefix}cls{s}.w"] = uniform_init(rng, (co, 1), co)
        p[f"{prefix}cls{s}.b"] = T.Tensor(np.zeros(1), requires_grad=True)
    return p


def hourglass_levels(params, prefix=""):
    n = 0
    while f"{prefix}gen{n}.w" in params:
        n += 1
    return n


class CellLabeler:
    """Occupancy labels from ground-truth points: 1 iff a GT point lies in the cell."""

    def __init__(self, gt_points, l_vox):
        self.l_vox = l_vox
        fine = np.unique(np.floor(np.asarray(gt_points) / l_vox).astype(np.int64), axis=0)
        self._cells = {0: fine}
        self._tables = {}

    def cells(self, scale):
        if scale not in self._cells:
            self._cells[scale] = np.unique(np.floor_divide(self._cells[0], 2 ** scale), axis=0)
        return self._cells[scale]

    def table(self, scale):
        if scale not in self._tables:
            self._tables[scale] = VoxelHashTable(self.cells(scale), scale)
        return self._tables[scale]

    def __call__(self, coords, scale):
        return (self.table(scale).lookup(coords) >= 0).astype(np.float64)


@dataclass
class LevelOutput:
    """One decoder level: every generated candidate and its occupancy logit."""

    scale: int
    candidates: np.ndarray
    logits: T.Tensor
    kept: np.ndarray
    labels: np.ndarray | None = None


@dataclass
class HourglassOutput:
    out: SparseVoxelTensor
    levels: list = field(default_factory=list)
    decoded: dict = field(default_factory=dict)


def _block(t, params, name):
    """Residual 3x3x3 conv block."""
    h = sparse_conv(t, params[f"{name}.w"], 1, params[f"{name}.b"]).feats
    return t.with_feats(T.add(t.feats, T.relu(h)))


def hourglass_forward(t, params, prefix="", tau=0.5, labeler=None, rescue=False):
    """Encode down ``levels`` scales, then generate, join skips, classify and prune back up.

    With a ``labeler`` (training), each level keeps voxels that are predicted
    occupied or labelled occupied, and the labels are attached to the level.
    """
    if t.scale != 0:
        raise ValueError("hourglass input must be at scale 0")
    levels = hourglass_levels(params, prefix)
    x = sparse_conv(t, params[f"{prefix}enc0.w"], 1, params[f"{prefix}enc0.b"])
    x = x.with_feats(T.relu(x.feats))
    skips = {0: x}
    for s in range(1, levels + 1):
        d = sparse_conv(x, params[f"{prefix}down{s}.w"], 2, params[f"{prefix}down{s}.b"])
        d = d.with_feats(T.relu(d.feats))
        x = _block(d, params, f"{prefix}enc{s}")
        skips[s] = x

    result = HourglassOutput(out=None)
    for s in range(levels - 1, -1, -1):
        cand = gen_transposed_conv(x, params[f"{prefix}gen{s}.w"], params[f"{prefix}gen{s}.b"])
        skip = skips[s]
        rows = skip.lookup(cand.coords)
        joined = T.add(cand.feats, T.matmul(T.gather_rows(skip.feats, rows), params[f"{prefix}skip{s}.w"]))
        h = cand.with_feats(T.relu(joined))
        h = _block(h, params, f"{prefix}dec{s}")
        logits = T.reshape(T.linear(h.feats, params[f"{prefix}cls{s}.w"], params[f"{prefix}cls{s}.b"]), (-1,))
        labels = None
        keep = None
        if labeler is not None:
            labels = labeler(h.coords, s)
            keep = prune_mask(logits, tau) | (labels > 0)
        x, kept = prune(h, logits, tau, keep=keep, rescue=rescue)
        result.levels.append(LevelOutput(s, h.coords, logits, kept, labels))
        result.decoded[s] = x
    result.out = x
    return result


@dataclass
class StackedOutput:
    mid: list
    final: LevelOutput
    out: SparseVoxelTensor
    f_v: T.Tensor
    stacks: list


def stacked_forward(t, params1, params2=None, tau=0.5, labeler=None, rescue=False):
    """Run hourglass one then (optionally) hourglass two on its output.

    ``mid`` collects the non-final levels of every stack plus stack one's
    final level; ``final`` is the last level of the last stack. ``f_v``
    concatenates features interpolated from the last stack's scale-1
    decoder output with each output voxel's own decoder feature.
    """
    h1 = hourglass_forward(t, params1, "s1.", tau, labeler, rescue)
    stacks = [h1]
    if params2 is not None:
        h2 = hourglass_forward(h1.out, params2, "s2.", tau, labeler, rescue)
        stacks.append(h2)
    mid = []
    for h in stacks:
        mid.extend(h.levels[:-1])
    if len(stacks) > 1:
        mid.append(stacks[0].levels[-1])
    last = stacks[-1]
    out = last.out
    if 1 in last.decoded:
        f_v = sparse_interpolate(last.decoded[1], out)
    else:
        f_v = out.feats
    return StackedOutput(mid, last.levels[-1], out, f_v, stacks)


def init_stacked(rng, c_in=4, widths=DEFAULT_WIDTHS):
    p = init_hourglass(rng, c_in, widths, "s1.")
    p.update(init_hourglass(rng, widths[0], widths, "s2."))
    return p


def split_stacked(params):
    p1 = {k: v for k, v in params.items() if k.startswith("s1.")}
    p2 = {k: v for k, v in params.items() if k.startswith("s2.")}
    return p1, (p2 or None)


def feature_width(widths=DEFAULT_WIDTHS):
    """Channel count of ``f_v``."""
    return widths[1] + widths[0] if len(widths) > 2 else widths[0]
