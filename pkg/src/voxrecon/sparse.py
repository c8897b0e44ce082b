"""Sparse voxel tensors and the differentiable layers that act on them."""

from __future__ import annotations

import itertools

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .voxhash import VoxelHashTable

KERNEL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER_OFFSET = 13
CHILD_OFFSETS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


class EmptyPruneError(RuntimeError):
    """Every voxel fell below the pruning threshold."""


class SparseVoxelTensor:
    """Unique integer coordinates at one scale with a feature row per voxel.

    Tensors created by stride-1 layers share the coordinate set, hash index
    and cached kernel maps of their input.
    """

    def __init__(self, coords, feats, scale=0, index=None, cache=None):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        feats = T.as_tensor(feats)
        if feats.ndim != 2 or feats.shape[0] != len(coords):
            raise T.ShapeError(f"feats shape {feats.shape} does not match {len(coords)} coords")
        if scale < 0:
            raise ValueError("scale must be non-negative")
        self.coords = coords
        self.feats = feats
        self.scale = int(scale)
        self.index = index if index is not None else VoxelHashTable(coords, scale)
        self._cache = cache if cache is not None else {}

    def __len__(self):
        return len(self.coords)

    @property
    def channels(self):
        return self.feats.shape[1]

    def with_feats(self, feats):
        return SparseVoxelTensor(self.coords, feats, self.scale, self.index, self._cache)

    def cell_size(self, l_vox):
        return l_vox * 2 ** self.scale

    def centers(self, l_vox):
        return (self.coords + 0.5) * self.cell_size(l_vox)

    def lookup(self, coords):
        return self.index.lookup(coords)


def voxelize(points, l_vox):
    """Quantize points into cells of edge ``l_vox``.

    Features are a ones column followed by the mean offset of the assigned
    points from the cell center, in cell units. Returns the tensor and the
    row each input point landed in.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot voxelize an empty point cloud")
    if not l_vox > 0:
        raise ValueError("l_vox must be positive")
    q = pts / l_vox
    cells = np.floor(q).astype(np.int64)
    coords, assign = np.unique(cells, axis=0, return_inverse=True)
    assign = assign.reshape(-1)
    counts = np.bincount(assign, minlength=len(coords)).astype(np.float64)
    offset = q - (cells + 0.5)
    mean_off = np.stack(
        [np.bincount(assign, weights=offset[:, a], minlength=len(coords)) for a in range(3)], axis=1
    ) / counts[:, None]
    feats = np.concatenate([np.ones((len(coords), 1)), mean_off], axis=1)
    return SparseVoxelTensor(coords, feats, 0), assign


def neighbor_rows(t, center, offsets):
    """``(offset, row)`` per offset; ``row`` is None where the neighbor is absent."""
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 3)
    if not len(offsets):
        raise ValueError("offsets must be non-empty")
    rows = t.lookup(np.asarray(center, dtype=np.int64).reshape(1, 3) + offsets)
    return [(tuple(int(v) for v in o), int(r) if r >= 0 else None) for o, r in zip(offsets, rows)]


def kernel_rows(t, query_coords, offsets=KERNEL_OFFSETS):
    """Row indices of ``query + offset`` for every query/offset pair, shape [M, K]; -1 if absent."""
    q = np.asarray(query_coords, dtype=np.int64).reshape(-1, 1, 3)
    nb = (q + offsets[None]).reshape(-1, 3)
    return t.lookup(nb).reshape(len(q), len(offsets))


def _gather_matrix(rows, n_src):
    rows = rows.reshape(-1)
    present = np.nonzero(rows >= 0)[0]
    return sp.csr_matrix(
        (np.ones(len(present)), (present, rows[present])), shape=(len(rows), n_src)
    )


def _conv_map(t, stride):
    key = ("conv", stride)
    if key not in t._cache:
        if stride == 1:
            out_coords = t.coords
            rows = kernel_rows(t, out_coords)
        else:
            out_coords = np.unique(np.floor_divide(t.coords, 2), axis=0)
            rows = kernel_rows(t, 2 * out_coords)
        t._cache[key] = (out_coords, _gather_matrix(rows, len(t)))
    return t._cache[key]


def sparse_conv(t, weights, stride=1, bias=None):
    """3x3x3 sparse convolution.

    Stride 1 keeps the coordinate set. Stride 2 maps to the distinct
    ``floor(coord / 2)`` cells one scale up; output ``u`` reads inputs at
    ``2u + offset`` (a dense stride-2 convolution with padding 1, evaluated
    only at occupied outputs). Absent neighbors contribute nothing.
    """
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    weights = T.as_tensor(weights)
    if weights.ndim != 3 or weights.shape[0] != 27 or weights.shape[1] != t.channels:
        raise T.ShapeError(f"conv weights {weights.shape} incompatible with {t.channels} input channels")
    out_coords, gmat = _conv_map(t, stride)
    c_in, c_out = weights.shape[1], weights.shape[2]
    cols = T.reshape(T.spmm(gmat, t.feats), (len(out_coords), 27 * c_in))
    out = T.matmul(cols, T.reshape(weights, (27 * c_in, c_out)))
    if bias is not None:
        out = T.add_bias(out, bias)
    if stride == 1:
        return t.with_feats(out)
    return SparseVoxelTensor(out_coords, out, t.scale + 1)


def gen_transposed_conv(t, weights, bias=None):
    """Kernel-2 stride-2 generative transposed convolution.

    Each voxel at scale s emits its eight children ``2*coord + {0,1}^3`` at
    scale s-1. Child sets of distinct parents are disjoint, so no
    contributions need summing.
    """
    if t.scale < 1:
        raise ValueError("cannot upsample below the finest scale")
    weights = T.as_tensor(weights)
    if weights.shape[:2] != (8, t.channels):
        raise T.ShapeError(f"transposed conv weights {weights.shape} incompatible with {t.channels} channels")
    c_in, c_out = weights.shape[1], weights.shape[2]
    coords = (2 * t.coords[:, None, :] + CHILD_OFFSETS[None]).reshape(-1, 3)
    w = T.reshape(T.transpose(weights, (1, 0, 2)), (c_in, 8 * c_out))
    out = T.reshape(T.matmul(t.feats, w), (8 * len(t), c_out))
    if bias is not None:
        out = T.add_bias(out, bias)
    return SparseVoxelTensor(coords, out, t.scale - 1)


def prune_mask(logits, tau=0.5):
    z = np.asarray(logits.data if isinstance(logits, T.Tensor) else logits).reshape(-1)
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    return z >= np.log(tau / (1.0 - tau))


def prune(t, logits, tau=0.5, keep=None, rescue=False):
    """Keep rows with ``sigmoid(logit) >= tau``.

    ``keep`` overrides the decision when given (a boolean row mask). With
    ``rescue`` an all-pruned result keeps the single best-scoring voxel
    instead of raising :class:`EmptyPruneError`. Returns the pruned tensor
    and the kept row indices.
    """
    z = np.asarray(logits.data if isinstance(logits, T.Tensor) else logits).reshape(-1)
    if len(z) != len(t):
        raise T.ShapeError(f"{len(z)} logits for {len(t)} voxels")
    mask = prune_mask(z, tau) if keep is None else np.asarray(keep, dtype=bool)
    rows = np.nonzero(mask)[0]
    if not len(rows):
        if not rescue or not len(z):
            raise EmptyPruneError("all voxels pruned")
        rows = np.array([int(np.argmax(z))])
    if len(rows) == len(t):
        return t, rows
    feats = T.gather_rows(t.feats, rows)
    return SparseVoxelTensor(t.coords[rows], feats, t.scale), rows


def interpolation_weights(coords, parent):
    """Sparse [N, |parent|] trilinear weights from scale-s cells to present parents at s+1.

    Per axis a child at ``2m`` sits between parents ``m-1`` (weight 1/4)
    and ``m`` (3/4); a child at ``2m+1`` between ``m`` (3/4) and ``m+1``
    (1/4). Weights are renormalized over present parents.
    """
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    base = np.floor_divide(c - 1, 2)
    w_hi = np.where(c % 2 == 0, 0.75, 0.25)
    corners = base[:, None, :] + CHILD_OFFSETS[None]
    wts = np.prod(np.where(CHILD_OFFSETS[None] == 1, w_hi[:, None, :], 1.0 - w_hi[:, None, :]), axis=2)
    rows = parent.lookup(corners.reshape(-1, 3)).reshape(len(c), 8)
    wts = np.where(rows >= 0, wts, 0.0)
    tot = wts.sum(axis=1, keepdims=True)
    wts = np.divide(wts, tot, out=np.zeros_like(wts), where=tot > 0)
    r, k = np.nonzero(rows >= 0)
    return sp.csr_matrix((wts[r, k], (r, rows[r, k])), shape=(len(c), len(parent)))


def sparse_interpolate(parent, child):
    """Per-voxel features of ``child``: interpolated parent features, then its own."""
    if parent.scale != child.scale + 1:
        raise ValueError("parent must sit exactly one scale above child")
    interp = T.spmm(interpolation_weights(child.coords, parent), parent.feats)
    return T.concat([interp, child.feats], axis=1)
