"""Voxel-to-point relocalization with hashed K-NN and attention.

Each output voxel gathers its K nearest voxels through the hash index,
encodes their relative displacement with an amplitude-scaled sinusoidal
code, runs self-attention over the neighbor tokens and cross-attention
from the query voxel, and regresses a bounded offset from its center.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .hourglass import uniform_init


# tanh rounds to exactly 1 beyond |x| ~ 19; shrinking by this factor keeps |offset| < l_vox / 2 strictly
OFFSET_SHRINK = 1.0 - 1e-9


@dataclass(frozen=True)
class RelocConfig:
    channels: int = 32
    heads: int = 4
    k: int = 8
    n_self: int = 2
    l_vox: float = 0.05
    pe_mode: str = "amp"  # "amp", "plain" or "none"; the latter two exist for ablations


@dataclass
class NeighborSet:
    query: np.ndarray
    coords: np.ndarray
    rows: np.ndarray
    pad: np.ndarray

    def displacements(self, l_vox):
        return (self.coords - self.query[None]) * l_vox


@lru_cache(maxsize=None)
def shell_offsets(r):
    """Integer offsets with Chebyshev norm exactly ``r``, lexicographic."""
    if r == 0:
        return np.zeros((1, 3), dtype=np.int64)
    ax = np.arange(-r, r + 1)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    out = g[np.abs(g).max(axis=1) == r]
    out.setflags(write=False)
    return out


def knn_shell_batch(grid, queries, k):
    """Exact K nearest voxel centers for each query, found by expanding shells.

    Shell ``r`` holds the cells at Chebyshev distance ``r``; a query stops
    once it has ``k`` candidates whose k-th squared distance is below
    ``(r + 1)^2``, the closest any unvisited cell can be. Ties go to the
    lexicographically smaller coordinate. Queries with fewer than ``k``
    reachable voxels repeat their nearest one; ``pad`` marks the repeats.
    Returns ``rows [M, k]`` and ``pad [M, k]``.
    """
    if len(grid) == 0:
        raise ValueError("empty grid")
    if k < 1:
        raise ValueError("k must be at least 1")
    q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    m = len(q)
    coords = grid.coords
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    reach = np.maximum(np.abs(q - lo), np.abs(hi - q)).max(axis=1)
    best = np.full((m, k), np.inf)
    cand_q, cand_r = [], []
    active = np.arange(m)
    r = 0
    while len(active):
        offs = shell_offsets(r)
        nb = q[active, None, :] + offs[None]
        rows = grid.lookup(nb.reshape(-1, 3)).reshape(len(active), len(offs))
        d2 = np.where(rows >= 0, (offs * offs).sum(axis=1)[None, :].astype(np.float64), np.inf)
        qi, oi = np.nonzero(rows >= 0)
        cand_q.append(active[qi])
        cand_r.append(rows[qi, oi])
        best[active] = np.sort(np.concatenate([best[active], d2], axis=1), axis=1)[:, :k]
        done = (best[active, k - 1] < (r + 1) ** 2) | (r >= reach[active])
        active = active[~done]
        r += 1
    cq = np.concatenate(cand_q)
    cr = np.concatenate(cand_r)
    c = coords[cr]
    d2 = ((c - q[cq]) ** 2).sum(axis=1)
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0], d2, cq))
    cq, cr = cq[order], cr[order]
    start = np.searchsorted(cq, np.arange(m))
    rank = np.arange(len(cq)) - start[cq]
    sel = rank < k
    out = np.full((m, k), -1, dtype=np.int64)
    out[cq[sel], rank[sel]] = cr[sel]
    pad = out < 0
    out = np.where(pad, out[:, :1], out)
    return out, pad


def knn_shell(grid, q, k):
    q = np.asarray(q, dtype=np.int64).reshape(3)
    rows, pad = knn_shell_batch(grid, q[None], k)
    return NeighborSet(q, grid.coords[rows[0]], rows[0], pad[0])


def positional_encoding(pos, channels):
    """Sinusoidal code of a 3-vector, ``channels / 3`` interleaved sin/cos per axis.

    Within an axis block of width D, pair j uses ``pos / 10000^(2j/D)``.
    """
    if channels % 6:
        raise ValueError("channels must be divisible by 6")
    pos = np.asarray(pos, dtype=np.float64)
    d = channels // 3
    freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    ang = pos[..., :, None] * freq
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(pos.shape[:-1] + (channels,))


def amplified_pe(d, l_vox, channels):
    """Positional code of ``d / l_vox`` scaled by ``exp(-||d / l_vox||_1)``."""
    pos = np.asarray(d, dtype=np.float64) / l_vox
    amp = np.exp(-np.abs(pos).sum(axis=-1))
    return amp[..., None] * positional_encoding(pos, channels)


def displacement_code(d, cfg):
    """Per-token code of width ``cfg.channels``; channels beyond the largest multiple of 6 stay zero."""
    d = np.asarray(d, dtype=np.float64)
    c6 = cfg.channels - cfg.channels % 6
    out = np.zeros(d.shape[:-1] + (cfg.channels,))
    if cfg.pe_mode == "amp":
        out[..., :c6] = amplified_pe(d, cfg.l_vox, c6)
    elif cfg.pe_mode == "plain":
        out[..., :c6] = positional_encoding(d / cfg.l_vox, c6)
    elif cfg.pe_mode != "none":
        raise ValueError(f"unknown pe_mode {cfg.pe_mode!r}")
    return out


def init_relocalization(rng, c_feat, cfg=RelocConfig(), prefix="reloc."):
    C = cfg.channels
    if C % cfg.heads:
        raise ValueError("channels must be divisible by heads")
    p = {}

    def lin(name, ci, co, bias=True):
        p[f"{prefix}{name}.w"] = uniform_init(rng, (ci, co), ci)
        if bias:
            p[f"{prefix}{name}.b"] = T.Tensor(np.zeros(co), requires_grad=True)

    lin("in", c_feat, C)
    blocks = [f"self{i}" for i in range(cfg.n_self)] + ["cross"]
    for b in blocks:
        for m in ("q", "k", "v", "o"):
            lin(f"{b}.{m}", C, C, bias=False)
        lin(f"{b}.ff1", C, 2 * C)
        lin(f"{b}.ff2", 2 * C, C)
        for ln in ("ln1", "ln2"):
            p[f"{prefix}{b}.{ln}.g"] = T.Tensor(np.ones(C), requires_grad=True)
            p[f"{prefix}{b}.{ln}.b"] = T.Tensor(np.zeros(C), requires_grad=True)
    # zero head: an untrained network returns voxel centers
    p[f"{prefix}head.w"] = T.Tensor(np.zeros((C, 3)), requires_grad=True)
    p[f"{prefix}head.b"] = T.Tensor(np.zeros(3), requires_grad=True)
    return p


def _split_heads(x, heads):
    n, length, c = x.shape
    return T.transpose(T.reshape(x, (n, length, heads, c // heads)), (0, 2, 1, 3))


def multihead_attention(query, context, params, name, heads, key_pad=None):
    """Scaled dot-product attention; returns the projected output and the weights."""
    n, lq, c = query.shape
    lk = context.shape[1]
    if context.shape[2] != c or context.shape[0] != n:
        raise T.ShapeError(f"attention: query {query.shape} vs context {context.shape}")
    q = _split_heads(T.linear(query, params[f"{name}.q.w"]), heads)
    k = _split_heads(T.linear(context, params[f"{name}.k.w"]), heads)
    v = _split_heads(T.linear(context, params[f"{name}.v.w"]), heads)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(c // heads))
    mask = None if key_pad is None else np.asarray(key_pad, dtype=bool)[:, None, None, :]
    attn = T.softmax_lastdim(scores, mask)
    out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (n, lq, c))
    return T.linear(out, params[f"{name}.o.w"]), attn


def attention_block(query, context, params, name, heads=4, key_pad=None):
    """Attention + residual + layer norm, then a ReLU feed-forward + residual + layer norm.

    For self-attention pass the same tokens as ``query`` and ``context``.
    """
    att, _ = multihead_attention(query, context, params, name, heads, key_pad)
    x = T.layer_norm(T.add(query, att), params[f"{name}.ln1.g"], params[f"{name}.ln1.b"])
    h = T.relu(T.linear(x, params[f"{name}.ff1.w"], params[f"{name}.ff1.b"]))
    h = T.linear(h, params[f"{name}.ff2.w"], params[f"{name}.ff2.b"])
    return T.layer_norm(T.add(x, h), params[f"{name}.ln2.g"], params[f"{name}.ln2.b"])


def offsets(coords, f_v, rows, pad, params, cfg, prefix="reloc."):
    """Bounded offsets ``(l_vox/2) * tanh(raw)`` for voxels with given neighbor rows."""
    n, k = rows.shape
    d = (coords[rows] - coords[:, None, :]) * cfg.l_vox
    code = T.Tensor(displacement_code(d, cfg))
    proj = T.linear(f_v, params[f"{prefix}in.w"], params[f"{prefix}in.b"])
    tokens = T.add(T.reshape(T.gather_rows(proj, rows.reshape(-1)), (n, k, cfg.channels)), code)
    for i in range(cfg.n_self):
        tokens = attention_block(tokens, tokens, params, f"{prefix}self{i}", cfg.heads, pad)
    query = T.reshape(proj, (n, 1, cfg.channels))
    out = attention_block(query, tokens, params, f"{prefix}cross", cfg.heads, pad)
    raw = T.linear(T.reshape(out, (n, cfg.channels)), params[f"{prefix}head.w"], params[f"{prefix}head.b"])
    return T.scale(T.tanh(raw), OFFSET_SHRINK * cfg.l_vox / 2)


def relocalize(v_out, f_v, params, cfg, neighbors=None, prefix="reloc."):
    """One point per voxel of ``v_out``: its center plus the regressed offset.

    Returns the points as a Tensor (differentiable w.r.t. ``f_v`` and
    ``params``) and the neighbor arrays used.
    """
    if len(v_out) == 0:
        raise ValueError("empty voxel set")
    f_v = T.as_tensor(f_v)
    if f_v.shape[0] != len(v_out):
        raise T.ShapeError("f_v rows must align with v_out coords")
    if v_out.scale != 0:
        raise ValueError("relocalization expects finest-scale voxels")
    rows, pad = neighbors if neighbors is not None else knn_shell_batch(v_out, v_out.coords, cfg.k)
    delta = offsets(v_out.coords, f_v, rows, pad, params, cfg, prefix)
    centers = T.Tensor(v_out.centers(cfg.l_vox))
    return T.add(centers, delta), (rows, pad)
