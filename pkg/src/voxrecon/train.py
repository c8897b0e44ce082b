"""Run configuration, checkpoints and the two-phase training protocol."""

from __future__ import annotations

import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import tensor as T
from .hourglass import CellLabeler, feature_width, init_stacked, split_stacked, stacked_forward
from .relocalize import RelocConfig, init_relocalization, relocalize
from .sparse import EmptyPruneError, prune_mask, voxelize

log = logging.getLogger(__name__)

MAGIC = b"VOXRECON-CHECKPOINT"
VERSION = 1


class InputError(Exception):
    """Bad user input (missing files, malformed data)."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


class ReconstructionFailure(RuntimeError):
    """Pruning removed every voxel at inference."""


@dataclass
class RunConfig:
    l_vox: float = 0.05
    epochs: int = 10
    lr: float = 1e-3
    lr_halving: int = 2
    batch: int = 4
    k: int = 8
    channels: int = 32
    heads: int = 4
    widths: tuple = (16, 32, 64, 64)
    tau: float = 0.5
    seed: int = 0
    n_shapes: int = 200
    n_gt: int = 10000
    n_input: int = 2048
    val_eval: int = 8

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        for name in ("l_vox", "lr", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr_halving", "batch", "k", "channels", "heads", "n_input"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if self.channels < 6:
            raise ValueError("channels must be at least 6 for the displacement code")

    def lr_at(self, epoch):
        return self.lr * 0.5 ** (epoch // self.lr_halving)

    def reloc(self):
        return RelocConfig(self.channels, self.heads, self.k, 2, self.l_vox)

    def to_text(self):
        out = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name}={v}\n")
        return "".join(out)

    @classmethod
    def from_text(cls, text, base=None):
        kw = dataclasses.asdict(base) if base is not None else {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"config line {ln}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise InputError(f"config line {ln}: unknown key {key!r}")
            default = getattr(cls, key, None) if base is None else getattr(base, key)
            try:
                if isinstance(default, tuple):
                    kw[key] = tuple(int(x) for x in val.split(","))
                elif isinstance(default, bool):
                    kw[key] = val.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kw[key] = int(val)
                else:
                    kw[key] = float(val)
            except ValueError:
                raise InputError(f"config line {ln}: bad value for {key}: {val!r}") from None
        return cls(**kw)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: RunConfig
    params: dict
    stage1: bool = False
    stage2: bool = False

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(MAGIC + b"\n")
        buf.write(f"version {VERSION}\n".encode())
        cfg = self.config.to_text().encode("utf-8")
        lines = cfg.splitlines(keepends=True)
        buf.write(f"config {len(lines)}\n".encode())
        buf.writelines(lines)
        buf.write(f"flags stage1={int(self.stage1)} stage2={int(self.stage2)}\n".encode())
        buf.write(f"params {len(self.params)}\n".encode())
        T.write_params(buf, {k: np.asarray(v) for k, v in self.params.items()})
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw):
        buf = io.BytesIO(raw)
        if buf.readline().rstrip(b"\n") != MAGIC:
            raise InputError("not a checkpoint file")
        ver = buf.readline().split()
        if ver[:1] != [b"version"] or int(ver[1]) != VERSION:
            raise InputError(f"unsupported checkpoint version {ver!r}")
        head = buf.readline().split()
        if head[:1] != [b"config"]:
            raise InputError("checkpoint config block missing")
        text = b"".join(buf.readline() for _ in range(int(head[1]))).decode("utf-8")
        config = RunConfig.from_text(text)
        flags = dict(f.split(b"=") for f in buf.readline().split()[1:])
        head = buf.readline().split()
        if head[:1] != [b"params"]:
            raise InputError("checkpoint params block missing")
        try:
            params = T.read_params(buf, int(head[1]))
        except ValueError as e:
            raise InputError(str(e)) from None
        return cls(config, params, flags.get(b"stage1") == b"1", flags.get(b"stage2") == b"1")

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        p = Path(path)
        if not p.is_file():
            raise InputError(f"checkpoint {path} not found")
        return cls.from_bytes(p.read_bytes())

    def tensors(self, prefixes, trainable):
        return {
            k: T.Tensor(np.array(v), requires_grad=trainable)
            for k, v in self.params.items()
            if k.startswith(prefixes)
        }


def init_checkpoint(cfg):
    rng = np.random.default_rng(cfg.seed)
    params = init_stacked(rng, 4, cfg.widths)
    params.update(init_relocalization(rng, feature_width(cfg.widths), cfg.reloc()))
    return Checkpoint(cfg, {k: v.data.copy() for k, v in params.items()})


# ---------------------------------------------------------------- datasets

@dataclass
class Prepared:
    """A sample with its voxelized input and ground-truth cell labeler."""

    name: str
    input: np.ndarray
    gt: np.ndarray
    voxels: object = None
    labeler: CellLabeler = None
    extra: dict = field(default_factory=dict)


def prepare(name, inp, gt, l_vox):
    vox, _ = voxelize(inp, l_vox)
    return Prepared(name, np.asarray(inp), np.asarray(gt), vox, CellLabeler(gt, l_vox))


def generate_dataset(out_dir, cfg):
    """Write ``manifest.txt`` and one input/gt PLY pair per shape."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    rows = D.dataset_manifest(cfg.n_shapes, cfg.seed)
    aug = D.AugmentConfig(n_input=cfg.n_input)
    for i, (kind, seed, _) in enumerate(rows):
        s = D.make_sample(D.random_shape(kind, seed), cfg.n_gt, aug)
        D.write_ply(out / "samples" / f"{i:04d}_input.ply", s.input)
        D.write_ply(out / "samples" / f"{i:04d}_gt.ply", s.gt)
    D.write_manifest(out / "manifest.txt", rows)
    return rows


def load_dataset(data_dir, l_vox):
    """``(train, val)`` lists of :class:`Prepared` from a generated dataset directory."""
    root = Path(data_dir)
    if not (root / "manifest.txt").is_file():
        raise InputError(f"dataset manifest missing under {data_dir}")
    train, val = [], []
    try:
        rows = D.read_manifest(root / "manifest.txt")
        for i, (kind, seed, split) in enumerate(rows):
            inp = D.read_ply(root / "samples" / f"{i:04d}_input.ply")
            gt = D.read_ply(root / "samples" / f"{i:04d}_gt.ply")
            (train if split == "train" else val).append(prepare(f"{kind}-{seed}", inp, gt, l_vox))
    except (OSError, ValueError) as e:
        raise InputError(str(e)) from None
    if not train:
        raise InputError("dataset has no training samples")
    return train, val


# ---------------------------------------------------------------- stage 1

def stage1_loss(sample, p1, p2, tau):
    out = stacked_forward(sample.voxels, p1, p2, tau, labeler=sample.labeler, rescue=True)
    return M.voxel_loss(out.final.logits, out.final.labels, [(lv.logits, lv.labels) for lv in out.mid])


def classification_counts(sample, p1, p2, tau):
    """(tp, fp, fn) of the final-level occupancy decision over its candidates at inference."""
    try:
        out = stacked_forward(sample.voxels, p1, p2, tau)
    except EmptyPruneError:
        return 0, 0, int(len(sample.labeler.cells(0)))
    lab = sample.labeler(out.final.candidates, out.final.scale) > 0
    pred = prune_mask(out.final.logits, tau)
    return int(np.sum(pred & lab)), int(np.sum(pred & ~lab)), int(np.sum(~pred & lab))


def prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def _batches(rng, n, size):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _run_epochs(cfg, params, samples, loss_fn, after_epoch=None):
    opt = T.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        losses = []
        for batch in _batches(rng, len(samples), cfg.batch):
            opt.zero_grad()
            try:
                total = None
                for i in batch:
                    li = loss_fn(samples[i])
                    total = li if total is None else T.add(total, li)
                total = T.scale(total, 1.0 / len(batch))
                total.backward()
            except T.NonFiniteError as e:
                raise DivergenceError(f"epoch {epoch}: {e}") from None
            if not np.isfinite(total.item()):
                raise DivergenceError(f"epoch {epoch}: loss is {total.item()}")
            opt.step()
            losses.append(total.item())
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        msg = f"epoch {epoch} lr {opt.lr:.3g} loss {mean_loss:.6f}"
        if after_epoch is not None:
            msg += " " + after_epoch(epoch)
        log.info(msg)
    return history


def train_stage1(cfg, train, val=(), ckpt=None):
    """Optimize the voxel loss of both hourglass stacks; returns the checkpoint and loss history."""
    if not train:
        raise InputError("empty training set")
    ckpt = ckpt or init_checkpoint(cfg)
    params = ckpt.tensors(("s1.", "s2."), trainable=True)
    p1, p2 = split_stacked(params)
    held = list(val)[: cfg.val_eval]

    def report(epoch):
        if not held:
            return ""
        tp = fp = fn = 0
        for s in held:
            a, b, c = classification_counts(s, p1, p2, cfg.tau)
            tp, fp, fn = tp + a, fp + b, fn + c
        p, r, f = prf(tp, fp, fn)
        return f"val precision {p:.4f} recall {r:.4f} f1 {f:.4f}"

    history = _run_epochs(cfg, params, train, lambda s: stage1_loss(s, p1, p2, cfg.tau), report)
    new = dict(ckpt.params)
    new.update({k: v.data.copy() for k, v in params.items()})
    return Checkpoint(cfg, new, stage1=cfg.epochs > 0 or ckpt.stage1, stage2=ckpt.stage2), history


# ---------------------------------------------------------------- stage 2

def infer_voxels(sample_voxels, p1, p2, tau):
    """Frozen stage-1 inference: output voxels and their features as constants."""
    out = stacked_forward(sample_voxels, p1, p2, tau)
    return out.out, out.f_v.data.copy()


def _stage2_cache(samples, p1, p2, cfg):
    kept = []
    for s in samples:
        try:
            v_out, f_v = infer_voxels(s.voxels, p1, p2, cfg.tau)
        except EmptyPruneError:
            log.warning("sample %s: stage 1 pruned every voxel; skipped", s.name)
            continue
        s.extra["v_out"], s.extra["f_v"] = v_out, f_v
        s.extra["neighbors"] = None
        kept.append(s)
    return kept


def stage2_loss(sample, rparams, rcfg):
    pts, nb = relocalize(sample.extra["v_out"], sample.extra["f_v"], rparams, rcfg, sample.extra["neighbors"])
    sample.extra["neighbors"] = nb
    return M.chamfer_loss(pts, sample.gt)


def mean_chamfer(samples, rparams, rcfg):
    vals = []
    for s in samples:
        pts, _ = relocalize(s.extra["v_out"], s.extra["f_v"], rparams, rcfg, s.extra["neighbors"])
        vals.append(M.chamfer(pts.data, s.gt))
    return float(np.mean(vals)) if vals else float("nan")


def train_stage2(cfg, train, val=(), ckpt=None):
    """Train relocalization on frozen stage-1 outputs; stage-1 blobs pass through untouched."""
    if ckpt is None or not ckpt.stage1:
        raise InputError("stage 2 needs a checkpoint with stage 1 trained")
    frozen = ckpt.tensors(("s1.", "s2."), trainable=False)
    p1, p2 = split_stacked(frozen)
    rparams = ckpt.tensors(("reloc.",), trainable=True)
    rcfg = cfg.reloc()
    train = _stage2_cache(list(train), p1, p2, cfg)
    if not train:
        raise InputError("no usable training samples after stage-1 inference")
    held = _stage2_cache(list(val)[: cfg.val_eval], p1, p2, cfg)
    start = mean_chamfer(held, rparams, rcfg) if held else float("nan")
    if held:
        log.info("stage 2 start: val chamfer %.6e", start)

    def report(epoch):
        return f"val chamfer {mean_chamfer(held, rparams, rcfg):.6e}" if held else ""

    history = _run_epochs(cfg, rparams, train, lambda s: stage2_loss(s, rparams, rcfg), report)
    new = dict(ckpt.params)
    new.update({k: v.data.copy() for k, v in rparams.items()})
    return Checkpoint(cfg, new, stage1=True, stage2=cfg.epochs > 0 or ckpt.stage2), history


# ---------------------------------------------------------------- inference

def reconstruct_points(ckpt, points):
    """Full pipeline on one cloud; returns output points and a summary dict."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        raise InputError("input point cloud is empty")
    cfg = ckpt.config
    p1, p2 = split_stacked(ckpt.tensors(("s1.", "s2."), trainable=False))
    rparams = ckpt.tensors(("reloc.",), trainable=False)
    vox, _ = voxelize(pts, cfg.l_vox)
    try:
        v_out, f_v = infer_voxels(vox, p1, p2, cfg.tau)
    except EmptyPruneError:
        raise ReconstructionFailure("reconstruction failure: every voxel was pruned") from None
    out, _ = relocalize(v_out, f_v, rparams, cfg.reloc())
    summary = {"n_in": len(pts), "n_vin": len(vox), "n_vout": len(v_out), "n_out": len(out.data)}
    return out.data, summary
