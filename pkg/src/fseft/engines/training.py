"""
Pretraining on a partially-labeled assembly and few-shot adaptation.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .. import nets
from ..errors import ConfigError, InvalidArgument, TrainingDiverged
from ..nets import Backbone, SegHead, SegModel, TrainStrategy
from ..objectives import (
    PenaltyConfig,
    SizePrior,
    adaptation_objective,
    masked_partial_loss,
    predicted_size,
    size_margin_penalty,
    support_size_prior,
)
from .inference import sliding_window_predict

log = logging.getLogger(__name__)


def _triple(x) -> tuple[int, int, int]:
    if isinstance(x, int):
        return (x, x, x)
    x = tuple(int(v) for v in x)
    if len(x) != 3:
        raise ConfigError(f"expected three values, got {x}")
    return x


@dataclass
class PretrainConfig:
    epochs: int = 40
    patches_per_volume: int = 3
    batch_volumes: int = 2
    base_lr: float = 1e-3
    weight_decay: float = 1e-5
    warmup_epochs: int = 4
    patch_size: tuple = (32, 32, 32)
    intensity_shift: float = 0.1
    rotate90: bool = True
    fg_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.patch_size = _triple(self.patch_size)
        if self.epochs < 1:
            raise ConfigError("pretrain epochs must be >= 1")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs exceeds epochs")


@dataclass
class AdaptConfig:
    strategy: TrainStrategy = TrainStrategy.ADAPTER
    K: int = 1
    epochs: int = 100
    base_lr: float = 0.5
    ft_lr: float = 1e-4
    weight_decay: float = 1e-5
    ti_start_epoch: int = 50
    gamma: float = 0.2
    lam: float = 1.0
    patches_per_volume: int = 6
    batch_volumes: int = 1
    patch_size: tuple = (32, 32, 32)
    overlap: float = 0.5
    support_loss: str = "dice"
    size_mode: str = "full"
    size_units: str = "voxels"
    fg_fraction: float = 0.5
    feature_cache_mb: int = 512
    seed: int = 0

    def __post_init__(self):
        self.strategy = TrainStrategy.parse(self.strategy)
        self.patch_size = _triple(self.patch_size)
        if self.ti_start_epoch > self.epochs:
            raise ConfigError("ti_start_epoch must not exceed epochs")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.size_mode not in ("full", "patch"):
            raise ConfigError("size_mode must be 'full' or 'patch'")
        if self.size_units not in ("voxels", "fraction"):
            raise ConfigError("size_units must be 'voxels' or 'fraction'")
        PenaltyConfig(self.gamma, self.lam)

    @property
    def lr(self) -> float:
        if self.strategy in (TrainStrategy.FT, TrainStrategy.FT_LAST, TrainStrategy.SCRATCH):
            return self.ft_lr
        return self.base_lr


@dataclass
class Checkpoint:
    backbone: Backbone
    head: nn.Module
    header: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)

    def save(self, path) -> None:
        header = dict(self.header)
        header["curve"] = self.curve
        nets.save_checkpoint(path, self.backbone, self.head, header)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        backbone, head, header = nets.load_checkpoint(path)
        return cls(backbone, head, header, header.get("curve", []))


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def lr_at(step: int, total: int, base: float, warmup: int = 0) -> float:
    """Linear warm-up over ``warmup`` steps, then cosine decay to zero."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    t = min(1.0, (step - warmup) / span)
    return 0.5 * base * (1.0 + math.cos(math.pi * t))


def sample_origin(rng: np.random.Generator, shape, patch, fg_coords=None, fg_fraction: float = 0.5):
    """Patch origin: centred on a random foreground voxel with probability
    ``fg_fraction`` (when there is foreground), otherwise uniform. Origins are
    clipped so the patch stays inside the volume whenever it fits."""
    hi = [max(0, n - p) for n, p in zip(shape, patch)]
    if fg_coords is not None and len(fg_coords) and rng.uniform() < fg_fraction:
        c = fg_coords[rng.integers(len(fg_coords))]
        return tuple(int(min(max(ci - p // 2, 0), h)) for ci, p, h in zip(c, patch, hi))
    return tuple(int(rng.integers(h + 1)) for h in hi)


def crop(arr: np.ndarray, origin, patch) -> np.ndarray:
    """Zero-padded crop over the last three axes."""
    lead = arr.shape[:-3]
    out = np.zeros(lead + tuple(patch), dtype=arr.dtype)
    src, dst = [], []
    for o, p, n in zip(origin, patch, arr.shape[-3:]):
        a, b = max(o, 0), min(o + p, n)
        src.append(slice(a, b))
        dst.append(slice(a - o, b - o))
    pre = tuple(slice(None) for _ in lead)
    out[pre + tuple(dst)] = arr[pre + tuple(src)]
    return out


def _augment(rng, img, lbl, shift: float, rotate: bool):
    if rotate:
        planes = [(a, b) for a, b in ((0, 1), (0, 2), (1, 2)) if img.shape[-3 + a] == img.shape[-3 + b]]
        if planes:
            a, b = planes[rng.integers(len(planes))]
            k = int(rng.integers(4))
            img = np.rot90(img, k, axes=(img.ndim - 3 + a, img.ndim - 3 + b))
            lbl = np.rot90(lbl, k, axes=(lbl.ndim - 3 + a, lbl.ndim - 3 + b))
    if shift > 0:
        img = img + rng.uniform(-shift, shift)
    return np.ascontiguousarray(img), np.ascontiguousarray(lbl)


def _check_finite(loss, *, lr, batch_ids, epoch):
    if not torch.isfinite(loss).item():
        raise TrainingDiverged(
            f"non-finite loss at epoch {epoch} (lr={lr:.3g}, batch={batch_ids})",
            lr=lr, batch_ids=batch_ids, epoch=epoch,
        )


def _write_log(fh, record: dict):
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain(
    corpus,
    backbone: Backbone,
    head: SegHead,
    cfg: PretrainConfig,
    *,
    log_path=None,
    state_path=None,
    resume: bool = False,
    header: dict | None = None,
    stop_after: int | None = None,
) -> Checkpoint:
    """Optimise the masked partial-label Dice objective over sampled patches.

    Each volume contributes ``patches_per_volume`` augmented patches; its loss
    only covers the classes its dataset annotates. With ``state_path`` the
    full training state is written after every epoch and ``resume=True``
    continues from it. ``stop_after`` ends the run early (used to simulate an
    interruption).
    """
    corpus = list(corpus)
    if not corpus:
        raise InvalidArgument("empty corpus")
    n_classes = head.n_classes
    annotated = np.sum([s.w for s in corpus], axis=0)
    if annotated.shape[0] != n_classes:
        raise InvalidArgument("annotation vectors do not match the head's class count")

    torch.manual_seed(cfg.seed)
    model = SegModel(backbone, head, TrainStrategy.FT)
    nets.select_trainable(model, TrainStrategy.FT)
    # heads are kept out of weight decay: a class absent from a batch then gets
    # an exactly-zero update, so never-annotated classes stay at their init
    opt = torch.optim.AdamW(
        [
            {"params": list(backbone.parameters()), "weight_decay": cfg.weight_decay},
            {"params": list(head.parameters()), "weight_decay": 0.0},
        ],
        lr=cfg.base_lr,
    )
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 17]))
    steps_per_epoch = math.ceil(len(corpus) / cfg.batch_volumes)
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    start_epoch, curve = 0, []

    if resume and state_path and Path(state_path).exists():
        state = torch.load(state_path, weights_only=False)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng"]
        start_epoch, curve = state["epoch"], state["curve"]
        log.info("resuming pretraining at epoch %d", start_epoch)

    fg = [np.argwhere(s.mask.data.any(axis=0)) for s in corpus]
    fh = open(log_path, "a" if resume else "w") if log_path else None
    dtype = next(backbone.parameters()).dtype
    try:
        for epoch in range(start_epoch, cfg.epochs):
            if stop_after is not None and epoch >= stop_after:
                break
            model.train()
            order = rng.permutation(len(corpus))
            losses = []
            for b in range(steps_per_epoch):
                ids = [int(i) for i in order[b * cfg.batch_volumes : (b + 1) * cfg.batch_volumes]]
                step = epoch * steps_per_epoch + b
                lr = lr_at(step, total, cfg.base_lr, warm)
                for g in opt.param_groups:
                    g["lr"] = lr
                imgs, lbls = [], []
                for i in ids:
                    s = corpus[i]
                    for _ in range(cfg.patches_per_volume):
                        o = sample_origin(rng, s.volume.shape, cfg.patch_size, fg[i], cfg.fg_fraction)
                        im, lb = _augment(
                            rng,
                            crop(s.volume.data[None], o, cfg.patch_size),
                            crop(s.mask.data, o, cfg.patch_size),
                            cfg.intensity_shift,
                            cfg.rotate90,
                        )
                        imgs.append(im)
                        lbls.append(lb)
                x = torch.from_numpy(np.stack(imgs)).to(dtype)
                y = torch.from_numpy(np.stack(lbls)).to(dtype)
                probs = torch.sigmoid(model(x))
                P = cfg.patches_per_volume
                per_vol = [
                    masked_partial_loss(probs[j * P : (j + 1) * P], y[j * P : (j + 1) * P], corpus[i].w)
                    for j, i in enumerate(ids)
                ]
                loss = torch.stack(per_vol).mean()
                _check_finite(loss, lr=lr, batch_ids=ids, epoch=epoch)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(loss.item())
            rec = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
            curve.append(rec)
            _write_log(fh, {**rec, "config_hash": (header or {}).get("config_hash")})
            if state_path:
                torch.save(
                    {
                        "model": model.state_dict(),
                        "optimizer": opt.state_dict(),
                        "rng": rng.bit_generator.state,
                        "epoch": epoch + 1,
                        "curve": curve,
                        "header": header or {},
                    },
                    state_path,
                )
    finally:
        if fh:
            fh.close()
    backbone.eval(), head.eval()
    hdr = dict(header or {})
    hdr.update({"n_classes": n_classes, "pretrain": _jsonable(asdict(cfg)), "epochs_done": len(curve)})
    return Checkpoint(backbone, head, hdr, curve)


def _jsonable(d):
    return json.loads(json.dumps(d, default=lambda o: o.value if hasattr(o, "value") else list(o)))


def masked_eval_loss(ckpt: Checkpoint, corpus, patch_size=(32, 32, 32)) -> float:
    """Mean masked loss of the frozen model over whole volumes (one window each)."""
    model = SegModel(ckpt.backbone, ckpt.head).eval()
    vals = []
    with torch.no_grad():
        for s in corpus:
            probs = sliding_window_predict(model, s.volume, patch_size, overlap=0.0)
            vals.append(float(masked_partial_loss(probs, torch.from_numpy(s.mask.data).to(probs.dtype), s.w)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------


class FeatureCache:
    """Memo of frozen-backbone features keyed by input content (bounded LRU)."""

    def __init__(self, backbone: nn.Module, max_mb: int = 512):
        self.backbone = backbone
        self.max_bytes = max_mb * 2**20
        self._store: OrderedDict = OrderedDict()
        self._bytes = 0
        self.hits = self.misses = 0

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        key = hashlib.blake2b(x.detach().numpy().tobytes(), digest_size=16).digest() + bytes(str(tuple(x.shape)), "ascii")
        hit = self._store.get(key)
        if hit is not None:
            self._store.move_to_end(key)
            self.hits += 1
            return hit
        self.misses += 1
        with torch.no_grad():
            z = self.backbone(x)
        size = z.numel() * z.element_size()
        if size <= self.max_bytes:
            self._store[key] = z
            self._bytes += size
            while self._bytes > self.max_bytes:
                _, old = self._store.popitem(last=False)
                self._bytes -= old.numel() * old.element_size()
        return z


@contextmanager
def _norm_inference(model: nn.Module):
    """Temporarily run every batch-norm layer on its running statistics."""
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    modes = [m.training for m in norms]
    for m in norms:
        m.eval()
    try:
        yield
    finally:
        for m, t in zip(norms, modes):
            m.train(t)


@dataclass
class AdaptResult:
    model: SegModel
    history: list
    prior: SizePrior | None
    n_trainable: int


def _support_arrays(task):
    out = []
    for vol, mask in task.support:
        m = np.asarray(mask.data)
        m = m[0] if m.ndim == 4 else m
        out.append((np.asarray(vol.data), m, np.argwhere(m > 0)))
    return out


class _Adaptation:
    """State of one adaptation run: model, optimiser, sampler and history.

    Runs advance epoch by epoch, so a run can be forked once the epochs its
    variants share are done (see :func:`adapt_sweep`).
    """

    def __init__(self, checkpoint: Checkpoint, task, cfg: AdaptConfig):
        self.cfg = cfg
        support = list(task.support)
        if not support:
            raise InvalidArgument("task has no support samples")
        strategy = cfg.strategy
        self.model = nets.assemble(checkpoint.backbone, checkpoint.head, strategy, organ=task.organ, seed=cfg.seed)
        self.n_trainable = nets.count_trainable(self.model, strategy)
        trainable, _ = nets.select_trainable(self.model, strategy)
        self.opt = torch.optim.AdamW(list(trainable.values()), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 29]))
        self.dtype = next(self.model.parameters()).dtype
        self.arrays = _support_arrays(task)
        self.cache = FeatureCache(self.model.backbone, cfg.feature_cache_mb) if strategy.frozen_backbone else None
        self.query = np.asarray(task.query.data)
        self.prior = support_size_prior([m for _, m, _ in self.arrays])
        # "fraction" measures S and S_hat as shares of the query grid instead of voxel counts
        self.size_scale = 1.0 / self.query.size if cfg.size_units == "fraction" else 1.0
        self.prior = replace(self.prior, S=self.prior.S * self.size_scale)
        self.query_t = torch.from_numpy(np.ascontiguousarray(self.query)).to(self.dtype)
        self.epoch = 0
        self.history: list = []

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.arrays) / self.cfg.batch_volumes)

    def logits(self, x):
        if self.cache is not None:
            return self.model.head_forward(self.cache(x))
        return self.model(x)

    def query_size(self) -> torch.Tensor:
        """Soft size of the query prediction, differentiable in the trainable parameters."""
        cfg, query = self.cfg, self.query
        with _norm_inference(self.model):
            if cfg.size_mode == "full":
                probs = sliding_window_predict(
                    lambda p: torch.sigmoid(self.logits(p)), self.query_t, cfg.patch_size, cfg.overlap
                )
                return predicted_size(probs) * self.size_scale
            # one sampled patch, scaled by the share of the volume it covers
            o = sample_origin(self.rng, query.shape, cfg.patch_size)
            x = torch.from_numpy(crop(query[None], o, cfg.patch_size)[None]).to(self.dtype)
            inside = np.prod([min(oo + p, n) - oo for oo, p, n in zip(o, cfg.patch_size, query.shape)])
            return predicted_size(torch.sigmoid(self.logits(x))) * (query.size / inside) * self.size_scale

    def uses_penalty(self, epoch: int) -> bool:
        cfg = self.cfg
        return cfg.strategy is TrainStrategy.ADAPTER_TI and cfg.lam > 0 and epoch >= cfg.ti_start_epoch

    def run(self, until: int, fh=None) -> None:
        cfg = self.cfg
        K = len(self.arrays)
        total = cfg.epochs * self.steps_per_epoch
        for epoch in range(self.epoch, until):
            self.model.train()
            order = self.rng.permutation(K)
            seg_terms, pen_terms = [], []
            for b in range(self.steps_per_epoch):
                ids = [int(i) for i in order[b * cfg.batch_volumes : (b + 1) * cfg.batch_volumes]]
                lr = lr_at(epoch * self.steps_per_epoch + b, total, cfg.lr)
                for g in self.opt.param_groups:
                    g["lr"] = lr
                probs, masks = [], []
                for i in ids:
                    img, msk, fg = self.arrays[i]
                    origins = [
                        sample_origin(self.rng, img.shape, cfg.patch_size, fg, cfg.fg_fraction)
                        for _ in range(cfg.patches_per_volume)
                    ]
                    x = torch.from_numpy(np.stack([crop(img[None], o, cfg.patch_size) for o in origins])).to(self.dtype)
                    y = torch.from_numpy(np.stack([crop(msk[None], o, cfg.patch_size) for o in origins])).to(self.dtype)
                    probs.append(torch.sigmoid(self.logits(x)))
                    masks.append(y)
                # the query term enters once per epoch, next to the K support terms
                seg = adaptation_objective(probs, masks, None, self.prior, PenaltyConfig(cfg.gamma, 0.0), cfg.support_loss)
                loss, pen = seg, 0.0
                if b == 0 and self.uses_penalty(epoch):
                    s_hat = self.query_size()
                    loss = adaptation_objective(
                        probs, masks, s_hat, self.prior, PenaltyConfig(cfg.gamma, cfg.lam), cfg.support_loss
                    )
                    pen = float(size_margin_penalty(s_hat.detach(), self.prior.S, cfg.gamma))
                _check_finite(loss, lr=lr, batch_ids=ids, epoch=epoch)
                self.opt.zero_grad(set_to_none=True)
                loss.backward()
                self.opt.step()
                seg_terms.append(float(seg.detach()))
                pen_terms.append(pen)
            rec = {
                "epoch": epoch,
                "support_loss": float(np.mean(seg_terms)),
                "penalty": float(np.sum(pen_terms)),
                "lr": lr,
            }
            self.history.append(rec)
            _write_log(fh, rec)
            self.epoch = epoch + 1

    def fork(self, cfg: AdaptConfig) -> "_Adaptation":
        """Independent copy that continues under ``cfg`` (features cache shared)."""
        twin = copy.deepcopy(self, memo={id(self.cache): self.cache})
        twin.cfg = cfg
        twin.model.strategy = cfg.strategy
        return twin

    def result(self) -> AdaptResult:
        self.model.eval()
        return AdaptResult(self.model, self.history, self.prior, self.n_trainable)


def adapt(checkpoint: Checkpoint, task, cfg: AdaptConfig, *, log_path=None) -> AdaptResult:
    """Fit the strategy's trainable parameters on the task's support set.

    For ADAPTER_TI, every epoch from ``ti_start_epoch`` on adds
    ``lam * size_margin_penalty(S_hat, S, gamma)`` to its first step, where
    ``S`` comes from the support masks and ``S_hat`` is the soft size of the
    full query prediction (batch-norm on running statistics, gradient flowing
    through the stitched map). ``size_units="fraction"`` divides both sizes
    by the query voxel count, which rescales the penalty by ``1/|query|``. Only ``task.support``, ``task.query`` and
    ``task.organ`` are read.
    """
    if cfg.strategy is TrainStrategy.GENERALIZATION:
        model = nets.assemble(checkpoint.backbone, checkpoint.head, cfg.strategy, organ=task.organ, seed=cfg.seed)
        return AdaptResult(model.eval(), [], None, 0)
    run = _Adaptation(checkpoint, task, cfg)
    fh = open(log_path, "w") if log_path else None
    try:
        run.run(cfg.epochs, fh)
    finally:
        if fh:
            fh.close()
    return run.result()


_SWEEP_FREE = ("strategy", "gamma", "lam")


def adapt_sweep(checkpoint: Checkpoint, task, cfgs: Sequence[AdaptConfig]) -> list[AdaptResult]:
    """Adapter runs that differ only in strategy (ADAPTER / ADAPTER_TI),
    ``gamma`` and ``lam``; the epochs before ``ti_start_epoch`` are trained
    once and forked. Each result is bit-identical to ``adapt(..., cfg)``."""
    cfgs = list(cfgs)
    if not cfgs:
        return []
    ref = asdict(cfgs[0])
    for c in cfgs:
        if not c.strategy.uses_adapter:
            raise ConfigError("adapt_sweep only covers ADAPTER and ADAPTER_TI")
        d = asdict(c)
        if any(d[k] != ref[k] for k in ref if k not in _SWEEP_FREE):
            raise ConfigError("swept configs may differ only in strategy, gamma and lam")
    base = _Adaptation(checkpoint, task, replace(cfgs[0], strategy=TrainStrategy.ADAPTER))
    base.run(cfgs[0].ti_start_epoch)
    out = []
    for c in cfgs:
        run = base.fork(c)
        run.run(c.epochs)
        out.append(run.result())
    return out


def predict_query(model, volume, patch_size=(32, 32, 32), overlap: float = 0.5) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        probs = sliding_window_predict(model, volume, patch_size, overlap)
    return probs.numpy()
