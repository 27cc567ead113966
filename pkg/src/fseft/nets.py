"""
Segmentation networks: a compact 3D U-shaped backbone, 1x1x1 heads, the
spatial adapter, and the parameter partitions for each training strategy.
"""

from __future__ import annotations

import json
import os
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file

from .errors import ConfigError, InvalidShape


class TrainStrategy(str, Enum):
    GENERALIZATION = "GENERALIZATION"
    SCRATCH = "SCRATCH"
    FT = "FT"
    FT_LAST = "FT_LAST"
    LINEAR_PROBE = "LINEAR_PROBE"
    ADAPTER = "ADAPTER"
    ADAPTER_TI = "ADAPTER_TI"

    @classmethod
    def parse(cls, tag) -> "TrainStrategy":
        if isinstance(tag, cls):
            return tag
        key = str(tag).strip().upper().replace("-", "_").replace(" ", "_")
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ConfigError(f"unknown strategy {tag!r}; valid tags: {valid}") from None

    @property
    def uses_adapter(self) -> bool:
        return self in (TrainStrategy.ADAPTER, TrainStrategy.ADAPTER_TI)

    @property
    def frozen_backbone(self) -> bool:
        return self in (
            TrainStrategy.GENERALIZATION,
            TrainStrategy.LINEAR_PROBE,
            TrainStrategy.ADAPTER,
            TrainStrategy.ADAPTER_TI,
        )


def conv_block(in_ch: int, out_ch: int, n_convs: int = 2) -> nn.Sequential:
    layers = []
    for i in range(n_convs):
        layers += [
            nn.Conv3d(in_ch if i == 0 else out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm3d(out_ch),
            nn.LeakyReLU(0.01, inplace=True),
        ]
    return nn.Sequential(*layers)


class Backbone(nn.Module):
    """U-shaped 3D CNN returning a ``features``-channel map at input resolution.

    ``widths`` gives the channel count per resolution level; the number of
    levels is ``len(widths)`` and inputs must be divisible by
    ``2 ** (levels - 1)``. The final decoder stage (``decoders[-1]``) is the
    "last block" for FT_LAST.
    """

    def __init__(self, in_channels: int = 1, features: int = 48, widths: Sequence[int] = (48, 192, 768)):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2:
            raise ConfigError("backbone needs at least two levels")
        self.in_channels = in_channels
        self.features = int(features)
        self.widths = widths
        self.encoders = nn.ModuleList()
        prev = in_channels
        for w in widths:
            self.encoders.append(conv_block(prev, w))
            prev = w
        self.pool = nn.MaxPool3d(2)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in range(len(widths) - 2, -1, -1):
            self.ups.append(nn.ConvTranspose3d(widths[level + 1], widths[level], 2, stride=2))
            out = self.features if level == 0 else widths[level]
            self.decoders.append(conv_block(2 * widths[level], out))

    @property
    def levels(self) -> int:
        return len(self.widths)

    @property
    def stride(self) -> int:
        return 2 ** (self.levels - 1)

    def config(self) -> dict:
        return {"in_channels": self.in_channels, "features": self.features, "widths": list(self.widths)}

    def forward(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else self.pool(x))
            skips.append(x)
        x = skips.pop()
        for up, dec in zip(self.ups, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return x


FOREGROUND_PRIOR = 0.01


def init_prior_bias(conv: nn.Conv3d, prior: float | None) -> None:
    """Start the logits at ``logit(prior)`` so a fresh head predicts sparse
    foreground instead of 0.5 everywhere (``None`` keeps the default init)."""
    if prior is not None and conv.bias is not None:
        nn.init.constant_(conv.bias, float(np.log(prior / (1.0 - prior))))


class SegHead(nn.Module):
    """1x1x1 convolution from features to class logits (sigmoid applied by callers)."""

    def __init__(self, features: int, n_classes: int, prior: float | None = FOREGROUND_PRIOR):
        super().__init__()
        self.features = features
        self.n_classes = n_classes
        self.conv = nn.Conv3d(features, n_classes, 1)
        init_prior_bias(self.conv, prior)

    def config(self) -> dict:
        return {"kind": "seg", "features": self.features, "n_classes": self.n_classes}

    def forward(self, z):
        return self.conv(z)


class SpatialAdapter(nn.Module):
    """Three conv-BN-LeakyReLU layers with an identity skip, then a 1x1x1 head."""

    def __init__(self, features: int, n_out: int = 1, prior: float | None = FOREGROUND_PRIOR):
        super().__init__()
        self.features = features
        self.n_out = n_out
        self.phi_f = conv_block(features, features, n_convs=3)
        self.phi_c = nn.Conv3d(features, n_out, 1)
        init_prior_bias(self.phi_c, prior)

    def config(self) -> dict:
        return {"kind": "adapter", "features": self.features, "n_out": self.n_out}

    def forward(self, z):
        if z.shape[1] != self.features:
            raise InvalidShape(f"adapter expects {self.features} channels, got {z.shape[1]}")
        return self.phi_c(self.phi_f(z) + z)


class SegModel(nn.Module):
    """Backbone plus one head, tagged with the strategy it was assembled for.

    ``channel`` selects a single output channel of a multi-class head
    (used to evaluate the pretrained head on one organ).
    """

    def __init__(self, backbone: Backbone, head: nn.Module, strategy=TrainStrategy.FT, channel: int | None = None):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.strategy = TrainStrategy.parse(strategy)
        self.channel = channel

    def forward(self, x):
        return self.head_forward(self.backbone(x))

    def head_forward(self, z):
        out = self.head(z)
        if self.channel is not None:
            out = out[:, self.channel : self.channel + 1]
        return out

    def predict_proba(self, x):
        return torch.sigmoid(self(x))

    def train(self, mode: bool = True):
        super().train(mode)
        if mode:
            # normalisation layers whose affine params are frozen keep their running stats
            for m in self.modules():
                if isinstance(m, nn.modules.batchnorm._BatchNorm):
                    params = list(m.parameters(recurse=False))
                    if params and not any(p.requires_grad for p in params):
                        m.eval()
        return self


def forward_features(b: nn.Module, patch) -> torch.Tensor:
    """Run the backbone on one patch; returns ``(D, X, Y, Z)``."""
    x = torch.as_tensor(np.asarray(getattr(patch, "data", patch))) if not isinstance(patch, torch.Tensor) else patch
    if x.dim() == 3:
        x = x[None, None]
    elif x.dim() == 4:
        x = x[None]
    stride = b.stride if isinstance(b, Backbone) else 1
    if any(s % stride for s in x.shape[2:]):
        raise InvalidShape(f"patch shape {tuple(x.shape[2:])} not divisible by {stride}")
    param = next(b.parameters(), None)
    if param is not None:
        x = x.to(param.dtype)
    return b(x)[0]


def forward_adapter(a: SpatialAdapter, z: torch.Tensor) -> torch.Tensor:
    """Probability map of the adapter on a ``(D, ...)`` or ``(B, D, ...)`` feature map."""
    batched = z.dim() == 5
    zz = z if batched else z[None]
    if zz.shape[1] != a.features:
        raise InvalidShape(f"adapter expects {a.features} channels, got {zz.shape[1]}")
    out = torch.sigmoid(a(zz))
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# strategy partitions
# ---------------------------------------------------------------------------


def _trainable_prefixes(model: SegModel, strategy: TrainStrategy) -> tuple[str, ...]:
    s = strategy
    if s is TrainStrategy.GENERALIZATION:
        return ()
    if s in (TrainStrategy.FT, TrainStrategy.SCRATCH):
        return ("",)
    if s is TrainStrategy.FT_LAST:
        last = len(model.backbone.decoders) - 1
        return (f"backbone.decoders.{last}.", "head.")
    return ("head.",)


def _check_assembly(model: SegModel, strategy: TrainStrategy):
    head = model.head
    if strategy.uses_adapter and not isinstance(head, SpatialAdapter):
        raise ConfigError(f"{strategy.value} requires a spatial adapter head")
    if not strategy.uses_adapter and isinstance(head, SpatialAdapter):
        raise ConfigError(f"{strategy.value} cannot train a spatial adapter head")
    if strategy is TrainStrategy.LINEAR_PROBE and not (
        isinstance(head, SegHead) and head.n_classes == 1 and model.channel is None
    ):
        raise ConfigError("LINEAR_PROBE requires a fresh single-channel linear head")


def select_trainable(model: SegModel, strategy=None) -> tuple[dict, dict]:
    """Split parameters into ``(trainable, frozen)`` name->Parameter dicts.

    Also sets ``requires_grad`` accordingly, so frozen parameters never
    accumulate gradients and their batch-norm layers stay in inference mode.
    """
    strategy = TrainStrategy.parse(strategy if strategy is not None else model.strategy)
    _check_assembly(model, strategy)
    prefixes = _trainable_prefixes(model, strategy)
    trainable, frozen = {}, {}
    for name, p in model.named_parameters():
        hit = any(name.startswith(pre) for pre in prefixes)
        p.requires_grad_(hit)
        (trainable if hit else frozen)[name] = p
    return trainable, frozen


def count_trainable(model: SegModel, strategy=None) -> int:
    trainable, _ = select_trainable(model, strategy)
    return int(sum(p.numel() for p in trainable.values()))


def adapter_param_count(features: int, n_convs: int = 3, kernel: int = 3, n_out: int = 1) -> int:
    """Closed form: bias-free k^3 convs, BN scale+shift, 1x1x1 head with bias."""
    conv = features * features * kernel**3
    bn = 2 * features
    return n_convs * (conv + bn) + n_out * (features + 1)


# ---------------------------------------------------------------------------
# assembly + checkpoints
# ---------------------------------------------------------------------------


def build_head(cfg: dict) -> nn.Module:
    kind = cfg.get("kind", "seg")
    if kind == "seg":
        return SegHead(cfg["features"], cfg["n_classes"])
    if kind == "adapter":
        return SpatialAdapter(cfg["features"], cfg.get("n_out", 1))
    raise ConfigError(f"unknown head kind {kind!r}")


def assemble(backbone: Backbone, pretrained_head: SegHead | None, strategy, organ: int | None = None,
             seed: int = 0) -> SegModel:
    """Build the model a strategy trains, starting from a pretrained backbone.

    GENERALIZATION reuses the pretrained head restricted to ``organ``;
    SCRATCH re-initialises the backbone; every other strategy receives a fresh
    single-channel head (adapter for ADAPTER/ADAPTER_TI).
    """
    import copy

    strategy = TrainStrategy.parse(strategy)
    bb = copy.deepcopy(backbone)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        if strategy is TrainStrategy.GENERALIZATION:
            if pretrained_head is None or organ is None:
                raise ConfigError("GENERALIZATION needs the pretrained head and an organ index")
            model = SegModel(bb, copy.deepcopy(pretrained_head), strategy, channel=organ)
        elif strategy is TrainStrategy.SCRATCH:
            bb = Backbone(**backbone.config())
            model = SegModel(bb, SegHead(bb.features, 1), strategy)
        elif strategy.uses_adapter:
            model = SegModel(bb, SpatialAdapter(bb.features, 1), strategy)
        else:
            model = SegModel(bb, SegHead(bb.features, 1), strategy)
    model = model.to(next(backbone.parameters()).dtype)
    select_trainable(model, strategy)
    return model


def save_checkpoint(path: os.PathLike, backbone: Backbone, head: nn.Module, header: dict | None = None) -> None:
    """Single safetensors file; the JSON header rides in the file metadata."""
    tensors = {}
    for prefix, module in (("backbone", backbone), ("head", head)):
        for k, v in module.state_dict().items():
            tensors[f"{prefix}.{k}"] = v.detach().contiguous().clone()
    meta = dict(header or {})
    meta["backbone"] = backbone.config()
    meta["head"] = head.config()
    save_file(tensors, str(path), metadata={"header": json.dumps(meta, sort_keys=True)})


def read_header(path: os.PathLike) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        return json.loads(f.metadata()["header"])


def load_checkpoint(path: os.PathLike) -> tuple[Backbone, nn.Module, dict]:
    header = read_header(path)
    tensors = load_file(str(path))
    backbone = Backbone(**header["backbone"])
    head = build_head(header["head"])
    dtype = next(v.dtype for v in tensors.values() if v.is_floating_point())
    backbone, head = backbone.to(dtype), head.to(dtype)
    backbone.load_state_dict({k[9:]: v for k, v in tensors.items() if k.startswith("backbone.")})
    head.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("head.")})
    backbone.eval(), head.eval()
    return backbone, head, header


def parameters_equal(a: Iterable[torch.Tensor], b: Iterable[torch.Tensor]) -> bool:
    return all(torch.equal(x, y) for x, y in zip(a, b))
