"""Segmentation network: one shared convolutional trunk plus three heads.

The trunk is a plain strided conv stack with output stride 4. On top of its
features sit a semantic head (dense class scores), an attention head
(single-channel relative weight in (0,1), consumed by the scale-pair fusion)
and an optional auxiliary semantic head fed straight from the trunk. The
network is evaluated at one image scale per call; all scales share the same
parameter tensors.
"""

import io
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import fileio
from .errors import ConfigError, DataError

CHECKPOINT_MAGIC = "HMSEG-CKPT v1"


@dataclass(frozen=True)
class TrunkConfig:
    channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    norm_groups: int = 8
    head_width: int = 64

    # two stride-2 stages
    output_stride: int = 4

    def validate(self):
        if len(self.channels) < 2:
            raise ConfigError("trunk needs at least two stages (output stride 4)")
        if any(c < 1 for c in self.channels):
            raise ConfigError(f"trunk widths must be >= 1, got {self.channels}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.output_stride != 4:
            raise ConfigError("output stride is fixed at 4")


@dataclass
class ScaledForward:
    """Everything one scale's forward pass produces, at that scale's
    image resolution."""
    scale: float
    logits: ad.Tensor               # [num_classes, h, w]
    attention: ad.Tensor            # [1, h, w], strictly inside (0,1)
    aux_logits: Optional[ad.Tensor] = None
    attention_raw: Optional[ad.Tensor] = None  # pre-sigmoid, same layout

    @property
    def hw(self):
        return self.logits.shape[1], self.logits.shape[2]


class ConvUnit:
    """conv2d followed optionally by group norm and an activation."""

    def __init__(self, name, weight, bias, gamma=None, beta=None,
                 stride=1, padding=0, groups=1, act=None):
        self.name = name
        self.weight = weight
        self.bias = bias
        self.gamma = gamma
        self.beta = beta
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.act = act

    def __call__(self, x):
        y = ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        if self.gamma is not None:
            y = ad.group_norm(y, self.groups, self.gamma, self.beta)
        if self.act is not None:
            y = ad.activation(self.act, y)
        return y

    def named_params(self):
        out = [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]
        if self.gamma is not None:
            out += [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]
        return out


class Network:
    def __init__(self, trunk_cfg, num_classes, with_aux, trunk, semantic_head,
                 attention_head, aux_head, seed):
        self.config = trunk_cfg
        self.num_classes = num_classes
        self.with_aux = with_aux
        self.trunk = trunk
        self.semantic_head = semantic_head
        self.attention_head = attention_head
        self.aux_head = aux_head
        self.seed = seed

    def units(self):
        parts = self.trunk + self.semantic_head + self.attention_head
        if self.aux_head is not None:
            parts = parts + self.aux_head
        return parts

    def named_parameters(self):
        out = []
        for unit in self.units():
            out.extend(unit.named_params())
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_params(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        ad.zero_grads(self.parameters())


def _he_conv(rng, name, cin, cout, k, stride, padding, groups, act, dtype, norm=True):
    std = np.sqrt(2.0 / (cin * k * k))
    w = ad.Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype),
                  requires_grad=True)
    b = ad.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    gamma = beta = None
    if norm:
        gamma = ad.Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
        beta = ad.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return ConvUnit(name, w, b, gamma, beta, stride=stride, padding=padding,
                    groups=groups, act=act)


def _norm_groups(cfg, channels):
    return cfg.norm_groups if channels >= cfg.norm_groups else channels


def build_network(trunk=TrunkConfig(), num_classes=4, with_aux=True, seed=0):
    """Deterministically initialized network; same seed, same parameters."""
    trunk_cfg = trunk
    trunk_cfg.validate()
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    dtype = ad.current_dtype()

    units = []
    cin = 3
    for si, width in enumerate(trunk_cfg.channels):
        for bi in range(trunk_cfg.blocks_per_stage):
            stride = 2 if (bi == 0 and si < 2) else 1
            units.append(_he_conv(rng, f"trunk.s{si}.b{bi}", cin, width, 3, stride, 1,
                                  _norm_groups(trunk_cfg, width), "relu", dtype))
            cin = width

    feat = trunk_cfg.channels[-1]
    hw = trunk_cfg.head_width
    g = _norm_groups(trunk_cfg, hw)

    def head(prefix, out_ch):
        return [
            _he_conv(rng, f"{prefix}.0", feat, hw, 3, 1, 1, g, "relu", dtype),
            _he_conv(rng, f"{prefix}.1", hw, hw, 3, 1, 1, g, "relu", dtype),
            _he_conv(rng, f"{prefix}.2", hw, out_ch, 1, 1, 0, 1, None, dtype, norm=False),
        ]

    semantic = head("semantic", num_classes)
    attention = head("attention", 1)

    aux = None
    if with_aux:
        aux = [
            _he_conv(rng, "aux.0", feat, hw, 1, 1, 0, g, "relu", dtype),
            _he_conv(rng, "aux.1", hw, num_classes, 1, 1, 0, 1, None, dtype, norm=False),
        ]

    return Network(trunk_cfg, num_classes, with_aux, units, semantic, attention, aux, seed)


def scaled_size(size, r, output_stride):
    th = int(np.floor(size[0] * r + 0.5))
    tw = int(np.floor(size[1] * r + 0.5))
    if th < output_stride or tw < output_stride:
        raise ConfigError(f"scale {r} shrinks {size} below the output stride")
    if th % output_stride or tw % output_stride:
        need_h = (output_stride - th % output_stride) % output_stride
        need_w = (output_stride - tw % output_stride) % output_stride
        raise ConfigError(
            f"scaled size {th}x{tw} (scale {r} of {size[0]}x{size[1]}) is not a multiple "
            f"of the output stride {output_stride}; pad the scaled image by "
            f"{need_h}x{need_w} (or crop the input) first")
    return th, tw


def forward_at_scale(net, image, r):
    """Resize the image by factor r, run trunk and heads, return per-scale
    outputs at the scaled resolution."""
    if r <= 0:
        raise ConfigError(f"scale must be positive, got {r}")
    img = ad.as_tensor(image)
    if img.data.ndim != 3 or img.shape[0] != 3:
        raise ConfigError(f"expected a [3,H,W] image, got {tuple(img.shape)}")
    h, w = img.shape[1], img.shape[2]
    th, tw = scaled_size((h, w), r, net.config.output_stride)

    x = ad.bilinear_resize(img, th, tw)
    for unit in net.trunk:
        x = unit(x)
    feats = x

    sem = feats
    for unit in net.semantic_head:
        sem = unit(sem)
    logits = ad.bilinear_resize(sem, th, tw)

    att = feats
    for unit in net.attention_head:
        att = unit(att)
    att_raw = ad.bilinear_resize(att, th, tw)
    attention = ad.sigmoid(att_raw)

    aux_logits = None
    if net.aux_head is not None:
        aux = feats
        for unit in net.aux_head:
            aux = unit(aux)
        aux_logits = ad.bilinear_resize(aux, th, tw)

    return ScaledForward(scale=float(r), logits=logits, attention=attention,
                         aux_logits=aux_logits, attention_raw=att_raw)


def forward_multi_scale(net, image, scales):
    """One ScaledForward per scale, ascending order required by the fusion."""
    return [forward_at_scale(net, image, r) for r in scales]


# ---------------------------------------------------------------------------
# checkpoints: text manifest + concatenated tensor records

def save_checkpoint(path, net):
    buf = io.BytesIO()
    named = net.named_parameters()
    lines = [CHECKPOINT_MAGIC]
    lines.append(f"meta num_classes {net.num_classes}")
    lines.append(f"meta with_aux {int(net.with_aux)}")
    lines.append(f"meta channels {','.join(str(c) for c in net.config.channels)}")
    lines.append(f"meta blocks_per_stage {net.config.blocks_per_stage}")
    lines.append(f"meta norm_groups {net.config.norm_groups}")
    lines.append(f"meta head_width {net.config.head_width}")
    lines.append(f"meta seed {net.seed}")
    for name, p in named:
        shape = "x".join(str(s) for s in p.data.shape)
        lines.append(f"tensor {name} {shape}")
    lines.append("end")
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for _, p in named:
        buf.write(fileio.tensor_to_bytes(p.data))
    fileio.atomic_write(path, buf.getvalue())


def _parse_manifest(f, path):
    first = f.readline().decode("ascii", "replace").rstrip("\n")
    if first != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (header {first!r})")
    meta, entries = {}, []
    while True:
        line = f.readline().decode("ascii", "replace").rstrip("\n")
        if line == "end":
            break
        if not line:
            raise DataError(f"{path}: manifest ended before 'end'")
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            k, v = rest.split(" ", 1)
            meta[k] = v
        elif kind == "tensor":
            name, shape = rest.rsplit(" ", 1)
            entries.append((name, tuple(int(s) for s in shape.split("x"))))
        else:
            raise DataError(f"{path}: unknown manifest line {line!r}")
    return meta, entries


def load_checkpoint(path, net=None):
    """Load a checkpoint; builds the network from the manifest metadata
    unless an existing compatible network is supplied. Every stored shape is
    verified against the manifest and the network."""
    with open(path, "rb") as f:
        meta, entries = _parse_manifest(f, os.fspath(path))
        if net is None:
            try:
                cfg = TrunkConfig(
                    channels=tuple(int(c) for c in meta["channels"].split(",")),
                    blocks_per_stage=int(meta["blocks_per_stage"]),
                    norm_groups=int(meta["norm_groups"]),
                    head_width=int(meta["head_width"]),
                )
                net = build_network(cfg, int(meta["num_classes"]),
                                    bool(int(meta["with_aux"])), seed=int(meta.get("seed", 0)))
            except KeyError as e:
                raise DataError(f"{path}: manifest missing {e}") from e
        named = dict(net.named_parameters())
        if [n for n, _ in net.named_parameters()] != [n for n, _ in entries]:
            raise DataError(f"{path}: parameter names do not match this network")
        for name, shape in entries:
            arr = fileio.tensor_from_stream(f, path=os.fspath(path))
            if tuple(arr.shape) != shape:
                raise DataError(f"{path}: {name} stored shape {arr.shape} != manifest {shape}")
            if tuple(named[name].data.shape) != shape:
                raise DataError(
                    f"{path}: {name} shape {shape} does not fit network "
                    f"{tuple(named[name].data.shape)}")
            named[name].data = arr.astype(named[name].data.dtype)
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after last tensor record")
    return net
