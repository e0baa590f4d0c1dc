"""The two-path DefectNet graph.

Path A is a VGG-style stack of 3x3 conv blocks with leaky ReLU and five
2x2 max pools; 1x1 score layers on the pool outputs feed a progressive
upsample-and-sum decoder down to full resolution. Path B branches from the
pool output of an early block, applies eight dilated 3x3 convolutions at
constant resolution, scores with a 1x1 layer and upsamples straight to full
resolution. The two score maps are fused by elementwise sum.

Spatial sizes that are odd at a pool input are edge-padded by one pixel and
decoder outputs are cropped back to the matching skip size, so any input of
at least 2^len(widths) pixels per side works; sizes divisible by
2^len(widths) avoid the padding entirely.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .ops import (
    bilinear_upsample_weight,
    conv2d,
    crop2d,
    leaky_relu,
    max_pool2,
    pad_edge2d,
    sum_fusion,
    upsample,
)
from .tensor import Tensor

WEIGHTS_MAGIC = b"DNETW1"


@dataclass
class ModelConfig:
    num_classes: int
    widths: tuple = (16, 32, 64, 64, 64)
    conv_counts: tuple = (1, 1, 1, 1, 1)
    dilated_width: int = 64
    dilation_schedule: tuple = (2, 4, 8, 16, 16, 8, 4, 2)
    skip_stages: tuple = (1, 2, 3, 4, 5)
    branch_stage: int = 2
    leaky_alpha: float = 0.1
    in_channels: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.conv_counts = tuple(int(c) for c in self.conv_counts)
        self.dilation_schedule = tuple(int(d) for d in self.dilation_schedule)
        self.skip_stages = tuple(sorted(int(s) for s in self.skip_stages))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.widths) != len(self.conv_counts):
            raise ValueError("widths and conv_counts must have equal length")
        if any(w < 1 for w in self.widths) or any(c < 1 for c in self.conv_counts):
            raise ValueError("widths and conv_counts must be positive")
        if any(d < 1 for d in self.dilation_schedule):
            raise ValueError(f"dilation schedule entries must be >= 1, got {self.dilation_schedule}")
        if not self.dilation_schedule:
            raise ValueError("dilation schedule is empty")
        stages = len(self.widths)
        if any(not 1 <= s <= stages for s in self.skip_stages):
            raise ValueError(f"skip stages must lie in 1..{stages}")
        if not 1 <= self.branch_stage <= stages:
            raise ValueError(f"branch stage must lie in 1..{stages}")
        if 2 ** self.branch_stage not in (2, 4, 8, 16, 32):
            raise ValueError("branch stage too deep for the upsampling factors")
        if not 0.0 <= self.leaky_alpha < 1.0:
            raise ValueError("leaky_alpha must satisfy 0 <= alpha < 1")

    @property
    def num_stages(self):
        return len(self.widths)

    @property
    def input_multiple(self):
        """Spatial multiple at which no internal padding occurs."""
        return 2 ** self.num_stages

    @property
    def min_input(self):
        return 2 ** self.num_stages


@dataclass
class PathSpec:
    """One layer's receptive-field record (see receptive_field)."""

    name: str
    rf: int
    stride: int


class DefectNet:
    """Parameter container plus the define-by-run forward builder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self._params: dict[str, Tensor] = {}
        self.initialize(seed)

    # ------------------------------------------------------------------
    # parameters

    def _add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name}")
        self._params[name] = Tensor(data, requires_grad=True)

    def initialize(self, seed):
        """(Re)draw all parameters: He fan-in normals for conv weights,
        zeros for biases, bilinear interpolation for upsample layers."""
        cfg = self.config
        rng = np.random.default_rng(seed)
        self._params = {}

        def he_conv(name, out_ch, in_ch, k):
            std = np.sqrt(2.0 / (in_ch * k * k))
            self._add(f"{name}.weight", rng.normal(0.0, std, (out_ch, in_ch, k, k)))
            self._add(f"{name}.bias", np.zeros(out_ch))

        in_ch = cfg.in_channels
        for stage, (width, count) in enumerate(zip(cfg.widths, cfg.conv_counts), start=1):
            for j in range(count):
                he_conv(f"block{stage}.conv{j}", width, in_ch, 3)
                in_ch = width
        for stage in cfg.skip_stages:
            he_conv(f"score{stage}", cfg.num_classes, cfg.widths[stage - 1], 1)
        for stage in range(cfg.num_stages, 0, -1):
            self._add(f"up{stage}.weight", bilinear_upsample_weight(cfg.num_classes, 2))
        branch_width = cfg.widths[cfg.branch_stage - 1]
        d_in = branch_width
        for j in range(len(cfg.dilation_schedule)):
            he_conv(f"dilated.conv{j}", cfg.dilated_width, d_in, 3)
            d_in = cfg.dilated_width
        he_conv("dilated.score", cfg.num_classes, cfg.dilated_width, 1)
        self._add(
            "dilated.up.weight",
            bilinear_upsample_weight(cfg.num_classes, 2 ** cfg.branch_stage),
        )

    def parameters(self):
        """Stable (name, tensor) list; the order is the serialization order."""
        return list(self._params.items())

    def param(self, name):
        return self._params[name]

    def zero_grads(self):
        for p in self._params.values():
            p.zero_grad()

    # ------------------------------------------------------------------
    # forward

    def forward(self, x, return_parts=False):
        cfg = self.config
        if isinstance(x, np.ndarray):
            x = Tensor(x)
        if x.ndim != 3 or x.shape[0] != cfg.in_channels:
            raise ValueError(
                f"input must be [{cfg.in_channels},H,W], got shape {x.shape}"
            )
        _, H, W = x.shape
        if H < cfg.min_input or W < cfg.min_input:
            raise ValueError(f"input {H}x{W} smaller than minimum {cfg.min_input}")

        feats = x
        pools = {}
        for stage in range(1, cfg.num_stages + 1):
            for j in range(cfg.conv_counts[stage - 1]):
                feats = leaky_relu(
                    conv2d(
                        feats,
                        self.param(f"block{stage}.conv{j}.weight"),
                        self.param(f"block{stage}.conv{j}.bias"),
                    ),
                    cfg.leaky_alpha,
                )
            feats = pad_edge2d(feats, feats.shape[1] % 2, feats.shape[2] % 2)
            feats = max_pool2(feats)
            pools[stage] = feats

        def score(stage, t):
            return conv2d(
                t,
                self.param(f"score{stage}.weight"),
                self.param(f"score{stage}.bias"),
            )

        deepest = cfg.num_stages
        a = score(deepest, pools[deepest])
        for stage in range(deepest - 1, 0, -1):
            a = upsample(a, self.param(f"up{stage + 1}.weight"), 2)
            a = _crop_to(a, pools[stage].shape[1:])
            if stage in cfg.skip_stages:
                a = a + score(stage, pools[stage])
        a = upsample(a, self.param("up1.weight"), 2)
        a = _crop_to(a, (H, W))

        b = pools[cfg.branch_stage]
        for j, dil in enumerate(cfg.dilation_schedule):
            b = leaky_relu(
                conv2d(
                    b,
                    self.param(f"dilated.conv{j}.weight"),
                    self.param(f"dilated.conv{j}.bias"),
                    dilation=dil,
                ),
                cfg.leaky_alpha,
            )
        b = conv2d(b, self.param("dilated.score.weight"), self.param("dilated.score.bias"))
        b = upsample(b, self.param("dilated.up.weight"), 2 ** cfg.branch_stage)
        b = _crop_to(b, (H, W))

        fused = sum_fusion(a, b)
        if return_parts:
            return fused, a, b
        return fused

    # ------------------------------------------------------------------
    # serialization

    def save_weights(self, path):
        with open(path, "wb") as fh:
            fh.write(self.weights_bytes())

    def weights_bytes(self):
        buf = io.BytesIO()
        write_weight_records(buf, self.parameters())
        return buf.getvalue()

    def load_weights(self, path):
        with open(path, "rb") as fh:
            self.load_records(read_weight_records(fh))

    def load_records(self, records):
        names = [n for n, _ in self.parameters()]
        if [n for n, _ in records] != names:
            raise ValueError("weight file parameter names/order do not match the model")
        for (name, arr), (_, tensor) in zip(records, self.parameters()):
            if arr.shape != tensor.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tensor.shape}")
            tensor.data[...] = arr


def build(config: ModelConfig, seed: int = 0) -> DefectNet:
    return DefectNet(config, seed)


def _crop_to(t, hw):
    h, w = hw
    ch, cw = t.shape[1], t.shape[2]
    if (ch, cw) == (h, w):
        return t
    return crop2d(t, (ch - h) // 2, (cw - w) // 2, h, w)


# ----------------------------------------------------------------------
# weight file format: magic, then per-parameter records of
#   u32 name length, name bytes (utf-8), u32 rank, u32 extents,
#   float64 little-endian values, in stable parameter order.


def write_weight_records(fh, named_arrays):
    fh.write(WEIGHTS_MAGIC)
    for name, tensor in named_arrays:
        data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_weight_records(fh, count=None):
    """Parse weight records; `count` stops after that many records so a
    trailing section (e.g. optimizer state) can follow in the same stream."""
    magic = fh.read(len(WEIGHTS_MAGIC))
    if magic != WEIGHTS_MAGIC:
        raise ValueError(f"bad weight file magic {magic!r}")
    records = []
    while count is None or len(records) < count:
        head = fh.read(4)
        if not head:
            break
        (name_len,) = struct.unpack("<I", head)
        name = fh.read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        n_values = int(np.prod(shape)) if shape else 1
        raw = fh.read(8 * n_values)
        if len(raw) != 8 * n_values:
            raise ValueError(f"truncated weight record for {name}")
        records.append((name, np.frombuffer(raw, dtype="<f8").reshape(shape).copy()))
    return records


# ----------------------------------------------------------------------
# receptive fields


def dilated_receptive_fields(schedule):
    """Cumulative receptive field of stacked 3x3 stride-1 dilated convs:
    rf grows by 2*l per layer."""
    rf = 1
    out = []
    for dil in schedule:
        if dil < 1:
            raise ValueError(f"dilation must be >= 1, got {dil}")
        rf += 2 * dil
        out.append(rf)
    return out


def receptive_field(config: ModelConfig):
    """Analytic receptive-field sizes per layer for both paths.

    Path A sizes are in input pixels; Path B sizes are reported both at the
    branch resolution (stride 1 there) and in input pixels.
    """
    path_a = []
    rf, jump = 1, 1
    for stage, count in enumerate(config.conv_counts, start=1):
        for j in range(count):
            rf += 2 * jump
            path_a.append(PathSpec(f"block{stage}.conv{j}", rf, jump))
        rf += jump
        jump *= 2
        path_a.append(PathSpec(f"pool{stage}", rf, jump))

    branch_jump = 2 ** config.branch_stage
    branch_rf = next(p.rf for p in path_a if p.name == f"pool{config.branch_stage}")
    path_b = []
    at_branch = dilated_receptive_fields(config.dilation_schedule)
    for j, rf_local in enumerate(at_branch):
        rf_input = branch_rf + (rf_local - 1) * branch_jump
        path_b.append(PathSpec(f"dilated.conv{j}", rf_input, branch_jump))
    return {
        "path_a": path_a,
        "path_b": path_b,
        "dilated_rf_at_branch": at_branch,
    }
