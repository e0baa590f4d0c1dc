"""Neural-network operators with autodiff-compatible backward rules.

Convolution follows the direct-sum definition: for dilation l, the output
at position p is sum over kernel taps t of F(p - l*t) * k(t), taps centered
on the kernel, with zero padding sized so output spatial extent equals the
input extent at stride 1. The forward lowers the input to a patch matrix
(dilation-aware im2col) and runs one GEMM per layer; the gather offsets
carry the tap reversal, so the kernel array is used unflipped.

All kernels are pure functions of their inputs with fixed accumulation
order, so repeated runs are bit-identical.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _accum

UPSAMPLE_FACTORS = (2, 4, 8, 16, 32)


def conv2d(x, weight, bias, dilation=1):
    """Dilated 2-D convolution, same padding, stride 1.

    x: Tensor[C,H,W]; weight: Tensor[O,C,k,k] with k odd; bias: Tensor[O].
    Returns Tensor[O,H,W].
    """
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    if x.ndim != 3:
        raise ValueError(f"conv2d input must be [C,H,W], got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weight must be [O,C,k,k], got shape {weight.shape}")
    C, H, W = x.shape
    O, Ci, k, _ = weight.shape
    if Ci != C:
        raise ValueError(f"channel mismatch: input has {C}, weight expects {Ci}")
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if bias.shape != (O,):
        raise ValueError(f"bias must be [O]={O}, got shape {bias.shape}")

    if k == 1:
        # 1x1 score layers reduce to a channel mix; no padding or gather.
        colmat = x.data.reshape(C, H * W)
        wmat = weight.data.reshape(O, C)
        out_data = (wmat @ colmat + bias.data[:, None]).reshape(O, H, W)

        def bw1(g):
            gmat = g.reshape(O, H * W)
            _accum(bias, gmat.sum(axis=1))
            _accum(weight, (gmat @ colmat.T).reshape(weight.shape))
            if x.requires_grad:
                _accum(x, (wmat.T @ gmat).reshape(C, H, W))

        return x._record(out_data, (x, weight, bias), bw1)

    # Tap (ti,tj) with centered offset t = ti - k//2 reads the input at
    # p - dilation*t; out-of-range reads are the zero padding. Each tap's
    # valid window is gathered directly, so no padded buffer is built
    # (for large dilations most of one would be zeros anyway).
    half = k // 2
    windows = []
    for ti in range(k):
        d = dilation * (half - ti)
        lo, hi = max(0, -d), min(H, H - d)  # destination rows; empty if |d| >= H
        windows.append((slice(lo, hi), slice(lo + d, hi + d)))
    wcols = []
    for tj in range(k):
        d = dilation * (half - tj)
        lo, hi = max(0, -d), min(W, W - d)
        wcols.append((slice(lo, hi), slice(lo + d, hi + d)))
    cols = np.zeros((C, k * k, H, W))
    for ti, (oy, sy) in enumerate(windows):
        if oy.start >= oy.stop:
            continue
        for tj, (ox, sx) in enumerate(wcols):
            if ox.start >= ox.stop:
                continue
            cols[:, ti * k + tj, oy, ox] = x.data[:, sy, sx]
    colmat = cols.reshape(C * k * k, H * W)
    wmat = weight.data.reshape(O, C * k * k)
    out_data = (wmat @ colmat + bias.data[:, None]).reshape(O, H, W)

    def bw(g):
        gmat = g.reshape(O, H * W)
        _accum(bias, gmat.sum(axis=1))
        _accum(weight, (gmat @ colmat.T).reshape(weight.shape))
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(C, k * k, H, W)
            gx = np.zeros((C, H, W))
            for ti, (oy, sy) in enumerate(windows):
                if oy.start >= oy.stop:
                    continue
                for tj, (ox, sx) in enumerate(wcols):
                    if ox.start >= ox.stop:
                        continue
                    gx[:, sy, sx] += gcols[:, ti * k + tj, oy, ox]
            _accum(x, gx)

    return x._record(out_data, (x, weight, bias), bw)


def leaky_relu(x, alpha=0.1):
    """f(v) = v if v > 0 else alpha*v; the subgradient at 0 is alpha."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must satisfy 0 <= alpha < 1, got {alpha}")
    slope = np.where(x.data > 0.0, 1.0, alpha)
    out_data = x.data * slope

    def bw(g):
        _accum(x, g * slope)

    return x._record(out_data, (x,), bw)


def max_pool2(x):
    """2x2 max pooling, stride 2; ties route the gradient to the first
    element in row-major window order."""
    if x.ndim != 3:
        raise ValueError(f"max_pool2 input must be [C,H,W], got shape {x.shape}")
    C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2 requires even spatial dims, got {H}x{W}")
    windows = (
        x.data.reshape(C, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(C, H // 2, W // 2, 4)
    )
    idx = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        scatter = np.zeros_like(windows)
        np.put_along_axis(scatter, idx[..., None], g[..., None], axis=-1)
        _accum(
            x,
            scatter.reshape(C, H // 2, W // 2, 2, 2)
            .transpose(0, 1, 3, 2, 4)
            .reshape(C, H, W),
        )

    return x._record(out_data, (x,), bw)


def upsample(x, weight, factor):
    """Learnable transposed convolution by a power-of-two factor.

    weight: Tensor[O,C,2f,2f]. The input is edge-replicated by one pixel
    before the strided scatter and the result cropped back, which makes a
    bilinear-initialized layer preserve constants everywhere, borders
    included (interior taps form a partition of unity).
    """
    if factor not in UPSAMPLE_FACTORS:
        raise ValueError(f"unsupported upsample factor {factor}; expected one of {UPSAMPLE_FACTORS}")
    if x.ndim != 3:
        raise ValueError(f"upsample input must be [C,h,w], got shape {x.shape}")
    C, h, w = x.shape
    f = factor
    ksz = 2 * f
    if weight.ndim != 4 or weight.shape[1] != C or weight.shape[2:] != (ksz, ksz):
        raise ValueError(
            f"upsample weight must be [O,{C},{ksz},{ksz}], got shape {weight.shape}"
        )
    O = weight.shape[0]
    xr = _edge_pad1(x.data)
    hp, wp = h + 2, w + 2
    crop = 3 * f // 2
    T = ksz * ksz
    # One GEMM produces every tap plane; the strided slice adds scatter them.
    wtaps = weight.data.reshape(O, C, T).transpose(0, 2, 1).reshape(O * T, C)
    taps = (wtaps @ xr.reshape(C, hp * wp)).reshape(O, T, hp, wp)
    full = np.zeros((O, f * hp + f, f * wp + f))
    for i in range(ksz):
        for j in range(ksz):
            full[:, i : i + f * hp : f, j : j + f * wp : f] += taps[:, i * ksz + j]
    out_data = full[:, crop : crop + f * h, crop : crop + f * w]

    def bw(g):
        gfull = np.zeros_like(full)
        gfull[:, crop : crop + f * h, crop : crop + f * w] = g
        gtaps = np.empty((O, T, hp, wp))
        for i in range(ksz):
            for j in range(ksz):
                gtaps[:, i * ksz + j] = gfull[:, i : i + f * hp : f, j : j + f * wp : f]
        gtap_mat = gtaps.reshape(O * T, hp * wp)
        if weight.requires_grad:
            gw = (gtap_mat @ xr.reshape(C, hp * wp).T).reshape(O, T, C)
            _accum(weight, gw.transpose(0, 2, 1).reshape(weight.shape))
        if x.requires_grad:
            gxr = (wtaps.T @ gtap_mat).reshape(C, hp, wp)
            _accum(x, _fold_edge_pad(gxr))

    return x._record(out_data, (x, weight), bw)


def _edge_pad1(data):
    """One-pixel edge-replicate pad on the last two axes (np.pad is slow)."""
    C, h, w = data.shape
    out = np.empty((C, h + 2, w + 2))
    out[:, 1:-1, 1:-1] = data
    out[:, 0, 1:-1] = data[:, 0, :]
    out[:, -1, 1:-1] = data[:, -1, :]
    out[:, :, 0] = out[:, :, 1]
    out[:, :, -1] = out[:, :, -2]
    return out


def _fold_edge_pad(g):
    """Adjoint of a one-pixel edge-replicate pad on the last two axes."""
    inner = g[:, 1:-1, 1:-1].copy()
    inner[:, 0, :] += g[:, 0, 1:-1]
    inner[:, -1, :] += g[:, -1, 1:-1]
    inner[:, :, 0] += g[:, 1:-1, 0]
    inner[:, :, -1] += g[:, 1:-1, -1]
    inner[:, 0, 0] += g[:, 0, 0]
    inner[:, 0, -1] += g[:, 0, -1]
    inner[:, -1, 0] += g[:, -1, 0]
    inner[:, -1, -1] += g[:, -1, -1]
    return inner


def bilinear_upsample_weight(channels, factor):
    """Per-channel bilinear interpolation weights for `upsample`."""
    if factor not in UPSAMPLE_FACTORS:
        raise ValueError(f"unsupported upsample factor {factor}")
    ksz = 2 * factor
    center = factor - 0.5
    og = np.arange(ksz, dtype=np.float64)
    filt = 1.0 - np.abs(og - center) / factor
    kernel2d = np.outer(filt, filt)
    weight = np.zeros((channels, channels, ksz, ksz))
    for c in range(channels):
        weight[c, c] = kernel2d
    return weight


def softmax_channels(x):
    """Per-position softmax over axis 0, computed with max-shifted exps."""
    if x.ndim < 2 or x.shape[0] < 2:
        raise ValueError(f"softmax_channels needs K>=2 leading channels, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=0, keepdims=True)

    def bw(g):
        _accum(x, s * (g - (g * s).sum(axis=0, keepdims=True)))

    return x._record(s, (x,), bw)


def log_softmax_channels(x):
    """Log of softmax_channels without materializing log(0)."""
    if x.ndim < 2 or x.shape[0] < 2:
        raise ValueError(f"log_softmax_channels needs K>=2 leading channels, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    out_data = shifted - lse
    s = np.exp(out_data)

    def bw(g):
        _accum(x, g - s * g.sum(axis=0, keepdims=True))

    return x._record(out_data, (x,), bw)


def sum_fusion(a, b):
    """Elementwise sum of two same-shape score maps."""
    if a.shape != b.shape:
        raise ValueError(f"sum_fusion shapes differ: {a.shape} vs {b.shape}")
    return a + b


def take_columns(x, idx):
    """Gather x[idx[m], m] from a [K,M] tensor; gradient scatter-adds back."""
    if x.ndim != 2:
        raise ValueError(f"take_columns input must be [K,M], got shape {x.shape}")
    K, M = x.shape
    idx = np.asarray(idx)
    if idx.shape != (M,) or idx.min() < 0 or idx.max() >= K:
        raise ValueError("column index array must be [M] with values in [0,K)")
    cols = np.arange(M)
    out_data = x.data[idx, cols]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (idx, cols), g)
        _accum(x, gx)

    return x._record(out_data, (x, ), bw)


def pad_edge2d(x, bottom, right):
    """Replicate-pad the last row/column (used before pooling odd maps)."""
    if bottom < 0 or right < 0:
        raise ValueError("pad extents must be non-negative")
    if bottom == 0 and right == 0:
        return x
    C, H, W = x.shape
    out_data = np.pad(x.data, ((0, 0), (0, bottom), (0, right)), mode="edge")

    def bw(g):
        gx = g[:, :H, :W].copy()
        if bottom:
            gx[:, -1, :] += g[:, H:, :W].sum(axis=1)
        if right:
            gx[:, :, -1] += g[:, :H, W:].sum(axis=2)
        if bottom and right:
            gx[:, -1, -1] += g[:, H:, W:].sum(axis=(1, 2))
        _accum(x, gx)

    return x._record(out_data, (x,), bw)


def crop2d(x, top, left, height, width):
    """Crop a [C,H,W] tensor; the gradient zero-pads back."""
    C, H, W = x.shape
    if top < 0 or left < 0 or top + height > H or left + width > W:
        raise ValueError(f"crop ({top},{left},{height},{width}) exceeds input {H}x{W}")
    out_data = x.data[:, top : top + height, left : left + width]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, top : top + height, left : left + width] = g
        _accum(x, gx)

    return x._record(out_data.copy(), (x,), bw)
