"""Attention blocks used by the decoder.

All blocks take ``C x H x W`` tensors and a parameter dict built by the
matching ``init_*`` function. Gates and weights come out of a sigmoid, so
they lie strictly inside (0, 1) for finite inputs of moderate size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .params import conv_bias, conv_bias_params, conv_bn, conv_bn_params, fc_params

RFB_DILATIONS = (1, 3, 5)


@dataclass
class CoAttentionState:
    similarity: Tensor
    col_norm: Tensor
    row_norm: Tensor
    gates: Optional[tuple[Tensor, Tensor]] = None


# -- receptive field and residual blocks ------------------------------------


def init_rfb(rng, c_in: int, c_out: int, dtype=np.float64) -> dict:
    p = {
        "merge": conv_bn_params(rng, len(RFB_DILATIONS) * c_out, c_out, 1, dtype),
        "shortcut": conv_bn_params(rng, c_in, c_out, 1, dtype),
    }
    for d in RFB_DILATIONS:
        p[f"branch{d}"] = {
            "reduce": conv_bn_params(rng, c_in, c_out, 1, dtype),
            "dilated": conv_bn_params(rng, c_out, c_out, 3, dtype),
        }
    return p


def rfb_block(x: Tensor, p: Mapping) -> Tensor:
    """Receptive-field block: three dilated 3x3 branches, 1x1 merge, 1x1 shortcut, ReLU."""
    branches = []
    for d in RFB_DILATIONS:
        b = p[f"branch{d}"]
        y = conv_bn(x, b["reduce"])
        branches.append(conv_bn(y, b["dilated"], pad=d, dilation=d))
    merged = conv_bn(ad.concat_channels(branches), p["merge"])
    return ad.relu(ad.add(merged, conv_bn(x, p["shortcut"])))


def init_residual(rng, c: int, dtype=np.float64) -> dict:
    return {"conv1": conv_bn_params(rng, c, c, 3, dtype), "conv2": conv_bn_params(rng, c, c, 3, dtype)}


def residual_block(x: Tensor, p: Mapping) -> Tensor:
    y = ad.relu(conv_bn(x, p["conv1"], pad=1))
    y = conv_bn(y, p["conv2"], pad=1)
    return ad.relu(ad.add(y, x))


# -- channel attention across levels ------------------------------------------


def _hidden(c: int, reduction: int) -> int:
    return max(1, c // reduction)


def init_squeeze_excite(rng, c: int, reduction: int = 4, dtype=np.float64) -> dict:
    h = _hidden(c, reduction)
    return {"fc1": fc_params(rng, c, h, dtype), "fc2": fc_params(rng, h, c, dtype)}


def _excite(pooled: Tensor, p: Mapping) -> Tensor:
    h = ad.relu(ad.fully_connected(pooled, p["fc1"]["w"], p["fc1"]["b"]))
    return ad.sigmoid(ad.fully_connected(h, p["fc2"]["w"], p["fc2"]["b"]))


def channel_weights(f_upper: Tensor, p: Mapping, upsample_mode: str = "bilinear") -> Tensor:
    return _excite(ad.global_max_pool(ad.upsample2x(f_upper, upsample_mode)), p)


def channel_attention_fuse(f_i: Tensor, f_upper: Tensor, p: Mapping, upsample_mode: str = "bilinear") -> Tensor:
    """Re-weight level ``i`` channels with weights squeezed from the level above, plus a residual.

    ``out = sigmoid(FC(ReLU(FC(maxpool(up(f_upper)))))) * f_i + f_i``
    """
    if tuple(2 * n for n in f_upper.shape[1:]) != f_i.shape[1:]:
        raise ShapeError(f"upper-level map {f_upper.shape} does not upsample onto {f_i.shape}")
    if f_upper.shape[0] != f_i.shape[0]:
        raise ShapeError(f"channel mismatch between levels: {f_upper.shape} vs {f_i.shape}")
    w = channel_weights(f_upper, p, upsample_mode)
    return ad.add(ad.scale_channels(f_i, w), f_i)


# -- co-attention between branches ---------------------------------------------


def co_attention(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor, CoAttentionState]:
    """Cross-branch attention through the HW x HW position-similarity matrix.

    ``M[p, q] = sum_c a[c, p] b[c, q]``; columns of ``M`` and of ``M^T`` are
    softmax-normalized and used to re-mix each branch's positions. There are
    no learned weights here.
    """
    if a.shape != b.shape or a.data.ndim != 3:
        raise ShapeError(f"co_attention needs equal C x H x W maps, got {a.shape} and {b.shape}")
    c, h, w = a.shape
    fa = ad.reshape(a, (c, h * w))
    fb = ad.reshape(b, (c, h * w))
    m = ad.matmul(ad.transpose(fa), fb)
    m_col = ad.softmax(m, axis=0)
    m_row = ad.softmax(ad.transpose(m), axis=0)
    out_a = ad.reshape(ad.matmul(fa, m_col), (c, h, w))
    out_b = ad.reshape(ad.matmul(fb, m_row), (c, h, w))
    return out_a, out_b, CoAttentionState(m, m_col, m_row)


def init_self_gate(rng, c: int, dtype=np.float64) -> dict:
    return conv_bias_params(rng, c, c, 1, dtype)


def gate_map(f: Tensor, p: Mapping) -> Tensor:
    return ad.sigmoid(conv_bias(f, p))


def self_gate(f: Tensor, p: Mapping) -> Tensor:
    return ad.mul(gate_map(f, p), f)


# -- synergistic attention stage -------------------------------------------------


def init_sa_branch(rng, c: int, reduction: int = 4, use_coa: bool = True, dtype=np.float64) -> dict:
    p = {
        "ca": init_squeeze_excite(rng, c, reduction, dtype),
        "rb": init_residual(rng, c, dtype),
        "reduce": conv_bn_params(rng, 2 * c, c, 1, dtype),
    }
    if use_coa:
        p["gate"] = init_self_gate(rng, c, dtype)
    return p


def init_sa_stage(rng, c: int, reduction: int = 4, use_coa: bool = True, dtype=np.float64) -> dict:
    return {
        "aif": init_sa_branch(rng, c, reduction, use_coa, dtype),
        "fs": init_sa_branch(rng, c, reduction, use_coa, dtype),
    }


def _sa_fuse(f_i: Tensor, f_upper: Tensor, p: Mapping, upsample_mode: str) -> Tensor:
    ca = channel_attention_fuse(f_i, f_upper, p["ca"], upsample_mode)
    rb = ad.upsample2x(residual_block(f_upper, p["rb"]), upsample_mode)
    return conv_bn(ad.concat_channels([ca, rb]), p["reduce"])


def sa_stage(
    pair2d: tuple[Tensor, Tensor],
    pair3d: tuple[Tensor, Tensor],
    p: Mapping,
    upsample_mode: str = "bilinear",
    use_coa: bool = True,
) -> tuple[Tensor, Tensor, Optional[CoAttentionState]]:
    """One synergistic attention stage on ``(level i, level i+1)`` pairs from each branch.

    Per branch: multi-level channel attention, concatenation with the residual
    block output of the upper map, 1x1 reduction. Then co-attention across
    branches and a self-gate per branch (skipped when ``use_coa`` is false).
    """
    for lo, hi in (pair2d, pair3d):
        if lo.shape[1:] != tuple(2 * n for n in hi.shape[1:]):
            raise ShapeError(f"stage inputs are not adjacent levels: {lo.shape} / {hi.shape}")
    if pair2d[0].shape != pair3d[0].shape or pair2d[1].shape != pair3d[1].shape:
        raise ShapeError("AiF and focal-stack stage inputs differ in shape")
    cat2d = _sa_fuse(*pair2d, p["aif"], upsample_mode)
    cat3d = _sa_fuse(*pair3d, p["fs"], upsample_mode)
    if not use_coa:
        return cat2d, cat3d, None
    co2d, co3d, state = co_attention(cat2d, cat3d)
    g2d, g3d = gate_map(co2d, p["aif"]["gate"]), gate_map(co3d, p["fs"]["gate"])
    state.gates = (g2d, g3d)
    return ad.mul(g2d, co2d), ad.mul(g3d, co3d), state


# -- AiF-induced attention ---------------------------------------------------------


def init_spatial_unit(rng, dtype=np.float64) -> dict:
    return conv_bias_params(rng, 2, 1, 7, dtype)


def spatial_mask(f: Tensor, p: Mapping) -> Tensor:
    pooled = ad.concat_channels([ad.mean_axis(f, 0, keepdims=True), ad.max_axis(f, 0, keepdims=True)])
    return ad.sigmoid(conv_bias(pooled, p, pad=3))


def spatial_attention_unit(f: Tensor, p: Mapping) -> Tensor:
    """Mask every position by ``sigmoid(conv7x7([mean_c(f), max_c(f)]))``."""
    return ad.scale_spatial(f, spatial_mask(f, p))


def channel_attention_unit(f: Tensor, p: Mapping) -> Tensor:
    return ad.scale_channels(f, _excite(ad.global_max_pool(f), p))


def init_aif_attention(rng, c: int, reduction: int = 4, dtype=np.float64) -> dict:
    return {"channel": init_squeeze_excite(rng, c, reduction, dtype), "spatial": init_spatial_unit(rng, dtype)}


def aif_induced_attention(f2d: Tensor, f3d: Tensor, p: Mapping) -> tuple[Tensor, Tensor]:
    """Balance the focal-stack features with attention derived from the AiF features.

    Channel attention runs first, spatial attention second; the AiF features
    pass through unchanged.
    """
    if f2d.shape != f3d.shape:
        raise ShapeError(f"aif_induced_attention shape mismatch: {f2d.shape} vs {f3d.shape}")
    guided = spatial_attention_unit(channel_attention_unit(f2d, p["channel"]), p["spatial"])
    return f2d, ad.add(guided, f3d)
