"""Dual-branch encoder, attention decoder and prediction heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .attention import (
    aif_induced_attention,
    init_aif_attention,
    init_rfb,
    init_sa_stage,
    rfb_block,
    sa_stage,
)
from .autodiff import ShapeError, Tensor
from .params import conv_bias, conv_bias_params, conv_bn, conv_bn_params, count, he

ABLATIONS = ("B", "ME0", "ME", "SA1", "SA2", "PF1", "PF2", "FULL")
DECODER_LEVELS = (2, 3, 4)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    T: int = 12
    base_channels: int = 16
    c_rfb: int = 32
    input_size: int = 64
    ablation: str = "FULL"
    upsample_mode: str = "bilinear"
    reduction: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        if self.input_size % 32 or self.input_size < 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.T < 1 or self.base_channels < 1 or self.c_rfb < 1 or self.reduction < 1:
            raise ConfigError(f"counts must be >= 1: {self}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ConfigError(f"unknown upsample_mode {self.upsample_mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def stage(self) -> int:
        return ABLATIONS.index(self.ablation)

    # which components a configuration carries; each ablation adds to the previous one
    @property
    def uses_3d(self) -> bool:
        return self.stage >= ABLATIONS.index("ME0")

    @property
    def uses_rfb(self) -> bool:
        return self.stage >= ABLATIONS.index("ME")

    @property
    def uses_sa(self) -> bool:
        return self.stage >= ABLATIONS.index("SA1")

    @property
    def uses_coa(self) -> bool:
        return self.stage >= ABLATIONS.index("SA2")

    @property
    def uses_pf(self) -> bool:
        return self.stage >= ABLATIONS.index("PF1")

    @property
    def deep_supervision(self) -> bool:
        return self.stage >= ABLATIONS.index("PF2")

    @property
    def uses_aa(self) -> bool:
        return self.ablation == "FULL"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def widths(self) -> tuple[int, int, int, int]:
        b = self.base_channels
        return (b, 2 * b, 4 * b, 8 * b)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeaturePyramid:
    """Levels 1-4 at strides 4/8/16/32 (index 0 holds level 1)."""

    levels: list[Tensor]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ShapeError(f"a pyramid has 4 levels, got {len(self.levels)}")
        for lo, hi in zip(self.levels, self.levels[1:]):
            if lo.shape[1] != 2 * hi.shape[1] or lo.shape[2] != 2 * hi.shape[2]:
                raise ShapeError(f"pyramid levels do not halve: {lo.shape} -> {hi.shape}")

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level - 1]

    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.levels]


@dataclass
class Prediction:
    """Saliency maps ordered P1..Pn; the last one is the reported prediction."""

    maps: list[Tensor] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.maps[-1]

    def __len__(self) -> int:
        return len(self.maps)


# -- encoders ------------------------------------------------------------------


def _init_down(rng, c_in, c_out, ks, dtype):
    return {
        "conv1": conv_bn_params(rng, c_in, c_out, ks, dtype),
        "conv2": conv_bn_params(rng, c_out, c_out, ks, dtype),
        "shortcut": conv_bn_params(rng, c_in, c_out, tuple(1 for _ in ks), dtype),
    }


def init_encoder(rng, cfg: ModelConfig, in_channels: int = 3, volumetric: bool = False) -> dict:
    ks = (3, 3, 3) if volumetric else (3, 3)
    dt = cfg.np_dtype
    w = cfg.widths()
    p = {
        "stem1": conv_bn_params(rng, in_channels, w[0], ks, dt),
        "stem2": conv_bn_params(rng, w[0], w[0], ks, dt),
    }
    for i in range(3):
        p[f"stage{i + 2}"] = _init_down(rng, w[i], w[i + 1], ks, dt)
    return p


def _conv2(x, p, stride):
    return conv_bn(x, p, stride=stride, pad=1)


def _conv3(x, p, stride):
    # temporal edges are replicated so identical slices stay identical
    xt = ad.pad_edge(x, 1, 1, 1)
    return conv_bn(xt, p, stride=stride, pad=(0, 1, 1))


def _down(x, p, conv, stride, sc_stride):
    y = ad.relu(conv(x, p["conv1"], stride))
    y = conv(y, p["conv2"], 1)
    sc = conv_bn(x, p["shortcut"], stride=sc_stride)
    return ad.relu(ad.add(y, sc))


def _check_image(img: Tensor, cfg: ModelConfig, channels: int) -> None:
    n = cfg.input_size
    if img.shape[-2] % 32 or img.shape[-1] % 32:
        raise ShapeError(f"spatial size {img.shape[-2:]} is not divisible by 32")
    if img.shape[-2:] != (n, n) or img.shape[0] != channels:
        raise ShapeError(f"expected {channels}x{n}x{n} input, got {img.shape}")


def _encode_2d(img: Tensor, p: Mapping) -> FeaturePyramid:
    x = ad.relu(_conv2(img, p["stem1"], 2))
    x = ad.relu(_conv2(x, p["stem2"], 2))
    levels = [x]
    for i in (2, 3, 4):
        x = _down(x, p[f"stage{i}"], _conv2, 2, 2)
        levels.append(x)
    return FeaturePyramid(levels)


def encode_aif(img: Tensor, params: Mapping, cfg: ModelConfig) -> FeaturePyramid:
    """2D convolutional encoder for the all-in-focus image (``3 x H x W``)."""
    _check_image(img, cfg, 3)
    return _encode_2d(img, params)


def encode_fs(stack: Tensor, params: Mapping, cfg: ModelConfig) -> FeaturePyramid:
    """3D convolutional encoder for a ``T x 3 x H x W`` focal stack.

    Stage 1 keeps the slice count; stages 2-4 halve it. Each level is collapsed
    over slices by averaging before it leaves the encoder.
    """
    if stack.data.ndim != 4 or stack.shape[0] != cfg.T:
        raise ShapeError(f"focal stack must hold exactly T={cfg.T} slices, got shape {stack.shape}")
    _check_image(Tensor(stack.data[0]), cfg, 3)
    vol = ad.permute(stack, (1, 0, 2, 3))
    x = ad.relu(_conv3(vol, params["stem1"], (1, 2, 2)))
    x = ad.relu(_conv3(x, params["stem2"], (1, 2, 2)))
    levels = [ad.mean_axis(x, 1)]
    for i in (2, 3, 4):
        x = _down(x, params[f"stage{i}"], _conv3, (2, 2, 2), (2, 2, 2))
        levels.append(ad.mean_axis(x, 1))
    return FeaturePyramid(levels)


def encode_fs_flat(stack: Tensor, params: Mapping, cfg: ModelConfig) -> FeaturePyramid:
    """Baseline focal-stack encoder: a 2D encoder over slices stacked as channels."""
    if stack.data.ndim != 4 or stack.shape[0] != cfg.T:
        raise ShapeError(f"focal stack must hold exactly T={cfg.T} slices, got shape {stack.shape}")
    img = ad.reshape(stack, (3 * cfg.T,) + stack.shape[2:])
    _check_image(img, cfg, 3 * cfg.T)
    return _encode_2d(img, params)


# -- heads and decoder -----------------------------------------------------------


def init_head(rng, c_in: int, dtype=np.float64) -> dict:
    return conv_bias_params(rng, c_in, 1, 1, dtype)


def _to_input_size(m: Tensor, cfg: ModelConfig) -> Tensor:
    return ad.upsample_to(m, cfg.input_size, cfg.input_size, cfg.upsample_mode)


def prediction_head(f2d: Tensor, f3d: Tensor, params: Mapping, cfg: ModelConfig) -> Tensor:
    """Concatenate both branches, 1x1 conv, sigmoid, upsample to the input size."""
    if f2d.shape != f3d.shape:
        raise ShapeError(f"prediction_head shape mismatch: {f2d.shape} vs {f3d.shape}")
    return _to_input_size(ad.sigmoid(conv_bias(ad.concat_channels([f2d, f3d]), params)), cfg)


def init_decoder_block(rng, c_in: int, dtype=np.float64) -> dict:
    p = {}
    c = c_in
    for i in range(3):
        c_out = max(1, c // 2)
        p[f"up{i}"] = {
            "deconv": he(rng, (c, c_out, 4, 4), c * 4, dtype),
            "conv": conv_bn_params(rng, c_out, c_out, 3, dtype),
        }
        c = c_out
    p["out"] = conv_bias_params(rng, c, 1, 1, dtype)
    return p


def pf_forward(f2d: Tensor, f3d: Tensor, params: Mapping, cfg: ModelConfig) -> Tensor:
    """Progressive fusion: three (deconv x2 -> conv3x3 -> ReLU) steps, then 1x1 conv and sigmoid."""
    if f2d.shape != f3d.shape:
        raise ShapeError(f"pf_forward shape mismatch: {f2d.shape} vs {f3d.shape}")
    x = ad.concat_channels([f2d, f3d])
    for i in range(3):
        p = params[f"up{i}"]
        x = ad.transposed_conv2d(x, p["deconv"], stride=2, pad=1)
        x = ad.relu(conv_bn(x, p["conv"], pad=1))
    out = ad.sigmoid(conv_bias(x, params["out"]))
    if out.shape[1:] != (cfg.input_size, cfg.input_size):
        raise ShapeError(f"decoder produced {out.shape}; inputs must be at stride 8")
    return out


# -- whole model -------------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    w = cfg.widths()
    p: dict = {"enc_aif": init_encoder(rng, cfg)}
    if cfg.uses_3d:
        p["enc_fs"] = init_encoder(rng, cfg, 3, volumetric=True)
    else:
        p["enc_fs"] = init_encoder(rng, cfg, 3 * cfg.T)
    if cfg.uses_rfb:
        for branch in ("aif", "fs"):
            p[f"rfb_{branch}"] = {f"level{l}": init_rfb(rng, w[l - 1], cfg.c_rfb, dt) for l in DECODER_LEVELS}
    if not cfg.uses_sa:
        per_level = [cfg.c_rfb] * 3 if cfg.uses_rfb else [w[l - 1] for l in DECODER_LEVELS]
        p["head"] = init_head(rng, 2 * sum(per_level), dt)
        return p
    p["sa1"] = init_sa_stage(rng, cfg.c_rfb, cfg.reduction, cfg.uses_coa, dt)
    p["sa2"] = init_sa_stage(rng, cfg.c_rfb, cfg.reduction, cfg.uses_coa, dt)
    if not cfg.uses_pf or cfg.deep_supervision:
        p["head2"] = init_head(rng, 2 * cfg.c_rfb, dt)
    if cfg.deep_supervision:
        p["head1"] = init_head(rng, 2 * cfg.c_rfb, dt)
    if cfg.uses_pf:
        p["decoder"] = init_decoder_block(rng, 2 * cfg.c_rfb, dt)
    if cfg.uses_aa:
        p["aa"] = init_aif_attention(rng, cfg.c_rfb, cfg.reduction, dt)
    return p


def parameter_count(cfg: ModelConfig) -> int:
    return count(init_params(cfg))


def _concat_head(pyr2d: list[Tensor], pyr3d: list[Tensor], params: Mapping, cfg: ModelConfig) -> Tensor:
    size = pyr2d[0].shape[1:]
    maps = [ad.upsample_to(f, *size, mode=cfg.upsample_mode) for f in pyr2d + pyr3d]
    logits = conv_bias(ad.concat_channels(maps), params)
    return _to_input_size(ad.sigmoid(logits), cfg)


def forward(aif: Tensor, stack: Tensor, params: Mapping, cfg: ModelConfig) -> Prediction:
    """Run the configured pipeline on one sample."""
    pyr2d = encode_aif(aif, params["enc_aif"], cfg)
    if cfg.uses_3d:
        pyr3d = encode_fs(stack, params["enc_fs"], cfg)
    else:
        pyr3d = encode_fs_flat(stack, params["enc_fs"], cfg)
    f2d = {l: pyr2d[l] for l in DECODER_LEVELS}
    f3d = {l: pyr3d[l] for l in DECODER_LEVELS}
    if cfg.uses_rfb:
        f2d = {l: rfb_block(f, params["rfb_aif"][f"level{l}"]) for l, f in f2d.items()}
        f3d = {l: rfb_block(f, params["rfb_fs"][f"level{l}"]) for l, f in f3d.items()}
    if not cfg.uses_sa:
        order = list(DECODER_LEVELS)
        return Prediction([_concat_head([f2d[l] for l in order], [f3d[l] for l in order], params["head"], cfg)])

    mode, coa = cfg.upsample_mode, cfg.uses_coa
    s1_2d, s1_3d, _ = sa_stage((f2d[3], f2d[4]), (f3d[3], f3d[4]), params["sa1"], mode, coa)
    s2_2d, s2_3d, _ = sa_stage((f2d[2], s1_2d), (f3d[2], s1_3d), params["sa2"], mode, coa)
    if not cfg.uses_pf:
        return Prediction([prediction_head(s2_2d, s2_3d, params["head2"], cfg)])
    maps = []
    if cfg.deep_supervision:
        maps.append(prediction_head(s1_2d, s1_3d, params["head1"], cfg))
        maps.append(prediction_head(s2_2d, s2_3d, params["head2"], cfg))
    if cfg.uses_aa:
        s2_2d, s2_3d = aif_induced_attention(s2_2d, s2_3d, params["aa"])
    maps.append(pf_forward(s2_2d, s2_3d, params["decoder"], cfg))
    return Prediction(maps)
