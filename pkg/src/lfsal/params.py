"""Parameter trees: nested dicts of leaf tensors, addressed by dotted names."""

from __future__ import annotations

from typing import Iterator, Mapping, MutableMapping

import numpy as np

from .autodiff import Tensor, channel_affine, conv2d, conv3d

ParamTree = MutableMapping[str, object]


def leaf(arr: np.ndarray, dtype=np.float64) -> Tensor:
    return Tensor(arr, requires_grad=True, dtype=dtype)


def he(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> Tensor:
    return leaf(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), dtype)


def conv_bn_params(rng, c_in: int, c_out: int, k: int | tuple = 3, dtype=np.float64) -> dict:
    """Convolution kernel plus per-channel affine (stands in for batch norm)."""
    ks = (k, k) if isinstance(k, int) else tuple(k)
    fan_in = c_in * int(np.prod(ks))
    return {
        "w": he(rng, (c_out, c_in) + ks, fan_in, dtype),
        "scale": leaf(np.ones(c_out), dtype),
        "shift": leaf(np.zeros(c_out), dtype),
    }


def conv_bias_params(rng, c_in: int, c_out: int, k: int = 1, dtype=np.float64, std: float | None = None) -> dict:
    fan_in = c_in * k * k
    std = np.sqrt(1.0 / fan_in) if std is None else std
    return {
        "w": leaf(rng.standard_normal((c_out, c_in, k, k)) * std, dtype),
        "b": leaf(np.zeros(c_out), dtype),
    }


def fc_params(rng, c_in: int, c_out: int, dtype=np.float64) -> dict:
    return {
        "w": leaf(rng.standard_normal((c_out, c_in)) * np.sqrt(1.0 / c_in), dtype),
        "b": leaf(np.zeros(c_out), dtype),
    }


def conv_bn(x: Tensor, p: Mapping, stride=1, pad=0, dilation: int = 1) -> Tensor:
    if x.data.ndim == 4:
        y = conv3d(x, p["w"], strides=stride, pads=pad)
    else:
        y = conv2d(x, p["w"], stride=stride, pad=pad, dilation=dilation)
    return channel_affine(y, p["scale"], p["shift"])


def conv_bias(x: Tensor, p: Mapping, pad: int = 0) -> Tensor:
    y = conv2d(x, p["w"], pad=pad)
    ones = Tensor(np.ones(y.shape[0]), dtype=y.dtype)
    return channel_affine(y, ones, p["b"])


def named_parameters(tree: Mapping, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` in sorted key order."""
    for key in sorted(tree):
        value = tree[key]
        name = f"{prefix}{key}"
        if isinstance(value, Tensor):
            yield name, value
        else:
            yield from named_parameters(value, name + ".")


def flatten(tree: Mapping) -> dict[str, Tensor]:
    flat = {}
    for name, t in named_parameters(tree):
        if name in flat or any(t is other for other in flat.values()):
            raise ValueError(f"parameter {name!r} registered more than once")
        flat[name] = t
    return flat


def count(tree: Mapping) -> int:
    return sum(t.size for _, t in named_parameters(tree))


def zero_(tree: Mapping, *keys: str) -> None:
    """Zero the named leaves (``w``, ``b`` ...) anywhere in ``tree``."""
    for name, t in named_parameters(tree):
        if name.rsplit(".", 1)[-1] in keys:
            t.data[...] = 0.0
