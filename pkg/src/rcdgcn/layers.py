"""Gated causal dilated temporal convolution and attention graph convolution."""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as tn
from .tensor import DimensionError, Tensor


@dataclass
class TcnLayerParams:
    w1: Tensor  # [taps, C_in, C_out], tanh branch
    w2: Tensor  # [taps, C_in, C_out], sigmoid gate
    dilation: int = 1

    def __post_init__(self):
        if self.w1.shape != self.w2.shape or self.w1.ndim != 3:
            raise DimensionError(f"filter shapes {self.w1.shape} / {self.w2.shape}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")


@dataclass
class GcnLayerParams:
    w: Tensor  # [hops + 1, C_in, C_out]


def causal_dilated_conv(x: Tensor, f: Tensor, dilation: int, time_axis: int = 0) -> Tensor:
    """``y(t) = sum_i f[i] x(t - d*i)`` with zeros before the first step.

    ``x`` has channels last; ``f`` is ``[taps, C_in, C_out]``. Output keeps
    the input length.
    """
    if f.ndim != 3 or x.shape[-1] != f.shape[1]:
        raise DimensionError(f"conv: input {x.shape} incompatible with kernel {f.shape}")
    time_axis = time_axis % x.ndim
    y = None
    for i in range(f.shape[0]):
        lag = dilation * i
        if lag >= x.shape[time_axis]:
            break
        term = tn.linear(tn.shift(x, lag, time_axis), f[i])
        y = term if y is None else tn.add(y, term)
    return y


def gated_tcn(x: Tensor, p: TcnLayerParams, time_axis: int = 0) -> Tensor:
    """``tanh(conv_w1(x)) * sigmoid(conv_w2(x))``."""
    c = p.w1.shape[2]
    both = causal_dilated_conv(x, tn.concat([p.w1, p.w2], axis=2), p.dilation, time_axis)
    return tn.mul(tn.tanh(both[..., :c]), tn.sigmoid(both[..., c:]))


def _propagate(att_cat: Tensor, h: Tensor, hops: int) -> Tensor:
    """``sum_g att_g @ h_g`` with ``h`` holding all hop outputs on its last axis."""
    n = att_cat.shape[-2]
    c = h.shape[-1] // hops
    if att_cat.ndim == h.ndim:
        # attention per leading index: h [..., N, G*C] -> [..., G*N, C]
        lead = h.shape[:-2]
        hg = tn.reshape(h, lead + (n, hops, c))
        hg = tn.transpose(hg, tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2))
        hg = tn.reshape(hg, lead + (hops * n, c))
        return tn.bmm(att_cat, hg)
    if att_cat.ndim == h.ndim - 1:
        # attention shared across the axis just before N: h [..., S, N, G*C]
        lead = h.shape[:-3]
        s = h.shape[-3]
        k = len(lead)
        hg = tn.reshape(h, lead + (s, n, hops, c))
        hg = tn.transpose(hg, tuple(range(k)) + (k + 2, k + 1, k, k + 3))  # [..., G, N, S, C]
        hg = tn.reshape(hg, lead + (hops * n, s * c))
        out = tn.reshape(tn.bmm(att_cat, hg), lead + (n, s, c))
        return tn.transpose(out, tuple(range(k)) + (k + 1, k, k + 2))
    raise DimensionError(f"attention {att_cat.shape} incompatible with input {h.shape}")


def graph_conv(x: Tensor, att: list[Tensor], p: GcnLayerParams, activation: str = "relu") -> Tensor:
    """``act(sum_g att[g] @ x @ W[g])``.

    ``x`` is ``[..., N, C_in]``. Each attention matrix is either ``[..., N, N]``
    with the same leading shape as ``x``, or has one leading axis fewer and is
    then shared across ``x``'s axis preceding ``N`` (time).
    """
    hops, c_in, c_out = p.w.shape
    if len(att) != hops:
        raise DimensionError(f"{len(att)} attention matrices for {hops} hop weights")
    if x.shape[-1] != c_in:
        raise DimensionError(f"graph_conv: input channels {x.shape[-1]} != {c_in}")
    x = tn._as_tensor(x)
    w_cat = tn.reshape(tn.transpose(p.w, (1, 0, 2)), (c_in, hops * c_out))
    h = tn.linear(x, w_cat)
    att_cat = att[0] if hops == 1 else tn.concat(att, axis=-1)
    out = _propagate(att_cat, h, hops)
    if activation == "relu":
        return tn.relu(out)
    if activation == "identity":
        return out
    raise ValueError(f"unknown activation {activation!r}")
