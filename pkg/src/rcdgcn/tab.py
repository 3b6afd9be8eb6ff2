"""Traffic Attention Block.

Pairwise propagation scores are multinomial-logit style linear utilities of
the source and destination node's traffic state and capacity features::

    e[i, j] = u_src(i) + u_dst(j)
    u_src(i) = x_i . w_state_src + z_i . w_feat_src      (same for dst)

and attention rows are a softmax of ``e`` restricted to a neighbourhood mask.
With ``embed_dim > 1`` each weight block maps to an embedding and a shared
projection vector collapses it to a scalar; ``embed_dim == 1`` is the plain
scalar utility with no projection.

Because the softmax runs along ``j``, ``u_src(i)`` is constant within row
``i`` and drops out of the attention values. The source weights are kept
for parity with the utility form; their gradient is identically zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor

ATTENTION_MODES = ("ring", "shared")


@dataclass
class TabParams:
    w_state_src: Tensor  # [P, d_e]
    w_feat_src: Tensor | None  # [L', d_e]
    w_state_dst: Tensor
    w_feat_dst: Tensor | None
    proj: Tensor | None = None  # [d_e, 1], only when d_e > 1

    def __post_init__(self):
        d = self.w_state_src.shape[1]
        if (d > 1) != (self.proj is not None):
            raise DimensionError(f"TAB embedding width {d} needs {'a' if d > 1 else 'no'} projection vector")

    @property
    def embed_dim(self) -> int:
        return self.w_state_src.shape[1]


@dataclass
class AttentionMatrix:
    values: np.ndarray  # [N, N]
    mask: np.ndarray  # bool [N, N]


def _utility(x: Tensor, z: Tensor | None, w_state: Tensor, w_feat: Tensor | None,
             proj: Tensor | None) -> Tensor:
    if x.shape[-1] != w_state.shape[0]:
        raise DimensionError(f"state channels {x.shape[-1]} != TAB state weights {w_state.shape[0]}")
    u = tn.linear(x, w_state)
    if w_feat is not None:
        if z is None or z.shape[-1] != w_feat.shape[0]:
            got = None if z is None else z.shape[-1]
            raise DimensionError(f"feature channels {got} != TAB feature weights {w_feat.shape[0]}")
        u = tn.add(u, tn.linear(z, w_feat))
    elif z is not None and z.shape[-1] != 0:
        raise DimensionError("TAB has no feature weights but features were given")
    if proj is not None:
        u = tn.linear(u, proj)
    return tn.reshape(u, u.shape[:-1])


def utility_scores(x_t, z_t, params: TabParams) -> Tensor:
    """Scores ``e[..., i, j]`` from states ``[..., N, P]`` and features ``[..., N, L']``.

    Masking is not applied here; :func:`attention_matrix` excludes masked
    entries before exponentiation.
    """
    x_t = tn._as_tensor(x_t)
    z_t = None if z_t is None else tn._as_tensor(z_t)
    if z_t is not None and z_t.shape[-1] == 0:
        z_t = None
    u_src = _utility(x_t, z_t, params.w_state_src, params.w_feat_src, params.proj)
    u_dst = _utility(x_t, z_t, params.w_state_dst, params.w_feat_dst, params.proj)
    return tn.outer_add(u_src, u_dst)


def attention_matrix(e: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise masked softmax; rows with an empty mask are all zero."""
    return tn.softmax_masked(e, mask, allow_empty_rows=True)


def ring_attention(e: Tensor, rings: np.ndarray, mode: str = "ring") -> list[Tensor]:
    """One attention matrix per hop ring from shared scores ``e``.

    ``ring``: each ring is normalized separately, so every non-empty row of
    every matrix sums to one. ``shared``: one softmax over the union of the
    rings, then split by ring (rows of the sum are stochastic).
    """
    if mode == "ring":
        return [attention_matrix(e, r) for r in rings]
    if mode == "shared":
        alpha = attention_matrix(e, rings.any(axis=0))
        return [tn.mul(alpha, Tensor._wrap(np.broadcast_to(r, alpha.shape).astype(np.float64)))
                for r in rings]
    raise ValueError(f"attention mode must be one of {ATTENTION_MODES}")


def fixed_attention(rings: np.ndarray, lead_shape: tuple[int, ...], mode: str = "ring") -> list[Tensor]:
    """Uniform propagation over the rings (the attention of all-equal scores)."""
    n = rings.shape[-1]
    with tn.no_grad():
        zeros = Tensor._wrap(np.zeros(tuple(lead_shape) + (n, n)))
        return ring_attention(zeros, rings, mode)


def tab_forward(window_x, window_z, params: TabParams, rings: np.ndarray,
                mode: str = "ring") -> list[Tensor]:
    """Attention matrices for hop orders ``0..len(rings)-1``."""
    e = utility_scores(window_x, window_z, params)
    return ring_attention(e, rings, mode)


def to_attention_matrices(atts: list[Tensor], rings: np.ndarray, mode: str = "ring") -> list[AttentionMatrix]:
    """Detach single-window attention tensors into :class:`AttentionMatrix` records."""
    union = rings.any(axis=0)
    return [AttentionMatrix(a.data.copy(), r if mode == "ring" else union) for a, r in zip(atts, rings)]
