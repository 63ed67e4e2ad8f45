"""Spatio-temporal attention variants over video tokens.

Token tensors are ``[B, m, N, d_model]`` (a leading batch axis is optional):
``m`` frames with ``N`` spatial tokens each.  Every variant projects with a
single :class:`ProjectionSet` shared by all frames and finishes with the
output projection ``w_out``.

Causal variants are written so that the arithmetic for frame ``i`` never
touches frames after ``i``.  Appending frames therefore leaves earlier
outputs bitwise unchanged, which the long-video extension depends on.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .functional import softmax_lastdim
from .nn import Module, init_weight
from .tensor import Parameter, Tensor, as_tensor, broadcast_to, concat


class AttentionKind(str, enum.Enum):
    FRAME_INDIVIDUAL = "frame_individual"
    FULL = "full"
    CAUSAL = "causal"
    SPARSE_CAUSAL = "sparse_causal"
    CROSS = "cross"
    TEMPORAL_CAUSAL = "temporal_causal"

    @classmethod
    def parse(cls, kind) -> "AttentionKind":
        if isinstance(kind, cls):
            return kind
        try:
            return cls(str(kind).lower().replace("-", "_"))
        except ValueError:
            raise ContractError(f"unknown attention kind {kind!r}") from None


@dataclass
class DotProductCounter:
    """Number of query-key scalar products computed, per forward call."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


class ProjectionSet(Module):
    """Query/key/value/output projections of one attention layer.

    ``w_q`` is ``[d_model, d]``, ``w_k``/``w_v`` are ``[d_kv, d]`` (``d_kv``
    differs from ``d_model`` only for cross-attention) and ``w_out`` is
    ``[d, d_model]``.
    """

    MATRICES = ("w_q", "w_k", "w_v", "w_out")

    def __init__(self, w_q, w_k, w_v, w_out, heads: int = 1, tags=None):
        tags = tags or {}
        self.w_q = _param(w_q, tags.get("w_q"))
        self.w_k = _param(w_k, tags.get("w_k"))
        self.w_v = _param(w_v, tags.get("w_v"))
        self.w_out = _param(w_out, tags.get("w_out"))
        d = self.w_q.shape[1]
        if self.w_k.shape[1] != d or self.w_v.shape[1] != d or self.w_out.shape[0] != d:
            raise DimensionError(
                "projection matrices must share inner dimension d: "
                f"q{self.w_q.shape} k{self.w_k.shape} v{self.w_v.shape} out{self.w_out.shape}"
            )
        if d % heads:
            raise DimensionError(f"d={d} is not divisible by heads={heads}")
        self._heads = heads
        self._trainable = {name: True for name in self.MATRICES}

    @classmethod
    def init(
        cls,
        d_model: int,
        d: int | None = None,
        rng: np.random.Generator | None = None,
        d_kv: int | None = None,
        heads: int = 1,
        zero_out: bool = False,
        tags=None,
    ) -> "ProjectionSet":
        rng = rng if rng is not None else np.random.default_rng(0)
        d = d or d_model
        d_kv = d_kv or d_model
        w_out = np.zeros((d, d_model)) if zero_out else init_weight(rng, d, (d, d_model))
        return cls(
            init_weight(rng, d_model, (d_model, d)),
            init_weight(rng, d_kv, (d_kv, d)),
            init_weight(rng, d_kv, (d_kv, d)),
            w_out,
            heads=heads,
            tags=tags,
        )

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @property
    def trainable(self) -> dict[str, bool]:
        return dict(self._trainable)

    def set_trainable(self, **flags: bool) -> None:
        for name, flag in flags.items():
            if name not in self._trainable:
                raise KeyError(name)
            self._trainable[name] = bool(flag)


def _param(w, tag) -> Parameter:
    if isinstance(w, Parameter):
        if tag is not None:
            w.tag = tag
        return w
    return Parameter(np.array(as_tensor(w).data, dtype=np.float64), tag=tag)


# ---------------------------------------------------------------------------
# core attention


def scaled_dot_attention(q, k, v, mask=None, counter: DotProductCounter | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes.

    ``mask`` (True = attend) broadcasts against ``[..., Lq, Lk]``.  A row
    with no allowed key raises :class:`ContractError`.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d < 1:
        raise DimensionError("attention feature dimension must be >= 1")
    if k.shape[-1] != d:
        raise DimensionError(f"query/key feature mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    scores = (q @ k.mT) * (1.0 / np.sqrt(d))
    if counter is not None:
        counter.add(int(np.prod(scores.shape)))
    weights = softmax_lastdim(scores, mask)
    return weights @ v


def _batched(frames) -> tuple[Tensor, bool]:
    frames = as_tensor(frames)
    if frames.ndim == 3:
        return frames.reshape((1,) + frames.shape), True
    if frames.ndim != 4:
        raise DimensionError(f"expected frames [B, m, N, d_model] or [m, N, d_model], got {frames.shape}")
    return frames, False


def _heads_split(x: Tensor, heads: int) -> Tensor:
    # [..., L, d] -> [..., h, L, d/h]
    *lead, L, d = x.shape
    x = x.reshape(tuple(lead) + (L, heads, d // heads))
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return x.transpose(axes)


def _heads_merge(x: Tensor) -> Tensor:
    # [..., h, L, dh] -> [..., L, h*dh]
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = x.transpose(axes)
    *lead, L, h, dh = x.shape
    return x.reshape(tuple(lead) + (L, h * dh))


def _project(x: Tensor, w: Tensor, heads: int) -> Tensor:
    return _heads_split(x @ w, heads)


def _finish(out: Tensor, proj: ProjectionSet, squeeze: bool) -> Tensor:
    out = _heads_merge(out) @ proj.w_out
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out


def _check_dmodel(frames: Tensor, proj: ProjectionSet) -> None:
    if frames.shape[-1] != proj.w_q.shape[0]:
        raise DimensionError(
            f"token width {frames.shape[-1]} does not match projection input {proj.w_q.shape[0]}"
        )


# ---------------------------------------------------------------------------
# variants


def frame_individual_attention(frames, proj: ProjectionSet, counter=None) -> Tensor:
    """Spatial self-attention of every frame with itself only."""
    x, squeeze = _batched(frames)
    _check_dmodel(x, proj)
    h = proj.heads
    q, k, v = _project(x, proj.w_q, h), _project(x, proj.w_k, h), _project(x, proj.w_v, h)
    return _finish(scaled_dot_attention(q, k, v, counter=counter), proj, squeeze)


def sparse_causal_attention(frames, proj: ProjectionSet, counter=None) -> Tensor:
    """Frame ``i > 1`` attends to the concatenated bank ``[v_1; v_{i-1}]``.

    Frame 1 attends only to itself.  The bank keeps duplicate keys when
    ``i = 2``.
    """
    x, squeeze = _batched(frames)
    _check_dmodel(x, proj)
    b, m = x.shape[:2]
    h = proj.heads
    q, k, v = _project(x, proj.w_q, h), _project(x, proj.w_k, h), _project(x, proj.w_v, h)
    # q, k, v: [B, m, h, N, dh]
    first = scaled_dot_attention(q[:, :1], k[:, :1], v[:, :1], counter=counter)
    if m == 1:
        return _finish(first, proj, squeeze)
    rest_shape = (b, m - 1) + k.shape[2:]
    bank_k = concat([broadcast_to(k[:, :1], rest_shape), k[:, : m - 1]], axis=-2)
    bank_v = concat([broadcast_to(v[:, :1], rest_shape), v[:, : m - 1]], axis=-2)
    rest = scaled_dot_attention(q[:, 1:], bank_k, bank_v, counter=counter)
    return _finish(concat([first, rest], axis=1), proj, squeeze)


def full_st_attention(frames, proj: ProjectionSet, counter=None) -> Tensor:
    """Every token attends to all ``m * N`` tokens of the clip."""
    x, squeeze = _batched(frames)
    _check_dmodel(x, proj)
    b, m, n, dm = x.shape
    flat = x.reshape(b, 1, m * n, dm)
    h = proj.heads
    q, k, v = _project(flat, proj.w_q, h), _project(flat, proj.w_k, h), _project(flat, proj.w_v, h)
    out = scaled_dot_attention(q, k, v, counter=counter)  # [B, 1, h, mN, dh]
    out = _heads_merge(out) @ proj.w_out
    out = out.reshape(b, m, n, dm)
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out


def causal_st_attention(frames, proj: ProjectionSet, counter=None) -> Tensor:
    """Frame ``i`` attends to every token of frames ``1..i``."""
    x, squeeze = _batched(frames)
    _check_dmodel(x, proj)
    b, m, n, _ = x.shape
    h = proj.heads
    q, k, v = _project(x, proj.w_q, h), _project(x, proj.w_k, h), _project(x, proj.w_v, h)
    dh = q.shape[-1]
    outs = []
    for i in range(m):
        # bank: tokens of frames 0..i, laid out [B, h, (i+1)N, dh]
        bk = k[:, : i + 1].transpose(0, 2, 1, 3, 4).reshape(b, h, (i + 1) * n, dh)
        bv = v[:, : i + 1].transpose(0, 2, 1, 3, 4).reshape(b, h, (i + 1) * n, dh)
        outs.append(scaled_dot_attention(q[:, i], bk, bv, counter=counter))
    out = concat([o.reshape(b, 1, h, n, dh) for o in outs], axis=1)
    return _finish(out, proj, squeeze)


def cross_attention(frames, cond, proj: ProjectionSet, cond_mask=None, counter=None) -> Tensor:
    """Queries from frame tokens, keys/values from conditioning tokens.

    ``cond`` is ``[Lc, d_cond]`` or ``[B, Lc, d_cond]``; the same conditioning
    applies to every frame.  ``cond_mask`` (True = real token) excludes
    padding.
    """
    x, squeeze = _batched(frames)
    _check_dmodel(x, proj)
    cond = as_tensor(cond)
    if cond.ndim == 2:
        cond = cond.reshape((1,) + cond.shape)
    if cond.shape[-2] < 1:
        raise ContractError("cross-attention needs at least one conditioning token")
    if cond.shape[-1] != proj.w_k.shape[0]:
        raise DimensionError(f"conditioning width {cond.shape[-1]} does not match w_k {proj.w_k.shape}")
    h = proj.heads
    q = _project(x, proj.w_q, h)  # [B, m, h, N, dh]
    c = cond.reshape((cond.shape[0], 1) + cond.shape[1:])  # [B, 1, Lc, dc]
    k, v = _project(c, proj.w_k, h), _project(c, proj.w_v, h)  # [B, 1, h, Lc, dh]
    mask = None
    if cond_mask is not None:
        cm = np.asarray(cond_mask, dtype=bool)
        if cm.ndim == 1:
            cm = cm[None]
        mask = cm[:, None, None, None, :]
    out = scaled_dot_attention(q, k, v, mask=mask, counter=counter)
    return _finish(out, proj, squeeze)


def temporal_self_attention(frames, proj: ProjectionSet, pos_emb=None, counter=None) -> Tensor:
    """Per-location attention across time with an inclusive causal mask.

    For each spatial position the ``m`` frames form a sequence; frame ``i``
    attends to frames ``1..i`` at the same position.  ``pos_emb``
    (``[m_max, d_model]``) is added to the input before projection.
    """
    x, squeeze = _batched(frames)
    _check_dmodel(x, proj)
    b, m, n, dm = x.shape
    if pos_emb is not None:
        pos_emb = as_tensor(pos_emb)
        if m > pos_emb.shape[0]:
            raise DimensionError(f"{m} frames exceed the {pos_emb.shape[0]} temporal positions")
        x = x + pos_emb[:m].reshape(1, m, 1, dm)
    seq = x.transpose(0, 2, 1, 3)  # [B, N, m, d_model]
    h = proj.heads
    q, k, v = _project(seq, proj.w_q, h), _project(seq, proj.w_k, h), _project(seq, proj.w_v, h)
    # [B, N, h, m, dh]
    outs = [
        scaled_dot_attention(q[..., i : i + 1, :], k[..., : i + 1, :], v[..., : i + 1, :], counter=counter)
        for i in range(m)
    ]
    out = _heads_merge(concat(outs, axis=-2)) @ proj.w_out  # [B, N, m, d_model]
    out = out.transpose(0, 2, 1, 3)
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out


SELF_ATTENTION = {
    AttentionKind.FRAME_INDIVIDUAL: frame_individual_attention,
    AttentionKind.SPARSE_CAUSAL: sparse_causal_attention,
    AttentionKind.FULL: full_st_attention,
    AttentionKind.CAUSAL: causal_st_attention,
}


def self_attention(kind, frames, proj: ProjectionSet, counter=None) -> Tensor:
    kind = AttentionKind.parse(kind)
    if kind not in SELF_ATTENTION:
        raise ContractError(f"{kind.value} is not a spatial self-attention variant")
    return SELF_ATTENTION[kind](frames, proj, counter=counter)


def count_dot_products(kind, m: int, N: int, Lc: int | None = None) -> int:
    """Closed-form query-key pair count of one single-head forward call."""
    kind = AttentionKind.parse(kind)
    if m < 1 or N < 1:
        raise ContractError(f"m and N must be >= 1, got m={m}, N={N}")
    if kind is AttentionKind.FULL:
        return (m * N) ** 2
    if kind is AttentionKind.CAUSAL:
        return N * N * m * (m + 1) // 2
    if kind is AttentionKind.SPARSE_CAUSAL:
        return N * N * (2 * m - 1)
    if kind is AttentionKind.FRAME_INDIVIDUAL:
        return m * N * N
    if kind is AttentionKind.TEMPORAL_CAUSAL:
        return N * m * (m + 1) // 2
    if kind is AttentionKind.CROSS:
        if Lc is None:
            raise ContractError("cross-attention count needs the conditioning length Lc")
        return m * N * Lc
    raise ContractError(f"unknown attention kind {kind!r}")
