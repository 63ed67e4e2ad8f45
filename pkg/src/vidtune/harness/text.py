"""Closed-vocabulary prompt encoder: a learned embedding row per word."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import VocabularyError
from ..functional import take_rows
from ..nn import Module
from ..tensor import Parameter, Tensor, concat
from ..unet import ParamGroupTag

PAD = "<pad>"
VOCABULARY: tuple[str, ...] = (
    PAD,
    # colors
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black", "gray",
    "pink", "brown", "cyan",
    # shapes
    "square", "circle", "triangle", "star",
    # motion
    "moving", "right", "left", "up", "down", "still", "slowly", "quickly",
    # layout and filler
    "on", "in", "a", "the", "with", "and", "background", "small", "big",
    "bright", "dark", "over", "across", "field", "scene",
)
MAX_TOKENS = 8


@dataclass
class PromptEmbedding:
    ids: np.ndarray  # [max_len], PAD-filled
    rows: np.ndarray | Tensor  # [max_len, d_cond]
    mask: np.ndarray  # [max_len] bool, True for real tokens

    @property
    def is_null(self) -> bool:
        return not (self.ids != 0).any()


def token_ids(tokens, vocabulary=VOCABULARY) -> list[int]:
    index = {w: i for i, w in enumerate(vocabulary)}
    unknown = [t for t in tokens if t not in index or t == PAD]
    if unknown:
        raise VocabularyError(unknown)
    return [index[t] for t in tokens]


def encode_prompt(tokens, table, max_len: int = MAX_TOKENS, vocabulary=VOCABULARY) -> PromptEmbedding:
    """Look up embedding rows for ``tokens``, padded to ``max_len``.

    The empty prompt is the null embedding: all-zero rows with every
    position visible, which makes cross-attention contribute exactly zero.
    ``table`` may be a Parameter, in which case ``rows`` is a tape-tracked
    tensor.
    """
    if isinstance(tokens, str):
        tokens = tokens.split()
    tokens = list(tokens)
    ids = token_ids(tokens, vocabulary)
    if len(ids) > max_len:
        raise VocabularyError([f"<{len(ids)} tokens exceed max length {max_len}>"])
    width = table.shape[1]
    if not ids:
        return PromptEmbedding(np.zeros(max_len, np.int64), np.zeros((max_len, width)), np.ones(max_len, bool))
    padded = np.array(ids + [0] * (max_len - len(ids)), dtype=np.int64)
    mask = padded != 0
    if isinstance(table, Tensor):
        rows = take_rows(table, padded)
    else:
        rows = np.asarray(table, dtype=np.float64)[padded]
    return PromptEmbedding(padded, rows, mask)


class TextEncoder(Module):
    """Owns the embedding table; trained with the 2D model, frozen afterwards."""

    def __init__(self, d_cond: int, seed: int = 0, vocabulary=VOCABULARY, max_len: int = MAX_TOKENS):
        rng = np.random.default_rng([seed, 7])
        self._vocabulary = tuple(vocabulary)
        self._max_len = max_len
        self.table = Parameter(rng.standard_normal((len(vocabulary), d_cond)), ParamGroupTag.BACKBONE_FROZEN)

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return self._vocabulary

    def __call__(self, tokens) -> PromptEmbedding:
        return encode_prompt(tokens, self.table, self._max_len, self._vocabulary)

    def encode(self, tokens) -> PromptEmbedding:
        """Plain-array embedding (no tape tracking)."""
        return encode_prompt(tokens, self.table.data, self._max_len, self._vocabulary)

    def batch(self, captions) -> tuple[Tensor, np.ndarray]:
        """Stacked tracked rows ``[B, L, d]`` and masks ``[B, L]`` for a caption batch."""
        embs = [self(c) for c in captions]
        rows = concat([e.rows.reshape((1,) + e.rows.shape) if isinstance(e.rows, Tensor)
                       else Tensor(e.rows[None]) for e in embs], axis=0)
        return rows, np.stack([e.mask for e in embs])
