"""Self-correction: adapter attention replaced by backbone self-similarity."""

from __future__ import annotations

import numpy as np

from .backend import EncoderBackend, PatchGrid, Source
from .errors import InputContractError
from .kernels import softmax_rows


def self_similarity_attention(v: PatchGrid) -> np.ndarray:
    """Row-wise ``softmax(V V^T / sqrt(d))`` over backbone tokens (full width ``d``)."""
    if v.dim == 0:
        raise InputContractError("token dimension is zero")
    t = v.tokens.astype(np.float64)
    return softmax_rows(t @ t.T / np.sqrt(v.dim))


def corrected_adapter_forward(v: PatchGrid, backend: EncoderBackend, enabled: bool = True) -> PatchGrid:
    """Adapter output with both blocks driven by the same self-similarity matrix.

    ``enabled=False`` returns the native adapter forward (the uncorrected baseline).
    """
    if v.source is not Source.BACKBONE:
        raise InputContractError("self-correction expects backbone tokens")
    if not enabled:
        return backend.adapter_forward(v)
    attn = self_similarity_attention(v)
    return backend.adapter_forward(v, [attn] * backend.adapter_blocks)
