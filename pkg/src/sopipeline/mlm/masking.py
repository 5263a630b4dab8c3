"""MLM masking: Bernoulli position selection with the 80/10/10 action split."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..bpe import MASK_ID, N_SPECIALS, PAD_ID
from ..errors import TrainingError, UsageError

IGNORE_LABEL = -100


@dataclass
class MaskedBatch:
    input_ids: np.ndarray  # [B, T] int64
    attn_mask: np.ndarray  # [B, T] 1 = real token, 0 = padding
    labels: np.ndarray  # [B, T] original ids at masked positions, else IGNORE_LABEL
    mask_rate: float


def mask_sequence(
    ids: Sequence[int],
    rate: float,
    rng: np.random.Generator,
    special_ids: frozenset[int] | set[int] = frozenset(range(N_SPECIALS)),
    *,
    vocab_size: int,
    mask_id: int = MASK_ID,
    keep_split: tuple[float, float] = (0.8, 0.9),
) -> tuple[np.ndarray, np.ndarray]:
    """Mask one sequence; returns (input_ids, labels).

    Every non-special position is selected independently with probability
    ``rate``. Selected positions become the mask token with p=0.8, a random
    non-special token with p=0.1, and stay unchanged otherwise; labels hold
    the original ids exactly at selected positions.
    """
    if not 0 < rate < 1:
        raise UsageError(f"mask rate must lie strictly between 0 and 1, got {rate}")
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size == 0:
        raise UsageError("cannot mask an empty sequence")
    special = np.isin(arr, np.fromiter(special_ids, dtype=np.int64))
    if special.all():
        raise TrainingError("sequence consists only of special tokens; nothing to mask")

    selected = (rng.random(arr.size) < rate) & ~special
    labels = np.full(arr.size, IGNORE_LABEL, dtype=np.int64)
    labels[selected] = arr[selected]

    out = arr.copy()
    action = rng.random(arr.size)
    replace_mask = selected & (action < keep_split[0])
    replace_random = selected & (action >= keep_split[0]) & (action < keep_split[1])
    out[replace_mask] = mask_id
    if replace_random.any():
        out[replace_random] = rng.integers(N_SPECIALS, vocab_size, size=int(replace_random.sum()))
    return out, labels


def make_masked_batch(
    sequences: Sequence[Sequence[int]],
    rate: float,
    *,
    vocab_size: int,
    seq_len: Optional[int] = None,
    seed: int = 0,
    base_index: int = 0,
    indices: Optional[Sequence[int]] = None,
    special_ids: frozenset[int] = frozenset(range(N_SPECIALS)),
) -> MaskedBatch:
    """Mask + pad a batch of sequences to a rectangle.

    Each sequence's randomness is keyed by (seed, its stream index) --
    ``base_index + i`` or an explicit ``indices[i]`` -- so the same stream
    of sequences produces the same masks no matter how it is split into
    micro-batches.
    """
    if not sequences:
        raise UsageError("empty batch")
    if indices is not None and len(indices) != len(sequences):
        raise UsageError("indices must align with sequences")
    T = seq_len or max(len(s) for s in sequences)
    B = len(sequences)
    input_ids = np.full((B, T), PAD_ID, dtype=np.int64)
    attn_mask = np.zeros((B, T), dtype=np.int64)
    labels = np.full((B, T), IGNORE_LABEL, dtype=np.int64)
    for i, seq in enumerate(sequences):
        seq = list(seq)[:T]
        key = indices[i] if indices is not None else base_index + i
        rng = np.random.default_rng([seed, key])
        row_ids, row_labels = mask_sequence(
            seq, rate, rng, special_ids, vocab_size=vocab_size
        )
        input_ids[i, : len(seq)] = row_ids
        attn_mask[i, : len(seq)] = 1
        labels[i, : len(seq)] = row_labels
    return MaskedBatch(input_ids=input_ids, attn_mask=attn_mask, labels=labels, mask_rate=rate)
