"""Training-free attention kernels: scaled-dot-product cross-attention,
cyclic window partition/reverse for plain and shifted window layouts, and the
bidirectional image/mask fusion average.

These verify the attention math in isolation (identity projections, single
head, no learned weights); they do not feed the optimization path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; finite for logits up to ~1e4."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Softmax(Q Kᵀ / sqrt(d)) V with token rows and channel columns."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("cross_attention: Q, K, V must be 2D token matrices")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"cross_attention: channel mismatch Q{q.shape} vs K{k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"cross_attention: token mismatch K{k.shape} vs V{v.shape}")
    weights = softmax_rows(q @ k.T / np.sqrt(q.shape[1]))
    return weights @ v


@dataclass(frozen=True)
class WindowLayout:
    """Cyclic window layout over a token grid.

    ``shift`` must be 0 or window//2; shifted layouts roll the grid by -shift
    before partitioning (wrap-around, no padding), so every grid divisible by
    the window size stays divisible.
    """

    grid: tuple
    window: int
    shift: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.window < 1:
            raise ValueError("WindowLayout: window must be >= 1")
        if self.shift not in (0, self.window // 2):
            raise ValueError(f"WindowLayout: shift must be 0 or {self.window // 2}")
        bad = [g for g in self.grid if g % self.window != 0]
        if bad:
            raise ValueError(
                f"WindowLayout: grid {self.grid} not divisible by window {self.window}"
            )

    @property
    def rank(self) -> int:
        return len(self.grid)

    @property
    def num_windows(self) -> int:
        return int(np.prod([g // self.window for g in self.grid]))

    @property
    def tokens_per_window(self) -> int:
        return self.window ** self.rank


def window_partition(tokens: np.ndarray, layout: WindowLayout) -> np.ndarray:
    """Group grid tokens (shape (*grid, d)) into (num_windows, wᵈ, d)."""
    tokens = np.asarray(tokens)
    if tokens.shape[:-1] != layout.grid:
        raise ValueError(f"window_partition: tokens {tokens.shape[:-1]} vs grid {layout.grid}")
    x = tokens
    if layout.shift:
        x = np.roll(x, shift=[-layout.shift] * layout.rank, axis=tuple(range(layout.rank)))
    w = layout.window
    d = tokens.shape[-1]
    # split each grid axis into (blocks, w), then bring all block axes forward
    shape = []
    for g in layout.grid:
        shape.extend([g // w, w])
    x = x.reshape(*shape, d)
    order = list(range(0, 2 * layout.rank, 2)) + list(range(1, 2 * layout.rank, 2))
    x = x.transpose(*order, 2 * layout.rank)
    return x.reshape(layout.num_windows, layout.tokens_per_window, d)


def window_reverse(windows: np.ndarray, layout: WindowLayout) -> np.ndarray:
    """Exact inverse of :func:`window_partition`."""
    windows = np.asarray(windows)
    if windows.shape[:2] != (layout.num_windows, layout.tokens_per_window):
        raise ValueError(
            f"window_reverse: got {windows.shape[:2]}, layout wants "
            f"{(layout.num_windows, layout.tokens_per_window)}"
        )
    w = layout.window
    d = windows.shape[-1]
    blocks = [g // w for g in layout.grid]
    x = windows.reshape(*blocks, *([w] * layout.rank), d)
    order = []
    for a in range(layout.rank):
        order.extend([a, layout.rank + a])
    x = x.transpose(*order, 2 * layout.rank)
    x = x.reshape(*layout.grid, d)
    if layout.shift:
        x = np.roll(x, shift=[layout.shift] * layout.rank, axis=tuple(range(layout.rank)))
    return x


def fusion_attention(img_tokens: np.ndarray, mask_tokens: np.ndarray) -> np.ndarray:
    """Average of the two cross-attention directions between image and mask
    token sets (image as query against mask, then roles reversed)."""
    img = np.asarray(img_tokens, dtype=np.float64)
    mask = np.asarray(mask_tokens, dtype=np.float64)
    if img.shape != mask.shape:
        raise ValueError(f"fusion_attention: shapes differ {img.shape} vs {mask.shape}")
    return 0.5 * (cross_attention(img, mask, mask) + cross_attention(mask, img, img))
