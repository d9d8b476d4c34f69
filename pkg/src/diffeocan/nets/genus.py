"""Hole counting on binary rasters."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

_FOUR = ndimage.generate_binary_structure(2, 1)


def genus_oracle(mask: np.ndarray) -> int:
    """Number of background components (4-connected) that do not touch the border.

    Foreground is implicitly 8-connected, the dual of 4-connected background.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"mask must be a non-empty 2-D array, got shape {m.shape}")
    labels, n = ndimage.label(~m, structure=_FOUR)
    if n == 0:
        return 0
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    return int(n - np.count_nonzero(border))
