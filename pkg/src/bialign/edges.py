"""Binary boundary maps derived from segmentation labels.

A pixel is a boundary pixel iff one of its in-bounds 4-neighbors carries a
different label.  The ignore value participates as a label of its own, so
the rim around ignored regions is supervised as boundary.  Pixels on the
image frame only compare against neighbors that exist; there is no implicit
out-of-image class.
"""

from __future__ import annotations

import numpy as np


def extract_edge_map(labels: np.ndarray, thickness: int = 1) -> np.ndarray:
    """(n, h, w) integer labels -> (n, 1, h, w) float32 edge indicator in {0, 1}.

    thickness > 1 dilates the edge set with a square structuring element of
    radius thickness - 1.
    """
    if labels.ndim != 3:
        raise ValueError(f"labels must be (n, h, w), got {labels.shape}")
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    n, h, w = labels.shape
    edge = np.zeros((n, h, w), dtype=bool)
    horiz = labels[:, :, 1:] != labels[:, :, :-1]
    edge[:, :, 1:] |= horiz
    edge[:, :, :-1] |= horiz
    vert = labels[:, 1:, :] != labels[:, :-1, :]
    edge[:, 1:, :] |= vert
    edge[:, :-1, :] |= vert

    r = thickness - 1
    if r > 0:
        dilated = np.zeros_like(edge)
        for di in range(-r, r + 1):
            for dj in range(-r, r + 1):
                src_i = slice(max(0, -di), h - max(0, di))
                dst_i = slice(max(0, di), h - max(0, -di))
                src_j = slice(max(0, -dj), w - max(0, dj))
                dst_j = slice(max(0, dj), w - max(0, -dj))
                dilated[:, dst_i, dst_j] |= edge[:, src_i, src_j]
        edge = dilated

    return edge[:, np.newaxis].astype(np.float32)
