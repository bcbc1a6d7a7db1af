"""3x3 convolutions on dense frames and on gathered active blocks.

Block computation gathers each active tile with a ``halo`` border from the
zero-padded input, runs all tiles of equal shape as one batched matmul and
scatters the tile interiors into a base buffer.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .masks import BlockSet


def _im2col(padded: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(..., out_h+2, out_w+2, C) -> (..., out_h, out_w, 9*C), row-major taps."""
    taps = [padded[..., dy : dy + out_h, dx : dx + out_w, :] for dy in range(3) for dx in range(3)]
    return np.concatenate(taps, axis=-1)


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Zero-padded 'same' 3x3 convolution. x: (F, H, W, Cin); weight: (3, 3, Cin, Cout)."""
    f, h, w, cin = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = _im2col(padded, h, w) @ weight.reshape(9 * cin, -1)
    if bias is not None:
        out = out + bias
    return out


def conv3x3_blocks(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None,
    blocks: BlockSet,
    base: np.ndarray,
    frame_rows: dict[int, int],
    post=None,
) -> np.ndarray:
    """Compute the convolution only on active tiles, writing into a copy of ``base``.

    ``frame_rows`` maps a block's frame label to its row in ``x``/``base``;
    blocks of frames not in the map are skipped. ``post`` is an optional
    pointwise activation applied to the tile outputs.
    """
    halo = max(blocks.halo, 1)
    h, w = x.shape[1:3]
    cin = x.shape[-1]
    padded = np.pad(x, ((0, 0), (halo, halo), (halo, halo), (0, 0)))
    out = base.copy()
    groups: dict[tuple[int, int], list[tuple[int, int, int, int, int]]] = defaultdict(list)
    for frame, r, c in blocks.active:
        row = frame_rows.get(frame)
        if row is None:
            continue
        r0, r1, c0, c1 = blocks.bounds(r, c)
        groups[(r1 - r0, c1 - c0)].append((row, r0, r1, c0, c1))
    wmat = weight.reshape(9 * cin, -1)
    trim = halo - 1
    for (bh, bw), items in groups.items():
        ext_h, ext_w = bh + 2 * halo, bw + 2 * halo
        tiles = np.stack([padded[row, r0 : r0 + ext_h, c0 : c0 + ext_w] for row, r0, _, c0, _ in items])
        res = _im2col(tiles, ext_h - 2, ext_w - 2) @ wmat
        if bias is not None:
            res = res + bias
        res = res[:, trim : trim + bh, trim : trim + bw]
        if post is not None:
            res = post(res)
        for tile, (row, r0, r1, c0, c1) in zip(res, items):
            out[row, r0:r1, c0:c1] = tile
    return out


def conv3x3_dense_restricted(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None,
    blocks: BlockSet,
    base: np.ndarray,
    frame_rows: dict[int, int],
    post=None,
) -> np.ndarray:
    """Dense reference for :func:`conv3x3_blocks`: full conv, then keep active tiles."""
    dense = conv3x3(x, weight, bias)
    if post is not None:
        dense = post(dense)
    out = base.copy()
    for frame, row in frame_rows.items():
        cov = blocks.coverage(frame)
        out[row][cov] = dense[row][cov]
    return out
