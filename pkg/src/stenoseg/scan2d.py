"""Cross scan / cross merge around four directional selective scans (SS2D).

For a 2x2 grid ``[[a, b], [c, d]]`` the four traversal orders are::

    ROW_MAJOR           a b c d
    COL_MAJOR           a c b d
    ROW_MAJOR_REVERSED  d c b a
    COL_MAJOR_REVERSED  d b c a

Merging inverse-permutes every sequence back onto the grid and sums, so
``cross_merge(cross_scan(g)) == 4 * g``.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .errors import ShapeError
from .ssm import SSMParams, selective_scan


class ScanDirection(enum.IntEnum):
    ROW_MAJOR = 0
    COL_MAJOR = 1
    ROW_MAJOR_REVERSED = 2
    COL_MAJOR_REVERSED = 3


def direction_order(direction: ScanDirection, H: int, W: int) -> np.ndarray:
    """Row-major grid index visited at each sequence position."""
    grid = np.arange(H * W).reshape(H, W)
    if direction == ScanDirection.ROW_MAJOR:
        return grid.ravel()
    if direction == ScanDirection.COL_MAJOR:
        return grid.T.ravel()
    if direction == ScanDirection.ROW_MAJOR_REVERSED:
        return grid.ravel()[::-1].copy()
    if direction == ScanDirection.COL_MAJOR_REVERSED:
        return grid.T.ravel()[::-1].copy()
    raise ValueError(direction)


def inverse_order(order: np.ndarray) -> np.ndarray:
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    return inv


def grid_to_tokens(g: Tensor) -> Tensor:
    """B x C x H x W -> B x (H*W) x C in row-major token order."""
    B, C, H, W = g.shape
    return ops.transpose(ops.reshape(g, (B, C, H * W)), (0, 2, 1))


def tokens_to_grid(seq: Tensor, H: int, W: int) -> Tensor:
    B, L, C = seq.shape
    if L != H * W:
        raise ShapeError(f"sequence length {L} does not match grid {H}x{W}")
    return ops.reshape(ops.transpose(seq, (0, 2, 1)), (B, C, H, W))


def cross_scan(g: Tensor) -> list[Tensor]:
    """Unfold a B x C x H x W grid into four B x (H*W) x C sequences, one per direction."""
    if g.ndim != 4:
        raise ShapeError(f"cross_scan expects B x C x H x W, got {g.shape}")
    _, _, H, W = g.shape
    tokens = grid_to_tokens(g)
    return [ops.permute_axis(tokens, direction_order(d, H, W), axis=1) for d in ScanDirection]


def cross_merge(seqs: Sequence[Tensor], H: int, W: int) -> Tensor:
    """Inverse of :func:`cross_scan` per direction, summed into one grid."""
    if len(seqs) != 4:
        raise ShapeError(f"cross_merge needs four sequences, got {len(seqs)}")
    shape = seqs[0].shape
    for s in seqs[1:]:
        if s.shape != shape:
            raise ShapeError(f"sequence shapes differ: {shape} vs {s.shape}")
    if len(shape) != 3 or shape[1] != H * W:
        raise ShapeError(f"sequences of shape {shape} do not cover a {H}x{W} grid")
    total = None
    for d, seq in zip(ScanDirection, seqs):
        back = ops.permute_axis(seq, inverse_order(direction_order(d, H, W)), axis=1)
        total = back if total is None else total + back
    return tokens_to_grid(total, H, W)


def ss2d(g: Tensor, params: Sequence[SSMParams], method: str = "parallel") -> Tensor:
    """Selective scan along all four directions of a B x C x H x W grid, merged by sum."""
    if len(params) != 4:
        raise ValueError("ss2d needs one SSMParams per direction")
    _, C, H, W = g.shape
    for p in params:
        if p.d_model != C:
            raise ShapeError(f"SSM channels {p.d_model} != grid channels {C}")
    seqs = cross_scan(g)
    outs = [selective_scan(s, p, method) for s, p in zip(seqs, params)]
    return cross_merge(outs, H, W)
