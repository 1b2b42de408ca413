"""Selective state-space (S6) scan.

Per channel d and state index n the recurrence is::

    h[t] = exp(delta[t, d] * A[d, n]) * h[t-1] + delta[t, d] * B[t, n] * u[t, d]
    y[t, d] = sum_n C[t, n] * h[t, d, n] + D_skip[d] * u[t, d]

with delta, B, C computed from the input itself.  The scan over time is
available as a plain loop, as a two-phase (up-sweep / down-sweep)
associative scan over elements ``(a, b)`` composed as
``(a1, b1) o (a2, b2) = (a1 * a2, a2 * b1 + b2)``, and as a blocked hybrid
of the two that the networks use by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, default_dtype, make_op
from .errors import ShapeError
from .nn import Module, Parameter

SCAN_METHODS = ("sequential", "parallel", "blocked")


def compose(e1, e2):
    """Compose two recurrence elements: apply ``e1`` first, then ``e2``."""
    a1, b1 = e1
    a2, b2 = e2
    return a1 * a2, a2 * b1 + b2


def linear_recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """h[t] = a[t] * h[t-1] + b[t] along axis 0, h[-1] = 0."""
    h = np.empty_like(b)
    prev = np.zeros_like(b[0])
    for t in range(b.shape[0]):
        np.multiply(a[t], prev, out=prev)
        prev += b[t]
        h[t] = prev
    return h


def linear_recurrence_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same result as :func:`linear_recurrence_sequential` via a work-efficient scan.

    Pads the time axis to a power of two with identity elements (a=1, b=0),
    computes the exclusive prefix with an up-sweep and a down-sweep, then
    applies each element to its exclusive prefix.
    """
    L = b.shape[0]
    P = 1 << max(0, (L - 1).bit_length())
    pa = np.ones((P,) + a.shape[1:], dtype=np.result_type(a, b))
    pb = np.zeros((P,) + b.shape[1:], dtype=pa.dtype)
    pa[:L] = a
    pb[:L] = b

    d = 1
    while d < P:
        left = slice(d - 1, P, 2 * d)
        right = slice(2 * d - 1, P, 2 * d)
        pb[right] = pa[right] * pb[left] + pb[right]
        pa[right] = pa[left] * pa[right]
        d *= 2

    pa[P - 1] = 1
    pb[P - 1] = 0
    d = P // 2
    while d >= 1:
        left = slice(d - 1, P, 2 * d)
        right = slice(2 * d - 1, P, 2 * d)
        ta = pa[left].copy()
        tb = pb[left].copy()
        pa[left] = pa[right]
        pb[left] = pb[right]
        pb[right] = ta * pb[right] + tb
        pa[right] = pa[right] * ta
        d //= 2

    return a * pb[:L] + b


def linear_recurrence_blocked(a: np.ndarray, b: np.ndarray, block: int = 32) -> np.ndarray:
    """Blocked form of the same recurrence.

    Runs the loop inside fixed-size blocks (vectorized across blocks), scans
    the block totals with :func:`linear_recurrence_parallel`, then folds each
    block's incoming state back in.  Much less numpy call overhead than
    either pure form for long sequences.
    """
    L = b.shape[0]
    nb = -(-L // block)
    P = nb * block
    dtype = np.result_type(a, b)
    pa = np.ones((P,) + a.shape[1:], dtype=dtype)
    pb = np.zeros((P,) + b.shape[1:], dtype=dtype)
    pa[:L] = a
    pb[:L] = b
    ca = pa.reshape((nb, block) + a.shape[1:])
    cb = pb.reshape((nb, block) + b.shape[1:])
    h = np.empty_like(cb)
    cum = np.empty_like(ca)
    h[:, 0] = cb[:, 0]
    cum[:, 0] = ca[:, 0]
    for k in range(1, block):
        np.multiply(ca[:, k], h[:, k - 1], out=h[:, k])
        h[:, k] += cb[:, k]
        np.multiply(ca[:, k], cum[:, k - 1], out=cum[:, k])
    carry = linear_recurrence_parallel(cum[:, -1], h[:, -1])
    h[1:] += cum[1:] * carry[:-1, None]
    return h.reshape((P,) + b.shape[1:])[:L]


_RECURRENCE = {
    "sequential": linear_recurrence_sequential,
    "parallel": linear_recurrence_parallel,
    "blocked": linear_recurrence_blocked,
}


def _recurrence(method: str):
    try:
        return _RECURRENCE[method]
    except KeyError:
        raise ValueError(f"unknown scan method {method!r}; expected one of {SCAN_METHODS}") from None


@dataclass
class ScanState:
    """Hidden states for every position, shape (..., L, D, N); debug output only."""

    h: np.ndarray


def scan_readout(abar: Tensor, bx: Tensor, C: Tensor, method: str = "parallel", return_states: bool = False):
    """Run the recurrence over (..., L, D, N) elements and read out with C (..., L, N).

    Returns y of shape (..., L, D); with ``return_states`` also the states.
    """
    if abar.shape != bx.shape or abar.ndim < 3:
        raise ShapeError(f"scan elements differ in shape: {abar.shape} vs {bx.shape}")
    if C.shape != abar.shape[:-2] + abar.shape[-1:]:
        raise ShapeError(f"readout C shape {C.shape} does not match states {abar.shape}")
    if abar.shape[-3] == 0:
        raise ShapeError("empty sequence")
    rec = _recurrence(method)
    a_t = np.moveaxis(abar.data, -3, 0)
    b_t = np.moveaxis(bx.data, -3, 0)
    h = np.moveaxis(rec(a_t, b_t), 0, -3)
    y = (h * C.data[..., None, :]).sum(axis=-1)

    def backward(gy):
        gh = gy[..., None] * C.data[..., None, :]
        gC = (gy[..., None] * h).sum(axis=-2) if C.requires_grad else None
        a_next = np.zeros_like(a_t)
        a_next[:-1] = a_t[1:]
        g_rev = rec(a_next[::-1], np.moveaxis(gh, -3, 0)[::-1])
        g = np.moveaxis(g_rev[::-1], 0, -3)
        ga = None
        if abar.requires_grad:
            h_prev = np.zeros_like(h)
            h_prev[..., 1:, :, :] = h[..., :-1, :, :]
            ga = g * h_prev
        return ga, np.ascontiguousarray(g), gC

    out = make_op(y, (abar, bx, C), backward, f"selective_scan[{method}]")
    if return_states:
        return out, ScanState(h)
    return out


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SSMParams(Module):
    """Selective SSM parameters for ``d_model`` channels and ``state_size`` states.

    A is stored as ``A_log`` with ``A = -exp(A_log)`` so it stays strictly
    negative; it starts at -1..-N along the state axis.  ``delta_bias`` is
    set so softplus(bias) is log-uniform in [dt_min, dt_max].
    """

    def __init__(self, rng: np.random.Generator, d_model: int, state_size: int,
                 dt_min: float = 1e-3, dt_max: float = 0.1, dtype=None):
        dtype = dtype or default_dtype()
        self.d_model = d_model
        self.state_size = state_size
        a = np.tile(np.arange(1, state_size + 1, dtype=np.float64), (d_model, 1))
        self.A_log = Parameter(np.log(a).astype(dtype))
        self.D_skip = Parameter(np.ones(d_model, dtype=dtype))
        bound = 1.0 / math.sqrt(d_model)
        self.W_delta = Parameter(rng.uniform(-bound, bound, (d_model, d_model)).astype(dtype))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), d_model))
        self.delta_bias = Parameter(_inverse_softplus(dt).astype(dtype))
        self.W_B = Parameter(rng.uniform(-bound, bound, (d_model, state_size)).astype(dtype))
        self.W_C = Parameter(rng.uniform(-bound, bound, (d_model, state_size)).astype(dtype))

    @property
    def A(self) -> Tensor:
        return ops.neg(ops.exp(self.A_log))


def selection_projections(x: Tensor, params: SSMParams):
    """Input-dependent step size and input/readout vectors.

    x is (..., L, D); returns delta (..., L, D), B (..., L, N), C (..., L, N).
    """
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"input channels {x.shape[-1]} != SSM channels {params.d_model}")
    delta = ops.softplus(ops.linear(x, params.W_delta, params.delta_bias))
    B = ops.linear(x, params.W_B)
    C = ops.linear(x, params.W_C)
    return delta, B, C


def discretize(A, B: Tensor, delta: Tensor):
    """Zero-order hold for A, Euler step for B.

    A is (D, N), B is (..., L, N), delta is (..., L, D); both outputs are
    (..., L, D, N).
    """
    A = A if isinstance(A, Tensor) else Tensor(A)
    if np.any(delta.data <= 0):
        raise ValueError("discretization needs a strictly positive step size")
    if np.any(A.data >= 0):
        raise ValueError("state matrix must be strictly negative")
    d = ops.reshape(delta, delta.shape + (1,))
    abar = ops.exp(d * A)
    bbar = d * ops.reshape(B, B.shape[:-1] + (1, B.shape[-1]))
    return abar, bbar


def scan_discretized(u: Tensor, abar: Tensor, bbar: Tensor, C: Tensor, D_skip, method: str = "parallel",
                     return_states: bool = False):
    """Scan already-discretized parameters: y = <C, h> + D_skip * u."""
    if u.shape[-2] == 0:
        raise ShapeError("empty sequence")
    bx = bbar * ops.reshape(u, u.shape + (1,))
    res = scan_readout(abar, bx, C, method, return_states)
    y, states = res if return_states else (res, None)
    y = y + u * D_skip
    return (y, states) if return_states else y


def fused_selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D_skip: Tensor,
                         method: str = "parallel", return_states: bool = False):
    """Discretize, scan, and read out in one primitive.

    Computes the same function as ``discretize`` + ``scan_discretized`` but
    without recording the (..., L, D, N) intermediates on the tape; the
    backward pass is written out by hand.
    """
    rec = _recurrence(method)
    if np.any(delta.data <= 0):
        raise ValueError("discretization needs a strictly positive step size")
    if np.any(A.data >= 0):
        raise ValueError("state matrix must be strictly negative")
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, B.data, C.data
    abar = np.exp(dd[..., None] * Ad)
    du = dd * ud
    bx = du[..., None] * Bd[..., None, :]
    a_t = np.moveaxis(abar, -3, 0)
    h = np.moveaxis(rec(a_t, np.moveaxis(bx, -3, 0)), 0, -3)
    y = np.matmul(h, Cd[..., None])[..., 0] + ud * D_skip.data
    lead = tuple(range(u.ndim - 1))

    def backward(gy):
        gC = np.matmul(gy[..., None, :], h)[..., 0, :]
        gh = gy[..., None] * Cd[..., None, :]
        a_next = np.zeros_like(a_t)
        a_next[:-1] = a_t[1:]
        g = np.moveaxis(rec(a_next[::-1], np.moveaxis(gh, -3, 0)[::-1])[::-1], 0, -3)
        h_prev = np.zeros_like(h)
        h_prev[..., 1:, :, :] = h[..., :-1, :, :]
        garg = g * h_prev * abar
        gdu = np.matmul(g, Bd[..., None])[..., 0]
        gB = np.matmul(du[..., None, :], g)[..., 0, :]
        gdelta = np.einsum("...dn,dn->...d", garg, Ad) + gdu * ud
        Dm, N = Ad.shape
        gA = np.matmul(garg.reshape(-1, Dm, N).transpose(1, 2, 0), dd.reshape(-1, Dm).T[..., None])[..., 0]
        gu = gdu * dd + gy * D_skip.data
        gD = (gy * ud).sum(axis=lead)
        return gu, gdelta, gA, gB, gC, gD

    out = make_op(y, (u, delta, A, B, C, D_skip), backward, f"fused_selective_scan[{method}]")
    if return_states:
        return out, ScanState(h)
    return out


def selective_scan(u: Tensor, params: SSMParams, method: str = "parallel", return_states: bool = False):
    """Full S6 pass over u of shape (..., L, D)."""
    if u.ndim < 2 or u.shape[-2] == 0:
        raise ShapeError("selective scan needs a non-empty (..., L, D) sequence")
    delta, B, C = selection_projections(u, params)
    return fused_selective_scan(u, delta, params.A, B, C, params.D_skip, method, return_states)


def selective_scan_sequential(u: Tensor, params: SSMParams, return_states: bool = False):
    return selective_scan(u, params, "sequential", return_states)


def selective_scan_parallel(u: Tensor, params: SSMParams, return_states: bool = False):
    return selective_scan(u, params, "parallel", return_states)
