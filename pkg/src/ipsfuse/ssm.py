"""Diagonal state-space models: discretization, LTI execution, selective scan.

All systems here are single-input single-output per channel with a diagonal
state matrix, stored as the vector of its diagonal entries. The selective
scan is the time-varying variant used by the Mamba blocks: step size, input
and output maps change per token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .autodiff import ShapeError, Tensor, _make

__all__ = [
    "ContinuousSsm",
    "DiscreteSsm",
    "SelectiveParams",
    "SERIES_THRESHOLD",
    "zoh_discretize",
    "zoh_discretize_unscaled",
    "ssm_recurrent",
    "ssm_kernel_build",
    "ssm_conv",
    "selective_scan_reference",
    "selective_scan",
]

# below this |delta * a| the input gain falls back to its limit delta * B
SERIES_THRESHOLD = 1e-8


@dataclass(frozen=True)
class ContinuousSsm:
    A: np.ndarray  # (N,) diagonal
    B: np.ndarray  # (N,)
    C: np.ndarray  # (N,)
    D: float = 0.0

    def __post_init__(self):
        for name in ("A", "B", "C"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        n = self.A.shape[0]
        if self.B.shape != (n,) or self.C.shape != (n,):
            raise ShapeError(f"A, B, C must all have length N={n}; got {self.A.shape}, {self.B.shape}, {self.C.shape}")
        if not (np.isfinite(self.A).all() and np.isfinite(self.B).all() and np.isfinite(self.C).all()):
            raise ValueError("SSM parameters must be finite")

    @property
    def state_size(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class DiscreteSsm:
    A_bar: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray
    D: float
    delta: float

    def __post_init__(self):
        for name in ("A_bar", "B_bar", "C"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))


@dataclass(frozen=True)
class SelectiveParams:
    """Per-step parameters for one channel: ``delta`` (L,), ``B`` and ``C`` (L, N)."""

    delta: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.float64).reshape(-1)
        B = np.asarray(self.B, dtype=np.float64)
        C = np.asarray(self.C, dtype=np.float64)
        if B.ndim == 1:
            B = B[:, None]
        if C.ndim == 1:
            C = C[:, None]
        if not (len(delta) == B.shape[0] == C.shape[0]):
            raise ShapeError(f"sequence lengths differ: delta {len(delta)}, B {B.shape[0]}, C {C.shape[0]}")
        if B.shape != C.shape:
            raise ShapeError(f"B {B.shape} and C {C.shape} must share the state size")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def length(self) -> int:
        return self.delta.shape[0]


def _input_gain(z: np.ndarray, a: np.ndarray, delta) -> np.ndarray:
    """(exp(z) - 1) / a with z = delta * a, or delta where |z| is tiny."""
    small = np.abs(z) <= SERIES_THRESHOLD
    safe_a = np.where(small, 1.0, a)
    return np.where(small, delta * np.ones_like(z), np.expm1(z) / safe_a)


def zoh_discretize(ssm: ContinuousSsm, delta: float) -> DiscreteSsm:
    """Zero-order hold: A_bar = exp(delta A), B_bar = (delta A)^-1 (exp(delta A) - I) delta B."""
    if not delta > 0:
        raise ValueError(f"step size must be positive, got {delta}")
    z = delta * ssm.A
    return DiscreteSsm(np.exp(z), _input_gain(z, ssm.A, delta) * ssm.B, ssm.C, float(ssm.D), float(delta))


def zoh_discretize_unscaled(ssm: ContinuousSsm, delta: float) -> DiscreteSsm:
    """Variant with exp(A) instead of exp(delta A) inside the input gain.

    Kept only as a negative control for the self-test: its B_bar does not
    approach delta * B as delta -> 0.
    """
    if not delta > 0:
        raise ValueError(f"step size must be positive, got {delta}")
    a = ssm.A
    z = delta * a
    small = np.abs(z) <= SERIES_THRESHOLD
    gain = np.where(small, delta, np.expm1(a) / np.where(small, 1.0, a))
    return DiscreteSsm(np.exp(z), gain * ssm.B, ssm.C, float(ssm.D), float(delta))


def ssm_recurrent(dssm: DiscreteSsm, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty input sequence")
    s = np.zeros_like(dssm.A_bar)
    y = np.empty_like(x)
    for k, xk in enumerate(x):
        s = dssm.A_bar * s + dssm.B_bar * xk
        y[k] = dssm.C @ s + dssm.D * xk
    return y


def ssm_kernel_build(dssm: DiscreteSsm, length: int) -> np.ndarray:
    """Taps K[j] = C A_bar^j B_bar for j < length."""
    if length < 1:
        raise ValueError(f"kernel length must be >= 1, got {length}")
    powers = dssm.A_bar[None, :] ** np.arange(length)[:, None]
    return powers @ (dssm.C * dssm.B_bar)


def ssm_conv(dssm: DiscreteSsm, x) -> np.ndarray:
    """Causal convolution with the SSM kernel plus the D skip term."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty input sequence")
    kernel = ssm_kernel_build(dssm, x.size)
    return np.convolve(x, kernel)[: x.size] + dssm.D * x


def selective_scan_reference(A, D: float, sp: SelectiveParams, x) -> np.ndarray:
    """Plain-loop selective scan for one channel (oracle for the fast path)."""
    A = np.atleast_1d(np.asarray(A, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != sp.length:
        raise ShapeError(f"x has length {x.size}, parameters have length {sp.length}")
    if sp.B.shape[1] != A.shape[0]:
        raise ShapeError(f"state size mismatch: A {A.shape}, B {sp.B.shape}")
    if np.any(sp.delta <= 0):
        raise ValueError("all step sizes must be positive")
    s = np.zeros_like(A)
    y = np.empty_like(x)
    for t in range(x.size):
        d = zoh_discretize(ContinuousSsm(A, sp.B[t], sp.C[t], D), sp.delta[t])
        s = d.A_bar * s + d.B_bar * x[t]
        y[t] = sp.C[t] @ s + D * x[t]
    return y


# ------------------------------------------------------------ compiled scan
#
# Discretization is fused into the recurrence so no (batch, length, channel,
# state) temporaries other than the saved states are materialized. Scalar
# arithmetic runs in float64 whatever the array dtype.

# below this |delta * a| the fused kernels use a Taylor series for the gain
_KERNEL_SERIES = 1e-3


@numba.njit(cache=True, inline="always")
def _gain(dt, a, z, e):
    if abs(z) > _KERNEL_SERIES:
        return (e - 1.0) / a
    return dt * (1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0)))


@numba.njit(cache=True, inline="always")
def _gain_da(dt, a, z, e):
    if abs(z) > _KERNEL_SERIES:
        return (z * e - (e - 1.0)) / (a * a)
    return dt * dt * (0.5 + z * (1.0 / 3.0 + z * (0.125 + z / 30.0)))


@numba.njit(cache=True)
def _scan_forward(x, delta, A, B, C, reverse):
    bsz, length, d = x.shape
    n = A.shape[1]
    y = np.empty((bsz, length, d), dtype=x.dtype)
    states = np.empty((bsz, length, d, n), dtype=x.dtype)
    h = np.zeros((d, n), dtype=np.float64)
    for b in range(bsz):
        h[:, :] = 0.0
        for step in range(length):
            t = length - 1 - step if reverse else step
            for i in range(d):
                dt = np.float64(delta[b, t, i])
                xv = np.float64(x[b, t, i])
                acc = 0.0
                for j in range(n):
                    a = np.float64(A[i, j])
                    z = dt * a
                    e = np.exp(z)
                    v = e * h[i, j] + _gain(dt, a, z, e) * np.float64(B[b, t, j]) * xv
                    h[i, j] = v
                    states[b, t, i, j] = v
                    acc += np.float64(C[b, t, j]) * v
                y[b, t, i] = acc
    return y, states


@numba.njit(cache=True)
def _scan_backward(gy, x, delta, A, B, C, states, reverse):
    bsz, length, d = x.shape
    n = A.shape[1]
    gx = np.zeros((bsz, length, d), dtype=np.float64)
    gdelta = np.zeros((bsz, length, d), dtype=np.float64)
    gA = np.zeros((d, n), dtype=np.float64)
    gB = np.zeros((bsz, length, n), dtype=np.float64)
    gC = np.zeros((bsz, length, n), dtype=np.float64)
    gh = np.zeros((d, n), dtype=np.float64)
    for b in range(bsz):
        gh[:, :] = 0.0
        for step in range(length - 1, -1, -1):
            t = length - 1 - step if reverse else step
            tp = t + 1 if reverse else t - 1
            for i in range(d):
                g = np.float64(gy[b, t, i])
                dt = np.float64(delta[b, t, i])
                xv = np.float64(x[b, t, i])
                gxi = 0.0
                gdi = 0.0
                for j in range(n):
                    a = np.float64(A[i, j])
                    z = dt * a
                    e = np.exp(z)
                    gain = _gain(dt, a, z, e)
                    bv = np.float64(B[b, t, j])
                    gC[b, t, j] += g * np.float64(states[b, t, i, j])
                    v = gh[i, j] + g * np.float64(C[b, t, j])
                    # v is dL/ds_t; s_t = e * s_prev + gain * bv * xv
                    gxi += v * gain * bv
                    gB[b, t, j] += v * gain * xv
                    g_gain = v * bv * xv
                    g_z = 0.0
                    if step > 0:
                        g_z = v * np.float64(states[b, tp, i, j]) * e
                    gdi += g_z * a + g_gain * e
                    gA[i, j] += g_z * dt + g_gain * _gain_da(dt, a, z, e)
                    gh[i, j] = v * e
                gx[b, t, i] = gxi
                gdelta[b, t, i] = gdi
    return gx, gdelta, gA, gB, gC


def selective_scan(
    x: Tensor,
    delta: Tensor,
    A: Tensor,
    B: Tensor,
    C: Tensor,
    D: Tensor | None = None,
    reverse: bool = False,
) -> Tensor:
    """Data-dependent scan on the tape.

    Shapes: ``x`` and ``delta`` (Bt, L, Dc); ``A`` (Dc, N); ``B`` and ``C``
    (Bt, L, N), shared by all channels of a token; ``D`` (Dc,). Each channel
    is an independent scalar-input SSM discretized per step by zero-order
    hold. With ``reverse`` the recurrence runs from the last token backwards.
    """
    if x.ndim != 3 or delta.shape != x.shape:
        raise ShapeError(f"x {x.shape} and delta {delta.shape} must both be (batch, length, channels)")
    bsz, length, dch = x.shape
    if A.ndim != 2 or A.shape[0] != dch:
        raise ShapeError(f"A must be ({dch}, N), got {A.shape}")
    n = A.shape[1]
    if B.shape != (bsz, length, n) or C.shape != (bsz, length, n):
        raise ShapeError(f"B {B.shape} and C {C.shape} must be ({bsz}, {length}, {n})")
    if length == 0:
        raise ValueError("empty input sequence")
    if np.any(delta.data <= 0):
        raise ValueError("all step sizes must be positive")

    arrays = [np.ascontiguousarray(t.data) for t in (x, delta, A, B, C)]
    y, states = _scan_forward(*arrays, reverse)
    if D is not None:
        y = y + D.data * arrays[0]
    dtype = x.dtype

    def backward(g):
        g = np.ascontiguousarray(g)
        grads = _scan_backward(g, *arrays, states, reverse)
        grads = [gr.astype(dtype, copy=False) for gr in grads]
        if D is not None:
            grads[0] = grads[0] + g * D.data
            grads.append((g * arrays[0]).sum(axis=(0, 1)))
        return grads

    parents = [x, delta, A, B, C] + ([D] if D is not None else [])
    return _make(y, parents, backward, "selective_scan")
