"""Differentiable primitives, generic over plain numpy and tape variables.

Every function here accepts either numpy arrays (plain evaluation, used by
generation paths and the finite-difference oracle) or :class:`~chansim.tape.Var`
nodes (recorded evaluation, used to obtain gradients). Signal-sized
operations (convolution, resampling, overlap-add, windowed transforms, the
sequential gain smoother) are implemented as single nodes with analytic
adjoints so tape length stays independent of signal length.

Piecewise operations (floors, branch selections) freeze their branch choice
at the evaluation point; gradients are the locally active branch's
derivatives.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve

from .tape import Tape, Var

__all__ = [
    "value_of",
    "exp",
    "log",
    "log10",
    "arctan",
    "absval",
    "maximum_floor",
    "sigmoid",
    "softplus",
    "softplus_inv",
    "logit",
    "mean",
    "total",
    "element",
    "segment",
    "gather",
    "conv_same",
    "resample_linear",
    "ola_expand",
    "smooth_branches",
    "irfft_even",
    "stft_mag",
    "hann_periodic",
]

_LN10 = np.log(10.0)


def value_of(x):
    """Underlying numpy value of `x`, whether tape variable or plain array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _unary(x, fwd, partial, name):
    """Record an elementwise op with derivative `partial(value)`."""
    if isinstance(x, Var):
        v = x.value
        return x.tape.op(fwd(v), (x,), lambda g: (g * partial(v),), name)
    return fwd(np.asarray(x, dtype=float))


# -- elementwise ------------------------------------------------------------

def exp(x):
    if isinstance(x, Var):
        y = np.exp(x.value)
        return x.tape.op(y, (x,), lambda g: (g * y,), "exp")
    return np.exp(np.asarray(x, dtype=float))


def log(x):
    return _unary(x, np.log, lambda v: 1.0 / v, "log")


def log10(x):
    return _unary(x, np.log10, lambda v: 1.0 / (v * _LN10), "log10")


def arctan(x):
    return _unary(x, np.arctan, lambda v: 1.0 / (1.0 + v * v), "arctan")


def absval(x):
    """Absolute value; subgradient 0 at the origin."""
    return _unary(x, np.abs, np.sign, "abs")


def maximum_floor(x, floor: float):
    """max(x, floor) with the floor branch frozen at the evaluation point."""
    return _unary(
        x,
        lambda v: np.maximum(v, floor),
        lambda v: (v > floor).astype(float),
        "maximum_floor",
    )


def _sigmoid_np(v):
    out = np.empty_like(v, dtype=float)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    if isinstance(x, Var):
        y = _sigmoid_np(np.atleast_1d(x.value)).reshape(x.value.shape)
        return x.tape.op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")
    v = np.asarray(x, dtype=float)
    return _sigmoid_np(np.atleast_1d(v)).reshape(v.shape)


def _softplus_np(v):
    # log(1 + e^v), stable in both tails
    return np.logaddexp(0.0, v)


def softplus(x):
    if isinstance(x, Var):
        y = _softplus_np(x.value)
        s = _sigmoid_np(np.atleast_1d(x.value)).reshape(x.value.shape)
        return x.tape.op(y, (x,), lambda g: (g * s,), "softplus")
    return _softplus_np(np.asarray(x, dtype=float))


def softplus_inv(y):
    """Inverse of softplus on (0, inf), stable for large arguments."""
    y = np.asarray(y, dtype=float)
    out = np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))
    return out


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


# -- reductions --------------------------------------------------------------

def mean(x):
    if isinstance(x, Var):
        n = x.value.size
        return x.tape.op(
            np.asarray(np.mean(x.value)),
            (x,),
            lambda g, shape=x.value.shape: (np.broadcast_to(g / n, shape).copy(),),
            "mean",
        )
    return np.asarray(np.mean(np.asarray(x, dtype=float)))


def total(x):
    if isinstance(x, Var):
        return x.tape.op(
            np.asarray(np.sum(x.value)),
            (x,),
            lambda g, shape=x.value.shape: (np.broadcast_to(g, shape).copy(),),
            "sum",
        )
    return np.asarray(np.sum(np.asarray(x, dtype=float)))


# -- indexing ----------------------------------------------------------------

def element(x, i: int):
    """Scalar (0-d) view of element `i` of a vector."""
    if isinstance(x, Var):
        def backward(g, n=x.value.shape, i=i):
            out = np.zeros(n)
            out[i] = g
            return (out,)

        return x.tape.op(np.asarray(x.value[i]), (x,), backward, "element")
    return float(np.asarray(x)[i])


def segment(x, lo: int, hi: int):
    """Contiguous slice [lo, hi) of a vector."""
    if isinstance(x, Var):
        def backward(g, n=x.value.shape, lo=lo, hi=hi):
            out = np.zeros(n)
            out[lo:hi] = g
            return (out,)

        return x.tape.op(x.value[lo:hi].copy(), (x,), backward, "segment")
    return np.asarray(x, dtype=float)[lo:hi]


def gather(x, idx: np.ndarray):
    """x[idx] for a constant integer index array; adjoint scatter-adds."""
    idx = np.asarray(idx)
    if isinstance(x, Var):
        def backward(g, n=x.value.shape, idx=idx):
            out = np.zeros(n)
            np.add.at(out, idx, g)
            return (out,)

        return x.tape.op(x.value[idx], (x,), backward, "gather")
    return np.asarray(x, dtype=float)[idx]


# -- convolution --------------------------------------------------------------

def _conv_same_np(x, h):
    return fftconvolve(x, h, mode="same")


def _conv_adj_signal(g, h):
    return fftconvolve(g, h[::-1], mode="same")


def _conv_adj_kernel(g, x, klen):
    # adjoint w.r.t. the kernel: correlation of the output adjoint with the
    # input, windowed to the kernel support
    c = (klen - 1) // 2
    q = fftconvolve(g, x[::-1], mode="full")
    start = len(x) - 1 - c
    out = np.zeros(klen)
    j = np.arange(klen)
    m = start + j
    valid = (m >= 0) & (m < len(q))
    out[j[valid]] = q[m[valid]]
    return out


def conv_same(x, h):
    """Same-length centered convolution; kernel length must be odd.

    Differentiable in both arguments; either may be a plain array.
    """
    xv = value_of(x)
    hv = value_of(h)
    if len(hv) % 2 != 1:
        raise ValueError("conv_same requires an odd-length kernel")
    y = _conv_same_np(xv, hv)
    x_is = isinstance(x, Var)
    h_is = isinstance(h, Var)
    if not (x_is or h_is):
        return y
    tape = x.tape if x_is else h.tape

    def backward(g, xv=xv, hv=hv):
        grads = []
        if x_is:
            grads.append(_conv_adj_signal(g, hv))
        if h_is:
            grads.append(_conv_adj_kernel(g, xv, len(hv)))
        return tuple(grads)

    parents = tuple(p for p in (x, h) if isinstance(p, Var))
    return tape.op(y, parents, backward, "conv_same")


# -- gain-track resampling -----------------------------------------------------

def _resample_weights(n_in: int, n_out: int):
    if n_out == 1:
        return np.array([0]), np.array([0]), np.array([1.0]), np.array([0.0])
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(pos.astype(int), n_in - 2) if n_in > 1 else np.zeros(n_out, int)
    frac = pos - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, 1.0 - frac, frac


def resample_linear(x, n_out: int):
    """Resample a track to `n_out` points by linear interpolation on the
    uniform grid spanning both endpoints."""
    xv = value_of(x)
    if len(xv) == 0:
        raise ValueError("cannot resample an empty track")
    i0, i1, w0, w1 = _resample_weights(len(xv), n_out)
    y = xv[i0] * w0 + xv[i1] * w1
    if not isinstance(x, Var):
        return y

    def backward(g, n=len(xv)):
        out = np.zeros(n)
        np.add.at(out, i0, g * w0)
        np.add.at(out, i1, g * w1)
        return (out,)

    return x.tape.op(y, (x,), backward, "resample_linear")


# -- overlap-add upsampling -----------------------------------------------------

def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _ola_norm(n_track: int, factor: int, n_out: int):
    # window k spans output samples [k*factor - factor, k*factor + factor)
    w = hann_periodic(2 * factor)
    buf = np.zeros(n_track * factor + factor)
    ones = np.ones(n_track)
    buf[: n_track * factor] += np.repeat(ones, factor) * np.tile(w[:factor], n_track)
    buf[factor : factor + n_track * factor] += np.repeat(ones, factor) * np.tile(
        w[factor:], n_track
    )
    return w, buf[factor : factor + n_out]


def ola_expand(x, factor: int, n_out: int):
    """Expand a track by overlap-adding Hann windows of length 2*factor at
    hop `factor`, normalized by the window sum so constants reconstruct
    exactly. Output has exactly `n_out` samples."""
    xv = value_of(x)
    m = len(xv)
    if factor < 1:
        raise ValueError("upsampling factor must be >= 1")
    if m * factor < n_out:
        raise ValueError(
            f"track of {m} points at factor {factor} covers {m * factor} samples, "
            f"cannot fill {n_out}"
        )
    w, norm = _ola_norm(m, factor, n_out)
    contrib = xv[:, None] * w[None, :]
    buf = np.zeros(m * factor + factor)
    buf[: m * factor] += contrib[:, :factor].ravel()
    buf[factor : factor + m * factor] += contrib[:, factor:].ravel()
    y = buf[factor : factor + n_out] / norm
    if not isinstance(x, Var):
        return y

    def backward(g, m=m, factor=factor, n_out=n_out):
        z = np.zeros(m * factor + factor)
        z[factor : factor + n_out] = g / norm
        first = (z[: m * factor].reshape(m, factor) * w[:factor]).sum(axis=1)
        second = (z[factor : factor + m * factor].reshape(m, factor) * w[factor:]).sum(axis=1)
        return (first + second,)

    return x.tape.op(y, (x,), backward, "ola_expand")


# -- sequential branch smoother --------------------------------------------------

def smooth_branches_np(d: np.ndarray, a_attack: float, a_release: float):
    """One-pole smoother with per-step coefficient choice.

    Steps where the incoming value exceeds the running state use the attack
    coefficient, all others the release coefficient; the state seeds from the
    first input. Returns the smoothed track and the boolean attack mask.
    """
    vals = [float(v) for v in d]
    n = len(vals)
    out = [0.0] * n
    mask = np.zeros(n, dtype=bool)
    s = vals[0]
    out[0] = s
    aa = float(a_attack)
    ar = float(a_release)
    for t in range(1, n):
        dt = vals[t]
        if dt > s:
            s = aa * s + (1.0 - aa) * dt
            mask[t] = True
        else:
            s = ar * s + (1.0 - ar) * dt
        out[t] = s
    return np.asarray(out), mask


def smooth_branches(d, a_attack, a_release):
    """Differentiable wrapper around :func:`smooth_branches_np`.

    Branch selection is frozen at the evaluation point. Returns
    (smoothed track, attack mask).
    """
    dv = value_of(d)
    aav = float(value_of(a_attack))
    arv = float(value_of(a_release))
    y, mask = smooth_branches_np(dv, aav, arv)
    parents = tuple(p for p in (d, a_attack, a_release) if isinstance(p, Var))
    if not parents:
        return y, mask
    tape = parents[0].tape

    def backward(g, dv=dv, y=y, mask=mask, aav=aav, arv=arv):
        n = len(dv)
        dbar = np.zeros(n)
        abar_a = 0.0
        abar_r = 0.0
        carry = 0.0
        glist = [float(v) for v in g]
        ylist = [float(v) for v in y]
        dlist = [float(v) for v in dv]
        for t in range(n - 1, 0, -1):
            sbar = glist[t] + carry
            if mask[t]:
                dbar[t] = (1.0 - aav) * sbar
                abar_a += (ylist[t - 1] - dlist[t]) * sbar
                carry = aav * sbar
            else:
                dbar[t] = (1.0 - arv) * sbar
                abar_r += (ylist[t - 1] - dlist[t]) * sbar
                carry = arv * sbar
        dbar[0] = glist[0] + carry
        grads = []
        if isinstance(d, Var):
            grads.append(dbar)
        if isinstance(a_attack, Var):
            grads.append(np.asarray(abar_a))
        if isinstance(a_release, Var):
            grads.append(np.asarray(abar_r))
        return tuple(grads)

    out = tape.op(y, parents, backward, "smooth_branches")
    return out, mask


# -- spectra ----------------------------------------------------------------------

def irfft_even(x):
    """Inverse real FFT of a zero-phase (real) half-spectrum of n bins,
    producing the even-symmetric sequence of length 2*(n-1)."""
    xv = value_of(x)
    n_bins = len(xv)
    n = 2 * (n_bins - 1)
    y = np.fft.irfft(xv, n=n)
    if not isinstance(x, Var):
        return y

    def backward(g, n=n, n_bins=n_bins):
        spec = np.fft.rfft(g)
        scale = np.full(n_bins, 2.0 / n)
        scale[0] = 1.0 / n
        scale[-1] = 1.0 / n
        return (spec.real * scale,)

    return x.tape.op(y, (x,), backward, "irfft_even")


def _stft_frames(n_samples: int, size: int):
    hop = size // 4
    pad = size // 2
    n_frames = 1 + n_samples // hop
    starts = hop * np.arange(n_frames)
    idx = starts[:, None] + np.arange(size)[None, :]
    return hop, pad, idx


def _stft_mag_np(xv: np.ndarray, size: int, window: np.ndarray):
    hop, pad, idx = _stft_frames(len(xv), size)
    padded = np.concatenate([np.zeros(pad), xv, np.zeros(pad)])
    frames = padded[idx] * window
    z = np.fft.rfft(frames, axis=1)
    return np.abs(z), z, idx, pad


def stft_mag(x, size: int):
    """Magnitude spectrogram: Hann window of `size`, hop size/4, centered
    zero padding. Rows are frames, columns frequency bins."""
    xv = value_of(x)
    window = hann_periodic(size)
    mag, z, idx, pad = _stft_mag_np(xv, size, window)
    if not isinstance(x, Var):
        return mag

    def backward(g, z=z, idx=idx, pad=pad, n=len(xv), size=size):
        safe = np.maximum(np.abs(z), 1e-300)
        zbar = (g / safe) * z
        # adjoint of rfft on real frames: scale interior bins by 1/2,
        # run irfft, multiply by the transform length
        zbar[:, 0] = zbar[:, 0].real
        zbar[:, -1] = zbar[:, -1].real
        d = zbar.copy()
        d[:, 1:-1] *= 0.5
        fbar = size * np.fft.irfft(d, n=size, axis=1)
        fbar *= window
        padded_bar = np.zeros(n + 2 * pad)
        np.add.at(padded_bar, idx.ravel(), fbar.ravel())
        return (padded_bar[pad : pad + n],)

    return x.tape.op(mag, (x,), backward, "stft_mag")
