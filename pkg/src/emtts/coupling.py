"""Domain boundary: phasor extraction from EMT waveforms and waveform
reconstruction from phasor-side currents.

Angles are measured against a reference angle supplied per sample (the
PLL angle in a co-simulation, ``omega0 * t`` in the standalone helpers),
so that ``sqrt(2)*X*cos(theta + phi)`` maps to the phasor ``X /_ phi``.
"""
import cmath
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .phasors import PhasorSet, wrap_angle

SQRT2 = math.sqrt(2.0)
TWO_PI = 2.0 * math.pi


@dataclass
class CouplingConfig:
    h: float = 100e-6
    H: float = 1e-3
    mode: str = "direct"  # "direct" or "interpolated"
    feedforward: bool = True
    ff_mode: str = "time"  # "time": advance by omega*h; "exact": invert the discrete filter
    delay: float = None  # exchange delay D per direction, default H
    f0: float = 60.0

    def __post_init__(self):
        if not self.h > 0 or not self.H > 0:
            raise ValueError("timesteps must be positive")
        n = round(self.H / self.h)
        if n < 1 or abs(n * self.h - self.H) > 1e-9 * self.H:
            raise ValueError(f"H={self.H:g} s is not an integer multiple of h={self.h:g} s")
        if self.mode not in ("direct", "interpolated"):
            raise ValueError(f"unknown coupling mode {self.mode!r}")
        if self.ff_mode not in ("time", "exact"):
            raise ValueError(f"unknown feedforward mode {self.ff_mode!r}")
        if self.delay is None:
            self.delay = self.H
        if self.delay < 0:
            raise ValueError("exchange delay must be nonnegative")

    @property
    def N(self):
        return int(round(self.H / self.h))

    @property
    def delay_steps(self):
        """Delay in phasor steps, rounded up so a value is never seen early."""
        return int(math.ceil(self.delay / self.H - 1e-9))


# ------------------------------------------------------------ extraction


def _fraction_polys():
    # integral from 0 to alpha of the cubic Lagrange basis on nodes -1, 0, 1, 2
    nodes = np.array([-1.0, 0.0, 1.0, 2.0])
    out = []
    for j in range(4):
        others = np.delete(nodes, j)
        out.append(np.polyint(np.poly1d(others, r=True) / np.prod(nodes[j] - others)).coeffs)
    return np.array(out)


_FRAC = _fraction_polys()
_END = ((0, -3.0), (1, 4.0), (2, -1.0))


def window_corrections(n_int, alpha):
    """(indices, corrections) turning a plain sum of samples 0..n_int into the
    quadrature of ``window_weights``."""
    corr = {0: -0.5, n_int: -0.5}
    # -(f'(N) - f'(0)) / 12 with one-sided second-order derivatives
    for m, c in _END:
        corr[m] = corr.get(m, 0.0) + c / 24.0
        corr[n_int - m] = corr.get(n_int - m, 0.0) + c / 24.0
    if alpha > 0.0:
        f = np.polyval(_FRAC.T, alpha)
        for j in range(4):
            corr[n_int - 1 + j] = corr.get(n_int - 1 + j, 0.0) + f[j]
    idx = np.array(sorted(corr), dtype=np.int64)
    return idx, np.array([corr[i] for i in idx])


def window_weights(n_int, alpha):
    """Quadrature weights (in units of h) over a window of n_int + alpha steps.

    Index 0 is the newest sample. The whole-step part uses the trapezoid
    rule with end-point derivative corrections, and the fractional step at
    the old end integrates a cubic through the four nearest samples. Both
    pieces are fourth-order accurate in h.
    """
    w = np.zeros(n_int + 3)
    w[: n_int + 1] = 1.0
    idx, c = window_corrections(n_int, alpha)
    w[idx] += c
    return w


def _split(x):
    n_int = int(math.floor(x + 1e-9))
    alpha = x - n_int
    return n_int, (alpha if alpha > 1e-9 else 0.0)


class ExtractionWindow:
    """One-cycle sliding window of RMS and Fourier sums for ``n_ch`` signals.

    The window spans exactly one period even when it is not a whole number
    of steps; see ``window_weights`` for the quadrature. With ``track=True``
    the period follows the reference angle passed to ``push`` (its advance
    over the last cycle), so an off-nominal fundamental does not leak a
    double-frequency ripple into the result.
    """

    def __init__(self, h, f0=60.0, n_ch=3, kind="fourier", track=False, f_range=0.1):
        self.h = float(h)
        if kind not in ("fourier", "rms", "mean"):
            raise ValueError(f"unknown window kind {kind!r}")
        self.kind = kind
        self.fourier = kind == "fourier"
        self.f0 = float(f0)
        self.T = 1.0 / self.f0
        self.n_ch = n_ch
        self.track = track
        self.f_range = f_range
        self.x0 = self.T / self.h
        self.n_int, self.alpha = _split(self.x0)
        if self.n_int < 4:
            raise ValueError("extraction window needs at least 4 samples per cycle")
        n_max = int(math.floor(self.x0 / (1.0 - f_range))) if track else self.n_int
        self.cap = n_max + 4
        self._geo = {}
        self._n_ref = int(round(self.x0))
        self.length = self.n_int + 3
        rows = 3 * n_ch if self.fourier else n_ch
        self.buf = np.zeros((rows, self.cap))
        self.cum = np.zeros((rows, self.cap))
        self.run = np.zeros(rows)
        self._row = np.zeros(rows)
        self.phase = np.zeros(self.cap)
        self._theta_prev = None
        self._phi = 0.0
        self.pos = -1
        self.count = 0

    @property
    def ready(self):
        return self.count >= self._geometry()[0] + 3

    def push(self, values, theta):
        """Add one sample per channel taken at reference angle ``theta``."""
        row = self._row
        n = self.n_ch
        if self.kind == "rms":
            np.multiply(values, values, out=row)
        elif self.kind == "mean":
            row[:] = values
        else:
            c = math.cos(theta)
            s = math.sin(theta)
            for k in range(n):
                v = values[k]
                row[k] = v * v
                row[n + k] = v * c
                row[2 * n + k] = v * s
        self.pos += 1
        if self.pos == self.cap:
            self.pos = 0
        kernels.ring_push(self.buf, self.cum, self.run, self.pos, row)
        if self.track:
            if self._theta_prev is not None:
                self._phi += math.remainder(theta - self._theta_prev, TWO_PI)
            self._theta_prev = theta
            self.phase[self.pos] = self._phi
        self.count += 1
        if self.pos == self.cap - 1:
            # rebase once per lap so the running total stays small
            base = self.run.copy()
            self.run -= base
            self.cum -= base[:, None]

    def frequency(self):
        """Mean fundamental frequency over the last cycle (f0 when not tracking)."""
        if not self.track or self.count <= self._n_ref:
            return self.f0
        d = self.phase[self.pos] - self.phase[(self.pos - self._n_ref) % self.cap]
        f = d / (TWO_PI * self._n_ref * self.h)
        lo, hi = self.f0 * (1.0 - self.f_range), self.f0 * (1.0 + self.f_range)
        return min(max(f, lo), hi)

    def _geometry(self):
        if self.track:
            x = round(1.0 / (self.frequency() * self.h), 4)
        else:
            x = self.x0
        g = self._geo.get(x)
        if g is None:
            n_int, alpha = _split(x)
            idx, c = window_corrections(n_int, alpha)
            g = (n_int, idx, c, 1.0 / x)
            self._geo[x] = g
        return g

    def integrals(self):
        """Window means of v^2, v*cos and v*sin (length 3*n_ch)."""
        n_int, idx, c, inv_x = self._geometry()
        cap = self.cap
        total = self.run - self.cum[:, (self.pos - n_int - 1) % cap] if self.count > n_int + 1 else self.run.copy()
        total += self.buf[:, (self.pos - idx) % cap] @ c
        return total * inv_x

    def mean(self):
        return self.integrals()

    def rms(self):
        m = self.integrals()
        return np.sqrt(np.maximum(m[:self.n_ch], 0.0))

    def phasors_complex(self):
        m = self.integrals()
        n = self.n_ch
        a = 2.0 * m[n:2 * n]
        b = 2.0 * m[2 * n:]
        rms = np.sqrt(np.maximum(m[:n], 0.0))
        return rms, np.arctan2(-b, a)

    def extract(self):
        if not self.ready:
            return None
        rms, ang = self.phasors_complex()
        return PhasorSet(rms[:3], ang[:3])


def sliding_cycle_mean(x, h, f0=60.0):
    """Trailing one-cycle mean of a sampled signal, same quadrature as the
    extraction window. Samples before the first full cycle pass through."""
    x = np.asarray(x, dtype=float)
    T = 1.0 / f0
    w = window_weights(*_split(T / h)) * (h / T)
    out = x.copy()
    if len(x) >= len(w):
        out[len(w) - 1:] = np.convolve(x, w, mode="valid")
    return out


def cycle_frequency(t, phase):
    """Frequency from the time the unwrapped ``phase`` (rad) takes to advance
    one full turn, ending at each sample. A ripple at twice the fundamental
    averages out exactly over that span. Samples before the first full turn
    use the local derivative instead."""
    t = np.asarray(t, dtype=float)
    phase = np.asarray(phase, dtype=float)
    out = np.gradient(phase, t) / TWO_PI if len(t) > 1 else np.zeros_like(t)
    done = phase - phase[0] >= TWO_PI if len(t) else np.zeros(0, bool)
    if np.any(done):
        t_back = np.interp(phase[done] - TWO_PI, phase, t)
        out[done] = 1.0 / (t[done] - t_back)
    return out


def extract_phasors(win):
    """Magnitude = true RMS over the trailing cycle; angle from the Fourier
    coefficients. Returns None while the window is still filling."""
    return win.extract()


# ---------------------------------------------------------- interpolation


def interpolate_boundary(i_prev, i_next, n, N):
    """Linear interpolation of magnitude and shortest-arc angle at substep n of N."""
    if not 0 <= n <= N:
        raise ValueError(f"substep {n} outside [0, {N}]")
    if n == 0:
        return i_prev
    if n == N:
        return i_next
    r = n / N
    mag = i_prev.mag + r * (i_next.mag - i_prev.mag)
    dphi = wrap_angle(i_next.ang - i_prev.ang)
    return PhasorSet(mag, i_prev.ang + r * dphi)


# ----------------------------------------------------------- reconstruction


def filter_response(omega, h):
    """Complex response of the Tustin first-order filter with tau = h at ``omega``."""
    z1 = cmath.exp(-1j * omega * h)
    return (1.0 + z1) / (3.0 - z1)


class ReconstructionState:
    """Three-phase waveform generator for the direct-update scheme.

    The first-order low-pass filter has time constant h and is discretized
    with the bilinear transform: y[n+1] = (y[n] + x[n] + x[n+1]) / 3.
    """

    def __init__(self, h, feedforward=True, ff_mode="time", f0=60.0):
        self.h = float(h)
        self.tau = self.h
        self.feedforward = feedforward
        self.ff_mode = ff_mode
        self.f0 = f0
        self.mag = np.zeros(3)
        self.ang = np.zeros(3)
        self.received = False
        self.y = [0.0, 0.0, 0.0]
        self.x = [0.0, 0.0, 0.0]
        self._amp = [0.0, 0.0, 0.0]
        self._phi = [0.0, 0.0, 0.0]
        self._omega_cached = None
        self._ff = (0.0, 1.0)

    def update(self, phasors):
        self.mag = np.array(phasors.mag)
        self.ang = np.array(phasors.ang)
        self._amp = [SQRT2 * float(m) for m in phasors.mag]
        self._phi = [float(a) for a in phasors.ang]
        self.received = True

    def _compensation(self, omega):
        if not self.feedforward:
            return 0.0, 1.0
        if omega != self._omega_cached:
            if self.ff_mode == "exact":
                H = filter_response(omega, self.h)
                self._ff = (-cmath.phase(H), 1.0 / abs(H))
            else:
                self._ff = (omega * self.h, 1.0)
            self._omega_cached = omega
        return self._ff

    def step(self, theta, omega, amp=None, phi=None):
        """Filtered sample at the instant whose reference angle is ``theta``.

        ``amp`` (peak) and ``phi`` override the stored phasors for this sample,
        which is how the interpolated scheme feeds the same filter.
        """
        ff, gain = self._compensation(omega)
        amp = self._amp if amp is None else amp
        phi = self._phi if phi is None else phi
        y = self.y
        x = self.x
        for k in range(3):
            xn = gain * amp[k] * math.cos(theta + phi[k] + ff)
            y[k] = (y[k] + x[k] + xn) / 3.0
            x[k] = xn
        return y


def reconstruct_direct(state, theta, omega=TWO_PI * 60.0):
    """i_x = sqrt(2) I_x cos(theta + phi_x + omega*h), low-pass filtered."""
    return np.array(state.step(theta, omega))


def reconstruct_interpolated(i_prev, i_next, n, N, theta):
    """Unfiltered waveform from phasors interpolated at substep n of N."""
    ph = interpolate_boundary(i_prev, i_next, n, N)
    return SQRT2 * ph.mag * np.cos(theta + ph.ang)


class InterpolatedState:
    """Per-window cache for the interpolated scheme."""

    def __init__(self):
        self.mag0 = np.zeros(3)
        self.ang0 = np.zeros(3)
        self.mag1 = np.zeros(3)
        self.dang = np.zeros(3)
        self.received = False

    def set_window(self, i_prev, i_next):
        self.mag0 = [float(m) for m in i_prev.mag]
        self.ang0 = [float(a) for a in i_prev.ang]
        self.mag1 = [float(m) for m in i_next.mag]
        self.dang = [float(d) for d in wrap_angle(i_next.ang - i_prev.ang)]
        self.received = True

    def params(self, r):
        """Peak amplitudes and angles interpolated at fraction ``r`` of the window."""
        amp = [0.0, 0.0, 0.0]
        ang = [0.0, 0.0, 0.0]
        for k in range(3):
            amp[k] = SQRT2 * (self.mag0[k] + r * (self.mag1[k] - self.mag0[k]))
            ang[k] = self.ang0[k] + r * self.dang[k]
        return amp, ang

    def step(self, r, theta):
        amp, ang = self.params(r)
        return [amp[k] * math.cos(theta + ang[k]) for k in range(3)]


# ------------------------------------------------------ secondary coupling


@dataclass
class SecondaryPoint:
    """A remote phasor-side bus whose device lives in the EMT domain.

    The EMT side sees a Thevenin source with impedance ``z_eq`` (the series
    impedance from the feeder head to the bus) feeding the device.
    """

    bus: str
    z_eq: np.ndarray


def secondary_coupling_step(point, v_remote, i_device):
    """Return (EMT source EMF phasor, phasor-side current drawn at the bus).

    The EMF adds the drop across ``z_eq`` back onto the remote voltage so
    that the device terminals sit at ``v_remote`` in steady state.
    """
    if point is None:
        raise KeyError("unregistered secondary coupling point")
    v = v_remote.to_complex() if isinstance(v_remote, PhasorSet) else np.asarray(v_remote, complex)
    i = i_device.to_complex() if isinstance(i_device, PhasorSet) else np.asarray(i_device, complex)
    emf = v + point.z_eq @ i
    return PhasorSet.from_complex(emf), PhasorSet.from_complex(i)
