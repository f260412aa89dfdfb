"""Three-phase phasor snapshots exchanged between the two solver domains."""
from dataclasses import dataclass

import numpy as np


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2 * np.pi, w)


@dataclass(frozen=True)
class PhasorSet:
    """Per-phase RMS magnitude and angle (rad) for phases a, b, c."""

    mag: np.ndarray
    ang: np.ndarray

    def __post_init__(self):
        mag = np.array(self.mag, dtype=float).reshape(3)
        if np.any(mag < 0):
            raise ValueError(f"negative phasor magnitude {mag}")
        ang = wrap_angle(np.array(self.ang, dtype=float).reshape(3))
        mag.flags.writeable = False
        ang.flags.writeable = False
        object.__setattr__(self, "mag", mag)
        object.__setattr__(self, "ang", ang)

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z, dtype=complex)
        return cls(np.abs(z), np.angle(z))

    @classmethod
    def zeros(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def balanced(cls, mag, angle=0.0):
        return cls(np.full(3, float(mag)), angle + np.array([0.0, -2 * np.pi / 3, 2 * np.pi / 3]))

    def to_complex(self):
        return self.mag * np.exp(1j * self.ang)

    def __eq__(self, other):
        if not isinstance(other, PhasorSet):
            return NotImplemented
        return np.array_equal(self.mag, other.mag) and np.array_equal(self.ang, other.ang)

    __hash__ = None
