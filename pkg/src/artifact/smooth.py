"""Compactly supported C-infinity building blocks: bumps, ramps and plateaus."""
from __future__ import annotations

import numpy as np
from numpy.polynomial import Polynomial

_GL_X, _GL_W = np.polynomial.legendre.leggauss(96)


def _gauss(fun, a, b):
    """Vectorised Gauss-Legendre integral of ``fun`` over ``[a, b]`` (arrays allowed)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    s = mid[..., None] + half[..., None] * _GL_X
    return half * np.sum(fun(s) * _GL_W, axis=-1)


class Bump:
    """``amp * exp(1 - 1/(1 - z^2))`` with ``z`` mapping ``[a, b]`` onto ``[-1, 1]``.

    The peak value is ``amp`` at the centre of the support.
    """

    def __init__(self, a: float, b: float, amp: float = 1.0):
        if not b > a:
            raise ValueError("bump support must satisfy b > a")
        self.a, self.b, self.amp = float(a), float(b), float(amp)
        self._k = 2.0 / (self.b - self.a)
        self._polys = [Polynomial([1.0])]
        self._mass = None

    def _poly(self, n):
        # B^(n) = k^n B p_n(z) / q^(2n),  q = 1 - z^2
        q = Polynomial([1.0, 0.0, -1.0])
        z = Polynomial([0.0, 1.0])
        while len(self._polys) <= n:
            m = len(self._polys) - 1
            p = self._polys[-1]
            self._polys.append(p.deriv() * q * q + 4 * m * z * q * p - 2 * z * p)
        return self._polys[n]

    def __call__(self, t, n: int = 0):
        """Value (``n = 0``) or ``n``-th derivative at ``t``."""
        t = np.asarray(t, dtype=float)
        z = (2.0 * t - self.a - self.b) / (self.b - self.a)
        inside = np.abs(z) < 1.0
        zi = np.where(inside, z, 0.0)
        q = 1.0 - zi * zi
        base = self.amp * np.exp(1.0 - 1.0 / q)
        if n:
            base = base * self._k ** n * self._poly(n)(zi) / q ** (2 * n)
        return np.where(inside, base, 0.0)

    @property
    def mass(self) -> float:
        if self._mass is None:
            self._mass = float(_gauss(self, self.a, self.b))
        return self._mass

    def integral(self, t):
        """``int_a^t`` of the bump."""
        t = np.clip(np.asarray(t, dtype=float), self.a, self.b)
        return _gauss(self, np.full_like(t, self.a), t)

    def scaled(self, amp: float) -> "Bump":
        return Bump(self.a, self.b, amp)


class Ramp:
    """Smooth monotone step from 0 (``t <= a``) to 1 (``t >= b``)."""

    def __init__(self, a: float, b: float):
        self.bump = Bump(a, b)
        self.a, self.b = float(a), float(b)

    def __call__(self, t, n: int = 0):
        t = np.asarray(t, dtype=float)
        if n == 0:
            return self.bump.integral(t) / self.bump.mass
        return self.bump(t, n - 1) / self.bump.mass

    def antiderivative(self, t):
        """``int_0^t`` of the ramp."""
        t = np.asarray(t, dtype=float)
        upper = np.clip(t, self.a, self.b)
        inner = _gauss(lambda s: (t[..., None] - s) * self.bump(s),
                       np.full_like(t, self.a), upper) / self.bump.mass
        return np.where(t <= self.a, 0.0, inner)


class Plateau:
    """Equal to 1 on ``[0, a]`` and 0 on ``[b, inf)``."""

    def __init__(self, a: float = 1.0, b: float = 2.0):
        self.ramp = Ramp(a, b)
        self.a, self.b = float(a), float(b)

    def __call__(self, t, n: int = 0):
        if n == 0:
            return 1.0 - self.ramp(t)
        return -self.ramp(t, n)

    def tail_integral(self, t):
        """``int_t^inf`` of the plateau."""
        t = np.asarray(t, dtype=float)
        total_after = lambda s: (self.b - s) - (self.ramp.antiderivative(np.full_like(s, self.b))
                                                - self.ramp.antiderivative(s))
        tc = np.clip(t, 0.0, self.b)
        head = np.where(tc < self.a, self.a - tc, 0.0)
        return np.where(t >= self.b, 0.0, head + total_after(np.maximum(tc, self.a)))
