"""Uniform periodic grids: spectral differentiation and trig interpolation."""

import numpy as np


def wavenumbers(n, period):
    """Signed wavenumbers (rad per unit length) of an n-point periodic grid."""
    return 2.0 * np.pi * np.fft.fftfreq(n, d=1.0) * n / period


def diff_matrix(n, period, order=1):
    """Dense spectral differentiation matrix for a uniform periodic grid.

    Odd orders zero the Nyquist mode (it carries no consistent sign for a
    real signal); even orders keep it.
    """
    k = wavenumbers(n, period)
    fac = (1j * k) ** order
    if order % 2 == 1 and n % 2 == 0:
        fac[n // 2] = 0.0
    F = np.fft.fft(np.eye(n), axis=0)
    return np.real(np.fft.ifft(fac[:, None] * F, axis=0))


def deriv_values(values, period, order=1, axis=-1):
    """Spectral derivative of grid values along a periodic axis."""
    n = values.shape[axis]
    if np.isrealobj(values):
        k = 2.0 * np.pi * np.arange(n // 2 + 1) / period
        fac = (1j * k) ** order
        if order % 2 == 1 and n % 2 == 0:
            fac[-1] = 0.0
        vhat = np.fft.rfft(values, axis=axis)
        shape = [1] * values.ndim
        shape[axis] = fac.size
        return np.fft.irfft(fac.reshape(shape) * vhat, n=n, axis=axis)
    k = wavenumbers(n, period)
    fac = (1j * k) ** order
    if order % 2 == 1 and n % 2 == 0:
        fac[n // 2] = 0.0
    vhat = np.fft.fft(values, axis=axis)
    shape = [1] * values.ndim
    shape[axis] = n
    return np.fft.ifft(fac.reshape(shape) * vhat, axis=axis)


class TrigInterp1D:
    """Trigonometric interpolant of (stacked) real samples on a periodic grid.

    values has shape (..., n); evaluation returns shape (..., nq).
    """

    def __init__(self, values, period):
        values = np.asarray(values, dtype=float)
        self.n = values.shape[-1]
        self.period = period
        c = np.fft.rfft(values, axis=-1)
        w = np.full(c.shape[-1], 2.0)
        w[0] = 1.0
        if self.n % 2 == 0:
            w[-1] = 1.0
        self._c = c * (w / self.n)
        self._k = np.arange(c.shape[-1]) * (2.0 * np.pi / period)

    def __call__(self, s, order=0):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        c = self._c * (1j * self._k) ** order if order else self._c
        if order and self.n % 2 == 0:
            c = c.copy()
            c[..., -1] = 0.0
        E = np.exp(1j * np.outer(s, self._k))
        return np.real(c @ E.T)


class TrigInterp2D:
    """Bivariate trig interpolant on an (n_a, n_b) doubly periodic grid.

    values has shape (..., n_a, n_b); points are scattered (a_q, b_q) pairs.
    """

    def __init__(self, values, period_a, period_b):
        values = np.asarray(values, dtype=float)
        self.na, self.nb = values.shape[-2:]
        self._C = np.fft.fft2(values, axes=(-2, -1)) / (self.na * self.nb)
        self._ka = wavenumbers(self.na, period_a)
        self._kb = wavenumbers(self.nb, period_b)

    def __call__(self, a, b, da=0, db=0):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        fa = (1j * self._ka) ** da if da else np.ones(self.na)
        fb = (1j * self._kb) ** db if db else np.ones(self.nb)
        if da % 2 == 1 and self.na % 2 == 0:
            fa = fa.copy()
            fa[self.na // 2] = 0.0
        if db % 2 == 1 and self.nb % 2 == 0:
            fb = fb.copy()
            fb[self.nb // 2] = 0.0
        C = self._C * fa[:, None] * fb[None, :]
        Ea = np.exp(1j * np.outer(a, self._ka))
        Eb = np.exp(1j * np.outer(b, self._kb))
        # f_q = sum_{m,k} C[m,k] Ea[q,m] Eb[q,k], batched over leading axes
        G = np.einsum("qk,...mk->...qm", Eb, C, optimize=True)
        return np.real(np.einsum("qm,...qm->...q", Ea, G))

    def with_derivs(self, a, b):
        """Value and both first derivatives in one pass (shared transforms)."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        ika = 1j * self._ka
        ikb = 1j * self._kb
        if self.na % 2 == 0:
            ika = ika.copy()
            ika[self.na // 2] = 0.0
        if self.nb % 2 == 0:
            ikb = ikb.copy()
            ikb[self.nb // 2] = 0.0
        Ea = np.exp(1j * np.outer(a, self._ka))
        Eb = np.exp(1j * np.outer(b, self._kb))
        G = np.einsum("qk,...mk->...qm", Eb, self._C, optimize=True)
        Gb = np.einsum("qk,...mk->...qm", Eb, self._C * ikb[None, :],
                       optimize=True)
        val = np.real(np.einsum("qm,...qm->...q", Ea, G))
        d_a = np.real(np.einsum("qm,...qm->...q", Ea * ika[None, :], G))
        d_b = np.real(np.einsum("qm,...qm->...q", Ea, Gb))
        return val, d_a, d_b
