"""Minimal forward-mode derivative carrier for the fault-on Taylor series.

A Jet holds a vector of values together with its dense Jacobian with
respect to a fixed list of problem variables.  Only the operations the
series recursion needs are implemented: elementwise arithmetic against
Jets or constants, sin/cos, gather and scatter-add.  ``sin``/``cos``
here dispatch on type so the same series code runs on plain ndarrays.
"""

from __future__ import annotations

import numpy as np


class Jet:
    __slots__ = ("val", "jac")
    # make ndarray binary ops defer to the reflected Jet operators
    __array_ufunc__ = None

    def __init__(self, val, jac):
        self.val = np.asarray(val, dtype=float)
        self.jac = np.asarray(jac, dtype=float)

    @classmethod
    def constant(cls, val, nz: int) -> "Jet":
        v = np.asarray(val, dtype=float)
        return cls(v, np.zeros(v.shape + (nz,)))

    @classmethod
    def variable(cls, val, cols, nz: int) -> "Jet":
        """Seed: component k differentiates to unit vector e_{cols[k]}."""
        v = np.asarray(val, dtype=float)
        j = np.zeros(v.shape + (nz,))
        for k, col in enumerate(np.atleast_1d(cols)):
            j[k, col] = 1.0
        return cls(v, j)

    @property
    def nz(self) -> int:
        return self.jac.shape[-1]

    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val + other.val, self.jac + other.jac)
        return Jet(self.val + other, self.jac.copy())

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val - other.val, self.jac - other.jac)
        return Jet(self.val - other, self.jac.copy())

    def __rsub__(self, other):
        return Jet(other - self.val, -self.jac)

    def __mul__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val * other.val,
                       self.jac * other.val[..., None]
                       + other.jac * self.val[..., None])
        other = np.asarray(other, dtype=float)
        return Jet(self.val * other, self.jac * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = np.asarray(other, dtype=float)
        return Jet(self.val / other, self.jac / other[..., None])

    def __neg__(self):
        return Jet(-self.val, -self.jac)

    def __getitem__(self, idx):
        return Jet(np.atleast_1d(self.val[idx]),
                   np.atleast_2d(self.jac[idx]))


def sin(x):
    if isinstance(x, Jet):
        return Jet(np.sin(x.val), np.cos(x.val)[..., None] * x.jac)
    return np.sin(x)


def cos(x):
    if isinstance(x, Jet):
        return Jet(np.cos(x.val), -np.sin(x.val)[..., None] * x.jac)
    return np.cos(x)


def zeros_like_template(template, shape):
    if isinstance(template, Jet):
        return Jet(np.zeros(shape), np.zeros(shape + (template.nz,)))
    return np.zeros(shape)


def index_add(target, idx, value):
    """target[idx] += value, functional over ndarray or Jet."""
    if isinstance(target, Jet):
        v = target.val.copy()
        j = target.jac.copy()
        if isinstance(value, Jet):
            np.add.at(v, idx, value.val)
            np.add.at(j, idx, value.jac)
        else:
            np.add.at(v, idx, value)
        return Jet(v, j)
    v = target.copy()
    np.add.at(v, idx, value.val if isinstance(value, Jet) else value)
    return v


def gather(x, idx):
    if isinstance(x, Jet):
        return Jet(x.val[idx], x.jac[idx])
    return x[idx]
