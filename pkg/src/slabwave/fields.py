"""Field containers: scalar data on Sigma and scalar/vector data on the slab.

Both hold half-layout spectral coefficients (see grid.py) plus a grid
reference. Physical samples are derived views, never the stored truth.
"""

import numpy as np

from .errors import GridMismatch


class SurfaceField:
    """Scalar field on the torus Sigma, stored as Fourier coefficients."""

    def __init__(self, grid, coeffs, label=""):
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.shape != grid.shape_surf:
            raise GridMismatch(
                f"surface coefficients {coeffs.shape} != {grid.shape_surf}")
        self.grid = grid
        self.coeffs = coeffs
        self.label = label

    @classmethod
    def zeros(cls, grid, label=""):
        return cls(grid, np.zeros(grid.shape_surf, dtype=complex), label)

    @classmethod
    def from_physical(cls, grid, values, label=""):
        return cls(grid, grid.surf_to_spectral(values), label)

    @classmethod
    def cosine_mode(cls, grid, amplitude, kx=1, ky=0, label=""):
        """a * cos(2 pi kx x1 / L1) * cos(2 pi ky x2 / L2) set in coefficients."""
        x1 = grid.x1[:, None]
        x2 = grid.x2[None, :]
        vals = amplitude * np.cos(2 * np.pi * kx * x1 / grid.L1) \
            * np.cos(2 * np.pi * ky * x2 / grid.L2)
        return cls.from_physical(grid, vals, label)

    def physical(self):
        return self.grid.surf_to_physical(self.coeffs)

    def copy(self):
        return SurfaceField(self.grid, self.coeffs.copy(), self.label)

    def mean(self):
        return float(self.coeffs[0, 0].real)

    def norm_h(self, s):
        return self.grid.surf_h_norm(self.coeffs, s)

    def dealias(self):
        return SurfaceField(self.grid, self.grid.dealias(self.coeffs), self.label)

    def __add__(self, other):
        self.grid.check_same(other.grid)
        return SurfaceField(self.grid, self.coeffs + other.coeffs, self.label)

    def __sub__(self, other):
        self.grid.check_same(other.grid)
        return SurfaceField(self.grid, self.coeffs - other.coeffs, self.label)

    def __mul__(self, scalar):
        return SurfaceField(self.grid, self.coeffs * scalar, self.label)

    __rmul__ = __mul__


class VolumeField:
    """Scalar (N1, N2h, N3) or 3-vector (3, N1, N2h, N3) field on the slab."""

    def __init__(self, grid, coeffs, label=""):
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.shape == grid.shape_vol:
            self.ncomp = 1
        elif coeffs.shape == (3,) + grid.shape_vol:
            self.ncomp = 3
        else:
            raise GridMismatch(
                f"volume coefficients {coeffs.shape} incompatible with {grid.shape_vol}")
        self.grid = grid
        self.coeffs = coeffs
        self.label = label

    @classmethod
    def zeros(cls, grid, ncomp=1, label=""):
        shape = grid.shape_vol if ncomp == 1 else (3,) + grid.shape_vol
        return cls(grid, np.zeros(shape, dtype=complex), label)

    @classmethod
    def from_physical(cls, grid, values, label=""):
        return cls(grid, grid.vol_to_spectral(values), label)

    def physical(self):
        return self.grid.vol_to_physical(self.coeffs)

    def copy(self):
        return VolumeField(self.grid, self.coeffs.copy(), self.label)

    def component(self, i):
        if self.ncomp == 1:
            raise ValueError("scalar field has no components")
        return VolumeField(self.grid, self.coeffs[i], self.label)

    def top(self):
        """Trace on the free surface x3 = 0 (collocation row 0)."""
        return self.coeffs[..., 0]

    def bottom(self):
        return self.coeffs[..., -1]

    def norm_h(self, k):
        return self.grid.vol_h_norm(self.coeffs, k)

    def norm_l2(self):
        return self.grid.vol_l2(self.coeffs)

    def dealias(self):
        if self.ncomp == 1:
            return VolumeField(self.grid, self.grid.dealias(self.coeffs), self.label)
        out = np.stack([self.grid.dealias(c) for c in self.coeffs])
        return VolumeField(self.grid, out, self.label)

    def __add__(self, other):
        self.grid.check_same(other.grid)
        return VolumeField(self.grid, self.coeffs + other.coeffs, self.label)

    def __sub__(self, other):
        self.grid.check_same(other.grid)
        return VolumeField(self.grid, self.coeffs - other.coeffs, self.label)

    def __mul__(self, scalar):
        return VolumeField(self.grid, self.coeffs * scalar, self.label)

    __rmul__ = __mul__
