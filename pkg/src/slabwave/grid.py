"""Fourier x Chebyshev spectral machinery on the slab Sigma x [-1, 0].

The horizontal directions are periodic with periods (L1, L2) and use the
real-FFT layout: spectral arrays carry the full first frequency axis (N1
entries, fftfreq order) and the non-negative half of the second
(N2 // 2 + 1 columns), so Hermitian symmetry of real data is structural.
The vertical direction uses Chebyshev-Gauss-Lobatto collocation mapped to
[-1, 0]; index 0 is the free surface x3 = 0 and index N3 - 1 the bottom
x3 = -1. A "spectral" volume array is Fourier in x' and collocation
values in x3, shape (N1, N2 // 2 + 1, N3).

Nonlinear products are evaluated pointwise in physical space on a grid
padded to ceil(3 N3 / 2) Lobatto nodes in the vertical, transformed back,
truncated, and masked with the horizontal 2/3 rule.
"""

import numpy as np
from scipy.fft import dct, rfft2, irfft2

from .errors import GridMismatch

TWO_PI = 2.0 * np.pi


def cheb_lobatto_nodes(n):
    """Gauss-Lobatto nodes cos(pi*j/(n-1)), descending from +1 to -1."""
    return np.cos(np.pi * np.arange(n) / (n - 1))


def cheb_diff_matrix(n):
    """Collocation differentiation matrix on the Lobatto nodes.

    Off-diagonal entries by the standard cardinal-function formula, the
    diagonal by the negative-sum trick for round-off robustness.
    """
    x = cheb_lobatto_nodes(n)
    c = np.ones(n)
    c[0] = c[-1] = 2.0
    c = c * (-1.0) ** np.arange(n)
    dx = x[:, None] - x[None, :] + np.eye(n)
    d = np.outer(c, 1.0 / c) / dx
    d -= np.diag(d.sum(axis=1))
    return d


def clenshaw_curtis_weights(n):
    """Quadrature weights on n Lobatto nodes, exact through degree n-1,
    for integration over [-1, 1]."""
    m = n - 1
    theta = np.pi * np.arange(n) / m
    w = np.zeros(n)
    ii = np.arange(1, m)
    v = np.ones(m - 1)
    if m % 2 == 0:
        w[0] = w[-1] = 1.0 / (m * m - 1)
        for k in range(1, m // 2):
            v -= 2.0 * np.cos(2.0 * k * theta[ii]) / (4.0 * k * k - 1)
        v -= np.cos(m * theta[ii]) / (m * m - 1)
    else:
        w[0] = w[-1] = 1.0 / (m * m)
        for k in range(1, (m - 1) // 2 + 1):
            v -= 2.0 * np.cos(2.0 * k * theta[ii]) / (4.0 * k * k - 1)
    w[ii] = 2.0 * v / m
    return w


def _cheb_coeffs(values):
    """Plain Chebyshev coefficients g_k (f = sum g_k T_k) along the last axis."""
    k = values.shape[-1] - 1
    if np.iscomplexobj(values):
        g = dct(values.real, type=1, axis=-1) + 1j * dct(values.imag, type=1, axis=-1)
    else:
        g = dct(values, type=1, axis=-1)
    g = g / k
    g[..., 0] *= 0.5
    g[..., -1] *= 0.5
    return g


def _cheb_values(coeffs, n):
    """Evaluate plain Chebyshev coefficients on n Lobatto nodes (n >= len)."""
    shape = coeffs.shape[:-1] + (n,)
    g = np.zeros(shape, dtype=coeffs.dtype)
    g[..., : coeffs.shape[-1]] = coeffs
    g[..., 0] *= 2.0
    g[..., -1] *= 2.0
    if np.iscomplexobj(g):
        return 0.5 * (dct(g.real, type=1, axis=-1) + 1j * dct(g.imag, type=1, axis=-1))
    return 0.5 * dct(g, type=1, axis=-1)


class Grid:
    """Discretization descriptor with cached transforms and multipliers.

    Immutable after construction; every field/operator in the package
    carries a reference to its Grid and operations verify compatibility.
    """

    def __init__(self, N1, N2, N3, L1=1.0, L2=1.0):
        if N1 % 2 != 0 or N2 % 2 != 0 or N1 < 8 or N2 < 8:
            raise ValueError("horizontal mode counts must be even and >= 8")
        if N3 < 9:
            raise ValueError("vertical collocation count must be >= 9")
        if L1 <= 0 or L2 <= 0:
            raise ValueError("torus periods must be positive")
        self.N1, self.N2, self.N3 = int(N1), int(N2), int(N3)
        self.L1, self.L2 = float(L1), float(L2)
        self.N2h = self.N2 // 2 + 1
        self.shape_surf = (self.N1, self.N2h)
        self.shape_vol = (self.N1, self.N2h, self.N3)

        # horizontal wavenumbers n = m / L (cycles) and k = 2 pi n (radians)
        m1 = np.fft.fftfreq(self.N1, 1.0 / self.N1)
        m2 = np.arange(self.N2h, dtype=float)
        self.n1 = (m1 / self.L1)[:, None]
        self.n2 = (m2 / self.L2)[None, :]
        self.k1 = TWO_PI * self.n1
        self.k2 = TWO_PI * self.n2
        self.ksq = self.k1**2 + self.k2**2
        self.absn = np.sqrt(self.n1**2 + self.n2**2)

        # derivative multipliers: the unpaired Nyquist mode is zeroed so
        # derivatives of real fields stay real
        ik1 = 1j * self.k1.copy()
        ik1[self.N1 // 2, 0] = 0.0
        ik2 = 1j * self.k2.copy()
        ik2[0, -1] = 0.0
        self.ik1 = ik1
        self.ik2 = ik2[0][None, :]

        # 2/3-rule mask: keep |n_i| <= N_i / (3 L_i)
        keep1 = np.abs(self.n1) <= self.N1 / (3.0 * self.L1)
        keep2 = self.n2 <= self.N2 / (3.0 * self.L2)
        self.dealias_mask = (keep1 & keep2).astype(float)

        # Parseval weights in the half layout: interior columns count twice
        w = np.full(self.shape_surf, 2.0)
        w[:, 0] = 1.0
        if self.N2 % 2 == 0:
            w[:, -1] = 1.0
        self.mode_weight = w

        # physical coordinates
        self.x1 = self.L1 * np.arange(self.N1) / self.N1
        self.x2 = self.L2 * np.arange(self.N2) / self.N2
        t = cheb_lobatto_nodes(self.N3)
        self.x3 = 0.5 * (t - 1.0)
        self.D3 = 2.0 * cheb_diff_matrix(self.N3)
        self.w3 = 0.5 * clenshaw_curtis_weights(self.N3)

        # padded vertical grid for dealiased products
        self.M3 = -(-3 * self.N3 // 2)
        tp = cheb_lobatto_nodes(self.M3)
        self.x3_pad = 0.5 * (tp - 1.0)

        self._hweights = None
        self._d3_powers_cache = {}

    @property
    def key(self):
        return (self.N1, self.N2, self.N3, self.L1, self.L2)

    def __eq__(self, other):
        return isinstance(other, Grid) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __repr__(self):
        return (f"Grid(N1={self.N1}, N2={self.N2}, N3={self.N3}, "
                f"L1={self.L1}, L2={self.L2})")

    def check_same(self, other):
        if self.key != other.key:
            raise GridMismatch(f"grid mismatch: {self} vs {other}")

    # ------------------------------------------------------------------
    # transforms
    # ------------------------------------------------------------------

    def surf_to_spectral(self, values):
        """Real surface samples (N1, N2) -> half-layout coefficients."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.N1, self.N2):
            raise GridMismatch(f"surface shape {values.shape} != {(self.N1, self.N2)}")
        return rfft2(values, axes=(0, 1)) / (self.N1 * self.N2)

    def surf_to_physical(self, spec):
        return irfft2(spec * (self.N1 * self.N2), s=(self.N1, self.N2), axes=(0, 1))

    def vol_to_spectral(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape[-3:-1] != (self.N1, self.N2):
            raise GridMismatch(f"volume shape {values.shape} incompatible with {self}")
        return rfft2(values, axes=(-3, -2)) / (self.N1 * self.N2)

    def vol_to_physical(self, spec):
        return irfft2(spec * (self.N1 * self.N2), s=(self.N1, self.N2), axes=(-3, -2))

    def pad3(self, spec, m=None):
        """Resample along the vertical axis to m Lobatto nodes (default padded)."""
        m = m or self.M3
        return _cheb_values(_cheb_coeffs(spec), m)

    def unpad3(self, arr):
        """Truncate a vertically padded array back to N3 nodes."""
        g = _cheb_coeffs(arr)[..., : self.N3]
        return _cheb_values(g, self.N3)

    def vol_to_physical_padded(self, spec):
        return self.vol_to_physical(self.pad3(spec))

    def vol_from_physical_padded(self, phys):
        return self.unpad3(self.vol_to_spectral(phys))

    # ------------------------------------------------------------------
    # differentiation and dealiasing
    # ------------------------------------------------------------------

    def d1(self, spec):
        if spec.ndim == 2:
            return self.ik1[:, :1] * spec
        return self.ik1[:, :, None] * spec

    def d2(self, spec):
        if spec.ndim == 2:
            return self.ik2 * spec
        return self.ik2[:, :, None] * spec

    def d3(self, spec):
        return np.einsum("ab,...b->...a", self.D3, spec)

    def d3_power(self, spec, p):
        if p == 0:
            return spec
        key = p
        mat = self._d3_powers_cache.get(key)
        if mat is None:
            mat = np.linalg.matrix_power(self.D3, p)
            self._d3_powers_cache[key] = mat
        return np.einsum("ab,...b->...a", mat, spec)

    def dealias(self, spec):
        """Zero horizontal modes beyond the 2/3 cutoff. Idempotent."""
        if spec.ndim == 2:
            return spec * self.dealias_mask
        return spec * self.dealias_mask[:, :, None]

    def product(self, *specs):
        """Dealiased pointwise product of volume spectral fields."""
        phys = self.vol_to_physical_padded(specs[0]).copy()
        for s in specs[1:]:
            phys *= self.vol_to_physical_padded(s)
        return self.dealias(self.vol_from_physical_padded(phys))

    def mul_coeff(self, spec, *coeff_padded):
        """Dealiased product of a spectral field with padded-physical factors."""
        phys = self.vol_to_physical_padded(spec)
        for c in coeff_padded:
            phys = phys * c
        return self.dealias(self.vol_from_physical_padded(phys))

    def surf_product(self, *items):
        """Dealiased pointwise product of surface fields.

        Each item is either a half-layout spectral array or a real physical
        array of shape (N1, N2).
        """
        phys = None
        for it in items:
            p = it if it.ndim == 2 and not np.iscomplexobj(it) and it.shape == (self.N1, self.N2) \
                else self.surf_to_physical(it)
            phys = p.copy() if phys is None else phys * p
        return self.dealias(self.surf_to_spectral(phys))

    # ------------------------------------------------------------------
    # quadrature
    # ------------------------------------------------------------------

    def integrate_surface(self, spec):
        """Integral over Sigma of a spectral surface field."""
        return float(spec[0, 0].real) * self.L1 * self.L2

    def integrate_volume(self, spec):
        """Integral over the slab of a spectral volume field."""
        return float(self.w3 @ spec[0, 0, :].real) * self.L1 * self.L2

    def integrate_surface_phys(self, values):
        return float(values.sum()) * self.L1 * self.L2 / (self.N1 * self.N2)

    def integrate_volume_phys(self, values):
        """Trapezoid-in-x' (exact for the band limit), Clenshaw-Curtis in x3."""
        w3 = self.w3 if values.shape[-1] == self.N3 else \
            0.5 * clenshaw_curtis_weights(values.shape[-1])
        col = np.einsum("...z,z->...", values, w3)
        return float(col.sum()) * self.L1 * self.L2 / (self.N1 * self.N2)

    # ------------------------------------------------------------------
    # norms
    # ------------------------------------------------------------------

    def sobolev_multiplier(self, s):
        return (1.0 + 4.0 * np.pi**2 * self.absn**2) ** s

    def surf_h_norm(self, spec, s):
        """H^s(Sigma) norm: multiplier convention, half-integers allowed."""
        s = float(s)
        if s < 0:
            raise ValueError("negative Sobolev order not supported")
        if abs(2 * s - round(2 * s)) > 1e-12:
            raise ValueError("surface Sobolev order must be a multiple of 1/2")
        dens = self.mode_weight * self.sobolev_multiplier(s) * np.abs(spec) ** 2
        return float(np.sqrt(dens.sum() * self.L1 * self.L2))

    def surf_l2(self, spec):
        return self.surf_h_norm(spec, 0.0)

    def vol_l2(self, spec):
        """L2(Omega) norm of a spectral (possibly multi-component) field."""
        dens = np.abs(spec) ** 2 @ self.w3
        if spec.ndim == 4:
            dens = dens.sum(axis=0)
        return float(np.sqrt((self.mode_weight * dens).sum() * self.L1 * self.L2))

    def _horizontal_weights(self):
        # W_m = sum_{a1+a2 <= m} k1^(2 a1) k2^(2 a2), m = 0..3
        if self._hweights is None:
            p1 = self.k1**2
            p2 = self.k2**2
            ws = []
            for m in range(4):
                w = np.zeros(self.shape_surf)
                for a1 in range(m + 1):
                    for a2 in range(m + 1 - a1):
                        w += p1**a1 * p2**a2
                ws.append(w)
            self._hweights = ws
        return self._hweights

    def vol_h_norm(self, spec, k):
        """H^k(Omega) norm: sum of L2 norms of all derivatives |alpha| <= k."""
        k = int(k)
        if k < 0 or k > 3:
            raise ValueError("volume Sobolev order must be an integer in 0..3")
        hw = self._horizontal_weights()
        total = 0.0
        d = spec
        for a3 in range(k + 1):
            if a3 > 0:
                d = self.d3(d)
            dens = np.abs(d) ** 2 @ self.w3
            if dens.ndim == 3:
                dens = dens.sum(axis=0)
            total += (self.mode_weight * hw[k - a3] * dens).sum()
        return float(np.sqrt(total * self.L1 * self.L2))

    def cheb_tail(self, spec, count=2):
        """Relative magnitude of the top vertical Chebyshev coefficients.

        Resolution monitor for pointwise rational evaluations (1/J etc.).
        """
        g = _cheb_coeffs(spec)
        tail = np.abs(g[..., -count:]).max()
        scale = np.abs(g).max()
        return float(tail / scale) if scale > 0 else 0.0
