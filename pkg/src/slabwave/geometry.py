"""Flattening-map geometry: coefficient fields and transformed operators.

The free surface eta is lifted to the slab by its harmonic extension
(mode factor e^{2 pi |n| x3}), which defines the map
Phi(x) = (x1, x2, x3 + ebar * (1 + x3)) onto the moving domain. All
coefficient fields are rational or polynomial expressions in ebar and its
derivatives; A, B, J are linear in ebar and evaluated exactly in the mixed
Fourier/collocation representation, while K = 1/J and the unit normal are
evaluated pointwise on the physical grid (their Chebyshev tail is the
resolution monitor for this approximation).
"""

import numpy as np

from .errors import DiffeomorphismLost, GridMismatch
from .fields import SurfaceField, VolumeField

TWO_PI = 2.0 * np.pi


def harmonic_extension(eta, grid=None, x3=None):
    """Lift a surface field into the slab with mode factor e^{2 pi |n| x3}.

    Returns a VolumeField whose trace at x3 = 0 equals eta exactly in
    coefficients; each mode is harmonic by construction.
    """
    if grid is None:
        grid = eta.grid
    elif grid.key != eta.grid.key:
        raise GridMismatch("extension grid does not match the surface grid")
    nodes = grid.x3 if x3 is None else x3
    decay = np.exp(TWO_PI * grid.absn[:, :, None] * nodes[None, None, :])
    return VolumeField(grid, eta.coeffs[:, :, None] * decay, label="eta_bar")


def _flattening_spectral(grid, eta_coeffs, x3, include_identity=True):
    """Spectral (A, B, J) on the given vertical nodes.

    With include_identity=False the identity parts are dropped, which turns
    J into its time-derivative form dJ = ebar_t + d3(ebar_t) W when called
    with the coefficients of a surface time derivative.
    """
    absn = grid.absn[:, :, None]
    ebar = eta_coeffs[:, :, None] * np.exp(TWO_PI * absn * x3[None, None, :])
    w = (1.0 + x3)[None, None, :]
    a = grid.ik1[:, :, None] * ebar * w
    b = grid.ik2[:, :, None] * ebar * w
    j = ebar + TWO_PI * absn * ebar * w
    if include_identity:
        j = j.copy()
        j[0, 0, :] += 1.0
    return ebar, a, b, j


class GeometryCache:
    """All flattening coefficients and surface normals at one time instant.

    Immutable after construction; padded-physical coefficient arrays for
    dealiased products are materialized lazily and cached.
    """

    def __init__(self, grid, eta, j_floor=0.1):
        self.grid = grid
        self.eta = eta
        ebar, a, b, j = _flattening_spectral(grid, eta.coeffs, grid.x3)
        self.eta_bar = VolumeField(grid, ebar, "eta_bar")
        self.A = VolumeField(grid, a, "A")
        self.B = VolumeField(grid, b, "B")
        self.J = VolumeField(grid, j, "J")

        self.J_phys = grid.vol_to_physical(j)
        self.min_j = float(self.J_phys.min())
        self.j_floor = j_floor
        if j_floor is not None and self.min_j <= j_floor:
            raise DiffeomorphismLost(self.min_j, j_floor)
        self.K_phys = 1.0 / self.J_phys
        self.K = VolumeField(grid, grid.vol_to_spectral(self.K_phys), "K")
        wvals = np.zeros(grid.shape_vol, dtype=complex)
        wvals[0, 0, :] = 1.0 + grid.x3
        self.W = VolumeField(grid, wvals, "W")

        # surface slope and normals (N is exact; nu is pointwise rational)
        self.d1eta = grid.d1(eta.coeffs)
        self.d2eta = grid.d2(eta.coeffs)
        self.d1eta_phys = grid.surf_to_physical(self.d1eta)
        self.d2eta_phys = grid.surf_to_physical(self.d2eta)
        self.N_phys = np.stack([
            -self.d1eta_phys,
            -self.d2eta_phys,
            np.ones_like(self.d1eta_phys),
        ])
        self.Nnorm2_phys = 1.0 + self.d1eta_phys**2 + self.d2eta_phys**2
        self.nu_phys = self.N_phys / np.sqrt(self.Nnorm2_phys)

        self._phys = {
            "A": grid.vol_to_physical(a),
            "B": grid.vol_to_physical(b),
            "J": self.J_phys,
            "K": self.K_phys,
        }
        self._phys["AK"] = self._phys["A"] * self.K_phys
        self._phys["BK"] = self._phys["B"] * self.K_phys
        self._pad = None

    @property
    def is_flat(self):
        return not np.any(self.eta.coeffs)

    def phys(self, name):
        """Coefficient field values on the natural physical grid."""
        return self._phys[name]

    def pad(self, name):
        """Coefficient field values on the vertically padded product grid."""
        if self._pad is None:
            g = self.grid
            _, a, b, j = _flattening_spectral(g, self.eta.coeffs, g.x3_pad)
            ap = g.vol_to_physical(a)
            bp = g.vol_to_physical(b)
            jp = g.vol_to_physical(j)
            kp = 1.0 / jp
            self._pad = {
                "A": ap, "B": bp, "J": jp, "K": kp,
                "AK": ap * kp, "BK": bp * kp, "one_minus_K": 1.0 - kp,
                "W": np.broadcast_to(1.0 + g.x3_pad, jp.shape),
            }
        return self._pad[name]

    def N_spec(self):
        """Non-unit normal (-d1 eta, -d2 eta, 1) as spectral surface arrays."""
        one = np.zeros(self.grid.shape_surf, dtype=complex)
        one[0, 0] = 1.0
        return np.stack([-self.d1eta, -self.d2eta, one])

    def tangent_phys(self, j):
        """Surface tangent T_j = e_j + (d_j eta) e_3 on the physical grid."""
        dj = self.d1eta_phys if j == 0 else self.d2eta_phys
        t = np.zeros((3,) + dj.shape)
        t[j] = 1.0
        t[2] = dj
        return t

    def transform_matrix_phys(self):
        """The matrix field curly-A on the physical grid, shape (3, 3, ...)."""
        g = self.grid
        out = np.zeros((3, 3) + (g.N1, g.N2, g.N3))
        out[0, 0] = out[1, 1] = 1.0
        out[0, 2] = -self._phys["AK"]
        out[1, 2] = -self._phys["BK"]
        out[2, 2] = self.K_phys
        return out

    def jacobian_matrix_phys(self):
        """The Jacobi matrix grad(Phi) on the physical grid."""
        g = self.grid
        out = np.zeros((3, 3) + (g.N1, g.N2, g.N3))
        out[0, 0] = out[1, 1] = 1.0
        out[2, 0] = self._phys["A"]
        out[2, 1] = self._phys["B"]
        out[2, 2] = self.J_phys
        return out

    def flux_matrix_phys(self):
        """M = J grad(Phi) on the physical grid."""
        m = self.jacobian_matrix_phys()
        return m * self.J_phys[None, None]


def build_geometry(eta, j_floor=0.1):
    """Assemble the geometry cache for a surface height field.

    Raises DiffeomorphismLost when min J <= j_floor; pass j_floor=None to
    skip the guard (diagnostic use only).
    """
    return GeometryCache(eta.grid, eta, j_floor=j_floor)


class GeometryRates:
    """Time derivatives of the flattening coefficients, from d_t eta.

    All expressions follow by the chain rule from the coefficient
    definitions, with ebar_t the harmonic extension of d_t eta.
    """

    def __init__(self, cache, dteta):
        g = cache.grid
        g.check_same(dteta.grid)
        ebar_t, da, db, dj = _flattening_spectral(
            g, dteta.coeffs, g.x3, include_identity=False)
        self.dteta = dteta
        self.dteta_bar = VolumeField(g, ebar_t, "dteta_bar")
        self.dA_phys = g.vol_to_physical(da)
        self.dB_phys = g.vol_to_physical(db)
        self.dJ_phys = g.vol_to_physical(dj)
        k = cache.K_phys
        self.dK_phys = -k * k * self.dJ_phys
        self.dAK_phys = self.dA_phys * k + cache.phys("A") * self.dK_phys
        self.dBK_phys = self.dB_phys * k + cache.phys("B") * self.dK_phys

    def flux_matrix_rate_phys(self, cache):
        """d_t M with M = J grad(Phi)."""
        g = cache.grid
        a, b, j = cache.phys("A"), cache.phys("B"), cache.J_phys
        da, db, dj = self.dA_phys, self.dB_phys, self.dJ_phys
        out = np.zeros((3, 3) + (g.N1, g.N2, g.N3))
        out[0, 0] = out[1, 1] = dj
        out[2, 0] = dj * a + j * da
        out[2, 1] = dj * b + j * db
        out[2, 2] = 2.0 * j * dj
        return out


# ----------------------------------------------------------------------
# transformed differential operators (pseudo-spectral)
# ----------------------------------------------------------------------

def _tgrad(coeffs, cache):
    """Twisted gradient of a raw spectral scalar: rows of nabla_A."""
    g = cache.grid
    d3f = g.d3(coeffs)
    prods = _mul_multi(g, d3f, [cache.pad("AK"), cache.pad("BK"), cache.pad("K")])
    return np.stack([
        g.dealias(g.d1(coeffs)) - prods[0],
        g.dealias(g.d2(coeffs)) - prods[1],
        prods[2],
    ])


def _mul_multi(g, spec, coeff_list):
    phys = g.vol_to_physical_padded(spec)
    return [g.dealias(g.vol_from_physical_padded(phys * c)) for c in coeff_list]


def grad_A(f, cache):
    """Transformed gradient (nabla_A f)_i = A_ij d_j f."""
    cache.grid.check_same(f.grid)
    return VolumeField(f.grid, _tgrad(f.coeffs, cache), "grad_A " + f.label)


def _div_A_raw(comps, cache):
    g = cache.grid
    out = g.dealias(g.d1(comps[0]) + g.d2(comps[1]))
    out -= _mul_multi(g, g.d3(comps[0]), [cache.pad("AK")])[0]
    out -= _mul_multi(g, g.d3(comps[1]), [cache.pad("BK")])[0]
    out += _mul_multi(g, g.d3(comps[2]), [cache.pad("K")])[0]
    return out


def div_A(X, cache):
    """Transformed divergence A_ij d_j X_i of a vector field."""
    cache.grid.check_same(X.grid)
    if X.ncomp != 3:
        raise ValueError("div_A expects a 3-vector field")
    return VolumeField(X.grid, _div_A_raw(X.coeffs, cache), "div_A " + X.label)


def _sym_grad_A_raw(comps, cache):
    gv = np.stack([_tgrad(c, cache) for c in comps], axis=1)  # gv[i, j] = (grad_A v_j)_i
    return gv + gv.transpose(1, 0, 2, 3, 4)


def sym_grad_A(u, cache):
    """Symmetric transformed gradient (D_A u)_ij = A_ik d_k u_j + A_jk d_k u_i.

    Returns the raw (3, 3, N1, N2h, N3) spectral tensor.
    """
    cache.grid.check_same(u.grid)
    return _sym_grad_A_raw(u.coeffs, cache)


def stress_A(p, u, cache):
    """Transformed stress S_A(p, u) = p I - D_A u as a raw spectral tensor."""
    cache.grid.check_same(p.grid)
    s = -_sym_grad_A_raw(u.coeffs, cache)
    for i in range(3):
        s[i, i] += p.coeffs
    return s


def div_A_tensor(tensor, cache):
    """Row-wise transformed divergence (div_A S)_i = A_jk d_k S_ij."""
    return np.stack([_div_A_raw(tensor[i], cache) for i in range(3)])


def laplacian_A(f, cache):
    """Delta_A f = div_A(grad_A f), assembled by operator composition."""
    return VolumeField(f.grid, _div_A_raw(_tgrad(f.coeffs, cache), cache),
                       "lap_A " + f.label)


def mean_curvature(eta):
    """Twice the mean curvature of the graph of eta.

    div*(grad* eta / sqrt(1 + |grad* eta|^2)), evaluated pointwise on the
    physical grid (rational nonlinearity) and dealiased.
    """
    g = eta.grid
    g1 = g.surf_to_physical(g.d1(eta.coeffs))
    g2 = g.surf_to_physical(g.d2(eta.coeffs))
    root = np.sqrt(1.0 + g1 * g1 + g2 * g2)
    w1 = g.surf_to_spectral(g1 / root)
    w2 = g.surf_to_spectral(g2 / root)
    return SurfaceField(g, g.dealias(g.d1(w1) + g.d2(w2)), "H " + eta.label)


def tangential_project(v, cache):
    """Remove the unit-normal component of a surface 3-vector field.

    Input and output are raw spectral stacks of shape (3, N1, N2h); the
    projection is pointwise, so the result is orthogonal to nu at every
    physical grid point (no dealiasing is applied).
    """
    g = cache.grid
    vp = np.stack([g.surf_to_physical(c) for c in v])
    vdotnu = np.einsum("c...,c...->...", vp, cache.nu_phys)
    out = vp - vdotnu[None] * cache.nu_phys
    return np.stack([g.surf_to_spectral(c) for c in out])
