"""Variable-coefficient Stokes solver: perturbation of a flat-slab kernel.

The transformed Stokes system on the slab,

    div_A S_A(q, v) = G1,   div_A v = G2   in the volume,
    S_A(q, v) N = (xi - lap* xi) N + G3    on the top,
    v . N = G4                             on the top,
    v = 0                                  at the bottom,

is solved by Picard iteration: each sweep folds the geometric deviation
(I - A) of the current iterate into flat-frame data (R1, R2, R3, R4) and
solves the constant-coefficient problem

    div S(q, v) = R1,  div v = R2,  Dv e3.e_j = R3_j,  v3 = R4,  v|_bot = 0

mode by horizontal mode with a dense collocation matrix per mode. The
surface unknown xi is recovered afterwards from the normal-stress trace
by inverting (1 - lap*) diagonally.

The flat operator block-diagonalizes over horizontal wavenumbers; the
per-mode matrices depend only on the grid (and, for the time stepper,
dt), so their inverses are precomputed once and reused batched. One
iterative-refinement pass keeps per-mode residuals near round-off.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NonContraction
from .fields import SurfaceField, VolumeField

_MAX_CACHED_SOLVERS = 3
_solver_cache = {}


@dataclass
class StokesRHS:
    """Data (G1, G2, G3, G4) of the transformed Stokes system.

    g3 is a raw spectral surface 3-vector, shape (3, N1, N2h).
    """
    g1: VolumeField
    g2: VolumeField
    g3: np.ndarray
    g4: SurfaceField

    def compatibility_defect(self):
        """int_Omega G2 - int_Sigma G4 (solvability requires ~ 0)."""
        g = self.g2.grid
        return g.integrate_volume(self.g2.coeffs) - g.integrate_surface(self.g4.coeffs)

    @classmethod
    def zeros(cls, grid):
        return cls(VolumeField.zeros(grid, 3), VolumeField.zeros(grid),
                   np.zeros((3,) + grid.shape_surf, dtype=complex),
                   SurfaceField.zeros(grid))


@dataclass
class StokesSolution:
    v: VolumeField
    q: VolumeField
    xi: SurfaceField


@dataclass
class FixpointReport:
    iterations: int
    residual_history: list
    contraction_estimate: float
    converged: bool
    residuals: dict = field(default_factory=dict)


# ----------------------------------------------------------------------
# per-mode flat matrices
# ----------------------------------------------------------------------

class BatchedModeSolver:
    """Dense collocation solves for every horizontal mode, batched.

    Stationary layout (dt is None), unknowns [v1, v2, v3, q] of size 4*N3:
      block r=0 rows carry the top boundary conditions, r=N3-1 the bottom
      no-slip rows, momentum is collocated at interior nodes and the
      continuity equation at every node. The (0,0) mode swaps in a
      pressure-gauge row and moves one momentum row to the bottom node,
      which removes the constant-pressure/spurious-mode degeneracy.

    Time-step layout (dt given) appends the implicit surface unknown xi:
      the top v3 row becomes the normal-stress row and a kinematic row
      closes the system; no gauge is needed since the stress row pins q.
    """

    def __init__(self, grid, dt=None):
        self.grid = grid
        self.dt = dt
        n3 = grid.N3
        self.nuk = 4 * n3 + (1 if dt is not None else 0)
        eye = np.eye(n3)
        d = grid.D3
        d2 = d @ d
        w3 = grid.w3

        k1v = np.broadcast_to(grid.k1, grid.shape_surf).ravel()
        k2v = np.broadcast_to(grid.k2, grid.shape_surf).ravel()
        nmodes = k1v.size
        a = np.zeros((nmodes, self.nuk, self.nuk), dtype=complex)

        sl = [slice(0, n3), slice(n3, 2 * n3), slice(2 * n3, 3 * n3),
              slice(3 * n3, 4 * n3)]
        interior = slice(1, n3 - 1)
        mass = (1.0 / dt) if dt is not None else 0.0

        for m in range(nmodes):
            k1, k2 = k1v[m], k2v[m]
            ksq = k1 * k1 + k2 * k2
            am = a[m]
            # momentum rows at interior nodes (literal div S form)
            mom1 = (mass * eye - d2 + (ksq + k1 * k1) * eye,
                    (k1 * k2) * eye, -1j * k1 * d, 1j * k1 * eye)
            mom2 = ((k1 * k2) * eye,
                    mass * eye - d2 + (ksq + k2 * k2) * eye,
                    -1j * k2 * d, 1j * k2 * eye)
            mom3 = (-1j * k1 * d, -1j * k2 * d,
                    mass * eye - 2.0 * d2 + ksq * eye, d)
            for blk, mom in zip(sl[:3], (mom1, mom2, mom3)):
                for col, piece in zip(sl, mom):
                    am[blk, col][interior] = piece[interior]
            # continuity at every node
            am[sl[3], sl[0]] += 1j * k1 * eye
            am[sl[3], sl[1]] += 1j * k2 * eye
            am[sl[3], sl[2]] += d
            # bottom no-slip
            for i in range(3):
                am[sl[i].start + n3 - 1, sl[i].start + n3 - 1] = 1.0
            # top rows
            am[sl[0].start, sl[0]] = d[0]
            am[sl[0].start, sl[2].start] += 1j * k1
            am[sl[1].start, sl[1]] = d[0]
            am[sl[1].start, sl[2].start] += 1j * k2
            if dt is None:
                am[sl[2].start, sl[2].start] = 1.0        # v3(0) = R4
            else:
                # normal stress: q(0) - 2 (D v3)(0) - (1 + ksq) xi = R5
                am[sl[2].start, sl[3].start] = 1.0
                am[sl[2].start, sl[2]] = -2.0 * d[0]
                am[sl[2].start, -1] = -(1.0 + ksq)
                # kinematic: xi - dt v3(0) = eta + dt R6
                am[-1, -1] = 1.0
                am[-1, sl[2].start] = -dt

            if k1 == 0.0 and k2 == 0.0:
                if dt is None:
                    # pressure gauge replaces the top v3 row
                    am[sl[2].start] = 0.0
                    am[sl[2].start, sl[3]] = w3
                # momentum-3 at the bottom node replaces the top continuity row
                am[sl[3].start] = 0.0
                for col, piece in zip(sl, mom3):
                    am[sl[3].start, col] = piece[n3 - 1]

        scale = np.abs(a).max(axis=2)
        scale[scale == 0.0] = 1.0
        self.operator = a
        self.row_scale = scale
        self.inverse = np.linalg.inv(a / scale[:, :, None])
        self._n3 = n3
        self._slices = sl
        self._nmodes = nmodes

    def solve(self, rhs):
        """Solve A x = rhs for every mode; rhs shape (nmodes, nuk)."""
        x = np.matmul(self.inverse, (rhs / self.row_scale)[:, :, None])[:, :, 0]
        resid = rhs - np.matmul(self.operator, x[:, :, None])[:, :, 0]
        x += np.matmul(self.inverse, (resid / self.row_scale)[:, :, None])[:, :, 0]
        return x

    # -- packing -------------------------------------------------------

    def pack_stationary(self, r1, r2, r3, r4):
        """Stack flat-problem data into per-mode RHS vectors."""
        g = self.grid
        n3 = self._n3
        nm = self._nmodes
        b = np.zeros((nm, self.nuk), dtype=complex)
        r1f = r1.reshape(3, nm, n3)
        for i in range(3):
            blk = b[:, self._slices[i]]
            blk[:, 1:-1] = r1f[i][:, 1:-1]
        b[:, self._slices[0].start] = r3[0].ravel()
        b[:, self._slices[1].start] = r3[1].ravel()
        b[:, self._slices[2].start] = r4.ravel()
        b[:, self._slices[3]] = r2.reshape(nm, n3)
        # (0,0) mode: gauge row is homogeneous, momentum-3 moves to the bottom
        b[0, self._slices[2].start] = 0.0
        b[0, self._slices[3].start] = r1f[2][0, -1]
        return b

    def unpack(self, x):
        g = self.grid
        n3 = self._n3
        shape = (g.N1, g.N2h, n3)
        v = np.stack([x[:, s].reshape(shape) for s in self._slices[:3]])
        q = x[:, self._slices[3]].reshape(shape)
        if self.dt is None:
            return v, q
        xi = x[:, -1].reshape(g.shape_surf)
        return v, q, xi


def get_mode_solver(grid, dt=None):
    """Shared per-(grid, dt) solver instances; small FIFO cache."""
    key = grid.key + (dt,)
    if key not in _solver_cache:
        if len(_solver_cache) >= _MAX_CACHED_SOLVERS:
            _solver_cache.pop(next(iter(_solver_cache)))
        _solver_cache[key] = BatchedModeSolver(grid, dt)
    return _solver_cache[key]


def solve_flat_stokes(rhs, solver=None):
    """Solve the constant-coefficient system for flat-frame data.

    rhs carries (R1, R2, R3, R4) in the flat frame: g1 the volume forcing,
    g2 the divergence, g3 the two tangential stress traces stored in the
    first two components, g4 the normal velocity trace.
    """
    grid = rhs.g1.grid
    if solver is None:
        solver = get_mode_solver(grid)
    b = solver.pack_stationary(rhs.g1.coeffs, rhs.g2.coeffs,
                               rhs.g3[:2], rhs.g4.coeffs)
    v, q = solver.unpack(solver.solve(b))
    return VolumeField(grid, v, "v"), VolumeField(grid, q, "q")


# ----------------------------------------------------------------------
# perturbation assembly (the I - A terms)
# ----------------------------------------------------------------------

def _flat_grad(grid, comps):
    """gv[i][j] = d_i v_j, spectral."""
    return [[grid.d1(c) for c in comps],
            [grid.d2(c) for c in comps],
            [grid.d3(c) for c in comps]]


def _flat_sym_grad(grid, comps):
    gv = _flat_grad(grid, comps)
    return [[gv[i][j] + gv[j][i] for j in range(3)] for i in range(3)]


def assemble_perturbations(cache, v, q, rhs):
    """Fold the geometric deviation of the iterate into flat-frame data.

    Implements
      R1 = G1 + div_{I-A} S_A(q, v) - div D_{I-A} v,
      R2 = G2 + div_{I-A} v,
      R3_j = -G3.T_j + D_{I-A} v N . T_j + Dv (e3 - N).e_j + Dv N.(e_j - T_j),
      R4 = G4 + v.(e3 - N),
    with T_j the (non-unit) surface tangents and e3 the flat normal.
    At eta = 0 every perturbation term vanishes identically.

    Returns raw arrays (r1 (3,...), r2, r3 (2, N1, N2h), r4).
    """
    g = cache.grid
    vc, qc = v.coeffs, q.coeffs

    if cache.is_flat:
        r3 = np.stack([-rhs.g3[j] for j in range(2)])
        return rhs.g1.coeffs.copy(), rhs.g2.coeffs.copy(), r3, rhs.g4.coeffs.copy()

    b_pad = (cache.pad("AK"), cache.pad("BK"), cache.pad("one_minus_K"))
    d3v_pad = [g.vol_to_physical_padded(g.d3(vc[j])) for j in range(3)]

    # U = D_{I-A} v, padded-physical then spectral
    u_pad = [[b_pad[i] * d3v_pad[j] + b_pad[j] * d3v_pad[i] for j in range(3)]
             for i in range(3)]
    u = [[g.dealias(g.vol_from_physical_padded(u_pad[i][j])) if j >= i else None
          for j in range(3)] for i in range(3)]
    for i in range(3):
        for j in range(i):
            u[i][j] = u[j][i]

    dv = _flat_sym_grad(g, vc)

    # S_A = q I - Dv + U (spectral tensor, symmetric)
    s = [[u[i][j] - dv[i][j] for j in range(3)] for i in range(3)]
    for i in range(3):
        s[i][i] = s[i][i] + qc

    # div_{I-A} S_A: rows contract b with d3 of the tensor
    r1 = rhs.g1.coeffs.copy()
    for i in range(3):
        d3s = [g.vol_to_physical_padded(g.d3(s[i][j])) for j in range(3)]
        acc = b_pad[0] * d3s[0] + b_pad[1] * d3s[1] + b_pad[2] * d3s[2]
        r1[i] += g.dealias(g.vol_from_physical_padded(acc))
    # minus the flat divergence of U
    for i in range(3):
        r1[i] -= g.dealias(g.d1(u[i][0]) + g.d2(u[i][1]) + g.d3(u[i][2]))

    # R2
    acc = b_pad[0] * d3v_pad[0] + b_pad[1] * d3v_pad[1] + b_pad[2] * d3v_pad[2]
    r2 = rhs.g2.coeffs + g.dealias(g.vol_from_physical_padded(acc))

    # surface pieces: pointwise on the top collocation row, one final mask,
    # so the boundary identities close pointwise at the fixed point
    d1e, d2e = cache.d1eta_phys, cache.d2eta_phys
    n_ph = cache.N_phys
    dv_top = [[g.surf_to_physical(dv[i][j][:, :, 0]) for j in range(3)]
              for i in range(3)]
    u_top = _sym_grad_imA_top(cache, vc)
    g3_ph = [g.surf_to_physical(rhs.g3[c]) for c in range(3)]
    un = [sum(u_top[i][c] * n_ph[c] for c in range(3)) for i in range(3)]
    dvn = [sum(dv_top[i][c] * n_ph[c] for c in range(3)) for i in range(3)]
    r3 = np.empty((2,) + g.shape_surf, dtype=complex)
    for j, dje in ((0, d1e), (1, d2e)):
        plane = (-(g3_ph[j] + dje * g3_ph[2])
                 + un[j] + dje * un[2]
                 + dv_top[j][0] * d1e + dv_top[j][1] * d2e
                 - dje * dvn[2])
        r3[j] = g.dealias(g.surf_to_spectral(plane))

    v_top = [g.surf_to_physical(vc[c][:, :, 0]) for c in range(3)]
    r4 = rhs.g4.coeffs + g.dealias(
        g.surf_to_spectral(v_top[0] * d1e + v_top[1] * d2e))
    return r1, r2, r3, r4


def solve_surface_elliptic(g_rhs):
    """Invert (1 - lap*) on the surface: xi_hat = g_hat / (1 + 4 pi^2 |n|^2)."""
    g = g_rhs.grid
    return SurfaceField(g, g_rhs.coeffs / g.sobolev_multiplier(1.0), "xi")


def surface_xi_rhs(cache, v, q, g3):
    """Normal-stress trace data for xi: q - D_A v N.N/|N|^2 - G3.N/|N|^2."""
    g = cache.grid
    dan = _sym_grad_A_normal_top(cache, v)
    g3_ph = [g.surf_to_physical(g3[c]) for c in range(3)]
    g3n = sum(g3_ph[c] * cache.N_phys[c] for c in range(3))
    q_top = g.surf_to_physical(q.coeffs[:, :, 0])
    vals = q_top - (dan + g3n) / cache.Nnorm2_phys
    return SurfaceField(g, g.dealias(g.surf_to_spectral(vals)))


def _sym_grad_imA_top(cache, vc):
    """D_{I-A} v on the top row, pointwise physical values."""
    g = cache.grid
    b_top = (cache.phys("AK")[:, :, 0], cache.phys("BK")[:, :, 0],
             1.0 - cache.K_phys[:, :, 0])
    d3v_top = [g.surf_to_physical(g.d3(vc[j])[:, :, 0]) for j in range(3)]
    return [[b_top[i] * d3v_top[j] + b_top[j] * d3v_top[i] for j in range(3)]
            for i in range(3)]


def _sym_grad_A_top(cache, vc):
    """D_A v on the top row, pointwise physical values."""
    g = cache.grid
    dv = _flat_sym_grad(g, vc)
    u_top = _sym_grad_imA_top(cache, vc)
    return [[g.surf_to_physical(dv[i][j][:, :, 0]) - u_top[i][j]
             for j in range(3)] for i in range(3)]


def _sym_grad_A_normal_top(cache, v):
    """(D_A v N . N) on the top row, physical values."""
    da = _sym_grad_A_top(cache, v.coeffs)
    n_ph = cache.N_phys
    g = cache.grid
    out = np.zeros((g.N1, g.N2))
    for i in range(3):
        for j in range(3):
            out += da[i][j] * n_ph[i] * n_ph[j]
    return out


def _iterate_norm(grid, dv, dq):
    return grid.vol_h_norm(dv, 2) + grid.vol_h_norm(dq, 1)


def solve_variable_stokes(cache, rhs, tol=1e-10, max_iter=50, relaxation=1.0,
                          solver=None):
    """Picard fixed point for the variable-coefficient Stokes system.

    Iterates flat solves against re-assembled perturbation data until the
    successive-iterate H2 x H1 difference drops below tol, then recovers
    xi from the normal-stress trace. Raises NonContraction (carrying the
    difference history) when max_iter is exhausted or the sweep diverges.
    """
    grid = cache.grid
    defect = abs(rhs.compatibility_defect())
    scale = max(rhs.g1.norm_l2(), 1.0)
    if defect > 1e-10 * scale:
        raise ValueError(
            f"incompatible data: int G2 - int G4 = {defect:.3e}")
    if solver is None:
        solver = get_mode_solver(grid)
    # content beyond the 2/3 band cannot survive the product pipeline;
    # discard it up front so residuals are measured against what is solved
    rhs = StokesRHS(rhs.g1.dealias(), rhs.g2.dealias(),
                    np.stack([grid.dealias(c) for c in rhs.g3]),
                    rhs.g4.dealias())

    r = assemble_perturbations(cache, VolumeField.zeros(grid, 3),
                               VolumeField.zeros(grid), rhs)
    v, q = _flat_solve_raw(grid, solver, r)
    history = []
    estimate = 0.0
    converged = False
    for _ in range(max_iter):
        r = assemble_perturbations(cache, v, q, rhs)
        v_new, q_new = _flat_solve_raw(grid, solver, r)
        if relaxation != 1.0:
            v_new = (1.0 - relaxation) * v + relaxation * v_new
            q_new = (1.0 - relaxation) * q + relaxation * q_new
        diff = _iterate_norm(grid, v_new.coeffs - v.coeffs,
                             q_new.coeffs - q.coeffs)
        history.append(diff)
        v, q = v_new, q_new
        if not np.isfinite(diff) or (len(history) > 1
                                     and diff > 1e8 * (history[0] + 1e-300)):
            raise NonContraction(
                f"Picard sweep diverging after {len(history)} iterations "
                f"(eta too large for the contraction regime)", history)
        if diff < tol:
            converged = True
            break
    if not converged:
        raise NonContraction(
            f"no contraction to {tol:g} within {max_iter} iterations", history)

    ratios = [history[i] / history[i - 1] for i in range(1, len(history))
              if history[i - 1] > 0]
    estimate = max(ratios) if ratios else 0.0
    xi = solve_surface_elliptic(surface_xi_rhs(cache, v, q, rhs.g3))
    sol = StokesSolution(v, q, xi)
    report = FixpointReport(len(history), history, estimate, True,
                            residuals=stokes_residuals(cache, rhs, sol))
    return sol, report


def _flat_solve_raw(grid, solver, r):
    b = solver.pack_stationary(r[0], r[1], r[2], r[3])
    v, q = solver.unpack(solver.solve(b))
    return VolumeField(grid, v, "v"), VolumeField(grid, q, "q")


def recover_vertical_velocity_rhs(cache, v, g2):
    """d3 v3 recovered from the algebraic form of div_A v = G2.

    Internal consistency diagnostic; not used on the solve path.
    """
    g = cache.grid
    vc = v.coeffs
    base = g2.coeffs - g.dealias(g.d1(vc[0]) + g.d2(vc[1]))
    out = g.mul_coeff(base, cache.pad("J"))
    out += g.mul_coeff(g.d3(vc[0]), cache.pad("A"))
    out += g.mul_coeff(g.d3(vc[1]), cache.pad("B"))
    return VolumeField(g, out, "d3v3")


def stokes_residuals(cache, rhs, sol):
    """Equation residuals of a solution, via the geometry-module operators.

    Momentum is measured at interior collocation rows and continuity at
    every row except the unimposed (0,0) top row; both use the transformed
    operators assembled by the geometry module, an independent composition
    path. The stress condition is reported in the scheme's own split: the
    tangential traces (dotted with the surface tangents) and the
    (1 - lap*) normal-trace identity that defines xi. "stress_vector" is
    the raw vector-form trace defect; it is bounded by the dealiasing of
    the rational normal split, not by the solver tolerance, and grows like
    the cube of the surface amplitude.
    """
    from . import geometry as geo

    g = cache.grid
    v, q, xi = sol.v, sol.q, sol.xi
    mom = geo.div_A_tensor(geo.stress_A(q, v, cache), cache) - rhs.g1.coeffs
    cont = geo.div_A(v, cache).coeffs - rhs.g2.coeffs
    cont = cont.copy()
    cont[0, 0, 0] = 0.0

    da_top = _sym_grad_A_top(cache, v.coeffs)
    n_ph = cache.N_phys
    q_top = g.surf_to_physical(q.coeffs[:, :, 0])
    xi_fac = g.surf_to_physical(g.sobolev_multiplier(1.0) * xi.coeffs)
    g3_ph = [g.surf_to_physical(rhs.g3[c]) for c in range(3)]
    bc = np.empty((3,) + g.shape_surf, dtype=complex)
    for i in range(3):
        sn = q_top * n_ph[i] - sum(da_top[i][j] * n_ph[j] for j in range(3))
        bc[i] = g.dealias(g.surf_to_spectral(sn - xi_fac * n_ph[i] - g3_ph[i]))
    tang = 0.0
    for j, dje in ((0, cache.d1eta_phys), (1, cache.d2eta_phys)):
        dan = [sum(da_top[i][c] * n_ph[c] for c in range(3)) for i in range(3)]
        plane = (dan[j] + dje * dan[2]) + (g3_ph[j] + dje * g3_ph[2])
        tang = max(tang, float(np.abs(
            g.dealias(g.surf_to_spectral(plane))).max()))
    trace = xi_fac - g.surf_to_physical(
        surface_xi_rhs(cache, v, q, rhs.g3).coeffs)
    v_top = [g.surf_to_physical(v.coeffs[j][:, :, 0]) for j in range(3)]
    vn = sum(v_top[j] * n_ph[j] for j in range(3))
    kin = g.dealias(g.surf_to_spectral(vn)) - g.dealias(rhs.g4.coeffs)
    return {
        "momentum": float(np.abs(mom[:, :, :, 1:-1]).max()),
        "continuity": float(np.abs(cont).max()),
        "stress_tangential": tang,
        "surface_trace": float(np.abs(trace).max()),
        "stress_vector": float(np.abs(bc).max()),
        "normal_velocity": float(np.abs(kin).max()),
        "no_slip": float(np.abs(v.coeffs[:, :, :, -1]).max()),
    }
