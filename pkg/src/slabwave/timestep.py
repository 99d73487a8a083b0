"""IMEX time stepping for the free-surface system on the flattened slab.

One step performs backward Euler on the linearization frozen at the
current state: the flat Stokes operator, the (1 - lap*) surface stiffness
and the kinematic coupling are implicit, while the ALE transport term,
convection, the curvature remainder beyond its linearization and every
geometric perturbation are explicit. The implicit problem per horizontal
mode couples (v, q, xi) through the normal-stress and kinematic rows and
is solved by the same Picard sweep as the stationary Stokes module, with
the previous step as warm start.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NonContraction
from .fields import SurfaceField, VolumeField
from . import geometry as geo
from . import stokes as st


@dataclass
class StepConfig:
    dt: float
    tol: float = 1e-10
    max_iter: int = 50
    relaxation: float = 1.0
    j_floor: float = 0.1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass
class SimState:
    """Solution snapshot plus the one-step history diagnostics need.

    dteta is the kinematic surface velocity (eta^k - eta^{k-1}) / dt, dtu
    the backward difference of u, dt2eta the backward difference of dteta;
    at t = 0 they hold the constructed initial time derivatives (dt2eta
    starts at zero: no second history level exists yet).
    """
    u: VolumeField
    p: VolumeField
    eta: SurfaceField
    t: float
    dteta: SurfaceField
    dtu: VolumeField
    dt2eta: SurfaceField

    @classmethod
    def rest(cls, grid):
        z = VolumeField.zeros(grid, 3)
        return cls(z, VolumeField.zeros(grid), SurfaceField.zeros(grid), 0.0,
                   SurfaceField.zeros(grid), z.copy(), SurfaceField.zeros(grid))


@dataclass
class StepReport:
    iterations: int
    residual_history: list
    converged: bool
    min_j: float
    div_residual: float


@dataclass
class CompatibilityReport:
    """The three compatibility residuals; the caller judges pass/fail."""
    divergence: float
    tangential_stress: float
    bottom_velocity: float

    def max(self):
        return max(self.divergence, self.tangential_stress,
                   self.bottom_velocity)


def check_compatibility(u0, eta0, j_floor=0.1):
    """L2 sizes of div_A u0, the tangential surface stress of u0, and the
    bottom trace of u0."""
    cache = geo.build_geometry(eta0, j_floor=j_floor)
    g = cache.grid
    div = geo.div_A(u0, cache)
    da_top = st._sym_grad_A_top(cache, u0.coeffs)
    dan = np.stack([sum(da_top[i][j] * cache.N_phys[j] for j in range(3))
                    for i in range(3)])
    dan_spec = np.stack([g.surf_to_spectral(c) for c in dan])
    tang = geo.tangential_project(dan_spec, cache)
    tang_norm = np.sqrt(sum(g.surf_l2(c) ** 2 for c in tang))
    bottom = np.sqrt(sum(g.surf_l2(u0.coeffs[i][:, :, -1]) ** 2
                         for i in range(3)))
    return CompatibilityReport(div.norm_l2(), float(tang_norm), float(bottom))


# ----------------------------------------------------------------------
# initialization: d_t eta(0), p(0), d_t u(0)
# ----------------------------------------------------------------------

class BatchedPoissonSolver:
    """Per-mode Laplacian with Dirichlet top row and Neumann bottom row."""

    def __init__(self, grid):
        self.grid = grid
        n3 = grid.N3
        eye = np.eye(n3)
        d = grid.D3
        d2 = d @ d
        k1v = np.broadcast_to(grid.k1, grid.shape_surf).ravel()
        k2v = np.broadcast_to(grid.k2, grid.shape_surf).ravel()
        a = np.zeros((k1v.size, n3, n3), dtype=complex)
        for m in range(k1v.size):
            ksq = k1v[m] ** 2 + k2v[m] ** 2
            am = a[m]
            am[1:-1] = (d2 - ksq * eye)[1:-1]
            am[0, 0] = 1.0
            am[-1] = d[-1]
        scale = np.abs(a).max(axis=2)
        self.operator = a
        self.row_scale = scale
        self.inverse = np.linalg.inv(a / scale[:, :, None])

    def solve(self, interior, top, bottom):
        g = self.grid
        nm = self.operator.shape[0]
        b = interior.reshape(nm, g.N3).copy()
        b[:, 0] = top.ravel()
        b[:, -1] = bottom.ravel()
        x = np.matmul(self.inverse, (b / self.row_scale)[:, :, None])[:, :, 0]
        r = b - np.matmul(self.operator, x[:, :, None])[:, :, 0]
        x += np.matmul(self.inverse, (r / self.row_scale)[:, :, None])[:, :, 0]
        return x.reshape(g.shape_vol)


def _kinematic_dteta(cache, u):
    """d_t eta = u . N on the surface (pointwise, dealiased)."""
    g = cache.grid
    u_top = [g.surf_to_physical(u.coeffs[j][:, :, 0]) for j in range(3)]
    vals = sum(u_top[j] * cache.N_phys[j] for j in range(3))
    return SurfaceField(g, g.dealias(g.surf_to_spectral(vals)), "dteta")


def _transport_coefficient_pad(cache, dteta):
    """(d_t ebar) K W on the padded product grid (the ALE transport factor)."""
    g = cache.grid
    dtebar = dteta.coeffs[:, :, None] * np.exp(
        2.0 * np.pi * g.absn[:, :, None] * g.x3_pad[None, None, :])
    return g.vol_to_physical(dtebar) * cache.pad("K") * cache.pad("W")


def initial_pressure(u0, eta0, tol=1e-11, max_iter=60, j_floor=0.1):
    """Initial pressure from the mixed Dirichlet/Neumann elliptic problem.

    Solves -div_A(grad_A p - (d_t ebar) K W d3 u0) = div_A(R u0) with the
    normal-stress Dirichlet trace on top and the vertical-momentum Neumann
    trace on the bottom, by the same flat-kernel Picard sweep. Returns
    (p0, dtu0, dteta0) with dtu0 the constructed initial acceleration.
    """
    g = u0.grid
    cache = geo.build_geometry(eta0, j_floor=j_floor)
    dteta0 = _kinematic_dteta(cache, u0)

    if not np.any(u0.coeffs):
        svec = np.zeros((3,) + g.shape_vol, dtype=complex)
        rul = np.zeros((3,) + g.shape_vol, dtype=complex)
        lap_u = np.zeros((3,) + g.shape_vol, dtype=complex)
    else:
        tc = _transport_coefficient_pad(cache, dteta0)
        svec = np.stack([g.mul_coeff(g.d3(u0.coeffs[j]), tc) for j in range(3)])
        rates = geo.GeometryRates(cache, dteta0)
        rmat = np.einsum("ij...,jk...->ik...",
                         rates.flux_matrix_rate_phys(cache),
                         np.linalg.inv(np.moveaxis(
                             cache.flux_matrix_phys(), (0, 1), (-2, -1))
                         ).transpose(3, 4, 0, 1, 2))
        u_phys = np.stack([g.vol_to_physical(u0.coeffs[j]) for j in range(3)])
        ru_phys = np.einsum("ij...,j...->i...", rmat, u_phys)
        rul = np.stack([g.dealias(g.vol_to_spectral(ru_phys[i]))
                        for i in range(3)])
        lap_u = np.stack(
            [geo.laplacian_A(u0.component(j), cache).coeffs for j in range(3)])

    rhs_vol = geo._div_A_raw(svec - rul, cache)

    # Dirichlet trace: (eta - H) + (D_A u0 N . N) / |N|^2
    h = geo.mean_curvature(eta0)
    dan = st._sym_grad_A_normal_top(cache, u0)
    trace = (g.surf_to_physical(eta0.coeffs - h.coeffs)
             + dan / cache.Nnorm2_phys)
    dirichlet = g.dealias(g.surf_to_spectral(trace))

    # Neumann (bottom): K d3 p = (lap_A u0)_3 + svec_3
    neumann_target = lap_u[2][:, :, -1] + svec[2][:, :, -1]

    solver = BatchedPoissonSolver(g)
    p = VolumeField.zeros(g)
    kp = cache.K_phys
    history = []
    for _ in range(max_iter):
        # flat split: lap p = rhs + (lap - lap_A) p, d3 p = target + (1-K) d3 p
        if np.any(p.coeffs):
            lap_gap = np.einsum("ab,...b->...a", g.D3 @ g.D3, p.coeffs) \
                - g.ksq[:, :, None] * p.coeffs \
                - geo.laplacian_A(p, cache).coeffs
            d3p_bot = g.d3(p.coeffs)[:, :, -1]
            gap_bot = g.dealias(g.surf_to_spectral(
                (1.0 - kp[:, :, -1]) * g.surf_to_physical(d3p_bot)))
        else:
            lap_gap = np.zeros(g.shape_vol, dtype=complex)
            gap_bot = np.zeros(g.shape_surf, dtype=complex)
        p_new = solver.solve(rhs_vol + lap_gap, dirichlet,
                             neumann_target + gap_bot)
        diff = g.vol_h_norm(p_new - p.coeffs, 1)
        history.append(diff)
        p = VolumeField(g, p_new, "p0")
        if diff < tol:
            break
    else:
        raise NonContraction("initial-pressure sweep did not converge", history)

    dtu = lap_u - geo._tgrad(p.coeffs, cache) + svec
    return p, VolumeField(g, dtu, "dtu0"), dteta0


def initialize_state(u0, eta0, cfg):
    """Build the t = 0 state with constructed p(0), d_t u(0), d_t eta(0)."""
    p0, dtu0, dteta0 = initial_pressure(u0, eta0, j_floor=cfg.j_floor)
    g = u0.grid
    return SimState(u0.copy(), p0, eta0.copy(), 0.0, dteta0, dtu0,
                    SurfaceField.zeros(g))


# ----------------------------------------------------------------------
# the IMEX step
# ----------------------------------------------------------------------

class TimeStepper:
    """Owns the per-mode implicit matrices for one (grid, dt) pair."""

    def __init__(self, grid, cfg):
        self.grid = grid
        self.cfg = cfg
        self.solver = st.get_mode_solver(grid, cfg.dt)

    def _pack(self, r1, r2, r3, r5, kin_src):
        s = self.solver
        n3 = self.grid.N3
        nm = r2.reshape(-1, n3).shape[0]
        b = np.zeros((nm, s.nuk), dtype=complex)
        r1f = r1.reshape(3, nm, n3)
        for i in range(3):
            blk = b[:, s._slices[i]]
            blk[:, 1:-1] = r1f[i][:, 1:-1]
        b[:, s._slices[0].start] = r3[0].ravel()
        b[:, s._slices[1].start] = r3[1].ravel()
        b[:, s._slices[2].start] = r5.ravel()
        b[:, s._slices[3]] = r2.reshape(nm, n3)
        b[:, -1] = kin_src.ravel()
        b[0, s._slices[3].start] = r1f[2][0, -1]
        return b

    def step(self, state):
        """Advance one backward-Euler step; returns (state, report)."""
        g = self.grid
        cfg = self.cfg
        dt = cfg.dt
        cache = geo.build_geometry(state.eta, j_floor=cfg.j_floor)

        # explicit forcing F1 = (d_t ebar) W K d3 u - u . grad_A u
        uc = state.u.coeffs
        f1 = np.zeros((3,) + g.shape_vol, dtype=complex)
        if np.any(state.dteta.coeffs):
            tc = _transport_coefficient_pad(cache, state.dteta)
            for j in range(3):
                f1[j] += g.mul_coeff(g.d3(uc[j]), tc)
        if np.any(uc):
            u_pad = [g.vol_to_physical_padded(uc[i]) for i in range(3)]
            w_pad = (-u_pad[0] * cache.pad("AK") - u_pad[1] * cache.pad("BK")
                     + u_pad[2] * cache.pad("K"))
            for j in range(3):
                conv = (u_pad[0] * g.vol_to_physical_padded(g.d1(uc[j]))
                        + u_pad[1] * g.vol_to_physical_padded(g.d2(uc[j]))
                        + w_pad * g.vol_to_physical_padded(g.d3(uc[j])))
                f1[j] -= g.dealias(g.vol_from_physical_padded(conv))

        g1 = VolumeField(g, f1 + uc / dt, "G1")

        # explicit curvature remainder F3 = -(H(eta) - lap* eta) N
        g3 = np.zeros((3,) + g.shape_surf, dtype=complex)
        if np.any(state.eta.coeffs):
            h = geo.mean_curvature(state.eta)
            rem = h.coeffs + g.ksq * state.eta.coeffs
            rem_ph = g.surf_to_physical(rem)
            for c in range(3):
                g3[c] = g.dealias(g.surf_to_spectral(-rem_ph * cache.N_phys[c]))

        rhs = st.StokesRHS(g1, VolumeField.zeros(g), g3, SurfaceField.zeros(g))

        v = state.u
        q = state.p
        history = []
        converged = False
        xi = None
        for _ in range(cfg.max_iter):
            r1, r2, r3, _ = st.assemble_perturbations(cache, v, q, rhs)
            r5 = self._normal_stress_rhs(cache, v, g3)
            r6 = self._kinematic_rhs(cache, v)
            b = self._pack(r1, r2, r3, r5, state.eta.coeffs + dt * r6)
            vn, qn, xin = self.solver.unpack(self.solver.solve(b))
            if cfg.relaxation != 1.0:
                th = cfg.relaxation
                vn = (1 - th) * v.coeffs + th * vn
                qn = (1 - th) * q.coeffs + th * qn
            else:
                vn, qn = vn, qn
            diff = g.vol_h_norm(vn - v.coeffs, 2) + g.vol_h_norm(qn - q.coeffs, 1)
            history.append(diff)
            v = VolumeField(g, vn, "u")
            q = VolumeField(g, qn, "p")
            xi = xin
            if not np.isfinite(diff) or (len(history) > 1
                                         and diff > 1e8 * (history[0] + 1e-300)):
                raise NonContraction(
                    f"time-step Picard sweep diverging at t={state.t:.6g}",
                    history)
            if diff < cfg.tol:
                converged = True
                break

        # close the step: mask, exact zero mean, exact bottom no-slip
        eta_new = g.dealias(xi)
        eta_new[0, 0] = 0.0
        u_new = np.stack([g.dealias(v.coeffs[i]) for i in range(3)])
        u_new[:, :, :, -1] = 0.0
        p_new = g.dealias(q.coeffs)

        eta_f = SurfaceField(g, eta_new, "eta")
        u_f = VolumeField(g, u_new, "u")
        p_f = VolumeField(g, p_new, "p")
        dteta = SurfaceField(g, (eta_new - state.eta.coeffs) / dt, "dteta")
        dtu = VolumeField(g, (u_new - state.u.coeffs) / dt, "dtu")
        dt2eta = SurfaceField(g, (dteta.coeffs - state.dteta.coeffs) / dt,
                              "dt2eta")
        new_state = SimState(u_f, p_f, eta_f, state.t + dt, dteta, dtu, dt2eta)

        div_res = geo.div_A(u_f, cache).norm_l2() if np.any(u_new) else 0.0
        report = StepReport(len(history), history, converged, cache.min_j,
                            div_res)
        return new_state, report

    def _normal_stress_rhs(self, cache, v, g3):
        """R5 = G3.N/|N|^2 + D_A v N.N/|N|^2 - (Dv)_33, top row."""
        g = self.grid
        g3n = sum(g.surf_to_physical(g3[c]) * cache.N_phys[c] for c in range(3))
        if np.any(v.coeffs):
            dan = st._sym_grad_A_normal_top(cache, v)
            dv33 = 2.0 * g.surf_to_physical(g.d3(v.coeffs[2])[:, :, 0])
        else:
            dan = 0.0
            dv33 = 0.0
        vals = (g3n + dan) / cache.Nnorm2_phys - dv33
        return g.dealias(g.surf_to_spectral(vals))

    def _kinematic_rhs(self, cache, v):
        """R6 = -(v1 d1 eta + v2 d2 eta), the explicit part of v . N."""
        g = self.grid
        if cache.is_flat or not np.any(v.coeffs):
            return np.zeros(g.shape_surf, dtype=complex)
        vals = -(g.surf_to_physical(v.coeffs[0][:, :, 0]) * cache.d1eta_phys
                 + g.surf_to_physical(v.coeffs[1][:, :, 0]) * cache.d2eta_phys)
        return g.dealias(g.surf_to_spectral(vals))


@dataclass
class RunResult:
    states: list
    records: list
    final_state: SimState
    status: str
    message: str = ""


def run(initial, t_end, cfg, record_hook=None, keep_states=False,
        snapshot_hook=None):
    """March from the initial state to t_end, emitting one diagnostics
    record per step (including t = 0).

    record_hook(record) is called per record; snapshot_hook(state) per
    step when given. Aborts with status "diffeomorphism-lost" or
    "non-contraction" on solver failure, preserving the partial
    trajectory; two consecutive unconverged Picard sweeps raise
    NonContraction with a dt-reduction hint.
    """
    from . import diagnostics as diag
    from .errors import DiffeomorphismLost

    g = initial.eta.grid
    stepper = TimeStepper(g, cfg)
    tracker = diag.BalanceTracker()
    records = []
    states = [initial] if keep_states else []

    cache = geo.build_geometry(initial.eta, j_floor=cfg.j_floor)
    rec = diag.make_record(initial, cache, div_residual=0.0, tracker=tracker)
    records.append(rec)
    if record_hook:
        record_hook(rec)

    state = initial
    nsteps = int(round(t_end / cfg.dt))
    bad_streak = 0
    status, message = "ok", ""
    try:
        for _ in range(nsteps):
            state, rep = stepper.step(state)
            if not rep.converged:
                bad_streak += 1
                if bad_streak >= 2:
                    raise NonContraction(
                        f"Picard sweep hit max_iter={cfg.max_iter} twice "
                        f"consecutively at t={state.t:.6g}; reduce dt",
                        rep.residual_history)
            else:
                bad_streak = 0
            cache = geo.build_geometry(state.eta, j_floor=cfg.j_floor)
            rec = diag.make_record(state, cache,
                                   div_residual=rep.div_residual,
                                   tracker=tracker)
            records.append(rec)
            if record_hook:
                record_hook(rec)
            if snapshot_hook:
                snapshot_hook(state)
            if keep_states:
                states.append(state)
    except DiffeomorphismLost as err:
        status, message = "diffeomorphism-lost", str(err)
    except NonContraction as err:
        status, message = "non-contraction", str(err)
    return RunResult(states, records, state, status, message)
