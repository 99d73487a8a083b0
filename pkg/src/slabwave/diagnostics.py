"""Energy/dissipation functionals, balance bookkeeping, and decay fits.

Two families of functionals are tracked. The Sobolev-norm energy and
dissipation are squared-norm sums,

    E = |u|_{H2}^2 + |d_t u|_{H0}^2 + |p|_{H1}^2 + |eta|_{H3}^2
        + |d_t eta|_{H3/2}^2,
    D = |u|_{H3}^2 + |d_t u|_{H1}^2 + |p|_{H2}^2 + |eta|_{H7/2}^2
        + |d_t eta|_{H5/2}^2 + |d_t^2 eta|_{H1/2}^2,

with the conventions fixed in the grid module. The horizontal family
weights volume integrands with the flattening Jacobian J,

    E_par = int (|u|^2 + |d_t u|^2 + |grad* u|^2 + |grad*^2 u|^2) J
            + |d_t eta|_{H1}^2 + |eta|_{H3}^2,
    D_par = int (|D_A u|^2 + |D_A d_t u|^2 + sum |D_A grad* u|^2
            + sum |D_A grad*^2 u|^2) J,
    P     = int p F2 J,   F2 = -div_{d_t A} u,

and the physical balance tracks
    (1/2) int |u|^2 J + (1/2) int_Sigma (eta^2 + 2(sqrt(1+|grad* eta|^2)-1))
plus the running (1/2) int int |D_A u|^2 J, which together are conserved
by the continuous dynamics.
"""

from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import geometry as geo


@dataclass
class DiagnosticsRecord:
    t: float
    e_total: float
    e_u: float
    e_dtu: float
    e_p: float
    e_eta: float
    e_dteta: float
    d_total: float
    d_u: float
    d_dtu: float
    d_p: float
    d_eta: float
    d_dteta: float
    d_dt2eta: float
    e_par: float
    d_par: float
    p_corr: float
    phys_energy: float
    phys_dissip_cum: float
    balance_residual: float
    div_residual: float
    min_j: float
    mean_eta: float

    @classmethod
    def column_names(cls):
        return [f.name for f in dc_fields(cls)]

    def as_row(self):
        return [getattr(self, n) for n in self.column_names()]


@dataclass
class DecayFit:
    sigma: float
    c0: float
    window: tuple
    r_squared: float
    shrunk: bool = False


def energy(state):
    """The five squared-norm energy summands (u, d_t u, p, eta, d_t eta)."""
    return (state.u.norm_h(2) ** 2,
            state.dtu.norm_l2() ** 2,
            state.p.norm_h(1) ** 2,
            state.eta.norm_h(3.0) ** 2,
            state.dteta.norm_h(1.5) ** 2)


def dissipation(state):
    """The six squared-norm dissipation summands."""
    return (state.u.norm_h(3) ** 2,
            state.dtu.norm_h(1) ** 2,
            state.p.norm_h(2) ** 2,
            state.eta.norm_h(3.5) ** 2,
            state.dteta.norm_h(2.5) ** 2,
            state.dt2eta.norm_h(0.5) ** 2)


def _horizontal_derivative_stack(g, coeffs):
    """[w, d1 w, d2 w, d11 w, d12 w, d12 w, d22 w] spectral stacks.

    d12 appears twice: the Frobenius count of grad*^2 includes both index
    orders.
    """
    d1 = [g.d1(c) for c in coeffs]
    d2 = [g.d2(c) for c in coeffs]
    d11 = [g.d1(c) for c in d1]
    d12 = [g.d2(c) for c in d1]
    d22 = [g.d2(c) for c in d2]
    return [coeffs, d1, d2, d11, d12, d12, d22]


def _jacobian_weighted_sq(g, cache, comps_phys):
    dens = sum(c * c for c in comps_phys)
    return g.integrate_volume_phys(dens * cache.J_phys)


def _sym_grad_A_sq_phys(g, cache, coeffs):
    """|D_A w|^2 on the physical grid for a spectral 3-vector stack."""
    dw = [[g.vol_to_physical(d(c)) for c in coeffs]
          for d in (g.d1, g.d2, g.d3)]
    b = (cache.phys("AK"), cache.phys("BK"), 1.0 - cache.K_phys)
    out = np.zeros((g.N1, g.N2, g.N3))
    for i in range(3):
        for j in range(3):
            entry = dw[i][j] + dw[j][i] - (b[i] * dw[2][j] + b[j] * dw[2][i])
            out += entry * entry
    return out


def energy_parallel(state, cache, rates=None):
    """J-weighted horizontal energy, dissipation, and pressure correction.

    Both families run over the same stack of fields: u, d_t u, the first
    horizontal derivatives and the second (with the mixed one counted
    twice, matching the Frobenius norm of grad*^2).
    """
    g = state.u.grid
    uc = state.u.coeffs
    e_par = state.dteta.norm_h(1.0) ** 2 + state.eta.norm_h(3.0) ** 2
    d_par = 0.0

    stacks = []
    if np.any(uc):
        stacks.extend(_horizontal_derivative_stack(g, uc))
    if np.any(state.dtu.coeffs):
        stacks.append(list(state.dtu.coeffs))
    for w in stacks:
        phys = [g.vol_to_physical(c) for c in w]
        e_par += _jacobian_weighted_sq(g, cache, phys)
        d_par += g.integrate_volume_phys(
            _sym_grad_A_sq_phys(g, cache, w) * cache.J_phys)

    p_corr = 0.0
    if np.any(state.p.coeffs) and np.any(uc) and rates is not None:
        d3u = [g.vol_to_physical(g.d3(c)) for c in uc]
        f2 = (rates.dAK_phys * d3u[0] + rates.dBK_phys * d3u[1]
              - rates.dK_phys * d3u[2])
        p_phys = g.vol_to_physical(state.p.coeffs)
        p_corr = g.integrate_volume_phys(p_phys * f2 * cache.J_phys)
    return e_par, d_par, p_corr


def physical_energy(state, cache):
    """Kinetic plus gravity plus surface-tension energy in slab coordinates."""
    g = state.u.grid
    kin = 0.0
    if np.any(state.u.coeffs):
        u_phys = [g.vol_to_physical(c) for c in state.u.coeffs]
        kin = 0.5 * _jacobian_weighted_sq(g, cache, u_phys)
    eta_phys = g.surf_to_physical(state.eta.coeffs)
    slope2 = cache.d1eta_phys ** 2 + cache.d2eta_phys ** 2
    pot = 0.5 * g.integrate_surface_phys(
        eta_phys ** 2 + 2.0 * (np.sqrt(1.0 + slope2) - 1.0))
    return kin + pot


def dissipation_rate(state, cache):
    """(1/2) int |D_A u|^2 J, the instantaneous physical dissipation."""
    g = state.u.grid
    if not np.any(state.u.coeffs):
        return 0.0
    return 0.5 * g.integrate_volume_phys(
        _sym_grad_A_sq_phys(g, cache, state.u.coeffs) * cache.J_phys)


class BalanceTracker:
    """Running check of the energy-dissipation identity.

    Accumulates the dissipation time integral by the trapezoid rule and
    reports |E_phys(t) + int_0^t D_phys - E_phys(0)|.
    """

    def __init__(self):
        self.initial = None
        self.cumulative = 0.0
        self._prev = None

    def update(self, t, e_phys, d_rate):
        if self._prev is not None:
            t0, d0 = self._prev
            self.cumulative += 0.5 * (d0 + d_rate) * (t - t0)
        self._prev = (t, d_rate)
        if self.initial is None:
            self.initial = e_phys
        return abs(e_phys + self.cumulative - self.initial)


def make_record(state, cache, div_residual=0.0, tracker=None):
    """Assemble the full per-step diagnostics record."""
    e = energy(state)
    d = dissipation(state)
    rates = None
    if np.any(state.dteta.coeffs) and np.any(state.u.coeffs):
        rates = geo.GeometryRates(cache, state.dteta)
    e_par, d_par, p_corr = energy_parallel(state, cache, rates)
    e_phys = physical_energy(state, cache)
    d_rate = dissipation_rate(state, cache)
    if tracker is not None:
        resid = tracker.update(state.t, e_phys, d_rate)
        cum = tracker.cumulative
    else:
        resid, cum = 0.0, 0.0
    return DiagnosticsRecord(
        t=state.t,
        e_total=sum(e), e_u=e[0], e_dtu=e[1], e_p=e[2], e_eta=e[3],
        e_dteta=e[4],
        d_total=sum(d), d_u=d[0], d_dtu=d[1], d_p=d[2], d_eta=d[3],
        d_dteta=d[4], d_dt2eta=d[5],
        e_par=e_par, d_par=d_par, p_corr=p_corr,
        phys_energy=e_phys, phys_dissip_cum=cum, balance_residual=resid,
        div_residual=div_residual, min_j=cache.min_j,
        mean_eta=state.eta.mean(),
    )


def fit_decay(times, values, window=None):
    """Least-squares exponential fit E ~ c0 exp(-sigma t) on log E.

    Nonpositive samples inside the window are dropped (the fit is flagged
    shrunk); at least two positive samples are required.
    """
    t = np.asarray(times, dtype=float)
    e = np.asarray(values, dtype=float)
    if window is None:
        window = (float(t[0]), float(t[-1]))
    sel = (t >= window[0]) & (t <= window[1])
    shrunk = False
    pos = sel & (e > 0.0)
    if pos.sum() < sel.sum():
        shrunk = True
    if pos.sum() < 2:
        raise ValueError("need at least two positive samples in the window")
    tt, le = t[pos], np.log(e[pos])
    slope, intercept = np.polyfit(tt, le, 1)
    pred = slope * tt + intercept
    ss_res = float(((le - pred) ** 2).sum())
    ss_tot = float(((le - le.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot < 1e-300 else 1.0 - ss_res / ss_tot
    return DecayFit(sigma=-slope, c0=float(np.exp(intercept)),
                    window=(float(tt[0]), float(tt[-1])),
                    r_squared=r2, shrunk=shrunk)
