"""Asymptotically conical SL m-folds: necks, charts, invariants, harmonics.

The built-in example is the neck family asymptotic to a transverse pair of
SL planes with characteristic angles summing to pi.  Its points are

    z_k(x, y) = exp(i psi_k(y)) x_k sqrt(1/a_k + y^2),   |x| = 1, y in R,

with psi_k(y) = a_k * int_{-inf}^y du / ((1 + a_k u^2) sqrt(P(u))) and
P(u) = (prod_k (1 + a_k u^2) - 1) / u^2; the angle of end k is the total
increment of psi_k.  The parametrization is validated numerically (both
omega and Im Omega pullbacks) rather than trusted.

Each end is re-expressed as the graph of an exact 1-form over its
asymptotic plane by ray matching: for a unit direction sigma and radius r,
the point over r*sigma is found by a monotone 1-d solve along the neck.
The resulting normal offsets nu(sigma, r) and potential E(sigma, r) are
the chart data every downstream consumer (gluing, decay fits, invariants)
works with.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline
from scipy.optimize import least_squares

from .ambient import AmbientSpace, embed_real, make_flat_ambient
from .cone import (ConeLink, add_link_product_region, geometric_levels,
                   plane_pair_link, product_tables)
from .errors import (BadAngles, DecayNotResolved, RangeTooShort, SolveFail,
                     ValidationError)
from .mesh import Mesh, MeshBuilder
import scipy.sparse as sp
import scipy.sparse.linalg as spla


# -- the analytic neck model ----------------------------------------------------


class PlanePairNeck:
    """Analytic data of the neck with weights a (scale 1), dilated by `scale`."""

    def __init__(self, a, scale: float = 1.0, y_max: float = 2.0e3,
                 n_tab: int = 20000):
        self.a = np.asarray(a, dtype=float)
        if np.any(self.a <= 0):
            raise BadAngles("weights must be positive")
        self.m = len(self.a)
        self.scale = float(scale)
        t = np.linspace(-np.arcsinh(y_max), np.arcsinh(y_max), n_tab)
        y = np.sinh(t)
        P = self._P(y)
        integ = self.a[:, None] / ((1.0 + self.a[:, None] * y[None, :] ** 2)
                                   * np.sqrt(P)[None, :])
        # left tail: integrand ~ u^-(m+1)/sqrt(prod a)
        tail = 1.0 / (self.m * y_max ** self.m * np.sqrt(np.prod(self.a)))
        psi = cumulative_trapezoid(integ, y, axis=1, initial=0.0) + tail
        self._t_tab = t
        self._psi_spl = [CubicSpline(t, psi[k]) for k in range(self.m)]
        self.angles = psi[:, -1] + tail
        self.waist = float(np.max(1.0 / np.sqrt(self.a))) * self.scale

    def _P(self, u):
        u = np.asarray(u, dtype=float)
        pr = np.prod(1.0 + self.a[:, None] * u[None, :] ** 2, axis=0)
        out = np.where(np.abs(u) > 1e-8, (pr - 1.0) / np.maximum(u ** 2, 1e-300),
                       np.sum(self.a))
        return out

    def psi(self, y):
        """psi_k(y), shape y.shape + (m,)."""
        t = np.arcsinh(np.asarray(y, dtype=float))
        return np.stack([s(t) for s in self._psi_spl], axis=-1)

    def rho(self, y):
        """sqrt(1/a_k + y^2), shape y.shape + (m,)."""
        y = np.asarray(y, dtype=float)
        return np.sqrt(1.0 / self.a + y[..., None] ** 2)

    def point(self, x, y):
        """Neck points (complex, shape x.shape) for |x| = 1."""
        ps = self.psi(y)
        return self.scale * np.exp(1j * ps) * np.asarray(x) * self.rho(y)

    def end_phase(self, end: int):
        """Accumulated angles of end 0 (y -> -inf) or end 1 (y -> +inf)."""
        return np.zeros(self.m) if end == 0 else self.angles

    def zeta(self, x, y, end: int):
        """Coordinates relative to the end's plane frame (real as y -> end)."""
        ps = self.psi(y) - self.end_phase(end)
        return self.scale * np.exp(1j * ps) * np.asarray(x) * self.rho(y)

    def solve_ray(self, end: int, sigma: np.ndarray, r: np.ndarray,
                  iters: int = 80):
        """Ray matching: find (x, y) with Re zeta = r sigma, |x| = 1.

        sigma: (..., m) unit directions in the end plane; r: broadcastable
        radii (in scaled units).  Returns x, y and the normal offset
        Im zeta, all in scaled units.
        """
        sigma = np.asarray(sigma, dtype=float)
        r_loc = np.asarray(r, dtype=float) / self.scale
        shape = np.broadcast_shapes(sigma.shape[:-1], r_loc.shape)
        sig = np.broadcast_to(sigma, shape + (self.m,))
        rr = np.broadcast_to(r_loc, shape)

        def g(y):
            ps = self.psi(y) - self.end_phase(end)
            c = np.cos(ps) * self.rho(y)
            return np.sum((rr[..., None] * sig / c) ** 2, axis=-1) - 1.0

        ylo = np.zeros(shape)
        yhi = np.full(shape, 4.0 * (np.max(rr) + self.waist / self.scale))
        sgn = -1.0 if end == 0 else 1.0
        glo = g(sgn * ylo)
        if np.any(glo < 0):
            raise SolveFail("ray matching: radius below the chart start")
        for _ in range(iters):
            mid = 0.5 * (ylo + yhi)
            gm = g(sgn * mid)
            take = gm > 0
            ylo = np.where(take, mid, ylo)
            yhi = np.where(take, yhi, mid)
        y = sgn * 0.5 * (ylo + yhi)
        ps = self.psi(y) - self.end_phase(end)
        c = np.cos(ps) * self.rho(y)
        x = rr[..., None] * sig / c
        x /= np.linalg.norm(x, axis=-1, keepdims=True)
        nu = self.scale * np.sin(ps) * x * self.rho(y)
        return x, y, nu

    def dilated(self, t: float) -> "PlanePairNeck":
        out = PlanePairNeck.__new__(PlanePairNeck)
        out.a = self.a
        out.m = self.m
        out.scale = self.scale * t
        out._t_tab = self._t_tab
        out._psi_spl = self._psi_spl
        out.angles = self.angles
        out.waist = self.waist * t
        return out


def solve_neck_weights(angles, tol: float = 1e-11) -> np.ndarray:
    """Invert the angle map: weights a (a_0 = 1) with psi-increments = angles."""
    phis = np.asarray(angles, dtype=float)
    m = len(phis)
    if np.any(phis <= 0) or np.any(phis >= np.pi):
        raise BadAngles("plane-pair angles must lie in (0, pi)")
    if abs(phis.sum() - np.pi) > 1e-9:
        raise BadAngles(
            f"angles sum to {phis.sum():.6f}, not pi: the plane pair bounds "
            "no special Lagrangian neck")

    def resid(loga):
        a = np.concatenate([[1.0], np.exp(loga)])
        return PlanePairNeck(a).angles - phis

    x0 = np.log(np.full(m - 1, 1.0))
    sol = least_squares(resid, x0, xtol=tol, ftol=tol, gtol=tol)
    a = np.concatenate([[1.0], np.exp(sol.x)])
    got = PlanePairNeck(a).angles
    if np.max(np.abs(got - phis)) > 1e-5:
        raise BadAngles(f"angle solve failed: reached {got}, wanted {phis}")
    return a


# -- the AC manifold ------------------------------------------------------------


@dataclass
class EndChart:
    """Graph chart of one end over its asymptotic plane."""

    frame: np.ndarray                  # m x m complex unitary of the plane
    r_levels: np.ndarray               # (L+1,) scaled radii, geometric
    nu: np.ndarray                     # (V, L+1, m) normal offsets (plane coords)
    E: np.ndarray                      # (V, L+1) scalar potential, E -> 0 at infinity
    chi_r: np.ndarray                  # (V, L+1) radial component <nu, sigma>


@dataclass
class ACSLManifold:
    """Truncated AC SL m-fold: waist mesh + per-end graph charts."""

    ambient: AmbientSpace
    link: ConeLink
    mesh: Mesh
    rate: float
    T: float                            # chart start radius (scaled units)
    R_cut: float
    charts: list                        # EndChart per link component
    model: PlanePairNeck | None = None
    end_tables: list = field(default_factory=list)
    waist_table: np.ndarray | None = None
    scale: float = 1.0
    metadata: dict = field(default_factory=dict)

    @property
    def ends(self) -> int:
        return len(self.charts)

    def outer_boundary(self, end: int) -> np.ndarray:
        return self.mesh.vertex_sets[f"end{end}_outer"]

    def end_chart_at(self, end: int, r_levels: np.ndarray):
        """nu and E on given scaled radii (exact re-solve when a model exists)."""
        ch = self.charts[end]
        r_levels = np.asarray(r_levels, dtype=float)
        comp = self.link.components[end]
        if self.model is not None:
            _, _, nu = self.model.solve_ray(end, comp.directions[:, None, :],
                                            r_levels[None, :])
        else:
            nu = _loglin_interp(ch.r_levels, ch.nu, r_levels)
        E = _loglin_interp(ch.r_levels, ch.E, r_levels)
        return nu, E


def _loglin_interp(r_tab, arr, r_new):
    """Interpolate (V, L, ...) radial tables in log r."""
    lt = np.log(r_tab)
    ln = np.log(np.clip(r_new, r_tab[0], r_tab[-1]))
    idx = np.clip(np.searchsorted(lt, ln) - 1, 0, len(lt) - 2)
    w = (ln - lt[idx]) / (lt[idx + 1] - lt[idx])
    a0 = arr[:, idx]
    a1 = arr[:, idx + 1]
    wshape = (1, len(r_new)) + (1,) * (arr.ndim - 2)
    w = w.reshape(wshape)
    return a0 * (1 - w) + a1 * w


def _potential_from_chi(r_levels, chi_r, rate):
    """E(sigma, r) = -int_r^inf chi_r ds with a fitted power tail."""
    V, L = chi_r.shape
    E = np.zeros((V, L))
    # analytic-style tail: chi_r ~ C s^(rate-1) => int_R^inf = -C R^rate / rate
    tail = -chi_r[:, -1] * r_levels[-1] / rate
    acc = tail
    E[:, -1] = -acc
    for i in range(L - 2, -1, -1):
        dr = r_levels[i + 1] - r_levels[i]
        acc = acc + 0.5 * (chi_r[:, i] + chi_r[:, i + 1]) * dr
        E[:, i] = -acc
    return E


def lawlor_neck(m: int, neck_param: float, angles=None, link_n: int = 12,
                T_factor: float = 1.8, R_cut_factor: float = 100.0,
                n_levels: int = 48, n_y: int = 12) -> ACSLManifold:
    """Discretized SL neck asymptotic to a transverse SL plane pair.

    neck_param is an overall dilation of the unit-weight family; angles
    default to the symmetric pi/m.  The decay rate 2 - m is recorded and
    verified post hoc by `decay_fit`.
    """
    if m < 3:
        raise ValidationError("need m >= 3")
    if neck_param <= 0:
        raise ValidationError("neck_param must be positive")
    if angles is None:
        angles = np.full(m, np.pi / m)
    if m != 3:
        raise ValidationError("mesh construction is implemented for m = 3")
    a = solve_neck_weights(angles)
    model = PlanePairNeck(a, scale=neck_param)
    ambient = make_flat_ambient(m)
    link = plane_pair_link(ambient, angles, n=link_n)
    return _build_ac_from_model(ambient, link, model, T_factor, R_cut_factor,
                                n_levels, n_y)


def _build_ac_from_model(ambient, link, model, T_factor, R_cut_factor,
                         n_levels, n_y) -> ACSLManifold:
    m = ambient.m
    T = T_factor * model.waist
    R_cut = R_cut_factor * T
    r_levels = geometric_levels(T, R_cut, n_levels)
    b = MeshBuilder(ambient, m)
    b.set_resolution(max(link.mesh.resolution,
                         float(np.log(r_levels[1] / r_levels[0]))))
    tables = product_tables(b, link, n_levels)
    charts = []
    end_solutions = []
    for e, comp in enumerate(link.components):
        dirs = comp.directions
        x, y, nu = model.solve_ray(e, dirs[:, None, :], r_levels[None, :])
        chi_r = np.einsum("vlk,vk->vl", nu, dirs)
        E = _potential_from_chi(r_levels, chi_r, rate=2.0 - m)
        z = np.einsum("ij,vlj->vli", comp.frame,
                      (r_levels[None, :, None] * dirs[:, None, :] + 1j * nu))
        pos = np.concatenate([z.real, z.imag], axis=-1)
        add_link_product_region(b, link, e, tables[e], pos,
                                prefix=f"end{e}", label="PLAIN",
                                frame="neck", component=0)
        b.vertex_sets[f"end{e}_outer"] = tables[e][:, -1].copy()
        b.vertex_sets[f"end{e}_inner"] = tables[e][:, 0].copy()
        charts.append(EndChart(frame=comp.frame, r_levels=r_levels.copy(),
                               nu=nu, E=E, chi_r=chi_r))
        end_solutions.append((x[:, 0, :], y[:, 0]))
    # waist: columns joining the two inner rings over matching directions
    c0, c1 = link.components
    x0, y0 = end_solutions[0]
    x1, y1 = end_solutions[1]
    nvert = len(c0.local_vids)
    inner = np.empty((nvert, n_y + 1), dtype=np.int64)
    inner[:, 0] = tables[0][:, 0]
    inner[:, -1] = tables[1][:, 0]
    inner[:, 1:-1] = b.alloc((nvert, n_y - 1))
    s = np.linspace(0.0, 1.0, n_y + 1)
    yy = y0[:, None] * (1 - s[None, :]) + y1[:, None] * s[None, :]
    xx = x0[:, None, :] * (1 - s[None, :, None]) + x1[:, None, :] * s[None, :, None]
    xx /= np.linalg.norm(xx, axis=-1, keepdims=True)
    zz = model.point(xx, yy)
    wpos = np.concatenate([zz.real, zz.imag], axis=-1)
    for ci, (grid, per) in enumerate(c0.charts):
        b.add_region(f"waist/c{ci}", "PLAIN", inner[grid], wpos[grid],
                     periodic=(per[0], per[1], False), frame="neck",
                     component=0)
    mesh = b.finalize()
    ac = ACSLManifold(ambient=ambient, link=link, mesh=mesh, rate=2.0 - m,
                      T=T, R_cut=R_cut, charts=charts, model=model,
                      end_tables=[t.copy() for t in tables],
                      waist_table=inner.copy(), scale=model.scale)
    ac.metadata["angles"] = model.angles.copy()
    ac.metadata["weights"] = model.a.copy()
    ac.metadata["end_signs"] = _end_orientation_signs(mesh, len(charts))
    return ac


def _end_orientation_signs(mesh: Mesh, ends: int) -> list:
    """Boundary-class orientation of each end relative to its sigma-chart.

    Auto-orientation flips regions whose natural (sigma, r) frame violated
    Re(Omega) > 0; a flipped end carries the reversed boundary class.
    """
    signs = []
    for e in range(ends):
        flips = [reg.flip for reg in mesh.regions
                 if reg.name.startswith(f"end{e}/")]
        if not flips:
            signs.append(1)
            continue
        frac = np.mean(flips)
        signs.append(-1 if frac > 0.5 else 1)
    return signs


def truncated_cone_acsl(link: ConeLink, r_min: float, r_max: float,
                        n_levels: int = 40) -> ACSLManifold:
    """Exact cone piece presented as an AC manifold with phi = iota."""
    amb = link.ambient
    m = amb.m
    r_levels = geometric_levels(r_min, r_max, n_levels)
    b = MeshBuilder(amb, m)
    b.set_resolution(max(link.mesh.resolution,
                         float(np.log(r_levels[1] / r_levels[0]))))
    P = link.positions()
    tables = product_tables(b, link, n_levels)
    charts = []
    for e, comp in enumerate(link.components):
        pos = P[comp.local_vids][:, None, :] * r_levels[None, :, None]
        add_link_product_region(b, link, e, tables[e], pos,
                                prefix=f"end{e}", label="PLAIN",
                                frame="cone", component=e)
        b.vertex_sets[f"end{e}_outer"] = tables[e][:, -1].copy()
        b.vertex_sets[f"end{e}_inner"] = tables[e][:, 0].copy()
        V = len(comp.local_vids)
        charts.append(EndChart(
            frame=(comp.frame if comp.frame is not None
                   else np.eye(m, dtype=complex)),
            r_levels=r_levels.copy(),
            nu=np.zeros((V, n_levels + 1, m)),
            E=np.zeros((V, n_levels + 1)),
            chi_r=np.zeros((V, n_levels + 1))))
    mesh = b.finalize()
    return ACSLManifold(ambient=amb, link=link, mesh=mesh, rate=2.0 - m,
                        T=r_min, R_cut=r_max, charts=charts, model=None,
                        end_tables=[t.copy() for t in tables])


def synthetic_ac_chart(link: ConeLink, nu_fn, rate: float,
                       T: float = 1.0, R_cut: float = 100.0,
                       n_levels: int = 40) -> ACSLManifold:
    """AC manifold from a planted normal-offset field nu(dirs, r) -> (V, m).

    Intended for tests: the offsets are taken at face value (they need not
    come from an exact potential), positions are dirs*r + i*nu per end.
    """
    amb = link.ambient
    m = amb.m
    r_levels = geometric_levels(T, R_cut, n_levels)
    b = MeshBuilder(amb, m)
    b.set_resolution(link.mesh.resolution)
    tables = product_tables(b, link, n_levels)
    charts = []
    for e, comp in enumerate(link.components):
        dirs = comp.directions
        if dirs is None:
            raise ValidationError("synthetic charts need plane-type links")
        frame = comp.frame
        nu = np.stack([nu_fn(dirs, r) for r in r_levels], axis=1)
        z = np.einsum("ij,vlj->vli", frame,
                      (r_levels[None, :, None] * dirs[:, None, :] + 1j * nu))
        pos = np.concatenate([z.real, z.imag], axis=-1)
        add_link_product_region(b, link, e, tables[e], pos,
                                prefix=f"end{e}", label="PLAIN",
                                frame="syn", component=e)
        b.vertex_sets[f"end{e}_outer"] = tables[e][:, -1].copy()
        b.vertex_sets[f"end{e}_inner"] = tables[e][:, 0].copy()
        chi_r = np.einsum("vlk,vk->vl", nu, dirs)
        charts.append(EndChart(frame=frame, r_levels=r_levels.copy(), nu=nu,
                               E=_potential_from_chi(r_levels, chi_r, rate),
                               chi_r=chi_r))
    mesh = b.finalize(orient=False)
    return ACSLManifold(ambient=amb, link=link, mesh=mesh, rate=rate,
                        T=T, R_cut=R_cut, charts=charts, model=None,
                        end_tables=[t.copy() for t in tables])


# -- operations -----------------------------------------------------------------


def special_lagrangian_residual(L: ACSLManifold):
    """(sup |iota* omega|, sup |Im Omega density|) on the truncated mesh."""
    from .ambient import lagrangian_defect
    om = lagrangian_defect(L.mesh)
    dens = L.mesh.im_omega_cell_integrals() / L.mesh.cell_vol
    return float(om), float(np.max(np.abs(dens)))


@dataclass
class DecayFit:
    rate: float | None                  # fitted lambda'
    slope_offset: float | None          # slope of sup|phi - iota| (= lambda'-1)
    slope_chi: float | None
    slope_E: float | None
    residual: float
    no_signal: bool = False


def decay_fit(L: ACSLManifold, fit_window=(0.1, 0.75)) -> DecayFit:
    """Log-log decay exponents of |phi - iota|, |chi| and |E| per Eq-triple.

    Fits the middle of the radial range (the outer end feels truncation).
    Reports NO_DECAY_SIGNAL for an exact cone.
    """
    ch = L.charts[0]
    r = ch.r_levels
    if r[-1] / r[0] < 10.0:
        raise RangeTooShort("chart spans less than one decade")
    lo = int(fit_window[0] * len(r))
    hi = max(lo + 3, int(fit_window[1] * len(r)))
    sup_off = np.zeros(len(r))
    sup_chi = np.zeros(len(r))
    sup_E = np.zeros(len(r))
    for chh in L.charts:
        sup_off = np.maximum(sup_off, np.max(np.linalg.norm(chh.nu, axis=-1),
                                             axis=0))
        sup_chi = np.maximum(sup_chi, np.max(np.abs(chh.chi_r), axis=0))
        sup_E = np.maximum(sup_E, np.max(np.abs(chh.E), axis=0))
    if np.max(sup_off) < 1e-14:
        return DecayFit(rate=None, slope_offset=None, slope_chi=None,
                        slope_E=None, residual=0.0, no_signal=True)
    lr = np.log(r[lo:hi])

    def fit(vals):
        v = np.log(np.maximum(vals[lo:hi], 1e-300))
        c = np.polyfit(lr, v, 1)
        res = np.sqrt(np.mean((np.polyval(c, lr) - v) ** 2))
        return c[0], res

    s_off, res = fit(sup_off)
    s_chi, _ = fit(sup_chi)
    s_E, _ = fit(sup_E)
    return DecayFit(rate=s_off + 1.0, slope_offset=s_off, slope_chi=s_chi,
                    slope_E=s_E, residual=res)


@dataclass
class InvariantReport:
    pairings: np.ndarray                # Z(L).[Sigma^j] per end
    quadrature_error: np.ndarray
    Y_status: str
    Y_periods: np.ndarray


def _chain_integral(L: ACSLManifold, end: int, r_eval: float,
                    n_s: int = 16) -> float:
    """Integral of Im Omega over the radial cone-to-boundary chain of one end."""
    comp = L.link.components[end]
    ch = L.charts[end]
    nu, _ = L.end_chart_at(end, np.array([r_eval]))
    dirs = comp.directions if comp.directions is not None else None
    if dirs is None:
        raise ValidationError("chain integral needs plane-type ends")
    zb = np.einsum("ij,vj->vi", ch.frame,
                   r_eval * dirs.astype(complex) + 1j * nu[:, 0, :])
    s = np.linspace(0.0, 1.0, n_s + 1)
    # avoid a degenerate apex layer: close with a tiny cone cap
    s[0] = 1e-6
    pts = s[None, :, None] * zb[:, None, :]
    pos = np.concatenate([pts.real, pts.imag], axis=-1)
    b = MeshBuilder(L.ambient, L.ambient.m)
    tab = b.alloc((len(comp.local_vids), n_s + 1))
    add_link_product_region_from_comp(b, comp, tab, pos, prefix=f"chain{end}",
                                      frame="chain")
    mesh = b.finalize(orient=False)
    return float(mesh.im_omega_cell_integrals().sum())


def add_link_product_region_from_comp(b, comp, vid_table, pos_table, prefix,
                                      frame):
    for ci, (grid, per) in enumerate(comp.charts):
        b.add_region(f"{prefix}/c{ci}", "PLAIN", vid_table[grid],
                     pos_table[grid], periodic=(per[0], per[1], False),
                     frame=frame)


def invariant_Z_pairings(L: ACSLManifold, r_eval: float,
                         check_radius: float | None = None) -> InvariantReport:
    """Pairings of the Im Omega class with the link components.

    Each pairing integrates Im Omega over the radial chain from the apex to
    the end's graph section at r_eval; closedness makes the result
    independent of r_eval, which is used as the quadrature error estimate.
    """
    ch0 = L.charts[0]
    if not (ch0.r_levels[0] <= r_eval <= ch0.r_levels[-1]):
        raise ValidationError("r_eval outside chart range")
    if check_radius is None:
        check_radius = min(ch0.r_levels[-1], 1.6 * r_eval)
    signs = L.metadata.get("end_signs", [1] * L.ends)
    vals = np.array([signs[e] * _chain_integral(L, e, r_eval)
                     for e in range(L.ends)])
    vals2 = np.array([signs[e] * _chain_integral(L, e, check_radius)
                      for e in range(L.ends)])
    err = np.abs(vals - vals2) + 1e-14 * (1 + np.abs(vals))
    y_status, periods = invariant_Y(L)
    return InvariantReport(pairings=vals, quadrature_error=err,
                           Y_status=y_status, Y_periods=periods)


def invariant_Y(L: ACSLManifold, period_tol: float = 1e-6):
    """Status of the degree-one invariant: rate < 0 forces it to vanish.

    Also integrates the chart 1-form around the link's generator loops at a
    few radii; nonzero periods flag a synthetic (non-exact) chart.
    """
    P = L.link.positions()
    periods = []
    ch0 = L.charts[0]
    radii = ch0.r_levels[[len(ch0.r_levels) // 3, 2 * len(ch0.r_levels) // 3]]
    for e, comp in enumerate(L.link.components):
        ch = L.charts[e]
        for loop in comp.loops:
            sig = P[comp.local_vids][loop][:, :L.ambient.m]
            for r in radii:
                nu, _ = L.end_chart_at(e, np.array([r]))
                nul = nu[loop, 0, :]
                nxt = np.roll(np.arange(len(loop)), -1)
                dsig = sig[nxt] - sig
                mid = 0.5 * (nul + nul[nxt])
                periods.append(r * float(np.sum(mid * dsig)))
    periods = np.array(periods) if periods else np.zeros(0)
    scale = max(np.max([np.max(np.abs(c.nu)) for c in L.charts]), 1e-30)
    nonzero = periods.size and np.max(np.abs(periods)) > period_tol * max(scale, 1.0)
    if nonzero:
        status = "NONZERO"
    elif L.rate < 0:
        status = "ZERO_BY_RATE"
    else:
        status = "NUMERICALLY_ZERO"
    return status, periods


def dilate(L: ACSLManifold, t: float) -> ACSLManifold:
    """Exact dilation: positions scale by t, potentials by t^2, rate fixed."""
    if t <= 0:
        raise ValidationError("dilation factor must be positive")
    if t == 1.0:
        return L
    new_pos = {reg.name: reg.pos * t for reg in L.mesh.regions}
    mesh = L.mesh.with_positions(new_pos)
    mesh.resolution = L.mesh.resolution
    charts = [EndChart(frame=c.frame, r_levels=c.r_levels * t, nu=c.nu * t,
                       E=c.E * t * t, chi_r=c.chi_r * t) for c in L.charts]
    model = L.model.dilated(t) if L.model is not None else None
    out = ACSLManifold(ambient=L.ambient, link=L.link, mesh=mesh,
                       rate=L.rate, T=L.T * t, R_cut=L.R_cut * t,
                       charts=charts, model=model,
                       end_tables=[tt.copy() for tt in L.end_tables],
                       waist_table=None if L.waist_table is None
                       else L.waist_table.copy(),
                       scale=L.scale * t)
    out.metadata = dict(L.metadata)
    return out


def bounded_harmonic(L: ACSLManifold, c, linear_tol: float = 1e-10):
    """Bounded harmonic function with boundary data c^j on end j.

    Solves the Dirichlet problem on the truncated mesh; the interior decay
    exponent of v - c^j is fitted per end and must land in (2-m, 0) up to
    the truncation error absorbed into the fit band.
    """
    c = np.asarray(c, dtype=float)
    if c.shape != (L.ends,):
        raise ValidationError("need one boundary value per end")
    mesh = L.mesh
    if L.charts[0].r_levels[-1] / L.charts[0].r_levels[0] < 10.0:
        raise DecayNotResolved("chart spans less than a decade")
    A = mesh.stiffness()
    fixed = np.zeros(mesh.nv, dtype=bool)
    vals = np.zeros(mesh.nv)
    for e in range(L.ends):
        ids = L.outer_boundary(e)
        fixed[ids] = True
        vals[ids] = c[e]
    free = ~fixed
    free[np.setdiff1d(np.arange(mesh.nv), mesh.active_vertices)] = False
    Aff = A[free][:, free].tocsr()
    rhs = -A[free][:, fixed] @ vals[fixed]
    diag = np.maximum(Aff.diagonal(), 1e-300)
    pre = sp.diags(1.0 / diag)
    sol, info = spla.cg(Aff, rhs, rtol=linear_tol, atol=0.0, maxiter=20000,
                        M=pre)
    if info != 0:
        raise SolveFail(f"harmonic CG stagnated (info={info})")
    v = vals.copy()
    v[free] = sol
    # fitted interior decay of v - c^j per end
    betas = []
    for e in range(L.ends):
        tab = L.end_tables[e]
        dev = np.max(np.abs(v[tab] - c[e]), axis=0)
        r = L.charts[e].r_levels
        lo, hi = int(0.15 * len(r)), int(0.6 * len(r))
        if np.max(dev[lo:hi]) < 1e-13:
            betas.append(0.0)
            continue
        cof = np.polyfit(np.log(r[lo:hi]), np.log(np.maximum(dev[lo:hi],
                                                             1e-300)), 1)
        betas.append(float(cof[0]))
    return v, np.array(betas)
