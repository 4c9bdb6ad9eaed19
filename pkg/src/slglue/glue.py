"""Gluing the scaled necks into a conical configuration.

A configuration is chart-atlas data: flat torus components with marked
holes, one SL cone per singular point with a matching AC neck, and the
incidence map assigning each cone end to a component hole.  Assembly at
scale t produces a closed Lagrangian mesh with regions

    CORE_K     flat torus cells and the sphere-to-cube transition shells,
    ANNULUS_Q  graph annuli over the cone, radius t*T .. R', carrying the
               interpolated exact 1-form (neck graph inside, cone outside),
    NECK_P     the scaled neck waist.

The interpolation exponent tau and the contraction exponent kappa are
chosen from the rate data; the gluing bound |xi^t| < zeta*r is enforced
with a margin, where zeta is a quarter of the link's component separation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .acsl import ACSLManifold, bounded_harmonic, invariant_Z_pairings
from .ambient import AmbientSpace, embed_real, make_flat_ambient, phase_and_error
from .cone import ConeLink, plane_pair_link
from .errors import (ConeMismatch, DeltaNotFound, HarmonicsMissing,
                     NoAdmissibleTau, SingularGram, ValidationError,
                     WindowViolation)
from .mesh import Mesh, MeshBuilder


# -- exponent selection ----------------------------------------------------------


def cutoff(s):
    """C^2 increasing cutoff: 0 on (-inf,1], 1 on [2,inf), quintic between."""
    s = np.asarray(s, dtype=float)
    x = np.clip(s - 1.0, 0.0, 1.0)
    return x ** 3 * (10.0 - 15.0 * x + 6.0 * x * x)


def cutoff_prime(s):
    s = np.asarray(s, dtype=float)
    x = s - 1.0
    inside = (x > 0.0) & (x < 1.0)
    out = np.zeros_like(s)
    xi = x[inside]
    out[inside] = 30.0 * xi * xi * (1.0 - xi) ** 2
    return out


def choose_tau(mu, lam, m: int):
    """Interpolation exponent tau and the largest admissible kappa > 1.

    tau is the midpoint of the window cut out by the two lower bounds
    max_i (m+2)/(2 mu_i + m - 2) and m/(m+1); kappa is the largest value
    satisfying the full exponent system for all rate pairs (including the
    projection budget kappa + m - 1 <= (m+1) tau).
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any((mu <= 2.0) | (mu >= 3.0)):
        raise NoAdmissibleTau("conical rates must lie in (2,3)")
    if np.any(lam >= 0.5 * (2.0 - m)):
        raise NoAdmissibleTau(
            f"neck rates must satisfy lambda < (2-m)/2 = {(2-m)/2}; "
            "improve the rate before gluing")
    lb = max(float(np.max((m + 2.0) / (2.0 * mu + m - 2.0))), m / (m + 1.0))
    if lb >= 1.0:
        raise NoAdmissibleTau("empty interpolation window")
    tau = 0.5 * (lb + 1.0)
    bounds = [
        tau * (1 + m / 2.0) + tau * (mu - 2.0) - m / 2.0,
        tau * (1 + m / 2.0) + (1 - tau) * (2.0 - lam) - m / 2.0,
        tau * (mu - 2.0) + 1.0,
        (1 - tau) * (2.0 - lam) + 1.0,
        tau * (mu - 2.0) - tau / 2.0 + 1.5,
        (1 - tau) * (2.0 - lam) - tau / 2.0 + 1.5,
        np.full_like(mu, (m + 1.0) * tau - m + 1.0),
    ]
    kappa = float(min(np.min(bd) for bd in bounds))
    if kappa <= 1.0:
        raise NoAdmissibleTau(f"no kappa > 1 (best {kappa:.4f})")
    return tau, kappa


# -- configuration data -----------------------------------------------------------


@dataclass
class EndAttachment:
    component: int                      # incidence k(i,j)
    hole_center: tuple                  # lattice index on that component's grid


@dataclass
class ConePoint:
    """One conical singular point with its cone and glued-in neck."""

    link: ConeLink
    mu: float
    neck: ACSLManifold
    ends: list                          # EndAttachment per link component
    # cone-side potential A(sigma, r) per end; zero tables = exactly conical
    A_tables: list | None = None


@dataclass
class TorusComponent:
    n: int
    side: float
    frame: np.ndarray | None = None
    offset: np.ndarray | None = None


@dataclass
class ConicalConfiguration:
    ambient: AmbientSpace
    components: list
    cones: list
    hole_half_cells: int
    R_prime: float
    name: str = "config"

    @property
    def q(self) -> int:
        return len(self.components)

    @property
    def n_cones(self) -> int:
        return len(self.cones)

    def rates(self):
        mu = [c.mu for c in self.cones]
        lam = [c.neck.rate for c in self.cones]
        return mu, lam

    def validate(self):
        m = self.ambient.m
        for ci, cone in enumerate(self.cones):
            if cone.neck.link.n_components != cone.link.n_components:
                raise ConeMismatch(f"cone {ci}: neck and cone links differ")
            if len(cone.ends) != cone.link.n_components:
                raise ValidationError(f"cone {ci}: need one attachment per end")
            for att in cone.ends:
                if not (0 <= att.component < self.q):
                    raise ValidationError(f"cone {ci}: bad incidence")
        for comp in self.components:
            dx = comp.side / comp.n
            if self.R_prime >= self.hole_half_cells * dx:
                raise ValidationError("R' must fit inside the hole cube")


# -- the glued family --------------------------------------------------------------


@dataclass
class SubspaceW:
    mesh: Mesh
    basis: np.ndarray                   # (q, nv)
    gram: np.ndarray

    def project(self, values: np.ndarray) -> np.ndarray:
        mv = self.mesh.vertex_mass * values
        rhs = self.basis @ mv
        try:
            coef = np.linalg.solve(self.gram, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularGram(str(exc)) from exc
        return coef @ self.basis

    def coefficients(self, values: np.ndarray) -> np.ndarray:
        mv = self.mesh.vertex_mass * values
        return np.linalg.solve(self.gram, self.basis @ mv)


@dataclass
class GluedLagrangian:
    mesh: Mesh
    t: float
    tau: float
    kappa: float
    config: ConicalConfiguration
    zeta: float
    annulus_levels: dict = field(default_factory=dict)   # (cone,end) -> radii
    xi_sup_ratio: float = 0.0
    metadata: dict = field(default_factory=dict)

    def annulus_table(self, cone: int, end: int) -> np.ndarray:
        return self.mesh.tables[f"annulus{cone}e{end}"]

    def waist_table(self, cone: int) -> np.ndarray:
        return self.mesh.tables[f"waist{cone}"]


def _torus_region(b: MeshBuilder, comp: TorusComponent, holes, kidx: int):
    """Periodic torus grid with hole cubes masked out; returns the vid grid."""
    n = comp.n
    m = b.ambient.m
    core = b.alloc((n,) * m)
    vid = core
    for ax in range(m):
        vid = np.concatenate([vid, np.take(vid, [0], axis=ax)], axis=ax)
    vid = vid.copy()
    axes = [np.arange(n + 1) * (comp.side / n) for _ in range(m)]
    u = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pos = embed_real(u, comp.frame, comp.offset)
    mask = np.ones((n,) * m, dtype=bool)
    hc = holes["half_cells"]
    for center in holes["centers"]:
        sl = tuple(np.arange(c - hc, c + hc) % n for c in center)
        mask[np.ix_(*sl)] = False
    periods = tuple(embed_real(comp.side * np.eye(m)[ax], comp.frame)
                    for ax in range(m))
    b.add_region(f"core{kidx}", "CORE_K", vid, pos, periodic=(True,) * m,
                 frame=f"comp{kidx}", cell_mask=mask, component=kidx,
                 pos_period=periods)
    return vid


def _hole_surface_ids(vid_grid, center, hc, lattice, n):
    """Torus vertex ids of the hole-cube surface in link lattice order."""
    idx = (np.asarray(center)[None, :] - hc + lattice) % n
    return vid_grid[idx[:, 0], idx[:, 1], idx[:, 2]]


def assemble(config: ConicalConfiguration, t: float, tau: float | None = None,
             n_shell: int = 3, radial_step: float = 0.22,
             margin: float = 0.9) -> GluedLagrangian:
    """Build the glued Lagrangian at scale t.

    The annulus over each cone end carries the exact 1-form interpolating
    between the scaled-neck graph potential and the component's cone
    potential; the waist is the scaled neck core.  Raises WindowViolation
    if the interpolation window fails and DeltaNotFound if the graph bound
    |xi^t| < zeta*r cannot be met with the requested margin.
    """
    config.validate()
    mu, lam = config.rates()
    tau_auto, kappa = choose_tau(mu, lam, config.ambient.m)
    if tau is None:
        tau = tau_auto
    m = config.ambient.m
    Rp = config.R_prime
    hc = config.hole_half_cells
    t_tau = t ** tau
    for cone in config.cones:
        if not (t * cone.neck.T < t_tau and 2 * t_tau < Rp):
            raise WindowViolation(
                f"need t*T < t^tau < 2 t^tau < R': "
                f"{t * cone.neck.T:.4f}, {t_tau:.4f}, {Rp:.4f}")
    b = MeshBuilder(config.ambient, m)
    # component cores
    core_grids = []
    holes_per_comp = [{"half_cells": hc, "centers": []} for _ in config.components]
    for ci, cone in enumerate(config.cones):
        for e, att in enumerate(cone.ends):
            holes_per_comp[att.component]["centers"].append(att.hole_center)
    for k, comp in enumerate(config.components):
        if 2 * hc >= comp.n:
            raise ValidationError("hole larger than the torus")
        core_grids.append(_torus_region(b, comp, holes_per_comp[k], k))
    b.set_resolution(max(c.side / c.n / max(Rp, 1.0) for c in config.components))

    zeta_all = []
    sup_ratio = 0.0
    annulus_levels = {}
    for ci, cone in enumerate(config.cones):
        link = cone.link
        neck = cone.neck
        zeta = 0.25 * link.min_component_separation()
        zeta_all.append(zeta)
        n_link = link.n
        if n_link != 2 * hc:
            raise ValidationError(
                f"link resolution {n_link} must equal hole side {2 * hc}")
        n_r = max(8, int(np.ceil(np.log(Rp / (t * neck.T)) / radial_step)))
        r_levels = np.exp(np.linspace(np.log(t * neck.T), np.log(Rp), n_r + 1))
        annulus_levels[ci] = r_levels
        s_levels = r_levels / t
        for e, att in enumerate(cone.ends):
            comp_link = link.components[e]
            nu, E = neck.end_chart_at(e, s_levels)
            dirs = comp_link.directions
            # offset of the interpolated graph, embedded in the plane chart
            w = interpolated_potential(nu, E, t, tau, r_levels, dirs)
            ratio = np.linalg.norm(w, axis=-1) / r_levels[None, :]
            sup_ratio = max(sup_ratio, float(np.max(ratio / zeta)))
            z = np.einsum("ij,vlj->vli", comp_link.frame,
                          r_levels[None, :, None] * dirs[:, None, :] + 1j * w)
            apos = np.concatenate([z.real, z.imag], axis=-1)
            atab = b.alloc((len(comp_link.local_vids), n_r + 1))
            b.tables[f"annulus{ci}e{e}"] = atab
            for chi_i, (grid, per) in enumerate(comp_link.charts):
                b.add_region(f"annulus{ci}e{e}/c{chi_i}", "ANNULUS_Q",
                             atab[grid], apos[grid],
                             periodic=(per[0], per[1], False),
                             frame=f"cone{ci}", tag=ci,
                             component=att.component)
            # shell: sphere at R' blending to the hole cube surface
            tcomp = config.components[att.component]
            dx = tcomp.side / tcomp.n
            cube_pts = (comp_link.lattice - hc) * dx
            hole_u = np.asarray(att.hole_center, dtype=float) * dx
            stab = np.empty((len(comp_link.local_vids), n_shell + 1),
                            dtype=np.int64)
            stab[:, 0] = atab[:, -1]
            stab[:, -1] = _hole_surface_ids(core_grids[att.component],
                                            att.hole_center, hc,
                                            comp_link.lattice, tcomp.n)
            if n_shell > 1:
                stab[:, 1:-1] = b.alloc((len(comp_link.local_vids),
                                         n_shell - 1))
            ss = np.linspace(0.0, 1.0, n_shell + 1)
            blend = ((1 - ss)[None, :, None] * (Rp * dirs)[:, None, :]
                     + ss[None, :, None] * cube_pts[:, None, :])
            spos = embed_real(hole_u[None, None, :] + blend, tcomp.frame,
                              tcomp.offset)
            for chi_i, (grid, per) in enumerate(comp_link.charts):
                b.add_region(f"shell{ci}e{e}/c{chi_i}", "CORE_K",
                             stab[grid], spos[grid],
                             periodic=(per[0], per[1], False),
                             frame=f"comp{att.component}", tag=ci,
                             component=att.component)
        # waist: the scaled neck core, joining the two end annuli at level 0
        if neck.waist_table is None:
            raise ConeMismatch("neck lacks a waist table")
        wt = neck.waist_table
        n_y = wt.shape[1] - 1
        gtab = np.empty_like(wt)
        gtab[:, 0] = b.tables[f"annulus{ci}e0"][:, 0]
        gtab[:, -1] = b.tables[f"annulus{ci}e1"][:, 0]
        gtab[:, 1:-1] = b.alloc((wt.shape[0], n_y - 1))
        b.tables[f"waist{ci}"] = gtab
        wpos_tab = np.zeros((neck.mesh.nv, 2 * m))
        for reg in neck.mesh.regions:
            wpos_tab[reg.vid] = reg.pos
        wpos = t * wpos_tab[wt]
        c0 = link.components[0]
        for chi_i, (grid, per) in enumerate(c0.charts):
            b.add_region(f"waist{ci}/c{chi_i}", "NECK_P", gtab[grid],
                         wpos[grid], periodic=(per[0], per[1], False),
                         frame=f"cone{ci}", tag=ci, component=-1)
    if sup_ratio >= margin:
        raise DeltaNotFound(
            f"|xi^t|/(zeta r) reaches {sup_ratio:.3f} >= margin {margin}; "
            "t is outside the admissible window")
    mesh = b.finalize()
    glued = GluedLagrangian(mesh=mesh, t=t, tau=tau, kappa=kappa,
                            config=config, zeta=float(min(zeta_all)) if zeta_all
                            else np.inf,
                            annulus_levels=annulus_levels,
                            xi_sup_ratio=sup_ratio)
    glued.metadata["t_tau"] = t_tau
    return glued


def interpolated_potential(nu, E_vals, t: float, tau: float,
                           r_levels: np.ndarray, dirs: np.ndarray,
                           A_vals=None, eta_offsets=None):
    """Offset field of the interpolated exact 1-form on one annulus end.

    nu and E_vals are the neck chart offsets and potential sampled at
    s = r/t; the returned embedded offsets w(sigma, r) realize the
    differential of the bracketed potential: the graph equals the scaled
    neck (w = t nu) for r <= t^tau and the cone-side graph (dA, or the
    exact cone when A is absent) for r >= 2 t^tau.
    """
    t_tau = t ** tau
    F = cutoff(r_levels / t_tau)
    Fp = cutoff_prime(r_levels / t_tau)
    w = (t * (1.0 - F)[None, :, None] * nu
         - (t ** (2.0 - tau)) * (Fp[None, :] * E_vals)[:, :, None]
         * dirs[:, None, :])
    if A_vals is not None and eta_offsets is not None:
        w = w + (F[None, :, None] * eta_offsets
                 + (t ** (-tau)) * (Fp[None, :] * A_vals)[:, :, None]
                 * dirs[:, None, :])
    return w


def obstruction(config: ConicalConfiguration, r_eval_factor: float = 2.0,
                tol_factor: float = 3.0):
    """Per-component sums S_k = sum psi(x_i)^m Z(L_i).[Sigma_i^j].

    Returns (sums, tolerance, flags); a component is VIOLATED when |S_k|
    exceeds tol_factor times the accumulated quadrature error estimate.
    """
    psi_m = config.ambient.psi ** config.ambient.m
    sums = np.zeros(config.q)
    errs = np.zeros(config.q)
    for cone in config.cones:
        rep = invariant_Z_pairings(cone.neck, r_eval_factor * cone.neck.T)
        for e, att in enumerate(cone.ends):
            sums[att.component] += psi_m * rep.pairings[e]
            errs[att.component] += psi_m * rep.quadrature_error[e]
    tol = tol_factor * (errs + 1e-14)
    flags = ["VIOLATED" if abs(s) > tt else "PASS"
             for s, tt in zip(sums, tol)]
    return sums, tol, flags


def neck_harmonic_basis(config: ConicalConfiguration):
    """Bounded harmonic solves v^(e_j) per neck, for the subspace basis."""
    out = []
    for cone in config.cones:
        ends = cone.neck.ends
        vs = []
        for j in range(ends):
            c = np.zeros(ends)
            c[j] = 1.0
            v, _ = bounded_harmonic(cone.neck, c)
            vs.append(v)
        out.append(vs)
    return out


def build_subspace_W(glued: GluedLagrangian, harmonics=None) -> SubspaceW:
    """Basis fields w_(e_k): constant on component cores, harmonic on necks.

    On each annulus the half-annulus ramp F(2 t^-tau r) blends the neck
    harmonic (sampled at radius r/t) into the constant of the attached
    component; the all-ones vector is always in the span.
    """
    config = glued.config
    if harmonics is None:
        harmonics = neck_harmonic_basis(config)
    if len(harmonics) != config.n_cones:
        raise HarmonicsMissing("need harmonic data for every cone")
    mesh = glued.mesh
    q = config.q
    t = glued.t
    t_tau = glued.metadata["t_tau"]
    basis = np.zeros((q, mesh.nv))
    for k in range(q):
        w = np.zeros(mesh.nv)
        filled = np.zeros(mesh.nv, dtype=bool)
        # cores and shells: indicator constants
        for reg in mesh.regions:
            if reg.label == "CORE_K":
                ids = reg.vid[reg.vid >= 0]
                w[ids] = 1.0 if reg.component == k else 0.0
                filled[ids] = True
        for ci, cone in enumerate(config.cones):
            neck = cone.neck
            d_vec = np.array([1.0 if att.component == k else 0.0
                              for att in cone.ends])
            v_field = sum(d_vec[j] * harmonics[ci][j]
                          for j in range(neck.ends))
            # waist
            gtab = glued.waist_table(ci)
            w[gtab] = v_field[neck.waist_table]
            filled[gtab] = True
            # annuli
            r_levels = glued.annulus_levels[ci]
            s_levels = r_levels / t
            ramp = cutoff(2.0 * r_levels / t_tau)
            for e, att in enumerate(cone.ends):
                atab = glued.annulus_table(ci, e)
                v_tab = v_field[neck.end_tables[e]]
                v_s = _radial_interp(neck.charts[e].r_levels, v_tab, s_levels)
                cj = d_vec[e]
                vals = (1.0 - ramp)[None, :] * v_s + ramp[None, :] * cj
                w[atab] = vals
                filled[atab] = True
        basis[k] = w
    gram = np.einsum("av,bv,v->ab", basis, basis, mesh.vertex_mass)
    if np.linalg.cond(gram) > 1e12:
        raise SingularGram("W basis is numerically dependent")
    return SubspaceW(mesh=mesh, basis=basis, gram=gram)


def _radial_interp(r_tab, vals, r_new):
    """Log-radius linear interpolation of (V, L) tables to new radii."""
    lt = np.log(r_tab)
    ln = np.log(np.clip(r_new, r_tab[0], r_tab[-1]))
    idx = np.clip(np.searchsorted(lt, ln) - 1, 0, len(lt) - 2)
    wgt = (ln - lt[idx]) / (lt[idx + 1] - lt[idx])
    return vals[:, idx] * (1 - wgt)[None, :] + vals[:, idx + 1] * wgt[None, :]


def region_error_audit(glued: GluedLagrangian):
    """Measured phase-error maxima per gluing zone with fitted constants.

    Checks the piecewise profile: zero on the core and outer annuli to mesh
    tolerance, O(r) on inner annuli, O(t) on necks, and the composite rate
    bound on the blend zone.
    """
    theta, eps = phase_and_error(glued.mesh, density_tol=0.2)
    e = np.abs(eps.values)
    t = glued.t
    tau = glued.tau
    t_tau = glued.metadata["t_tau"]
    mu, lam = glued.config.rates()
    out = {}
    core_ids = _label_vertices(glued.mesh, "CORE_K")
    out["core_max"] = float(e[core_ids].max()) if len(core_ids) else 0.0
    neck_ids = _label_vertices(glued.mesh, "NECK_P")
    out["neck_max"] = float(e[neck_ids].max()) if len(neck_ids) else 0.0
    out["neck_over_t"] = out["neck_max"] / t
    inner_max = ratio_inner = 0.0
    blend_max = 0.0
    outer_max = 0.0
    for ci in range(glued.config.n_cones):
        r = glued.annulus_levels[ci]
        for eidx in range(glued.config.cones[ci].link.n_components):
            tab = glued.mesh.tables[f"annulus{ci}e{eidx}"]
            ee = e[tab]
            inner = r <= t_tau
            blend = (r > t_tau) & (r < 2 * t_tau)
            outer = r >= 2 * t_tau
            if inner.any():
                inner_max = max(inner_max, float(ee[:, inner].max()))
                ratio_inner = max(ratio_inner, float(
                    np.max(ee[:, inner] / r[None, inner])))
            if blend.any():
                blend_max = max(blend_max, float(ee[:, blend].max()))
            if outer.any():
                outer_max = max(outer_max, float(ee[:, outer].max()))
    out["inner_annulus_max"] = inner_max
    out["inner_annulus_over_r"] = ratio_inner
    out["blend_max"] = blend_max
    out["outer_annulus_max"] = outer_max
    pred = max(t ** (tau * (min(mu) - 2.0)), t ** ((1 - tau) * (2.0 - max(lam))))
    out["blend_profile_ratio"] = blend_max / pred if pred > 0 else 0.0
    return out


def _label_vertices(mesh: Mesh, label: str) -> np.ndarray:
    ids = []
    for reg in mesh.regions:
        if reg.label == label:
            ids.append(reg.vid[reg.vid >= 0].ravel())
    return np.unique(np.concatenate(ids)) if ids else np.zeros(0, dtype=np.int64)


# -- demo configurations -----------------------------------------------------------


def demo_configuration(kind: str, link_n: int = 6, torus_n: int = 16,
                       neck_scale: float = 0.2, mu: float = 2.5,
                       neck_kwargs: dict | None = None) -> ConicalConfiguration:
    """Desk-scale torus models glued along plane-pair cones.

    kind = 'q1': one torus with two cone points (both ends of each cone on
    the single component); 'q2': two tori with swapped incidence so the
    component sums cancel; 'q2_violated': the q2 model with one neck
    dilated, planting a nonzero obstruction.
    """
    from .acsl import dilate, lawlor_neck

    if kind not in ("q1", "q2", "q2_violated"):
        raise ValidationError(f"unknown demo kind {kind!r}")
    m = 3
    side = float(torus_n)
    lattice = side * np.eye(2 * m)
    amb = make_flat_ambient(m, lattice=lattice)
    angles = np.full(m, np.pi / m)
    nk = dict(link_n=link_n, n_levels=40, n_y=max(6, link_n))
    if neck_kwargs:
        nk.update(neck_kwargs)
    neck = lawlor_neck(m, neck_scale, angles=angles, **nk)
    neck2 = neck if kind != "q2_violated" else dilate(neck, 1.3)
    hc = link_n // 2
    if link_n % 2:
        raise ValidationError("link_n must be even (hole side = link_n cells)")
    c = torus_n // 4
    hc3 = 3 * c
    if kind == "q1":
        comps = [TorusComponent(n=torus_n, side=side)]
        ends0 = [EndAttachment(0, (c, c, c)), EndAttachment(0, (hc3, hc3, c))]
        ends1 = [EndAttachment(0, (c, hc3, hc3)), EndAttachment(0, (hc3, c, hc3))]
    else:
        comps = [TorusComponent(n=torus_n, side=side),
                 TorusComponent(n=torus_n, side=side,
                                frame=neck.link.components[1].frame)]
        ends0 = [EndAttachment(0, (c, c, c)), EndAttachment(1, (c, c, c))]
        ends1 = [EndAttachment(1, (hc3, hc3, hc3)),
                 EndAttachment(0, (hc3, hc3, hc3))]
    cone0 = ConePoint(link=neck.link, mu=mu, neck=neck, ends=ends0)
    cone1 = ConePoint(link=neck2.link, mu=mu, neck=neck2, ends=ends1)
    dx = side / torus_n
    Rp = 0.85 * hc * dx * 2.0 / 2.0
    Rp = 0.85 * (hc * dx)
    return ConicalConfiguration(ambient=amb, components=comps,
                                cones=[cone0, cone1], hole_half_cells=hc,
                                R_prime=Rp, name=kind)
