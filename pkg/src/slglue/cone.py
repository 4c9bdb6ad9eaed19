"""Special Lagrangian cones: links, spectra, and homogeneous exponents.

A cone C with isolated singularity is handled through its link
Sigma = C intersect S^(2m-1), a compact (m-1)-manifold meshed with quad
cells.  Homogeneous harmonic functions r^alpha v on the cone correspond to
eigenfunctions of the link Laplacian with eigenvalue alpha(alpha+m-2);
the exponent set, multiplicities and counting function derived from the
spectrum gate the admissible decay rates everywhere else in the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ambient import AmbientSpace, embed_real
from .errors import (EigenFail, InsufficientSpectrum, ValidationError)
from .mesh import Mesh, MeshBuilder

ZERO_EIGEN_TOL = 1e-9


@dataclass
class LinkComponent:
    """One connected component of a cone link."""

    name: str
    local_vids: np.ndarray              # (V_c,) global link-mesh vertex ids
    charts: list                        # list of (vid_grid_local, periodic pair)
    frame: np.ndarray | None = None     # m x m complex unitary for plane ends
    directions: np.ndarray | None = None  # (V_c, m) real unit dirs for plane ends
    loops: list = field(default_factory=list)  # local index cycles for periods
    lattice: np.ndarray | None = None   # (V_c, 3) cube-surface lattice (sphere type)


@dataclass
class ConeLink:
    """Discretized link of an SL cone, with component and spectral metadata."""

    ambient: AmbientSpace
    mesh: Mesh
    components: list
    analytic_tag: str | None = None
    n: int = 0
    rebuild: object = None              # callable n -> ConeLink, or None
    _spectral_cache: dict = field(default_factory=dict, repr=False)

    @property
    def m(self) -> int:
        return self.ambient.m

    @property
    def n_components(self) -> int:
        return len(self.components)

    def positions(self) -> np.ndarray:
        """Link vertex positions on the unit sphere (global vertex table)."""
        out = np.zeros((self.mesh.nv, 2 * self.m))
        for reg in self.mesh.regions:
            out[reg.vid] = reg.pos
        return out

    def min_component_separation(self) -> float:
        """Smallest chordal distance between distinct components."""
        if self.n_components < 2:
            return np.inf
        P = self.positions()
        best = np.inf
        for i, a in enumerate(self.components):
            for bcomp in self.components[i + 1:]:
                pa = P[a.local_vids]
                pb = P[bcomp.local_vids]
                d2 = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=-1)
                best = min(best, float(np.sqrt(d2.min())))
        return best


@dataclass
class SpectralData:
    """Ascending Laplace eigenvalues of a link with multiplicity clusters."""

    eigenvalues: np.ndarray
    multiplicities: np.ndarray          # per distinct cluster
    clusters: np.ndarray                # representative value per cluster
    error_estimates: np.ndarray         # per eigenvalue
    mesh_resolution: float
    n_components: int

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues)
        if np.any(np.diff(ev) < -1e-12):
            raise ValidationError("eigenvalues must be ascending")


# -- builders -------------------------------------------------------------------


def _cube_surface_lattice(n: int):
    """Deduplicated lattice points of the cube surface with 6 face grids."""
    index = {}
    pts = []

    def vid_of(i, j, k):
        key = (i, j, k)
        if key not in index:
            index[key] = len(pts)
            pts.append(key)
        return index[key]

    faces = []
    for ax in range(3):
        for side in (0, 1):
            # outward-consistent orientation: swap grid axes on the 0-side
            if side == 1:
                u_ax, v_ax = (ax + 1) % 3, (ax + 2) % 3
            else:
                u_ax, v_ax = (ax + 2) % 3, (ax + 1) % 3
            grid = np.empty((n + 1, n + 1), dtype=np.int64)
            for i in range(n + 1):
                for j in range(n + 1):
                    c = [0, 0, 0]
                    c[ax] = side * n
                    c[u_ax] = i
                    c[v_ax] = j
                    grid[i, j] = vid_of(*c)
            faces.append(grid)
    lattice = np.array(pts, dtype=float)
    # equiangular gnomonic coordinates: smoother parametrization than the
    # raw normalized cube, which improves pointwise FD consistency
    dirs = np.tan((2.0 * lattice / n - 1.0) * (np.pi / 4.0))
    on_face = np.abs(2.0 * lattice / n - 1.0) > 1.0 - 1e-12
    dirs[on_face] = np.sign(2.0 * lattice[on_face] / n - 1.0)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs, faces, index


def _sphere_loops(n: int, index: dict):
    """Three coordinate equator loops on the cubed sphere (n even)."""
    if n % 2:
        return []
    loops = []
    h = n // 2
    for ax in range(3):
        u_ax, v_ax = (ax + 1) % 3, (ax + 2) % 3
        ring = []
        walk = ([(s, 0) for s in range(n)] + [(n, s) for s in range(n)]
                + [(n - s, n) for s in range(n)] + [(0, n - s) for s in range(n)])
        for (a, bb) in walk:
            c = [0, 0, 0]
            c[ax] = h
            c[u_ax] = a
            c[v_ax] = bb
            ring.append(index[tuple(c)])
        loops.append(np.array(ring, dtype=np.int64))
    return loops


def _add_sphere_component(builder: MeshBuilder, ambient: AmbientSpace,
                          n: int, frame, name: str,
                          comp_index: int) -> LinkComponent:
    dirs, faces, index = _cube_surface_lattice(n)
    nv_local = dirs.shape[0]
    gids = builder.alloc((nv_local,))
    # embed: directions live in R^3 of the plane; frame maps into C^m
    pts = embed_real(dirs, frame)
    for fi, grid in enumerate(faces):
        vid = gids[grid]
        pos = pts[grid]
        builder.add_region(f"{name}/f{fi}", "PLAIN", vid, pos,
                           periodic=(False, False), frame=name,
                           component=comp_index)
    builder.set_resolution(2.0 / n)
    lattice = np.array(sorted(index, key=index.get), dtype=np.int64)
    return LinkComponent(
        name=name, local_vids=gids,
        charts=[(g, (False, False)) for g in faces],
        frame=np.eye(ambient.m, dtype=complex) if frame is None else frame,
        directions=dirs, loops=_sphere_loops(n, index), lattice=lattice,
    )


def round_sphere_link(ambient: AmbientSpace, n: int = 16) -> ConeLink:
    """Link of the plane R^m in C^m: a round unit (m-1)-sphere (m = 3 mesh)."""
    if ambient.m != 3:
        raise ValidationError("sphere link meshes are built for m = 3")
    b = MeshBuilder(ambient, 2)
    comp = _add_sphere_component(b, ambient, n, None, "sphere", 0)
    mesh = b.finalize(orient=False)
    return ConeLink(ambient, mesh, [comp], analytic_tag="ROUND_SPHERE", n=n,
                    rebuild=lambda k: round_sphere_link(ambient, k))


def pair_frames(angles) -> tuple:
    """Unitary frames of the SL plane pair Pi_0, Pi_phi (angles sum to pi)."""
    phis = np.asarray(angles, dtype=float)
    f0 = np.eye(len(phis), dtype=complex)
    f1 = np.diag(np.exp(1j * phis))
    return f0, f1


def plane_pair_link(ambient: AmbientSpace, angles, n: int = 16) -> ConeLink:
    """Link of the union of two transverse SL planes: two disjoint spheres."""
    if ambient.m != 3:
        raise ValidationError("plane-pair link meshes are built for m = 3")
    if len(angles) != ambient.m:
        raise ValidationError("need one angle per complex coordinate")
    f0, f1 = pair_frames(angles)
    b = MeshBuilder(ambient, 2)
    c0 = _add_sphere_component(b, ambient, n, f0, "end0", 0)
    c1 = _add_sphere_component(b, ambient, n, f1, "end1", 1)
    mesh = b.finalize(orient=False)
    link = ConeLink(ambient, mesh, [c0, c1], analytic_tag="UNION_OF_PLANES",
                    n=n, rebuild=lambda k: plane_pair_link(ambient, angles, k))
    link.angles = np.asarray(angles, dtype=float)
    return link


def two_spheres_link(ambient: AmbientSpace, n: int = 16,
                     separation_frame=None) -> ConeLink:
    """Two disjoint round spheres (for multiplicity-of-zero tests)."""
    return plane_pair_link(ambient, np.full(ambient.m, np.pi / ambient.m), n)


def flat_torus_link(ambient: AmbientSpace, n: int = 16) -> ConeLink:
    """Link of the T^2-cone {(z1,z2,z3): |z1|=|z2|=|z3|, arg(z1 z2 z3)=0}."""
    if ambient.m != 3:
        raise ValidationError("the flat torus link lives in C^3")
    b = MeshBuilder(ambient, 2)
    core = b.alloc((n, n))
    vid = np.concatenate([core, core[:1]], axis=0)
    vid = np.concatenate([vid, vid[:, :1]], axis=1)
    th = np.arange(n + 1) * (2 * np.pi / n)
    t1, t2 = np.meshgrid(th, th, indexing="ij")
    z = np.stack([np.exp(1j * t1), np.exp(1j * t2),
                  np.exp(-1j * (t1 + t2))], axis=-1) / np.sqrt(3.0)
    pos = np.concatenate([z.real, z.imag], axis=-1)
    b.add_region("torus_link", "PLAIN", vid, pos, periodic=(True, True),
                 frame="torus_link", component=0)
    b.set_resolution(2 * np.pi / n)
    mesh = b.finalize(orient=False)
    loops = [np.arange(n, dtype=np.int64) * n,      # theta1 varies
             np.arange(n, dtype=np.int64)]          # theta2 varies
    comp = LinkComponent(name="torus_link", local_vids=np.arange(mesh.nv),
                         charts=[(vid, (True, True))], loops=loops)
    return ConeLink(ambient, mesh, [comp], analytic_tag="FLAT_TORUS", n=n,
                    rebuild=lambda k: flat_torus_link(ambient, k))


# -- spectrum -------------------------------------------------------------------


def _raw_spectrum(mesh: Mesh, count: int, seed: int = 71) -> np.ndarray:
    A = mesh.stiffness()
    M = sp.diags(mesh.vertex_mass)
    k = min(count, mesh.nv - 2)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(mesh.nv)
    try:
        vals = spla.eigsh(A, k=k, M=M, sigma=0.0, which="LM", v0=v0,
                          return_eigenvectors=False)
    except Exception as exc:  # pragma: no cover - solver failure path
        raise EigenFail(f"eigensolver failed: {exc}") from exc
    vals = np.sort(np.maximum(np.real(vals), 0.0))
    vals[vals < ZERO_EIGEN_TOL] = 0.0
    return vals


def link_spectrum(link: ConeLink, count: int, refine_factor: float = 1.5,
                  seed: int = 71) -> SpectralData:
    """Smallest `count` eigenvalues of the link Laplacian.

    Richardson error estimates come from a companion mesh refined by
    `refine_factor`; the returned eigenvalues are the refined ones.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    key = (count, refine_factor)
    if key in link._spectral_cache:
        return link._spectral_cache[key]
    coarse = _raw_spectrum(link.mesh, count, seed)
    if link.rebuild is not None:
        n2 = max(link.n + 2, int(np.ceil(link.n * refine_factor)))
        fine_link = link.rebuild(n2)
        fine = _raw_spectrum(fine_link.mesh, count, seed)
        ratio = (n2 / link.n) ** 2
        err = np.abs(fine - coarse) / (ratio - 1.0)
        vals = fine
        res = fine_link.mesh.resolution
    else:
        vals = coarse
        err = np.abs(vals) * link.mesh.resolution ** 2 + ZERO_EIGEN_TOL
        res = link.mesh.resolution
    zero_mult = int(np.sum(vals == 0.0))
    if zero_mult != link.n_components:
        raise EigenFail(
            f"zero eigenspace has dimension {zero_mult}, expected "
            f"{link.n_components} (one constant per component)")
    clusters, mults = _cluster(vals, err)
    data = SpectralData(eigenvalues=vals, multiplicities=mults,
                        clusters=clusters, error_estimates=err,
                        mesh_resolution=res,
                        n_components=link.n_components)
    link._spectral_cache[key] = data
    return data


def _cluster(vals: np.ndarray, err: np.ndarray):
    """Group eigenvalues within 10x their error estimates."""
    reps, mults = [], []
    i = 0
    while i < len(vals):
        j = i + 1
        tol = 10.0 * max(err[i], 1e-12) + 1e-12
        while j < len(vals) and vals[j] - vals[j - 1] <= max(tol, 10.0 * err[j - 1]):
            tol = 10.0 * max(err[j], 1e-12) + 1e-12
            j += 1
        reps.append(float(np.mean(vals[i:j])))
        mults.append(j - i)
        i = j
    return np.array(reps), np.array(mults, dtype=np.int64)


# -- exponents ------------------------------------------------------------------


def _roots_of(lam: float, m: int):
    """Both alpha with alpha(alpha+m-2) = lam."""
    disc = ((m - 2) / 2.0) ** 2 + lam
    if disc < 0:
        return ()
    s = np.sqrt(disc)
    return ((2.0 - m) / 2.0 + s, (2.0 - m) / 2.0 - s)


def exponent_set(link: ConeLink, interval, count: int = 24,
                 max_count: int = 400) -> list:
    """All (alpha, multiplicity) with alpha in [a,b] solving the root equation.

    Certification requires the computed spectrum to exceed the interval's
    eigenvalue demand by a 20% margin.
    """
    a, b = float(interval[0]), float(interval[1])
    if a > b:
        raise ValidationError("empty interval")
    m = link.m
    demand = max(a * (a + m - 2), b * (b + m - 2), 0.0)
    k = count
    while True:
        spec = link_spectrum(link, k)
        if spec.eigenvalues[-1] >= 1.2 * demand + 1e-9:
            break
        if k >= max_count or k >= link.mesh.nv - 2:
            raise InsufficientSpectrum(
                f"need eigenvalues past {1.2 * demand:.3f}, computed only to "
                f"{spec.eigenvalues[-1]:.3f}")
        k = min(max_count, 2 * k)
    out = []
    for lam, mult in zip(spec.clusters, spec.multiplicities):
        for alpha in set(np.round(_roots_of(lam, m), 12)):
            if a - 1e-9 <= alpha <= b + 1e-9:
                out.append((float(alpha), int(mult)))
    out.sort()
    merged = []
    for alpha, mult in out:
        if merged and abs(alpha - merged[-1][0]) < 1e-8:
            merged[-1] = (merged[-1][0], merged[-1][1] + mult)
        else:
            merged.append((alpha, mult))
    return merged


def counting_function(link: ConeLink, delta: float, count: int = 24) -> int:
    """N_Sigma(delta): negative sum over (delta,0), nonnegative over [0,delta]."""
    if delta < 0:
        ex = exponent_set(link, (delta, 0.0), count)
        return -int(sum(mult for alpha, mult in ex
                        if delta + 1e-12 < alpha < -1e-12))
    ex = exponent_set(link, (0.0, delta), count)
    return int(sum(mult for alpha, mult in ex if -1e-12 <= alpha <= delta + 1e-12))


def rate_gate(link: ConeLink, mu: float, count: int = 24) -> bool:
    """Check the conical rate condition: no exponents in (2, mu]."""
    if not (2.0 < mu < 3.0):
        raise ValidationError("conical rates must lie in (2,3)")
    ex = exponent_set(link, (2.0, mu), count)
    return all(alpha <= 2.0 + 1e-9 for alpha, _ in ex)


# -- cone meshes and the homogeneity identity -----------------------------------


def radial_levels(r_min: float, r_max: float, n_levels: int,
                  grading: float = 1.0) -> np.ndarray:
    """Radial grid, geometrically graded (finer near r_min) for grading > 1."""
    if not (0 < r_min < r_max):
        raise ValidationError("need 0 < r_min < r_max")
    if grading < 1.0:
        raise ValidationError("grading must be >= 1")
    if grading == 1.0:
        return np.linspace(r_min, r_max, n_levels + 1)
    t = np.linspace(0.0, 1.0, n_levels + 1)
    w = (grading ** t - 1.0) / (grading - 1.0)
    return r_min + (r_max - r_min) * w


def geometric_levels(r_min: float, r_max: float, n_levels: int) -> np.ndarray:
    """Logarithmically uniform radial grid (constant cell aspect)."""
    return np.exp(np.linspace(np.log(r_min), np.log(r_max), n_levels + 1))


def product_tables(builder: MeshBuilder, link: ConeLink, n_levels: int):
    """Allocate (link vertex, level) id tables, one per link component."""
    return [builder.alloc((len(c.local_vids), n_levels + 1))
            for c in link.components]


def add_link_product_region(builder: MeshBuilder, link: ConeLink,
                            comp_idx: int, vid_table: np.ndarray,
                            pos_table: np.ndarray, prefix: str, label: str,
                            frame: str, tag: int = -1, component: int = -1,
                            level_range=None):
    """Add the structured charts of (link component) x (radial levels)."""
    comp = link.components[comp_idx]
    sl = slice(None) if level_range is None else slice(*level_range)
    for ci, (grid, per) in enumerate(comp.charts):
        vid = vid_table[grid][..., sl]
        pos = pos_table[grid][..., sl, :]
        builder.add_region(f"{prefix}/c{ci}", label, vid, pos,
                           periodic=(per[0], per[1], False), frame=frame,
                           tag=tag, component=component)


def cone_mesh(link: ConeLink, r_min: float, r_max: float,
              grading: float = 1.0, n_levels: int | None = None) -> Mesh:
    """Mesh of the truncated cone with metric dr^2 + r^2 g_Sigma."""
    if r_min >= r_max:
        raise ValidationError("empty radial range")
    amb = link.ambient
    if n_levels is None:
        ang = max(link.mesh.resolution, 1e-3)
        n_levels = max(4, int(np.ceil((r_max - r_min) / (r_min * ang))))
        n_levels = min(n_levels, 64)
    levels = radial_levels(r_min, r_max, n_levels, grading)
    b = MeshBuilder(amb, amb.m)
    b.set_resolution(max(link.mesh.resolution, float(np.max(np.diff(levels)) / r_min)))
    P = link.positions()
    tables = product_tables(b, link, n_levels)
    for ci, comp in enumerate(link.components):
        pos = P[comp.local_vids][:, None, :] * levels[None, :, None]
        add_link_product_region(b, link, ci, tables[ci], pos,
                                prefix=f"cone{ci}", label="PLAIN",
                                frame=f"cone{ci}", component=ci)
    mesh = b.finalize(orient=None if amb.m == link.mesh.dim + 1 else False)
    mesh.metadata["levels"] = levels
    mesh.metadata["link_tables"] = [t.copy() for t in tables]
    return mesh


def homogeneity_check(link: ConeLink, v: np.ndarray, alpha: float,
                      r_samples, n_levels: int | None = None,
                      margin_frac: float = 1.0 / 6.0) -> float:
    """Residual of Delta(r^alpha v) = r^(alpha-2)(Delta_Sigma v - alpha(alpha+m-2) v).

    Both Laplacians are chartwise covariant finite differences; the sup-norm
    of the mismatch is taken over a fixed-fraction chart interior (stencil
    constants degrade near chart corners) and returned relative to the
    magnitude of the identity's terms.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (link.mesh.nv,):
        raise ValidationError("v must be a link vertex field")
    r_samples = np.sort(np.asarray(r_samples, dtype=float))
    r0, r1 = r_samples[0], r_samples[-1]
    m = link.m
    mesh = cone_mesh(link, r0, r1, grading=1.0, n_levels=n_levels)
    levels = mesh.metadata["levels"]
    tables = mesh.metadata["link_tables"]
    # u = r^alpha v on the cone; reference side uses the link's own Laplacian
    u = np.zeros(mesh.nv)
    lhs_ref = np.zeros(mesh.nv)
    margin = max(2, int(round(margin_frac * link.n))) if link.n else 2
    lap_v = link.mesh.vertex_laplacian_fd(v, margin=margin)
    lam = alpha * (alpha + m - 2.0)
    valid_link = np.isfinite(lap_v)
    for comp, tab in zip(link.components, tables):
        vv = v[comp.local_vids]
        lv = np.where(valid_link[comp.local_vids], lap_v[comp.local_vids], np.nan)
        u[tab] = (levels[None, :] ** alpha) * vv[:, None]
        lhs_ref[tab] = (levels[None, :] ** (alpha - 2.0)) * (lv - lam * vv)[:, None]
    lap_u = mesh.vertex_laplacian_fd(u, margin=margin)
    resid = np.abs(lap_u - lhs_ref)
    resid = resid[np.isfinite(resid)]
    if resid.size == 0:
        raise ValidationError("no interior vertices left for the residual")
    vmax = float(np.max(np.abs(v)))
    scale = max(np.max(levels ** (alpha - 2.0)) * vmax * max(1.0, abs(lam)), 1e-300)
    return float(resid.max() / scale)
