"""Flat almost Calabi-Yau model spaces and Lagrangian mesh operations.

The flat model on C^m carries g' = |dz|^2, omega' = (i/2) sum dz_k ^ dzbar_k
and Omega = c dz_1 ^ ... ^ dz_m.  The conformal factor psi is the constant
solving psi^(2m) omega^m / m! = (-1)^(m(m-1)/2) (i/2)^m Omega ^ Omegabar,
which for the flat model reduces to psi = |c|^(1/m).  Positions are stored
as 2m reals laid out (x_1..x_m, y_1..y_m) with z = x + i y.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (BranchAmbiguity, PhaseDegenerate, StepTooLarge,
                     ValidationError)
from .mesh import Mesh, MeshBuilder


@dataclass(frozen=True)
class AmbientSpace:
    """Flat Calabi-Yau model: C^m, or a torus quotient if a lattice is given."""

    m: int
    lattice: np.ndarray | None
    psi: float
    omega_scale: float

    @property
    def is_torus(self) -> bool:
        return self.lattice is not None


def make_flat_ambient(m: int, lattice=None, omega_scale: float = 1.0) -> AmbientSpace:
    """Flat model with Omega = omega_scale * dz_1^...^dz_m.

    The conformal factor is psi = omega_scale^(1/m), the unique constant
    making Re Omega a calibration for the rescaled metric psi^2 g'.
    """
    if int(m) != m or m < 3:
        raise ValidationError(f"ambient dimension must be an integer >= 3, got {m}")
    m = int(m)
    if omega_scale <= 0:
        raise ValidationError("omega_scale must be positive")
    if lattice is not None:
        lattice = np.asarray(lattice, dtype=float)
        if lattice.shape != (2 * m, 2 * m):
            raise ValidationError(f"lattice must be {2*m}x{2*m}")
        if abs(np.linalg.det(lattice)) < 1e-12:
            raise ValidationError("lattice basis is degenerate")
    psi = float(omega_scale ** (1.0 / m))
    return AmbientSpace(m=m, lattice=lattice, psi=psi, omega_scale=float(omega_scale))


@dataclass
class ScalarField:
    """Per-vertex real values on a mesh."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.nv,):
            raise ValidationError("scalar field length != vertex count")
        if not np.all(np.isfinite(self.values[self.mesh.active_vertices])):
            raise ValidationError("scalar field has non-finite values")


@dataclass
class OneFormField:
    """Per-region covector grids in chart coordinates (values shape grid+(d,))."""

    mesh: Mesh
    components: dict = field(default_factory=dict)

    def region_grid(self, name: str) -> np.ndarray:
        return self.components[name]


# -- frame helpers -------------------------------------------------------------


def embed_real(u: np.ndarray, frame: np.ndarray | None = None,
               offset: np.ndarray | None = None) -> np.ndarray:
    """Map real chart points u in R^m to 2m-real ambient coordinates.

    frame is an m x m complex unitary applied as z = frame @ u; offset is a
    2m-real translation.
    """
    u = np.asarray(u, dtype=float)
    m = u.shape[-1]
    if frame is None:
        z = u.astype(complex)
    else:
        z = np.einsum("ij,...j->...i", frame, u.astype(complex))
    out = np.concatenate([np.real(z), np.imag(z)], axis=-1)
    if offset is not None:
        out = out + np.asarray(offset, dtype=float)
    return out


def rot90(vec: np.ndarray) -> np.ndarray:
    """Multiplication by i on 2m-real vectors laid out (x, y)."""
    m = vec.shape[-1] // 2
    out = np.empty_like(vec)
    out[..., :m] = -vec[..., m:]
    out[..., m:] = vec[..., :m]
    return out


# -- basic flat meshes ---------------------------------------------------------


def flat_torus_mesh(ambient: AmbientSpace, n: int, side: float = 1.0,
                    frame: np.ndarray | None = None,
                    offset: np.ndarray | None = None) -> Mesh:
    """Flat Lagrangian m-torus (u mod side) embedded through a unitary frame."""
    m = ambient.m
    b = MeshBuilder(ambient, m)
    shape_cells = (n,) * m
    core = b.alloc(shape_cells)
    vid = core
    for ax in range(m):
        vid = np.concatenate([vid, np.take(vid, [0], axis=ax)], axis=ax)
    axes = [np.arange(n + 1) * (side / n) for _ in range(m)]
    grids = np.meshgrid(*axes, indexing="ij")
    u = np.stack(grids, axis=-1)
    pos = embed_real(u, frame, offset)
    periods = tuple(
        embed_real(side * np.eye(m)[ax], frame) for ax in range(m)
    )
    b.add_region("torus", "CORE_K", vid, pos, periodic=(True,) * m,
                 frame="global", component=0, pos_period=periods)
    b.set_resolution(side / n)
    mesh = b.finalize()
    mesh.metadata["side"] = side
    return mesh


def flat_box_mesh(ambient: AmbientSpace, n: int, extent: float = 1.0) -> Mesh:
    """Non-periodic flat chart [0, extent]^m in R^m subset C^m."""
    m = ambient.m
    b = MeshBuilder(ambient, m)
    vid = b.alloc((n + 1,) * m)
    axes = [np.arange(n + 1) * (extent / n) for _ in range(m)]
    u = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pos = embed_real(u)
    b.add_region("box", "PLAIN", vid, pos, periodic=(False,) * m, frame="global")
    b.set_resolution(extent / n)
    return b.finalize()


# -- operations ----------------------------------------------------------------


def lagrangian_defect(mesh: Mesh) -> float:
    """sup over cells of |iota* omega| measured in the induced metric.

    Evaluated at cell centers, where the multilinear interpolant of a
    smooth Lagrangian immersion has a second-order pullback defect.
    """
    m = mesh.ambient.m
    J, hinv = mesh.center_jacobian()
    Jc = J[:, :m, :] + 1j * J[:, m:, :]
    # omega(J_a, J_b) = sum_k Im( conj(z_a) z_b )
    w = np.imag(np.einsum("xka,xkb->xab", np.conj(Jc), Jc, optimize=True))
    n2 = 0.5 * np.einsum("xab,xae,xbf,xef->x", w, hinv, hinv, w,
                         optimize=True)
    return float(np.sqrt(np.maximum(n2, 0.0)).max())


def default_lagrangian_tol(mesh: Mesh, curvature_scale: float = 1.0) -> float:
    """10 * resolution^2 * curvature scale, the second-order chart accuracy."""
    return 10.0 * mesh.resolution ** 2 * curvature_scale + 1e-12


def phase_and_error(mesh: Mesh, lagrangian_tol: float | None = None,
                    density_tol: float = 0.05):
    """Phase theta with Omega|_N = psi^m e^(i theta) dV, and eps = psi^m sin theta.

    The branch is the principal one, anchored at the maximal-cos(theta)
    vertex; with cos(theta) bounded away from zero (the working regime) the
    principal branch is the continuous one on every connected chart.
    """
    amb = mesh.ambient
    if lagrangian_tol is not None:
        d = lagrangian_defect(mesh)
        if d > lagrangian_tol:
            raise PhaseDegenerate(
                f"lagrangian defect {d:.3e} exceeds tolerance {lagrangian_tol:.3e}")
    dens = mesh.vertex_phase_density()
    psim = amb.psi ** amb.m
    act = mesh.active_vertices
    mag = np.abs(dens[act]) / psim
    dev = float(np.max(np.abs(mag - 1.0)))
    if dev > density_tol:
        raise PhaseDegenerate(
            f"|Omega| deviates from psi^m by {dev:.3e} (tol {density_tol:.1e}); "
            "mesh is not Lagrangian enough")
    w = dens / psim
    cos = np.real(w)
    if np.min(cos[act]) <= 0.0:
        raise BranchAmbiguity("cos(theta) <= 0 somewhere; outside working regime")
    theta = np.zeros(mesh.nv)
    theta[act] = np.angle(w[act])
    eps = psim * np.sin(theta)
    return ScalarField(mesh, theta), ScalarField(mesh, eps)


def _move_positions(mesh: Mesh, per_region_vec) -> dict:
    """New per-region position grids moved by i * (given tangent vectors).

    Moves are averaged per (frame, vertex) before being applied, so shared
    vertices of same-frame regions move consistently and cells stay closed.
    """
    acc = {}
    cnt = {}
    for reg in mesh.regions:
        vec = per_region_vec(reg)
        key = reg.frame
        if key not in acc:
            acc[key] = np.zeros((mesh.nv, reg.pos.shape[-1]))
            cnt[key] = np.zeros(mesh.nv)
        ok = reg.vid >= 0
        np.add.at(acc[key], reg.vid[ok], vec[ok])
        np.add.at(cnt[key], reg.vid[ok], 1.0)
    for key in acc:
        nz = cnt[key] > 0
        acc[key][nz] /= cnt[key][nz][:, None]
    out = {}
    for reg in mesh.regions:
        vec = acc[reg.frame][np.maximum(reg.vid, 0)]
        vec = np.where((reg.vid >= 0)[..., None], vec, 0.0)
        out[reg.name] = reg.pos + rot90(vec)
    return out


def graph_of_scalar(mesh: Mesh, values: np.ndarray) -> Mesh:
    """Mesh moved to the graph of df: x -> x + i grad_h f, chartwise."""
    def vec(reg):
        grid = reg.grid_of(values)
        df = reg.gradient_grids(grid)
        _, hinv, _ = reg.metric()
        up = np.einsum("...ab,...b->...a", hinv, df)
        tan = reg.tangents()
        v = np.einsum("...ia,...a->...i", tan, up)
        return np.where(np.isfinite(v), v, 0.0)
    return mesh.with_positions(_move_positions(mesh, vec))


def graph_of_one_form(mesh: Mesh, alpha: OneFormField) -> Mesh:
    """Mesh moved to the graph of a (not necessarily closed) 1-form."""
    def vec(reg):
        comp = alpha.components.get(reg.name)
        if comp is None:
            return np.zeros(reg.pos.shape)
        _, hinv, _ = reg.metric()
        up = np.einsum("...ab,...b->...a", hinv, comp)
        tan = reg.tangents()
        v = np.einsum("...ia,...a->...i", tan, up)
        return np.where(np.isfinite(v), v, 0.0)
    return mesh.with_positions(_move_positions(mesh, vec))


def sup_df(mesh: Mesh, values: np.ndarray) -> float:
    """sup |df|_h over quadrature points."""
    _, g2 = mesh.cell_gradient(np.asarray(values, dtype=float))
    return float(np.sqrt(np.max(g2)))


def hamiltonian_graph(mesh: Mesh, f, neighbourhood_bound: float | None = None) -> Mesh:
    """Graph move Phi(Gamma(df)) with the chartwise exact/second-order map.

    On flat charts the move x -> x + i grad f is the exact generating-function
    construction; on curved charts its omega-defect is quadratic in
    (|df| + |grad df|).  The resulting defect is recorded in the output
    metadata.
    """
    values = f.values if isinstance(f, ScalarField) else np.asarray(f, dtype=float)
    if values.shape != (mesh.nv,):
        raise ValidationError("field does not match mesh")
    step = sup_df(mesh, values)
    if neighbourhood_bound is not None and step >= neighbourhood_bound:
        raise StepTooLarge(
            f"sup|df| = {step:.3e} exceeds neighbourhood bound "
            f"{neighbourhood_bound:.3e}")
    out = graph_of_scalar(mesh, values)
    out.metadata["graph_sup_df"] = step
    out.metadata["graph_omega_defect"] = lagrangian_defect(out)
    return out
