"""Chart-atlas meshes and the discrete geometry engine.

A mesh is a list of structured regions (tensor-product grids of d-cube
cells).  Regions reference a shared global vertex table, so seams between
regions are exact identifications; each region stores its own vertex
positions in its own flat model frame.  All geometric quantities (induced
metric, volume, form pullbacks, FEM matrices) are assembled cell-by-cell
from region-local positions, so transition maps between frames only need
to be ambient isometries preserving omega and Omega.

The imaginary part of the holomorphic volume form is integrated cell-wise
as the coboundary of a face cochain (the primitive Im(z1 dz2^...^dzm) is
integrated once per face).  On a closed mesh whose regions share one frame
the total therefore telescopes to zero at machine precision, which is what
makes the discrete conservation identities of the deformation loop exact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ChartFailure, ValidationError

LABELS = ("PLAIN", "CORE_K", "NECK_P", "ANNULUS_Q")

_G1 = (1.0 - 1.0 / np.sqrt(3.0)) / 2.0
_G2 = (1.0 + 1.0 / np.sqrt(3.0)) / 2.0


def _corners(d: int) -> np.ndarray:
    """Corner offsets of the unit d-cube, axis 0 = fastest bit."""
    out = np.zeros((2 ** d, d), dtype=np.int64)
    for b in range(2 ** d):
        for ax in range(d):
            out[b, ax] = (b >> ax) & 1
    return out


def _quad_rule(d: int):
    """Tensor 2-point Gauss rule on [0,1]^d: points (Q,d), weights (Q,)."""
    pts_1d = np.array([_G1, _G2])
    pts = np.array(list(itertools.product(pts_1d, repeat=d)))[:, ::-1]
    wts = np.full(2 ** d, 1.0 / 2 ** d)
    return pts, wts


def _shape_funcs(d: int, pts: np.ndarray):
    """Q1 shape functions and gradients at quadrature points.

    Returns N (Q, B) and dN (Q, B, d) for B = 2^d corners.
    """
    corners = _corners(d)
    Q = pts.shape[0]
    B = corners.shape[0]
    N = np.ones((Q, B))
    dN = np.zeros((Q, B, d))
    for b in range(B):
        for ax in range(d):
            xi = pts[:, ax]
            fac = xi if corners[b, ax] else 1.0 - xi
            N[:, b] *= fac
        for ax in range(d):
            g = np.ones(Q)
            for ax2 in range(d):
                xi = pts[:, ax2]
                if ax2 == ax:
                    g *= 1.0 if corners[b, ax2] else -1.0
                else:
                    g *= xi if corners[b, ax2] else 1.0 - xi
            dN[:, b, ax] = g
    return N, dN


def _face_tables(d: int):
    """Outward-oriented faces of the d-cube.

    Returns a list of (axis, side, corner_index_list) where the corner
    list orders the 2^(d-1) face corners so that the induced orientation
    is outward for a positively oriented cell.
    """
    corners = _corners(d)
    index_of = {tuple(c): i for i, c in enumerate(corners)}
    faces = []
    for ax in range(d):
        others = [(ax + 1 + k) % d for k in range(d - 1)]
        # parity of the cyclic permutation (ax, ax+1, ..., ax+d-1)
        sign = 1 if (ax * (d - 1)) % 2 == 0 else -1
        for side in (0, 1):
            sub = np.array(list(itertools.product((0, 1), repeat=d - 1)))[:, ::-1]
            ids = []
            for off in sub:
                c = [0] * d
                c[ax] = side
                for o_ax, o_val in zip(others, off):
                    c[o_ax] = int(o_val)
                ids.append(index_of[tuple(c)])
            orient = sign if side == 1 else -sign
            faces.append((ax, side, ids, orient, others))
    return faces


@dataclass
class Region:
    """One structured block of an atlas mesh."""

    name: str
    label: str
    vid: np.ndarray                  # grid of global vertex ids, -1 = dead
    pos: np.ndarray                  # grid + trailing (2m,) frame coordinates
    periodic: tuple                  # per-axis; periodic axes carry a wrap row
    frame: str = "global"            # frame id; face values cancel only within a frame
    cell_mask: np.ndarray | None = None
    tag: int = -1                    # cone index, -1 for none
    component: int = -1              # X' component index, -1 for none
    flip: bool = False               # set at finalize to orient Re(Omega) > 0
    pos_period: tuple | None = None  # per-axis position shift across the wrap
    _tan: np.ndarray | None = field(default=None, repr=False)
    _tan2: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.vid.ndim

    @property
    def cell_shape(self) -> tuple:
        return tuple(n - 1 for n in self.vid.shape)

    def interior_mask(self, margin: int = 2) -> np.ndarray:
        """Vertices at least `margin` layers from non-periodic chart edges."""
        mask = self.vid >= 0
        for ax in range(self.dim):
            if self.periodic[ax]:
                continue
            sl = [slice(None)] * self.dim
            m = np.zeros(self.vid.shape[ax], dtype=bool)
            m[margin:self.vid.shape[ax] - margin] = True
            shape = [1] * self.dim
            shape[ax] = -1
            mask = mask & m.reshape(shape)
        return mask

    def grid_of(self, vertex_values: np.ndarray) -> np.ndarray:
        """Gather a global vertex field onto this region's grid (dead -> nan)."""
        safe = np.maximum(self.vid, 0)
        out = np.asarray(vertex_values)[safe].astype(float)
        if np.any(self.vid < 0):
            out = np.where(self.vid < 0, np.nan, out)
        return out

    def _axis_derivative(self, grid: np.ndarray, ax: int,
                         period=None) -> np.ndarray:
        """Second-order derivative along one grid axis (unit parameter step).

        Mask-aware: one-sided stencils next to dead vertices and at
        non-periodic edges; true wrap-around on periodic axes.  `period` is
        the position shift across the wrap (for lattice-quotient charts).
        """
        g = np.moveaxis(np.asarray(grid, dtype=float), ax, 0)
        n = g.shape[0]
        if self.periodic[ax]:
            core = g[:-1]
            der = (np.roll(core, -1, axis=0) - np.roll(core, 1, axis=0)) / 2.0
            if period is not None:
                der[0] = der[0] + np.asarray(period) / 2.0
                der[-1] = der[-1] + np.asarray(period) / 2.0
            bad = ~np.isfinite(der)
            if np.any(bad):
                # wrap-aware one-sided fallbacks next to dead vertices
                fwd = (-1.5 * core + 2.0 * np.roll(core, -1, axis=0)
                       - 0.5 * np.roll(core, -2, axis=0))
                bwd = (1.5 * core - 2.0 * np.roll(core, 1, axis=0)
                       + 0.5 * np.roll(core, 2, axis=0))
                der = np.where(bad & np.isfinite(fwd), fwd, der)
                bad = ~np.isfinite(der)
                der = np.where(bad & np.isfinite(bwd), bwd, der)
            der = np.concatenate([der, der[:1]], axis=0)
        else:
            der = np.empty_like(g)
            der[1:-1] = (g[2:] - g[:-2]) / 2.0
            der[0] = -1.5 * g[0] + 2.0 * g[1] - 0.5 * g[2]
            der[-1] = 1.5 * g[-1] - 2.0 * g[-2] + 0.5 * g[-3]
            bad = ~np.isfinite(der)
            if np.any(bad):
                fwd = np.full_like(g, np.nan)
                bwd = np.full_like(g, np.nan)
                if n >= 3:
                    fwd[:-2] = -1.5 * g[:-2] + 2.0 * g[1:-1] - 0.5 * g[2:]
                    bwd[2:] = 1.5 * g[2:] - 2.0 * g[1:-1] + 0.5 * g[:-2]
                der = np.where(bad & np.isfinite(fwd), fwd, der)
                bad = ~np.isfinite(der)
                der = np.where(bad & np.isfinite(bwd), bwd, der)
        return np.moveaxis(der, 0, ax)

    def gradient_grids(self, grid: np.ndarray) -> np.ndarray:
        """Parameter-space gradient, shape grid + (d,)."""
        return np.stack(
            [self._axis_derivative(grid, ax) for ax in range(self.dim)], axis=-1
        )

    def _pos_derivative(self, ax: int) -> np.ndarray:
        period = None
        if self.pos_period is not None:
            period = self.pos_period[ax]
        return self._axis_derivative(self.pos, ax, period=period)

    def tangents(self) -> np.ndarray:
        """d(position)/d(param) per grid vertex, shape grid + (2m, d)."""
        if self._tan is None:
            ders = [self._pos_derivative(ax) for ax in range(self.dim)]
            self._tan = np.stack(ders, axis=-1)
        return self._tan

    def second_tangents(self) -> np.ndarray:
        """d2(position)/d(param a)d(param b), shape grid + (2m, d, d)."""
        if self._tan2 is None:
            d = self.dim
            out = np.empty(self.pos.shape + (d, d))
            for a in range(d):
                da = self._pos_derivative(a)
                for b in range(d):
                    out[..., a, b] = self._axis_derivative(da, b)
            self._tan2 = out
        return self._tan2

    def metric(self):
        """Vertex metric h, inverse and sqrt(det) on the grid."""
        tan = self.tangents()
        h = np.einsum("...ia,...ib->...ab", tan, tan)
        det = np.linalg.det(h)
        det = np.where(np.isfinite(det) & (det > 0), det, np.nan)
        hinv = np.full_like(h, np.nan)
        ok = np.isfinite(det)
        if np.any(ok):
            hinv[ok] = np.linalg.inv(h[ok])
        return h, hinv, np.sqrt(det)


class Mesh:
    """Flattened cell view over a list of regions."""

    def __init__(self, ambient, regions: list[Region], dim: int,
                 resolution: float = 0.0, vertex_sets: dict | None = None,
                 nv: int | None = None, orient: bool | None = None,
                 tables: dict | None = None):
        self.ambient = ambient
        self.dim = dim
        self.regions = regions
        self.resolution = resolution
        self.vertex_sets = vertex_sets or {}
        self.tables = tables or {}
        self.metadata: dict = {}
        if nv is None:
            nv = 1 + max(int(r.vid.max()) for r in regions)
        self.nv = nv
        if orient is None:
            orient = dim == ambient.m
        self._orient = orient
        self._finalize()

    # -- construction ---------------------------------------------------------

    def _extract_cells(self):
        d = self.dim
        corners = _corners(d)
        vid_list, pos_list, reg_list = [], [], []
        for ri, reg in enumerate(self.regions):
            shape = reg.cell_shape
            if reg.cell_mask is not None:
                active = np.argwhere(reg.cell_mask)
            else:
                active = np.argwhere(np.ones(shape, dtype=bool))
            if len(active) == 0:
                continue
            offs = corners.copy()
            if reg.flip and d >= 2:
                offs = offs[:, list(range(d))]
                offs[:, [0, 1]] = offs[:, [1, 0]]
            cv = np.empty((len(active), 2 ** d), dtype=np.int64)
            cp = np.empty((len(active), 2 ** d, reg.pos.shape[-1]))
            for b in range(2 ** d):
                idx = tuple((active[:, ax] + offs[b, ax]) for ax in range(d))
                cv[:, b] = reg.vid[idx]
                cp[:, b] = reg.pos[idx]
            if np.any(cv < 0):
                raise ChartFailure(f"region {reg.name}: active cell uses dead vertex")
            vid_list.append(cv)
            pos_list.append(cp)
            reg_list.append(np.full(len(active), ri, dtype=np.int64))
        self.cell_vids = np.concatenate(vid_list, axis=0)
        self.cell_pos = np.concatenate(pos_list, axis=0)
        self.cell_region = np.concatenate(reg_list, axis=0)
        self.ncells = self.cell_vids.shape[0]
        self.cell_label = np.array(
            [LABELS.index(self.regions[ri].label) for ri in self.cell_region],
            dtype=np.int64,
        )

    def _geometry(self):
        d = self.dim
        pts, wts = _quad_rule(d)
        N, dN = _shape_funcs(d, pts)
        self._qw = wts
        self._N = N
        self._dN = dN
        # J[c,q,i,a] = sum_b pos[c,b,i] dN[q,b,a]
        J = np.einsum("cbi,qba->cqia", self.cell_pos, dN, optimize=True)
        h = np.einsum("cqia,cqib->cqab", J, J, optimize=True)
        det = np.linalg.det(h)
        if np.any(det <= 0) or not np.all(np.isfinite(det)):
            raise ChartFailure("degenerate cell: induced metric not positive")
        self._J = J
        self._h = h
        self._hinv = np.linalg.inv(h)
        self._sq = np.sqrt(det)
        self.cell_vol = np.einsum("cq,q->c", self._sq, wts)
        self.volume = float(self.cell_vol.sum())
        # row-sum lumped mass
        Mv = np.zeros(self.nv)
        contrib = np.einsum("cq,qb,q->cb", self._sq, N, wts, optimize=True)
        np.add.at(Mv, self.cell_vids, contrib)
        self.vertex_mass = Mv
        self.active_vertices = np.flatnonzero(Mv > 0)

    def _auto_orient(self):
        """Flip region cell extraction so Re(Omega)-density is positive."""
        if not self._orient:
            return
        dens = self._omega_density_cells()
        for ri, reg in enumerate(self.regions):
            mask = self.cell_region == ri
            if not np.any(mask):
                continue
            s = np.real(dens[mask])
            if np.median(s) < 0:
                reg.flip = not reg.flip
        dens = None

    def _compact(self):
        """Drop vertices not referenced by any active cell and renumber."""
        used = np.unique(self.cell_vids)
        if len(used) == self.nv and used[0] == 0 and used[-1] == self.nv - 1:
            return
        remap = np.full(self.nv, -1, dtype=np.int64)
        remap[used] = np.arange(len(used), dtype=np.int64)
        for reg in self.regions:
            alive = reg.vid >= 0
            nv = reg.vid.copy()
            nv[alive] = remap[reg.vid[alive]]
            reg.vid = nv
        self.vertex_sets = {
            k: remap[np.asarray(v)][remap[np.asarray(v)] >= 0]
            for k, v in self.vertex_sets.items()
        }
        self.tables = {k: remap[np.asarray(v)] for k, v in self.tables.items()}
        self.cell_vids = remap[self.cell_vids]
        self.nv = len(used)

    def _finalize(self):
        self._extract_cells()
        self._compact()
        self._geometry()
        if self._orient:
            self._auto_orient()
            # re-extract with flips applied
            self._extract_cells()
            self._geometry()
            dens = self._omega_density_cells()
            if np.any(np.real(dens) <= 0):
                bad = int(np.sum(np.real(dens) <= 0))
                raise ChartFailure(
                    f"{bad} cells have nonpositive Re(Omega) density; "
                    "mesh orientation is inconsistent"
                )
        self._faces = None
        self._stiff_cache = {}

    # -- complex structure helpers --------------------------------------------

    def center_jacobian(self, cell_pos: np.ndarray | None = None):
        """Jacobian and metric inverse evaluated at cell centers.

        Center evaluation avoids the first-order Gauss-point mismatch of the
        multilinear interpolant, so defect diagnostics are second order.
        """
        d = self.dim
        ctr = np.full((1, d), 0.5)
        _, dNc = _shape_funcs(d, ctr)
        if cell_pos is None:
            cell_pos = self.cell_pos
        J = np.einsum("cbi,qba->cqia", cell_pos, dNc, optimize=True)[:, 0]
        h = np.einsum("cia,cib->cab", J, J, optimize=True)
        return J, np.linalg.inv(h)

    def _complex_J(self, cell_pos: np.ndarray | None = None) -> np.ndarray:
        """Complexified Jacobian rows z_j = x_j + i y_j, shape (C,Q,m,d)."""
        m = self.ambient.m
        if cell_pos is None:
            J = self._J
        else:
            J = np.einsum("cbi,qba->cqia", cell_pos, self._dN, optimize=True)
        return J[..., :m, :] + 1j * J[..., m:, :]

    def _omega_density_cells(self, cell_pos=None) -> np.ndarray:
        """Complex density Omega(frame)/dV per cell (quad-point average)."""
        if self.dim != self.ambient.m:
            raise ValidationError("Omega density needs a middle-dimensional mesh")
        Jc = self._complex_J(cell_pos)
        detc = np.linalg.det(Jc)
        if cell_pos is None:
            sq = self._sq
        else:
            J = np.einsum("cbi,qba->cqia", cell_pos, self._dN, optimize=True)
            h = np.einsum("cqia,cqib->cqab", J, J, optimize=True)
            sq = np.sqrt(np.linalg.det(h))
        dens = self.ambient.omega_scale * detc / sq
        return np.einsum("cq,q->c", dens, self._qw) / self._qw.sum()

    # -- Im Omega as a face cochain (exact discrete conservation) -------------

    def _build_faces(self):
        if self._faces is not None:
            return
        d = self.dim
        tables = _face_tables(d)
        key_owner: dict = {}
        owner_cell, owner_face = [], []
        dup_cell = []
        scale = 1.0 + float(np.max(np.abs(self.cell_pos)))
        tol = 1e-8 * scale
        for fi, (ax, side, ids, orient, others) in enumerate(tables):
            vids = self.cell_vids[:, ids]
            keys = np.sort(vids, axis=1)
            for c in range(self.ncells):
                k = keys[c].tobytes()
                if k in key_owner:
                    oc, ofi = key_owner.pop(k)
                    # the face potential may only be shared when both sides
                    # see identical geometry: frame jumps and lattice wraps
                    # (same ids, translated positions) must integrate per side
                    same = (
                        self.regions[self.cell_region[oc]].frame
                        == self.regions[self.cell_region[c]].frame
                    )
                    if same:
                        oids = tables[ofi][2]
                        pa = self.cell_pos[oc][oids, :]
                        pb = self.cell_pos[c][ids, :]
                        same = bool(np.max(np.abs(
                            np.sort(pa, axis=0) - np.sort(pb, axis=0))) < tol)
                    dup_cell.append((oc, ofi, c, fi, same))
                else:
                    key_owner[k] = (c, fi)
        for (c, fi) in key_owner.values():
            owner_cell.append(c)
            owner_face.append(fi)
        self._faces = {
            "tables": tables,
            "boundary": (np.array(owner_cell, dtype=np.int64),
                         np.array(owner_face, dtype=np.int64)),
            "pairs": dup_cell,
        }

    def _face_gamma_integrals(self, cells, faceids, cell_pos):
        """Integrate Im(c z1 dz2^..^dz_m) over the given oriented faces."""
        d = self.dim
        m = self.ambient.m
        tables = self._faces["tables"]
        out = np.zeros(len(cells))
        pts, wts = _quad_rule(d - 1)
        Nf, dNf = _shape_funcs(d - 1, pts)
        for fi, (ax, side, ids, orient, others) in enumerate(tables):
            sel = np.flatnonzero(faceids == fi)
            if len(sel) == 0:
                continue
            cp = cell_pos[cells[sel]][:, ids, :]           # (F, 2^{d-1}, 2m)
            z = cp[..., :m] + 1j * cp[..., m:]             # (F, B', m)
            zq = np.einsum("qb,fbj->fqj", Nf, z, optimize=True)
            tq = np.einsum("qba,fbj->fqja", dNf, z, optimize=True)  # (F,Q,m,d-1)
            sub = tq[..., 1:, :]                            # rows z2..zm
            det = np.linalg.det(sub)
            val = np.imag(self.ambient.omega_scale * zq[..., 0] * det)
            out[sel] = orient * np.einsum("fq,q->f", val, wts)
        return out

    def im_omega_cell_integrals(self, cell_pos: np.ndarray | None = None) -> np.ndarray:
        """Oriented integral of Im Omega over every cell, via face potentials.

        Face contributions are computed once per interior face whenever the
        two adjacent cells share a frame, so the total over a closed
        single-frame mesh vanishes to rounding.
        """
        self._build_faces()
        if cell_pos is None:
            cell_pos = self.cell_pos
        out = np.zeros(self.ncells)
        bc, bf = self._faces["boundary"]
        if len(bc):
            vals = self._face_gamma_integrals(bc, bf, cell_pos)
            np.add.at(out, bc, vals)
        pairs = self._faces["pairs"]
        if pairs:
            oc = np.array([p[0] for p in pairs], dtype=np.int64)
            ofi = np.array([p[1] for p in pairs], dtype=np.int64)
            nc = np.array([p[2] for p in pairs], dtype=np.int64)
            nfi = np.array([p[3] for p in pairs], dtype=np.int64)
            same = np.array([p[4] for p in pairs], dtype=bool)
            vals = self._face_gamma_integrals(oc, ofi, cell_pos)
            np.add.at(out, oc, vals)
            if np.any(same):
                np.add.at(out, nc[same], -vals[same])
            if np.any(~same):
                vals2 = self._face_gamma_integrals(nc[~same], nfi[~same], cell_pos)
                np.add.at(out, nc[~same], vals2)
        return out

    # -- FEM ------------------------------------------------------------------

    def cell_volumes(self, cell_pos: np.ndarray) -> np.ndarray:
        J = np.einsum("cbi,qba->cqia", cell_pos, self._dN, optimize=True)
        h = np.einsum("cqia,cqib->cqab", J, J, optimize=True)
        return np.einsum("cq,q->c", np.sqrt(np.linalg.det(h)), self._qw)

    def stiffness(self, weight: np.ndarray | None = None) -> sp.csr_matrix:
        """Weak-form operator of u -> d*(w du) with vertex weight w."""
        key = None if weight is None else weight.tobytes()
        if key in self._stiff_cache:
            return self._stiff_cache[key]
        if weight is None:
            wq = np.ones((self.ncells, len(self._qw)))
        else:
            wq = np.einsum("qb,cb->cq", self._N, weight[self.cell_vids], optimize=True)
        # local stiffness: sum_q w_q (dN_a . hinv . dN_b) sqrt(det) wq
        local = np.einsum(
            "qad,cqde,qbe,cq,cq,q->cab",
            self._dN, self._hinv, self._dN, wq, self._sq, self._qw,
            optimize=True,
        )
        B = self.cell_vids.shape[1]
        rows = np.repeat(self.cell_vids, B, axis=1).ravel()
        cols = np.tile(self.cell_vids, (1, B)).ravel()
        A = sp.coo_matrix(
            (local.ravel(), (rows, cols)), shape=(self.nv, self.nv)
        ).tocsr()
        if len(self._stiff_cache) < 4:
            self._stiff_cache[key] = A
        return A

    def mass_matrix(self) -> sp.dia_matrix:
        return sp.diags(self.vertex_mass)

    def integrate(self, vertex_values: np.ndarray) -> float:
        return float(np.dot(self.vertex_mass, vertex_values))

    def vertex_field_from_cells(self, cell_values: np.ndarray) -> np.ndarray:
        """Volume-weighted scatter of a cell field to vertices."""
        num = np.zeros(self.nv)
        B = self.cell_vids.shape[1]
        np.add.at(num, self.cell_vids,
                  (cell_values * self.cell_vol / B)[:, None] * np.ones(B))
        out = np.zeros(self.nv)
        act = self.active_vertices
        out[act] = num[act] / self.vertex_mass[act]
        return out

    def cell_gradient(self, vertex_values: np.ndarray):
        """FEM gradient at quad points: components (C,Q,d) and |grad|^2 (C,Q)."""
        fv = vertex_values[self.cell_vids]
        g = np.einsum("qba,cb->cqa", self._dN, fv, optimize=True)
        g2 = np.einsum("cqa,cqab,cqb->cq", g, self._hinv, g, optimize=True)
        return g, np.maximum(g2, 0.0)

    # -- Lp norms ---------------------------------------------------------------

    def lp_norm(self, vertex_values: np.ndarray, p: float) -> float:
        if np.isinf(p):
            return float(np.max(np.abs(vertex_values[self.active_vertices])))
        fq = np.einsum("qb,cb->cq", self._N, vertex_values[self.cell_vids],
                       optimize=True)
        integ = np.einsum("cq,cq,q->", np.abs(fq) ** p, self._sq, self._qw)
        return float(integ ** (1.0 / p))

    def lp_norm_gradient(self, vertex_values: np.ndarray, p: float) -> float:
        _, g2 = self.cell_gradient(vertex_values)
        mag = np.sqrt(g2)
        if np.isinf(p):
            return float(mag.max())
        integ = np.einsum("cq,cq,q->", mag ** p, self._sq, self._qw)
        return float(integ ** (1.0 / p))

    # -- vertex differential geometry -----------------------------------------

    def vertex_gradient_ambient(self, vertex_values: np.ndarray) -> np.ndarray:
        """Ambient lift of grad_h f per vertex (region-averaged on seams)."""
        acc = np.zeros((self.nv, self.cell_pos.shape[-1]))
        cnt = np.zeros(self.nv)
        for reg in self.regions:
            grid = reg.grid_of(vertex_values)
            df = reg.gradient_grids(grid)
            tan = reg.tangents()
            h, hinv, _ = reg.metric()
            up = np.einsum("...ab,...b->...a", hinv, df)
            vec = np.einsum("...ia,...a->...i", tan, up)
            alive = reg.vid >= 0
            ok = alive & np.all(np.isfinite(vec), axis=-1)
            ids = reg.vid[ok]
            np.add.at(acc, ids, vec[ok])
            cnt_ids = np.zeros(self.nv)
            np.add.at(cnt_ids, ids, 1.0)
            cnt += cnt_ids
        cnt = np.maximum(cnt, 1.0)
        return acc / cnt[:, None]

    def vertex_covariant_hessian_norm(self, vertex_values: np.ndarray) -> np.ndarray:
        """|Hess f|_h per vertex (chartwise FD with Christoffel correction)."""
        acc = np.zeros(self.nv)
        cnt = np.zeros(self.nv)
        for reg in self.regions:
            hess, hinv, _ = self.region_covariant_hessian(reg, vertex_values)
            nrm2 = np.einsum("...ab,...ae,...bf,...ef->...",
                             hess, hinv, hinv, hess)
            ok = (reg.vid >= 0) & np.isfinite(nrm2)
            ids = reg.vid[ok]
            np.add.at(acc, ids, np.sqrt(np.maximum(nrm2[ok], 0.0)))
            c = np.zeros(self.nv)
            np.add.at(c, ids, 1.0)
            cnt += c
        cnt = np.maximum(cnt, 1.0)
        return acc / cnt

    def region_covariant_hessian(self, reg: Region, values: np.ndarray):
        """Covariant Hessian components on one region grid, plus h inverse."""
        grid = reg.grid_of(values)
        df = reg.gradient_grids(grid)
        d = reg.dim
        ddf = np.stack(
            [reg._axis_derivative(df[..., a], b)
             for a in range(d) for b in range(d)], axis=-1
        ).reshape(df.shape[:-1] + (d, d))
        ddf = 0.5 * (ddf + np.swapaxes(ddf, -1, -2))
        tan = reg.tangents()
        tan2 = reg.second_tangents()
        h, hinv, _ = reg.metric()
        gam1 = np.einsum("...ic,...iab->...cab", tan, tan2)
        gam = np.einsum("...dc,...cab->...dab", hinv, gam1)
        hess = ddf - np.einsum("...dab,...d->...ab", gam, df)
        return hess, hinv, df

    def vertex_laplacian_fd(self, values: np.ndarray,
                            margin: int = 0) -> np.ndarray:
        """Chartwise covariant-FD Laplacian d*d u (positive spectrum sign).

        Pointwise second-order consistent on smooth structured charts; set
        `margin` > 0 to keep only chart-interior vertices (others = nan).
        """
        acc = np.zeros(self.nv)
        cnt = np.zeros(self.nv)
        for reg in self.regions:
            hess, hinv, _ = self.region_covariant_hessian(reg, values)
            lap = -np.einsum("...ab,...ab->...", hinv, hess)
            ok = (reg.vid >= 0) & np.isfinite(lap)
            if margin > 0:
                ok &= reg.interior_mask(margin)
            ids = reg.vid[ok]
            np.add.at(acc, ids, lap[ok])
            c = np.zeros(self.nv)
            np.add.at(c, ids, 1.0)
            cnt += c
        out = np.full(self.nv, np.nan)
        sel = cnt > 0
        out[sel] = acc[sel] / cnt[sel]
        return out

    def vertex_phase_density(self) -> np.ndarray:
        """Complex Omega(frame)/dV per vertex from chartwise tangents."""
        m = self.ambient.m
        acc = np.zeros(self.nv, dtype=complex)
        cnt = np.zeros(self.nv)
        for reg in self.regions:
            tan = reg.tangents()
            if reg.flip:
                tan = tan.copy()
                tan[..., [0, 1]] = tan[..., [1, 0]]
            zt = tan[..., :m, :] + 1j * tan[..., m:, :]
            det = np.linalg.det(zt)
            h = np.einsum("...ia,...ib->...ab", tan, tan)
            sq = np.sqrt(np.abs(np.linalg.det(h)))
            dens = self.ambient.omega_scale * det / sq
            ok = (reg.vid >= 0) & np.isfinite(dens) & (sq > 0)
            ids = reg.vid[ok]
            np.add.at(acc, ids, dens[ok])
            c = np.zeros(self.nv)
            np.add.at(c, ids, 1.0)
            cnt += c
        cnt = np.maximum(cnt, 1.0)
        return acc / cnt

    # -- rebuilding -------------------------------------------------------------

    def with_positions(self, new_pos: dict) -> "Mesh":
        """New mesh with replaced per-region position grids (same structure)."""
        regs = []
        for reg in self.regions:
            p = new_pos.get(reg.name, reg.pos)
            regs.append(Region(
                name=reg.name, label=reg.label, vid=reg.vid, pos=p,
                periodic=reg.periodic, frame=reg.frame,
                cell_mask=reg.cell_mask, tag=reg.tag, component=reg.component,
                flip=reg.flip, pos_period=reg.pos_period,
            ))
        out = Mesh(self.ambient, regs, self.dim, resolution=self.resolution,
                   vertex_sets=self.vertex_sets, nv=self.nv, orient=self._orient,
                   tables=self.tables)
        out.metadata = dict(self.metadata)
        return out

    def label_mask_cells(self, label: str, tag: int | None = None) -> np.ndarray:
        mask = self.cell_label == LABELS.index(label)
        if tag is not None:
            tags = np.array([self.regions[ri].tag for ri in self.cell_region])
            mask &= tags == tag
        return mask


class MeshBuilder:
    """Incremental construction of an atlas mesh with shared vertex ids."""

    def __init__(self, ambient, dim: int):
        self.ambient = ambient
        self.dim = dim
        self.nv = 0
        self.regions: list[Region] = []
        self.vertex_sets: dict[str, np.ndarray] = {}
        self.tables: dict[str, np.ndarray] = {}
        self.resolution = 0.0

    def alloc(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        ids = np.arange(self.nv, self.nv + n, dtype=np.int64).reshape(shape)
        self.nv += n
        return ids

    def add_region(self, name, label, vid, pos, periodic, frame,
                   cell_mask=None, tag=-1, component=-1, pos_period=None):
        vid = np.asarray(vid, dtype=np.int64)
        pos = np.asarray(pos, dtype=float)
        if pos.shape[:-1] != vid.shape:
            raise ValidationError(f"region {name}: vid/pos shape mismatch")
        self.regions.append(Region(
            name=name, label=label, vid=vid, pos=pos,
            periodic=tuple(periodic), frame=frame, cell_mask=cell_mask,
            tag=tag, component=component, pos_period=pos_period,
        ))

    def set_resolution(self, res: float):
        self.resolution = max(self.resolution, float(res))

    def finalize(self, orient: bool | None = None) -> Mesh:
        return Mesh(self.ambient, self.regions, self.dim,
                    resolution=self.resolution, vertex_sets=self.vertex_sets,
                    nv=self.nv, orient=orient, tables=self.tables)
