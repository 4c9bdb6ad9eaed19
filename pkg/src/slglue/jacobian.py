"""Exact linearization of the discrete graph residual at zero.

The deformation loop solves  (linearized operator) f_n = weak residual.
Using the weighted FEM stiffness for the operator leaves an O(1) mismatch
against the face-integral residual on the stiffest chart-seam modes, which
stalls (or mildly destabilizes) the iteration on glued meshes.  This
module assembles the true derivative of the discrete residual vector

    b(f)_v = (1/B) sum_{cells c containing v} sum_{faces of c} +- I_gamma

with respect to f, composing three sparse maps: the chartwise gradient
move (finite-difference stencils, frame-averaged), the i-rotation into
the normal direction, and the analytic derivative of the face potential
integrals with respect to corner positions.  The result is the discrete
realization of the operator alpha -> -d*(psi^m cos(theta) alpha) that is
exactly compatible with the nonlinearity it preconditions.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .mesh import Mesh, _corners, _face_tables, _quad_rule, _shape_funcs


def _stencil_rows(reg, alive):
    """FD stencil (coeff, offset) choices per vertex per axis.

    Mirrors Region._axis_derivative: central where both neighbours are
    alive, else second-order one-sided, with wrap-around on periodic axes.
    Returns, per axis, a list of (index_array, neighbour_index_array,
    coeff_array) triplets in flat grid indexing.
    """
    shape = reg.vid.shape
    d = reg.dim
    n_tot = int(np.prod(shape))
    flat_alive = alive.ravel()
    out = []
    idx = np.arange(n_tot).reshape(shape)

    def shifted(ax, k):
        n = shape[ax]
        ind = np.arange(n) + k
        if reg.periodic[ax]:
            # wrap within the core (last row duplicates the first)
            ind = np.where(ind > n - 1, ind - (n - 1), ind)
            ind = np.where(ind < 0, ind + (n - 1), ind)
        else:
            ind = np.clip(ind, 0, n - 1)
        return np.take(idx, ind, axis=ax)

    for ax in range(d):
        plus = shifted(ax, +1).ravel()
        minus = shifted(ax, -1).ravel()
        plus2 = shifted(ax, +2).ravel()
        minus2 = shifted(ax, -2).ravel()
        n = shape[ax]
        pos = np.indices(shape)[ax].ravel()
        at_lo = (pos == 0) & (not reg.periodic[ax])
        at_hi = (pos == n - 1) & (not reg.periodic[ax])
        ok_c = flat_alive[plus] & flat_alive[minus] & ~at_lo & ~at_hi
        ok_f = ~ok_c & flat_alive[plus] & flat_alive[plus2] & ~at_hi
        ok_b = ~ok_c & ~ok_f & flat_alive[minus] & flat_alive[minus2] & ~at_lo
        rows = []
        base = np.arange(n_tot)
        sel = np.flatnonzero(ok_c & flat_alive)
        rows.append((sel, plus[sel], np.full(len(sel), 0.5)))
        rows.append((sel, minus[sel], np.full(len(sel), -0.5)))
        sel = np.flatnonzero(ok_f & flat_alive)
        rows.append((sel, base[sel], np.full(len(sel), -1.5)))
        rows.append((sel, plus[sel], np.full(len(sel), 2.0)))
        rows.append((sel, plus2[sel], np.full(len(sel), -0.5)))
        sel = np.flatnonzero(ok_b & flat_alive)
        rows.append((sel, base[sel], np.full(len(sel), 1.5)))
        rows.append((sel, minus[sel], np.full(len(sel), -2.0)))
        rows.append((sel, minus2[sel], np.full(len(sel), 0.5)))
        out.append(rows)
    return out


def _move_matrix(mesh: Mesh):
    """Sparse map f -> frame-averaged ambient move dofs.

    Move dofs are indexed (frame_offset + vertex * 2m + component); the
    move is the tangential lift of grad_h f (the i-rotation is applied in
    the face-derivative stage).
    """
    A = mesh.cell_pos.shape[-1]
    frames = []
    for reg in mesh.regions:
        if reg.frame not in frames:
            frames.append(reg.frame)
    offset = {fr: i * mesh.nv * A for i, fr in enumerate(frames)}
    counts = {fr: np.zeros(mesh.nv) for fr in frames}
    for reg in mesh.regions:
        ok = reg.vid >= 0
        np.add.at(counts[reg.frame], reg.vid[ok], 1.0)
    rows_all, cols_all, vals_all = [], [], []
    for reg in mesh.regions:
        alive = reg.vid >= 0
        tan = reg.tangents()
        _, hinv, _ = reg.metric()
        T = np.einsum("...ia,...ab->...ib", tan, hinv)   # grid + (A, d)
        T = np.where(np.isfinite(T), T, 0.0)
        sten = _stencil_rows(reg, alive)
        vid_flat = reg.vid.ravel()
        cnt = counts[reg.frame]
        off = offset[reg.frame]
        Tf = T.reshape(-1, A, reg.dim)
        for ax in range(reg.dim):
            for sel, nbr, coeff in sten[ax]:
                if len(sel) == 0:
                    continue
                v = vid_flat[sel]
                wv = vid_flat[nbr]
                good = wv >= 0
                v, wv = v[good], wv[good]
                s2, c2 = sel[good], coeff[good]
                weight = c2 / cnt[v]
                for comp in range(A):
                    rows_all.append(off + v * A + comp)
                    cols_all.append(wv)
                    vals_all.append(Tf[s2, comp, ax] * weight)
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    G = sp.coo_matrix((vals, (rows, cols)),
                      shape=(len(frames) * mesh.nv * A, mesh.nv)).tocsr()
    return G, offset


def _face_derivative_matrix(mesh: Mesh, offset: dict):
    """Sparse map (move dofs) -> cell residual integrals, at f = 0.

    For every cell and outward face, the derivative of the face potential
    integral with respect to the moved corner positions is pushed through
    the i-rotation onto the raw move dofs of the owning region's frame.
    """
    if mesh.ambient.m != 3:
        raise ValidationError("consistent operator implemented for m = 3")
    d = mesh.dim
    A = mesh.cell_pos.shape[-1]
    m = 3
    tables = _face_tables(d)
    pts, wts = _quad_rule(d - 1)
    Nf, dNf = _shape_funcs(d - 1, pts)
    scale = mesh.ambient.omega_scale
    C = mesh.ncells
    frame_of_cell = np.array(
        [offset[mesh.regions[ri].frame] for ri in mesh.cell_region],
        dtype=np.int64)
    rows_all, cols_all, vals_all = [], [], []
    for fi, (ax, side, ids, orient, others) in enumerate(tables):
        cp = mesh.cell_pos[:, ids, :]                # (C, 4, 6)
        z = cp[..., :m] + 1j * cp[..., m:]           # (C, 4, 3)
        zq = np.einsum("qb,cbj->cqj", Nf, z)         # (C, Q, 3)
        tq = np.einsum("qba,cbj->cqja", dNf, z)      # (C, Q, 3, 2)
        tu = tq[..., 0]
        tv = tq[..., 1]
        D = tu[..., 1] * tv[..., 2] - tu[..., 2] * tv[..., 1]
        # dH/dz_{k,j} at each quad point
        dH = np.empty((C, len(wts), 4, 3), dtype=complex)
        dH[..., 0] = np.einsum("qb,cq->cqb", Nf, D)
        dD2 = (np.einsum("qb,cq->cqb", dNf[..., 0], tv[..., 2])
               - np.einsum("qb,cq->cqb", dNf[..., 1], tu[..., 2]))
        dD3 = (np.einsum("qb,cq->cqb", dNf[..., 1], tu[..., 1])
               - np.einsum("qb,cq->cqb", dNf[..., 0], tv[..., 1]))
        dH[..., 1] = dD2 * zq[..., 0][..., None]
        dH[..., 2] = dD3 * zq[..., 0][..., None]
        dH *= scale
        Ak = np.einsum("cqbj,q->cbj", dH, wts) * orient
        # gradient w.r.t. positions: d(Im H)/dx = Im(A), d/dy = Re(A);
        # positions respond to the raw move v by x -= v_y, y += v_x
        grad_move = np.empty((C, 4, 6))
        grad_move[..., :3] = np.real(Ak)          # d/d v_x = +d/dy
        grad_move[..., 3:] = -np.imag(Ak)         # d/d v_y = -d/dx
        corner_ids = mesh.cell_vids[:, ids]       # (C, 4)
        cells = np.repeat(np.arange(C), 4 * 6)
        dof = (frame_of_cell[:, None, None]
               + corner_ids[:, :, None] * A
               + np.arange(6)[None, None, :])
        rows_all.append(cells)
        cols_all.append(dof.ravel())
        vals_all.append(grad_move.ravel())
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    n_dofs = max(offset.values()) + mesh.nv * A
    return sp.coo_matrix((vals, (rows, cols)), shape=(C, n_dofs)).tocsr()


def consistent_operator(mesh: Mesh) -> sp.csr_matrix:
    """Assembled -d(residual)/df at f = 0.

    Exact to rounding against the discrete residual (validated by finite
    differences); not symmetric on curved charts, so callers should use a
    GMRES-type solver.
    """
    G, offset = _move_matrix(mesh)
    Dm = _face_derivative_matrix(mesh, offset)
    B = mesh.cell_vids.shape[1]
    rows = mesh.cell_vids.ravel()
    cols = np.repeat(np.arange(mesh.ncells), B)
    S = sp.coo_matrix((np.full(mesh.ncells * B, 1.0 / B), (rows, cols)),
                      shape=(mesh.nv, mesh.ncells)).tocsr()
    A = -(S @ (Dm @ G))
    A.eliminate_zeros()
    return A.tocsr()
