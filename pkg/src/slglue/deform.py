"""Picard deformation to the special Lagrangian graph.

The iterate solves the weak system  d*(psi^m cos(theta) d f_n) =
psi^m sin(theta) + Q(d f_{n-1})  with the fixed base-mesh weight.  The
nonlinear density F(df) is the face-potential integral of Im Omega over
the moved mesh divided by base cell volumes, so its mesh integral
vanishes identically on closed single-frame meshes; the quadratic
remainder is defined through the same discrete operators, which makes the
conservation identity of the loop hold to rounding rather than to
discretization order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ambient import ScalarField, hamiltonian_graph, phase_and_error, rot90
from .errors import (LedgerViolation, NotMeanZero, SolveFail, StepTooLarge,
                     ValidationError)
from .mesh import Mesh


# -- discrete fields -------------------------------------------------------------


def imomega_density_cells(mesh: Mesh, cell_pos=None) -> np.ndarray:
    """Im Omega cell densities relative to the BASE volumes."""
    return mesh.im_omega_cell_integrals(cell_pos) / mesh.cell_vol


def scatter_density(mesh: Mesh, cell_integrals: np.ndarray) -> np.ndarray:
    """Lumped vertex density whose weak pairing preserves the cell total."""
    B = mesh.cell_vids.shape[1]
    b = np.zeros(mesh.nv)
    np.add.at(b, mesh.cell_vids,
              (cell_integrals / B)[:, None] * np.ones(B))
    out = np.zeros(mesh.nv)
    act = mesh.active_vertices
    out[act] = b[act] / mesh.vertex_mass[act]
    return out


def eps_field(mesh: Mesh) -> np.ndarray:
    """Vertex density of Im Omega on the mesh itself (psi^m sin theta)."""
    return scatter_density(mesh, mesh.im_omega_cell_integrals())


def moved_cell_positions(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Cell corner positions of the graph of df (no mesh rebuild)."""
    from .ambient import _move_positions
    d = mesh.dim

    def vec_of(reg):
        grid = reg.grid_of(values)
        df = reg.gradient_grids(grid)
        _, hinv, _ = reg.metric()
        up = np.einsum("...ab,...b->...a", hinv, df)
        tan = reg.tangents()
        vec = np.einsum("...ia,...a->...i", tan, up)
        return np.where(np.isfinite(vec), vec, 0.0)

    new_pos = _move_positions(mesh, vec_of)
    # re-gather cells
    from .mesh import _corners
    corners = _corners(d)
    out = np.empty_like(mesh.cell_pos)
    for ri, reg in enumerate(mesh.regions):
        mask = mesh.cell_region == ri
        if not np.any(mask):
            continue
        if reg.cell_mask is not None:
            active = np.argwhere(reg.cell_mask)
        else:
            active = np.argwhere(np.ones(reg.cell_shape, dtype=bool))
        offs = corners.copy()
        if reg.flip and d >= 2:
            offs[:, [0, 1]] = offs[:, [1, 0]]
        p = new_pos[reg.name]
        cp = np.empty((len(active), 2 ** d, p.shape[-1]))
        for bb in range(2 ** d):
            idx = tuple((active[:, ax] + offs[bb, ax]) for ax in range(d))
            cp[:, bb] = p[idx]
        out[mask] = cp
    return out


def nonlinear_residual(mesh: Mesh, f, weight=None,
                       neighbourhood_bound: float | None = None) -> ScalarField:
    """F(df): the Im Omega density of the graph of df over the base mesh."""
    values = f.values if isinstance(f, ScalarField) else np.asarray(f, float)
    if neighbourhood_bound is not None:
        from .ambient import sup_df
        if sup_df(mesh, values) >= neighbourhood_bound:
            raise StepTooLarge("graph leaves the tubular neighbourhood")
    cp = moved_cell_positions(mesh, values)
    F_cells = mesh.im_omega_cell_integrals(cp) / mesh.cell_vol
    return ScalarField(mesh, scatter_density(mesh, F_cells * mesh.cell_vol))


def weight_field(mesh: Mesh) -> np.ndarray:
    """psi^m cos(theta) per vertex (the linearized operator's weight)."""
    theta, _ = phase_and_error(mesh, density_tol=0.25)
    psim = mesh.ambient.psi ** mesh.ambient.m
    return psim * np.cos(theta.values)


def quadratic_remainder(mesh: Mesh, f, weight: np.ndarray | None = None,
                        eps: np.ndarray | None = None) -> ScalarField:
    """Q(df) = F(df) - eps + d*(w df), with the discrete weak codifferential."""
    values = f.values if isinstance(f, ScalarField) else np.asarray(f, float)
    if weight is None:
        weight = weight_field(mesh)
    if eps is None:
        eps = eps_field(mesh)
    F = nonlinear_residual(mesh, values).values
    A = mesh.stiffness(weight)
    lap = np.zeros(mesh.nv)
    act = mesh.active_vertices
    lap[act] = (A @ values)[act] / mesh.vertex_mass[act]
    return ScalarField(mesh, F - eps + lap)


# -- linear solver ----------------------------------------------------------------


def _deflated_solve(A, b, x0=None, tol=1e-12, nonsymmetric=False,
                    mass=None, precond=None):
    """Krylov solve of the singular weak system, deflating constants."""
    b = b - b.sum() / len(b)
    diag = np.abs(A.diagonal())
    diag[diag < 1e-300] = 1.0
    if nonsymmetric:
        # shift the (near-)kernel of constants to make the system regular
        n = A.shape[0]
        m = mass if mass is not None else np.ones(n)
        mhat = m / np.linalg.norm(m)
        c0 = float(np.mean(diag))

        def mv(x):
            return A @ x + c0 * np.dot(mhat, x) * mhat

        op = spla.LinearOperator((n, n), matvec=mv)
        pre = precond if precond is not None else sp.diags(1.0 / diag)
        x, info = spla.lgmres(op, b, x0=x0, rtol=tol, atol=0.0,
                              maxiter=400, M=pre)
        if info != 0:
            raise SolveFail(f"lgmres stagnated (info={info})")
        return x
    pre = sp.diags(1.0 / diag)
    x, info = spla.cg(A, b, x0=x0, rtol=tol, atol=0.0, maxiter=20000, M=pre)
    if info != 0:
        raise SolveFail(f"Krylov solve stagnated (info={info})")
    return x


class PicardOperator:
    """Weak operator with its solver data (matrix, symmetry, preconditioner)."""

    def __init__(self, A, nonsymmetric: bool, precond=None):
        self.A = A
        self.nonsymmetric = nonsymmetric
        self.precond = precond

    def __iter__(self):  # unpacks like the old (A, flag) tuples
        return iter((self.A, self.nonsymmetric))


def build_operator(mesh: Mesh, kind: str = "consistent",
                   weight: np.ndarray | None = None) -> PicardOperator:
    """Weak operator of u -> d*(psi^m cos(theta) du).

    kind='consistent' assembles the exact linearization of the discrete
    graph residual (the faithful discrete dF(0)), preconditioned by a
    factorization of the SPD phase-weighted stiffness; kind='weighted_fem'
    uses the Q1 stiffness alone.
    """
    if weight is None:
        weight = weight_field(mesh)
    if kind == "consistent" and mesh.ambient.m == 3:
        from .jacobian import consistent_operator
        A = consistent_operator(mesh)
        Aw = mesh.stiffness(weight)
        c0 = float(np.mean(np.abs(Aw.diagonal())))
        m = mesh.vertex_mass
        K = (Aw + 1e-4 * c0 * sp.diags(m / np.mean(m))).tocsc()
        lu = spla.spilu(K, drop_tol=1e-5, fill_factor=12)
        pre = spla.LinearOperator(A.shape, matvec=lu.solve)
        return PicardOperator(A, True, pre)
    return PicardOperator(mesh.stiffness(weight), False)


def linear_step(mesh: Mesh, v, weight: np.ndarray | None = None,
                linear_tol: float = 1e-12, x0: np.ndarray | None = None,
                mean_tol: float = 1e-8, operator=None) -> ScalarField:
    """Solve d*(w du) = v for the unique mean-zero u (deflated Krylov)."""
    vv = v.values if isinstance(v, ScalarField) else np.asarray(v, float)
    total = mesh.integrate(vv)
    scale = mesh.lp_norm(vv, 2.0) + 1e-300
    if abs(total) > mean_tol * scale * np.sqrt(mesh.volume):
        raise NotMeanZero(f"integral {total:.3e} vs scale {scale:.3e}")
    if operator is None:
        if weight is None:
            weight = weight_field(mesh)
        operator = PicardOperator(mesh.stiffness(weight), False)
    b = mesh.vertex_mass * vv
    x = _deflated_solve(operator.A, b, x0=x0, tol=linear_tol,
                        nonsymmetric=operator.nonsymmetric,
                        mass=mesh.vertex_mass, precond=operator.precond)
    u = x - mesh.integrate(x) / mesh.volume
    return ScalarField(mesh, u)


# -- the iteration ----------------------------------------------------------------


@dataclass
class SolverConfig:
    max_iter: int = 30
    residual_target: float | None = None
    linear_tol: float = 1e-12
    neighbourhood_bound: float | None = None
    W: object = None
    gate_sup_df: float | None = None       # ledger gate (B)
    gate_sup_hess: float | None = None     # ledger gate (D)
    projection_tol: float | None = None    # bound on |pi_W eps| when W given
    anderson_depth: int = 0                # 0 = plain fixed-point iteration
    operator: str = "consistent"           # or "weighted_fem"


LEDGER_COLUMNS = ("n", "df_l2", "df_c0", "hess_l2", "hess_c0", "third_l2m",
                  "step_df_l2", "step_df_c0", "step_hess_l2", "step_hess_c0",
                  "step_third_l2m", "residual_sup", "conservation")


@dataclass
class DeformationState:
    n: int
    f: np.ndarray
    residual: np.ndarray
    rows: list = field(default_factory=list)


def _third_norm_field(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """|grad Hess f| per vertex, chartwise FD (leading covariant terms)."""
    acc = np.zeros(mesh.nv)
    cnt = np.zeros(mesh.nv)
    for reg in mesh.regions:
        hess, hinv, _ = mesh.region_covariant_hessian(reg, values)
        d = reg.dim
        comps = []
        for a in range(d):
            comps.append(reg._axis_derivative(hess, a))
        third = np.stack(comps, axis=-1)
        n2 = np.einsum("...abc,...ax,...by,...cz,...xyz->...",
                       third, hinv, hinv, hinv, third, optimize=True)
        ok = (reg.vid >= 0) & np.isfinite(n2)
        ids = reg.vid[ok]
        np.add.at(acc, ids, np.sqrt(np.maximum(n2[ok], 0.0)))
        c = np.zeros(mesh.nv)
        np.add.at(c, ids, 1.0)
        cnt += c
    cnt = np.maximum(cnt, 1.0)
    return acc / cnt


def ledger_norms(mesh: Mesh, values: np.ndarray) -> dict:
    hessf = mesh.vertex_covariant_hessian_norm(values)
    third = _third_norm_field(mesh, values)
    m = mesh.ambient.m
    return {
        "df_l2": mesh.lp_norm_gradient(values, 2.0),
        "df_c0": mesh.lp_norm_gradient(values, np.inf),
        "hess_l2": mesh.lp_norm(hessf, 2.0),
        "hess_c0": float(np.max(hessf[mesh.active_vertices])),
        "third_l2m": mesh.lp_norm(third, 2.0 * m),
    }


def picard_step(mesh: Mesh, f_prev: np.ndarray, eps: np.ndarray,
                weight: np.ndarray, cfg: SolverConfig,
                x0: np.ndarray | None = None, operator=None) -> np.ndarray:
    """One iterate: solve d*(w df) = eps + Q(df_prev).

    With the residual-consistent operator this is algebraically the
    residual-correction form f_prev + solve(weak F(df_prev)).
    """
    if operator is None:
        operator = build_operator(mesh, cfg.operator, weight)
    A = operator.A
    F = nonlinear_residual(mesh, f_prev).values
    b = mesh.vertex_mass * F + A @ f_prev
    x = _deflated_solve(A, b, x0=x0 if x0 is not None else f_prev,
                        tol=cfg.linear_tol,
                        nonsymmetric=operator.nonsymmetric,
                        mass=mesh.vertex_mass, precond=operator.precond)
    return x - mesh.integrate(x) / mesh.volume


def run_deformation(mesh: Mesh, cfg: SolverConfig | None = None):
    """Iterate the linearize-and-resolve loop until the residual floor.

    Returns (f, deformed mesh, ledger rows, status).  The pre-iteration
    gates: cos(theta) >= 1/2 via the phase computation, mean-zero error
    field, and (when a subspace is supplied) a small projected component.
    """
    cfg = cfg or SolverConfig()
    theta, _ = phase_and_error(mesh, density_tol=0.25)
    psim = mesh.ambient.psi ** mesh.ambient.m
    weight = psim * np.cos(theta.values)
    if np.min(weight[mesh.active_vertices]) < 0.5 * psim:
        raise LedgerViolation("cos(theta) < 1/2: outside the working regime")
    eps = eps_field(mesh)
    total = abs(np.dot(mesh.vertex_mass, eps))
    if total > 1e-6 * (mesh.lp_norm(eps, 2.0) + 1e-30) * np.sqrt(mesh.volume) + 1e-9:
        raise NotMeanZero(f"error field integral {total:.3e}")
    if cfg.W is not None and cfg.projection_tol is not None:
        pi = cfg.W.project(eps)
        pn = np.dot(mesh.vertex_mass, np.abs(pi))
        if pn > cfg.projection_tol:
            raise LedgerViolation(
                f"projected error component {pn:.3e} exceeds budget "
                f"{cfg.projection_tol:.3e}")
    target = cfg.residual_target
    if target is None:
        target = max(10.0 * mesh.resolution ** 2, 1e-10)
    f = np.zeros(mesh.nv)
    res_cells = mesh.im_omega_cell_integrals() / mesh.cell_vol
    resid = float(np.max(np.abs(res_cells)))
    rows = []
    status = "MAX_ITER"
    prev_norms = None
    best = resid
    hist_f, hist_r = [], []
    operator = build_operator(mesh, cfg.operator, weight)
    for n in range(1, cfg.max_iter + 1):
        g_val = picard_step(mesh, f, eps, weight, cfg,
                            x0=f if n > 1 else None, operator=operator)
        r = g_val - f
        if cfg.anderson_depth > 0 and hist_r:
            # Anderson mixing on the same fixed-point map: least-squares
            # combination of recent residuals (GMRES-like acceleration)
            dR = np.stack([r - rr for rr in hist_r], axis=1)
            dF = np.stack([f - ff for ff in hist_f], axis=1)
            theta, *_ = np.linalg.lstsq(dR, r, rcond=1e-10)
            f_new = g_val - (dF + dR) @ theta
        else:
            f_new = g_val
        hist_f.append(f.copy())
        hist_r.append(r.copy())
        if len(hist_f) > cfg.anderson_depth:
            hist_f.pop(0)
            hist_r.pop(0)
        step = f_new - f
        f = f_new
        if cfg.neighbourhood_bound is not None:
            from .ambient import sup_df
            if sup_df(mesh, f) >= cfg.neighbourhood_bound:
                raise StepTooLarge("iterate left the tubular neighbourhood")
        cp = moved_cell_positions(mesh, f)
        F_cells = mesh.im_omega_cell_integrals(cp)
        resid = float(np.max(np.abs(F_cells / mesh.cell_vol)))
        conservation = float(F_cells.sum())
        norms = ledger_norms(mesh, f)
        steps = ledger_norms(mesh, step)
        rows.append({
            "n": n, **norms,
            **{f"step_{k}": v for k, v in steps.items()},
            "residual_sup": resid, "conservation": conservation,
        })
        if cfg.gate_sup_df is not None and norms["df_c0"] > cfg.gate_sup_df:
            raise LedgerViolation(
                f"|df| gate violated: {norms['df_c0']:.3e} > {cfg.gate_sup_df:.3e}")
        if cfg.gate_sup_hess is not None and norms["hess_c0"] > cfg.gate_sup_hess:
            raise LedgerViolation(
                f"|hess f| gate violated: {norms['hess_c0']:.3e}")
        best = min(best, resid)
        if resid <= target:
            status = "CONVERGED"
            break
        if resid > 10.0 * best and n >= 3:
            status = "DIVERGED"
            break
        if prev_norms is not None and steps["df_l2"] < 1e-15 * max(
                norms["df_l2"], 1e-30):
            status = "STALLED_AT_MESH_FLOOR"
            break
        prev_norms = norms
    graph = hamiltonian_graph(mesh, f,
                              neighbourhood_bound=cfg.neighbourhood_bound)
    return ScalarField(mesh, f), graph, rows, status


def project_W(v, W):
    """L2-orthogonal projection onto the subspace and its complement."""
    vv = v.values if isinstance(v, ScalarField) else np.asarray(v, float)
    pi = W.project(vv)
    return pi, vv - pi


# -- quadratic estimate audit -------------------------------------------------------


def _random_smooth_field(mesh: Mesh, rng, scale: float) -> np.ndarray:
    """Random low-frequency combination of coordinate harmonics."""
    pos = np.zeros((mesh.nv, mesh.cell_pos.shape[-1]))
    cnt = np.zeros(mesh.nv)
    for reg in mesh.regions:
        ok = reg.vid >= 0
        np.add.at(pos, reg.vid[ok], reg.pos[ok])
        c = np.zeros(mesh.nv)
        np.add.at(c, reg.vid[ok], 1.0)
        cnt += c
    pos /= np.maximum(cnt, 1.0)[:, None]
    span = pos.max(axis=0) - pos.min(axis=0)
    span[span < 1e-9] = 1.0
    f = np.zeros(mesh.nv)
    for _ in range(3):
        k = rng.integers(1, 3, size=pos.shape[1])
        phase = rng.uniform(0, 2 * np.pi, size=pos.shape[1])
        amp = rng.uniform(0.3, 1.0)
        f += amp * np.cos(2 * np.pi * (pos * k / span).sum(axis=1)
                          + phase.sum())
    f -= mesh.integrate(f) / mesh.volume
    sup = mesh.lp_norm_gradient(f, np.inf)
    return f * (scale / max(sup, 1e-30))


def quadratic_audit(mesh: Mesh, sample_count: int = 4, scale: float = 0.05,
                    t_scale: float = 1.0, seed: int = 5):
    """Empirical constants of the two-term quadratic remainder estimates.

    For random exact pairs alpha = df, beta = dg at the given scale the
    pointwise ratio |Q(a)-Q(b)| / [(|a-b|/t + |D(a-b)|)(|a|/t + |b|/t +
    |Da| + |Db|)] is maximized; repeating at half scale checks stability
    (ratio of fits within [1/2, 2]).  The derivative analogue with its
    eight-term right side is fitted the same way.
    """
    rng = np.random.default_rng(seed)
    weight = weight_field(mesh)
    eps = eps_field(mesh)
    act = mesh.active_vertices

    def q_of(values):
        return quadratic_remainder(mesh, values, weight=weight, eps=eps).values

    def pieces(values):
        g = np.zeros(mesh.nv)
        _, g2 = mesh.cell_gradient(values)
        g = scatter_density(mesh, np.sqrt(np.max(g2, axis=1)) * mesh.cell_vol)
        hessn = mesh.vertex_covariant_hessian_norm(values)
        return g, hessn

    def fit_at(s):
        c3 = 0.0
        c4 = 0.0
        for _ in range(sample_count):
            fa = _random_smooth_field(mesh, rng, s)
            fb = _random_smooth_field(mesh, rng, s)
            qa, qb = q_of(fa), q_of(fb)
            da, ha = pieces(fa)
            db, hb = pieces(fb)
            dd, hd = pieces(fa - fb)
            lhs = np.abs(qa - qb)[act]
            rhs = ((dd / t_scale + hd)
                   * ((da + db) / t_scale + ha + hb))[act]
            good = rhs > 1e-12 * np.max(rhs)
            c3 = max(c3, float(np.max(lhs[good] / rhs[good])))
            # derivative analogue (eight-term right side)
            dq = mesh.vertex_gradient_ambient(qa - qb)
            dqn = np.linalg.norm(dq, axis=1)[act]
            ta, tb = (_third_norm_field(mesh, fa),
                      _third_norm_field(mesh, fb))
            td = _third_norm_field(mesh, fa - fb)
            rhs4 = (dd[act] * (da + db)[act] / t_scale ** 3
                    + dd[act] * (ha + hb)[act] / t_scale ** 2
                    + dd[act] * (ta + tb)[act] / t_scale
                    + hd[act] * (da + db)[act] / t_scale ** 2
                    + hd[act] * (ha + hb)[act] / t_scale
                    + hd[act] * (ta + tb)[act]
                    + td[act] * (da + db)[act] / t_scale
                    + td[act] * (ha + hb)[act])
            good4 = rhs4 > 1e-12 * np.max(rhs4)
            c4 = max(c4, float(np.max(dqn[good4] / rhs4[good4])))
        return c3, c4

    c3_full, c4_full = fit_at(scale)
    c3_half, c4_half = fit_at(scale / 2.0)
    return {
        "C3": c3_full, "C3_half": c3_half,
        "C3_stability": c3_full / max(c3_half, 1e-30),
        "C4": c4_full, "C4_half": c4_half,
        "C4_stability": c4_full / max(c4_half, 1e-30),
    }
