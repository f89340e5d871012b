"""Plane-strain compressible Neo-Hookean FEM on structured quadratic triangles.

The domain is the bitmap footprint (1 pixel = 1x1 length units). Each pixel is
split into s*s squares and each square into two 6-node triangles, so a 28x28
bitmap at subdivision s carries 2*s^2*784 elements on a half-spacing node grid.
Uniaxial extension clamps the bottom edge (both components) and drives the top
edge vertically with its horizontal component held at zero.

Energy density (2-D deformation gradient embedded as plane strain, so the
trace term picks up the unit out-of-plane stretch):

    psi = mu/2 * (F:F + 1 - 3 - 2 ln J) + lambda/2 * ((J^2 - 1)/2 - ln J)

with J = det F > 0 required everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dataset import CURVE_STEPS, EnergyCurve, PropertyField
from .errors import ConfigError, ElementInversionError, NonConvergenceError

# 3-point interior quadrature on the reference triangle (degree-2 exact).
_QUAD_BARY = np.array([
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
])
_QUAD_WEIGHTS = np.full(3, 1.0 / 6.0)  # weights on the unit reference triangle


def _p2_reference_gradients():
    """d/d(xi, eta) of the six P2 shape functions at each quadrature point."""
    grads = np.zeros((len(_QUAD_BARY), 6, 2))
    for q, (l1, l2, l3) in enumerate(_QUAD_BARY):
        grads[q] = [
            [-(4 * l1 - 1), -(4 * l1 - 1)],
            [4 * l2 - 1, 0.0],
            [0.0, 4 * l3 - 1],
            [4 * (l1 - l2), -4 * l2],
            [4 * l3, 4 * l2],
            [-4 * l3, 4 * (l1 - l3)],
        ]
    return grads


_REF_GRADS = _p2_reference_gradients()


@dataclass
class Mesh:
    """Structured quadratic-triangle mesh with per-element Lame parameters."""

    nodes: np.ndarray        # (n_nodes, 2) reference coordinates
    elements: np.ndarray     # (n_elem, 6) node ids: 3 vertices then 3 edge midpoints
    lame_lambda: np.ndarray  # (n_elem,)
    lame_mu: np.ndarray      # (n_elem,)
    bottom_nodes: np.ndarray
    top_nodes: np.ndarray
    width: float
    height: float
    subdivision: int

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]


@dataclass
class DeformationState:
    """Nodal displacements at one converged applied-displacement level."""

    displacements: np.ndarray  # (n_nodes, 2)
    applied: float
    converged: bool
    newton_iters: int


@dataclass
class LoadSchedule:
    """Applied top-edge displacements, 0 up to half the domain height."""

    displacements: np.ndarray

    def __post_init__(self):
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        if np.any(np.diff(self.displacements) <= 0):
            raise ConfigError("load schedule must be strictly increasing")
        if self.displacements[0] != 0.0:
            raise ConfigError("load schedule must start at 0")

    @classmethod
    def uniaxial_default(cls, steps: int = CURVE_STEPS, height: float = 28.0):
        return cls(np.linspace(0.0, height / 2.0, steps))


def build_mesh(field: PropertyField, subdivision: int = 2) -> Mesh:
    """Mesh a property field with 2*s^2 quadratic triangles per pixel.

    Nodes live on the half-spacing grid so vertex, edge-midpoint, and
    cell-center nodes are all addressed uniformly. Bitmap row 0 sits at the top
    of the domain (image convention), y = 0 at the bottom.
    """
    if subdivision < 1:
        raise ConfigError(f"subdivision must be >= 1, got {subdivision}")
    s = int(subdivision)
    h_pix, w_pix = field.bitmap.shape
    ncx, ncy = w_pix * s, h_pix * s          # square cells per direction
    nx, ny = 2 * ncx + 1, 2 * ncy + 1         # half-spacing node grid
    half = 0.5 / s

    xs = np.arange(nx) * half
    ys = np.arange(ny) * half
    nodes = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1).reshape(-1, 2)

    def nid(ix, iy):
        return iy * nx + ix

    cx, cy = np.meshgrid(np.arange(ncx), np.arange(ncy), indexing="ij")
    cx, cy = cx.ravel(), cy.ravel()
    x0, y0 = 2 * cx, 2 * cy
    lower = np.stack(
        [
            nid(x0, y0), nid(x0 + 2, y0), nid(x0 + 2, y0 + 2),
            nid(x0 + 1, y0), nid(x0 + 2, y0 + 1), nid(x0 + 1, y0 + 1),
        ],
        axis=1,
    )
    upper = np.stack(
        [
            nid(x0, y0), nid(x0 + 2, y0 + 2), nid(x0, y0 + 2),
            nid(x0 + 1, y0 + 1), nid(x0 + 1, y0 + 2), nid(x0, y0 + 1),
        ],
        axis=1,
    )
    elements = np.empty((2 * len(cx), 6), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper

    # Owning pixel of each cell: columns advance with cx, image rows count
    # downward from the top while cy counts upward from the bottom.
    pix_col = cx // s
    pix_row = h_pix - 1 - (cy // s)
    lam_cell = field.lame_lambda[pix_row, pix_col]
    mu_cell = field.lame_mu[pix_row, pix_col]
    lame_lambda = np.repeat(lam_cell, 2)
    lame_mu = np.repeat(mu_cell, 2)

    bottom = np.arange(nx, dtype=np.int64)
    top = np.arange(nx, dtype=np.int64) + (ny - 1) * nx
    return Mesh(
        nodes=nodes,
        elements=elements,
        lame_lambda=lame_lambda,
        lame_mu=lame_mu,
        bottom_nodes=bottom,
        top_nodes=top,
        width=float(w_pix),
        height=float(h_pix),
        subdivision=s,
    )


def _det2(F):
    return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]


def _inv_transpose2(F, det):
    out = np.empty_like(F)
    out[..., 0, 0] = F[..., 1, 1]
    out[..., 0, 1] = -F[..., 1, 0]
    out[..., 1, 0] = -F[..., 0, 1]
    out[..., 1, 1] = F[..., 0, 0]
    return out / det[..., None, None]


def psi_density(F, lame_lambda, lame_mu):
    """Neo-Hookean energy density for 2x2 deformation gradients (plane strain)."""
    F = np.asarray(F, dtype=np.float64)
    det = _det2(F)
    if np.any(det <= 0.0):
        raise ElementInversionError("det F <= 0 in energy evaluation")
    trace3 = np.einsum("...ij,...ij->...", F, F) + 1.0  # out-of-plane stretch 1
    log_det = np.log(det)
    iso = 0.5 * lame_mu * (trace3 - 3.0 - 2.0 * log_det)
    vol = 0.5 * lame_lambda * (0.5 * (det**2 - 1.0) - log_det)
    return iso + vol


def piola_stress(F, lame_lambda, lame_mu):
    """First Piola-Kirchhoff stress dpsi/dF."""
    F = np.asarray(F, dtype=np.float64)
    det = _det2(F)
    if np.any(det <= 0.0):
        raise ElementInversionError("det F <= 0 in stress evaluation")
    finv_t = _inv_transpose2(F, det)
    mu = np.asarray(lame_mu)[..., None, None]
    det_term = (0.5 * np.asarray(lame_lambda) * (det**2 - 1.0))[..., None, None]
    return mu * (F - finv_t) + det_term * finv_t


def material_tangent(F, lame_lambda, lame_mu):
    """d^2 psi / dF dF as a (..., 2, 2, 2, 2) array, indices (i, J, k, L)."""
    F = np.asarray(F, dtype=np.float64)
    det = _det2(F)
    finv_t = _inv_transpose2(F, det)
    lam = np.asarray(lame_lambda, dtype=np.float64)
    mu = np.asarray(lame_mu, dtype=np.float64)

    eye = np.eye(2)
    ident4 = np.einsum("ik,jl->ijkl", eye, eye)  # delta_ik delta_JL
    t_mixed = np.einsum("...il,...kj->...ijkl", finv_t, finv_t)
    t_outer = np.einsum("...ij,...kl->...ijkl", finv_t, finv_t)

    c_mixed = (mu - 0.5 * lam * (det**2 - 1.0))[..., None, None, None, None]
    c_outer = (lam * det**2)[..., None, None, None, None]
    c_ident = mu[..., None, None, None, None] if mu.ndim else mu
    return c_ident * ident4 + c_mixed * t_mixed + c_outer * t_outer


class FemProblem:
    """Assembly and Newton solves on one mesh.

    Precomputes shape-function gradients, the element dof map, and the sparse
    pattern once; individual solves share them. Dirichlet constraints are
    passed per solve as (dof indices, values).
    """

    def __init__(self, mesh: Mesh, newton_tol: float = 1e-8, max_newton: int = 20,
                 bisection_depth: int = 6):
        self.mesh = mesh
        self.newton_tol = float(newton_tol)
        self.max_newton = int(max_newton)
        self.bisection_depth = int(bisection_depth)

        verts = mesh.nodes[mesh.elements[:, :3]]          # (ne, 3, 2)
        jac = np.stack([verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]], axis=-1)
        det_jac = _det2(jac)
        if np.any(det_jac <= 0):
            raise ConfigError("mesh has non-positively oriented elements")
        inv_t = _inv_transpose2(jac, det_jac)             # (ne, 2, 2)
        # grad_x N_a at each quadrature point: (ne, nq, 6, 2)
        self.grad_n = np.einsum("eij,qaj->eqai", inv_t, _REF_GRADS)
        self.w_det = _QUAD_WEIGHTS[None, :] * det_jac[:, None]  # (ne, nq)

        dofs = np.empty((mesh.n_elements, 12), dtype=np.int64)
        dofs[:, 0::2] = 2 * mesh.elements
        dofs[:, 1::2] = 2 * mesh.elements + 1
        self.elem_dofs = dofs
        self._rows = np.repeat(dofs, 12, axis=1).ravel()
        self._cols = np.tile(dofs, (1, 12)).ravel()
        self.n_dofs = 2 * mesh.n_nodes
        self._reduction_cache = {}

    # -- kinematics ---------------------------------------------------------

    def _gradients(self, u):
        u_e = u.reshape(-1, 2)[self.mesh.elements]        # (ne, 6, 2)
        grad_u = np.einsum("eai,eqaj->eqij", u_e, self.grad_n, optimize=True)
        F = grad_u.copy()
        F[..., 0, 0] += 1.0
        F[..., 1, 1] += 1.0
        return F

    def _check_injective(self, F):
        det = _det2(F)
        bad = det <= 0.0
        if np.any(bad):
            e, q = np.argwhere(bad)[0]
            raise ElementInversionError(
                f"element inversion: det F = {det[e, q]:.3e}", element=int(e), quad_point=int(q)
            )

    def total_energy(self, u) -> float:
        F = self._gradients(u)
        self._check_injective(F)
        psi = psi_density(F, self.mesh.lame_lambda[:, None], self.mesh.lame_mu[:, None])
        return float(np.einsum("eq,eq->", self.w_det, psi))

    def internal_forces(self, u) -> np.ndarray:
        F = self._gradients(u)
        self._check_injective(F)
        P = piola_stress(F, self.mesh.lame_lambda[:, None], self.mesh.lame_mu[:, None])
        f_e = np.einsum("eq,eqij,eqaj->eai", self.w_det, P, self.grad_n, optimize=True)
        forces = np.zeros(self.n_dofs)
        np.add.at(forces, self.elem_dofs, f_e.reshape(-1, 12))
        return forces

    def _element_stiffness(self, u) -> np.ndarray:
        F = self._gradients(u)
        A = material_tangent(F, self.mesh.lame_lambda[:, None], self.mesh.lame_mu[:, None])
        k_e = np.einsum("eq,eqaj,eqijkl,eqbl->eaibk", self.w_det, self.grad_n, A,
                        self.grad_n, optimize=True)
        return k_e.reshape(-1, 12, 12)

    def tangent_matrix(self, u) -> sp.csr_matrix:
        vals = self._element_stiffness(u).ravel()
        return sp.coo_matrix((vals, (self._rows, self._cols)),
                             shape=(self.n_dofs, self.n_dofs)).tocsr()

    # -- constrained Newton solve -------------------------------------------

    def _reduction(self, constrained):
        key = constrained.tobytes()
        cached = self._reduction_cache.get(key)
        if cached is not None:
            return cached
        free_mask = np.ones(self.n_dofs, dtype=bool)
        free_mask[constrained] = False
        renumber = np.cumsum(free_mask) - 1
        keep = free_mask[self._rows] & free_mask[self._cols]
        reduced = (
            free_mask,
            renumber[self._rows[keep]],
            renumber[self._cols[keep]],
            keep,
            int(free_mask.sum()),
        )
        self._reduction_cache = {key: reduced}  # keep only the latest pattern
        return reduced

    def solve_equilibrium(self, u_init, constrained, values):
        """Newton-solve for equilibrium with the given Dirichlet data.

        Returns (displacements, iterations). Raises NonConvergenceError or
        ElementInversionError; callers decide whether to bisect.
        """
        free_mask, rows_red, cols_red, keep, n_free = self._reduction(constrained)
        u = u_init.reshape(-1).copy()
        u[constrained] = values

        residual = self.internal_forces(u)[free_mask]
        ref_norm = np.linalg.norm(residual)
        if ref_norm == 0.0:
            return u.reshape(-1, 2), 0
        tol = self.newton_tol * ref_norm + 1e-14 * max(1.0, ref_norm)

        for iteration in range(1, self.max_newton + 1):
            vals = self._element_stiffness(u).ravel()[keep]
            k_red = sp.csc_matrix((vals, (rows_red, cols_red)), shape=(n_free, n_free))
            lu = spla.splu(k_red, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
            delta = lu.solve(-residual)
            if not np.all(np.isfinite(delta)):
                raise NonConvergenceError("linear solve produced non-finite update",
                                          residual_norm=float(np.linalg.norm(residual)))
            u[free_mask] += delta
            residual = self.internal_forces(u)[free_mask]
            res_norm = np.linalg.norm(residual)
            if not np.isfinite(res_norm):
                raise NonConvergenceError("non-finite residual", residual_norm=float("inf"))
            if res_norm <= tol:
                return u.reshape(-1, 2), iteration
        raise NonConvergenceError(
            f"no convergence in {self.max_newton} Newton iterations",
            residual_norm=float(res_norm),
        )

    def _uniaxial_constraints(self, applied: float):
        mesh = self.mesh
        constrained = np.concatenate([
            2 * mesh.bottom_nodes, 2 * mesh.bottom_nodes + 1,
            2 * mesh.top_nodes, 2 * mesh.top_nodes + 1,
        ])
        values = np.concatenate([
            np.zeros(mesh.bottom_nodes.size), np.zeros(mesh.bottom_nodes.size),
            np.zeros(mesh.top_nodes.size), np.full(mesh.top_nodes.size, applied),
        ])
        order = np.argsort(constrained)
        return constrained[order], values[order]

    def solve_step(self, prior: DeformationState, applied: float, _depth=None) -> DeformationState:
        """Advance to a new applied top displacement with warm start and bisection."""
        if applied < prior.applied:
            raise ConfigError("applied displacement must not decrease across steps")
        depth = self.bisection_depth if _depth is None else _depth
        constrained, values = self._uniaxial_constraints(applied)

        guesses = [prior.displacements]
        if prior.applied > 0.0 and applied > prior.applied:
            guesses.insert(0, prior.displacements * (applied / prior.applied))
        last_error = None
        for guess in guesses:
            try:
                u, iters = self.solve_equilibrium(guess, constrained, values)
                return DeformationState(u, applied, True, iters)
            except (NonConvergenceError, ElementInversionError) as err:
                last_error = err

        if depth <= 0:
            raise NonConvergenceError(
                f"load bisection exhausted at applied={applied:.6g}: {last_error}",
                residual_norm=getattr(last_error, "residual_norm", None),
            )
        midpoint = 0.5 * (prior.applied + applied)
        mid_state = self.solve_step(prior, midpoint, _depth=depth - 1)
        return self.solve_step(mid_state, applied, _depth=depth - 1)

    def zero_state(self) -> DeformationState:
        return DeformationState(np.zeros((self.mesh.n_nodes, 2)), 0.0, True, 0)


def solve_step(problem: FemProblem, prior: DeformationState, applied: float) -> DeformationState:
    return problem.solve_step(prior, applied)


def run_uniaxial_extension(
    field: PropertyField,
    schedule: LoadSchedule | None = None,
    subdivision: int = 2,
    normalization: float | None = None,
    newton_tol: float = 1e-8,
    max_newton: int = 20,
    bisection_depth: int = 6,
    field_dump=None,
) -> EnergyCurve:
    """Solve the full displacement schedule and return the energy curve.

    The curve is raw unless `normalization` is given. `field_dump(step, mesh,
    state)` is invoked after each converged step when provided.
    """
    schedule = schedule or LoadSchedule.uniaxial_default(height=field.bitmap.shape[0])
    mesh = build_mesh(field, subdivision)
    problem = FemProblem(mesh, newton_tol=newton_tol, max_newton=max_newton,
                         bisection_depth=bisection_depth)
    state = problem.zero_state()
    energies = np.empty(len(schedule.displacements))
    for step, applied in enumerate(schedule.displacements):
        try:
            state = problem.solve_step(state, float(applied))
        except (NonConvergenceError, ElementInversionError) as err:
            raise NonConvergenceError(
                f"step {step} (applied={applied:.6g}) failed: {err}",
                residual_norm=getattr(err, "residual_norm", None),
                step_index=step,
            ) from err
        energies[step] = problem.total_energy(state.displacements)
        if field_dump is not None:
            field_dump(step, mesh, state)
    curve = EnergyCurve(schedule.displacements, energies, normalized=False)
    if normalization is not None:
        curve = curve.normalized_by(normalization)
    return curve
