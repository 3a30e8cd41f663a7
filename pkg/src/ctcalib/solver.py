"""Generic manifold-aware Levenberg-Marquardt engine with robust losses and
block-sparse normal equations.

A :class:`Problem` holds named parameter blocks living on simple manifolds
(euclidean R^n, SO(3), the unit sphere S^2 used for gravity) and factor
groups.  A factor group evaluates a batch of same-shaped residuals together
with "slot" Jacobians: each slot is a per-measurement array of block ids plus
the (measurements, residual_dim, tangent_dim) Jacobian with respect to that
block.  This layout keeps spline factors vectorized (the four active control
points of a cubic segment are four slots) while the assembly below scatters
everything into one sparse Gauss-Newton system.

Conventions
-----------
* Residuals and Jacobians returned by factor groups are already whitened
  (multiplied by the square-root information); robust losses are applied on
  top by the solver via the standard sqrt(rho') reweighting.
* SO(3) blocks use the right perturbation ``R <- R @ exp(delta)``; euclidean
  blocks add; sphere blocks rotate the direction in its tangent plane.
* Box bounds (used for time offsets) are enforced by clamping after
  retraction; hits are flagged in the result, never fatal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from ctcalib import lie

EUCLIDEAN = "euclidean"
SO3 = "so3"
SPHERE = "s2"


class ParameterBlock:
    """One named parameter living on a simple manifold."""

    def __init__(self, name, kind, value, constant=False, lower=None, upper=None):
        if kind not in (EUCLIDEAN, SO3, SPHERE):
            raise ValueError(f"unknown parameter-block kind {kind!r}")
        self.name = name
        self.kind = kind
        self.constant = bool(constant)
        self.lower = None if lower is None else np.asarray(lower, dtype=float)
        self.upper = None if upper is None else np.asarray(upper, dtype=float)
        if kind == EUCLIDEAN:
            value = np.atleast_1d(np.asarray(value, dtype=float))
        self.value = value

    @property
    def tangent_dim(self) -> int:
        if self.kind == EUCLIDEAN:
            return self.value.shape[-1]
        return 3 if self.kind == SO3 else 2

    def retract(self, value, delta):
        """Apply a tangent step; returns (new_value, bound_hit)."""
        delta = np.asarray(delta, dtype=float)
        if self.kind == EUCLIDEAN:
            raw = value + delta
            if self.lower is not None or self.upper is not None:
                clipped = np.clip(raw, self.lower, self.upper)
                return clipped, bool(np.any(clipped != raw))
            return raw, False
        if self.kind == SO3:
            return value @ lie.exp_so3(delta), False
        return value.retract(delta), False


class FactorGroup:
    """Batch of residuals of one kind.

    Subclasses implement :meth:`residuals` and
    :meth:`residuals_and_jacobians`; ``loss`` is ``None`` (plain quadratic)
    or ``("cauchy", scale)`` in whitened-residual units.
    """

    name = "factor"
    loss = None

    def residuals(self, values):
        """Whitened residual array of shape (measurements, residual_dim)."""
        raise NotImplementedError

    def residuals_and_jacobians(self, values, blocks):
        """Returns ``(res, slots)`` with ``slots = [(block_ids, jac), ...]``.

        ``block_ids`` is an int array of shape (measurements,) and ``jac``
        has shape (measurements, residual_dim, tangent_dim).
        """
        raise NotImplementedError


class FiniteDiffFactorGroup(FactorGroup):
    """Factor group whose Jacobians come from tangent-space central
    differences of :meth:`residuals`; subclasses define ``slot_blocks``.
    Used by small problems and as the analytic-Jacobian cross-check."""

    fd_step = 1e-6

    def slot_blocks(self, values):
        """List of per-measurement block-id arrays, one per slot."""
        raise NotImplementedError

    def residuals_and_jacobians(self, values, blocks):
        res = self.residuals(values)
        slots = finite_difference_slots(self, values, blocks, self.fd_step)
        return res, slots


def finite_difference_slots(group, values, blocks, step=1e-6):
    """Central-difference slot Jacobians for any group exposing
    ``residuals`` and ``slot_blocks``.

    Assumes each block appears in at most one slot per measurement (true for
    spline control-point windows and for all sensor-parameter slots).
    """
    r0 = group.residuals(values)
    m, rdim = r0.shape
    out = []
    for ids in group.slot_blocks(values):
        ids = np.broadcast_to(np.asarray(ids, dtype=np.int64), (m,))
        tdim = blocks[ids[0]].tangent_dim
        jac = np.zeros((m, rdim, tdim))
        for b in np.unique(ids):
            block = blocks[b]
            if block.tangent_dim != tdim:
                raise ValueError("slot mixes blocks of differing tangent dims")
            rows = ids == b
            for k in range(tdim):
                delta = np.zeros(tdim)
                delta[k] = step
                vp = list(values)
                vm = list(values)
                vp[b], _ = block.retract(values[b], delta)
                vm[b], _ = block.retract(values[b], -delta)
                diff = (group.residuals(vp) - group.residuals(vm)) / (2 * step)
                if not np.all(np.isfinite(diff[rows])):
                    raise FloatingPointError(
                        f"non-finite residual while differencing block "
                        f"{block.name} in group {group.name}"
                    )
                jac[rows, :, k] = diff[rows]
        out.append((ids, jac))
    return out


class Problem:
    """Named parameter blocks plus factor groups."""

    def __init__(self):
        self.blocks: list[ParameterBlock] = []
        self._index: dict[str, int] = {}
        self.groups: list[FactorGroup] = []

    def add_block(self, block: ParameterBlock) -> int:
        if block.name in self._index:
            raise ValueError(f"duplicate parameter block {block.name!r}")
        self._index[block.name] = len(self.blocks)
        self.blocks.append(block)
        return self._index[block.name]

    def block_id(self, name: str) -> int:
        return self._index[name]

    def block(self, name: str) -> ParameterBlock:
        return self.blocks[self._index[name]]

    def add_group(self, group: FactorGroup):
        self.groups.append(group)

    def values(self) -> list:
        return [b.value for b in self.blocks]

    def set_values(self, values):
        for b, v in zip(self.blocks, values):
            b.value = v

    def tangent_layout(self):
        """(offsets, total) — offset −1 marks constant blocks."""
        offsets = np.full(len(self.blocks), -1, dtype=np.int64)
        total = 0
        for i, b in enumerate(self.blocks):
            if not b.constant:
                offsets[i] = total
                total += b.tangent_dim
        return offsets, total


@dataclass
class SolveOptions:
    max_iterations: int = 50
    lambda_init: float = 1e-4
    lambda_accept: float = 0.5
    lambda_reject: float = 10.0
    lambda_max: float = 1e12
    cost_tolerance: float = 1e-8  # relative cost decrease
    gradient_tolerance: float = 1e-10  # max-norm of the gradient
    linear_solver: str = "sparse"  # "sparse" | "dense"


@dataclass
class SolveResult:
    converged: bool
    message: str
    cost: float
    initial_cost: float
    iterations: list = field(default_factory=list)
    bound_hits: list = field(default_factory=list)

    def log_jsonl(self) -> str:
        return "\n".join(json.dumps(it) for it in self.iterations)


class RankDeficiencyError(RuntimeError):
    """Raised when the damped normal equations stay unsolvable; names the
    parameter blocks with (near-)zero information."""

    def __init__(self, block_names):
        self.block_names = list(block_names)
        super().__init__(
            "normal equations are rank deficient; unconstrained blocks: "
            + ", ".join(self.block_names)
        )


def _loss_weights(group, res):
    """Per-measurement sqrt(rho') weights and total robustified cost."""
    s = np.sum(res * res, axis=1)
    if group.loss is None:
        return np.ones(len(s)), 0.5 * float(np.sum(s))
    kind, scale = group.loss
    if kind != "cauchy":
        raise ValueError(f"unknown robust loss {kind!r}")
    c2 = scale * scale
    cost = 0.5 * c2 * float(np.sum(np.log1p(s / c2)))
    return 1.0 / np.sqrt(1.0 + s / c2), cost


def problem_cost(problem: Problem, values=None) -> float:
    values = problem.values() if values is None else values
    return sum(_loss_weights(g, g.residuals(values))[1] for g in problem.groups)


def _assemble(problem: Problem, values, offsets, total):
    """Robustified gradient and Gauss-Newton matrix in tangent coordinates."""
    grad = np.zeros(total)
    rows, cols, vals = [], [], []
    cost = 0.0
    for group in problem.groups:
        res, slots = group.residuals_and_jacobians(values, problem.blocks)
        w, c = _loss_weights(group, res)
        cost += c
        m_count = len(res)
        res_w = res * w[:, None]
        ids_mat = np.stack(
            [
                np.broadcast_to(np.asarray(ids, dtype=np.int64), (m_count,))
                for ids, _ in slots
            ],
            axis=1,
        )  # (M, n_slots)
        jac = np.concatenate([j for _, j in slots], axis=2) * w[:, None, None]
        widths = [j.shape[2] for _, j in slots]
        starts = np.concatenate([[0], np.cumsum(widths)])
        d = jac.shape[2]
        # measurements sharing one slot-id pattern (e.g. one spline segment)
        # are reduced together; the per-key normal-equation blocks are then
        # scattered with vectorized index arithmetic
        uniq, inv = np.unique(ids_mat, axis=0, return_inverse=True)
        inv = inv.ravel()
        order = np.argsort(inv, kind="stable")
        bounds = np.searchsorted(inv[order], np.arange(len(uniq) + 1))
        jac_o = jac[order]
        res_o = res_w[order]
        h_red = np.empty((len(uniq), d, d))
        g_red = np.empty((len(uniq), d))
        for k in range(len(uniq)):
            jk = jac_o[bounds[k] : bounds[k + 1]].reshape(-1, d)
            h_red[k] = jk.T @ jk
            g_red[k] = jk.T @ res_o[bounds[k] : bounds[k + 1]].ravel()
        offs_red = offsets[uniq]  # (n_keys, n_slots)
        for a in range(len(slots)):
            oa, ta = offs_red[:, a], widths[a]
            act = oa >= 0
            if not np.any(act):
                continue
            gi = (oa[act, None] + np.arange(ta)).ravel()
            gv = g_red[act][:, starts[a] : starts[a] + ta].ravel()
            grad += np.bincount(gi, weights=gv, minlength=total)
            for b in range(len(slots)):
                ob, tb = offs_red[:, b], widths[b]
                both = act & (ob >= 0)
                if not np.any(both):
                    continue
                hb = h_red[both][:, starts[a] : starts[a] + ta,
                                 starts[b] : starts[b] + tb]
                r = oa[both][:, None, None] + np.arange(ta)[None, :, None]
                c2 = ob[both][:, None, None] + np.arange(tb)[None, None, :]
                rows.append(np.broadcast_to(r, hb.shape).ravel())
                cols.append(np.broadcast_to(c2, hb.shape).ravel())
                vals.append(hb.ravel())
    if rows:
        h = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(total, total),
        ).tocsc()
    else:
        h = scipy.sparse.csc_matrix((total, total))
    return h, grad, cost


def _solve_damped(h, grad, lamb, diag, linear_solver):
    damped = h + scipy.sparse.diags(lamb * diag)
    if linear_solver == "dense":
        return np.linalg.solve(damped.toarray(), -grad)
    lu = scipy.sparse.linalg.splu(damped.tocsc())
    return lu.solve(-grad)


def _retract_all(problem, values, offsets, step):
    new_values = list(values)
    hits = []
    for i, block in enumerate(problem.blocks):
        if offsets[i] < 0:
            continue
        delta = step[offsets[i] : offsets[i] + block.tangent_dim]
        new_values[i], hit = block.retract(values[i], delta)
        if hit:
            hits.append(block.name)
    return new_values, hits


def solve(problem: Problem, options: SolveOptions | None = None) -> SolveResult:
    """Levenberg-Marquardt with lambda*diag(H) damping and sparse factorization."""
    options = options or SolveOptions()
    offsets, total = problem.tangent_layout()
    if total == 0:
        raise ValueError("problem has no free parameters")
    if not problem.groups:
        raise ValueError("problem has no residual blocks")

    values = problem.values()
    lamb = options.lambda_init
    iterations = []
    bound_hits: set[str] = set()
    h, grad, cost = _assemble(problem, values, offsets, total)
    initial_cost = cost
    message = "max iterations reached"
    converged = False

    for it in range(options.max_iterations):
        gnorm = float(np.max(np.abs(grad))) if total else 0.0
        if gnorm < options.gradient_tolerance:
            message = "gradient tolerance reached"
            converged = True
            break
        raw_diag = h.diagonal()
        dead = _suspect_blocks(problem, offsets, raw_diag)
        if dead:
            raise RankDeficiencyError(dead)
        diag = np.maximum(raw_diag, 1e-12)
        accepted = False
        while lamb <= options.lambda_max:
            try:
                step = _solve_damped(h, grad, lamb, diag, options.linear_solver)
            except RuntimeError:
                step = np.full(total, np.nan)
            if np.all(np.isfinite(step)):
                cand, hits = _retract_all(problem, values, offsets, step)
                cand_cost = problem_cost(problem, cand)
                if np.isfinite(cand_cost) and cand_cost <= cost:
                    accepted = True
                    break
            lamb *= options.lambda_reject
        if not accepted:
            names = _suspect_blocks(problem, offsets, diag)
            if names:
                raise RankDeficiencyError(names)
            message = "no acceptable step within damping limits"
            break
        rel_decrease = (cost - cand_cost) / max(cost, 1e-300)
        iterations.append(
            {
                "iteration": it,
                "cost": cand_cost,
                "gradient_norm": gnorm,
                "lambda": lamb,
                "step_norm": float(np.linalg.norm(step)),
                "accepted": True,
            }
        )
        values = cand
        cost = cand_cost
        bound_hits.update(hits)
        lamb = max(lamb * options.lambda_accept, 1e-18)
        if rel_decrease < options.cost_tolerance:
            message = "cost tolerance reached"
            converged = True
            break
        h, grad, cost = _assemble(problem, values, offsets, total)

    problem.set_values(values)
    return SolveResult(
        converged=converged,
        message=message,
        cost=cost,
        initial_cost=initial_cost,
        iterations=iterations,
        bound_hits=sorted(bound_hits),
    )


def _suspect_blocks(problem, offsets, diag, threshold=1e-12):
    names = []
    scale = max(float(np.max(diag)), 1.0)
    for i, block in enumerate(problem.blocks):
        if offsets[i] < 0:
            continue
        d = diag[offsets[i] : offsets[i] + block.tangent_dim]
        if np.any(d <= threshold * scale):
            names.append(block.name)
    return names


def sparsity_pattern(problem: Problem) -> np.ndarray:
    """Boolean block-occupancy matrix of the Gauss-Newton information matrix
    over free blocks (diagonal always present)."""
    offsets, _ = problem.tangent_layout()
    free = [i for i, o in enumerate(offsets) if o >= 0]
    remap = {b: k for k, b in enumerate(free)}
    n = len(free)
    pat = np.zeros((n, n), dtype=bool)
    np.fill_diagonal(pat, True)
    values = problem.values()
    for group in problem.groups:
        res = group.residuals(values)
        slot_ids = [
            np.broadcast_to(np.asarray(ids, dtype=np.int64), (len(res),))
            for ids in _group_slot_ids(group, values, problem.blocks)
        ]
        for ids_a in slot_ids:
            for ids_b in slot_ids:
                for a, b in zip(ids_a, ids_b):
                    if a in remap and b in remap:
                        pat[remap[a], remap[b]] = True
    return pat


def _group_slot_ids(group, values, blocks):
    if hasattr(group, "slot_blocks"):
        return group.slot_blocks(values)
    _, slots = group.residuals_and_jacobians(values, blocks)
    return [ids for ids, _ in slots]
