"""Cosine cost, Sinkhorn transport (balanced or KL-relaxed marginals) and soft-assignment flow."""

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NoCorrespondenceError, ShapeError
from .numerics import (
    Tensor,
    as_tensor,
    exp,
    fill_nonpositive,
    grad_enabled,
    l2_normalize,
    power,
    reshape,
)

OFFSET = 0.03
DIVISION_FLOOR = 1e-30
D_MAX = 10.0


@dataclass
class OTParams:
    """Learnable log-regularisers; ``eps = exp(log_epsilon) + offset`` (same for lambda)."""

    log_epsilon: Tensor
    log_lambda: Tensor
    offset: float = OFFSET
    iterations: int = 1
    d_max: float = D_MAX

    def epsilon(self):
        return exp(self.log_epsilon) + self.offset

    def lam(self):
        return exp(self.log_lambda) + self.offset

    def rho(self):
        lam = self.lam()
        return lam / (lam + self.epsilon())

    def values(self):
        """Plain floats ``(eps, lambda, rho)`` for logging."""
        eps = float(np.exp(self.log_epsilon.data)) + self.offset
        lam = float(np.exp(self.log_lambda.data)) + self.offset
        return eps, lam, lam / (lam + eps)


@dataclass
class TransportPlan:
    cost: object  # N x M, Tensor or array
    mask: np.ndarray
    kernel: object
    a: object
    b: object
    plan: object

    def plan_array(self):
        return self.plan.data if isinstance(self.plan, Tensor) else self.plan


def displacement_mask(pc_t, pc_t1, d_max=D_MAX):
    pa = np.asarray(pc_t, dtype=np.float64)
    pb = np.asarray(pc_t1, dtype=np.float64)
    diff = pa[:, None, :] - pb[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1)) <= d_max


def cost_matrix(f_t, f_t1, pc_t, pc_t1, d_max=D_MAX):
    """Cosine distance ``1 - cos(f_t[i], f_t1[j])`` and the displacement gate.

    All-zero feature rows have cosine distance exactly 1 to everything.
    ``d_max=None`` skips the gate (returned as ``None``).
    """
    f_t, f_t1 = as_tensor(f_t), as_tensor(f_t1)
    if f_t.shape[1] != f_t1.shape[1]:
        raise ShapeError(f"cost_matrix: feature widths differ, {f_t.shape} vs {f_t1.shape}")
    if f_t.shape[0] != len(pc_t) or f_t1.shape[0] != len(pc_t1):
        raise ShapeError("cost_matrix: feature rows must align with their clouds")
    sim = l2_normalize(f_t, axis=1) @ l2_normalize(f_t1, axis=1).T
    mask = None if d_max is None else displacement_mask(pc_t, pc_t1, d_max)
    return 1.0 - sim, mask


def _uniform(n):
    return np.full(n, 1.0 / n)


def _check_inputs(cost_shape, mask, mu_s, mu_t):
    n, m = cost_shape
    if mask.shape != (n, m):
        raise ShapeError(f"sinkhorn: mask {mask.shape} does not match cost {cost_shape}")
    if mu_s.shape != (n,) or mu_t.shape != (m,):
        raise ShapeError(f"sinkhorn: marginals {mu_s.shape}, {mu_t.shape} do not match cost {cost_shape}")
    if (mu_s < 0).any() or (mu_t < 0).any() or mu_s.sum() <= 0 or mu_t.sum() <= 0:
        raise ContractError("sinkhorn: marginals must be nonnegative with positive sums")
    if not mask.any():
        raise NoCorrespondenceError("no admissible pair: every correspondence exceeds d_max")


def _guard(x):
    # only empty (fully masked) rows and columns hit the floor; small positive sums stay exact
    return np.where(x > 0, x, DIVISION_FLOOR)


def _sinkhorn_numpy(cost, mask, eps, rho, iterations, mu_s, mu_t):
    kernel = np.exp(-cost / eps) * mask
    a = np.ones(cost.shape[0])
    b = np.ones(cost.shape[1])
    for _ in range(iterations):
        b = (mu_t / _guard(kernel.T @ a)) ** rho
        a = (mu_s / _guard(kernel @ b)) ** rho
    plan = a[:, None] * kernel * b[None, :]
    return TransportPlan(cost, mask, kernel, a, b, plan)


def sinkhorn_plan(cost, mask, epsilon, rho=1.0, iterations=1, mu_s=None, mu_t=None):
    """Scaling iterations on ``K = exp(-C / eps)`` gated by ``mask``.

    Each iteration sets ``b = (mu_t / K^T a) ** rho`` then
    ``a = (mu_s / K b) ** rho``; ``rho = 1`` is balanced Sinkhorn. ``epsilon``
    and ``rho`` may be scalar tensors, in which case gradients flow through the
    unrolled iterations. Marginals default to uniform ``1/N``.
    """
    mask = np.asarray(mask, dtype=bool)
    shape = tuple(np.shape(cost.data if isinstance(cost, Tensor) else cost))
    mu_s = _uniform(shape[0]) if mu_s is None else np.asarray(mu_s, dtype=np.float64)
    mu_t = _uniform(shape[1]) if mu_t is None else np.asarray(mu_t, dtype=np.float64)
    _check_inputs(shape, mask, mu_s, mu_t)
    if iterations < 0:
        raise ContractError(f"iterations must be >= 0, got {iterations}")
    tracked = grad_enabled() and any(isinstance(x, Tensor) and x.requires_grad for x in (cost, epsilon, rho))
    if not tracked:
        as_float = lambda x: float(x.data) if isinstance(x, Tensor) else float(x)  # noqa: E731
        c = cost.data if isinstance(cost, Tensor) else np.asarray(cost, dtype=np.float64)
        return _sinkhorn_numpy(c, mask, as_float(epsilon), as_float(rho), iterations, mu_s, mu_t)

    cost = as_tensor(cost)
    kernel = exp(-(cost / epsilon)) * mask
    n, m = shape
    a = Tensor(np.ones(n))
    b = Tensor(np.ones(m))
    for _ in range(iterations):
        b = power(mu_t / fill_nonpositive(a @ kernel, DIVISION_FLOOR), rho)
        a = power(mu_s / fill_nonpositive(kernel @ b, DIVISION_FLOOR), rho)
    plan = reshape(a, (n, 1)) * kernel * reshape(b, (1, m))
    return TransportPlan(cost, mask, kernel, a, b, plan)


def sinkhorn(cost, mask, ot: OTParams, mu_s=None, mu_t=None):
    """Relaxed-marginal transport with the learnable regularisers in ``ot``."""
    return sinkhorn_plan(cost, mask, ot.epsilon(), ot.rho(), ot.iterations, mu_s, mu_t)


def initial_flow(plan, pc_t, pc_t1):
    """Soft-assignment flow: transport-weighted barycentre of ``pc_t1`` minus ``pc_t``.

    Rows carrying no mass give zero flow and are flagged in the returned
    ``unmatched`` mask.
    """
    t = plan.plan if isinstance(plan, TransportPlan) else plan
    t = as_tensor(t)
    pa = np.asarray(pc_t, dtype=np.float64)
    pb = np.asarray(pc_t1, dtype=np.float64)
    if t.shape != (len(pa), len(pb)):
        raise ShapeError(f"initial_flow: plan {t.shape} vs clouds {pa.shape}, {pb.shape}")
    mass = t.sum(axis=1)
    matched = mass.data > 0
    denom = mass + (~matched).astype(np.float64)
    bary = (t @ Tensor(pb)) / reshape(denom, (-1, 1))
    flow = (bary - pa) * matched[:, None].astype(np.float64)
    return flow, ~matched


def lp_assignment_oracle(cost, mask=None):
    """Exhaustive minimum-cost admissible permutation (N <= 8). Returns ``(perm, cost)``."""
    c = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    n = c.shape[0]
    if c.shape != (n, n):
        raise ShapeError(f"lp_assignment_oracle: cost must be square, got {c.shape}")
    if n > 8:
        raise ContractError(f"lp_assignment_oracle: N={n} exceeds the enumeration limit of 8")
    mask = np.ones((n, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    rows = np.arange(n)
    ok = mask[rows, perms].all(axis=1)
    if not ok.any():
        raise NoCorrespondenceError("lp_assignment_oracle: no admissible permutation")
    totals = np.where(ok, c[rows, perms].sum(axis=1), np.inf)
    best = int(np.argmin(totals))
    return perms[best], float(totals[best])
