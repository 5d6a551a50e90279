"""Differentiable top-k selection over distance vectors.

The soft indicator is the transport plan of a two-anchor entropic optimal
transport problem: every entry of a distance vector ships mass 1/n to either
a "small" anchor (capacity K/n) or a "large" anchor (capacity (n-K)/n).
The share that lands on the small anchor, rescaled by n, is the probability
that the entry belongs to the K smallest.

The plan is computed with log-domain Sinkhorn sweeps in float64.  Because
only two columns exist, the column dual reduces to one scalar per row; it is
found by safeguarded Newton before the sweeps start, so the sweeps only
polish an already feasible plan instead of crawling through the slow
near-hard regime.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import torch
from torch import Tensor

from .errors import ConfigError, NumericError, SinkhornConvergenceWarning

ANCHOR_MODES = ("min_max_of_input", "fixed")
BACKWARD_MODES = ("unrolled", "implicit")
OPERATORS = ("soft", "hard")

# Below this curvature the column dual is flat and carries no gradient.
_TINY = 1e-300


@dataclass(frozen=True)
class SoftTopKConfig:
    k: int = 3
    ot_epsilon: float = 0.01
    max_iters: int = 200
    tolerance: float = 1e-6
    anchor_mode: str = "min_max_of_input"
    cost_power: int = 2
    backward_mode: str = "unrolled"
    # "hard" swaps in the non-differentiable selector (ablation arm).
    operator: str = "soft"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"soft_topk.k must be >= 1, got {self.k}")
        if not self.ot_epsilon > 0:
            raise ConfigError(f"soft_topk.ot_epsilon must be > 0, got {self.ot_epsilon}")
        if self.max_iters < 1:
            raise ConfigError(f"soft_topk.max_iters must be >= 1, got {self.max_iters}")
        if self.tolerance < 0:
            raise ConfigError(f"soft_topk.tolerance must be >= 0, got {self.tolerance}")
        if self.anchor_mode not in ANCHOR_MODES:
            raise ConfigError(f"soft_topk.anchor_mode must be one of {ANCHOR_MODES}")
        if self.cost_power not in (1, 2):
            raise ConfigError("soft_topk.cost_power must be 1 or 2")
        if self.backward_mode not in BACKWARD_MODES:
            raise ConfigError(f"soft_topk.backward_mode must be one of {BACKWARD_MODES}")
        if self.operator not in OPERATORS:
            raise ConfigError(f"soft_topk.operator must be one of {OPERATORS}")

    def to_dict(self) -> dict:
        return asdict(self)


def pairwise_distances(patches: Tensor, centers: Tensor) -> Tensor:
    """Euclidean distances between rows of ``patches`` (..., n, D) and ``centers`` (m, D).

    Direct differences are used (no squared-norm expansion) so coincident
    points give exactly zero; the gradient at zero distance is zero.
    """
    if patches.shape[-1] != centers.shape[-1]:
        raise ConfigError(
            f"feature dims differ: patches {patches.shape[-1]} vs centers {centers.shape[-1]}"
        )
    if not (torch.isfinite(patches).all() and torch.isfinite(centers).all()):
        raise NumericError("non-finite values in distance inputs")
    lead = patches.shape[:-2]
    x1 = patches.reshape(-1, *patches.shape[-2:])
    x2 = centers.to(patches.dtype).expand(x1.shape[0], *centers.shape[-2:])
    d = torch.cdist(x1, x2, compute_mode="donot_use_mm_for_euclid_dist")
    return d.reshape(*lead, patches.shape[-2], centers.shape[-2])


def hard_topk(d: Tensor, k: int) -> Tensor:
    """0/1 indicator of the ``k`` smallest entries along the last axis; ties go to the lower index."""
    n = d.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    order = torch.argsort(d.detach(), dim=-1, stable=True)
    out = torch.zeros_like(d)
    out.scatter_(-1, order[..., :k], 1.0)
    return out


# ---------------------------------------------------------------------------
# Sinkhorn
# ---------------------------------------------------------------------------


def _column_dual_root(a: Tensor, mu: Tensor, nu0: Tensor, iters: int = 200) -> Tensor:
    """Solve sum_i mu_i * sigmoid(h + a_i) = nu0 for h, row-wise over leading dims."""
    logit_nu = torch.log(nu0) - torch.log1p(-nu0)
    lo = logit_nu - a.amax(-1)
    hi = logit_nu - a.amin(-1)
    h = 0.5 * (lo + hi)
    for _ in range(iters):
        s = torch.sigmoid(h.unsqueeze(-1) + a)
        r = (mu * s).sum(-1) - nu0
        dm = (mu * s * (1.0 - s)).sum(-1)
        lo = torch.where(r < 0, h, lo)
        hi = torch.where(r > 0, h, hi)
        newton = h - r / torch.where(dm > _TINY, dm, torch.ones_like(dm))
        inside = (dm > _TINY) & (newton > lo) & (newton < hi)
        h_next = torch.where(inside, newton, 0.5 * (lo + hi))
        if torch.equal(h_next, h) or bool((r.abs() <= 1e-15 * nu0).all()):
            break
        h = h_next
    return h


def _newton_refine(h: Tensor, a: Tensor, mu: Tensor, nu0: Tensor) -> Tensor:
    """One differentiable Newton step from a detached root.

    The value stays at the root while the derivative becomes the implicit
    derivative of the root with respect to ``a``.
    """
    s = torch.sigmoid(h.unsqueeze(-1) + a)
    r = (mu * s).sum(-1) - nu0
    dm = (mu * s * (1.0 - s)).sum(-1)
    ok = dm > _TINY
    step = r / torch.where(ok, dm, torch.ones_like(dm))
    return h - torch.where(ok, step, torch.zeros_like(step))


def _sweeps(cost, log_mu, log_nu, g, eps, max_iters, tol):
    """Log-domain Sinkhorn sweeps; rows that meet ``tol`` stop updating."""
    f = torch.zeros_like(cost[..., 0])
    active = torch.ones(cost.shape[:-2], dtype=torch.bool, device=cost.device)
    violation = torch.full(cost.shape[:-2], math.inf, dtype=cost.dtype, device=cost.device)
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        f_new = eps * (log_mu - torch.logsumexp((g.unsqueeze(-2) - cost) / eps, dim=-1))
        g_new = eps * (log_nu - torch.logsumexp((f_new.unsqueeze(-1) - cost) / eps, dim=-2))
        f = torch.where(active.unsqueeze(-1), f_new, f)
        g = torch.where(active.unsqueeze(-1), g_new, g)
        log_plan = (f.unsqueeze(-1) + g.unsqueeze(-2) - cost) / eps
        row_err = torch.expm1(torch.logsumexp(log_plan, dim=-1) - log_mu).abs()
        violation = torch.where(active, row_err.detach().amax(-1), violation)
        active = violation > tol
        if not bool(active.any()):
            break
    return torch.exp(log_plan), violation, n_iter


class _ImplicitSinkhorn(torch.autograd.Function):
    """Plan forward; backward solves the adjoint of the marginal constraints."""

    @staticmethod
    def forward(ctx, cost, mu, nu, eps, max_iters, tol):
        plan, violation, _ = _solve(cost, mu, nu, eps, max_iters, tol, differentiable=False)
        ctx.save_for_backward(plan, mu)
        ctx.eps = eps
        ctx.converged = bool((violation <= tol).all())
        ctx.violation = float(violation.max())
        return plan

    @staticmethod
    def backward(ctx, grad_plan):
        if not ctx.converged:
            raise NumericError(
                "implicit backward needs a converged plan; "
                f"marginal violation {ctx.violation:.3e}"
            )
        plan, mu = ctx.saved_tensors
        p0, p1 = plan[..., 0], plan[..., 1]
        g0, g1 = grad_plan[..., 0], grad_plan[..., 1]
        # Column-0 dual of the adjoint is a weighted mean of g0 - g1, with the
        # column-1 dual pinned at zero to remove the shift degeneracy.
        w = p0 * p1 / mu
        wsum = w.sum(-1)
        ok = wsum > _TINY
        kappa0 = torch.where(
            ok,
            (w * (g0 - g1)).sum(-1) / torch.where(ok, wsum, torch.ones_like(wsum)),
            torch.zeros_like(wsum),
        ).unsqueeze(-1)
        lam = (p0 * g0 + p1 * g1 - p0 * kappa0) / mu
        kappa = torch.cat([kappa0, torch.zeros_like(kappa0)], dim=-1)
        grad_cost = plan * (lam.unsqueeze(-1) + kappa.unsqueeze(-2) - grad_plan) / ctx.eps
        return grad_cost, None, None, None, None, None


def _solve(cost, mu, nu, eps, max_iters, tol, differentiable):
    log_mu = torch.log(mu)
    log_nu = torch.log(nu)
    nu0 = nu[..., 0]
    with torch.no_grad():
        a = (cost[..., 1] - cost[..., 0]) / eps
        h = _column_dual_root(a, mu, nu0)
    if differentiable:
        h = _newton_refine(h, (cost[..., 1] - cost[..., 0]) / eps, mu, nu0)
    g = torch.stack([eps * h, torch.zeros_like(h)], dim=-1)
    return _sweeps(cost, log_mu, log_nu, g, eps, max_iters, tol)


def sinkhorn(
    cost: Tensor,
    row_marginal: Tensor,
    col_marginal: Tensor,
    cfg: SoftTopKConfig,
) -> Tensor:
    """Entropic OT plan for an (..., n, 2) cost matrix.

    Returns the plan in float64.  Rows satisfy ``row_marginal`` to relative
    accuracy ``cfg.tolerance``; columns are exact up to rounding because the
    last half-sweep is a column update.  Gradients follow ``cfg.backward_mode``.
    """
    if cost.shape[-1] != 2:
        raise ValueError(f"only two-column transport is supported, got {cost.shape[-1]} columns")
    if torch.isnan(cost).any():
        raise NumericError("NaN in transport cost")
    cost = cost.double()
    mu = torch.as_tensor(row_marginal, dtype=torch.float64, device=cost.device)
    nu = torch.as_tensor(col_marginal, dtype=torch.float64, device=cost.device)
    mu = mu.expand(cost.shape[:-1]).contiguous()
    nu = nu.expand(*cost.shape[:-2], 2).contiguous()
    if (mu < 0).any() or (nu < 0).any():
        raise ValueError("marginals must be nonnegative")
    if (mu.sum(-1) - nu.sum(-1)).abs().max() > 1e-9:
        raise ValueError("row and column marginals carry different mass")
    eps = float(cfg.ot_epsilon)

    if cfg.backward_mode == "implicit" and cost.requires_grad:
        plan = _ImplicitSinkhorn.apply(cost, mu, nu, eps, cfg.max_iters, cfg.tolerance)
        violation = (plan.detach().sum(-1) / mu - 1).abs().amax(-1)
    else:
        plan, violation, _ = _solve(
            cost, mu, nu, eps, cfg.max_iters, cfg.tolerance, differentiable=cost.requires_grad
        )
    worst = float(violation.max()) if violation.numel() else 0.0
    if worst > cfg.tolerance:
        warnings.warn(
            f"Sinkhorn did not reach tolerance {cfg.tolerance:g} in {cfg.max_iters} "
            f"iterations (marginal violation {worst:.3e})",
            SinkhornConvergenceWarning,
            stacklevel=2,
        )
    return plan


# ---------------------------------------------------------------------------
# Soft top-k
# ---------------------------------------------------------------------------


def _transport_cost(d: Tensor, cfg: SoftTopKConfig) -> Tensor:
    scale = d.amax(-1, keepdim=True)
    scale = torch.where(scale > 0, scale, torch.ones_like(scale))
    dn = d / scale
    if cfg.anchor_mode == "min_max_of_input":
        anchors = torch.cat([dn.amin(-1, keepdim=True), dn.amax(-1, keepdim=True)], dim=-1)
    else:
        anchors = torch.tensor([0.0, 1.0], dtype=d.dtype, device=d.device).expand(
            *d.shape[:-1], 2
        )
    diff = dn.unsqueeze(-1) - anchors.unsqueeze(-2)
    return diff.abs() if cfg.cost_power == 1 else diff * diff


def soft_topk(d: Tensor, cfg: SoftTopKConfig) -> Tensor:
    """Soft membership of each entry of ``d`` (last axis) in its K smallest.

    Output has the shape and dtype of ``d``, entries in [0, 1], and each row
    sums to K.  Smaller distances get larger weights.  Leading axes are
    treated as independent rows, so this is also the batched form.
    """
    n = d.shape[-1]
    if cfg.k >= n:
        raise ValueError(f"soft top-k needs K < n, got K={cfg.k}, n={n}")
    cost = _transport_cost(d, cfg)
    mu = torch.full((n,), 1.0 / n, dtype=torch.float64, device=d.device)
    nu = torch.tensor([cfg.k / n, (n - cfg.k) / n], dtype=torch.float64, device=d.device)
    plan = sinkhorn(cost, mu, nu, cfg)
    return (n * plan[..., 0]).to(d.dtype)


def soft_topk_batch(dmat: Tensor, cfg: SoftTopKConfig) -> Tensor:
    """Row-wise soft top-k of an (m, n) matrix, solved as one batched problem."""
    if dmat.dim() != 2:
        raise ValueError(f"expected an (m, n) matrix, got shape {tuple(dmat.shape)}")
    return soft_topk(dmat, cfg)


def soft_topk_vjp(d: Tensor, cfg: SoftTopKConfig, upstream: Tensor) -> Tensor:
    """Vector-Jacobian product ``upstream^T dz/dd`` through the configured backward mode."""
    d = d.detach().requires_grad_(True)
    with torch.enable_grad():
        z = soft_topk(d, cfg)
        (grad,) = torch.autograd.grad(z, d, grad_outputs=upstream.to(z.dtype))
    return grad


def select_topk(d: Tensor, cfg: SoftTopKConfig) -> Tensor:
    """Indicator used by the loss and the score: soft, or hard with no gradient."""
    if cfg.operator == "hard":
        return hard_topk(d, cfg.k)
    return soft_topk(d, cfg)
