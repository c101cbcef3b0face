"""Sparse and dense linear classifiers used by the selection pipelines.

All problems are posed over an unnormalized logistic (or squared-hinge)
loss with an unpenalized intercept:

    min_{w,c}  alpha * P(w) + sum_i loss(y_i * (x_i . w + c))

with P the l1 norm, the group l2,1 norm, or the squared l2 norm.  The
l1/group problems are solved by accelerated proximal gradient descent
with backtracking and adaptive restart; the smooth problems by
backtracking gradient descent with Barzilai-Borwein step seeding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit

from .data_model import FormatError, ModelWeights

_STEP_GROW = 1.25
_STEP_SHRINK = 0.5


@dataclass(frozen=True)
class SolverConfig:
    """Shared solver settings.

    alpha       penalty weight (>= 0)
    max_iters   iteration cap; hitting it returns a flagged result
    tol         convergence tolerance (relative objective change for the
                proximal solvers, relative gradient norm for the smooth ones)
    step_rule   'backtracking' (default) or 'fixed' (1/L with L the
                Lipschitz constant of the smooth part)
    """

    alpha: float = 1.0
    max_iters: int = 2000
    tol: float = 1e-8
    step_rule: str = "backtracking"

    def __post_init__(self):
        if self.alpha < 0 or not np.isfinite(self.alpha):
            raise ValueError("alpha must be a finite nonnegative real")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not 0 < self.tol < 1:
            raise ValueError("tol must be in (0, 1)")
        if self.step_rule not in ("backtracking", "fixed"):
            raise ValueError("step_rule must be 'backtracking' or 'fixed'")


@dataclass(frozen=True)
class GroupStructure:
    """A partition of the feature indices 0..p-1 into disjoint groups."""

    groups: list

    def __post_init__(self):
        groups = [np.asarray(g, dtype=np.int64).ravel() for g in self.groups]
        if not groups or any(g.size == 0 for g in groups):
            raise ValueError("groups must be nonempty index arrays")
        flat = np.concatenate(groups)
        p = flat.size
        if not np.array_equal(np.sort(flat), np.arange(p)):
            raise ValueError("groups must partition 0..p-1")
        object.__setattr__(self, "groups", groups)

    @property
    def p(self) -> int:
        return int(sum(g.size for g in self.groups))

    def __len__(self) -> int:
        return len(self.groups)


def _check_problem(X, y):
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, p) with one label per row")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise FormatError("invalid label: labels must be +1 or -1")
    return X, y


def logistic_loss_grad(X, y, w, c):
    """Unnormalized logistic loss and its gradient.

    Returns ``(value, grad_w, grad_c)`` for
    ``L(w, c) = sum_i log(1 + exp(-y_i (x_i . w + c)))``, computed in a
    saturation-safe form (log1p/logaddexp, no overflow for large margins).
    """
    X, y = _check_problem(X, y)
    w = np.asarray(w, dtype=np.float64).ravel()
    m = y * (X @ w + c)
    value = float(np.logaddexp(0.0, -m).sum())
    r = -y * expit(-m)  # d loss_i / d margin_i
    return value, X.T @ r, float(r.sum())


def soft_threshold(v, t):
    """Elementwise l1 proximal map: sign(v) * max(|v| - t, 0)."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def block_soft_threshold(v, t, groups: GroupStructure):
    """Groupwise l2 proximal map: each block scaled by max(0, 1 - t/||v_g||)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    out = np.zeros_like(v)
    for g in groups.groups:
        nrm = np.linalg.norm(v[g])
        if nrm > t:
            out[g] = (1.0 - t / nrm) * v[g]
    return out


def _intercept_optimum(y):
    n_pos = int(np.sum(y > 0))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes required")
    return float(np.log(n_pos / n_neg))


def compute_alpha_max(X, y):
    """Smallest alpha for which the l1-logistic solution has w = 0.

    Evaluated as the max absolute weight-gradient entry at the
    intercept-only optimum c* = log(n+/n-).
    """
    X, y = _check_problem(X, y)
    c_star = _intercept_optimum(y)
    _, gw, _ = logistic_loss_grad(X, y, np.zeros(X.shape[1]), c_star)
    return float(np.max(np.abs(gw))) if gw.size else 0.0


def _lipschitz_logistic(X):
    # |sigma'| <= 1/4; augment with the intercept column of ones
    n = X.shape[0]
    aug = np.linalg.norm(np.hstack([X, np.ones((n, 1))]), 2)
    return 0.25 * aug * aug


def _prox_solve(X, y, cfg, prox, penalty, kkt_resid):
    """Monotone FISTA with backtracking and adaptive restart.

    ``prox(u, t)`` is the proximal map of t*penalty, ``penalty(w)`` its
    value, ``kkt_resid(gw, gc, w)`` the stationarity residual used as the
    convergence measure.  The objective sequence is non-increasing.
    """
    n, p = X.shape
    w = np.zeros(p)
    c = _intercept_optimum(y)
    if cfg.step_rule == "fixed":
        step0 = 1.0 / _lipschitz_logistic(X)
    else:
        # cheap overestimate of 1/L to seed the backtracking search
        scale = 0.25 * max(float(np.sum(X * X) / n + 1.0), 1e-12)
        step0 = 1.0 / scale

    fx, gw, gc = logistic_loss_grad(X, y, w, c)
    obj = fx + penalty(w)
    vw, vc = w.copy(), c
    fv, gvw, gvc = fx, gw, gc
    theta = 1.0
    step = step0
    kkt_tol = 1e-6 * (1.0 + cfg.alpha)
    restarted = False

    for it in range(1, cfg.max_iters + 1):
        while True:
            w_new = prox(vw - step * gvw, step * cfg.alpha)
            c_new = vc - step * gvc
            dw = w_new - vw
            dc = c_new - vc
            f_new = logistic_loss_grad(X, y, w_new, c_new)[0]
            quad = fv + gvw @ dw + gvc * dc + (dw @ dw + dc * dc) / (2.0 * step)
            if f_new <= quad + 1e-12 * (1.0 + abs(quad)):
                break
            if cfg.step_rule == "fixed":
                break  # 1/L already majorizes; numerical noise only
            step *= _STEP_SHRINK
            if step < 1e-18:
                break
        obj_new = f_new + penalty(w_new)

        if obj_new > obj and not restarted:
            # momentum overshot: restart from the last iterate (monotone step)
            vw, vc = w.copy(), c
            fv, gvw, gvc = logistic_loss_grad(X, y, vw, vc)
            theta = 1.0
            restarted = True
            continue
        assert obj_new <= obj + 1e-9 * (1.0 + abs(obj)), "objective increased"
        restarted = False

        rel_change = abs(obj - obj_new) / (1.0 + abs(obj_new))
        w_prev, c_prev = w, c
        w, c, obj = w_new, c_new, obj_new

        if rel_change <= max(cfg.tol, 1e-12) or it % 5 == 0 or it == cfg.max_iters:
            _, gw, gc = logistic_loss_grad(X, y, w, c)
            if kkt_resid(gw, gc, w) <= kkt_tol:
                return ModelWeights(w, c, converged=True, iterations=it)

        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        beta = (theta - 1.0) / theta_new
        vw = w + beta * (w - w_prev)
        vc = c + beta * (c - c_prev)
        fv, gvw, gvc = logistic_loss_grad(X, y, vw, vc)
        theta = theta_new
        if cfg.step_rule == "backtracking":
            step *= _STEP_GROW

    return ModelWeights(w, c, converged=False, iterations=cfg.max_iters)


def _l1_kkt(gw, gc, w, alpha):
    on = w != 0
    resid = abs(gc)
    if np.any(on):
        resid = max(resid, float(np.max(np.abs(gw[on] + alpha * np.sign(w[on])))))
    if np.any(~on):
        resid = max(resid, float(np.max(np.maximum(np.abs(gw[~on]) - alpha, 0.0))))
    return resid


def solve_l1_logistic(X, y, cfg: SolverConfig) -> ModelWeights:
    """Solve min_{w,c} alpha*||w||_1 + L(w, c); intercept unpenalized.

    For alpha >= alpha_max the solution is w = 0, c = log(n+/n-).  A run
    that exhausts max_iters returns its best iterate with converged=False.
    """
    X, y = _check_problem(X, y)
    a = cfg.alpha
    return _prox_solve(
        X, y, cfg,
        prox=soft_threshold,
        penalty=lambda w: a * float(np.sum(np.abs(w))),
        kkt_resid=lambda gw, gc, w: _l1_kkt(gw, gc, w, a),
    )


def solve_group_logistic(X, y, groups: GroupStructure, cfg: SolverConfig) -> ModelWeights:
    """Solve min_{w,c} alpha*sum_g ||w_g||_2 + L(w, c).

    With singleton groups this coincides with solve_l1_logistic.
    """
    X, y = _check_problem(X, y)
    if groups.p != X.shape[1]:
        raise ValueError("group structure does not cover all %d columns" % X.shape[1])
    a = cfg.alpha

    def penalty(w):
        return a * float(sum(np.linalg.norm(w[g]) for g in groups.groups))

    def kkt(gw, gc, w):
        resid = abs(gc)
        for g in groups.groups:
            nrm = np.linalg.norm(w[g])
            if nrm > 0:
                resid = max(resid, float(np.linalg.norm(gw[g] + a * w[g] / nrm)))
            else:
                resid = max(resid, max(0.0, float(np.linalg.norm(gw[g])) - a))
        return resid

    return _prox_solve(
        X, y, cfg,
        prox=lambda u, t: block_soft_threshold(u, t, groups),
        penalty=penalty,
        kkt_resid=kkt,
    )


def _descent_solve(X, y, cfg, obj_grad):
    """Backtracking gradient descent on a smooth objective over (w, c).

    Uses a Barzilai-Borwein seed for the line search.  Converges when the
    gradient norm drops below tol * (1 + |objective|).
    """
    n, p = X.shape
    x = np.zeros(p + 1)
    x[-1] = _intercept_optimum(y)
    obj, grad = obj_grad(x)
    step = 1.0 / max(float(np.sum(X * X) / n + cfg.alpha + 1.0), 1e-12)
    if cfg.step_rule == "fixed":
        step = 1.0 / (_lipschitz_logistic(X) + cfg.alpha + 1.0)

    for it in range(1, cfg.max_iters + 1):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= cfg.tol * (1.0 + abs(obj)):
            return ModelWeights(x[:-1], x[-1], converged=True, iterations=it - 1)
        s = step
        while True:
            x_new = x - s * grad
            obj_new, grad_new = obj_grad(x_new)
            if obj_new <= obj - 1e-4 * s * gnorm * gnorm or s < 1e-18:
                break
            s *= _STEP_SHRINK
        assert obj_new <= obj + 1e-9 * (1.0 + abs(obj)), "objective increased"
        dx = x_new - x
        dg = grad_new - grad
        x, obj, grad = x_new, obj_new, grad_new
        if cfg.step_rule == "backtracking":
            denom = float(dg @ dg)
            step = float(dx @ dg) / denom if denom > 0 else s * _STEP_GROW
            step = float(np.clip(step, 1e-12, 1e6))

    return ModelWeights(x[:-1], x[-1], converged=False, iterations=cfg.max_iters)


def solve_l2_logistic(X, y, cfg: SolverConfig) -> ModelWeights:
    """Solve min_{w,c} (alpha/2)*||w||_2^2 + L(w, c) (strictly convex in w)."""
    X, y = _check_problem(X, y)
    a = cfg.alpha

    def obj_grad(x):
        f, gw, gc = logistic_loss_grad(X, y, x[:-1], x[-1])
        obj = f + 0.5 * a * float(x[:-1] @ x[:-1])
        return obj, np.concatenate([gw + a * x[:-1], [gc]])

    return _descent_solve(X, y, cfg, obj_grad)


def solve_l2_svm(X, y, cfg: SolverConfig) -> ModelWeights:
    """Solve min_{w,c} (alpha/2)*||w||_2^2 + sum_i max(0, 1 - y_i(x_i.w + c))^2."""
    X, y = _check_problem(X, y)
    a = cfg.alpha

    def obj_grad(x):
        m = X @ x[:-1] + x[-1]
        r = np.maximum(0.0, 1.0 - y * m)
        obj = float(r @ r) + 0.5 * a * float(x[:-1] @ x[:-1])
        gm = -2.0 * r * y
        return obj, np.concatenate([X.T @ gm + a * x[:-1], [float(gm.sum())]])

    return _descent_solve(X, y, cfg, obj_grad)


def two_sample_ttest(X, y):
    """Pooled-variance two-sample t statistic and two-sided p per column.

    The statistic is mean(class +1) - mean(class -1) over the pooled
    standard error with n-2 degrees of freedom.  Zero pooled variance
    yields the sentinels t=0, p=1 (equal means) or t=+/-inf, p=0
    (unequal means).
    """
    X, y = _check_problem(X, y)
    pos = y > 0
    n1, n2 = int(pos.sum()), int((~pos).sum())
    if n1 < 2 or n2 < 2:
        raise ValueError("each class needs >= 2 samples for a pooled t-test")
    X1, X2 = X[pos], X[~pos]
    m1, m2 = X1.mean(axis=0), X2.mean(axis=0)
    v1 = X1.var(axis=0, ddof=1)
    v2 = X2.var(axis=0, ddof=1)
    sp2 = ((n1 - 1) * v1 + (n2 - 1) * v2) / (n1 + n2 - 2)
    se = np.sqrt(sp2 * (1.0 / n1 + 1.0 / n2))
    diff = m1 - m2

    t = np.zeros(X.shape[1])
    ok = se > 0
    t[ok] = diff[ok] / se[ok]
    degenerate = ~ok & (diff != 0)
    t[degenerate] = np.sign(diff[degenerate]) * np.inf

    p = np.ones(X.shape[1])
    p[ok] = 2.0 * stats.t.sf(np.abs(t[ok]), n1 + n2 - 2)
    p[degenerate] = 0.0
    return t, p
