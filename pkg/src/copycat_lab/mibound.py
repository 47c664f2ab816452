"""Exact check of the residual lower bound on I(m; a_t | a_{t-1}).

Joints are explicit tables ``p[m, a_prev, a_cur]`` over integer alphabets.
The residual ``r = a_cur - a_prev`` lives on ``{-(A-1), ..., A-1}`` and is
stored at index ``r + A - 1``.  Logs are base 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_TOL = 1e-12


class NotNormalizedError(ValueError):
    pass


def _check(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise NotNormalizedError("distribution has negative entries")
    total = p.sum()
    if abs(total - 1.0) > NORM_TOL * max(1, p.size):
        raise NotNormalizedError(f"distribution sums to {total!r}, not 1")
    return p


def _h(p) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def entropy(p) -> float:
    """Shannon entropy in bits of a (possibly multi-dim) table; 0 log 0 = 0."""
    return max(_h(_check(p).ravel()), 0.0)


def _marg(p, keep):
    keep = tuple(sorted(keep))
    drop = tuple(i for i in range(p.ndim) if i not in keep)
    return p.sum(axis=drop) if drop else p


def joint_entropy(p, axes) -> float:
    return _h(_marg(p, axes).ravel())


def cond_entropy(p, x_axes, y_axes=()) -> float:
    """H(X | Y) for axis groups of the joint table ``p``."""
    p = _check(p)
    return joint_entropy(p, (*x_axes, *y_axes)) - (joint_entropy(p, y_axes) if y_axes else 0.0)


def cond_mutual_info(p, x_axes, y_axes, z_axes=()) -> float:
    """I(X; Y | Z) by direct summation of p log p(xyz)p(z) / (p(xz)p(yz))."""
    p = _check(p)
    x_axes, y_axes, z_axes = tuple(x_axes), tuple(y_axes), tuple(z_axes)
    order = x_axes + y_axes + z_axes
    pxyz = np.transpose(_marg(p, order), np.argsort(np.argsort(order)))
    nx, ny = len(x_axes), len(y_axes)
    pxyz = pxyz.reshape(int(np.prod(pxyz.shape[:nx])), int(np.prod(pxyz.shape[nx:nx + ny])), -1)
    pz = pxyz.sum(axis=(0, 1))
    pxz = pxyz.sum(axis=1)
    pyz = pxyz.sum(axis=0)
    i, j, k = np.nonzero(pxyz > 0)
    v = pxyz[i, j, k]
    return float((v * np.log2(v * pz[k] / (pxz[i, k] * pyz[j, k]))).sum())


@dataclass(frozen=True)
class DiscreteJoint:
    table: np.ndarray  # p[m, a_prev, a_cur]

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 3 or t.shape[1] != t.shape[2]:
            raise ValueError(f"joint must have shape (M, A, A), got {t.shape}")
        object.__setattr__(self, "table", _check(t))

    @property
    def M(self):
        return self.table.shape[0]

    @property
    def A(self):
        return self.table.shape[1]

    def residual_table(self) -> np.ndarray:
        """p[m, a_prev, r] with r shifted to index r + A - 1."""
        M, A = self.M, self.A
        out = np.zeros((M, A, 2 * A - 1))
        for ap in range(A):
            for ac in range(A):
                out[:, ap, ac - ap + A - 1] += self.table[:, ap, ac]
        return out


def random_joint(M: int, A: int, concentration: float = 1.0, seed=None) -> DiscreteJoint:
    if M < 2 or A < 2:
        raise ValueError("M and A must be at least 2")
    rng = np.random.default_rng(seed)
    t = rng.dirichlet(np.full(M * A * A, float(concentration))).reshape(M, A, A)
    return DiscreteJoint(t / t.sum())


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    slack: float
    proof_steps: tuple[float, float, float, float]
    holds: bool


M_AX, AP_AX, X_AX = 0, 1, 2


def verify_residual_bound(joint: DiscreteJoint, tol: float = 1e-9) -> BoundCheck:
    """Check I(m; a_t | a_prev) >= H(r | a_prev) - H(r | m) and each proof step.

    ``proof_steps`` holds, in order, the absolute residuals of the three
    equalities and the (non-negative when valid) gap H(r|m) - H(r|m,a_prev).
    """
    p = joint.table
    pr = joint.residual_table()
    lhs = cond_mutual_info(p, (M_AX,), (X_AX,), (AP_AX,))
    i_mr = cond_mutual_info(pr, (M_AX,), (X_AX,), (AP_AX,))
    h_r_ap = cond_entropy(pr, (X_AX,), (AP_AX,))
    expanded = cond_entropy(pr, (M_AX,), (AP_AX,)) + h_r_ap - cond_entropy(pr, (M_AX, X_AX), (AP_AX,))
    h_r_m_ap = cond_entropy(pr, (X_AX,), (M_AX, AP_AX))
    eliminated = h_r_ap - h_r_m_ap
    h_r_m = cond_entropy(pr, (X_AX,), (M_AX,))
    rhs = h_r_ap - h_r_m
    steps = (abs(lhs - i_mr), abs(i_mr - expanded), abs(expanded - eliminated), h_r_m - h_r_m_ap)
    slack = lhs - rhs
    return BoundCheck(lhs, rhs, slack, steps, slack >= -tol)


def fuzz(trials: int, M: int = 4, A: int = 3, seed: int = 0, concentration: float = 1.0):
    """Run ``verify_residual_bound`` on ``trials`` random joints; yields (trial, check)."""
    seeds = np.random.SeedSequence(seed).spawn(trials)
    for i, s in enumerate(seeds):
        yield i, verify_residual_bound(random_joint(M, A, concentration, s))
