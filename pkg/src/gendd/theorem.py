"""Numerical checks of the gradient-level surrogate argument.

Everything here is float64 numpy. Notation: ``x0`` teacher feature,
``x0p`` single-step estimate of the generated feature, ``x0pp`` the
posterior-weighted class weight ``sum_i p(i|x0p) W_i``, ``c_y = W_y``.

Closed forms checked against finite differences:

* GenDD loss gradient at ``x0p``:
  ``A (x0p - x0) + (1 - lam) A (x0 - c_y)`` with ``A = 2 abar / (1 - abar)``.
* Cross-entropy gradient at ``x0p``: ``sum_i p_i W_i - W_y``.

The surrogate compares the first against
``g0 * A (x0p - x0) + g1 * (x0pp - c_y)`` with ``g0 = 1`` and
``g1 = (1 - lam) A`` (the only constants for which the two agree whenever
``x0pp == x0``). Their difference is ``g1 * (x0 - x0pp)``, so the surrogate is
tight exactly when the teacher feature equals its own posterior-weighted class
weight. Scenarios for a well-trained teacher are generated at that fixed
point, ``x0 = W^T softmax(W x0)``; the ``offset`` regime moves ``x0`` off it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .schedule import NoiseSchedule, build_schedule

CONFIDENCE_BUCKETS = (0.5, 0.9, 0.99, 0.999)


def _abar(schedule: NoiseSchedule, m: int) -> float:
    schedule.check_step(m)
    return float(schedule.alpha_bar[m])


def single_step_x0(x_m, m: int, eps_pred, schedule: NoiseSchedule) -> np.ndarray:
    """Invert the forward process for ``x0`` given a noise prediction."""
    abar = _abar(schedule, m)
    if abar <= 0:
        raise ValidationError(f"alpha_bar at step {m} is zero; x0 is not recoverable")
    return (np.asarray(x_m, float) - np.sqrt(1 - abar) * np.asarray(eps_pred, float)) / np.sqrt(abar)


def eps_from_x0(x_m, x0p, abar: float) -> np.ndarray:
    """Noise prediction implied by a single-step estimate ``x0p``."""
    return (np.asarray(x_m, float) - np.sqrt(abar) * np.asarray(x0p, float)) / np.sqrt(1 - abar)


def gendd_step_loss(x0p, x_m, eps, abar: float) -> float:
    """``||eps - eps_theta(x0p)||^2`` with ``eps_theta`` written through ``x0p``."""
    r = np.asarray(eps, float) - eps_from_x0(x_m, x0p, abar)
    return float(r @ r)


def grad_gendd_closed_form(x0p, x0, c_y, lam: float, abar: float) -> np.ndarray:
    a = 2 * abar / (1 - abar)
    x0p, x0, c_y = (np.asarray(v, float) for v in (x0p, x0, c_y))
    return a * (x0p - x0) + (1 - lam) * a * (x0 - c_y)


def softmax_probs(W, x) -> np.ndarray:
    z = np.asarray(W, float) @ np.asarray(x, float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ce_loss(x, W, y: int) -> float:
    z = np.asarray(W, float) @ np.asarray(x, float)
    zmax = z.max()
    return float(zmax + np.log(np.exp(z - zmax).sum()) - z[y])


def grad_ce_closed_form(x0p, W, y: int) -> np.ndarray:
    W = np.asarray(W, float)
    return softmax_probs(W, x0p) @ W - W[y]


def central_difference(f, x, h) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``; ``h`` per coordinate."""
    x = np.asarray(x, float)
    h = np.broadcast_to(np.asarray(h, float), x.shape)
    g = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        g[i] = (f(xp) - f(xm)) / (2 * h[i])
    return g


def surrogate_gammas(lam: float, abar: float) -> tuple[float, float]:
    return 1.0, 2 * (1 - lam) * abar / (1 - abar)


@dataclass
class SurrogateScenario:
    W: np.ndarray  # (C, d_t)
    x0: np.ndarray
    x0p: np.ndarray
    y: int
    lam: float
    abar: float

    @property
    def gammas(self) -> tuple[float, float]:
        return surrogate_gammas(self.lam, self.abar)


@dataclass
class SurrogateReport:
    residual: float
    cosine: float
    confidence: float
    degenerate: bool = False
    g_gendd: np.ndarray = field(default=None, repr=False)
    g_multi: np.ndarray = field(default=None, repr=False)


def multi_task_gradient(sc: SurrogateScenario) -> np.ndarray:
    g0, g1 = sc.gammas
    a = 2 * sc.abar / (1 - sc.abar)
    x0pp = softmax_probs(sc.W, sc.x0p) @ sc.W
    return g0 * a * (sc.x0p - sc.x0) + g1 * (x0pp - sc.W[sc.y])


def surrogate_residual(sc: SurrogateScenario) -> SurrogateReport:
    g_a = grad_gendd_closed_form(sc.x0p, sc.x0, sc.W[sc.y], sc.lam, sc.abar)
    g_b = multi_task_gradient(sc)
    conf = float(softmax_probs(sc.W, sc.x0p)[sc.y])
    na, nb, nd = np.linalg.norm(g_a), np.linalg.norm(g_b), np.linalg.norm(g_a - g_b)
    if na == 0:
        return SurrogateReport(0.0 if nd == 0 else float("inf"), float("nan"), conf, True, g_a, g_b)
    cos = float(g_a @ g_b / (na * nb)) if nb > 0 else 0.0
    return SurrogateReport(float(nd / na), cos, conf, False, g_a, g_b)


# ---------------------------------------------------------------------------
# scenario generation


def _posterior_fixed_point(K, r2, y, iters: int = 60):
    """Solve ``q = softmax(r2 * K q)`` on the branch of class ``y`` (batched).

    Newton iterations from the one-hot vector of ``y``, with a damped
    fixed-point fallback where a Newton step does not reduce the residual.
    """
    N, C, _ = K.shape
    G = r2[:, None, None] * K
    q = np.zeros((N, C))
    q[np.arange(N), y] = 1.0
    eye = np.eye(C)

    def resid(q):
        z = np.einsum("nij,nj->ni", G, q)
        z -= z.max(axis=1, keepdims=True)
        s = np.exp(z)
        s /= s.sum(axis=1, keepdims=True)
        return s, q - s

    for _ in range(iters):
        s, F = resid(q)
        Js = (s[:, :, None] * eye - s[:, :, None] * s[:, None, :]) @ G
        step = np.linalg.solve(eye - Js, F[..., None])[..., 0]
        q_new = q - step
        _, F_new = resid(q_new)
        bad = ~np.isfinite(q_new).all(axis=1) | (np.abs(F_new).max(1) > np.abs(F).max(1))
        q_new[bad] = 0.5 * q[bad] + 0.5 * s[bad]
        q = q_new
    s, F = resid(q)
    return q, np.abs(F).max(axis=1)


def make_scenarios(
    n: int,
    target_conf,
    rng: np.random.Generator,
    d_t: int = 16,
    n_classes: int | None = None,
    lam: float = 0.9,
    schedule: NoiseSchedule | None = None,
    max_rel_shift: float = 0.01,
    offset: float = 0.0,
) -> list[SurrogateScenario]:
    """Scenarios with teacher confidence near ``target_conf``.

    Classifier rows are ``r * u_i`` with random unit ``u_i``; ``r`` is set by
    bisection so that the fixed-point feature of class ``y`` has the target
    confidence. ``x0p = x0 + eta`` with ``||eta|| <= max_rel_shift * ||x0||``.
    ``offset > 0`` adds a random deviation of that relative size to ``x0``
    (teacher features away from the fixed point).
    """
    schedule = schedule or build_schedule("cosine", 1000)
    C = n_classes or min(10, d_t)
    target = np.broadcast_to(np.asarray(target_conf, float), (n,))
    U = rng.standard_normal((n, C, d_t))
    U /= np.linalg.norm(U, axis=2, keepdims=True)
    K = U @ U.transpose(0, 2, 1)
    y = rng.integers(0, C, n)

    lo, hi = np.full(n, np.log(1e-3)), np.full(n, np.log(1e3))
    for _ in range(45):
        mid = 0.5 * (lo + hi)
        q, _ = _posterior_fixed_point(K, np.exp(2 * mid), y, iters=12)
        up = q[np.arange(n), y] < target
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    r = np.exp(0.5 * (lo + hi))
    q, _ = _posterior_fixed_point(K, r**2, y)
    W = r[:, None, None] * U
    x0 = np.einsum("nc,ncd->nd", q, W)

    out = []
    for k in range(n):
        xk = x0[k]
        if offset > 0:
            d = rng.standard_normal(d_t)
            xk = xk + offset * np.linalg.norm(xk) * d / np.linalg.norm(d)
        d = rng.standard_normal(d_t)
        eta = rng.uniform(0, max_rel_shift) * np.linalg.norm(xk) * d / np.linalg.norm(d)
        m = int(rng.integers(1, schedule.M + 1))
        out.append(SurrogateScenario(W=W[k], x0=xk, x0p=xk + eta, y=int(y[k]), lam=lam,
                                     abar=float(schedule.alpha_bar[m])))
    return out


def bucket_of(conf: float, edges=CONFIDENCE_BUCKETS) -> float | None:
    below = [e for e in edges if conf >= e]
    return below[-1] if below else None


def confidence_sweep(per_bucket: int = 1000, seed: int = 0, lam: float = 0.9,
                     dims=(4, 16, 64), edges=CONFIDENCE_BUCKETS, offset: float = 0.0) -> list[dict]:
    """Median surrogate residual/cosine per confidence bucket.

    Target confidences are drawn uniformly in log-odds within each bucket;
    scenarios are then binned by the realised ``p(y | x0p)``.
    """
    rng = np.random.default_rng(seed)
    sched = build_schedule("cosine", 1000)
    bounds = list(edges) + [1 - 1e-4]
    reports: dict[float, list[SurrogateReport]] = {e: [] for e in edges}
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        logit = lambda p: np.log(p / (1 - p))  # noqa: E731
        for i, d in enumerate(dims):
            k = per_bucket // len(dims) + (i < per_bucket % len(dims))
            t = 1 / (1 + np.exp(-rng.uniform(logit(lo), logit(hi), k)))
            for sc in make_scenarios(k, t, rng, d_t=d, lam=lam, schedule=sched, offset=offset):
                rep = surrogate_residual(sc)
                b = bucket_of(rep.confidence, edges)
                if b is not None and not rep.degenerate:
                    reports[b].append(rep)
    rows = []
    for e in edges:
        reps = reports[e]
        rows.append({
            "confidence_bucket": e,
            "n": len(reps),
            "median_residual": float(np.median([r.residual for r in reps])) if reps else float("nan"),
            "median_cosine": float(np.median([r.cosine for r in reps])) if reps else float("nan"),
        })
    return rows


# ---------------------------------------------------------------------------
# finite-difference trials


def gradient_trials(n_trials: int = 1000, seed: int = 0, dims=(4, 16, 64)) -> dict:
    """Compare both closed forms with central differences on random instances.

    Returns the worst relative errors ``||g_fd - g|| / ||g||`` over all trials.
    """
    rng = np.random.default_rng(seed)
    sched = build_schedule("cosine", 1000)
    worst_gendd = worst_ce = 0.0
    for t in range(n_trials):
        d = dims[t % len(dims)]
        C = int(rng.integers(2, 11))
        W = rng.standard_normal((C, d)) / np.sqrt(d)
        y = int(rng.integers(C))
        x0 = rng.standard_normal(d)
        lam = float(rng.uniform())
        m = int(rng.integers(1, sched.M + 1))
        abar = float(sched.alpha_bar[m])
        eps = rng.standard_normal(d)
        x_tilde = lam * x0 + (1 - lam) * W[y]
        x_m = np.sqrt(abar) * x_tilde + np.sqrt(1 - abar) * eps
        x0p = x_tilde + 0.1 * rng.standard_normal(d)

        g = grad_gendd_closed_form(x0p, x0, W[y], lam, abar)
        g_fd = central_difference(lambda v: gendd_step_loss(v, x_m, eps, abar), x0p,
                                  1e-3 * np.maximum(1.0, np.abs(x0p)))
        worst_gendd = max(worst_gendd, np.linalg.norm(g_fd - g) / np.linalg.norm(g))

        g = grad_ce_closed_form(x0p, W, y)
        g_fd = central_difference(lambda v: ce_loss(v, W, y), x0p, 6e-6 * np.maximum(1.0, np.abs(x0p)))
        worst_ce = max(worst_ce, np.linalg.norm(g_fd - g) / np.linalg.norm(g))
    return {"trials": n_trials, "max_rel_err_gendd": float(worst_gendd), "max_rel_err_ce": float(worst_ce)}
