"""Numerical checks of the divergence identities, risk bounds and Laplace
PAC-Bayes KL scaling behind the method.

All distributions here are either Gaussians (closed forms) or finite discrete
tables, so every quantity is computed exactly or by a plain Newton solve.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, xlogy

from .errors import ConfigError, DimensionError, FitError

LN2 = math.log(2.0)


# ---------------------------------------------------------------- Gaussians

@dataclass
class GaussianSpec:
    """Mean and covariance; ``cov`` may be a full matrix, a diagonal vector or a scalar."""

    mean: np.ndarray
    cov: object

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        d = self.mean.size
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = np.eye(d) * float(cov)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (d, d):
            raise DimensionError(f"covariance shape {cov.shape} does not match mean of size {d}")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ConfigError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() <= 1e-10:
            raise ConfigError("covariance is not positive definite")
        self.cov = cov

    @property
    def dim(self):
        return self.mean.size


def kl_gaussian(a, b):
    """KL(a || b) between multivariate Gaussians, closed form."""
    if a.dim != b.dim:
        raise DimensionError("Gaussians of different dimension")
    lb = np.linalg.cholesky(b.cov)
    la = np.linalg.cholesky(a.cov)
    # tr(Sb^-1 Sa) = |Lb^-1 La|_F^2, mahalanobis via a triangular solve
    m = np.linalg.solve(lb, la)
    diff = np.linalg.solve(lb, b.mean - a.mean)
    logdet = 2 * (np.log(np.diag(lb)).sum() - np.log(np.diag(la)).sum())
    kl = 0.5 * ((m * m).sum() + diff @ diff - a.dim + logdet)
    return max(kl, 0.0)


# ---------------------------------------------------------------- discrete

def as_dist(p):
    """Validate a discrete distribution (non-negative, sums to 1 within 1e-12)."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1) > 1e-12 * max(1, p.size):
        raise ConfigError("not a probability vector")
    return p


def kl_discrete(p, q):
    return float(np.sum(xlogy(p, p) - xlogy(p, q)))


def js_divergence(p, q):
    """Jensen-Shannon divergence in nats, ``KL(p||j)/2 + KL(q||j)/2``."""
    p, q = np.asarray(p, float).ravel(), np.asarray(q, float).ravel()
    if p.shape != q.shape:
        raise DimensionError("distributions over different supports")
    j = 0.5 * (p + q)
    # symmetric by construction: both halves are evaluated the same way
    val = 0.5 * (kl_discrete(p, j) + kl_discrete(q, j))
    return min(max(val, 0.0), LN2)


def check_sqrt_jsd_triangle(p, q, g):
    """``sqrt JSD(p,g) <= sqrt JSD(p,q) + sqrt JSD(q,g)``; returns (holds, slack)."""
    lhs = math.sqrt(js_divergence(p, g))
    rhs = math.sqrt(js_divergence(p, q)) + math.sqrt(js_divergence(q, g))
    slack = rhs - lhs
    return slack >= -1e-12, slack


def marginals(joint):
    """Per-axis marginals of an M-way joint table."""
    joint = np.asarray(joint, float)
    axes = range(joint.ndim)
    return [joint.sum(axis=tuple(a for a in axes if a != m)) for m in axes]


def product(margs):
    out = np.ones(())
    for p in margs:
        out = np.multiply.outer(out, p)
    return out


@dataclass
class RiskDecomposition:
    r_multi: float
    irreducible: float
    risk1: float
    risk2: float
    metric_slack: float
    additive_slack: float

    @property
    def metric_holds(self):
        return self.metric_slack >= -1e-12

    @property
    def additive_holds(self):
        return self.additive_slack >= -1e-12


def check_risk_decomposition(joint_s, joint_t):
    """Multimodal risk ``JSD(P_S || P_T)`` against its three-term bound.

    Terms: target irreducible ``JSD(prod P_T(m) || P_T)``, representation
    risk ``JSD(prod P_T(m) || prod P_S(m))`` and synergy risk
    ``JSD(P_S || prod P_S(m))``. The metric slack uses square roots (two
    triangle steps, always valid); the additive slack uses the raw terms.
    """
    joint_s, joint_t = np.asarray(joint_s, float), np.asarray(joint_t, float)
    if joint_s.shape != joint_t.shape:
        raise DimensionError("joints over different product spaces")
    prod_s, prod_t = product(marginals(joint_s)), product(marginals(joint_t))
    r = js_divergence(joint_s, joint_t)
    t0 = js_divergence(prod_t, joint_t)
    t1 = js_divergence(prod_t, prod_s)
    t2 = js_divergence(joint_s, prod_s)
    metric = math.sqrt(t0) + math.sqrt(t1) + math.sqrt(t2) - math.sqrt(r)
    return RiskDecomposition(r, t0, t1, t2, metric, t0 + t1 + t2 - r)


def check_unimodal_sum_bound(marginals_s, marginals_t):
    """``sqrt JSD(prod_m P_T(m) || prod_m P_S(m)) <= sum_m sqrt JSD(P_T(m) || P_S(m))``.

    Returns ``(holds, metric_slack, additive_slack)``.
    """
    if len(marginals_s) != len(marginals_t):
        raise DimensionError("different number of modalities")
    lhs = js_divergence(product(marginals_t), product(marginals_s))
    per = [js_divergence(pt, ps) for pt, ps in zip(marginals_t, marginals_s)]
    metric = sum(math.sqrt(v) for v in per) - math.sqrt(lhs)
    return metric >= -1e-12, metric, sum(per) - lhs


# ---------------------------------------------------------------- Laplace KL

@dataclass(frozen=True)
class LaplacePriors:
    sigma_beta2: float = 1.0
    sigma_r2: float = 1.0
    mu_r: float = 1.0


@dataclass
class LaplaceFit:
    map: np.ndarray
    hessian: np.ndarray
    priors: LaplacePriors
    kl: float
    iterations: int
    grad_norm: float
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class UnimodalModel:
    """Live ``N(0, s0^2 I_d)``; spoof ``sum_k pi_k N(mu_k, (s0^2 + eps) I_d)``
    with orthonormal-direction means of length ``attack_norm``."""

    sigma0: float = 0.05
    eps: float = 0.01
    attack_norm: float = 1.0
    n: int = 4000
    spoof_fraction: float = 0.5


def draw_unimodal(d, k, model, rng):
    """Samples ``z`` and labels ``y in {-1 (live), +1 (spoof)}``; means are
    orthogonal when ``k <= d`` (cyclically reused otherwise)."""
    if d < 1 or k < 1:
        raise ConfigError("need d >= 1 and K >= 1")
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    mus = model.attack_norm * q[:, np.arange(k) % d].T
    n1 = int(round(model.n * model.spoof_fraction))
    n0 = model.n - n1
    live = rng.standard_normal((n0, d)) * model.sigma0
    comp = rng.integers(0, k, size=n1)
    s_eff = math.sqrt(model.sigma0 ** 2 + model.eps)
    spoof = mus[comp] + rng.standard_normal((n1, d)) * s_eff
    z = np.vstack([live, spoof])
    y = np.concatenate([-np.ones(n0), np.ones(n1)])
    return z, y


def _newton(value_grad_hess, x0, tol=1e-8, max_iter=100):
    x = np.array(x0, dtype=float)
    for it in range(1, max_iter + 1):
        f, g, h = value_grad_hess(x)
        gn = float(np.linalg.norm(g))
        if gn < tol:
            return x, it - 1, gn
        step = np.linalg.solve(h, g)
        t = 1.0
        # backtracking keeps the damped step monotone on the convex objective
        while value_grad_hess(x - t * step)[0] > f - 1e-4 * t * (g @ step) and t > 1e-10:
            t *= 0.5
        x = x - t * step
    f, g, h = value_grad_hess(x)
    gn = float(np.linalg.norm(g))
    if gn < tol:
        return x, max_iter, gn
    raise FitError(f"Newton did not converge: |grad| = {gn:.3e} after {max_iter} iterations")


def laplace_kl_symmetric(z, y, priors=LaplacePriors(), tol=1e-8, max_iter=100):
    """Laplace posterior KL of a logistic hyperplane ``sigma(y beta^T z)``
    against the isotropic prior ``N(0, sigma_beta2 I)``."""
    z = np.atleast_2d(np.asarray(z, float))
    y = np.asarray(y, float)
    n, d = z.shape
    s2 = priors.sigma_beta2

    def vgh(beta):
        a = y * (z @ beta)
        f = -log_expit(a).sum() + beta @ beta / (2 * s2)
        g = -(z.T @ (y * expit(-a))) + beta / s2
        c = expit(a) * expit(-a)
        h = (z * c[:, None]).T @ z + np.eye(d) / s2
        return f, g, h

    beta, it, gn = _newton(vgh, np.zeros(d), tol, max_iter)
    _, _, h = vgh(beta)
    lh = np.linalg.cholesky(h)
    hinv = np.linalg.inv(h)
    logdet_h = 2 * np.log(np.diag(lh)).sum()
    kl = 0.5 * ((np.trace(hinv) + beta @ beta) / s2 - d + d * math.log(s2) + logdet_h)
    return LaplaceFit(beta, h, priors, float(kl), it, gn,
                      {"beta_norm2": float(beta @ beta), "trace_hinv": float(np.trace(hinv)),
                       "logdet_h": float(logdet_h)})


def laplace_kl_asymmetric(z, y, priors=LaplacePriors(), tol=1e-8, max_iter=100):
    """Laplace posterior KL of the scalar radius model ``sigma(y (|z|^2 - R))``
    against ``N(mu_R, sigma_R2)``."""
    z = np.atleast_2d(np.asarray(z, float))
    y = np.asarray(y, float)
    sq = (z * z).sum(axis=1)
    s2, mu = priors.sigma_r2, priors.mu_r

    def vgh(r):
        a = y * (sq - r[0])
        f = -log_expit(a).sum() + (r[0] - mu) ** 2 / (2 * s2)
        g = (y * expit(-a)).sum() + (r[0] - mu) / s2
        c = expit(a) * expit(-a)
        return f, np.array([g]), np.array([[c.sum() + 1 / s2]])

    r, it, gn = _newton(vgh, np.array([mu]), tol, max_iter)
    _, _, h = vgh(r)
    hv = float(h[0, 0])
    kl = 0.5 * (1 / (hv * s2) + (r[0] - mu) ** 2 / s2 - 1 + math.log(s2 * hv))
    return LaplaceFit(r, h, priors, float(kl), it, gn, {"r_map": float(r[0])})


# ---------------------------------------------------------------- synergy

@dataclass
class SynergyEstimate:
    value: float
    ridge: float
    regularized: bool


def estimate_synergy(blocks, ridge=1e-6):
    """Gaussian-approximation total correlation between feature blocks.

    For two blocks this is the mutual information
    ``0.5 ln(det S1 det S2 / det S_joint)``. Covariances are ridge-regularized
    when the joint covariance is (numerically) singular.
    """
    blocks = [np.asarray(b, float) for b in blocks]
    if len(blocks) < 2:
        raise ConfigError("need at least two feature blocks")
    n = blocks[0].shape[0]
    if any(b.shape[0] != n for b in blocks):
        raise DimensionError("blocks must be paired (same number of rows)")
    if n < 500:
        raise ConfigError("synergy estimate needs at least 500 paired samples")
    joint = np.hstack(blocks)
    cov = np.cov(joint, rowvar=False)
    sign, _ = np.linalg.slogdet(cov)
    regularized = sign <= 0 or np.linalg.eigvalsh(cov).min() < ridge
    if regularized:
        cov = cov + ridge * np.eye(cov.shape[0])
    _, ld_joint = np.linalg.slogdet(cov)
    ld_blocks, start = 0.0, 0
    for b in blocks:
        w = b.shape[1]
        ld_blocks += np.linalg.slogdet(cov[start:start + w, start:start + w])[1]
        start += w
    return SynergyEstimate(0.5 * (ld_blocks - ld_joint), ridge if regularized else 0.0, bool(regularized))


# ---------------------------------------------------------------- sweeps

def r_squared(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return 1 - (resid ** 2).sum() / ss_tot, slope


def relative_variation(values):
    v = np.asarray(values, float)
    return float((v.max() - v.min()) / abs(v.mean()))


def kl_sweep(variable, grid, fixed, model=UnimodalModel(), priors=LaplacePriors(), seed=0):
    """Symmetric and asymmetric KL along ``variable in {"d", "K"}``.

    Returns rows ``{variable, value, kl_sym, kl_asym, ...diagnostics}``. Each
    grid point gets its own data draw from a seed derived from ``seed``.
    """
    if variable not in ("d", "K"):
        raise ConfigError("sweep variable must be 'd' or 'K'")
    rows = []
    for i, value in enumerate(grid):
        d, k = (value, fixed) if variable == "d" else (fixed, value)
        rng = np.random.default_rng([seed, i])
        z, y = draw_unimodal(int(d), int(k), model, rng)
        sym = laplace_kl_symmetric(z, y, priors)
        asym = laplace_kl_asymmetric(z, y, priors)
        rows.append({
            "variable": variable, "value": int(value), "d": int(d), "K": int(k),
            "kl_sym": sym.kl, "kl_asym": asym.kl,
            "beta_norm2": sym.extra["beta_norm2"], "r_map": asym.extra["r_map"],
            "newton_iters_sym": sym.iterations, "newton_iters_asym": asym.iterations,
            "grad_norm_sym": sym.grad_norm, "grad_norm_asym": asym.grad_norm,
        })
    return rows


def rows_to_csv(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def random_dirichlet(rng, size, shape, alpha=1.0):
    return rng.dirichlet(np.full(size, alpha), size=shape)


# ---------------------------------------------------------------- claims

def js_rows(p, q):
    """Row-wise JSD for stacked distributions ``(..., S)``."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    j = 0.5 * (p + q)
    kl = lambda a: (xlogy(a, a) - xlogy(a, j)).sum(axis=-1)
    return np.clip(0.5 * (kl(p) + kl(q)), 0.0, LN2)


def _product_rows(margs):
    out = margs[0]
    for m in margs[1:]:
        out = (out[..., :, None] * m[..., None, :]).reshape(out.shape[0], -1)
    return out


@dataclass(frozen=True)
class TheorySettings:
    n_triples: int = 100_000
    triple_support: int = 8
    n_joints: int = 10_000
    joint_outcomes: int = 3
    n_marginals: int = 10_000
    marginal_modalities: int = 3
    marginal_support: int = 4
    d_grid: tuple = (4, 8, 16, 32, 64)
    k_grid: tuple = (1, 2, 4, 8, 16)
    k_fixed: int = 4
    d_fixed: int = 32
    r2_min: float = 0.95
    flat_max: float = 0.10
    model: UnimodalModel = UnimodalModel()
    priors: LaplacePriors = LaplacePriors()
    seed: int = 0


@dataclass
class ClaimResult:
    claim: str
    anchor: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


def run_claims(settings=TheorySettings()):
    """Evaluate every theory claim; returns ``(results, sweep_rows)``."""
    s = settings
    rng = np.random.default_rng(s.seed)
    results = []

    p, q, g = (random_dirichlet(rng, s.triple_support, s.n_triples) for _ in range(3))
    slack = np.sqrt(js_rows(p, q)) + np.sqrt(js_rows(q, g)) - np.sqrt(js_rows(p, g))
    results.append(ClaimResult(
        "sqrt-jsd-triangle", "square-root JS divergence is a metric",
        bool((slack >= -1e-12).all()), float(slack.min()), 0.0,
        f"{s.n_triples} Dirichlet triples over {s.triple_support} outcomes"))

    k = s.joint_outcomes
    js = random_dirichlet(rng, k * k, s.n_joints)
    jt = random_dirichlet(rng, k * k, s.n_joints)
    ms = [js.reshape(-1, k, k).sum(2), js.reshape(-1, k, k).sum(1)]
    mt = [jt.reshape(-1, k, k).sum(2), jt.reshape(-1, k, k).sum(1)]
    ps, pt = _product_rows(ms), _product_rows(mt)
    r = js_rows(js, jt)
    t0, t1, t2 = js_rows(pt, jt), js_rows(pt, ps), js_rows(js, ps)
    metric = np.sqrt(t0) + np.sqrt(t1) + np.sqrt(t2) - np.sqrt(r)
    additive_rate = float((t0 + t1 + t2 - r < -1e-12).mean())
    results.append(ClaimResult(
        "risk-decomposition-metric", "multimodal risk bound: irreducible + representation + synergy",
        bool((metric >= -1e-12).all()), float(metric.min()), 0.0,
        f"additive-form violation rate {additive_rate:.4f} (reported, not asserted)"))

    mm, ks = s.marginal_modalities, s.marginal_support
    mg_s = [random_dirichlet(rng, ks, s.n_marginals) for _ in range(mm)]
    mg_t = [random_dirichlet(rng, ks, s.n_marginals) for _ in range(mm)]
    lhs = js_rows(_product_rows(mg_t), _product_rows(mg_s))
    per = [js_rows(a, b) for a, b in zip(mg_t, mg_s)]
    uslack = sum(np.sqrt(v) for v in per) - np.sqrt(lhs)
    add_rate = float((sum(per) - lhs < -1e-12).mean())
    results.append(ClaimResult(
        "unimodal-sum-bound-metric", "representation risk bounded by the sum of unimodal risks",
        bool((uslack >= -1e-12).all()), float(uslack.min()), 0.0,
        f"additive-form violation rate {add_rate:.4f} (reported, not asserted)"))

    rows_d = kl_sweep("d", s.d_grid, s.k_fixed, s.model, s.priors, s.seed)
    rows_k = kl_sweep("K", s.k_grid, s.d_fixed, s.model, s.priors, s.seed)
    r2, slope = r_squared(s.d_grid, [row["kl_sym"] for row in rows_d])
    results.append(ClaimResult(
        "sym-kl-linear-in-d", "hyperplane KL grows as O(d) + O(K)",
        bool(r2 > s.r2_min and slope > 0), float(r2), s.r2_min, f"slope {slope:.4g}"))
    kl_k = [row["kl_sym"] for row in rows_k]
    results.append(ClaimResult(
        "sym-kl-monotone-in-K", "hyperplane KL grows as O(d) + O(K)",
        bool(np.all(np.diff(kl_k) > 0)), float(np.diff(kl_k).min()), 0.0,
        "smallest consecutive increase"))
    for var, rows in (("d", rows_d), ("K", rows_k)):
        var_ = relative_variation([row["kl_asym"] for row in rows])
        results.append(ClaimResult(
            f"asym-kl-flat-in-{var}", "radius KL independent of dimension and attack count",
            bool(var_ < s.flat_max), var_, s.flat_max, "relative variation (max - min) / mean"))
    return results, rows_d + rows_k
