"""Nonparametric uncertainty statistics.

Implements the evaluation toolkit used to compare per-pixel uncertainty
pools of correct vs incorrect predictions:

* a k-nearest-neighbor estimator of the Renyi divergence of order alpha,

      R_hat = 1/(alpha-1) * ln( (1/n0) * sum_i
                [ (n0-1) rho_k(i)^d / (n1 nu_k(i)^d) ]^(1-alpha) * B_{k,alpha} )

  where rho_k(i) is the k-th NN distance of point i within its own sample
  (self excluded), nu_k(i) the k-th NN distance into the other sample, and
  B_{k,alpha} = Gamma(k)^2 / (Gamma(k-alpha+1) Gamma(k+alpha-1));
* a label-permutation test for the null of identical pools;
* an M-out-of-N bootstrap (resampling fewer points than observed, which keeps
  intervals valid for non-smooth k-NN statistics) with percentile CIs;
* Gaussian kernel density estimation with the robust Silverman bandwidth.

Uncertainty values quantize heavily, and exact ties produce zero NN distances
that break the estimator, so a tiny seeded uniform jitter (relative magnitude
``jitter_scale`` times the data range) is applied before any distance query.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import gammaln

from .errors import ConfigError, DegeneratePoolError
from .seeds import derive_seed
from .validation import as_values_1d

_DEFAULT_JITTER_SEED = 0x1D9F7C3B5A2E6481


@dataclass
class SamplePool:
    """A 1-D pool of per-pixel uncertainty values with a provenance label."""

    values: np.ndarray
    label: str = ""
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = as_values_1d(self.values, f"pool '{self.label}'")

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class DivergenceConfig:
    """Estimator settings: neighbor order k, Renyi order alpha (!= 1)."""

    k: int = 4
    alpha: float = 0.85
    jitter_scale: float = 1e-9
    d: int = 1

    def validate(self, prefix: str = "divergence") -> None:
        if self.k < 1:
            raise ConfigError(f"{prefix}.k", "must be >= 1")
        if self.alpha == 1:
            raise ConfigError(f"{prefix}.alpha", "order 1 is excluded (KL limit)")
        if self.jitter_scale < 0:
            raise ConfigError(f"{prefix}.jitter_scale", "must be >= 0")
        if self.d < 1:
            raise ConfigError(f"{prefix}.d", "must be >= 1")


@dataclass
class DivergenceReport:
    """Point estimate plus the significance/stability companions."""

    estimate: float
    p_value: float
    b_replicates: int
    bootstrap_samples: np.ndarray
    ci_level: float
    ci_lo: float
    ci_hi: float
    gamma: float
    k: int
    alpha: float
    jitter_scale: float
    n0: int
    n1: int

    def to_dict(self) -> dict:
        return {
            "estimate": float(self.estimate),
            "p_value": float(self.p_value),
            "b_replicates": int(self.b_replicates),
            "ci_level": float(self.ci_level),
            "ci_lo": float(self.ci_lo),
            "ci_hi": float(self.ci_hi),
            "gamma": float(self.gamma),
            "k": int(self.k),
            "alpha": float(self.alpha),
            "jitter_scale": float(self.jitter_scale),
            "n0": int(self.n0),
            "n1": int(self.n1),
        }


def b_coefficient(k: int, alpha: float) -> float:
    """Gamma(k)^2 / (Gamma(k - alpha + 1) * Gamma(k + alpha - 1)), via log-gamma."""
    if k < 1:
        raise ConfigError("divergence.k", "must be >= 1")
    if k - alpha + 1 <= 0 or k + alpha - 1 <= 0:
        raise ConfigError(
            "divergence.alpha", f"gamma pole: need k-alpha+1 > 0 and k+alpha-1 > 0 (k={k}, alpha={alpha})"
        )
    return float(np.exp(2.0 * gammaln(k) - gammaln(k - alpha + 1) - gammaln(k + alpha - 1)))


def _pool_values(pool) -> np.ndarray:
    if isinstance(pool, SamplePool):
        return pool.values
    return np.asarray(pool, dtype=np.float64)


def _as_points(x, name: str) -> np.ndarray:
    """Pools as (n, d) float64 point arrays; 1-D input means d=1."""
    arr = np.asarray(_pool_values(x), dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DegeneratePoolError(f"{name} must be a non-empty 1-D or (n, d) array")
    if not np.all(np.isfinite(arr)):
        raise DegeneratePoolError(f"{name} contains non-finite values")
    return arr


def _kth_nn_self_sorted(values: np.ndarray, k: int) -> np.ndarray:
    """k-th NN distance of each element of a sorted 1-D array within itself,
    the element's own entry excluded. Exact for any input, ties included."""
    n = values.size
    if n < k + 1:
        raise DegeneratePoolError(f"need at least {k + 1} points for k={k} self-queries, got {n}")
    offsets = np.arange(-(k + 1), k + 2)
    idx = np.arange(n)[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < n)
    window = values.take(np.clip(idx, 0, n - 1))
    dist = np.abs(window - values[:, None])
    dist[~valid] = np.inf
    dist.sort(axis=1)
    # own entry contributes one zero, so index k is the k-th distance excluding self
    return dist[:, k]


def _kth_nn_cross_sorted(
    reference: np.ndarray, queries: np.ndarray, positions: np.ndarray, k: int
) -> np.ndarray:
    """k-th NN distance from each query into a sorted reference array.

    ``positions`` are insertion indices of the queries into the reference
    (as from searchsorted); exactness needs only that each query's true
    neighbors lie within k slots of its insertion point, which holds for
    sorted data.
    """
    n = reference.size
    if n < k:
        raise DegeneratePoolError(f"need at least {k} reference points for k={k} queries, got {n}")
    offsets = np.arange(-k, k)
    idx = positions[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < n)
    window = reference.take(np.clip(idx, 0, n - 1))
    dist = np.abs(window - queries[:, None])
    dist[~valid] = np.inf
    dist.sort(axis=1)
    return dist[:, k - 1]


def knn_distance(query, reference, k: int, exclude_self: bool = False) -> np.ndarray:
    """Exact Euclidean k-th nearest-neighbor distances.

    With ``exclude_self=True`` the query set must be the reference set itself;
    each point's own entry is excluded from its neighbor count. 1-D data uses
    a sorting path, higher dimensions a kd-tree.
    """
    q = _as_points(query, "query")
    r = _as_points(reference, "reference")
    if q.shape[1] != r.shape[1]:
        raise DegeneratePoolError("query and reference dimensions differ")
    if k < 1:
        raise ConfigError("k", "must be >= 1")
    needed = k + 1 if exclude_self else k
    if r.shape[0] < needed:
        raise DegeneratePoolError(
            f"insufficient reference points: need {needed} for k={k}"
            f"{' excluding self' if exclude_self else ''}, got {r.shape[0]}"
        )
    if exclude_self and q.shape != r.shape:
        raise DegeneratePoolError("exclude_self requires query set == reference set")

    if q.shape[1] == 1:
        qv = q[:, 0]
        rv = r[:, 0]
        if exclude_self:
            order = np.argsort(rv, kind="stable")
            dist_sorted = _kth_nn_self_sorted(rv[order], k)
            out = np.empty_like(dist_sorted)
            out[order] = dist_sorted
            return out
        rs = np.sort(rv)
        pos = np.searchsorted(rs, qv, side="left")
        return _kth_nn_cross_sorted(rs, qv, pos, k)

    tree = cKDTree(r)
    order = k + 1 if exclude_self else k  # self contributes one zero distance
    dist, _ = tree.query(q, k=[order])
    return np.asarray(dist)[:, 0]


def _apply_jitter(
    pooled: np.ndarray, jitter_scale: float, jitter_seed: int | None
) -> np.ndarray:
    """Seeded uniform tie-breaking noise, amplitude jitter_scale * data range."""
    if jitter_scale == 0:
        return pooled
    span = float(pooled.max() - pooled.min())
    if span == 0:
        raise DegeneratePoolError("degenerate pool: all values identical")
    seed = _DEFAULT_JITTER_SEED if jitter_seed is None else int(jitter_seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.uniform(-0.5, 0.5, size=pooled.shape)
    return pooled + jitter_scale * span * noise


def _renyi_from_split(
    p_sorted: np.ndarray,
    q_sorted: np.ndarray,
    positions: np.ndarray,
    k: int,
    alpha: float,
    d: int = 1,
) -> float:
    """Estimator core for pre-sorted 1-D pools (d counts original dimension)."""
    n0 = p_sorted.size
    n1 = q_sorted.size
    if n0 <= k or n1 <= k:
        raise DegeneratePoolError(f"pool sizes must exceed k={k}, got n0={n0}, n1={n1}")
    rho = _kth_nn_self_sorted(p_sorted, k)
    nu = _kth_nn_cross_sorted(q_sorted, p_sorted, positions, k)
    return _combine_terms(rho, nu, n0, n1, k, alpha, d)


def _combine_terms(
    rho: np.ndarray, nu: np.ndarray, n0: int, n1: int, k: int, alpha: float, d: int
) -> float:
    if np.any(nu == 0) or (alpha > 1 and np.any(rho == 0)):
        raise DegeneratePoolError(
            "degenerate pool: zero nearest-neighbor distance (exact ties); "
            "increase jitter_scale"
        )
    b = b_coefficient(k, alpha)
    one_minus = 1.0 - alpha
    terms = b * ((n0 - 1) / n1) ** one_minus * (rho / nu) ** (d * one_minus)
    mean = float(np.mean(terms))
    if not math.isfinite(mean) or mean <= 0:
        raise DegeneratePoolError("degenerate pool: estimator terms collapsed")
    return math.log(mean) / (alpha - 1.0)


def renyi_divergence(
    p_pool, q_pool, config: DivergenceConfig | None = None, jitter_seed: int | None = None
) -> float:
    """k-NN estimate of the order-alpha Renyi divergence R(p || q).

    Deterministic: tie-breaking jitter uses a fixed seed unless ``jitter_seed``
    is supplied (the bootstrap passes per-replicate seeds).
    """
    cfg = config or DivergenceConfig()
    cfg.validate()
    p = _as_points(p_pool, "p_pool")
    q = _as_points(q_pool, "q_pool")
    if p.shape[1] != q.shape[1]:
        raise DegeneratePoolError("pools have different dimensions")
    if p.shape[1] != cfg.d:
        raise ConfigError("divergence.d", f"configured d={cfg.d} but pools have d={p.shape[1]}")
    n0, n1 = p.shape[0], q.shape[0]
    if n0 <= cfg.k or n1 <= cfg.k:
        raise DegeneratePoolError(
            f"pool sizes must exceed k={cfg.k}, got n0={n0}, n1={n1}"
        )

    pooled = np.concatenate([p, q], axis=0)
    jittered = _apply_jitter(pooled, cfg.jitter_scale, jitter_seed)
    pj, qj = jittered[:n0], jittered[n0:]

    if cfg.d == 1:
        ps = np.sort(pj[:, 0])
        qs = np.sort(qj[:, 0])
        pos = np.searchsorted(qs, ps, side="left")
        return _renyi_from_split(ps, qs, pos, cfg.k, cfg.alpha, d=1)

    rho = knn_distance(pj, pj, cfg.k, exclude_self=True)
    nu = knn_distance(pj, qj, cfg.k, exclude_self=False)
    return _combine_terms(rho, nu, n0, n1, cfg.k, cfg.alpha, cfg.d)


def _run_indexed(b_replicates: int, workers: int, fn) -> np.ndarray:
    """Run fn(b) for b in range(B) with pre-assigned streams; schedule-free."""
    out = np.empty(b_replicates, dtype=np.float64)
    if workers <= 1:
        for i in range(b_replicates):
            out[i] = fn(i)
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for i, value in enumerate(pool.map(fn, range(b_replicates))):
            out[i] = value
    return out


def permutation_test(
    p_pool,
    q_pool,
    b_replicates: int = 1000,
    config: DivergenceConfig | None = None,
    seed: int = 0,
    workers: int = 1,
) -> float:
    """Label-permutation p-value for the observed divergence.

    Pools are concatenated and jittered once; each replicate reassigns labels
    (sizes preserved) from its own pre-seeded stream and recomputes the
    statistic. p = (1 + #{replicate >= observed}) / (B + 1).
    """
    cfg = config or DivergenceConfig()
    cfg.validate()
    if b_replicates < 1:
        raise ConfigError("b_replicates", "must be >= 1")
    p = _as_points(p_pool, "p_pool")
    q = _as_points(q_pool, "q_pool")
    n0, n1 = p.shape[0], q.shape[0]
    if min(n0, n1) <= cfg.k:
        raise DegeneratePoolError(f"pool sizes must exceed k={cfg.k}")

    children = np.random.SeedSequence(seed).spawn(b_replicates + 1)
    pooled = np.concatenate([p, q], axis=0)
    jittered = _apply_jitter(
        pooled, cfg.jitter_scale, int(children[0].generate_state(1)[0])
    )

    if cfg.d == 1:
        values = jittered[:, 0]
        order = np.argsort(values, kind="stable")
        v_sorted = values[order]
        labels = np.zeros(n0 + n1, dtype=bool)
        labels[:n0] = True
        labels_sorted = labels[order]

        def stat(lab: np.ndarray) -> float:
            p_vals = v_sorted[lab]
            q_vals = v_sorted[~lab]
            pos = np.cumsum(~lab)[lab]
            return _renyi_from_split(p_vals, q_vals, pos, cfg.k, cfg.alpha, d=1)

        observed = stat(labels_sorted)

        def replicate(b: int) -> float:
            rng = np.random.Generator(np.random.PCG64(children[b + 1]))
            return stat(rng.permutation(labels_sorted))

    else:

        def stat_points(pp: np.ndarray, qq: np.ndarray) -> float:
            rho = knn_distance(pp, pp, cfg.k, exclude_self=True)
            nu = knn_distance(pp, qq, cfg.k, exclude_self=False)
            return _combine_terms(rho, nu, pp.shape[0], qq.shape[0], cfg.k, cfg.alpha, cfg.d)

        observed = stat_points(jittered[:n0], jittered[n0:])

        def replicate(b: int) -> float:
            rng = np.random.Generator(np.random.PCG64(children[b + 1]))
            perm = rng.permutation(n0 + n1)
            return stat_points(jittered[perm[:n0]], jittered[perm[n0:]])

    reps = _run_indexed(b_replicates, workers, replicate)
    count = int(np.sum(reps >= observed))
    return (1 + count) / (b_replicates + 1)


def moon_sizes(n0: int, n1: int, gamma: float) -> tuple[int, int, int]:
    """Reduced resample sizes: N* = floor((n0+n1)^gamma + 1/2), split by the
    original pool ratio, remainder to the second pool."""
    if not (0 < gamma <= 1):
        raise ConfigError("gamma", "must lie in (0, 1]")
    n_star = math.floor((n0 + n1) ** gamma + 0.5)
    ratio = n0 / n1
    n0_star = math.floor(ratio / (1 + ratio) * n_star + 0.5)
    return n_star, n0_star, n_star - n0_star


def moon_bootstrap(
    p_pool,
    q_pool,
    gamma: float = 0.8,
    b_replicates: int = 1000,
    config: DivergenceConfig | None = None,
    seed: int = 0,
    workers: int = 1,
) -> np.ndarray:
    """M-out-of-N bootstrap sample of the divergence estimator.

    Each replicate draws with replacement n0* points from p and n1* from q at
    the reduced sizes given by ``moon_sizes`` and re-estimates the divergence
    (with its own tie-break jitter, since resampling reintroduces duplicates).
    Returns all B replicate estimates.
    """
    cfg = config or DivergenceConfig()
    cfg.validate()
    if b_replicates < 1:
        raise ConfigError("b_replicates", "must be >= 1")
    p = _as_points(p_pool, "p_pool")
    q = _as_points(q_pool, "q_pool")
    n0, n1 = p.shape[0], q.shape[0]
    _, n0_star, n1_star = moon_sizes(n0, n1, gamma)
    if n0_star <= cfg.k or n1_star <= cfg.k:
        raise DegeneratePoolError(
            f"gamma too small for k: resample sizes ({n0_star}, {n1_star}) "
            f"must exceed k={cfg.k}"
        )

    children = np.random.SeedSequence(seed).spawn(b_replicates)

    def replicate(b: int) -> float:
        rng = np.random.Generator(np.random.PCG64(children[b]))
        boot_p = p[rng.integers(0, n0, size=n0_star)]
        boot_q = q[rng.integers(0, n1, size=n1_star)]
        return renyi_divergence(
            boot_p, boot_q, cfg, jitter_seed=int(rng.integers(0, 2**63))
        )

    return _run_indexed(b_replicates, workers, replicate)


def percentile_ci(samples, level: float = 0.95) -> tuple[float, float]:
    """Empirical percentile interval with linear interpolation."""
    values = as_values_1d(samples, "samples")
    if values.size == 0:
        raise DegeneratePoolError("cannot take percentiles of an empty sample")
    if not (0 < level < 1):
        raise ConfigError("ci_level", "must lie in (0, 1)")
    tail = 100.0 * (1.0 - level) / 2.0
    lo = float(np.percentile(values, tail))
    hi = float(np.percentile(values, 100.0 - tail))
    return lo, hi


def silverman_bandwidth(values: np.ndarray) -> float:
    """Robust Silverman rule: 0.9 * min(std, IQR/1.34) * n^(-1/5).

    Falls back to the plain std when the IQR collapses (heavily quantized
    data); raises when the sample has no spread at all.
    """
    n = values.size
    if n < 2:
        raise DegeneratePoolError("bandwidth needs at least 2 samples")
    sd = float(np.std(values, ddof=1))
    q75, q25 = np.percentile(values, [75.0, 25.0])
    iqr = float(q75 - q25)
    scale = min(sd, iqr / 1.34) if iqr > 0 else sd
    if scale <= 0:
        raise DegeneratePoolError("degenerate sample: zero spread")
    return 0.9 * scale * n ** (-0.2)


def kde(samples, grid_points) -> np.ndarray:
    """Gaussian kernel density estimate on ``grid_points``."""
    values = as_values_1d(samples, "samples")
    grid = as_values_1d(grid_points, "grid_points")
    h = silverman_bandwidth(values)
    norm = 1.0 / (values.size * h * math.sqrt(2.0 * math.pi))
    out = np.empty(grid.size, dtype=np.float64)
    chunk = max(1, int(2_000_000 // max(values.size, 1)))
    for start in range(0, grid.size, chunk):
        g = grid[start : start + chunk]
        z = (g[:, None] - values[None, :]) / h
        out[start : start + chunk] = norm * np.exp(-0.5 * z * z).sum(axis=1)
    return out


def subsample_pool(values, cap: int = 100_000, seed: int = 0) -> np.ndarray:
    """Seeded uniform subsample without replacement, capped at ``cap``."""
    arr = as_values_1d(values, "values")
    if arr.size <= cap:
        return arr
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = np.sort(rng.choice(arr.size, size=cap, replace=False))
    return arr[idx]


def delta_mu(p_pool, q_pool) -> tuple[float, float, float]:
    """Pool means and their difference (second minus first)."""
    p = as_values_1d(_pool_values(p_pool), "p_pool")
    q = as_values_1d(_pool_values(q_pool), "q_pool")
    if p.size == 0 or q.size == 0:
        raise DegeneratePoolError("delta_mu needs non-empty pools")
    mu_p = float(np.mean(p))
    mu_q = float(np.mean(q))
    return mu_p, mu_q, mu_q - mu_p


def divergence_report(
    p_pool,
    q_pool,
    config: DivergenceConfig | None = None,
    gamma: float = 0.8,
    b_replicates: int = 1000,
    ci_level: float = 0.95,
    seed: int = 0,
    workers: int = 1,
) -> DivergenceReport:
    """Full pipeline: point estimate, permutation p-value, MooN bootstrap CI."""
    cfg = config or DivergenceConfig()
    p = _as_points(p_pool, "p_pool")
    q = _as_points(q_pool, "q_pool")
    estimate = renyi_divergence(p, q, cfg)
    p_value = permutation_test(
        p, q, b_replicates, cfg, seed=derive_seed(seed, "permutation"), workers=workers
    )
    boots = moon_bootstrap(
        p, q, gamma, b_replicates, cfg, seed=derive_seed(seed, "bootstrap"), workers=workers
    )
    lo, hi = percentile_ci(boots, ci_level)
    return DivergenceReport(
        estimate=estimate,
        p_value=p_value,
        b_replicates=b_replicates,
        bootstrap_samples=boots,
        ci_level=ci_level,
        ci_lo=lo,
        ci_hi=hi,
        gamma=gamma,
        k=cfg.k,
        alpha=cfg.alpha,
        jitter_scale=cfg.jitter_scale,
        n0=p.shape[0],
        n1=q.shape[0],
    )
