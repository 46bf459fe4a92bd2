"""von Mises-Fisher numerics on the unit hypersphere.

Log-domain Bessel and normalization constants, densities and mixtures, the
moment generating function, streaming per-class parameter estimation, and a
seeded rejection sampler (Wood's algorithm). All functions are pure; the
sampler takes its randomness as an explicit seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "KAPPA_MAX",
    "VmfParams",
    "VmfMixture",
    "log_sum_exp",
    "log_bessel_i",
    "log_norm_const",
    "bessel_ratio",
    "vmf_log_pdf",
    "mixture_log_pdf",
    "vmf_mgf_log",
    "estimate_class_stats",
    "sample_vmf",
]

# Concentration cap. Keeps the estimator away from the degenerate point-mass
# limit and the Bessel evaluation inside its validated range.
KAPPA_MAX = 1e4

_MU_NORM_TOL = 1e-9
_UNIT_INPUT_TOL = 1e-6


@dataclass
class VmfParams:
    """Mean direction, concentration and ambient dimension of one component."""

    mu: np.ndarray
    kappa: float
    dim: int

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.kappa = float(self.kappa)
        self.dim = int(self.dim)
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.mu.shape != (self.dim,):
            raise ValueError(f"mu has shape {self.mu.shape}, expected ({self.dim},)")
        if not math.isfinite(self.kappa) or self.kappa < 0.0:
            raise ValueError(f"kappa must be finite and non-negative, got {self.kappa}")
        norm = float(np.linalg.norm(self.mu))
        if abs(norm - 1.0) > _MU_NORM_TOL:
            raise ValueError(f"mu must be unit norm, got ||mu|| = {norm!r}")


@dataclass
class VmfMixture:
    """A finite mixture of same-dimension vMF components with strict priors."""

    classes: list
    priors: np.ndarray

    def __post_init__(self) -> None:
        self.classes = list(self.classes)
        self.priors = np.asarray(self.priors, dtype=np.float64)
        if not self.classes:
            raise ValueError("mixture needs at least one component")
        if any(not isinstance(c, VmfParams) for c in self.classes):
            raise ValueError("mixture components must be VmfParams")
        dims = {c.dim for c in self.classes}
        if len(dims) != 1:
            raise ValueError(f"components disagree on dimension: {sorted(dims)}")
        if self.priors.shape != (len(self.classes),):
            raise ValueError("priors length must match number of components")
        if np.any(self.priors <= 0.0):
            raise ValueError("priors must be strictly positive")
        if abs(float(self.priors.sum()) - 1.0) > 1e-9:
            raise ValueError(f"priors must sum to 1, got {float(self.priors.sum())!r}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return self.classes[0].dim

    @property
    def mus(self) -> np.ndarray:
        """Component directions stacked as a (K, dim) matrix."""
        return np.stack([c.mu for c in self.classes])

    @property
    def kappas(self) -> np.ndarray:
        return np.array([c.kappa for c in self.classes])


def log_sum_exp(values) -> float:
    """Numerically stable log(sum(exp(values))) for a non-empty finite vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("log_sum_exp expects a non-empty 1-D array")
    if not np.all(np.isfinite(v)):
        raise ValueError("log_sum_exp expects finite inputs")
    m = float(v.max())
    return m + math.log(float(np.exp(v - m).sum()))


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    # internal variant: tolerates -inf entries (dropped-out mixture lanes)
    m = np.max(a, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, -1) + np.log(np.sum(np.exp(a - m), axis=-1))


def _log_bessel_series_plain(nu: float, x: np.ndarray) -> np.ndarray:
    # Ascending series sum_m (x/2)^(2m+nu) / (m! Gamma(m+nu+1)). All terms are
    # positive, so direct summation of the ratio-normalized terms is stable;
    # the plain-float accumulator is safe for x <= 300 (no overflow).
    q = 0.25 * x * x
    term = np.ones_like(x)
    total = np.ones_like(x)
    m = 0
    while True:
        m += 1
        term = term * q / (m * (m + nu))
        total += term
        if m > 4 and np.all(term < 1e-18 * total):
            break
        if m > 10000:  # pragma: no cover - series converges long before this
            raise RuntimeError("Bessel series failed to converge")
    return nu * np.log(0.5 * x) - math.lgamma(nu + 1.0) + np.log(total)


def _log_bessel_series_log(nu: float, x: np.ndarray) -> np.ndarray:
    # Same series accumulated in log space for arguments large enough that the
    # normalized partial sums would overflow (only reachable for nu > ~12).
    log_half_x = np.log(0.5 * x)
    log_term = nu * log_half_x - math.lgamma(nu + 1.0)
    total = log_term.copy()
    m = 0
    while True:
        m += 1
        log_term = log_term + 2.0 * log_half_x - math.log(m) - math.log(m + nu)
        total = np.logaddexp(total, log_term)
        if m > 4 and np.all(log_term < total - 45.0):
            break
        if m > 500000:  # pragma: no cover
            raise RuntimeError("Bessel series failed to converge")
    return total


def _log_bessel_asymptotic(nu: float, x: np.ndarray) -> np.ndarray:
    # Large-argument expansion I_nu(x) ~ e^x / sqrt(2 pi x) * sum_k a_k(nu)/x^k.
    # Only used for x >= max(30, 2 nu^2), where the truncated tail is far below
    # 1e-12 relative.
    mu4 = 4.0 * nu * nu
    inv8x = 1.0 / (8.0 * x)
    term = np.ones_like(x)
    total = np.ones_like(x)
    for k in range(1, 40):
        term = term * ((2 * k - 1) ** 2 - mu4) * inv8x / k
        total += term
        if np.all(np.abs(term) <= 1e-17 * np.abs(total)):
            break
    return x - 0.5 * np.log(2.0 * math.pi * x) + np.log(total)


def log_bessel_i(nu: float, x):
    """log I_nu(x), the modified Bessel function of the first kind.

    ``nu`` is a scalar order >= 0; ``x`` may be a scalar or an ndarray.
    Evaluated by the ascending series for small and moderate arguments and by
    the large-argument asymptotic expansion beyond ``max(30, 2 nu^2)``; at
    x = 0 the limit is 0 for nu = 0 and -inf otherwise.
    """
    nu = float(nu)
    if not math.isfinite(nu) or nu < 0.0:
        raise ValueError(f"order must be finite and non-negative, got {nu}")
    xs = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(xs)) or np.any(xs < 0.0):
        raise ValueError("argument must be finite and non-negative")
    scalar = xs.ndim == 0
    flat = np.atleast_1d(xs).ravel()
    out = np.empty_like(flat)

    zero = flat == 0.0
    out[zero] = 0.0 if nu == 0.0 else -np.inf
    cut = max(30.0, 2.0 * nu * nu)
    small = ~zero & (flat < np.minimum(cut, 300.0))
    mid = ~zero & ~small & (flat < cut)
    large = ~zero & (flat >= cut)
    if small.any():
        out[small] = _log_bessel_series_plain(nu, flat[small])
    if mid.any():
        out[mid] = _log_bessel_series_log(nu, flat[mid])
    if large.any():
        out[large] = _log_bessel_asymptotic(nu, flat[large])
    if scalar:
        return float(out[0])
    return out.reshape(xs.shape)


def log_norm_const(dim: int, kappa):
    """log normalization constant of the vMF density in R^dim.

    At kappa = 0 this is minus the log surface area of the unit sphere, so the
    density degrades continuously to the uniform law. ``kappa`` may be a
    scalar or an ndarray.
    """
    dim = int(dim)
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    ks = np.asarray(kappa, dtype=np.float64)
    if np.any(~np.isfinite(ks)) or np.any(ks < 0.0):
        raise ValueError("kappa must be finite and non-negative")
    scalar = ks.ndim == 0
    flat = np.atleast_1d(ks).ravel()
    half = 0.5 * dim
    nu = half - 1.0
    uniform = math.lgamma(half) - math.log(2.0) - half * math.log(math.pi)
    out = np.full_like(flat, uniform)
    pos = flat > 0.0
    if pos.any():
        kp = flat[pos]
        out[pos] = nu * np.log(kp) - half * math.log(2.0 * math.pi) - log_bessel_i(nu, kp)
    if scalar:
        return float(out[0])
    return out.reshape(ks.shape)


def bessel_ratio(dim: int, kappa):
    """Mean resultant length A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa).

    Also minus the derivative of ``log_norm_const`` in kappa. A_d(0) = 0 and
    A_d is increasing toward 1 as kappa grows.
    """
    dim = int(dim)
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    ks = np.asarray(kappa, dtype=np.float64)
    scalar = ks.ndim == 0
    flat = np.atleast_1d(ks).ravel()
    out = np.zeros_like(flat)
    pos = flat > 0.0
    if pos.any():
        kp = flat[pos]
        out[pos] = np.exp(log_bessel_i(0.5 * dim, kp) - log_bessel_i(0.5 * dim - 1.0, kp))
    if scalar:
        return float(out[0])
    return out.reshape(ks.shape)


def _check_unit_rows(z: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(z, axis=-1)
    bad = np.abs(norms - 1.0) > _UNIT_INPUT_TOL
    if np.any(bad):
        worst = float(norms.ravel()[np.argmax(np.abs(norms - 1.0).ravel())])
        raise ValueError(f"{what} must be unit norm, worst ||.|| = {worst!r}")


def vmf_log_pdf(params: VmfParams, z) -> float:
    """Log density of a unit vector (or a batch of rows) under one component."""
    zs = np.asarray(z, dtype=np.float64)
    if zs.shape[-1] != params.dim:
        raise ValueError(f"feature dim {zs.shape[-1]} != component dim {params.dim}")
    _check_unit_rows(zs, "z")
    val = log_norm_const(params.dim, params.kappa) + params.kappa * (zs @ params.mu)
    if zs.ndim == 1:
        return float(val)
    return val


def mixture_log_pdf(mix: VmfMixture, z) -> float:
    """Log density under the prior-weighted mixture, for one vector or rows."""
    zs = np.asarray(z, dtype=np.float64)
    if zs.shape[-1] != mix.dim:
        raise ValueError(f"feature dim {zs.shape[-1]} != mixture dim {mix.dim}")
    _check_unit_rows(zs, "z")
    log_z = log_norm_const(mix.dim, mix.kappas)
    a = np.log(mix.priors) + log_z + (zs @ mix.mus.T) * mix.kappas
    val = _logsumexp_rows(a)
    if zs.ndim == 1:
        return float(val)
    return val


def vmf_mgf_log(params: VmfParams, t) -> float:
    """log E[exp(t . z)] for z drawn from the component.

    Closed form: the ratio of normalization constants at the original and the
    tilted concentration ||kappa mu + t||.
    """
    tv = np.asarray(t, dtype=np.float64)
    if tv.shape != (params.dim,):
        raise ValueError(f"t has shape {tv.shape}, expected ({params.dim},)")
    if not np.all(np.isfinite(tv)):
        raise ValueError("t must be finite")
    tilted = float(np.linalg.norm(params.kappa * params.mu + tv))
    return log_norm_const(params.dim, params.kappa) - log_norm_const(params.dim, tilted)


def _banerjee_kappa(r_bar: float, dim: int) -> float:
    # kappa ~= r (d - r^2) / (1 - r^2), clamped into [0, KAPPA_MAX]
    if r_bar >= 1.0 - 1e-12:
        return KAPPA_MAX
    kappa = r_bar * (dim - r_bar * r_bar) / (1.0 - r_bar * r_bar)
    return float(min(max(kappa, 0.0), KAPPA_MAX))


def estimate_class_stats(
    features,
    labels,
    previous: VmfMixture | None = None,
    momentum: float = 0.0,
    class_counts=None,
) -> VmfMixture:
    """Per-class mean directions and concentrations from unit features.

    Concentration comes from the mean resultant length r via the closed-form
    approximation kappa = r (d - r^2) / (1 - r^2), clamped to [0, KAPPA_MAX].
    With ``previous`` given, direction (renormalized) and concentration are
    blended as an exponential moving average with the given momentum, and
    classes absent from the batch keep their previous statistics. Priors are
    fixed from full training-set counts: pass ``class_counts`` on the first
    call; afterwards they are carried from ``previous``, never re-estimated
    from batch frequencies.
    """
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels)
    if feats.ndim != 2 or labs.shape != (feats.shape[0],):
        raise ValueError("features must be (n, d) with one label per row")
    if feats.shape[0] == 0:
        raise ValueError("need at least one sample")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    _check_unit_rows(feats, "features")
    dim = feats.shape[1]

    if previous is not None:
        if previous.dim != dim:
            raise ValueError("previous mixture dimension mismatch")
        n_classes = previous.n_classes
        priors = previous.priors
    else:
        if class_counts is None:
            raise ValueError("class_counts is required when no previous stats exist")
        counts = np.asarray(class_counts, dtype=np.float64)
        if counts.ndim != 1 or counts.size < 2 or np.any(counts <= 0):
            raise ValueError("class_counts must be positive with >= 2 classes")
        n_classes = counts.size
        priors = counts / counts.sum()

    if np.any(labs < 0) or np.any(labs >= n_classes):
        raise ValueError("labels out of range for the class count")

    components = []
    for y in range(n_classes):
        rows = feats[labs == y]
        if rows.shape[0] == 0:
            if previous is None:
                raise ValueError(f"class {y} has no samples and no previous stats")
            components.append(previous.classes[y])
            continue
        resultant = rows.sum(axis=0)
        r_norm = float(np.linalg.norm(resultant))
        r_bar = r_norm / rows.shape[0]
        if r_norm > 1e-12:
            mu_hat = resultant / r_norm
        elif previous is not None:
            mu_hat = previous.classes[y].mu
        else:
            # fully cancelled resultant: direction is unidentifiable, kappa is
            # 0 anyway so any fixed unit vector gives the same (uniform) law
            mu_hat = np.zeros(dim)
            mu_hat[0] = 1.0
        kappa_hat = _banerjee_kappa(r_bar, dim)
        if previous is not None and momentum > 0.0:
            prev = previous.classes[y]
            blend = momentum * prev.mu + (1.0 - momentum) * mu_hat
            b_norm = float(np.linalg.norm(blend))
            mu_new = blend / b_norm if b_norm > 1e-12 else mu_hat
            kappa_new = momentum * prev.kappa + (1.0 - momentum) * kappa_hat
        else:
            mu_new, kappa_new = mu_hat, kappa_hat
        components.append(VmfParams(mu=mu_new, kappa=kappa_new, dim=dim))
    return VmfMixture(classes=components, priors=priors)


def _orthonormal_to(mu: np.ndarray) -> np.ndarray:
    # deterministic unit vector orthogonal to mu (fallback for the rare case
    # of a Gaussian draw collapsing onto the mean direction)
    basis = np.zeros_like(mu)
    basis[int(np.argmin(np.abs(mu)))] = 1.0
    v = basis - (basis @ mu) * mu
    return v / np.linalg.norm(v)


def sample_vmf(params: VmfParams, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` unit vectors by Wood's rejection algorithm, bit-deterministic
    for a fixed seed.

    Tangent-normal decomposition: the component along mu comes from rejection
    sampling of the longitudinal marginal with Beta proposals, the orthogonal
    part is uniform on the subsphere. kappa = 0 degrades to the uniform law
    (every proposal is accepted).
    """
    n = int(n)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(int(seed))
    d, kappa, mu = params.dim, params.kappa, params.mu

    # stable form of (-2 kappa + sqrt(4 kappa^2 + (d-1)^2)) / (d - 1)
    b = (d - 1.0) / (math.sqrt(4.0 * kappa * kappa + (d - 1.0) ** 2) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (d - 1.0) * math.log1p(-x0 * x0)

    ws = np.empty(n)
    filled = 0
    while filled < n:
        m = n - filled
        z = rng.beta(0.5 * (d - 1.0), 0.5 * (d - 1.0), size=m)
        u = rng.random(m)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        with np.errstate(divide="ignore"):
            accept = kappa * w + (d - 1.0) * np.log1p(-x0 * w) - c >= np.log(u)
        got = int(accept.sum())
        ws[filled : filled + got] = w[accept]
        filled += got

    v = rng.standard_normal((n, d))
    v -= np.outer(v @ mu, mu)
    norms = np.linalg.norm(v, axis=1)
    low = norms < 1e-12
    if low.any():
        v[low] = _orthonormal_to(mu)
        norms[low] = 1.0
    v /= norms[:, None]
    out = ws[:, None] * mu + np.sqrt(np.clip(1.0 - ws * ws, 0.0, None))[:, None] * v
    out /= np.linalg.norm(out, axis=1)[:, None]
    return out
