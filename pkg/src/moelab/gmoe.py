"""Gaussian mixture-of-experts regression with a distance-based (Laplace)
gate, synthetic data generation, and maximum likelihood via EM.

The conditional density of a response y given covariates x under a mixing
measure with atoms (beta_i, W_i, a_i, b_i, nu_i) is

    p(y | x) = sum_i softmax(beta_i - ||W_i - x||) * Normal(y; a_i.x + b_i, nu_i)

with a dense softmax over all components.  The gate bias of the last
component is anchored to 0 by convention (the softmax is invariant to a
common shift of the biases), which removes that degeneracy from estimation.

All component-wise and data-wise reductions sum in ascending sorted order,
so density values are bit-for-bit invariant to component relabeling and the
average log-likelihood is bit-for-bit invariant to dataset permutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

NU_FLOOR = 1e-8
RESP_COLLAPSE = 1e-12
_LOG_2PI = np.log(2.0 * np.pi)


def _canonical_sum(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum in ascending order: bit-exact under permutation of the inputs."""
    return np.sum(np.sort(v, axis=axis), axis=axis)


def _logsumexp_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1)
    return m + np.log(_canonical_sum(np.exp(s - m[:, None]), axis=1))


@dataclass
class MixingMeasure:
    """Atoms of the mixture: gate bias/center and expert slope/intercept/variance."""

    beta: np.ndarray  # (k,)
    W: np.ndarray  # (k, d)
    a: np.ndarray  # (k, d)
    b: np.ndarray  # (k,)
    nu: np.ndarray  # (k,)

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        self.nu = np.atleast_1d(np.asarray(self.nu, dtype=float))
        k = self.beta.shape[0]
        if k < 1:
            raise ValueError("need at least one component")
        if self.W.shape[0] != k or self.a.shape != self.W.shape:
            raise ValueError("inconsistent component count across parameter arrays")
        if self.b.shape != (k,) or self.nu.shape != (k,):
            raise ValueError("inconsistent component count across parameter arrays")
        for arr in (self.beta, self.W, self.a, self.b, self.nu):
            if not np.all(np.isfinite(arr)):
                raise ValueError("mixing measure parameters must be finite")
        if np.any(self.nu <= 0.0):
            raise ValueError("expert variances must be positive")

    @property
    def k(self) -> int:
        return self.beta.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def anchor(self) -> "MixingMeasure":
        """Shift all gate biases so the last one is exactly 0."""
        return MixingMeasure(beta=self.beta - self.beta[-1], W=self.W.copy(),
                             a=self.a.copy(), b=self.b.copy(), nu=self.nu.copy())

    def permuted(self, order) -> "MixingMeasure":
        order = np.asarray(order)
        return MixingMeasure(beta=self.beta[order], W=self.W[order],
                             a=self.a[order], b=self.b[order], nu=self.nu[order])

    def atom(self, i: int):
        """(beta, W, a, b, nu) of component i."""
        return (float(self.beta[i]), self.W[i].copy(), self.a[i].copy(),
                float(self.b[i]), float(self.nu[i]))


@dataclass
class RegressionDataset:
    X: np.ndarray  # (n, d)
    Y: np.ndarray  # (n,)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_1d(np.asarray(self.Y, dtype=float))
        if self.X.shape[0] != self.Y.shape[0] or self.X.shape[0] < 1:
            raise ValueError("X and Y must hold n >= 1 paired samples")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValueError("dataset must be finite")

    @property
    def n(self) -> int:
        return self.Y.shape[0]


def gate_log_probs(G: MixingMeasure, X: np.ndarray) -> np.ndarray:
    """Log gate weights, rows over samples: softmax(beta_i - ||W_i - x||)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    s = G.beta[None, :] - cdist(X, G.W)
    return s - _logsumexp_rows(s)[:, None]


def log_density(G: MixingMeasure, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Per-sample log conditional density, computed fully in log space."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_1d(np.asarray(Y, dtype=float))
    if X.shape[1] != G.d:
        raise ValueError(f"covariate dimension {X.shape[1]} != measure dimension {G.d}")
    logg = gate_log_probs(G, X)
    mu = X @ G.a.T + G.b[None, :]
    logf = -0.5 * (_LOG_2PI + np.log(G.nu))[None, :] - (Y[:, None] - mu) ** 2 / (2.0 * G.nu[None, :])
    return _logsumexp_rows(logg + logf)


def conditional_density(G: MixingMeasure, x: np.ndarray, y: float) -> float:
    """Mixture density of y given x (positive; may underflow far in the tails)."""
    return float(np.exp(log_density(G, np.atleast_2d(x), np.array([y]))[0]))


def log_likelihood(G: MixingMeasure, data: RegressionDataset) -> float:
    """Average log-likelihood (1/n) sum_t log p(Y_t | X_t)."""
    return float(_canonical_sum(log_density(G, data.X, data.Y)) / data.n)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_true_measure(d: int, seed) -> MixingMeasure:
    """Draw the 2-component ground-truth measure used by the rate studies.

    Gate parameters have per-coordinate variance 0.01/d, expert parameters
    1/d; the expert variance is the absolute value of a draw (resampled in
    the zero-probability event it lands exactly on 0).  Anchored.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = _rng(seed)
    k_star = 2
    sd_gate = np.sqrt(0.01 / d)
    sd_expert = np.sqrt(1.0 / d)
    W = rng.normal(0.0, sd_gate, size=(k_star, d))
    beta = rng.normal(0.0, sd_gate, size=k_star)
    a = rng.normal(0.0, sd_expert, size=(k_star, d))
    b = rng.normal(0.0, sd_expert, size=k_star)
    nu = np.abs(rng.normal(0.0, sd_expert, size=k_star))
    while np.any(nu == 0.0):
        zero = nu == 0.0
        nu[zero] = np.abs(rng.normal(0.0, sd_expert, size=int(zero.sum())))
    return MixingMeasure(beta=beta, W=W, a=a, b=b, nu=nu).anchor()


def sample_synthetic(G: MixingMeasure, n: int, seed) -> RegressionDataset:
    """X coordinate-wise Uniform[0,1]; Y from the gated mixture at X."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(seed)
    X = rng.random((n, G.d))
    probs = np.exp(gate_log_probs(G, X))
    u = rng.random(n)
    comp = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    comp = np.minimum(comp, G.k - 1)
    mu = np.einsum("nd,nd->n", X, G.a[comp]) + G.b[comp]
    Y = mu + rng.standard_normal(n) * np.sqrt(G.nu[comp])
    return RegressionDataset(X=X, Y=Y)


def init_near_truth(G_star: MixingMeasure, k: int, perturb_std: float, seed,
                    return_cells: bool = False):
    """Initialize k fitted components around the true atoms.

    The indices [k] are split into k_star nonempty cells at random; each
    fitted component starts at its cell's true atom plus isotropic Gaussian
    noise.  Variances are floored positive and the gate biases re-anchored.
    """
    k_star = G_star.k
    if k < k_star:
        raise ValueError(f"k={k} must be >= the true component count {k_star}")
    rng = _rng(seed)
    # Random surjection [k] -> [k_star]: a permutation seeds one element per
    # cell, the remainder land uniformly.
    perm = rng.permutation(k)
    assign = np.empty(k, dtype=int)
    assign[perm[:k_star]] = np.arange(k_star)
    assign[perm[k_star:]] = rng.integers(0, k_star, size=k - k_star)

    d = G_star.d
    beta = G_star.beta[assign] + rng.normal(0.0, perturb_std, size=k)
    W = G_star.W[assign] + rng.normal(0.0, perturb_std, size=(k, d))
    a = G_star.a[assign] + rng.normal(0.0, perturb_std, size=(k, d))
    b = G_star.b[assign] + rng.normal(0.0, perturb_std, size=k)
    nu = np.maximum(G_star.nu[assign] + rng.normal(0.0, perturb_std, size=k), NU_FLOOR)
    measure = MixingMeasure(beta=beta, W=W, a=a, b=b, nu=nu).anchor()
    if return_cells:
        return measure, assign
    return measure


@dataclass
class EMTrace:
    """Average log-likelihood per iteration (index 0 = at the initializer)."""

    loglik: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    frozen: list = field(default_factory=list)  # (iteration, component) events


def em_fit(data: RegressionDataset, k: int, init: MixingMeasure,
           epsilon: float = 1e-6, max_iter: int = 2000,
           gate_passes: int = 5, armijo_c: float = 1e-4):
    """EM with closed-form expert updates and gradient-ascent gate updates.

    E-step: responsibilities under the dense gated mixture.  M-step: exact
    weighted least squares for each expert's (a, b) and weighted residual
    variance for nu, then `gate_passes` rounds of coordinate gradient ascent
    with Armijo backtracking on the gate centers and the un-anchored biases.
    Every step increases the EM surrogate, so the average log-likelihood
    trace is non-decreasing (up to float noise).
    """
    if init.k != k:
        raise ValueError(f"initializer has {init.k} components, expected {k}")
    if init.d != data.X.shape[1]:
        raise ValueError("initializer dimension does not match the data")

    X, Y = data.X, data.Y
    n, d = X.shape
    beta = init.beta.copy() - init.beta[-1]
    W = init.W.copy()
    a = init.a.copy()
    b = init.b.copy()
    nu = np.maximum(init.nu.copy(), NU_FLOOR)

    design = np.hstack([X, np.ones((n, 1))])

    def e_step():
        s = beta[None, :] - cdist(X, W)
        logg = s - _logsumexp_rows(s)[:, None]
        mu = X @ a.T + b[None, :]
        logf = -0.5 * (_LOG_2PI + np.log(nu))[None, :] - (Y[:, None] - mu) ** 2 / (2.0 * nu[None, :])
        joint = logg + logf
        logp = _logsumexp_rows(joint)
        resp = np.exp(joint - logp[:, None])
        avg_ll = float(_canonical_sum(logp) / n)
        return avg_ll, resp

    trace = EMTrace()
    avg_ll, resp = e_step()
    trace.loglik.append(avg_ll)

    # Warm-started backtracking step sizes, one per coordinate block.
    step_W = np.ones(k)
    step_beta = np.ones(k)

    for it in range(1, max_iter + 1):
        # Expert M-step: exact weighted least squares per component.
        for i in range(k):
            wsum = resp[:, i].sum()
            if wsum < RESP_COLLAPSE:
                trace.frozen.append((it, i))
                continue
            sw = np.sqrt(resp[:, i])
            theta, *_ = np.linalg.lstsq(design * sw[:, None], Y * sw, rcond=None)
            a[i] = theta[:d]
            b[i] = theta[d]
            resid = Y - (X @ a[i] + b[i])
            nu[i] = max(float(resp[:, i] @ resid**2 / wsum), NU_FLOOR)

        # Gate M-step: ascend Q(W, beta) = sum_t sum_i r_ti log g_i(x_t).
        s = beta[None, :] - cdist(X, W)

        def q_gate(s_matrix):
            return float((resp * s_matrix).sum() - _logsumexp_rows(s_matrix).sum())

        q_cur = q_gate(s)
        for _ in range(gate_passes):
            for i in range(k):
                if resp[:, i].sum() < RESP_COLLAPSE:
                    continue
                g = np.exp(s - _logsumexp_rows(s)[:, None])
                slack = resp[:, i] - g[:, i]
                diff = X - W[i]
                dist = np.linalg.norm(diff, axis=1)
                safe = dist > 0.0
                grad_W = (slack[safe, None] * diff[safe] / dist[safe, None]).sum(axis=0)
                q_cur, accepted = _backtrack(
                    q_gate, s, q_cur, X, W, beta, i, "W", grad_W, step_W, armijo_c)
                if i < k - 1:  # last bias stays anchored at 0
                    g = np.exp(s - _logsumexp_rows(s)[:, None])
                    grad_b = float((resp[:, i] - g[:, i]).sum())
                    q_cur, accepted = _backtrack(
                        q_gate, s, q_cur, X, W, beta, i, "beta",
                        np.array([grad_b]), step_beta, armijo_c)

        avg_new, resp = e_step()
        trace.loglik.append(avg_new)
        trace.n_iter = it
        if abs(avg_new - avg_ll) < epsilon:
            trace.converged = True
            avg_ll = avg_new
            break
        avg_ll = avg_new

    fitted = MixingMeasure(beta=beta, W=W, a=a, b=b, nu=nu).anchor()
    return fitted, trace


def _backtrack(q_gate, s, q_cur, X, W, beta, i, which, grad, steps, armijo_c,
               max_halvings=30):
    """One Armijo-backtracked ascent step on a single coordinate block.

    Mutates W or beta (and the score matrix column) in place on acceptance;
    `steps[i]` is warm-started (doubled on success, halved while rejected).
    """
    gnorm2 = float(grad @ grad)
    if gnorm2 == 0.0:
        return q_cur, False
    step = steps[i]
    for _ in range(max_halvings):
        if which == "W":
            cand = W[i] + step * grad
            s_col = beta[i] - np.linalg.norm(X - cand, axis=1)
        else:
            cand = beta[i] + step * grad[0]
            s_col = cand - np.linalg.norm(X - W[i], axis=1)
        old_col = s[:, i].copy()
        s[:, i] = s_col
        q_new = q_gate(s)
        if q_new >= q_cur + armijo_c * step * gnorm2:
            if which == "W":
                W[i] = cand
            else:
                beta[i] = cand
            steps[i] = min(step * 2.0, 1e6)
            return q_new, True
        s[:, i] = old_col
        step *= 0.5
    steps[i] = max(step, 1e-12)
    return q_cur, False


# ---------------------------------------------------------------------------
# Plain-text serialization: one key per line, shortest round-trip decimals.

def dumps_measure(G: MixingMeasure) -> str:
    lines = [f"k = {G.k}", f"d = {G.d}"]
    for i in range(G.k):
        lines.append(f"beta.{i} = {G.beta[i]!r}")
        lines.append(f"W.{i} = " + ", ".join(repr(v) for v in G.W[i]))
        lines.append(f"a.{i} = " + ", ".join(repr(v) for v in G.a[i]))
        lines.append(f"b.{i} = {G.b[i]!r}")
        lines.append(f"nu.{i} = {G.nu[i]!r}")
    return "\n".join(lines) + "\n"


def loads_measure(text: str) -> MixingMeasure:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    try:
        k = int(entries.pop("k"))
        d = int(entries.pop("d"))
    except KeyError as exc:
        raise ValueError(f"missing required key {exc}") from None
    beta = np.empty(k)
    W = np.empty((k, d))
    a = np.empty((k, d))
    b = np.empty(k)
    nu = np.empty(k)
    for i in range(k):
        try:
            beta[i] = float(entries.pop(f"beta.{i}"))
            W[i] = _parse_vector(entries.pop(f"W.{i}"), d)
            a[i] = _parse_vector(entries.pop(f"a.{i}"), d)
            b[i] = float(entries.pop(f"b.{i}"))
            nu[i] = float(entries.pop(f"nu.{i}"))
        except KeyError as exc:
            raise ValueError(f"missing component entry {exc}") from None
    if entries:
        raise ValueError(f"unexpected keys: {sorted(entries)}")
    return MixingMeasure(beta=beta, W=W, a=a, b=b, nu=nu)


def _parse_vector(text: str, d: int) -> np.ndarray:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != d:
        raise ValueError(f"expected {d} coordinates, got {len(parts)}")
    return np.array(parts)


def save_measure(G: MixingMeasure, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_measure(G))


def load_measure(path) -> MixingMeasure:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_measure(fh.read())
