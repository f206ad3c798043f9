"""Encoding of irregularly sampled series onto regular time bins.

Two routes are provided and can be blended by a learned gate:
  * an attention discretizer: learned time embeddings act as queries (bin
    times) and keys (observation times), observations as values;
  * forward-fill imputation with a global-mean fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


@dataclass
class IrregularSeries:
    """Per-channel (values, times) pairs of varying length, times in hours."""

    channels: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        cleaned = []
        for k, (values, times) in enumerate(self.channels):
            values = np.asarray(values, dtype=float)
            times = np.asarray(times, dtype=float)
            if values.shape != times.shape or values.ndim != 1:
                raise ValueError(f"channel {k}: values/times must be equal-length vectors")
            if values.size and not (np.all(np.isfinite(values)) and np.all(np.isfinite(times))):
                raise ValueError(f"channel {k}: non-finite entries")
            if np.any(np.diff(times) < 0):
                raise ValueError(f"channel {k}: observation times must be nondecreasing")
            if np.any(times < 0):
                raise ValueError(f"channel {k}: negative observation time")
            cleaned.append((values, times))
        self.channels = cleaned

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @classmethod
    def random(cls, d_m, rng, t_max=48.0, max_len=12, allow_empty=False):
        channels = []
        low = 0 if allow_empty else 1
        for _ in range(d_m):
            l_k = int(rng.integers(low, max_len + 1))
            times = np.sort(rng.uniform(0.0, t_max, size=l_k))
            values = rng.normal(0.0, 1.0, size=l_k)
            channels.append((values, times))
        return cls(channels=channels)


@dataclass
class TimeEmbedHead:
    """One embedding function with its attention projections.

    Embedding of a time t: first component w[0] * t, remaining components
    sin(w[i] * t + phase[i-1]).
    """

    w: np.ndarray  # (d_h,)
    phase: np.ndarray  # (d_h - 1,)
    Q: np.ndarray  # (d_h, p)
    K: np.ndarray  # (d_h, p)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.phase = np.asarray(self.phase, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        d_h = self.w.shape[0]
        if d_h < 2:
            raise ValueError("time embedding needs d_h >= 2 (one linear + sinusoidal rest)")
        if self.phase.shape != (d_h - 1,):
            raise ValueError("phase must have d_h - 1 entries")
        if self.Q.shape[0] != d_h or self.Q.shape != self.K.shape:
            raise ValueError("Q/K must be (d_h, p) matrices")
        for arr in (self.w, self.phase, self.Q, self.K):
            if not np.all(np.isfinite(arr)):
                raise ValueError("time embedding parameters must be finite")

    @property
    def d_h(self) -> int:
        return self.w.shape[0]


@dataclass
class TimeEmbedParams:
    """H independent embedding heads plus the output projection."""

    heads: list[TimeEmbedHead]
    P: np.ndarray  # (H * d_m, d_e)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        if not self.heads:
            raise ValueError("need at least one embedding head")
        if not np.all(np.isfinite(self.P)):
            raise ValueError("projection must be finite")

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @classmethod
    def random(cls, n_heads, d_h, d_m, d_e, rng, p=None, scale=0.5):
        p = d_h if p is None else p
        heads = [
            TimeEmbedHead(
                w=rng.normal(0.0, scale, size=d_h),
                phase=rng.uniform(0.0, 2.0 * np.pi, size=d_h - 1),
                Q=rng.normal(0.0, scale, size=(d_h, p)),
                K=rng.normal(0.0, scale, size=(d_h, p)),
            )
            for _ in range(n_heads)
        ]
        P = rng.normal(0.0, scale, size=(n_heads * d_m, d_e))
        return cls(heads=heads, P=P)


@dataclass
class DiscretizedEmbedding:
    Z: np.ndarray  # (gamma, d_e)
    bin_times: np.ndarray  # (gamma,)

    def __post_init__(self):
        if self.Z.shape[0] != self.bin_times.shape[0] or self.Z.shape[0] < 1:
            raise ValueError("Z and bin_times must agree on gamma >= 1")
        if not np.all(np.isfinite(self.Z)):
            raise ValueError("embedding must be finite")


def default_bins(gamma: int, t_max: float = 48.0) -> np.ndarray:
    """gamma equally spaced query times on [0, t_max]."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    return np.linspace(0.0, t_max, gamma)


def time_embed(tau: float, head: TimeEmbedHead) -> np.ndarray:
    """Embed a single time point: [w0*tau, sin(w_i*tau + phase_i)...]."""
    if not np.isfinite(tau):
        raise ValueError("time must be finite")
    return embed_times(np.array([tau]), head)[0]


def embed_times(times: np.ndarray, head: TimeEmbedHead) -> np.ndarray:
    """Embed a vector of T times into a (T, d_h) matrix."""
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size, head.d_h))
    out[:, 0] = head.w[0] * times
    out[:, 1:] = np.sin(times[:, None] * head.w[1:] + head.phase)
    return out


def _row_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mtand_attention(series: IrregularSeries, query_times: np.ndarray,
                    params: TimeEmbedParams) -> list[list[np.ndarray]]:
    """Attention matrices per head and channel ((gamma, l_k); None if empty).

    Row r holds the weights with which bin r attends over the channel's
    observations; each row sums to 1.
    """
    query_times = np.asarray(query_times, dtype=float)
    if query_times.size < 1:
        raise ValueError("need at least one query bin")
    result = []
    for head in params.heads:
        Eq = embed_times(query_times, head)
        per_channel = []
        for values, times in series.channels:
            if values.size == 0:
                per_channel.append(None)
                continue
            Ek = embed_times(times, head)
            scores = Eq @ (head.Q @ head.K.T) @ Ek.T / np.sqrt(values.size)
            per_channel.append(_row_softmax(scores))
        result.append(per_channel)
    return result


def mtand_interpolate(series: IrregularSeries, query_times: np.ndarray,
                      params: TimeEmbedParams,
                      global_means: np.ndarray = None) -> list[np.ndarray]:
    """Per-head interpolation matrices (gamma, d_m).

    Channels with no observations fall back to their global mean (the same
    rule the imputation route uses); this requires `global_means`.
    """
    attn = mtand_attention(series, query_times, params)
    gamma = np.asarray(query_times).size
    mats = []
    for per_channel in attn:
        X_hat = np.empty((gamma, series.n_channels))
        for k, A in enumerate(per_channel):
            if A is None:
                if global_means is None:
                    raise ValueError(
                        f"channel {k} is empty; mtand needs global_means as fallback"
                    )
                X_hat[:, k] = global_means[k]
            else:
                X_hat[:, k] = A @ series.channels[k][0]
        mats.append(X_hat)
    return mats


def mtand_discretize(series: IrregularSeries, query_times: np.ndarray,
                     params: TimeEmbedParams,
                     global_means: np.ndarray = None) -> DiscretizedEmbedding:
    """Interpolate per head, concatenate across heads, project to d_e."""
    mats = mtand_interpolate(series, query_times, params, global_means)
    I = np.hstack(mats)  # (gamma, H * d_m)
    if params.P.shape[0] != I.shape[1]:
        raise ValueError(
            f"projection expects {params.P.shape[0]} features, got {I.shape[1]}"
        )
    return DiscretizedEmbedding(Z=I @ params.P, bin_times=np.asarray(query_times, dtype=float))


def utde_impute(series: IrregularSeries, bins: np.ndarray,
                global_means: np.ndarray) -> np.ndarray:
    """Forward-fill each channel onto the bins; global mean before any data.

    Entry (i, k) is the latest observed value of channel k at time <= bins[i],
    or global_means[k] when no such observation exists.
    """
    bins = np.asarray(bins, dtype=float)
    if np.any(np.diff(bins) < 0):
        raise ValueError("bins must be sorted ascending")
    out = np.empty((bins.size, series.n_channels))
    for k, (values, times) in enumerate(series.channels):
        if values.size == 0:
            out[:, k] = global_means[k]
            continue
        # Index of the latest observation at time <= bin; -1 means none yet.
        idx = np.searchsorted(times, bins, side="right") - 1
        out[:, k] = np.where(idx >= 0, values[np.clip(idx, 0, None)], global_means[k])
    return out


@dataclass
class CombineGate:
    """Single affine layer + sigmoid on the feature-wise concatenation."""

    A: np.ndarray  # (d_h, 2 * d_h)
    b: np.ndarray  # (d_h,)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        d_h = self.b.shape[0]
        if self.A.shape != (d_h, 2 * d_h):
            raise ValueError("gate weight must be (d_h, 2*d_h)")

    @classmethod
    def random(cls, d_h, rng, scale=0.5):
        return cls(A=rng.normal(0.0, scale, size=(d_h, 2 * d_h)),
                   b=rng.normal(0.0, scale, size=d_h))


def utde_combine(E_imp: np.ndarray, E_mtand: np.ndarray,
                 gate: CombineGate) -> np.ndarray:
    """Convex per-entry blend g * E_imp + (1 - g) * E_mtand, g = sigmoid(MLP)."""
    if E_imp.shape != E_mtand.shape:
        raise ValueError(f"shape mismatch: {E_imp.shape} vs {E_mtand.shape}")
    if gate.b.shape[0] != E_imp.shape[1]:
        raise ValueError("gate width does not match embedding width")
    g = expit(np.hstack([E_imp, E_mtand]) @ gate.A.T + gate.b)
    return g * E_imp + (1.0 - g) * E_mtand


def mtand_gradients(series: IrregularSeries, query_times: np.ndarray,
                    params: TimeEmbedParams, upstream: np.ndarray,
                    global_means: np.ndarray = None):
    """Gradients of L = <upstream, Z> for all learnable attention parameters.

    Returns (Z, grads) where grads has key "P" and per-head dicts with keys
    w, phase, Q, K.  Empty channels contribute only through P (their column
    is a constant fallback).
    """
    query_times = np.asarray(query_times, dtype=float)
    gamma = query_times.size
    d_m = series.n_channels
    mats = mtand_interpolate(series, query_times, params, global_means)
    I = np.hstack(mats)
    Z = I @ params.P
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != Z.shape:
        raise ValueError("upstream gradient shape mismatch")

    dI = upstream @ params.P.T
    grads = {
        "P": I.T @ upstream,
        "heads": [],
    }

    for h, head in enumerate(params.heads):
        Eq = embed_times(query_times, head)
        B = head.Q @ head.K.T
        dw = np.zeros_like(head.w)
        dphase = np.zeros_like(head.phase)
        dB = np.zeros_like(B)
        dEq = np.zeros_like(Eq)
        for k, (values, times) in enumerate(series.channels):
            if values.size == 0:
                continue
            Ek = embed_times(times, head)
            scale = 1.0 / np.sqrt(values.size)
            scores = Eq @ B @ Ek.T * scale
            A = _row_softmax(scores)
            dcol = dI[:, h * d_m + k]
            dA = np.outer(dcol, values)
            # Row-wise softmax backward.
            dS = A * (dA - (dA * A).sum(axis=1, keepdims=True))
            C = dS * scale
            dEq += C @ Ek @ B.T
            dEk = C.T @ Eq @ B
            dB += Eq.T @ C @ Ek
            _accumulate_embed_grads(dEk, times, head, dw, dphase)
        _accumulate_embed_grads(dEq, query_times, head, dw, dphase)
        grads["heads"].append({
            "w": dw,
            "phase": dphase,
            "Q": dB @ head.K,
            "K": dB.T @ head.Q,
        })
    return Z, grads


def _accumulate_embed_grads(dE, times, head, dw, dphase):
    # Embedding is [w0*t, sin(w_i*t + phase_{i-1})]; chain through cos.
    dw[0] += dE[:, 0] @ times
    arg = times[:, None] * head.w[1:] + head.phase
    c = np.cos(arg) * dE[:, 1:]
    dw[1:] += times @ c
    dphase += c.sum(axis=0)


def load_series(path, d_m: int = None) -> IrregularSeries:
    """Read the line format "channel_id,time,value"; channels sorted by time."""
    buckets: dict[int, list[tuple[float, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'channel_id,time,value'")
            try:
                k = int(parts[0])
                t = float(parts[1])
                v = float(parts[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if k < 0:
                raise ValueError(f"{path}:{lineno}: negative channel id")
            buckets.setdefault(k, []).append((t, v))
    n = max(buckets) + 1 if buckets else 0
    if d_m is None:
        d_m = n
    elif n > d_m:
        raise ValueError(f"file references channel {n - 1} but d_m={d_m}")
    channels = []
    for k in range(d_m):
        obs = sorted(buckets.get(k, []), key=lambda tv: tv[0])
        times = np.array([t for t, _ in obs])
        values = np.array([v for _, v in obs])
        channels.append((values, times))
    return IrregularSeries(channels=channels)


def save_series(series: IrregularSeries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, (values, times) in enumerate(series.channels):
            for t, v in zip(times, values):
                fh.write(f"{k},{t!r},{v!r}\n")
