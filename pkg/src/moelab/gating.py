"""Sparse Top-K gating over a pool of experts.

Three score families are supported: dot-product ("softmax"), negative
Euclidean distance ("laplace"), and negative half squared distance
("gaussian").  The K highest-scoring experts are selected (ties broken by
lowest index) and their scores are renormalized with a max-subtracted
softmax; all other experts get weight exactly zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

SOFTMAX = "softmax"
LAPLACE = "laplace"
GAUSSIAN = "gaussian"
GATE_KINDS = (SOFTMAX, LAPLACE, GAUSSIAN)


class TieBoundaryWarning(UserWarning):
    """Raised when the Top-K cut falls on an exact score tie or a distance
    score is evaluated at a non-differentiable collision point.  The result
    is still well defined (lowest index wins, zero subgradient), but
    derivative checks near the point are unreliable."""


@dataclass
class GateParams:
    """Gating network parameters: one embedding column per expert."""

    W: np.ndarray  # (D, S); column s is the embedding of expert s
    kind: str
    K: int

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim != 2:
            raise ValueError(f"W must be a D x S matrix, got shape {self.W.shape}")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("gate parameters must be finite")
        if self.kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}; expected one of {GATE_KINDS}")
        if not 1 <= self.K <= self.W.shape[1]:
            raise ValueError(f"K must satisfy 1 <= K <= S, got K={self.K}, S={self.W.shape[1]}")

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def n_experts(self) -> int:
        return self.W.shape[1]


@dataclass
class SparseGateWeights:
    """Nonnegative weights over S experts with exactly K nonzeros summing to 1."""

    weights: np.ndarray  # (S,)
    selected: np.ndarray = field(repr=False)  # (K,) sorted expert indices

    def validate(self, tol: float = 1e-12) -> None:
        w = self.weights
        sel = set(self.selected.tolist())
        nz = set(np.nonzero(w)[0].tolist())
        if not nz <= sel:
            raise AssertionError("nonzero weight outside the selected set")
        if abs(w.sum() - 1.0) > tol:
            raise AssertionError(f"weights sum to {w.sum()!r}, not 1")
        if np.any(w < 0.0) or np.any(w > 1.0):
            raise AssertionError("weights outside [0, 1]")


def gate_scores(x: np.ndarray, g: GateParams) -> np.ndarray:
    """Raw per-expert gate scores h_s for input x."""
    x = _check_input(x, g)
    if g.kind == SOFTMAX:
        return g.W.T @ x
    diff = g.W - x[:, None]  # (D, S)
    sq = np.einsum("ds,ds->s", diff, diff)
    if g.kind == GAUSSIAN:
        return -0.5 * sq
    return -np.sqrt(sq)


def softmax_stable(scores: np.ndarray) -> np.ndarray:
    """Softmax with max subtraction; invariant to a common shift of scores."""
    e = np.exp(scores - np.max(scores))
    return e / e.sum()


def topk_gate(x: np.ndarray, g: GateParams) -> SparseGateWeights:
    """Select the K best-scoring experts and softmax over their scores only."""
    scores = gate_scores(x, g)
    selected = _select_top_k(scores, g.K)
    weights = np.zeros(g.n_experts)
    weights[selected] = softmax_stable(scores[selected])
    return SparseGateWeights(weights=weights, selected=selected)


def gate_jacobian(x: np.ndarray, g: GateParams) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of the gate weights with the Top-K selection held fixed.

    Returns (d_weights/d_x, d_weights/d_W) of shapes (S, D) and (S, D*S);
    the W Jacobian lays experts out in D-sized blocks, block s holding the
    partials with respect to column s of W.  Rows of unselected experts are
    zero, as are blocks of unselected experts (their scores never enter the
    restricted softmax).
    """
    scores = gate_scores(x, g)
    selected = _select_top_k(scores, g.K)
    w_sel = softmax_stable(scores[selected])

    D, S = g.dim, g.n_experts
    # Restricted softmax Jacobian: dw_i/dh_j = w_i (delta_ij - w_j), i,j selected.
    jac_soft = np.diag(w_sel) - np.outer(w_sel, w_sel)  # (K, K)

    dh_dx, dh_dW = score_gradients(x, g, selected)

    jac_x = np.zeros((S, D))
    jac_W = np.zeros((S, D * S))
    for r, i in enumerate(selected):
        jac_x[i] = jac_soft[r] @ dh_dx
        for c, j in enumerate(selected):
            jac_W[i, j * D : (j + 1) * D] = jac_soft[r, c] * dh_dW[c]
    return jac_x, jac_W


def score_gradients(x: np.ndarray, g: GateParams,
                    selected: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the selected scores: row r is expert selected[r].

    Returns (dh/dx, dh/dW_s), each (K, D); score s depends on no other gate
    column, so dh/dW_s is the full W dependence of that score.
    """
    D = g.dim
    dh_dx = np.zeros((len(selected), D))
    dh_dW = np.zeros((len(selected), D))
    for r, s in enumerate(selected):
        col = g.W[:, s]
        if g.kind == SOFTMAX:
            dh_dx[r] = col
            dh_dW[r] = x
        else:
            diff = x - col
            if g.kind == GAUSSIAN:
                dh_dx[r] = -diff
                dh_dW[r] = diff
            else:
                nrm = np.linalg.norm(diff)
                if nrm == 0.0:
                    # Subgradient at the collision point: zero vector.
                    warnings.warn(
                        f"laplace score evaluated at x == W[:, {s}]; using zero subgradient",
                        TieBoundaryWarning,
                        stacklevel=2,
                    )
                else:
                    dh_dx[r] = -diff / nrm
                    dh_dW[r] = diff / nrm
    return dh_dx, dh_dW


def _check_input(x: np.ndarray, g: GateParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (g.dim,):
        raise ValueError(f"input shape {x.shape} does not match gate dimension {g.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("gate input must be finite")
    return x


def _select_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    # Stable argsort of -scores: descending score, ties by lowest index.
    order = np.argsort(-scores, kind="stable")
    if k < scores.size and scores[order[k - 1]] == scores[order[k]]:
        warnings.warn(
            "Top-K cut falls on an exact score tie; lowest index selected",
            TieBoundaryWarning,
            stacklevel=3,
        )
    return np.sort(order[:k])
