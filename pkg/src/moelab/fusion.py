"""MoE fusion layer: expert FFNs, three router designs, missing-modality
substitution, entropy/importance balancing losses, and hand-written
reverse-mode gradients for every learnable parameter.

Router designs over M modality embeddings (each gamma x d_e):
  joint         one router on the feature-wise concatenation of all
                modalities per time bin, one shared expert pool
  per_modality  one router per modality, shared expert pool
  disjoint      one router per modality, expert pool partitioned into
                per-modality groups routed with a smaller Top-K
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .gating import GateParams, score_gradients, softmax_stable, topk_gate

JOINT = "joint"
PER_MODALITY = "per_modality"
DISJOINT = "disjoint"
ROUTER_MODES = (JOINT, PER_MODALITY, DISJOINT)

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def gelu(u):
    """Exact GeLU, u * Phi(u) with the Gaussian CDF (not the tanh form)."""
    return u * ndtr(u)


def gelu_grad(u):
    return ndtr(u) + u * np.exp(-0.5 * u * u) / _SQRT_2PI


@dataclass
class ExpertParams:
    """Two-layer feed-forward expert with GeLU activation."""

    W1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    W2: np.ndarray  # (D_out, H)
    b2: np.ndarray  # (D_out,)

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.W2 = np.asarray(self.W2, dtype=float)
        self.b2 = np.asarray(self.b2, dtype=float)
        H, D = self.W1.shape
        if H < 1:
            raise ValueError("hidden size must be >= 1")
        if self.b1.shape != (H,) or self.W2.shape[1] != H or self.b2.shape != (self.W2.shape[0],):
            raise ValueError("inconsistent expert parameter shapes")
        for arr in (self.W1, self.b1, self.W2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("expert parameters must be finite")

    @classmethod
    def random(cls, d_in, hidden, d_out, rng, scale=0.5):
        return cls(
            W1=rng.normal(0.0, scale, size=(hidden, d_in)),
            b1=rng.normal(0.0, scale, size=hidden),
            W2=rng.normal(0.0, scale, size=(d_out, hidden)),
            b2=rng.normal(0.0, scale, size=d_out),
        )


def expert_forward(e: ExpertParams, z: np.ndarray) -> np.ndarray:
    """W2 @ GeLU(W1 @ z + b1) + b2."""
    z = np.asarray(z, dtype=float)
    if z.shape != (e.W1.shape[1],):
        raise ValueError(f"expert input shape {z.shape} does not match W1 {e.W1.shape}")
    return e.W2 @ gelu(e.W1 @ z + e.b1) + e.b2


@dataclass
class ModalityBatch:
    """Per-modality embedding matrices plus presence bookkeeping.

    `present` marks modalities observed in the data; `substituted` marks
    slots that were filled in by `substitute_missing` (kept separate so
    gradients can be routed to the learnable missing embedding).
    """

    embeddings: list[np.ndarray]  # M matrices, each (gamma, d_e)
    present: np.ndarray  # (M,) bool
    modality_ids: list[str]
    substituted: np.ndarray = None  # (M,) bool

    def __post_init__(self):
        self.present = np.asarray(self.present, dtype=bool)
        M = len(self.embeddings)
        if M < 1:
            raise ValueError("need at least one modality")
        if self.present.shape != (M,) or len(self.modality_ids) != M:
            raise ValueError("mask/id length does not match number of modalities")
        if self.substituted is None:
            self.substituted = np.zeros(M, dtype=bool)
        self.substituted = np.asarray(self.substituted, dtype=bool)
        shape = self.embeddings[0].shape
        for m, Z in enumerate(self.embeddings):
            if Z.ndim != 2 or Z.shape != shape:
                raise ValueError("all modality embeddings must share (gamma, d_e)")
            if (self.present[m] or self.substituted[m]) and not np.all(np.isfinite(Z)):
                raise ValueError(f"embedding of modality {self.modality_ids[m]} is not finite")

    @property
    def n_modalities(self) -> int:
        return len(self.embeddings)

    @property
    def gamma(self) -> int:
        return self.embeddings[0].shape[0]

    @property
    def d_e(self) -> int:
        return self.embeddings[0].shape[1]


@dataclass
class MissingEmbedding:
    """Learnable stand-in embedding for absent modalities."""

    Z: np.ndarray  # (gamma, d_e)

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=float)
        if not np.all(np.isfinite(self.Z)):
            raise ValueError("missing embedding must be finite")

    @classmethod
    def init(cls, gamma, d_e, rng, std=0.02):
        # Small init so substituted slots do not dominate present modalities.
        return cls(Z=rng.normal(0.0, std, size=(gamma, d_e)))


def substitute_missing(batch: ModalityBatch, miss: MissingEmbedding) -> ModalityBatch:
    """Replace every absent modality's embedding with the learnable one.

    Idempotent: re-substituting overwrites the same slots with the same rows.
    """
    new_embeddings = []
    substituted = ~batch.present
    for m in range(batch.n_modalities):
        if batch.present[m]:
            new_embeddings.append(batch.embeddings[m])
        else:
            if miss.Z.shape != (batch.gamma, batch.d_e):
                raise ValueError(
                    f"missing embedding shape {miss.Z.shape} does not match "
                    f"batch shape {(batch.gamma, batch.d_e)}"
                )
            new_embeddings.append(miss.Z.copy())
    return ModalityBatch(
        embeddings=new_embeddings,
        present=batch.present.copy(),
        modality_ids=list(batch.modality_ids),
        substituted=substituted,
    )


@dataclass
class RouterMode:
    """Which of the three router designs to run, plus the disjoint layout."""

    kind: str
    partition: list[list[int]] = None  # disjoint only: expert indices per modality
    group_top_k: int = 2

    def __post_init__(self):
        if self.kind not in ROUTER_MODES:
            raise ValueError(f"unknown router mode {self.kind!r}")
        if self.kind == DISJOINT:
            if not self.partition:
                raise ValueError("disjoint mode requires an expert partition")
            flat = [i for group in self.partition for i in group]
            if len(set(flat)) != len(flat):
                raise ValueError("disjoint partition has overlapping groups")


@dataclass
class FusionResult:
    outputs: list[np.ndarray]  # joint: [Y]; otherwise one (gamma, D_out) per modality
    gate_records: list[list[np.ndarray]]  # full-pool weight vectors per router

    def record_for_entropy(self) -> list[list[np.ndarray]]:
        return self.gate_records


def route_and_fuse(batch: ModalityBatch, experts: list[ExpertParams],
                   gates, mode: RouterMode) -> FusionResult:
    """Route every time-bin embedding through its Top-K experts and fuse.

    `gates`: a single GateParams in joint mode, else one per modality (over
    the shared pool for per_modality, over each group for disjoint).
    """
    result, _ = _fuse(batch, experts, gates, mode, cache=None)
    return result


def _require_routable(batch: ModalityBatch) -> None:
    missing = ~(batch.present | batch.substituted)
    if np.any(missing):
        names = [batch.modality_ids[m] for m in np.nonzero(missing)[0]]
        raise ValueError(
            f"modalities {names} are missing; call substitute_missing first"
        )


def _normalize_gates(gates, mode: RouterMode, batch: ModalityBatch,
                     experts: list[ExpertParams]):
    S = len(experts)
    if mode.kind == JOINT:
        if isinstance(gates, GateParams):
            gates = [gates]
        if len(gates) != 1:
            raise ValueError("joint mode takes exactly one gate")
        if gates[0].n_experts != S:
            raise ValueError("joint gate must cover the full expert pool")
        return list(gates)
    gates = list(gates)
    if len(gates) != batch.n_modalities:
        raise ValueError("need one gate per modality")
    if mode.kind == PER_MODALITY:
        for g in gates:
            if g.n_experts != S:
                raise ValueError("per-modality gates must cover the full expert pool")
        return gates
    # Disjoint: partition must cover the pool exactly, one group per modality.
    if len(mode.partition) != batch.n_modalities:
        raise ValueError("disjoint partition must have one group per modality")
    flat = sorted(i for group in mode.partition for i in group)
    if flat != list(range(S)):
        raise ValueError("disjoint partition must cover the expert pool exactly")
    for g, group in zip(gates, mode.partition):
        if g.n_experts != len(group):
            raise ValueError("gate size does not match its expert group")
    return gates


def _fuse(batch, experts, gates, mode, cache):
    """Shared forward path; when `cache` is a list, per-token tape entries are
    appended for the backward pass."""
    _require_routable(batch)
    gates = _normalize_gates(gates, mode, batch, experts)
    S = len(experts)

    if mode.kind == JOINT:
        X = np.hstack(batch.embeddings)  # (gamma, M * d_e)
        routed = [(0, gates[0], X, list(range(S)))]
    elif mode.kind == PER_MODALITY:
        routed = [(m, gates[m], batch.embeddings[m], list(range(S)))
                  for m in range(batch.n_modalities)]
    else:
        routed = [(m, gates[m], batch.embeddings[m], list(mode.partition[m]))
                  for m in range(batch.n_modalities)]

    outputs = []
    records = []
    for r, (m, gate, X, pool) in enumerate(routed):
        rows = []
        weight_vectors = []
        for t in range(X.shape[0]):
            x = X[t]
            sw = topk_gate(x, gate)
            full = np.zeros(S)
            full[np.asarray(pool)[sw.selected]] = sw.weights[sw.selected]
            weight_vectors.append(full)

            y = None
            tape_experts = []
            for local_idx in sw.selected:
                e = experts[pool[local_idx]]
                u1 = e.W1 @ x + e.b1
                a1 = gelu(u1)
                y_i = e.W2 @ a1 + e.b2
                w_i = sw.weights[local_idx]
                y = w_i * y_i if y is None else y + w_i * y_i
                tape_experts.append((pool[local_idx], u1, a1, y_i))
            outputs_row = y
            rows.append(outputs_row)
            if cache is not None:
                cache.append((r, m, t, x, gate, pool, sw, tape_experts))
        outputs.append(np.vstack(rows))
        records.append(weight_vectors)
    return FusionResult(outputs=outputs, gate_records=records), gates


@dataclass
class FusionGrads:
    """Gradients for every learnable piece of the fusion layer."""

    experts: list[dict]  # per expert: W1, b1, W2, b2 arrays
    gates: list[np.ndarray]  # per router: dW matching GateParams.W
    missing: np.ndarray = None  # (gamma, d_e); set when a MissingEmbedding was given
    embeddings: list[np.ndarray] = field(default_factory=list)  # d loss / d input embedding


def fuse_with_gradients(batch: ModalityBatch, experts: list[ExpertParams],
                        gates, mode: RouterMode, upstream,
                        miss: MissingEmbedding = None):
    """Forward pass plus reverse-mode gradients of L = sum_m <upstream_m, Y_m>.

    Gradients hold the Top-K selections fixed (straight-through on the
    selection event).  When `miss` is given, absent modalities are
    substituted first and their gradient is accumulated into `missing`.
    """
    if miss is not None:
        batch = substitute_missing(batch, miss)
    tape = []
    result, gates = _fuse(batch, experts, gates, mode, cache=tape)

    if len(upstream) != len(result.outputs):
        raise ValueError("one upstream gradient matrix per fused output required")
    for U, Y in zip(upstream, result.outputs):
        if U.shape != Y.shape:
            raise ValueError("upstream gradient shape mismatch")

    M = batch.n_modalities
    d_e = batch.d_e
    grads = FusionGrads(
        experts=[{k: np.zeros_like(getattr(e, k)) for k in ("W1", "b1", "W2", "b2")}
                 for e in experts],
        gates=[np.zeros_like(g.W) for g in gates],
        missing=None if miss is None else np.zeros_like(miss.Z),
        embeddings=[np.zeros_like(Z) for Z in batch.embeddings],
    )

    for (r, m, t, x, gate, pool, sw, tape_experts) in tape:
        gy = upstream[r][t]
        w_sel = sw.weights[sw.selected]

        # Expert FFN backprop, upstream scaled by each expert's gate weight.
        dx = np.zeros_like(x)
        dL_dw = np.zeros(len(sw.selected))
        for j, (expert_idx, u1, a1, y_i) in enumerate(tape_experts):
            e = experts[expert_idx]
            ge = grads.experts[expert_idx]
            dL_dw[j] = gy @ y_i
            gyi = w_sel[j] * gy
            ge["W2"] += np.outer(gyi, a1)
            ge["b2"] += gyi
            du1 = (e.W2.T @ gyi) * gelu_grad(u1)
            ge["W1"] += np.outer(du1, x)
            ge["b1"] += du1
            dx += e.W1.T @ du1

        # Restricted softmax backward: dh_j = w_j (dL/dw_j - sum_i dL/dw_i w_i).
        dh = w_sel * (dL_dw - dL_dw @ w_sel)
        dh_dx, dh_dW = score_gradients(x, gate, sw.selected)
        dx += dh @ dh_dx
        for j, local_idx in enumerate(sw.selected):
            grads.gates[r][:, local_idx] += dh[j] * dh_dW[j]

        # Route the input gradient back to embeddings / the missing embedding.
        if mode.kind == JOINT:
            for mm in range(M):
                chunk = dx[mm * d_e : (mm + 1) * d_e]
                if batch.substituted[mm]:
                    grads.missing[t] += chunk
                else:
                    grads.embeddings[mm][t] += chunk
        else:
            if batch.substituted[m]:
                grads.missing[t] += dx
            else:
                grads.embeddings[m][t] += dx

    return result, grads


def entropy(p: np.ndarray) -> float:
    """Natural-log entropy with 0 * log(0) := 0."""
    p = np.asarray(p, dtype=float)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def entropy_reg_loss(gate_records: list[list[np.ndarray]]) -> float:
    """Mean per-modality expert-entropy minus entropy of the pooled mean.

    Always <= 0; equals 0 exactly when all per-modality expert distributions
    coincide.  Its negation is the mutual information between the modality
    label and the expert choice.
    """
    if not gate_records or any(len(rec) == 0 for rec in gate_records):
        raise ValueError("each modality needs at least one gate-weight record")
    p_hats = []
    for rec in gate_records:
        p = np.mean(np.vstack(rec), axis=0)
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"gate-weight distribution sums to {p.sum()!r}, not 1")
        p_hats.append(p)
    M = len(p_hats)
    mean_of_entropies = sum(entropy(p) for p in p_hats) / M
    pooled = sum(p_hats) / M
    return mean_of_entropies - entropy(pooled)


def importance_loss(gate_records: list[np.ndarray]) -> float:
    """Squared coefficient of variation of per-expert total gate weight.

    Population-variance convention; scale invariant in the total weights.
    """
    if not gate_records:
        raise ValueError("need at least one gate-weight record")
    imp = np.sum(np.vstack(gate_records), axis=0)
    mean = imp.mean()
    if mean == 0.0:
        raise ValueError("all-zero importance vector")
    return float(imp.var() / mean**2)
