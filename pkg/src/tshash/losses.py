"""Pairwise losses, similarity machinery, and the combined objective.

Three supervised pairwise forms (ksh, dsh, dpsh) act on raw embeddings,
each with its own similarity statistic u.  The unsupervised terms act on
a bounded relaxed similarity between length-normalized embeddings,
u = -||f_i/||f_i|| - f_j/||f_j||||^2 in [-4, 0].  Teacher-side values are
constant targets: no gradient flows through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("ksh", "dsh", "dpsh")

EPS_NORM = 1e-12


@dataclass
class Hyperparams:
    """Loss weights and training constants shared across variants."""

    kind: str = "dsh"
    bits: int = 16
    omega: float = 0.8  # peak unsupervised weight, reached after ramp-up
    gamma: float = 0.5  # pseudo-pair loss weight inside the unsupervised term
    eta: float = 0.004  # quantization penalty weight
    alpha: float = 0.98  # teacher EMA decay, about half an epoch of memory
    rho: float | None = None  # pseudo-similar fraction; None = measure on labels
    margin: float = 4.0  # hinge margin on the normalized similarity range
    use_consistency: bool = True

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError("kind must be one of %s, got %r" % (KINDS, self.kind))
        if self.bits <= 0:
            raise ValueError("bits must be positive")
        if self.margin <= 0:
            raise ValueError("margin must be positive, got %r" % self.margin)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if min(self.omega, self.gamma, self.eta) < 0:
            raise ValueError("omega, gamma, eta must be nonnegative")
        if self.rho is not None and not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1] when given")


@dataclass
class PairSupervision:
    """Ordered labeled pairs (i, j) with similarity s in {0, 1}."""

    i: np.ndarray
    j: np.ndarray
    s: np.ndarray

    def __len__(self) -> int:
        return self.i.shape[0]

    @classmethod
    def from_labels(cls, indices: np.ndarray, labels: np.ndarray) -> "PairSupervision":
        """All ordered pairs (self-pairs included) among the given batch
        positions, similar iff class labels match."""
        indices = np.asarray(indices, dtype=np.int64)
        labels = np.asarray(labels)
        i = np.repeat(indices, indices.size)
        j = np.tile(indices, indices.size)
        li = np.repeat(labels, labels.size)
        lj = np.tile(labels, labels.size)
        return cls(i=i, j=j, s=(li == lj).astype(np.float64))


def _softplus(u):
    u = np.asarray(u, dtype=np.float64)
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


def _sigmoid(u):
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def supervised_pair_loss(kind: str, u, s, bits: int):
    """Loss and d(loss)/du for one supervised pairwise form.

    u is the form's own similarity statistic: inner product for ksh,
    negative squared distance for dsh, half inner product for dpsh.
    The dsh hinge takes subgradient 0 at its corner.
    """
    u = np.asarray(u, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if kind == "ksh":
        target = bits * (2.0 * s - 1.0)
        return (target - u) ** 2, 2.0 * (u - target)
    if kind == "dsh":
        hinge = 2.0 * bits + u
        active = hinge > 0
        loss = -s * u + (1.0 - s) * np.where(active, hinge, 0.0)
        return loss, -s + (1.0 - s) * active
    if kind == "dpsh":
        # softplus/sigmoid written overflow-safe; never exponentiate +u
        return -s * u + _softplus(u), -s + _sigmoid(u)
    raise ValueError("kind must be one of %s, got %r" % (KINDS, kind))


def consistency_loss(u, u_T):
    """Squared gap to the teacher similarity, with d(loss)/du.  The
    teacher side is a constant target."""
    u = np.asarray(u, dtype=np.float64)
    u_T = np.asarray(u_T, dtype=np.float64)
    resid = u - u_T
    return resid * resid, 2.0 * resid


def supervised_loss_relaxed(
    embeddings: np.ndarray, sup: PairSupervision | None, kind: str, bits: int
):
    """Mean pairwise loss over the labeled pairs, with gradient.

    Returns (loss, grad_embeddings, empty) where empty flags an absent or
    zero-length pair set; that case yields loss 0 and a zero gradient.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    grad = np.zeros_like(embeddings)
    if sup is None or len(sup) == 0:
        return 0.0, grad, True
    fi = embeddings[sup.i]
    fj = embeddings[sup.j]
    if kind == "dsh":
        diff = fi - fj
        u = -np.einsum("pk,pk->p", diff, diff)
    else:
        u = np.einsum("pk,pk->p", fi, fj)
        if kind == "dpsh":
            u = 0.5 * u
    lvec, dldu = supervised_pair_loss(kind, u, sup.s, bits)
    c = dldu / len(sup)
    if kind == "dsh":
        np.add.at(grad, sup.i, -2.0 * c[:, None] * diff)
        np.add.at(grad, sup.j, 2.0 * c[:, None] * diff)
    else:
        scale = 0.5 if kind == "dpsh" else 1.0
        np.add.at(grad, sup.i, scale * c[:, None] * fj)
        np.add.at(grad, sup.j, scale * c[:, None] * fi)
    return float(np.mean(lvec)), grad, False


def normalize_rows(x: np.ndarray, eps: float = EPS_NORM):
    """Row-normalize with a norm floor; returns (unit, guarded_norms,
    degenerate_mask).  Rows with norm < eps divide by eps instead."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ik,ik->i", x, x))
    degenerate = norms < eps
    guarded = np.maximum(norms, eps)
    return x / guarded[:, None], guarded, degenerate


def sim_relaxed(a: np.ndarray, b: np.ndarray, eps: float = EPS_NORM) -> float:
    """Relaxed similarity of two vectors: negative squared distance of
    their normalized versions; lies in [-4, 0]."""
    pair = np.stack([np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)])
    unit, _, _ = normalize_rows(pair, eps)
    d = unit[0] - unit[1]
    return float(np.clip(-np.dot(d, d), -4.0, 0.0))


def sim_matrix(embeddings: np.ndarray, eps: float = EPS_NORM):
    """All-pairs relaxed similarities for one batch.

    Returns (U, unit, guarded_norms, degenerate).  U is symmetric with an
    exactly zero diagonal, clipped to [-4, 0].
    """
    unit, guarded, degenerate = normalize_rows(embeddings, eps)
    gram = unit @ unit.T
    gram = 0.5 * (gram + gram.T)
    sq = np.diagonal(gram).copy()
    u = 2.0 * gram - sq[:, None] - sq[None, :]
    return np.clip(u, -4.0, 0.0), unit, guarded, degenerate


def sim_grad_to_embeddings(
    coef: np.ndarray,
    unit: np.ndarray,
    guarded_norms: np.ndarray,
    degenerate: np.ndarray,
    eps: float = EPS_NORM,
):
    """Pull a dL/dU coefficient matrix (ordered pairs) back to embeddings.

    dU_ij/dn_i = 2(n_j - n_i) with n the normalized rows; the result is
    then projected through the row-normalization Jacobian.
    """
    s = coef + coef.T
    g_unit = 2.0 * (s @ unit) - 2.0 * s.sum(axis=1, keepdims=True) * unit
    proj = g_unit - unit * np.einsum("ik,ik->i", g_unit, unit)[:, None]
    grad = proj / guarded_norms[:, None]
    if degenerate.any():
        grad[degenerate] = g_unit[degenerate] / eps
    return grad


def pseudo_count(rho: float, n_values: int) -> int:
    """Pair budget round(rho * n); Python round, so .5 ties go to even."""
    return int(round(rho * n_values))


def threshold_select(values: np.ndarray, rho: float) -> float:
    """k-th largest of the flattened similarity values, k = round(rho*n).

    rho=0 (or a budget rounding to 0) returns +inf so nothing qualifies;
    k >= n returns the minimum.  Empty input is an error.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("threshold_select needs at least one value")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1], got %r" % rho)
    k = pseudo_count(rho, values.size)
    if k <= 0:
        return float("inf")
    k = min(k, values.size)
    return float(np.partition(values, values.size - k)[values.size - k])


def pseudo_similarity(teacher_sims: np.ndarray, thr: float) -> np.ndarray:
    """Binary pseudo labels: 1 where the teacher similarity reaches thr."""
    return (np.asarray(teacher_sims, dtype=np.float64) >= thr).astype(np.float64)


def quantized_pair_loss(u, w, margin: float = 4.0):
    """Hinge-style pair loss on normalized similarities with pseudo
    labels w; margin spans the [-4, 0] range by default.  Returns
    elementwise (loss, d(loss)/du)."""
    if margin <= 0:
        raise ValueError("margin must be positive, got %r" % margin)
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    hinge = margin + u
    active = hinge > 0
    loss = -w * u + (1.0 - w) * np.where(active, hinge, 0.0)
    return loss, -w + (1.0 - w) * active


def quantization_penalty(embeddings: np.ndarray):
    """Pull embedding coordinates toward {-1, +1}.

    value = (1/m) * sum_ik ||F_ik| - 1|; the subgradient at |F|=1 is 0,
    and sign(0) counts as +1.
    """
    f = np.asarray(embeddings, dtype=np.float64)
    m = f.shape[0]
    absf = np.abs(f)
    value = float(np.sum(np.abs(absf - 1.0)) / m)
    outer = np.sign(absf - 1.0)  # 0 exactly at the kink
    grad = np.where(f >= 0.0, 1.0, -1.0) * outer / m
    return value, grad


@dataclass
class BatchPairState:
    """Per-batch similarity state: student sims (diagnostic snapshot),
    teacher sims, pseudo labels, and the selection threshold."""

    u_student: np.ndarray
    u_teacher: np.ndarray
    pseudo: np.ndarray
    thr: float
    pseudo_fraction: float = 0.0
    degenerate_rows: int = 0


def build_pair_state(
    student_embeddings: np.ndarray,
    teacher_embeddings: np.ndarray,
    rho: float,
    eps: float = EPS_NORM,
) -> BatchPairState:
    """Assemble similarities and pseudo labels for one batch.

    The pair budget k = round(rho * m^2) is spent exactly: the k largest
    of the m^2 flattened teacher similarities become pseudo-similar, ties
    at the cut broken by flat index.  Plain thresholding cannot promise
    an exact count here: the diagonal is m exact zeros and off-diagonal
    values arrive in symmetric duplicate pairs, so the matrix realizes
    only even counts while odd budgets are legal.  thr is reported as the
    smallest selected similarity (the k-th largest), +inf when k = 0.
    """
    u_s, _, _, deg_s = sim_matrix(student_embeddings, eps)
    u_t, _, _, deg_t = sim_matrix(teacher_embeddings, eps)
    n = u_t.size
    k = min(pseudo_count(rho, n), n)
    pseudo = np.zeros_like(u_t)
    if k <= 0:
        thr = float("inf")
    else:
        order = np.argsort(u_t.ravel(), kind="stable")
        top = order[n - k :]
        pseudo.ravel()[top] = 1.0
        thr = float(u_t.ravel()[top[0]])
    return BatchPairState(
        u_student=u_s,
        u_teacher=u_t,
        pseudo=pseudo,
        thr=thr,
        pseudo_fraction=float(pseudo.mean()),
        degenerate_rows=int(deg_s.sum() + deg_t.sum()),
    )


def total_loss(
    state: BatchPairState,
    embeddings: np.ndarray,
    sup: PairSupervision | None,
    hp: Hyperparams,
    omega_t: float,
):
    """Combined objective and its gradient with respect to embeddings.

    total = supervised
          + omega_t * mean over unlabeled ordered pairs of
            [consistency (u - u_T)^2 + gamma * quantized hinge]
          + eta * quantization penalty

    A pair is unlabeled when either endpoint lies outside the supervised
    index set, so the labeled block keeps its geometry anchored by the
    supervised term alone.  A batch with no unlabeled pair skips the
    omega terms.  The student similarities are recomputed from
    `embeddings`, so the result is a pure function of them; `state`
    supplies the frozen teacher targets.  Terms whose weight is zero are
    skipped outright, which makes the omega=eta=0 case bit-identical to
    the supervised loss alone.  Returns (loss, grad_embeddings,
    breakdown).
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    sup_loss, grad, sup_empty = supervised_loss_relaxed(
        embeddings, sup, hp.kind, hp.bits
    )
    loss = sup_loss
    breakdown = {
        "supervised": sup_loss,
        "consistency": 0.0,
        "quantized": 0.0,
        "penalty": 0.0,
        "supervised_pairs": 0 if sup is None else len(sup),
        "supervised_empty": sup_empty,
        "unsup_pairs": 0,
        "omega_t": float(omega_t),
    }
    if omega_t != 0.0:
        m = embeddings.shape[0]
        labeled = np.zeros(m, dtype=bool)
        if sup is not None and len(sup) > 0:
            labeled[sup.i] = True
            labeled[sup.j] = True
        pair_mask = ~(labeled[:, None] & labeled[None, :])
        n_unsup = int(pair_mask.sum())
        breakdown["unsup_pairs"] = n_unsup
        if n_unsup > 0:
            u, unit, guarded, degenerate = sim_matrix(embeddings)
            coef = np.zeros_like(u)
            unsup = 0.0
            if hp.use_consistency:
                closs, cgrad = consistency_loss(u, state.u_teacher)
                consistency = float(np.sum(closs, where=pair_mask) / n_unsup)
                coef += np.where(pair_mask, cgrad, 0.0)
                breakdown["consistency"] = consistency
                unsup += consistency
            if hp.gamma != 0.0:
                qloss, qgrad = quantized_pair_loss(u, state.pseudo, hp.margin)
                quantized = float(np.sum(qloss, where=pair_mask) / n_unsup)
                coef += hp.gamma * np.where(pair_mask, qgrad, 0.0)
                breakdown["quantized"] = quantized
                unsup += hp.gamma * quantized
            loss += omega_t * unsup
            if coef.any():
                grad += sim_grad_to_embeddings(
                    (omega_t / n_unsup) * coef, unit, guarded, degenerate
                )
    if hp.eta != 0.0:
        pen, pen_grad = quantization_penalty(embeddings)
        loss += hp.eta * pen
        grad += hp.eta * pen_grad
        breakdown["penalty"] = pen
    breakdown["total"] = loss
    return loss, grad, breakdown
