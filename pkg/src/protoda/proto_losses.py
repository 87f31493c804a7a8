"""Prototype losses and the pixel-wise weight scaling factor.

Three losses pull pixel embeddings toward their class prototype inside the
fixed ETF frame:

  ce   = -log softmax over the same-domain prototype set at the true class
  ppc  = -log( sum_pos exp(i.p/tau) / sum_all exp(i.p/tau) ), positives being
         the class's source+target prototype pair (just the unknown prototype
         for the unknown class), negatives every other prototype in the bank
  ppd  = (1 - i.p)^2 against the same-domain class prototype

All losses treat the embedding as already L2-normalized and return analytic
gradients with respect to that normalized vector; the normalization Jacobian
is the network's job. The weight factor compares a pixel's cosine to the
source and target prototypes of its (pseudo-)class and is largest when the
pixel sits between the two, which is the signature of a common class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .etf import SOURCE, TARGET, PrototypeBank

WEIGHT_VARIANTS = ("ours", "abs", "gaussian", "mean")


@dataclass(frozen=True)
class ProtoLossConfig:
    """Weights and temperatures of the combined prototype loss."""

    lambda1: float = 0.01  # ppc weight
    lambda2: float = 0.01  # ppd weight
    tau: float = 0.1  # ppc contrastive temperature
    sigma: float = 1.0  # gaussian weight-variant width

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1/lambda2 must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")


def _domain_set(bank: PrototypeBank, domain: str) -> np.ndarray:
    """Prototype rows the Eq-6-style softmax runs over for one domain."""
    if domain == SOURCE:
        return bank.source_matrix
    if domain == TARGET:
        return bank.target_matrix
    raise KeyError(f"unknown domain {domain!r}")


def _check_class(bank: PrototypeBank, class_id: int, domain: str) -> int:
    limit = bank.num_classes + (1 if domain == TARGET else 0)
    if not 1 <= class_id <= limit:
        raise KeyError(
            f"class {class_id} invalid for domain {domain!r} (C={bank.num_classes})"
        )
    return int(class_id)


def proto_ce_loss(
    embedding: np.ndarray, class_id: int, domain: str, bank: PrototypeBank
) -> tuple[float, np.ndarray]:
    """Cross-entropy to the class prototype over the same-domain prototype set.

    The source softmax runs over the C source prototypes, the target softmax
    over the C+1 target prototypes including unknown.
    """
    protos = _domain_set(bank, domain)
    col = _check_class(bank, class_id, domain) - 1
    emb = np.asarray(embedding, dtype=np.float64)

    logits = protos @ emb
    shifted = logits - logits.max()
    lse = np.log(np.exp(shifted).sum()) + logits.max()
    loss = float(lse - logits[col])
    p = np.exp(logits - lse)
    grad = protos.T @ p - protos[col]
    return loss, grad


def ppc_loss(
    embedding: np.ndarray, class_id: int, bank: PrototypeBank, tau: float
) -> tuple[float, np.ndarray]:
    """Pixel-prototype contrast against every prototype in the bank.

    Positives are the class's {source, target} pair; the unknown class has the
    single target-side unknown prototype as its positive set.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    c = int(class_id)
    if not 1 <= c <= bank.num_classes + 1:
        raise KeyError(f"class {c} out of range 1..{bank.num_classes + 1}")
    emb = np.asarray(embedding, dtype=np.float64)

    pos_idx = _positive_rows(bank, c)
    logits = (bank.prototypes @ emb) / tau

    m_all = logits.max()
    lse_all = np.log(np.exp(logits - m_all).sum()) + m_all
    pos_logits = logits[pos_idx]
    m_pos = pos_logits.max()
    lse_pos = np.log(np.exp(pos_logits - m_pos).sum()) + m_pos
    loss = float(lse_all - lse_pos)

    p_all = np.exp(logits - lse_all)
    p_pos = np.exp(pos_logits - lse_pos)
    grad = (bank.prototypes.T @ p_all - bank.prototypes[pos_idx].T @ p_pos) / tau
    return loss, grad


def _positive_rows(bank: PrototypeBank, class_id: int) -> list[int]:
    c = bank.num_classes
    if class_id == c + 1:
        return [2 * c]
    return [class_id - 1, c + class_id - 1]


def ppd_loss(
    embedding: np.ndarray, class_id: int, domain: str, bank: PrototypeBank
) -> tuple[float, np.ndarray]:
    """Squared cosine-distance penalty (1 - i.p)^2 to the same-domain prototype."""
    protos = _domain_set(bank, domain)
    col = _check_class(bank, class_id, domain) - 1
    emb = np.asarray(embedding, dtype=np.float64)

    proto = protos[col]
    gap = 1.0 - float(emb @ proto)
    return gap * gap, -2.0 * gap * proto


def proto_loss(
    embedding: np.ndarray,
    class_id: int,
    domain: str,
    bank: PrototypeBank,
    config: ProtoLossConfig,
) -> tuple[float, np.ndarray]:
    """Combined prototype loss: ce + lambda1 * ppc + lambda2 * ppd."""
    ce, g_ce = proto_ce_loss(embedding, class_id, domain, bank)
    pc, g_pc = ppc_loss(embedding, class_id, bank, config.tau)
    pd, g_pd = ppd_loss(embedding, class_id, domain, bank)
    loss = ce + config.lambda1 * pc + config.lambda2 * pd
    grad = g_ce + config.lambda1 * g_pc + config.lambda2 * g_pd
    return float(loss), grad


def weight_scale(d_s: float, d_t: float, variant: str = "ours", sigma: float = 1.0) -> float:
    """Pixel-wise weight from the two prototype cosines.

    ``ours`` is the harmonic mean of (d_s+1) and (d_t+1): it needs BOTH
    cosines to be high, so a pixel aligned with only one domain's prototype
    (a private-class signature) is down-weighted. The other variants are the
    ablation alternatives: ``abs`` 2-|d_s-d_t|, ``gaussian``
    2*exp(-(d_s-d_t)^2/sigma^2), ``mean`` (d_s+1)(d_t+1)/2.
    """
    d_s = _check_cosine(d_s, "d_s")
    d_t = _check_cosine(d_t, "d_t")
    if variant == "ours":
        return _harmonic(d_s + 1.0, d_t + 1.0)
    if variant == "abs":
        return 2.0 - abs(d_s - d_t)
    if variant == "gaussian":
        if sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {sigma}")
        gap = d_s - d_t
        return 2.0 * float(np.exp(-(gap * gap) / (sigma * sigma)))
    if variant == "mean":
        return (d_s + 1.0) * (d_t + 1.0) / 2.0
    raise ValueError(f"unknown weight variant {variant!r}; expected one of {WEIGHT_VARIANTS}")


def _check_cosine(value: float, name: str) -> float:
    if not -1.0 - 1e-9 <= value <= 1.0 + 1e-9:
        raise ValueError(f"{name}={value} outside [-1, 1]")
    return min(max(float(value), -1.0), 1.0)


def _harmonic(a: float, b: float) -> float:
    # the a == b branch keeps HM(a, a) == a exact and covers the 0/0 case
    if a == b:
        return a
    return 2.0 * a * b / (a + b)


def weight_map(
    embeddings: np.ndarray,
    classes,
    bank: PrototypeBank,
    variant: str = "ours",
    sigma: float = 1.0,
) -> np.ndarray:
    """Per-pixel weight grid for an embedding map and its class map.

    ``classes`` may be a plain H x W integer grid or anything with a
    ``.classes`` attribute (a pseudo-label map). Pixels labeled unknown
    (C+1) have no source prototype and get weight 1.
    """
    cls = np.asarray(getattr(classes, "classes", classes))
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 3 or emb.shape[-1] != bank.embed_dim:
        raise ValueError(f"embeddings shape {emb.shape} != (H, W, {bank.embed_dim})")
    if cls.shape != emb.shape[:2]:
        raise ValueError(f"class grid {cls.shape} does not match embeddings {emb.shape[:2]}")
    c = bank.num_classes
    if cls.min() < 1 or cls.max() > c + 1:
        raise ValueError(f"class values must lie in 1..{c + 1}")

    norms = np.linalg.norm(emb, axis=-1)
    if np.any(norms == 0.0):
        raise ValueError("zero embedding encountered in weight_map")
    unit = emb / norms[..., None]

    known = np.minimum(cls, c) - 1  # unknown pixels use a dummy row, masked below
    d_s = np.clip(np.einsum("hwd,hwd->hw", unit, bank.source_matrix[known]), -1.0, 1.0)
    d_t = np.clip(np.einsum("hwd,hwd->hw", unit, bank.target_matrix[known]), -1.0, 1.0)

    w = _weight_scale_grid(d_s, d_t, variant, sigma)
    return np.where(cls == c + 1, 1.0, w)


def _weight_scale_grid(d_s: np.ndarray, d_t: np.ndarray, variant: str, sigma: float) -> np.ndarray:
    if variant == "ours":
        a = d_s + 1.0
        b = d_t + 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = 2.0 * a * b / (a + b)
        return np.where(a == b, a, ratio)
    if variant == "abs":
        return 2.0 - np.abs(d_s - d_t)
    if variant == "gaussian":
        if sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {sigma}")
        gap = d_s - d_t
        return 2.0 * np.exp(-(gap * gap) / (sigma * sigma))
    if variant == "mean":
        return (d_s + 1.0) * (d_t + 1.0) / 2.0
    raise ValueError(f"unknown weight variant {variant!r}; expected one of {WEIGHT_VARIANTS}")


# ---------------------------------------------------------------------------
# batched forms used by the training loop (identical math, vectorized)
# ---------------------------------------------------------------------------


def proto_loss_batch(
    embeddings: np.ndarray,
    classes: np.ndarray,
    domain: str,
    bank: PrototypeBank,
    config: ProtoLossConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel combined prototype loss over a flat batch of one domain.

    ``embeddings`` is (N, d) and already normalized, ``classes`` is (N,) with
    values valid for ``domain``. Returns per-pixel losses (N,) and gradients
    (N, d) with respect to the normalized embeddings.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    cls = np.asarray(classes)
    if emb.ndim != 2 or cls.shape != (emb.shape[0],):
        raise ValueError("expected (N, d) embeddings and (N,) classes")
    if emb.shape[0] == 0:
        return np.zeros(0), np.zeros((0, bank.embed_dim))
    c = bank.num_classes
    limit = c + (1 if domain == TARGET else 0)
    if cls.min() < 1 or cls.max() > limit:
        raise KeyError(f"class values must lie in 1..{limit} for domain {domain!r}")

    protos = _domain_set(bank, domain)
    col = cls - 1

    # ce over the same-domain set
    logits = emb @ protos.T
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1, keepdims=True)) + m
    ce = lse[:, 0] - np.take_along_axis(logits, col[:, None], axis=1)[:, 0]
    p = np.exp(logits - lse)
    g_ce = p @ protos - protos[col]

    # ppc over the full bank
    tau = config.tau
    all_logits = (emb @ bank.prototypes.T) / tau
    m_all = all_logits.max(axis=1, keepdims=True)
    lse_all = np.log(np.exp(all_logits - m_all).sum(axis=1, keepdims=True)) + m_all

    pos_cols = np.stack([col, c + col], axis=1)
    # unknown class: single positive, so point both slots at the unknown row
    # and mask the duplicate out of the logsumexp below
    unknown = cls == c + 1
    pos_cols[unknown] = 2 * c
    pos_logits = np.take_along_axis(all_logits, pos_cols, axis=1)
    if np.any(unknown):
        # remove the duplicated column from the logsumexp
        pos_logits[unknown, 1] = -np.inf
    m_pos = pos_logits.max(axis=1, keepdims=True)
    lse_pos = np.log(np.exp(pos_logits - m_pos).sum(axis=1, keepdims=True)) + m_pos
    ppc = lse_all[:, 0] - lse_pos[:, 0]

    p_all = np.exp(all_logits - lse_all)
    p_pos = np.exp(pos_logits - lse_pos)  # rows sum to 1 over the positive set
    g_ppc = (
        p_all @ bank.prototypes
        - p_pos[:, 0, None] * bank.prototypes[pos_cols[:, 0]]
        - p_pos[:, 1, None] * bank.prototypes[pos_cols[:, 1]]
    ) / tau

    # ppd against the same-domain class prototype
    own = protos[col]
    gap = 1.0 - np.einsum("nd,nd->n", emb, own)
    ppd = gap * gap
    g_ppd = -2.0 * gap[:, None] * own

    loss = ce + config.lambda1 * ppc + config.lambda2 * ppd
    grad = g_ce + config.lambda1 * g_ppc + config.lambda2 * g_ppd
    return loss, grad
