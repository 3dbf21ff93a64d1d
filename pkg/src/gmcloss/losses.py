"""Fusion contrastive loss, margin contrastive loss, caption stand-in loss and their sum."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

TAU1, TAU2, TAU3 = 0.2, 1.0, 0.07
ORIENTATIONS = ("literal", "complement")
TERMS = ("l_gen", "l_bfcl", "l_b", "l_mcl")


def norm_term(logits_row: ad.Tensor, positive_index: int, tau: float = TAU2) -> ad.Tensor:
    """log softmax(row / tau)[positive]; the denominator holds the positive and every negative."""
    logits_row = ad.tensor(logits_row)
    if logits_row.ndim != 1 or logits_row.shape[0] < 2:
        raise ValueError(f"norm_term needs a row of at least 2 scores, got shape {logits_row.shape}")
    scaled = logits_row * (1.0 / tau)
    return scaled[positive_index] - ad.logsumexp(scaled, axis=0)


def loss_bfcl(fused: ad.Tensor, tau2: float = TAU2) -> ad.Tensor:
    """Bidirectional in-batch loss read off the fused B x B matrix (rows v->t, columns t->v)."""
    if fused.ndim != 2 or fused.shape[0] != fused.shape[1]:
        raise ad.ShapeError(f"loss_bfcl needs a square matrix, got {fused.shape}")
    b = fused.shape[0]
    if b < 2:
        raise ValueError("loss_bfcl needs B >= 2")
    scaled = fused * (1.0 / tau2)
    diag = np.arange(b)
    v2t = ad.log_softmax(scaled, axis=1)[diag, diag]
    t2v = ad.log_softmax(scaled, axis=0)[diag, diag]
    return ad.mean(v2t + t2v) * -0.5


def _below_pi(theta: np.ndarray, m: np.ndarray) -> np.ndarray:
    # fl(theta + (pi - theta)) can land one ulp above pi
    m = m.copy()
    over = theta + m > math.pi
    while np.any(over):
        m[over] = np.nextafter(m[over], -np.inf)
        over = theta + m > math.pi
    return m


def margin(xi, theta, orientation: str = "literal") -> ad.Tensor:
    """min(xi, pi - theta) (``literal``) or min(pi - xi, pi - theta) (``complement``).

    ``xi`` is a constant; gradient reaches ``theta`` only on the clamp branch.
    Ties go to the xi branch.
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(f"unknown margin orientation {orientation!r}")
    theta = ad.tensor(theta)
    xi = np.asarray(xi, dtype=np.float64)
    if orientation == "complement":
        xi = math.pi - xi
    m = ad.minimum(ad.Tensor(np.broadcast_to(xi, theta.shape).copy()), math.pi - theta)
    fixed = _below_pi(theta.data, np.atleast_1d(m.data)).reshape(m.shape)
    if np.array_equal(fixed, m.data):
        return m
    return m + ad.Tensor(fixed - m.data)


def loss_mcl(cos_matrix: ad.Tensor, theta_matrix: ad.Tensor, xi: Sequence[float],
             tau3: float = TAU3, orientation: str = "literal") -> tuple[ad.Tensor, ad.Tensor]:
    """Summed margin contrastive loss (v->t only). Returns (loss, per-pair margins).

    Positive logits are cos(theta_ii + M_ii) / tau3, negatives the plain cosines.
    """
    b = cos_matrix.shape[0]
    if cos_matrix.ndim != 2 or cos_matrix.shape != theta_matrix.shape or cos_matrix.shape[1] != b:
        raise ad.ShapeError(f"loss_mcl needs matching square matrices, got {cos_matrix.shape}")
    if b < 2:
        raise ValueError("loss_mcl needs B >= 2")
    diag = np.arange(b)
    theta_pos = theta_matrix[diag, diag]
    m = margin(np.asarray(xi, dtype=np.float64), theta_pos, orientation)
    pos = ad.cos(theta_pos + m)
    eye = np.eye(b)
    logits = (cos_matrix * (1.0 - eye) + ad.reshape(pos, (b, 1)) * eye) * (1.0 / tau3)
    logp = ad.log_softmax(logits, axis=1)
    return -ad.tsum(logp[diag, diag]), m


def loss_gen(videos: ad.Tensor, token_ids: Sequence[Sequence[int]], pos_emb: ad.Tensor,
             w_out: ad.Tensor, b_out: ad.Tensor) -> ad.Tensor:
    """Mean token cross-entropy of a position-wise classifier on (video + position embedding).

    A simplified stand-in for the captioning objective of the base model.
    Captions are truncated to the number of position embeddings.
    """
    max_len = pos_emb.shape[0]
    rows, pos, gold = [], [], []
    for i, ids in enumerate(token_ids):
        if not ids:
            log.warning("empty caption at batch row %d contributes nothing to l_gen", i)
        for p, t in enumerate(ids[:max_len]):
            rows.append(i)
            pos.append(p)
            gold.append(t)
    if not gold:
        return ad.Tensor(0.0)
    rows, pos = np.array(rows), np.array(pos)
    hidden = videos[rows] + pos_emb[pos]
    logp = ad.log_softmax(ad.affine(hidden, w_out, b_out), axis=1)
    return -ad.mean(logp[np.arange(len(gold)), np.array(gold)])


@dataclass
class LossReport:
    l_b: float = 0.0
    l_bfcl: float = 0.0
    l_mcl: float = 0.0
    l_gen: float = 0.0
    l_gmc: float = 0.0
    margins: list[float] = field(default_factory=list)
    inactive: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "l_b": self.l_b, "l_bfcl": self.l_bfcl, "l_mcl": self.l_mcl,
            "l_gen": self.l_gen, "l_gmc": self.l_gmc,
        }


def loss_gmc(terms: dict[str, ad.Tensor | None], weights: dict[str, float] | None = None,
             margins: ad.Tensor | None = None) -> tuple[ad.Tensor, LossReport]:
    """Weighted sum of the active terms (unit weights by default).

    A term that is missing or ``None`` is inactive: it contributes nothing and
    is reported as 0.
    """
    weights = weights or {}
    total = ad.Tensor(0.0)
    report = LossReport()
    for name in TERMS:
        t = terms.get(name)
        if t is None:
            report.inactive.append(name)
            continue
        w = weights.get(name, 1.0)
        value = t.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite {name}")
        setattr(report, name, value)
        total = total + t * w
    report.l_gmc = total.item()
    if margins is not None:
        report.margins = margins.data.tolist()
    return total, report


def equalize_margined_angles(xi_head: float, xi_tail: float, total_angle: float,
                             lr: float = 0.05, steps: int = 20000, tol: float = 1e-12
                             ) -> dict[str, float]:
    """Projected gradient ascent of cos(theta_a + M_a) + cos(theta_b + M_b) on theta_a + theta_b = C.

    Margins follow the literal min(xi, pi - theta) rule. Pair ``a`` carries
    the head bias angle, pair ``b`` the tail one.
    """
    theta = ad.Tensor(np.full(2, total_angle / 2.0), requires_grad=True)
    xi = np.array([xi_head, xi_tail])
    direction = np.array([1.0, -1.0]) / math.sqrt(2.0)
    for _ in range(steps):
        m = margin(xi, theta)
        obj = ad.tsum(ad.cos(theta + m))
        theta.zero_grad()
        obj.backward()
        step = lr * float(theta.grad @ direction) * direction
        new = np.clip(theta.data + step, 0.0, math.pi)
        # re-project onto the constraint after clipping
        new += (total_angle - new.sum()) / 2.0
        moved = float(np.abs(new - theta.data).max())
        theta.data = new
        if moved < tol:
            break
    m = margin(xi, ad.Tensor(theta.data)).data
    return {
        "theta_head": float(theta.data[0]), "theta_tail": float(theta.data[1]),
        "margin_head": float(m[0]), "margin_tail": float(m[1]),
    }
