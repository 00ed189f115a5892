"""The four self-supervised loss terms and their weighted combination.

All losses are pure differentiable torch functions. The contrastive
alignment term includes the positive pair in its denominator by default
(guaranteeing nonnegativity); ``strict_paper_align=True`` switches to a
negatives-only denominator for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    lambda_rec: float = 1.0
    lambda_align: float = 0.5
    lambda_hsic: float = 0.2
    lambda_cls: float = 0.1

    def __post_init__(self):
        for name in ("lambda_rec", "lambda_align", "lambda_hsic", "lambda_cls"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossReport:
    rec: float
    align: float
    hsic: float
    cls: float
    total: float


def reconstruction_loss(pred, targets) -> torch.Tensor:
    """Mean over masked positions of the squared L2 prediction error.

    Accepts TokenSequence pairs or raw N x D tensors; TokenSequence inputs
    must agree on positions. Empty inputs give 0.
    """
    if hasattr(pred, "tokens"):
        if list(pred.positions) != list(targets.positions):
            raise ValueError("prediction/target positions do not match")
        pred, targets = pred.tokens, targets.tokens
    if pred.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(targets.shape)}")
    if pred.shape[0] == 0:
        return pred.new_zeros(())
    return ((pred - targets.detach()) ** 2).sum(dim=1).mean()


def alignment_loss(
    queries: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    tau: float,
    include_positive: bool = True,
) -> torch.Tensor:
    """Cross-modal InfoNCE over position-aligned pairs.

    ``queries``/``positives`` are N x D, ``negatives`` N x K x D. All
    embeddings are L2-normalized before the dot products.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if negatives.ndim != 3 or negatives.shape[0] != queries.shape[0]:
        raise ValueError("negatives must be N x K x D")
    if negatives.shape[1] < 1:
        raise ValueError("need at least one negative per query")
    for t in (queries, positives, negatives.reshape(-1, negatives.shape[-1])):
        if torch.any(t.norm(dim=-1) == 0):
            raise ValueError("zero-norm embedding")
    q = F.normalize(queries, dim=-1)
    p = F.normalize(positives, dim=-1)
    n = F.normalize(negatives, dim=-1)
    pos_sim = (q * p).sum(dim=-1, keepdim=True) / tau  # N x 1
    neg_sim = torch.einsum("nd,nkd->nk", q, n) / tau  # N x K
    if include_positive:
        denom = torch.logsumexp(torch.cat([pos_sim, neg_sim], dim=1), dim=1)
    else:
        denom = torch.logsumexp(neg_sim, dim=1)
    return (denom - pos_sim.squeeze(1)).mean()


def center_features(x: torch.Tensor) -> torch.Tensor:
    """Subtract the per-column mean; output columns sum to zero."""
    if x.shape[0] < 2:
        raise ValueError("need at least 2 rows to center")
    return x - x.mean(dim=0, keepdim=True)


def hsic_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Linear HSIC between two feature sets: ||Xc^T Yc||_F^2 / (n-1)^2."""
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row count mismatch: {x.shape[0]} vs {y.shape[0]}")
    n = x.shape[0]
    xc = center_features(x)
    yc = center_features(y)
    return (xc.T @ yc).pow(2).sum() / (n - 1) ** 2


def modality_bce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy from logits in numerically stable form."""
    if logits.numel() == 0:
        raise ValueError("empty input")
    if logits.shape != labels.shape:
        raise ValueError("logits/labels length mismatch")
    labels = labels.to(logits.dtype)
    # max(z,0) - z*m + log(1 + exp(-|z|))
    return (
        logits.clamp_min(0) - logits * labels + torch.log1p(torch.exp(-logits.abs()))
    ).mean()


def total_loss(
    rec: torch.Tensor,
    align: torch.Tensor,
    hsic: torch.Tensor,
    cls: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    for name, term in (("rec", rec), ("align", align), ("hsic", hsic), ("cls", cls)):
        if not torch.isfinite(torch.as_tensor(term)).all():
            raise ValueError(f"non-finite loss component: {name}")
    return (
        weights.lambda_rec * rec
        + weights.lambda_align * align
        + weights.lambda_hsic * hsic
        + weights.lambda_cls * cls
    )


def make_report(rec, align, hsic, cls, weights: LossWeights) -> LossReport:
    total = total_loss(rec, align, hsic, cls, weights)
    return LossReport(
        rec=float(rec),
        align=float(align),
        hsic=float(hsic),
        cls=float(cls),
        total=float(total),
    )
