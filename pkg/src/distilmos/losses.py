"""Training objectives.

``total = mos_loss + alpha * mean_n(aux_loss_n)``, where the per-layer
auxiliary loss is token cross-entropy (self-distillation) or embedding MSE
(the regression ablation). Frame averages only count unmasked frames and
batch reduction is a plain mean over utterances.
"""

from __future__ import annotations

import dataclasses

import torch

from .errors import AllFramesMasked, NonFiniteInput, ShapeMismatch, TargetOutOfRange

DEFAULT_ALPHA = 0.1


@dataclasses.dataclass
class LossBreakdown:
    l_mos: torch.Tensor
    l_aux_per_layer: torch.Tensor  # [N] (empty when there is no auxiliary head)
    l_aux_mean: torch.Tensor
    total: torch.Tensor
    alpha: float

    # the token-prediction name used in logs and reports
    @property
    def l_ce_per_layer(self):
        return self.l_aux_per_layer

    def as_record(self):
        return {
            "l_mos": float(self.l_mos.detach()),
            "l_aux_mean": float(self.l_aux_mean.detach()),
            "total": float(self.total.detach()),
        }


def mos_loss(pred, target):
    """Squared error, averaged over the batch."""
    pred = torch.as_tensor(pred, dtype=torch.float64) if not torch.is_tensor(pred) else pred
    target = torch.as_tensor(target, dtype=pred.dtype)
    if not (torch.isfinite(pred).all() and torch.isfinite(target).all()):
        raise NonFiniteInput("non-finite MOS prediction or target")
    return ((pred - target) ** 2).mean()


def _frame_counts(mask):
    counts = mask.sum(dim=-1)
    if (counts == 0).any():
        raise AllFramesMasked("no unmasked frames")
    return counts


def token_ce_loss(logits, targets, mask=None):
    """Masked frame-mean cross-entropy.

    ``logits`` is ``[..., T, k]`` and ``targets``/``mask`` are ``[..., T]``.
    Returns one value per leading index (a scalar for a single sequence).
    """
    k = logits.shape[-1]
    targets = torch.as_tensor(targets, dtype=torch.long)
    if mask is None:
        mask = torch.ones(targets.shape, dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    valid = targets[mask]
    if len(valid) and (valid.min() < 0 or valid.max() >= k):
        raise TargetOutOfRange(f"token targets must lie in [0, {k})")
    counts = _frame_counts(mask)
    safe = torch.where(mask, targets, torch.zeros_like(targets))
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    return (nll * mask.to(nll.dtype)).sum(dim=-1) / counts.to(nll.dtype)


def embed_mse_loss(preds, targets, mask=None):
    """Per-layer squared error averaged over unmasked frames and channels.

    ``preds``/``targets`` are ``[N, T, D]`` (or batched ``[B, N, T, D]``,
    in which case the result is averaged over the batch). Returns ``[N]``.
    """
    if hasattr(targets, "features"):
        mask = targets.mask if mask is None else mask
        targets = targets.features
    if preds.shape != targets.shape:
        raise ShapeMismatch(f"preds {tuple(preds.shape)} vs targets {tuple(targets.shape)}")
    if mask is None:
        mask = torch.ones(preds.shape[:-3] + preds.shape[-2:-1], dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    counts = _frame_counts(mask).to(preds.dtype)
    m = mask.unsqueeze(-2).unsqueeze(-1).to(preds.dtype)  # [..., 1, T, 1]
    sq = ((preds - targets) ** 2 * m).sum(dim=(-2, -1))  # [..., N]
    per_layer = sq / (counts.unsqueeze(-1) * preds.shape[-1])
    return per_layer.reshape(-1, preds.shape[-3]).mean(dim=0)


def combined_loss(l_mos, aux_per_layer=None, alpha=DEFAULT_ALPHA):
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if not torch.is_tensor(l_mos):
        l_mos = torch.tensor(float(l_mos), dtype=torch.float64)
    if aux_per_layer is None or len(aux_per_layer) == 0:
        aux = l_mos.new_zeros(0)
        return LossBreakdown(l_mos, aux, l_mos.new_zeros(()), l_mos, alpha)
    aux = torch.as_tensor(aux_per_layer, dtype=l_mos.dtype) if not torch.is_tensor(aux_per_layer) else aux_per_layer
    aux_mean = aux.mean()
    total = l_mos + alpha * aux_mean if alpha else l_mos
    return LossBreakdown(l_mos, aux, aux_mean, total, alpha)


def compute_losses(output, mos_target, alpha=DEFAULT_ALPHA, token_targets=None, embed_targets=None):
    """Loss breakdown for a batched :class:`~distilmos.model.ForwardOutput`.

    ``token_targets`` is ``[B, N, T]``; ``embed_targets`` is ``[B, N, T, D]``.
    """
    l_mos = mos_loss(output.mos_pred, torch.as_tensor(mos_target).to(output.mos_pred.dtype))
    if output.token_logits is not None:
        if token_targets is None:
            raise ValueError("token targets required for token prediction")
        mask = output.mask.unsqueeze(1).expand(token_targets.shape)
        per = token_ce_loss(output.token_logits, token_targets, mask)  # [B, N]
        return combined_loss(l_mos, per.mean(dim=0), alpha)
    if output.embed_preds is not None:
        if embed_targets is None:
            raise ValueError("embedding targets required for MSE distillation")
        per = embed_mse_loss(output.embed_preds, embed_targets.to(output.embed_preds.dtype), output.mask)
        return combined_loss(l_mos, per, alpha)
    return combined_loss(l_mos, None, alpha)

