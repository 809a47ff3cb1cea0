"""Bidirectional InfoNCE over an image-text similarity matrix.

The matching pair on the diagonal is classified against all in-batch
candidates in both directions; the total is the mean of the two directional
losses. ``grouped_metrics`` splits the same per-example quantities by the
composite/plain mask so the two groups partition the total exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class GroupedLossReport:
    """Batch loss plus its decomposition over composite and plain examples."""

    total: float
    loss_i2t: float
    loss_t2i: float
    composite_loss: float | None
    plain_loss: float | None
    composite_cossim: float | None
    plain_cossim: float | None
    composite_count: int
    plain_count: int


def similarity_matrix(z_i: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
    """Pairwise dot products: S[i][j] = z_i[i] . z_t[j]."""
    if z_i.ndim != 2 or z_t.ndim != 2 or z_i.shape != z_t.shape:
        raise ValueError(f"embedding shapes must match, got {tuple(z_i.shape)} vs {tuple(z_t.shape)}")
    return z_i @ z_t.T


def info_nce(S: torch.Tensor, tau) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Bidirectional InfoNCE on a square similarity matrix.

    Returns (total, image-to-text, text-to-image) as differentiable scalars.
    Rows and columns are log-softmaxed with max-subtraction (mandatory at
    small tau, where logits reach +-1/tau).
    """
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {tuple(S.shape)}")
    tau = torch.as_tensor(tau, dtype=S.dtype) if not torch.is_tensor(tau) else tau
    if float(tau) <= 0:
        raise ValueError("temperature must be positive")
    logits = S / tau
    diag = torch.diagonal(logits)
    loss_i2t = (torch.logsumexp(logits, dim=1) - diag).mean()
    loss_t2i = (torch.logsumexp(logits, dim=0) - diag).mean()
    total = (loss_i2t + loss_t2i) / 2
    return total, loss_i2t, loss_t2i


def per_example_loss(S: torch.Tensor, tau) -> torch.Tensor:
    """Per-example bidirectional loss: mean of example i's row and column terms.

    Averaging these over the batch reproduces the total exactly, so any
    partition of the batch decomposes the total into group means.
    """
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {tuple(S.shape)}")
    tau = torch.as_tensor(tau, dtype=S.dtype) if not torch.is_tensor(tau) else tau
    logits = S / tau
    diag = torch.diagonal(logits)
    row = torch.logsumexp(logits, dim=1) - diag
    col = torch.logsumexp(logits, dim=0) - diag
    return (row + col) / 2


def grouped_metrics(S: torch.Tensor, tau, composed_mask) -> GroupedLossReport:
    """Split loss and matched-pair similarity by the composite/plain mask.

    Empty groups report None rather than NaN. The count-weighted mean of the
    two group losses equals the total.
    """
    mask = torch.as_tensor(composed_mask, dtype=torch.bool)
    if mask.shape != (S.shape[0],):
        raise ValueError(f"mask length {tuple(mask.shape)} does not match batch size {S.shape[0]}")
    with torch.no_grad():
        per_example = per_example_loss(S, tau)
        total, loss_i2t, loss_t2i = info_nce(S, tau)
        diag = torch.diagonal(S)

        def group(values: torch.Tensor, sel: torch.Tensor) -> float | None:
            return float(values[sel].mean()) if bool(sel.any()) else None

        return GroupedLossReport(
            total=float(total),
            loss_i2t=float(loss_i2t),
            loss_t2i=float(loss_t2i),
            composite_loss=group(per_example, mask),
            plain_loss=group(per_example, ~mask),
            composite_cossim=group(diag, mask),
            plain_cossim=group(diag, ~mask),
            composite_count=int(mask.sum()),
            plain_count=int((~mask).sum()),
        )
