"""Training objectives: metric triplet losses, word CE, sequence CTC, stage mixing.

The CTC negative log-likelihood is computed by an explicit forward recursion
over the blank-interleaved label in log space; gradients come from autograd.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import Tensor

# Stand-in for -inf in the recursion lattice. exp() of it underflows to exactly
# zero, but unlike a true -inf it keeps logsumexp gradients finite at states
# that are unreachable early in the recursion.
_LOG_ZERO = -1.0e9


class InfeasibleLabelError(ValueError):
    """The label cannot be aligned within the available number of frames."""


@dataclass
class LossConfig:
    """Weights and margins for the composite objectives of each training stage.

    ``margin_sup=None`` means "calibrate at stage start from the observed
    suppression-map distances" (see training.calibrate_sup_margin).
    """

    margin_id: float = 0.2
    margin_enh: float = 0.2
    margin_sup: float | None = None
    vsr_weight: float = 1.0
    id_weight: float = 1.0
    enh_weight: float = 1.0
    sup_weight: float = 1.0
    prob_floor: float = 1e-12

    def validate(self) -> None:
        for name in ("margin_id", "margin_enh"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.margin_sup is not None and self.margin_sup < 0:
            raise ValueError("margin_sup must be >= 0 or None")
        for name in ("vsr_weight", "id_weight", "enh_weight", "sup_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.prob_floor < 1.0:
            raise ValueError("prob_floor must be in (0, 1)")


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance over all elements (inputs are flattened)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a - b).reshape(-1)
    return torch.dot(diff, diff)


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """Hinge on squared distances: max(d(a,p) - d(a,n) + margin, 0)."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    gap = squared_distance(anchor, positive) - squared_distance(anchor, negative) + margin
    return torch.clamp(gap, min=0.0)


def triplet_loss_batch(
    anchor: Tensor, positive: Tensor, negative: Tensor, margin: float
) -> Tensor:
    """Mean hinge over a batch; each row of the inputs is one triple."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if not (anchor.shape == positive.shape == negative.shape):
        raise ValueError("triplet batch shapes must match")
    a = anchor.reshape(anchor.shape[0], -1)
    p = positive.reshape(positive.shape[0], -1)
    n = negative.reshape(negative.shape[0], -1)
    d_ap = ((a - p) ** 2).sum(dim=1)
    d_an = ((a - n) ** 2).sum(dim=1)
    return torch.clamp(d_ap - d_an + margin, min=0.0).mean()


def cross_entropy(logits: Tensor, labels, prob_floor: float = 1e-12) -> Tensor:
    """-log softmax probability of the label, floored, averaged over the batch."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    if logits.dim() != 2:
        raise ValueError("logits must be (n_classes,) or (batch, n_classes)")
    labels_t = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)
    if labels_t.numel() != logits.shape[0]:
        raise ValueError("label count must match the batch dimension")
    if int(labels_t.min()) < 0 or int(labels_t.max()) >= logits.shape[1]:
        raise ValueError("label index out of range")
    log_probs = torch.log_softmax(logits, dim=1)
    picked = log_probs[torch.arange(logits.shape[0]), labels_t]
    floor = torch.log(torch.tensor(prob_floor, dtype=logits.dtype, device=logits.device))
    return -(torch.maximum(picked, floor)).mean()


def ctc_feasible(n_frames: int, label) -> bool:
    repeats = sum(1 for i in range(1, len(label)) if label[i] == label[i - 1])
    return n_frames >= len(label) + repeats


def ctc_loss(frame_log_probs: Tensor, label, blank: int | None = None) -> Tensor:
    """CTC negative log-likelihood of ``label`` under per-frame log-probabilities.

    frame_log_probs: (T, n_symbols + 1) rows that each sum to one in
    probability space; the blank index defaults to the last column.
    """
    if frame_log_probs.dim() != 2:
        raise ValueError("frame_log_probs must be (T, n_classes)")
    n_frames, n_cols = frame_log_probs.shape
    if blank is None:
        blank = n_cols - 1
    if not 0 <= blank < n_cols:
        raise ValueError("blank index out of range")
    row_mass = torch.logsumexp(frame_log_probs.detach(), dim=1).exp()
    if bool((row_mass - 1.0).abs().max() > 1e-5):
        raise ValueError("frame_log_probs rows must be normalised distributions")

    label = [int(s) for s in label]
    if any(s < 0 or s >= n_cols or s == blank for s in label):
        raise ValueError("label symbols must avoid the blank index and stay in range")
    if not ctc_feasible(n_frames, label):
        raise InfeasibleLabelError(
            f"label of length {len(label)} needs more than {n_frames} frames"
        )

    # Blank-interleaved state sequence: [b, l1, b, l2, ..., b].
    ext = [blank]
    for s in label:
        ext.extend((s, blank))
    n_states = len(ext)
    ext_idx = torch.tensor(ext, dtype=torch.long, device=frame_log_probs.device)
    lp = frame_log_probs[:, ext_idx]  # (T, n_states)

    # A state may receive a skip transition (s-2 -> s) when it is a symbol that
    # differs from the symbol two states back.
    skip_ok = torch.zeros(n_states, dtype=torch.bool, device=lp.device)
    for s in range(2, n_states):
        skip_ok[s] = ext[s] != blank and ext[s] != ext[s - 2]

    log_zero = torch.full((1,), _LOG_ZERO, dtype=lp.dtype, device=lp.device)
    alpha = torch.cat(
        [lp[0, : min(2, n_states)], log_zero.expand(max(n_states - 2, 0))]
    )
    for t in range(1, n_frames):
        stay = alpha
        step = torch.cat([log_zero, alpha[:-1]])
        skip = torch.cat([log_zero.expand(min(2, n_states)), alpha[:-2]])
        skip = torch.where(skip_ok, skip, log_zero.expand(n_states))
        alpha = torch.logsumexp(torch.stack((stay, step, skip)), dim=0) + lp[t]

    tail = alpha[-1:] if n_states == 1 else alpha[-2:]
    return -torch.logsumexp(tail, dim=0)


# Loss terms entering each stage's total. Terms whose weight is zero may be
# omitted from the component map; all others are required.
STAGE_TERMS: dict[str, tuple[tuple[str, str], ...]] = {
    "1a": (("id", "id_weight"),),
    "1b": (("vsr", "vsr_weight"),),
    "2": (("vsr", "vsr_weight"), ("id", "id_weight"), ("enh", "enh_weight")),
    "3": (("vsr", "vsr_weight"), ("sup", "sup_weight")),
}


def stage_loss(stage: str, components: dict, cfg: LossConfig):
    """Weighted total for one stage plus the unweighted component values.

    ``components`` maps term name to a scalar loss (tensor or float). A term
    with a positive weight must be present; zero-weight terms are skipped.
    """
    if stage not in STAGE_TERMS:
        raise ValueError(f"unknown stage {stage!r}")
    total = None
    logged: dict[str, float] = {}
    for name, weight_attr in STAGE_TERMS[stage]:
        weight = float(getattr(cfg, weight_attr))
        if name not in components:
            if weight == 0.0:
                continue
            raise ValueError(f"stage {stage!r} requires loss component {name!r}")
        value = components[name]
        logged[name] = float(value.detach()) if torch.is_tensor(value) else float(value)
        term = weight * value
        total = term if total is None else total + term
    if total is None:
        raise ValueError(f"stage {stage!r} has no active loss components")
    return total, logged
