"""Decoding, scoring, linear layer probes, and weight-map separability.

The layer probe trains a zero-initialised linear classifier on pooled site
activations for a fixed budget; its held-out accuracy measures how linearly
decodable a factor (speaker identity or content) is at that site.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .data import VideoClip
from .model import SITE_TAGS, LipAdaptModel, stack_clips

_EVAL_BATCH = 64


def greedy_ctc_decode(frame_log_probs: np.ndarray) -> tuple[int, ...]:
    """Best-path decode: per-frame argmax, collapse repeats, drop blanks.

    The blank is the last column. Ties take the lowest index (np.argmax order).
    """
    if frame_log_probs.ndim != 2:
        raise ValueError("expected (T, n_classes) scores")
    blank = frame_log_probs.shape[1] - 1
    path = np.argmax(frame_log_probs, axis=1)
    out = []
    prev = None
    for idx in path:
        if idx != prev and idx != blank:
            out.append(int(idx))
        prev = idx
    return tuple(out)


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    ref = tuple(ref)
    hyp = tuple(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(
                prev[j] + 1,  # delete from ref
                cur[j - 1] + 1,  # insert into ref
                prev[j - 1] + (r != h),
            )
        prev = cur
    return prev[-1]


@dataclass
class MetricsReport:
    """Score summary for one split; ``value`` is accuracy (word) or error rate."""

    split: str
    task: str
    n_samples: int
    metric: str
    value: float
    per_speaker: dict = field(default_factory=dict)
    raw_edits: int = 0
    raw_ref_len: int = 0

    def to_record(self) -> dict:
        return {
            "split": self.split,
            "task": self.task,
            "n_samples": self.n_samples,
            "metric": self.metric,
            "value": self.value,
            "per_speaker": {str(k): v for k, v in sorted(self.per_speaker.items())},
        }


def _batched(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


@torch.no_grad()
def score_split(
    model: LipAdaptModel,
    clips: list[VideoClip],
    split_name: str = "eval",
    batch_size: int = _EVAL_BATCH,
    apply_enh: bool | None = None,
    apply_sup: bool | None = None,
) -> MetricsReport:
    """Word accuracy, or symbol error rate (edits / reference length) for sequences.

    The reported error rate is clamped to 1.0; raw edit and length sums are
    kept alongside so nothing is lost to the clamp.
    """
    if not clips:
        raise ValueError("cannot score an empty split")
    model.eval()
    task = model.cfg.task
    per_speaker: dict[int, dict] = {}
    correct = 0
    edits = 0
    ref_len = 0
    for batch in _batched(clips, batch_size):
        x = stack_clips(batch)
        acts, _, _, _ = model.conditioned_forward(x, apply_enh=apply_enh, apply_sup=apply_sup)
        logits = acts.logits.cpu().numpy()
        for clip, row in zip(batch, logits):
            stats = per_speaker.setdefault(
                clip.speaker_id,
                {"n": 0, "correct": 0} if task == "word" else {"n": 0, "edits": 0, "ref_len": 0},
            )
            stats["n"] += 1
            if task == "word":
                hit = int(np.argmax(row)) == int(clip.content)
                correct += hit
                stats["correct"] += hit
            else:
                hyp = greedy_ctc_decode(row)
                ref = clip.content if isinstance(clip.content, tuple) else (clip.content,)
                e = edit_distance(ref, hyp)
                edits += e
                ref_len += len(ref)
                stats["edits"] += e
                stats["ref_len"] += len(ref)
    if task == "word":
        for stats in per_speaker.values():
            stats["accuracy"] = stats["correct"] / stats["n"]
        return MetricsReport(
            split=split_name,
            task=task,
            n_samples=len(clips),
            metric="word_accuracy",
            value=correct / len(clips),
            per_speaker=per_speaker,
        )
    for stats in per_speaker.values():
        stats["error_rate"] = min(1.0, stats["edits"] / max(stats["ref_len"], 1))
    return MetricsReport(
        split=split_name,
        task=task,
        n_samples=len(clips),
        metric="symbol_error_rate",
        value=min(1.0, edits / max(ref_len, 1)),
        per_speaker=per_speaker,
        raw_edits=edits,
        raw_ref_len=ref_len,
    )


@torch.no_grad()
def site_features(
    model: LipAdaptModel,
    clips: list[VideoClip],
    site: str,
    batch_size: int = _EVAL_BATCH,
    apply_enh: bool | None = None,
    apply_sup: bool | None = None,
) -> np.ndarray:
    """Time-and-space mean-pooled activations at a site, one row per clip."""
    if site not in SITE_TAGS:
        raise ValueError(f"unknown site {site!r}")
    model.eval()
    rows = []
    for batch in _batched(clips, batch_size):
        x = stack_clips(batch)
        acts, _, _, _ = model.conditioned_forward(x, apply_enh=apply_enh, apply_sup=apply_sup)
        feats = acts.by_tag(site)
        if feats.dim() == 5:  # (B, T, C, H, W) -> pool time and space
            pooled = feats.mean(dim=(1, 3, 4))
        else:  # (B, T, D) backend sequence -> pool time
            pooled = feats.mean(dim=1)
        rows.append(pooled.cpu().double().numpy())
    return np.concatenate(rows, axis=0)


def _probe_labels(clips: list[VideoClip], factor: str) -> np.ndarray:
    if factor == "identity":
        keys = [c.speaker_id for c in clips]
    elif factor == "content":
        keys = [c.content for c in clips]
    else:
        raise ValueError(f"unknown probe factor {factor!r}")
    classes = sorted(set(keys), key=str)
    index = {k: i for i, k in enumerate(classes)}
    return np.array([index[k] for k in keys], dtype=np.int64)


def _fit_linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int,
    epochs: int = 200,
    lr: float = 0.05,
    train_fraction: float = 0.75,
) -> float:
    """Held-out accuracy of a linear softmax probe under a fixed training budget.

    Features are standardised with train-split statistics; the probe starts at
    zero so constant features can never beat chance except by label imbalance.
    """
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features must be (n, d) aligned with labels")
    n = features.shape[0]
    n_classes = int(labels.max()) + 1
    if n_classes < 2 or n < 8:
        raise ValueError("probe needs >= 2 classes and >= 8 samples")

    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xF0B3)))
    train_idx: list[int] = []
    test_idx: list[int] = []
    for cls in range(n_classes):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        cut = max(1, int(round(train_fraction * len(members))))
        if cut == len(members) and len(members) > 1:
            cut -= 1
        train_idx.extend(members[:cut])
        test_idx.extend(members[cut:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))
    if len(test_idx) == 0:
        raise ValueError("probe split left no held-out samples")

    mean = features[train_idx].mean(axis=0)
    std = features[train_idx].std(axis=0) + 1e-8
    fx = (features - mean) / std

    x_train = torch.from_numpy(fx[train_idx])
    y_train = torch.from_numpy(labels[train_idx])
    x_test = torch.from_numpy(fx[test_idx])
    weight = torch.zeros(features.shape[1], n_classes, dtype=torch.float64, requires_grad=True)
    bias = torch.zeros(n_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([weight, bias], lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        logits = x_train @ weight + bias
        loss = torch.nn.functional.cross_entropy(logits, y_train)
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = (x_test @ weight + bias).argmax(dim=1).numpy()
    return float(np.mean(pred == labels[test_idx]))


def layer_probe(
    model: LipAdaptModel,
    clips: list[VideoClip],
    site: str,
    factor: str,
    probe_seed: int = 0,
    apply_enh: bool | None = None,
    apply_sup: bool | None = None,
) -> float:
    """Linear decodability of ``factor`` ("identity" or "content") at ``site``."""
    features = site_features(model, clips, site, apply_enh=apply_enh, apply_sup=apply_sup)
    labels = _probe_labels(clips, factor)
    return _fit_linear_probe(features, labels, probe_seed)


class SeparabilityResult(NamedTuple):
    ratio: float
    degenerate: bool


@torch.no_grad()
def weight_separability(
    model: LipAdaptModel,
    clips: list[VideoClip],
    head: str,
    batch_size: int = _EVAL_BATCH,
) -> SeparabilityResult:
    """Cross-speaker over within-speaker mean squared map distance.

    A ratio near 1 means the head emits speaker-independent maps. If both
    spreads collapse to ~0 the ratio is reported as 1 with ``degenerate`` set.
    """
    if head == "enh":
        if model.enh_head is None:
            raise ValueError("model has no enhancement head")
        make = model.enhancement_weights
    elif head == "sup":
        if model.sup_head is None:
            raise ValueError("model has no suppression head")
        make = model.suppression_weights
    else:
        raise ValueError(f"unknown head {head!r}")
    speakers = np.array([c.speaker_id for c in clips])
    if len(set(speakers.tolist())) < 2:
        raise ValueError("need clips from at least 2 speakers")
    counts = {s: int(np.sum(speakers == s)) for s in set(speakers.tolist())}
    if all(c < 2 for c in counts.values()):
        raise ValueError("need at least one speaker with 2+ clips")

    model.eval()
    maps = []
    for batch in _batched(clips, batch_size):
        theta = model.embed_speaker(stack_clips(batch))
        maps.append(make(theta).reshape(len(batch), -1).cpu().double().numpy())
    flat = np.concatenate(maps, axis=0)

    sq_norm = (flat**2).sum(axis=1)
    gram = flat @ flat.T
    d2 = sq_norm[:, None] + sq_norm[None, :] - 2.0 * gram
    iu = np.triu_indices(len(clips), k=1)
    same = speakers[iu[0]] == speakers[iu[1]]
    d2 = np.maximum(d2[iu], 0.0)
    within = float(d2[same].mean()) if same.any() else 0.0
    across = float(d2[~same].mean())
    eps = 1e-12
    degenerate = within <= eps and across <= eps
    if degenerate:
        return SeparabilityResult(1.0, True)
    return SeparabilityResult(across / (within + eps), within <= eps)
