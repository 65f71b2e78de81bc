"""Staged training: speaker encoder, backbone, then the two weight heads.

Stage "1a" trains the speaker encoder with an identity triplet loss and "1b"
the backbone with the recognition loss. Stage "2" introduces enhancement
weights and trains encoder, backbone, and enhancement head jointly. Stage "3"
freezes encoder and enhancement head and trains backbone plus suppression
head. Each stage gets a fresh optimiser and a stage-derived RNG stream, so a
stage rerun from a checkpoint reproduces the original run exactly.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import Tensor

from .config import STAGE_NAMES, ExperimentConfig
from .data import DatasetSplits, VideoClip, budget_subset, build_splits
from .evaluation import score_split
from .losses import LossConfig, cross_entropy, ctc_loss, stage_loss, triplet_loss_batch
from .metrics import MetricsWriter
from .model import LipAdaptModel, build_model, stack_clips

_TRAIN_SALT = 0xC7A9
_ADAPT_SALT = 0xD28B
_STAGE_CODES = {"1a": 0, "1b": 1, "2": 2, "3": 3}
_STAGE_PREREQS = {"1a": (), "1b": (), "2": ("1a", "1b"), "3": ("2",)}

GRAD_CLIP_NORM = 5.0


class StageOrderError(RuntimeError):
    """A stage was started before its prerequisites completed."""


@dataclass
class TripletBatch:
    anchor: VideoClip
    positive: VideoClip
    negative: VideoClip


@dataclass
class TrainState:
    """Mutable training progress: the model plus stage bookkeeping."""

    config: ExperimentConfig
    model: LipAdaptModel
    completed: list[str] = field(default_factory=list)
    alpha_sup: float | None = None
    history: list[dict] = field(default_factory=list)


def _triplet_indices(speakers: np.ndarray, rng: np.random.Generator, k: int):
    """k (anchor, positive, negative) index triples over a speaker-labelled pool."""
    uniq, counts = np.unique(speakers, return_counts=True)
    if len(uniq) < 2 or counts.max() < 2:
        raise ValueError("triplet sampling needs 2+ speakers, one with 2+ clips")
    eligible = np.flatnonzero(np.isin(speakers, uniq[counts >= 2]))
    anchors = np.empty(k, dtype=np.int64)
    positives = np.empty(k, dtype=np.int64)
    negatives = np.empty(k, dtype=np.int64)
    for i in range(k):
        a = int(eligible[rng.integers(len(eligible))])
        same = np.flatnonzero(speakers == speakers[a])
        same = same[same != a]
        p = int(same[rng.integers(len(same))])
        other = np.flatnonzero(speakers != speakers[a])
        n = int(other[rng.integers(len(other))])
        anchors[i], positives[i], negatives[i] = a, p, n
    return anchors, positives, negatives


def sample_triplet(clips: list[VideoClip], rng: np.random.Generator) -> TripletBatch:
    """One (anchor, positive, negative) clip triple: same/same/other speaker."""
    speakers = np.array([c.speaker_id for c in clips])
    a, p, n = _triplet_indices(speakers, rng, 1)
    return TripletBatch(clips[int(a[0])], clips[int(p[0])], clips[int(n[0])])


def _effective_loss_cfg(model: LipAdaptModel, loss_cfg: LossConfig) -> LossConfig:
    """Zero out weight-map triplet terms whose head the model does not have."""
    out = replace(loss_cfg)
    if model.enh_head is None:
        out.enh_weight = 0.0
    if model.sup_head is None:
        out.sup_weight = 0.0
    return out


def _trainable_groups(stage: str, model: LipAdaptModel, loss_cfg: LossConfig) -> list[str]:
    if stage == "1a":
        return ["verifier"]
    if stage == "1b":
        return ["backbone"]
    if stage == "2":
        groups = ["backbone"]
        if loss_cfg.id_weight > 0 or model.enh_head is not None:
            groups.insert(0, "verifier")
        if model.enh_head is not None:
            groups.append("enh_head")
        return groups
    if stage == "3":
        groups = ["backbone"]
        if model.sup_head is not None:
            groups.append("sup_head")
        return groups
    raise ValueError(f"unknown stage {stage!r}")


def _vsr_loss(model: LipAdaptModel, acts_logits: Tensor, labels, prob_floor: float) -> Tensor:
    if model.cfg.task == "word":
        return cross_entropy(acts_logits, labels, prob_floor)
    log_probs = torch.log_softmax(acts_logits, dim=2)
    losses = [ctc_loss(log_probs[i], labels[i]) for i in range(len(labels))]
    return torch.stack(losses).mean()


def _labels_for(model: LipAdaptModel, clips: list[VideoClip], idx) -> list | Tensor:
    if model.cfg.task == "word":
        return torch.tensor([int(clips[i].content) for i in idx], dtype=torch.long)
    out = []
    for i in idx:
        c = clips[i].content
        out.append(c if isinstance(c, tuple) else (int(c),))
    return out


@torch.no_grad()
def calibrate_sup_margin(
    model: LipAdaptModel,
    clips: list[VideoClip],
    batch_size: int,
    rng: np.random.Generator,
    margin_enh: float,
) -> float:
    """Scale the suppression margin to the suppression maps' own spread.

    margin_enh times the ratio of the empirical standard deviations of the
    flattened suppression and enhancement maps over one warmup batch (raw
    embeddings stand in for the reference when no enhancement head exists).
    Suppression weights live in (0, 1] while enhancement weights live in
    [1, inf), so a margin tuned for one scale is wrong for the other.
    """
    speakers = np.array([c.speaker_id for c in clips])
    a_idx, _, n_idx = _triplet_indices(speakers, rng, batch_size)
    xa = stack_clips([clips[i] for i in a_idx])
    xn = stack_clips([clips[i] for i in n_idx])
    theta = torch.cat([model.embed_speaker(xa), model.embed_speaker(xn)])
    s_sup = float(model.suppression_weights(theta).std())
    if model.enh_head is not None:
        s_ref = float(model.enhancement_weights(theta).std())
    else:
        s_ref = float(theta.std())
    return margin_enh * s_sup / max(s_ref, 1e-12)


def run_stage(
    state: TrainState,
    stage: str,
    splits: DatasetSplits,
    metrics: MetricsWriter | None = None,
    eval_each_epoch: bool = False,
) -> TrainState:
    """Run one training stage in place; returns the same state for chaining."""
    if stage not in STAGE_NAMES:
        raise ValueError(f"unknown stage {stage!r}")
    if stage in state.completed:
        raise StageOrderError(f"stage {stage!r} already completed")
    missing = [s for s in _STAGE_PREREQS[stage] if s not in state.completed]
    if missing:
        raise StageOrderError(f"stage {stage!r} requires stages {missing} first")

    cfg = state.config
    model = state.model
    spec = cfg.stages[stage]
    loss_cfg = _effective_loss_cfg(model, cfg.loss)
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, _TRAIN_SALT, _STAGE_CODES[stage]))
    )

    # Introduce the heads at their stage boundaries; from here on the maps are
    # part of every forward pass, including evaluation.
    if stage == "2" and model.enh_head is not None:
        model.enh_active = True
    if stage == "3" and model.sup_head is not None:
        model.sup_active = True

    margin_sup = loss_cfg.margin_sup
    if stage == "3" and loss_cfg.sup_weight > 0 and margin_sup is None:
        state.alpha_sup = calibrate_sup_margin(
            model, splits.train, spec.batch_size, rng, loss_cfg.margin_enh
        )
        margin_sup = state.alpha_sup
        if metrics:
            metrics.event("margin_calibration", stage=stage, margin_sup=margin_sup)
    if margin_sup is None:
        margin_sup = loss_cfg.margin_enh

    groups = model.parameter_groups()
    trainable_names = _trainable_groups(stage, model, loss_cfg)
    trainable = [p for name in trainable_names for p in groups[name]]
    for name, params in groups.items():
        flag = name in trainable_names
        for p in params:
            p.requires_grad_(flag)
    optimiser = torch.optim.Adam(trainable, lr=spec.lr)

    clips = splits.train
    speakers = np.array([c.speaker_id for c in clips])
    train_x = stack_clips(clips)
    n = len(clips)

    use_vsr = stage != "1a" and loss_cfg.vsr_weight > 0
    use_id = stage in ("1a", "2") and loss_cfg.id_weight > 0
    use_enh = stage == "2" and model.enh_head is not None and loss_cfg.enh_weight > 0
    use_sup = stage == "3" and model.sup_head is not None and loss_cfg.sup_weight > 0
    verifier_trainable = "verifier" in trainable_names

    if metrics:
        metrics.event(
            "stage_start",
            stage=stage,
            epochs=spec.epochs,
            lr=spec.lr,
            batch_size=spec.batch_size,
            trainable=trainable_names,
        )

    model.train()
    step = 0
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            components: dict[str, Tensor] = {}
            if use_vsr:
                acts, _, _, _ = model.conditioned_forward(train_x[idx])
                labels = _labels_for(model, clips, idx)
                components["vsr"] = _vsr_loss(model, acts.logits, labels, loss_cfg.prob_floor)
            if use_id or use_enh or use_sup:
                k = len(idx)
                ia, ip, inn = _triplet_indices(speakers, rng, k)
                trip_x = train_x[np.concatenate([ia, ip, inn])]
                if verifier_trainable:
                    theta = model.embed_speaker(trip_x)
                else:
                    with torch.no_grad():
                        theta = model.embed_speaker(trip_x)
                th_a, th_p, th_n = theta[:k], theta[k : 2 * k], theta[2 * k :]
                if use_id:
                    components["id"] = triplet_loss_batch(
                        th_a, th_p, th_n, loss_cfg.margin_id
                    )
                if use_enh:
                    maps = model.enhancement_weights(theta)
                    components["enh"] = triplet_loss_batch(
                        maps[:k], maps[k : 2 * k], maps[2 * k :], loss_cfg.margin_enh
                    )
                if use_sup:
                    maps = model.suppression_weights(theta.detach())
                    components["sup"] = triplet_loss_batch(
                        maps[:k], maps[k : 2 * k], maps[2 * k :], margin_sup
                    )
            total, logged = stage_loss(stage, components, loss_cfg)
            optimiser.zero_grad(set_to_none=True)
            total.backward()
            torch.nn.utils.clip_grad_norm_(trainable, GRAD_CLIP_NORM)
            optimiser.step()
            step += 1
            record = {
                "event": "step",
                "stage": stage,
                "epoch": epoch,
                "step": step,
                "loss": float(total.detach()),
                "components": logged,
            }
            state.history.append(record)
            epoch_losses.append(float(total.detach()))
            if metrics:
                metrics.append(record)
        if metrics:
            epoch_record = {
                "event": "epoch",
                "stage": stage,
                "epoch": epoch,
                "mean_loss": sum(epoch_losses) / max(len(epoch_losses), 1),
            }
            if eval_each_epoch and splits.unseen_test:
                report = score_split(model, splits.unseen_test, "unseen_test")
                epoch_record["unseen_" + report.metric] = report.value
                model.train()
            metrics.append(epoch_record)

    for params in groups.values():
        for p in params:
            p.requires_grad_(True)
    state.completed.append(stage)
    if metrics:
        metrics.event("stage_end", stage=stage, steps=step)
    return state


def train_full(
    config: ExperimentConfig,
    splits: DatasetSplits | None = None,
    metrics: MetricsWriter | None = None,
    eval_each_epoch: bool = False,
) -> TrainState:
    """Build data and model from config and run all four stages in order."""
    config.validate()
    if splits is None:
        d = config.data
        splits = build_splits(
            d.n_train_speakers,
            d.n_unseen_speakers,
            d.n_words,
            d.clips_per_speaker,
            config.seed,
            **config.build_splits_kwargs(),
        )
    model = build_model(config.model_config(), config.seed)
    state = TrainState(config=config, model=model)
    for stage in STAGE_NAMES:
        run_stage(state, stage, splits, metrics, eval_each_epoch)
    return state


def adapt(
    state: TrainState,
    adaptation_clips: list[VideoClip],
    budget_minutes: float,
    metrics: MetricsWriter | None = None,
) -> TrainState:
    """Fine-tune a copy of the model on a budget-limited slice of one speaker's clips.

    All parameter groups train at the adaptation learning rate; a zero budget
    (or zero epochs) returns an identical copy untouched.
    """
    cfg = state.config
    a = cfg.adaptation
    new_state = TrainState(
        config=cfg,
        model=copy.deepcopy(state.model),
        completed=list(state.completed),
        alpha_sup=state.alpha_sup,
        history=[],
    )
    rng = np.random.default_rng(
        np.random.SeedSequence(
            (cfg.seed, _ADAPT_SALT, int(round(budget_minutes * 1000)))
        )
    )
    subset = budget_subset(adaptation_clips, budget_minutes, cfg.data.fps, rng)
    if metrics:
        metrics.event(
            "adapt_start",
            budget_minutes=budget_minutes,
            n_clips=len(subset),
            lr=a.lr,
            epochs=a.epochs,
        )
    if not subset or a.epochs == 0:
        return new_state

    model = new_state.model
    model.train()
    for p in model.parameters():
        p.requires_grad_(True)
    optimiser = torch.optim.Adam(model.parameters(), lr=a.lr)
    x = stack_clips(subset)
    n = len(subset)
    for epoch in range(a.epochs):
        order = rng.permutation(n)
        for start in range(0, n, a.batch_size):
            idx = order[start : start + a.batch_size]
            acts, _, _, _ = model.conditioned_forward(x[idx])
            labels = _labels_for(model, subset, idx)
            loss = _vsr_loss(model, acts.logits, labels, cfg.loss.prob_floor)
            optimiser.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP_NORM)
            optimiser.step()
            if metrics:
                metrics.event(
                    "adapt_step",
                    budget_minutes=budget_minutes,
                    epoch=epoch,
                    loss=float(loss.detach()),
                )
    return new_state


def adaptation_sweep(
    state: TrainState,
    splits: DatasetSplits,
    budgets: tuple[float, ...] | None = None,
    metrics: MetricsWriter | None = None,
) -> dict[float, float]:
    """Mean unseen-speaker test score after per-speaker adaptation at each budget."""
    cfg = state.config
    budgets = cfg.adaptation.budgets_min if budgets is None else budgets
    results: dict[float, float] = {}
    for budget in budgets:
        scores = []
        for speaker in sorted(splits.adaptation):
            adapted = adapt(state, splits.adaptation[speaker], budget)
            test = [c for c in splits.unseen_test if c.speaker_id == speaker]
            if not test:
                continue
            report = score_split(adapted.model, test, f"unseen_s{speaker}")
            scores.append(report.value)
        results[budget] = float(np.mean(scores)) if scores else float("nan")
        if metrics:
            metrics.event("adaptation_budget", budget_minutes=budget, score=results[budget])
    return results
