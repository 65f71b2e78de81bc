"""Acceptance suite: exact oracles, invariants, and directional trend checks.

Each criterion is one test that emits a single PASS/FAIL line (written past
pytest's capture so the line always reaches the console). The trend criteria
share trained models through module-scoped fixtures; everything runs on CPU
from fixed seeds.
"""

import itertools
import math
import os
import subprocess
import sys
import tempfile

import numpy as np
import pytest
import torch

from lipadapt.config import config_from_mapping
from lipadapt.data import build_splits
from lipadapt.evaluation import (
    edit_distance,
    layer_probe,
    score_split,
    weight_separability,
)
from lipadapt.losses import ctc_feasible, ctc_loss, triplet_loss
from lipadapt.model import (
    ModelConfig,
    build_model,
    sigma_enhance,
    sigma_suppress,
    stack_clips,
)
from lipadapt.training import adaptation_sweep, train_full

torch.set_num_threads(max(1, os.cpu_count() or 1))

SEEDS = (0, 1, 2, 3, 4)


def verdict(criterion: int, ok: bool, detail: str) -> None:
    line = f"[criterion {criterion:02d}] {'PASS' if ok else 'FAIL'} {detail}\n"
    sys.__stdout__.write(line)
    sys.__stdout__.flush()
    assert ok, line.strip()


# =============================================================================
# Criterion 1: activation range invariants
# =============================================================================

def test_criterion_01_activation_ranges():
    g = torch.Generator().manual_seed(101)
    h = torch.randn(1_000_000, generator=g) * 5.0
    enh = sigma_enhance(h)
    sup = sigma_suppress(h)
    ok = bool((enh >= 1.0).all()) and bool((sup > 0.0).all()) and bool((sup <= 1.0).all())
    verdict(
        1,
        ok,
        f"1e6 samples N(0,5^2): enhance in [{enh.min():.6f}, {enh.max():.3e}], "
        f"suppress in [{sup.min():.3e}, {sup.max():.6f}]",
    )


# =============================================================================
# Criterion 2: identity equivalence of all-ones weight maps
# =============================================================================

def test_criterion_02_identity_equivalence():
    splits = build_splits(
        5, 1, 5, 20, 202, adapt_clips_per_speaker=1, test_clips_per_speaker=1
    )
    clips = splits.train[:100]
    assert len(clips) == 100
    model = build_model(ModelConfig(n_classes=5), seed=202)
    model.eval()
    x = stack_clips(clips)
    cfg = model.cfg
    ones_enh = torch.ones(100, *cfg.shallow_site_shape)
    ones_sup = torch.ones(100, *cfg.deep_site_shape)
    with torch.no_grad():
        plain = model.backbone(x)
        conditioned = model.backbone(x, enh_weights=ones_enh, sup_weights=ones_sup)
    diff = float((plain.logits - conditioned.logits).abs().max())
    ok = diff <= 1e-10
    verdict(2, ok, f"100 clips, all-ones maps: max |logit diff| = {diff:.3e} (tol 1e-10)")


# =============================================================================
# Criterion 3: CTC against brute-force path enumeration
# =============================================================================

def _collapse(path: tuple, blank: int) -> tuple:
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def _path_groups(n_frames: int, n_cols: int) -> dict:
    """Map collapsed label -> (n_paths, n_frames) index array, for all paths."""
    groups: dict[tuple, list] = {}
    for path in itertools.product(range(n_cols), repeat=n_frames):
        groups.setdefault(_collapse(path, n_cols - 1), []).append(path)
    return {k: np.array(v, dtype=np.int64) for k, v in groups.items()}


def test_criterion_03_ctc_oracle():
    rng = np.random.default_rng(303)
    worst = 0.0
    n_cases = 0
    for n_frames in range(1, 7):
        for n_symbols in range(1, 4):
            groups = _path_groups(n_frames, n_symbols + 1)
            for label_len in range(0, 4):
                labels = set()
                for label in itertools.product(range(n_symbols), repeat=label_len):
                    if ctc_feasible(n_frames, label):
                        labels.add(label)
                if not labels:
                    continue
                for _ in range(100):
                    probs = rng.dirichlet(np.ones(n_symbols + 1), size=n_frames)
                    label = sorted(labels)[rng.integers(len(labels))]
                    paths = groups.get(label)
                    total = (
                        probs[np.arange(n_frames), paths].prod(axis=1).sum()
                        if paths is not None
                        else 0.0
                    )
                    mine = float(ctc_loss(torch.log(torch.from_numpy(probs)), label))
                    worst = max(worst, abs(mine - (-math.log(total))))
                    n_cases += 1
    ok = worst <= 1e-9
    verdict(3, ok, f"{n_cases} cases over T<=6, |V|<=3, |label|<=3: max |diff| = {worst:.3e}")


# =============================================================================
# Criterion 4: finite-difference gradient checks on tiny instances
# =============================================================================

def _tiny_model_cfg(task: str) -> ModelConfig:
    return ModelConfig(
        n_classes=3,
        task=task,
        frames=6,
        height=16,
        width=16,
        d_id=2,
        verifier_channels=(2, 2),
        frontend_channels=2,
        block_channels=(2, 2, 2, 2),
        backend_hidden=2,
        head_seed_channels=1,
    )


def _fd_check(model, loss_fn, params, step=1e-5, tol=1e-4):
    """Check every coordinate of ``params``; returns (checked, failed, worst).

    A coordinate whose finite-difference estimate is unstable under a smaller
    step (a kink crossing) is excluded rather than failed, per the
    differentiability contract of the piecewise activations.
    """
    model.zero_grad()
    loss_fn().backward()
    checked = failed = excluded = 0
    worst = 0.0

    def fd_at(flat, i, h):
        orig = flat[i].item()
        flat[i] = orig + h
        with torch.no_grad():
            lp = loss_fn().item()
        flat[i] = orig - h
        with torch.no_grad():
            lm = loss_fn().item()
        flat[i] = orig
        return (lp - lm) / (2 * h)

    for p in params:
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        flat, gflat = p.data.view(-1), grad.view(-1)
        for i in range(flat.numel()):
            fd = fd_at(flat, i, step)
            an = gflat[i].item()
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            if err > tol:
                fd2 = fd_at(flat, i, step / 10)
                if abs(fd2 - fd) / max(abs(fd), abs(fd2), 1e-6) > 1e-3:
                    excluded += 1  # kink: estimate not step-stable
                    continue
                err2 = abs(fd2 - an) / max(abs(fd2), abs(an), 1e-6)
                if err2 > tol:
                    failed += 1
                    worst = max(worst, err2)
                checked += 1
                continue
            checked += 1
            worst = max(worst, err)
    return checked, failed, excluded, worst


def test_criterion_04_gradient_checks():
    g = torch.Generator().manual_seed(404)
    results = []
    ok = True

    word = build_model(_tiny_model_cfg("word"), seed=404).double()
    word.enh_active = word.sup_active = True
    word.train()
    n_params = sum(p.numel() for p in word.parameters())
    assert n_params <= 1000
    x = torch.rand(3, 1, 6, 16, 16, generator=g, dtype=torch.float64)
    groups = word.parameter_groups()

    def params_of(*names):
        return [p for n in names for p in groups[n]]

    from lipadapt.losses import cross_entropy

    labels = torch.tensor([0, 1, 2])

    def loss_ce():
        acts, _, _, _ = word.conditioned_forward(x)
        return cross_entropy(acts.logits, labels, 1e-12)

    def loss_id():
        theta = word.embed_speaker(x)
        return triplet_loss(theta[0], theta[1], theta[2], 5.0)

    def loss_enh():
        theta = word.embed_speaker(x)
        maps = word.enhancement_weights(theta)
        return triplet_loss(maps[0], maps[1], maps[2], 5.0)

    def loss_sup():
        theta = word.embed_speaker(x).detach()
        maps = word.suppression_weights(theta)
        return triplet_loss(maps[0], maps[1], maps[2], 1.0)

    cases = [
        ("recognition-ce", word, loss_ce, params_of("backbone", "verifier", "enh_head", "sup_head")),
        ("identity-triplet", word, loss_id, params_of("verifier")),
        ("enhance-triplet", word, loss_enh, params_of("verifier", "enh_head")),
        ("suppress-triplet", word, loss_sup, params_of("sup_head")),
    ]

    sent = build_model(_tiny_model_cfg("sentence"), seed=405).double()
    sent.enh_active = sent.sup_active = True
    sent.train()
    assert sum(p.numel() for p in sent.parameters()) <= 1000
    xs = torch.rand(3, 1, 6, 16, 16, generator=g, dtype=torch.float64)
    seqs = [(0, 1), (1,), (2, 0)]

    def loss_ctc():
        acts, _, _, _ = sent.conditioned_forward(xs)
        logp = torch.log_softmax(acts.logits, dim=2)
        return torch.stack([ctc_loss(logp[i], seqs[i]) for i in range(3)]).mean()

    cases.append(("recognition-ctc", sent, loss_ctc, list(sent.parameters())))

    for name, model, fn, params in cases:
        checked, failed, excluded, worst = _fd_check(model, fn, params)
        rate = 1.0 - failed / max(checked, 1)
        results.append(f"{name} {rate * 100:.2f}% ({checked} coords, {excluded} kinks, worst {worst:.1e})")
        ok = ok and rate >= 0.99
    verdict(4, ok, "; ".join(results))


# =============================================================================
# Criterion 5: triplet loss properties
# =============================================================================

def test_criterion_05_triplet_properties():
    g = torch.Generator().manual_seed(505)
    margin = 1.0
    d = 16
    a = torch.randn(10_000, d, generator=g, dtype=torch.float64)
    p = torch.randn(10_000, d, generator=g, dtype=torch.float64)
    n = torch.randn(10_000, d, generator=g, dtype=torch.float64)
    losses = torch.stack([triplet_loss(a[i], p[i], n[i], margin) for i in range(10_000)])
    nonneg = bool((losses >= 0).all())

    d_ap = ((a - p) ** 2).sum(dim=1)
    d_an = ((a - n) ** 2).sum(dim=1)
    satisfied = d_an - d_ap >= margin
    zero_when_satisfied = bool((losses[satisfied] == 0).all())
    n_zero = int(satisfied.sum())

    q, _ = torch.linalg.qr(torch.randn(d, d, generator=g, dtype=torch.float64))
    max_dev = 0.0
    for i in range(200):
        base = float(triplet_loss(a[i], p[i], n[i], margin))
        rotated = float(triplet_loss(a[i] @ q, p[i] @ q, n[i] @ q, margin))
        max_dev = max(max_dev, abs(base - rotated))
    ok = nonneg and zero_when_satisfied and max_dev <= 1e-10
    verdict(
        5,
        ok,
        f"1e4 triples nonneg={nonneg}, exact zero on {n_zero} satisfied triples="
        f"{zero_when_satisfied}, orthogonal dev {max_dev:.2e} (tol 1e-10)",
    )


# =============================================================================
# Criterion 6: edit distance metric axioms
# =============================================================================

def test_criterion_06_edit_distance():
    rng = np.random.default_rng(606)
    seqs = [tuple(rng.integers(0, 5, size=rng.integers(0, 8))) for _ in range(120)]
    ok = True
    for _ in range(1000):
        a, b, c = (seqs[rng.integers(len(seqs))] for _ in range(3))
        dab, dba = edit_distance(a, b), edit_distance(b, a)
        ok = ok and dab == dba and dab >= 0 and (dab == 0) == (a == b)
        ok = ok and dab <= edit_distance(a, c) + edit_distance(c, b)
    fixed = (
        edit_distance((1, 2, 3), (1, 2, 3)) == 0
        and edit_distance((0, 1), (1, 0)) == 2
        and edit_distance("kitten", "sitting") == 3
    )
    ok = ok and fixed
    verdict(6, ok, f"1000 random triples + fixed cases (0, 2, kitten/sitting=3): axioms={ok}")


# =============================================================================
# Shared trained models for the trend criteria (7-10)
# =============================================================================

BENCH_CONFIGS = ("full", "no_enh", "no_sup", "no_triplet", "baseline")

# Benchmark used for the ablation/adaptation criteria. Differences from the
# config defaults, and why: 8 unseen speakers x 50 test clips cut the eval
# noise on per-seed comparisons to ~1.5 points; stages 2/3 run longer at a
# lower lr so attaching a head does not churn the already-fitted backbone;
# the map hinges get a high separation target (margin 5.0) at low weight
# (0.3), a gentle sustained push instead of a hard shove. Recognition
# epochs are identical across every configuration.
BENCH_DATA = {
    "n_unseen_speakers": "8",
    "test_clips_per_speaker": "50",
}
BENCH_STAGES = {
    "stage_1a": {"epochs": "5"},
    "stage_1b": {"epochs": "12"},
    "stage_2": {"epochs": "8", "lr": "5e-4"},
    "stage_3": {"epochs": "8", "lr": "5e-4"},
}
BENCH_HINGE = {"margin_enh": "5.0", "enh_weight": "0.3", "sup_weight": "0.3"}


def bench_config(name: str, seed: int):
    mapping: dict = {
        "experiment": {"seed": str(seed)},
        "data": dict(BENCH_DATA),
        "loss": dict(BENCH_HINGE),
        "model": {},
        **{k: dict(v) for k, v in BENCH_STAGES.items()},
    }
    if name == "no_enh":
        mapping["model"]["use_enhancement"] = "false"
    elif name == "no_sup":
        mapping["model"]["use_suppression"] = "false"
    elif name == "no_triplet":
        mapping["loss"]["enh_weight"] = "0"
        mapping["loss"]["sup_weight"] = "0"
    elif name == "baseline":
        mapping["model"]["use_enhancement"] = "false"
        mapping["model"]["use_suppression"] = "false"
        mapping["loss"]["id_weight"] = "0"
        mapping["stage_1a"]["epochs"] = "0"
    elif name != "full":
        raise ValueError(name)
    return config_from_mapping(mapping)


def default_config(seed: int):
    """Everything at package defaults; only the seed is set."""
    return config_from_mapping({"experiment": {"seed": str(seed)}})


def _splits_for(cfg):
    d = cfg.data
    return build_splits(
        d.n_train_speakers,
        d.n_unseen_speakers,
        d.n_words,
        d.clips_per_speaker,
        cfg.seed,
        **cfg.build_splits_kwargs(),
    )


@pytest.fixture(scope="module")
def bench_runs():
    """Train the ablation grid on every seed; cache accuracies and diagnostics."""
    runs: dict = {"acc": {}, "sep": {}, "full": {}, "splits": {}}
    for seed in SEEDS:
        splits = _splits_for(bench_config("full", seed))
        runs["splits"][seed] = splits
        for name in BENCH_CONFIGS:
            state = train_full(bench_config(name, seed), splits=splits)
            report = score_split(state.model, splits.unseen_test, "unseen")
            runs["acc"][(name, seed)] = report.value
            for head in ("enh", "sup"):
                head_mod = state.model.enh_head if head == "enh" else state.model.sup_head
                if head_mod is not None:
                    runs["sep"][(name, seed, head)] = weight_separability(
                        state.model, splits.unseen_test, head
                    ).ratio
            if name == "full":
                runs["full"][seed] = state
    return runs


@pytest.fixture(scope="module")
def default_runs():
    """Full-method models trained at the package defaults, one per seed."""
    out = []
    for seed in SEEDS:
        cfg = default_config(seed)
        splits = _splits_for(cfg)
        out.append((train_full(cfg, splits=splits), splits))
    return out


@pytest.fixture(scope="module")
def probe_runs(default_runs):
    """Layer probes on the default-config models."""
    out = []
    for seed, (state, splits) in zip(SEEDS, default_runs):
        probes = {
            (site, factor): layer_probe(state.model, splits.train, site, factor, probe_seed=seed)
            for site in ("shallow", "backend")
            for factor in ("identity", "content")
        }
        out.append(probes)
    return out


def test_stage_losses_decrease_on_defaults(default_runs):
    """Epoch-mean stage loss drops from the first to the last epoch of every
    stage, checked per seed with one failing seed tolerated."""
    bad_seeds = []
    for seed, (state, _) in zip(SEEDS, default_runs):
        by_stage: dict = {}
        for rec in state.history:
            by_stage.setdefault(rec["stage"], {}).setdefault(rec["epoch"], []).append(
                rec["loss"]
            )
        for stage, epochs in by_stage.items():
            first = np.mean(epochs[min(epochs)])
            last = np.mean(epochs[max(epochs)])
            if len(epochs) > 1 and not last < first:
                bad_seeds.append((seed, stage, float(first), float(last)))
    failing = {s for s, *_ in bad_seeds}
    assert len(failing) <= 1, f"stage loss failed to decrease: {bad_seeds}"


def test_trained_maps_separate_speakers(default_runs):
    """After full training the weight maps are speaker-separable (ratio > 1)."""
    wins = 0
    for state, splits in default_runs:
        ratios = [
            weight_separability(state.model, splits.unseen_test, head).ratio
            for head in ("enh", "sup")
        ]
        wins += all(r > 1.0 for r in ratios)
    assert wins >= 4, f"separability ratio <= 1 on {5 - wins} of 5 seeds"


def test_trained_verifier_separates_speakers(default_runs):
    """Same-speaker embeddings sit closer than cross-speaker ones on >= 80%
    of sampled triplets, even for speakers never seen in training."""
    wins = 0
    for seed, (state, splits) in zip(SEEDS, default_runs):
        clips = splits.unseen_test
        with torch.no_grad():
            theta = state.model.embed_speaker(stack_clips(clips))
        speakers = np.array([c.speaker_id for c in clips])
        rng = np.random.default_rng(seed + 800)
        hits = 0
        for _ in range(200):
            a = rng.integers(len(clips))
            same = np.flatnonzero(speakers == speakers[a])
            diff = np.flatnonzero(speakers != speakers[a])
            p = same[rng.integers(len(same))]
            while p == a:
                p = same[rng.integers(len(same))]
            n = diff[rng.integers(len(diff))]
            d_ap = float(((theta[a] - theta[p]) ** 2).sum())
            d_an = float(((theta[a] - theta[n]) ** 2).sum())
            hits += d_ap < d_an
        wins += hits >= 160
    assert wins >= 4, f"verifier triplet accuracy below 80% on {5 - wins} of 5 seeds"


# =============================================================================
# Criterion 7: shallow layers encode speaker identity, the backend encodes content
# =============================================================================

def test_criterion_07_probe_trends(probe_runs):
    id_over_content = 0
    content_gain_wins = 0
    details = []
    for probes in probe_runs:
        id_s = probes[("shallow", "identity")]
        ct_s = probes[("shallow", "content")]
        id_b = probes[("backend", "identity")]
        ct_b = probes[("backend", "content")]
        if id_s > ct_s:
            id_over_content += 1
        if (ct_b - ct_s) > (id_b - id_s):
            content_gain_wins += 1
        details.append(f"(idS={id_s:.2f} ctS={ct_s:.2f} idB={id_b:.2f} ctB={ct_b:.2f})")
    ok = id_over_content >= 4 and content_gain_wins >= 4
    verdict(
        7,
        ok,
        f"identity>content at shallow site in {id_over_content}/5 seeds, "
        f"content gain>identity gain to backend in {content_gain_wins}/5: "
        + " ".join(details),
    )


# =============================================================================
# Criterion 8: full method vs ablations and baseline on unseen speakers
# =============================================================================

def test_criterion_08_ablation_direction(bench_runs):
    acc = bench_runs["acc"]
    means = {
        name: float(np.mean([acc[(name, s)] for s in SEEDS])) for name in BENCH_CONFIGS
    }
    beats = sum(acc[("full", s)] > acc[("baseline", s)] for s in SEEDS)
    ok = (
        all(means["full"] >= means[name] for name in BENCH_CONFIGS if name != "full")
        and beats >= 4
    )
    verdict(
        8,
        ok,
        "mean unseen accuracy "
        + " ".join(f"{k}={v:.3f}" for k, v in means.items())
        + f"; full>baseline in {beats}/5 seeds",
    )


# =============================================================================
# Criterion 9: weight-map triplet losses prevent collapse across speakers
# =============================================================================

def test_criterion_09_anti_collapse(bench_runs):
    sep = bench_runs["sep"]
    wins = {"enh": 0, "sup": 0}
    for seed in SEEDS:
        for head in ("enh", "sup"):
            if sep[("full", seed, head)] > sep[("no_triplet", seed, head)]:
                wins[head] += 1
    ok = wins["enh"] >= 4 and wins["sup"] >= 4
    verdict(
        9,
        ok,
        f"separability(with losses) > separability(without) in {wins['enh']}/5 (enhance) "
        f"and {wins['sup']}/5 (suppress) seeds",
    )


# =============================================================================
# Criterion 10: accuracy is non-decreasing in the adaptation budget
# =============================================================================

def test_criterion_10_adaptation_sweep(bench_runs):
    budgets = (0.0, 1.0, 3.0, 5.0)
    per_budget = {b: [] for b in budgets}
    for seed in SEEDS:
        results = adaptation_sweep(
            bench_runs["full"][seed], bench_runs["splits"][seed], budgets
        )
        for b in budgets:
            per_budget[b].append(results[b])
    means = {b: float(np.mean(v)) for b, v in per_budget.items()}
    ok = means[1.0] <= means[3.0] + 1e-12 and means[3.0] <= means[5.0] + 1e-12
    ok = ok and means[5.0] > means[0.0]
    verdict(
        10,
        ok,
        "mean unseen accuracy by budget (synthetic minutes): "
        + " ".join(f"{b:g}min={means[b]:.3f}" for b in budgets),
    )


# =============================================================================
# Criterion 11: byte-identical metrics across two full pipeline runs
# =============================================================================

REPRO_INI = """
[experiment]
seed = 13

[data]
n_train_speakers = 5
n_unseen_speakers = 2
n_words = 6
clips_per_speaker = 8
adapt_clips_per_speaker = 6
test_clips_per_speaker = 6

[stage_1a]
epochs = 2

[stage_1b]
epochs = 4

[stage_2]
epochs = 2

[stage_3]
epochs = 2
"""


def _run_pipeline(cfg_path: str, out_root: str) -> dict:
    env = dict(os.environ, LIPADAPT_OUT_ROOT=out_root)
    for command in (("gen-data",), ("train",), ("eval", "--split", "unseen")):
        proc = subprocess.run(
            [sys.executable, "-m", "lipadapt.cli", *command, "--config", cfg_path],
            capture_output=True,
            text=True,
            env=env,
        )
        assert proc.returncode == 0, f"{command}: {proc.stderr}"
    run_dirs = os.listdir(out_root)
    assert len(run_dirs) == 1
    rd = os.path.join(out_root, run_dirs[0])
    out = {}
    for rel in ("metrics.jsonl", os.path.join("checkpoints", "final.ckpt")):
        with open(os.path.join(rd, rel), "rb") as fh:
            out[rel] = fh.read()
    return out


def test_criterion_11_reproducibility(tmp_path_factory):
    base = tmp_path_factory.mktemp("repro")
    cfg_path = os.path.join(base, "repro.ini")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        fh.write(REPRO_INI)
    a = _run_pipeline(cfg_path, os.path.join(base, "run_a"))
    b = _run_pipeline(cfg_path, os.path.join(base, "run_b"))
    same_metrics = a["metrics.jsonl"] == b["metrics.jsonl"]
    same_ckpt = a[os.path.join("checkpoints", "final.ckpt")] == b[
        os.path.join("checkpoints", "final.ckpt")
    ]
    ok = same_metrics and same_ckpt
    verdict(
        11,
        ok,
        f"two gen-data->train->eval runs: metrics byte-identical={same_metrics}, "
        f"final checkpoint byte-identical={same_ckpt} "
        f"({len(a['metrics.jsonl'])} metric bytes)",
    )
