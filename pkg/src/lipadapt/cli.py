"""Command-line pipeline: gen-data, train, adapt, eval, probe.

Every command takes a config file and works inside a run directory named by
the config hash, so outputs are attributable to the exact configuration that
produced them. Exit codes: 0 success, 2 bad config or usage, 3 missing
prerequisite artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import checkpoint as ckpt
from .config import ConfigError, ExperimentConfig, parse_config, write_config
from .data import build_splits, load_dataset, save_dataset
from .evaluation import layer_probe, score_split, weight_separability
from .metrics import MetricsWriter, round_floats
from .model import SITE_TAGS, build_model
from .training import TrainState, adapt, adaptation_sweep, run_stage
from .config import STAGE_NAMES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4

OUT_ROOT_ENV = "LIPADAPT_OUT_ROOT"


class MissingArtifactError(RuntimeError):
    """A required input (dataset, checkpoint) has not been produced yet."""


def run_dir(cfg: ExperimentConfig) -> str:
    root = os.environ.get(OUT_ROOT_ENV, cfg.output_dir)
    return os.path.join(root, cfg.run_id)


def _prepare_run(cfg: ExperimentConfig) -> tuple[str, MetricsWriter]:
    rd = run_dir(cfg)
    os.makedirs(rd, exist_ok=True)
    write_config(cfg, os.path.join(rd, "config.ini"))
    return rd, MetricsWriter(os.path.join(rd, "metrics.jsonl"))


def _load_data(cfg: ExperimentConfig, rd: str):
    data_dir = os.path.join(rd, "data")
    if not os.path.exists(os.path.join(data_dir, "manifest.tsv")):
        raise MissingArtifactError(
            f"no dataset under {data_dir}; run `lipadapt gen-data` first"
        )
    return load_dataset(data_dir)


def _load_checkpoint(path: str):
    if not os.path.exists(path):
        raise MissingArtifactError(
            f"no checkpoint at {path}; run `lipadapt train` first"
        )
    return ckpt.load_checkpoint(path)


def _ckpt_extra(cfg: ExperimentConfig, state: TrainState, stage: str) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "run_id": cfg.run_id,
        "stage": stage,
        "completed": list(state.completed),
        "alpha_sup": state.alpha_sup,
    }


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    rd, metrics = _prepare_run(cfg)
    d = cfg.data
    splits = build_splits(
        d.n_train_speakers,
        d.n_unseen_speakers,
        d.n_words,
        d.clips_per_speaker,
        cfg.seed,
        **cfg.build_splits_kwargs(),
    )
    save_dataset(splits, os.path.join(rd, "data"), header=f"config_hash={cfg.config_hash()}")
    metrics.event(
        "gen_data",
        run_id=cfg.run_id,
        n_train=len(splits.train),
        n_unseen_test=len(splits.unseen_test),
        n_adaptation={str(k): len(v) for k, v in sorted(splits.adaptation.items())},
    )
    print(f"[lipadapt gen-data] run={cfg.run_id} train={len(splits.train)} "
          f"test={len(splits.unseen_test)}")
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    rd, metrics = _prepare_run(cfg)
    splits = _load_data(cfg, rd)
    metrics.event("train_begin", run_id=cfg.run_id, config_hash=cfg.config_hash())
    model = build_model(cfg.model_config(), cfg.seed)
    state = TrainState(config=cfg, model=model)
    ckpt_dir = os.path.join(rd, "checkpoints")
    for stage in STAGE_NAMES:
        run_stage(state, stage, splits, metrics, eval_each_epoch=True)
        ckpt.save_checkpoint(
            os.path.join(ckpt_dir, f"stage_{stage}.ckpt"), model, _ckpt_extra(cfg, state, stage)
        )
    ckpt.save_checkpoint(os.path.join(ckpt_dir, "final.ckpt"), model, _ckpt_extra(cfg, state, "final"))
    report = score_split(state.model, splits.unseen_test, "unseen_test")
    metrics.append({"event": "train_end", **round_floats(report.to_record())})
    print(f"[lipadapt train] run={cfg.run_id} unseen_{report.metric}={report.value:.4f}")
    return EXIT_OK


def _restore_state(cfg: ExperimentConfig, path: str) -> TrainState:
    model, header = _load_checkpoint(path)
    extra = header.get("extra", {})
    return TrainState(
        config=cfg,
        model=model,
        completed=list(extra.get("completed", [])),
        alpha_sup=extra.get("alpha_sup"),
    )


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    rd, metrics = _prepare_run(cfg)
    splits = _load_data(cfg, rd)
    path = args.checkpoint or os.path.join(rd, "checkpoints", "final.ckpt")
    state = _restore_state(cfg, path)
    pools = {
        "train": splits.train,
        "unseen": splits.unseen_test,
        "adapt": [c for s in sorted(splits.adaptation) for c in splits.adaptation[s]],
    }
    report = score_split(state.model, pools[args.split], args.split)
    metrics.append({"event": "eval", **round_floats(report.to_record())})
    print(f"[lipadapt eval] run={cfg.run_id} split={args.split} "
          f"{report.metric}={report.value:.6f} n={report.n_samples}")
    return EXIT_OK


def cmd_adapt(args, cfg: ExperimentConfig) -> int:
    rd, metrics = _prepare_run(cfg)
    splits = _load_data(cfg, rd)
    path = args.checkpoint or os.path.join(rd, "checkpoints", "final.ckpt")
    state = _restore_state(cfg, path)
    budgets = (args.budget_min,) if args.budget_min is not None else cfg.adaptation.budgets_min
    if args.per_speaker:
        for budget in budgets:
            for speaker in sorted(splits.adaptation):
                adapted = adapt(state, splits.adaptation[speaker], budget, metrics)
                out = os.path.join(
                    rd, "checkpoints", f"adapted_s{speaker:03d}_b{_fmt_budget(budget)}.ckpt"
                )
                ckpt.save_checkpoint(out, adapted.model, _ckpt_extra(cfg, adapted, "adapted"))
    results = adaptation_sweep(state, splits, budgets, metrics)
    for budget in budgets:
        print(f"[lipadapt adapt] run={cfg.run_id} budget_min={budget:g} "
              f"score={results[budget]:.4f}")
    return EXIT_OK


def _fmt_budget(budget: float) -> str:
    return f"{budget:g}".replace(".", "p")


def cmd_probe(args, cfg: ExperimentConfig) -> int:
    rd, metrics = _prepare_run(cfg)
    splits = _load_data(cfg, rd)
    path = args.checkpoint or os.path.join(rd, "checkpoints", "final.ckpt")
    state = _restore_state(cfg, path)
    clips = splits.unseen_test
    rows = []
    for site in SITE_TAGS:
        for factor in ("identity", "content"):
            acc = layer_probe(state.model, clips, site, factor, probe_seed=cfg.seed)
            rows.append((site, factor, cfg.seed, acc))
            metrics.event("probe", site=site, factor=factor, accuracy=round(acc, 6))
    for head in ("enh", "sup"):
        head_attr = state.model.enh_head if head == "enh" else state.model.sup_head
        if head_attr is not None:
            result = weight_separability(state.model, clips, head)
            metrics.event(
                "separability",
                head=head,
                ratio=round(result.ratio, 6),
                degenerate=result.degenerate,
            )
    probe_path = os.path.join(rd, "probes.csv")
    with open(probe_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={cfg.config_hash()} run_id={cfg.run_id}\n")
        fh.write("site,factor,seed,accuracy\n")
        for site, factor, seed, acc in rows:
            fh.write(f"{site},{factor},{seed},{acc:.6f}\n")
    print(f"[lipadapt probe] run={cfg.run_id} wrote {probe_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lipadapt",
        description="Speaker-adaptive lip reading on synthetic talking-face clips.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="INI experiment config")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "render the dataset for this config")
    add("train", cmd_train, "run all training stages and write checkpoints")
    p_eval = add("eval", cmd_eval, "score a checkpoint on a split")
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--split", default="unseen", choices=("train", "unseen", "adapt"))
    p_adapt = add("adapt", cmd_adapt, "fine-tune per unseen speaker under a data budget")
    p_adapt.add_argument("--checkpoint", default=None)
    p_adapt.add_argument("--budget-min", type=float, default=None)
    p_adapt.add_argument(
        "--per-speaker", action="store_true", help="also write adapted checkpoints"
    )
    p_probe = add("probe", cmd_probe, "linear probes and weight-map separability")
    p_probe.add_argument("--checkpoint", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args, cfg)
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - boundary: map anything else to exit 4
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
