"""Command-line surface: synth, split, train, predict, evaluate, and the
ensemble subcommands. Exit codes: 0 ok, 2 config, 3 data format, 4 numeric."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import Manifest, SynthSpec, stratified_split, synth_corpus
from .ensemble import (
    Leaderboard,
    compare_strategies,
    ensemble_predict,
    select_all,
    select_explicit,
    select_intersection,
    select_topk,
    standard_strategies,
)
from .errors import ConfigError, DataFormatError, DomainError, TrainingError
from .losses import LOSS_KINDS, LossConfig
from .metrics import AXES, evaluate
from .model import AGGREGATIONS, ModelConfig, load_checkpoint, predict_manifest, save_checkpoint
from .training import TrainConfig, run_ablation_grid, standard_grid, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def write_predictions(path, utt_ids: list[str], preds: np.ndarray) -> None:
    lines = ["utt_id," + ",".join(AXES)]
    for utt_id, row in zip(utt_ids, preds):
        lines.append(utt_id + "," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"predictions file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "utt_id," + ",".join(AXES):
        raise DataFormatError(f"{path}: bad predictions header")
    utt_ids, rows = [], []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 1 + len(AXES):
            raise DataFormatError(f"{path}:{lineno}: expected {1 + len(AXES)} fields")
        utt_ids.append(parts[0])
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad score: {exc}") from exc
    return utt_ids, np.array(rows, dtype=np.float64)


def _aligned_scores(
    manifest: Manifest, utt_ids: list[str], preds: np.ndarray
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Align predictions with manifest labels; the id sets must match exactly."""
    by_id = manifest.by_id()
    missing = [u for u in utt_ids if u not in by_id]
    extra = [u.utt_id for u in manifest.entries if u.utt_id not in set(utt_ids)]
    if missing or extra:
        raise DataFormatError(
            f"utt_id mismatch between predictions and manifest: "
            f"{len(missing)} unknown, {len(extra)} missing"
        )
    labels = np.array([by_id[u].scores.as_array() for u in utt_ids])
    systems = [by_id[u].system_id for u in utt_ids]
    return preds, labels, systems


def _load_run_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad config JSON in {path}: {exc}") from exc
    allowed = {"model", "train", "data", "out_dir"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data = raw.get("data", {})
    data_allowed = {"train_manifest", "dev_manifest", "eval_manifests"}
    unknown = set(data) - data_allowed
    if unknown:
        raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
    return raw


def cmd_synth(args) -> int:
    dims = tuple(int(d) for d in args.dims.split(","))
    spec = SynthSpec(
        n_systems=args.systems,
        utts_per_system=args.per_system,
        encoder_dims=dims,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    manifest, _ = synth_corpus(spec, args.out)
    print(
        f"wrote {len(manifest)} utterances "
        f"({args.systems} systems x {args.per_system}), "
        f"encoders {spec.encoder_ids} -> {args.out}"
    )
    return EXIT_OK


def cmd_split(args) -> int:
    import os

    manifest = Manifest.load(args.manifest)
    train_m, dev_m = stratified_split(manifest, args.train_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # embedding paths are relative to their manifest; re-anchor them to out/
    src_root = manifest.root.resolve()
    for m in (train_m, dev_m):
        for u in m.entries:
            u.embedding_paths = {
                enc: rel
                if Path(rel).is_absolute()
                else os.path.relpath(src_root / rel, out.resolve())
                for enc, rel in u.embedding_paths.items()
            }
    train_m.save(out / "train.jsonl")
    dev_m.save(out / "dev.jsonl")
    print(f"split {len(manifest)} -> train {len(train_m)} / dev {len(dev_m)}")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = _load_run_config(args.config)
    model_cfg = ModelConfig.from_dict(raw.get("model", {}))
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    if args.seed is not None:
        model_cfg.seed = args.seed
        train_cfg.seed = args.seed
    if args.encoders:
        model_cfg = ModelConfig.from_dict(
            {**model_cfg.to_dict(), "encoders": args.encoders.split(",")}
        )
    if args.aggregation:
        model_cfg = ModelConfig.from_dict(
            {**model_cfg.to_dict(), "aggregation": args.aggregation}
        )
    if args.loss:
        loss = model_cfg.loss.to_dict()
        loss["kind"] = args.loss
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "loss": loss})

    data = raw.get("data", {})
    for key in ("train_manifest", "dev_manifest"):
        if key not in data:
            raise ConfigError(f"config missing data.{key}")
    cfg_dir = Path(args.config).parent
    train_manifest = Manifest.load(cfg_dir / data["train_manifest"])
    dev_manifest = Manifest.load(cfg_dir / data["dev_manifest"])
    eval_manifests = {
        name: Manifest.load(cfg_dir / p)
        for name, p in data.get("eval_manifests", {}).items()
    }

    out = Path(args.out or raw.get("out_dir") or "run")
    out.mkdir(parents=True, exist_ok=True)
    frozen = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "data": data,
    }
    (out / "config.json").write_text(json.dumps(frozen, indent=2), encoding="utf-8")

    if args.grid:
        cells = standard_grid(list(model_cfg.encoders))
        leaderboard = run_ablation_grid(
            cells,
            train_manifest,
            dev_manifest,
            eval_manifests,
            train_cfg,
            out,
            blstm_hidden=model_cfg.blstm_hidden,
            head_hidden=model_cfg.head_hidden,
        )
        leaderboard.save(out / "leaderboard.json")
        failures = sum(1 for r in leaderboard.rows if r.error is not None)
        print(f"grid: {len(leaderboard.rows)} rows, {failures} failures -> {out}")
        return EXIT_OK

    model, history = train(model_cfg, train_cfg, train_manifest, dev_manifest)
    save_checkpoint(model, out / "checkpoint.mck")
    (out / "history.json").write_text(history.to_json(), encoding="utf-8")
    print(
        f"trained {model_cfg.aggregation}/{model_cfg.loss.kind}: "
        f"best epoch {history.best_epoch}, stopped at {history.stopped_epoch} -> {out}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = Manifest.load(args.manifest)
    utt_ids, preds = predict_manifest(model, manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, utt_ids, preds)
    print(f"wrote {len(utt_ids)} predictions -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = Manifest.load(args.manifest)
    utt_ids, preds = read_predictions(args.predictions)
    preds, labels, systems = _aligned_scores(manifest, utt_ids, preds)
    report = evaluate(preds, labels, systems)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    print(report.to_text())
    return EXIT_OK


def cmd_ensemble_select(args) -> int:
    leaderboard = Leaderboard.load(args.leaderboard)
    if args.strategy == "intersection":
        spec = select_intersection(leaderboard, args.k_dev, args.k_pam)
    elif args.strategy == "topk_pam":
        spec = select_topk(leaderboard, "pam_srcc", args.k)
    elif args.strategy == "topk_dev":
        spec = select_topk(leaderboard, "dev_srcc", args.k)
    elif args.strategy == "all":
        spec = select_all(leaderboard)
    else:  # explicit
        if not args.members:
            raise ConfigError("explicit strategy needs --members")
        spec = select_explicit(leaderboard, args.members.split(","))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    spec.save(out)
    print(f"{spec.strategy}: {len(spec.members)} members -> {out}")
    return EXIT_OK


def cmd_ensemble_predict(args) -> int:
    from .ensemble import EnsembleSpec

    leaderboard = Leaderboard.load(args.leaderboard)
    spec = EnsembleSpec.load(args.spec)
    manifest = Manifest.load(args.manifest)
    utt_ids, preds = ensemble_predict(spec, leaderboard, manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, utt_ids, preds)
    print(f"ensemble of {len(spec.members)}: {len(utt_ids)} predictions -> {out}")
    return EXIT_OK


def cmd_ensemble_compare(args) -> int:
    leaderboard = Leaderboard.load(args.leaderboard)
    manifest = Manifest.load(args.manifest)
    submitted = tuple(int(k) for k in args.submitted_k.split(","))
    if len(submitted) != 2:
        raise ConfigError("--submitted-k needs two comma-separated integers")
    rows = compare_strategies(leaderboard, manifest, standard_strategies(submitted))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "strategy_table.json").write_text(
        json.dumps({"rows": rows}, indent=2), encoding="utf-8"
    )
    for row in rows:
        status = row.get("error") or f"{len(row['members'])} members"
        print(f"{row['strategy']:<12} {status}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moskit",
        description="Multi-axis audio quality scoring: training, evaluation, ensembling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic verification corpus")
    p.add_argument("--systems", type=int, default=40, help="number of systems")
    p.add_argument("--per-system", type=int, default=25, help="utterances per system")
    p.add_argument("--dims", default="16,24", help="comma-separated pseudo-encoder dims")
    p.add_argument("--noise-std", type=float, default=0.0, help="label noise std")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("split", help="stratified train/dev split of a manifest")
    p.add_argument("--manifest", required=True, help="input manifest path")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for train.jsonl/dev.jsonl")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="train one model or a configuration grid")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", help="run directory (overrides config out_dir)")
    p.add_argument("--seed", type=int, help="override model+train seed")
    p.add_argument("--encoders", help="override encoder subset, comma-separated")
    p.add_argument("--aggregation", choices=AGGREGATIONS, help="override aggregation")
    p.add_argument("--loss", choices=LOSS_KINDS, help="override loss kind")
    p.add_argument("--grid", action="store_true", help="run the 16-cell standard grid")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="metric report for predictions vs labels")
    p.add_argument("--predictions", required=True, help="predictions CSV")
    p.add_argument("--manifest", required=True, help="labeled manifest")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ensemble-select", help="build an ensemble member list")
    p.add_argument("--leaderboard", required=True)
    p.add_argument(
        "--strategy",
        choices=("intersection", "topk_pam", "topk_dev", "all", "explicit"),
        required=True,
    )
    p.add_argument("--k", type=int, default=8, help="k for topk strategies")
    p.add_argument("--k-dev", type=int, default=12, help="dev k for intersection")
    p.add_argument("--k-pam", type=int, default=12, help="pam k for intersection")
    p.add_argument("--members", help="comma-separated ids for explicit strategy")
    p.add_argument("--out", required=True, help="ensemble spec JSON path")
    p.set_defaults(fn=cmd_ensemble_select)

    p = sub.add_parser("ensemble-predict", help="average member predictions")
    p.add_argument("--spec", required=True, help="ensemble spec JSON")
    p.add_argument("--leaderboard", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.set_defaults(fn=cmd_ensemble_predict)

    p = sub.add_parser("ensemble-compare", help="strategy comparison table")
    p.add_argument("--leaderboard", required=True)
    p.add_argument("--manifest", required=True, help="labeled evaluation manifest")
    p.add_argument("--submitted-k", default="12,12", help="intersection ks, e.g. 12,12")
    p.add_argument("--out", required=True, help="table output directory")
    p.set_defaults(fn=cmd_ensemble_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DomainError, TrainingError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
