"""Command-line entry point wiring all pipeline stages.

Subcommands: bank, simulate, train, extract, adapt, evaluate, report.
Each run writes into a timestamped run directory (override with --run-dir,
root via SOUNDEXT_RUNS_DIR) holding the effective merged config, a log, and
the command's outputs. Flag precedence: --set overrides > config file >
built-in defaults. Exit codes: 0 ok, 1 runtime failure, 2 invalid config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .adaptation import (
    adapt,
    build_adaptation_set,
    embed_for_class,
    register_new_classes,
    write_registration_report,
)
from .bank import (
    BankSpec,
    EventBank,
    EventClip,
    build_event_bank,
    build_noise_bank,
    default_bank_spec,
    export_bank,
    load_bank_spec,
    save_bank_spec,
)
from .checkpoint import Checkpoint, init_checkpoint
from .config import ConfigError, RunConfig, load_run_config, save_run_config
from .evaluation import (
    EmbeddingPolicy,
    evaluate,
    read_records,
    render_new_class_table,
    render_per_class_table,
    render_seen_table,
    save_per_class_chart,
    summarize,
    write_records,
)
from .scenes import SceneStore, generate_dataset, generate_new_class_dataset
from .signal import read_wav, write_wav
from .training import train

log = logging.getLogger("soundext")


def _runs_root() -> Path:
    return Path(os.environ.get("SOUNDEXT_RUNS_DIR", "runs"))


def _make_run_dir(command: str, override: str | None) -> Path:
    if override:
        run_dir = Path(override)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        run_dir = _runs_root() / f"{command}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _setup_logging(run_dir: Path) -> None:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        handlers=[
            logging.StreamHandler(sys.stderr),
            logging.FileHandler(run_dir / "log.txt", encoding="utf-8"),
        ],
        force=True,
    )


def _load_spec(args, cfg: RunConfig) -> BankSpec:
    if getattr(args, "bank_spec", None):
        return load_bank_spec(args.bank_spec)
    return default_bank_spec(seed=cfg.seed)


def _split_csv(text: str | None) -> list[str]:
    return [item for item in (text or "").split(",") if item]


def _load_shot_clips(shots_dir: Path, sample_rate_hz: int) -> dict[str, list[EventClip]]:
    """shots/<label>/*.wav -> per-label clips with stable source ids."""
    shots: dict[str, list[EventClip]] = {}
    for label_dir in sorted(p for p in shots_dir.iterdir() if p.is_dir()):
        clips = []
        for wav_path in sorted(label_dir.glob("*.wav")):
            wf = read_wav(wav_path, expect_sample_rate_hz=sample_rate_hz)
            clips.append(EventClip(label_dir.name, f"{label_dir.name}/{wav_path.stem}", wf))
        if clips:
            shots[label_dir.name] = clips
    if not shots:
        raise ValueError(f"no shot WAVs found under {shots_dir}")
    return shots


def _bank_with_shots(bank: EventBank, shots: dict[str, list[EventClip]]) -> EventBank:
    clips = [bank.clip(s) for label in bank.labels for s in bank.source_ids(label)]
    for extra in shots.values():
        clips.extend(extra)
    return EventBank(clips)


def cmd_bank(args, cfg: RunConfig, run_dir: Path) -> int:
    spec = _load_spec(args, cfg)
    out = Path(args.out) if args.out else run_dir / "bank"
    bank = build_event_bank(spec)
    noise = build_noise_bank(spec)
    export_bank(bank, out / "events")
    export_bank(noise, out / "noise")
    save_bank_spec(spec, out / "bank_spec.yaml")
    index = {
        "labels": bank.labels,
        "clips_per_class": {label: len(bank.source_ids(label)) for label in bank.labels},
        "noise_clips": len(noise),
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("bank: %d clips over %d classes -> %s", len(bank), len(bank.labels), out)
    return 0


def cmd_simulate(args, cfg: RunConfig, run_dir: Path) -> int:
    spec = _load_spec(args, cfg)
    bank = build_event_bank(spec)
    noise = build_noise_bank(spec)
    out = Path(args.out) if args.out else run_dir / "data"
    include_stems = not args.no_stems
    if args.kind == "uniform":
        manifest = generate_dataset(
            bank, noise, cfg.generator, args.count, args.split, out,
            class_pool=_split_csv(args.classes) or None,
            include_stems=include_stems, workers=args.workers,
        )
    else:
        new_labels = _split_csv(args.new_labels)
        if not new_labels:
            raise ValueError("--kind new_class requires --new-labels")
        seen = [l for l in bank.labels if l not in new_labels]
        manifest = generate_new_class_dataset(
            bank, noise, cfg.generator, args.count, args.split, out,
            seen_labels=seen, new_labels=new_labels,
            include_stems=include_stems, workers=args.workers,
        )
    log.info("simulate: %d scenes -> %s", args.count, manifest)
    return 0


def cmd_train(args, cfg: RunConfig, run_dir: Path) -> int:
    spec = _load_spec(args, cfg)
    bank = build_event_bank(spec)
    data = Path(args.data)
    train_store = SceneStore(data / args.train_split, cache=True)
    dev_store = SceneStore(data / args.dev_split, cache=True)
    hold_out = set(_split_csv(args.hold_out))
    labels = [l for l in bank.labels if l not in hold_out]
    init = init_checkpoint(cfg.model, labels, seed=cfg.training.seed)
    best = train(train_store, dev_store, bank, init, cfg.training, run_dir)
    log.info(
        "train: best dev loss %.3f at epoch %s -> %s",
        best.metadata["dev_loss"], best.metadata["epoch"], run_dir / "best",
    )
    return 0


def cmd_extract(args, cfg: RunConfig, run_dir: Path) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    mixture = read_wav(args.input, expect_sample_rate_hz=ckpt.model_config.sample_rate_hz)
    if args.enroll:
        shots = [
            read_wav(p, expect_sample_rate_hz=ckpt.model_config.sample_rate_hz)
            for p in _split_csv(args.enroll)
        ]
        embedding = embed_for_class(ckpt, shots=shots)
    elif args.class_label:
        if args.class_label not in ckpt.vocab:
            raise ValueError(
                f"class {args.class_label!r} not in vocabulary {ckpt.vocab.labels}"
            )
        embedding = embed_for_class(ckpt, label=args.class_label)
    else:
        raise ValueError("extract requires --class or --enroll")
    from .model import extract as run_extract

    estimate = run_extract(mixture, embedding, ckpt.to_model())
    out = Path(args.output) if args.output else run_dir / "estimate.wav"
    write_wav(out, estimate)
    log.info("extract: %s (%d samples) -> %s", args.input, len(estimate), out)
    return 0


def cmd_adapt(args, cfg: RunConfig, run_dir: Path) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    spec = _load_spec(args, cfg)
    bank = build_event_bank(spec)
    noise = build_noise_bank(spec)
    shots = _load_shot_clips(Path(args.shots_dir), spec.sample_rate_hz)
    merged = _bank_with_shots(bank, shots)
    pools = {label: [c.source_id for c in clips] for label, clips in shots.items()}
    for label, pool in pools.items():
        if len(pool) != cfg.adaptation.k_shots:
            log.warning(
                "class %s: %d shots found, config k_shots=%d; using all %d",
                label, len(pool), cfg.adaptation.k_shots, len(pool),
            )
    registrations = register_new_classes(ckpt, pools, merged, cfg.adaptation)
    seen = [l for l in ckpt.vocab.labels if l in bank.labels]
    if len(seen) < cfg.generator.n_events - 1:
        raise ValueError("not enough seen classes in the bank for adaptation scenes")
    store = build_adaptation_set(
        merged, noise, cfg.generator, seen, registrations, cfg.adaptation, run_dir / "data"
    )
    adapted, report = adapt(ckpt, registrations, store, cfg.adaptation)
    adapted.save(run_dir / "adapted")
    write_registration_report(report, run_dir / "registration_report.json")
    log.info("adapt: registered %s -> %s", sorted(pools), run_dir / "adapted")
    return 0


def cmd_evaluate(args, cfg: RunConfig, run_dir: Path) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    spec = _load_spec(args, cfg)
    bank = build_event_bank(spec)
    shot_pools = None
    if args.shots_dir:
        shots = _load_shot_clips(Path(args.shots_dir), spec.sample_rate_hz)
        bank = _bank_with_shots(bank, shots)
        shot_pools = {label: [c.source_id for c in clips] for label, clips in shots.items()}
    policy = EmbeddingPolicy(
        source=args.policy, k=args.k, seed=cfg.seed, shot_pools=shot_pools
    )
    store = SceneStore(Path(args.data) / args.split)
    records, errors = evaluate(
        ckpt, store, policy, bank,
        cohort=args.cohort, targets=args.targets,
        only_classes=_split_csv(args.only_classes) or None,
        metric_cfg=cfg.metrics,
    )
    out = Path(args.out) if args.out else run_dir / "records.jsonl"
    write_records(records, out)
    if errors:
        (run_dir / "errors.json").write_text(
            json.dumps(errors, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    log.info("evaluate: %d records, %d errors -> %s", len(records), len(errors), out)
    if records:
        mean = sum(r.sdri_db for r in records) / len(records)
        log.info("evaluate: mean SDRi %.2f dB", mean)
    if errors:
        log.error("evaluate: %d record-level errors (see errors.json)", len(errors))
        return 1
    return 0


def cmd_report(args, cfg: RunConfig, run_dir: Path) -> int:
    records = []
    for path in args.records:
        records.extend(read_records(path))
    if not records:
        raise ValueError("no records loaded")
    seen_table = render_seen_table(records, paper_ref=args.paper_ref)
    new_table = render_new_class_table(records)
    per_class = render_per_class_table(records)
    for name, text in (
        ("seen_table.txt", seen_table),
        ("new_class_table.txt", new_table),
        ("per_class.txt", per_class),
    ):
        (run_dir / name).write_text(text, encoding="utf-8")
        sys.stdout.write(text + "\n")
    rows = summarize(records, ("model_mode", "embedding_source", "cohort", "k"))
    with open(run_dir / "summary.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    if args.chart:
        save_per_class_chart(records, run_dir / "per_class.png")
        log.info("report: chart -> %s", run_dir / "per_class.png")
    log.info("report: %d records -> %s", len(records), run_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="soundext",
        description="Target sound extraction: scene synthesis, training, adaptation, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"soundext {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config (sections: generator, model, training, adaptation, metrics)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config field")
        p.add_argument("--run-dir", help="run directory (default: runs/<cmd>-<timestamp>)")
        p.add_argument("--bank-spec", help="bank spec YAML (default: built-in 6-class bank)")

    p = sub.add_parser("bank", help="render the event and noise banks to disk")
    common(p)
    p.add_argument("--out", help="output directory (default: <run-dir>/bank)")
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("simulate", help="generate a rendered scene dataset split")
    common(p)
    p.add_argument("--out", help="dataset root (default: <run-dir>/data)")
    p.add_argument("--split", default="train")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--kind", choices=("uniform", "new_class"), default="uniform")
    p.add_argument("--classes", help="restrict uniform scenes to these classes (comma-separated)")
    p.add_argument("--new-labels", help="comma-separated new-class labels (kind=new_class)")
    p.add_argument("--no-stems", action="store_true", help="skip per-event stem WAVs")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel scene rendering; output is identical for any value")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train an extraction model")
    common(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--train-split", default="train")
    p.add_argument("--dev-split", default="dev")
    p.add_argument("--hold-out", help="comma-separated labels excluded from the vocabulary")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract a target sound from a mixture WAV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="mixture WAV")
    p.add_argument("--output", help="estimate WAV (default: <run-dir>/estimate.wav)")
    p.add_argument("--class", dest="class_label", help="target class label (1-hot path)")
    p.add_argument("--enroll", help="comma-separated enrollment WAVs (averaged)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("adapt", help="register new classes from K-shot WAVs and retrain their embeddings")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shots-dir", required=True, help="<label>/*.wav per new class")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="score SDR improvement on a rendered split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--policy", choices=("one_hot", "enrollment", "avg_k", "adapted"), default="one_hot")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--cohort", choices=("seen", "new"), default="seen")
    p.add_argument("--targets", choices=("all", "designated"), default="all")
    p.add_argument("--only-classes", help="restrict trials to these target classes")
    p.add_argument("--shots-dir", help="per-label shot WAVs (avg_k policy)")
    p.add_argument("--out", help="records JSONL (default: <run-dir>/records.jsonl)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render summary tables and the per-class chart")
    common(p)
    p.add_argument("--records", nargs="+", required=True, help="records JSONL file(s)")
    p.add_argument("--paper-ref", action="store_true",
                   help="add published reference SDRi columns to the seen-class table")
    p.add_argument("--chart", action="store_true", help="also write per_class.png")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.overrides)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    run_dir = _make_run_dir(args.command, args.run_dir)
    _setup_logging(run_dir)
    save_run_config(cfg, run_dir / "effective_config.yaml")
    try:
        return args.func(args, cfg, run_dir)
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        log.exception("command failed: %s", exc)
        print(f"error: {exc} (log: {run_dir / 'log.txt'})", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
