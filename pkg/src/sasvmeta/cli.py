"""``sasvmeta`` command line: generate, protocol, train, evaluate, report.

Every option can also come from a flat ``key = value`` file passed with
``--config`` (keys are option names with dashes or underscores); flags given
on the command line win.  Outputs are staged next to their destination and
renamed into place only after the command succeeds.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from .datagen import DEFAULT_GENRES, CorpusSpec, index_by_id, read_manifest, synth_corpus, with_spoofs, write_manifest
from .metrics import read_scores, report, score_trials, write_scores
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .protocol import (
    all_seen,
    build_cgp,
    build_complex_eval,
    read_protocol,
    read_trials,
    split_manifest,
    write_protocol,
    write_trials,
)
from .trainer import TrainConfig, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad command-line input; maps to exit code 1."""


@dataclass
class RunConfig:
    corpus_dir: Path | None = None
    protocol_dir: Path | None = None
    checkpoint: Path | None = None
    scores: Path | None = None
    telemetry: Path | None = None
    out: Path | None = None
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    cgp: str = "CGP I"
    substitution_rate: float = 0.3
    num_trials: int = 4000
    target_fraction: float = 0.8
    enroll_size: int = 3
    eval_per_cell: int = 3
    max_steps: int | None = None
    baseline: str | None = None
    seed: int = 0


# -- option tables: (flag, type, default, help) ----------------------------------

_COMMON = [("seed", int, 0, "master seed")]

_GENERATE = [
    ("out", Path, None, "output corpus directory"),
    ("speakers", int, 20, "number of speakers"),
    ("genres", int, len(DEFAULT_GENRES), "number of genres (taken in the default order)"),
    ("utts-per-cell", int, 5, "utterances per speaker and genre"),
    ("frames", int, 16, "frames per utterance"),
    ("feature-dim", int, 24, "feature dimension"),
    ("speaker-scale", float, 1.0, "speaker factor scale"),
    ("genre-scale", float, 0.6, "genre factor scale"),
    ("noise-scale", float, 0.5, "session and frame noise scale"),
    ("spoof-scale", float, 1.0, "strength of the spoofing channel"),
]

_PROTOCOL = [
    ("corpus", Path, None, "corpus directory"),
    ("out", Path, None, "output protocol directory"),
    ("cgp", str, "1", "cross-genre protocol (1-4, I-IV, or 'all')"),
    ("substitution-rate", float, 0.3, "probability of replacing a test utterance by its spoof"),
    ("num-trials", int, 4000, "evaluation trials"),
    ("target-fraction", float, 0.8, "share of target trials before substitution"),
    ("enroll-size", int, 3, "enrollment utterances per trial"),
    ("eval-per-cell", int, 3, "held-out utterances per speaker and genre"),
]

_TRAIN = [
    ("corpus", Path, None, "corpus directory"),
    ("protocol", Path, None, "protocol directory"),
    ("out", Path, None, "output checkpoint file"),
    ("telemetry", Path, None, "telemetry CSV (default: checkpoint path with .csv)"),
    ("epochs", int, 80, "training epochs"),
    ("steps-per-epoch", int, None, "steps per epoch (default: utterances / batch)"),
    ("max-steps", int, None, "stop after this many steps"),
    ("batch", int, 64, "trials per meta-task"),
    ("warmup", int, 5000, "warm-up steps"),
    ("peak-lr", float, 0.001, "peak outer learning rate"),
    ("decay", float, 0.9999, "per-step learning-rate decay after warm-up"),
    ("beta1", float, 0.9, "Adam beta1"),
    ("beta2", float, 0.98, "Adam beta2"),
    ("inner-steps", int, 1, "inner adaptation steps (0 = supervised)"),
    ("inner-lr", float, 0.01, "inner learning rate"),
    ("g-mtr", int, None, "meta-train genres per task (default: genres - 2)"),
    ("loss-weights", str, "1,1,1", "speaker,spoof,sasv loss weights"),
    ("blocks", int, 2, "dual-path blocks"),
    ("model-dim", int, 32, "model width"),
    ("heads", int, 4, "attention heads"),
    ("embedding-dim", int, 32, "embedding width"),
]

_EVALUATE = [
    ("corpus", Path, None, "corpus directory"),
    ("protocol", Path, None, "protocol directory"),
    ("checkpoint", Path, None, "model checkpoint"),
    ("out", Path, None, "output score file"),
]

_REPORT = [
    ("baseline", str, None, "system name to diff the others against"),
    ("out", Path, None, "output directory for report.txt and report.csv"),
]

_FLAGS = [("no-meta", "supervised training (same as --inner-steps 0)"), ("speaker-only", "speaker-only ablation")]

_TABLES = {
    "generate": _GENERATE,
    "protocol": _PROTOCOL,
    "train": _TRAIN,
    "evaluate": _EVALUATE,
    "report": _REPORT,
}


def _dest(name: str) -> str:
    return name.replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sasvmeta", description="Spoofing-aware speaker verification experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, table in _TABLES.items():
        p = sub.add_parser(command)
        p.add_argument("--config", type=Path, help="key = value file with option defaults")
        for name, typ, default, text in table + _COMMON:
            suffix = "" if default is None else f" (default: {default})"
            # None marks "not given" so config-file values can fill the gap
            p.add_argument(f"--{name}", type=typ, default=None, help=text + suffix)
        if command == "train":
            for name, text in _FLAGS:
                p.add_argument(f"--{name}", action="store_true", default=None, help=text)
        if command == "report":
            p.add_argument("scores", nargs="+", help="score files as NAME=PATH (or PATH)")
    return parser


def _read_config(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string("[run]\n" + path.read_text(encoding="utf-8"))
    except configparser.Error as err:
        raise UsageError(f"{path}: {err}") from None
    return {_dest(k): v for k, v in parser["run"].items()}


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge flags, config-file values and defaults (in that priority)."""
    table = _TABLES[args.command] + _COMMON
    flags = [(n, None, False, "") for n, _ in _FLAGS] if args.command == "train" else []
    config = _read_config(args.config) if args.config else {}
    known = {_dest(n) for n, *_ in table + flags}
    unknown = sorted(set(config) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    options = {}
    for name, typ, default, _ in table + flags:
        key = _dest(name)
        value = getattr(args, key)
        if value is None and key in config:
            raw = config[key]
            try:
                if typ is None:
                    value = raw.strip().lower() in ("1", "true", "yes", "on")
                else:
                    value = typ(raw)
            except ValueError:
                raise UsageError(f"config key {key}: cannot parse {raw!r}") from None
        options[key] = default if value is None else value
    return options


def _require(options: dict, *keys: str) -> None:
    missing = [k for k in keys if options.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _require_paths(*paths: Path) -> None:
    for p in paths:
        if not Path(p).exists():
            raise UsageError(f"input not found: {p}")


def _check_parent(out: Path) -> None:
    if not out.parent.is_dir():
        raise UsageError(f"output location does not exist: {out.parent}")


@contextlib.contextmanager
def staged_dir(out: Path):
    """Yield a temporary directory that replaces ``out`` on success."""
    out = Path(out)
    _check_parent(out)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
        if out.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{out.name}.old.", dir=out.parent))
            os.replace(out, old / "x")
            os.replace(tmp, out)
            shutil.rmtree(old)
        else:
            os.replace(tmp, out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


@contextlib.contextmanager
def staged_file(out: Path):
    """Yield a temporary path that is renamed to ``out`` on success."""
    out = Path(out)
    _check_parent(out)
    fd, name = tempfile.mkstemp(prefix=f".{out.name}.", dir=out.parent)
    os.close(fd)
    tmp = Path(name)
    try:
        yield tmp
        os.replace(tmp, out)
    finally:
        if tmp.exists():
            tmp.unlink()


def run_config(command: str, options: dict) -> RunConfig:
    o = options
    cfg = RunConfig(seed=o["seed"], out=o.get("out"))
    if command == "generate":
        if not 1 <= o["genres"] <= len(DEFAULT_GENRES):
            raise UsageError(f"--genres must lie in 1..{len(DEFAULT_GENRES)}")
        cfg.corpus = CorpusSpec(
            num_speakers=o["speakers"],
            genres=DEFAULT_GENRES[: o["genres"]],
            utterances_per_speaker_genre=o["utts_per_cell"],
            frames=o["frames"],
            feature_dim=o["feature_dim"],
            speaker_scale=o["speaker_scale"],
            genre_scale=o["genre_scale"],
            noise_scale=o["noise_scale"],
            spoof_scale=o["spoof_scale"],
            seed=o["seed"],
        ).validate()
    if command == "protocol":
        cfg.corpus_dir = o["corpus"]
        cfg.cgp = o["cgp"]
        cfg.substitution_rate = o["substitution_rate"]
        cfg.num_trials = o["num_trials"]
        cfg.target_fraction = o["target_fraction"]
        cfg.enroll_size = o["enroll_size"]
        cfg.eval_per_cell = o["eval_per_cell"]
    if command in ("train", "evaluate"):
        cfg.corpus_dir, cfg.protocol_dir = o["corpus"], o["protocol"]
    if command == "train":
        try:
            weights = tuple(float(w) for w in o["loss_weights"].split(","))
        except ValueError:
            raise UsageError(f"--loss-weights: cannot parse {o['loss_weights']!r}") from None
        inner = 0 if o["no_meta"] else o["inner_steps"]
        # k = 0 and --no-meta are the same algorithm; store them identically
        cfg.training = TrainConfig(
            epochs=o["epochs"],
            batch_size=o["batch"],
            inner_steps=inner,
            inner_lr=o["inner_lr"],
            loss_weights=weights,
            warmup_steps=o["warmup"],
            peak_lr=o["peak_lr"],
            decay_rate=o["decay"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            g_mtr=o["g_mtr"],
            meta=inner > 0,
            steps_per_epoch=o["steps_per_epoch"],
            seed=o["seed"],
        )
        cfg.model = ModelConfig(
            num_blocks=o["blocks"],
            model_dim=o["model_dim"],
            attention_heads=o["heads"],
            embedding_dim=o["embedding_dim"],
            speaker_only=o["speaker_only"],
        )
        cfg.checkpoint = o["out"]
        cfg.telemetry = o["telemetry"] or cfg.checkpoint.with_suffix(".csv")
        cfg.max_steps = o["max_steps"]
    if command == "evaluate":
        cfg.checkpoint, cfg.scores = o["checkpoint"], o["out"]
    if command == "report":
        cfg.baseline = o["baseline"]
    return cfg


# -- commands ------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> None:
    manifest = with_spoofs(synth_corpus(cfg.corpus), cfg.corpus.spoof_scale, cfg.corpus.seed)
    with staged_dir(cfg.out) as tmp:
        write_manifest(manifest, tmp)
    print(f"wrote {len(manifest)} utterances to {cfg.out}")


def _protocol_of(name: str):
    if str(name).strip().lower() == "all":
        return all_seen()
    return build_cgp(name=name)


def cmd_protocol(cfg: RunConfig) -> None:
    _require_paths(cfg.corpus_dir)
    manifest = read_manifest(cfg.corpus_dir)
    cgp = _protocol_of(cfg.cgp)
    train_part, eval_part = split_manifest(manifest, cfg.eval_per_cell, cfg.seed)
    trials = build_complex_eval(
        eval_part,
        cfg.substitution_rate,
        cfg.seed,
        num_trials=cfg.num_trials,
        target_fraction=cfg.target_fraction,
        enroll_size=cfg.enroll_size,
    )
    held = {u.utt_id for u in eval_part}
    with staged_dir(cfg.out) as tmp:
        write_protocol(cgp, tmp / "protocol.txt")
        with open(tmp / "split.tsv", "w", encoding="utf-8") as f:
            for u in manifest:
                f.write(f"{u.utt_id}\t{'eval' if u.utt_id in held else 'train'}\n")
        write_trials(trials, tmp / "trials.tsv")
    kinds = {k: sum(t.trial_kind == k for t in trials) for k in ("target", "nontarget", "spoof")}
    print(f"{cgp.name}: seen {' '.join(cgp.seen_groups)}; unseen {' '.join(cgp.unseen_groups) or '-'}")
    print(f"wrote {len(trials)} trials ({', '.join(f'{k} {v}' for k, v in kinds.items())}) to {cfg.out}")


def _read_split(protocol_dir: Path) -> dict[str, str]:
    split = {}
    with open(protocol_dir / "split.tsv", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            uid, _, part = line.rstrip("\n").partition("\t")
            if part not in ("train", "eval"):
                raise ValueError(f"{protocol_dir / 'split.tsv'}:{lineno}: malformed split line")
            split[uid] = part
    return split


def cmd_train(cfg: RunConfig) -> None:
    _require_paths(cfg.corpus_dir, cfg.protocol_dir / "protocol.txt", cfg.protocol_dir / "split.tsv")
    manifest = read_manifest(cfg.corpus_dir)
    split = _read_split(cfg.protocol_dir)
    train_part = [u for u in manifest if split.get(u.utt_id) == "train"]
    cgp = read_protocol(cfg.protocol_dir / "protocol.txt")
    if cfg.model.speaker_only and any(cfg.training.loss_weights[1:]):
        cfg.training = replace(cfg.training, loss_weights=(cfg.training.loss_weights[0], 0.0, 0.0))
    with staged_file(cfg.checkpoint) as ckpt, staged_file(cfg.telemetry) as tel:
        result = train(train_part, cgp, cfg.model, cfg.training, telemetry_path=tel, max_steps=cfg.max_steps)
        save_checkpoint(
            ckpt,
            result.model,
            speakers=result.speakers,
            protocol=cgp.name,
            training=asdict(cfg.training),
        )
    last = result.records[-1]
    print(f"trained {len(result.records)} steps; final loss {last.total:.4f}; checkpoint {cfg.checkpoint}")


def cmd_evaluate(cfg: RunConfig) -> None:
    _require_paths(cfg.corpus_dir, cfg.protocol_dir / "trials.tsv", cfg.checkpoint)
    index = index_by_id(read_manifest(cfg.corpus_dir))
    trials = read_trials(cfg.protocol_dir / "trials.tsv", index)
    model, _ = load_checkpoint(cfg.checkpoint)
    records = score_trials(model, trials, index)
    with staged_file(cfg.scores) as tmp:
        write_scores(records, tmp)
    print(f"scored {len(records)} trials to {cfg.scores}")


def _parse_systems(specs: list[str]) -> dict[str, Path]:
    systems = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        if name in systems:
            raise UsageError(f"duplicate system name {name!r}")
        systems[name] = Path(path)
    return systems


def cmd_report(cfg: RunConfig, score_specs: list[str]) -> None:
    systems = _parse_systems(score_specs)
    _require_paths(*systems.values())
    if cfg.baseline is not None and cfg.baseline not in systems:
        raise UsageError(f"--baseline {cfg.baseline!r} is not one of {sorted(systems)}")
    records = {name: read_scores(path) for name, path in systems.items()}
    text, csv_text = report(records, baseline=cfg.baseline, genre_order=DEFAULT_GENRES)
    if cfg.out is not None:
        with staged_dir(cfg.out) as tmp:
            (tmp / "report.txt").write_text(text, encoding="utf-8")
            (tmp / "report.csv").write_text(csv_text, encoding="utf-8")
    sys.stdout.write(text)


COMMANDS = {"generate": cmd_generate, "protocol": cmd_protocol, "train": cmd_train, "evaluate": cmd_evaluate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        options = resolve_options(args)
        required = {
            "generate": ("out",),
            "protocol": ("corpus", "out"),
            "train": ("corpus", "protocol", "out"),
            "evaluate": ("corpus", "protocol", "checkpoint", "out"),
            "report": (),
        }[args.command]
        _require(options, *required)
        cfg = run_config(args.command, options)
        if args.command == "report":
            cmd_report(cfg, args.scores)
        else:
            COMMANDS[args.command](cfg)
    except (UsageError, ValueError, KeyError, FileNotFoundError) as err:
        print(f"sasvmeta {args.command}: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:  # noqa: BLE001 - anything else is a runtime failure
        print(f"sasvmeta {args.command}: failed: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
