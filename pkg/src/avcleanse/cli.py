"""Command-line front end.

Every subcommand takes an optional JSON ``--config`` file; explicit flags
override file values, which override built-in defaults. Outputs are staged
in a temporary directory and moved into place only when the whole set has
been written, so a failed run leaves no partial artifacts. Each run also
writes ``<command>.run.json`` describing its effective configuration and
the files it produced.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import __version__
from .boundary import load_model, read_trials, save_model, score_trials, train_boundary
from .cleansing import (
    DEFAULT_KEEP_FRACTION, DEFAULT_ROUNDS, Scope, coarse_partition, recovery_metrics,
    run_pipeline, write_manifest, write_plot_data,
)
from .embed_store import l2_normalize, load_embeddings, load_labels
from .errors import CleanseError
from .similarity import THREADS_ENV, build_score_table, default_threads, read_score_table, write_score_table
from .synth import GENERATOR, SynthConfig, generate, read_ground_truth, write_dataset
from .verification import Mode, evaluate, write_scored

log = logging.getLogger("avcleanse")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


@dataclass
class PipelineConfig:
    speech: Optional[str] = None
    face: Optional[str] = None
    fine_speech: Optional[str] = None
    labels: Optional[str] = None
    trials: Optional[str] = None
    model: Optional[str] = None
    ground_truth: Optional[str] = None
    scores: Optional[str] = None
    report: Optional[str] = None
    keep_fraction: float = DEFAULT_KEEP_FRACTION
    rounds: int = DEFAULT_ROUNDS
    self_inclusion: bool = False
    scope: str = Scope.ALL_SAMPLES.value
    C: float = 1.0
    mode: str = Mode.FUSION.value
    seed: int = 0
    out_dir: str = "out"
    synth: dict = dataclasses.field(default_factory=dict)

    def echo(self) -> dict:
        return dataclasses.asdict(self)


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = PipelineConfig()
    known = {f.name for f in fields(PipelineConfig)}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = dataclasses.replace(cfg, **data)
    overrides = {k: v for k, v in vars(args).items() if k in known and v is not None}
    synth_flags = {k[len("synth_"):]: v for k, v in vars(args).items() if k.startswith("synth_") and v is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    if synth_flags:
        cfg.synth = {**cfg.synth, **synth_flags}
    if not 0.0 < cfg.keep_fraction < 1.0:
        raise UsageError(f"keep_fraction must lie in (0, 1), got {cfg.keep_fraction}")
    if cfg.rounds < 1:
        raise UsageError(f"rounds must be >= 1, got {cfg.rounds}")
    if cfg.C <= 0:
        raise UsageError(f"C must be positive, got {cfg.C}")
    try:
        Scope(cfg.scope)
        Mode(cfg.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _require(cfg: PipelineConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing required input(s): {flags}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Outputs:
    def __init__(self, staging: Path):
        self.staging = staging
        self.names: list[str] = []

    def path(self, name: str) -> Path:
        self.names.append(name)
        return self.staging / name


@contextmanager
def staged_outputs(out_dir: Path, command: str, cfg: PipelineConfig) -> Iterator[_Outputs]:
    out_dir.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{command}-", dir=out_dir))
    try:
        out = _Outputs(staging)
        yield out
        for p in sorted(staging.iterdir()):
            if p.name not in out.names:
                out.names.append(p.name)
        run = {
            "command": command,
            "version": __version__,
            "config": cfg.echo(),
            "files": {n: _sha256(staging / n) for n in sorted(out.names)},
        }
        (staging / f"{command}.run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        for p in staging.iterdir():
            p.replace(out_dir / p.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def _load_set(path: str, modality: str):
    return l2_normalize(load_embeddings(path, modality))


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth(cfg: PipelineConfig, args) -> None:
    params = dict(cfg.synth)
    params.setdefault("seed", cfg.seed)
    if "concentration" in params:
        c = params.pop("concentration")
        params.setdefault("concentration_speech", c)
        params.setdefault("concentration_face", c)
    try:
        sc = SynthConfig(**params)
        sc.validate()
    except TypeError as exc:
        raise UsageError(f"bad synth parameter: {exc}") from None
    except CleanseError as exc:
        raise UsageError(str(exc)) from None
    ds = generate(sc)
    with staged_outputs(Path(cfg.out_dir), "synth", cfg) as out:
        write_dataset(ds, out.staging)
    log.info("wrote %d samples (%d noisy) to %s", sc.n_samples, len(ds.noisy_ids), cfg.out_dir)
    _emit({"out_dir": cfg.out_dir, "n_samples": sc.n_samples, "n_noisy": len(ds.noisy_ids), "generator": GENERATOR})


def cmd_score(cfg: PipelineConfig, args) -> None:
    _require(cfg, "speech", "labels")
    speech = _load_set(cfg.speech, "speech")
    face = _load_set(cfg.face, "face") if cfg.face else None
    labels = load_labels(cfg.labels, speech)
    table = build_score_table(speech, face, labels, None, cfg.self_inclusion, args.threads)
    with staged_outputs(Path(cfg.out_dir), "score", cfg) as out:
        write_score_table(table, out.path("scores.tsv"))


def cmd_coarse(cfg: PipelineConfig, args) -> None:
    _require(cfg, "scores")
    table = read_score_table(cfg.scores, cfg.self_inclusion)
    part = coarse_partition(table.speaker_scores, cfg.keep_fraction, table.speaker_placeholder)
    with staged_outputs(Path(cfg.out_dir), "coarse", cfg) as out:
        with open(out.path("coarse.tsv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("sample_id\tx\tpartition\n")
            for sid, x, e in zip(table.sample_ids, table.speaker_scores, part.easy):
                fh.write(f"{sid}\t{x:.6f}\t{'easy' if e else 'peculiar'}\n")
        summary = {"tau": part.tau if np.isfinite(part.tau) else None, "keep_fraction": part.keep_fraction,
                   "n_easy": int(part.easy.sum()), "n_peculiar": int((~part.easy).sum())}
        out.path("coarse.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit(summary)


def _fit(cfg: PipelineConfig, speech, face):
    trials = score_trials(read_trials(cfg.trials), speech, face)
    model = train_boundary(trials, cfg.C)
    log.info("boundary trained on %d trials: objective %.6g, duality gap %.2g",
             len(trials), model.objective, model.duality_gap)
    return model


def cmd_fit_boundary(cfg: PipelineConfig, args) -> None:
    _require(cfg, "speech", "face", "trials")
    speech = _load_set(cfg.speech, "speech")
    face = _load_set(cfg.face, "face")
    model = _fit(cfg, speech, face)
    with staged_outputs(Path(cfg.out_dir), "fit-boundary", cfg) as out:
        save_model(model, out.path("model.json"))
    _emit(model.to_dict())


def cmd_cleanse(cfg: PipelineConfig, args) -> None:
    if cfg.face is None:
        raise UsageError("fine cleansing needs both modalities: pass --face with face embeddings")
    _require(cfg, "speech", "labels")
    if cfg.model is None and cfg.trials is None:
        raise UsageError("pass --trials to train the boundary, or --model with a trained boundary")
    speech = _load_set(cfg.speech, "speech")
    face = _load_set(cfg.face, "face")
    fine_speech = _load_set(cfg.fine_speech, "speech") if cfg.fine_speech else None
    labels = load_labels(cfg.labels, speech)
    model = load_model(cfg.model) if cfg.model else _fit(cfg, speech, face)
    report = run_pipeline(
        speech, face, labels, model, cfg.keep_fraction, cfg.rounds, cfg.self_inclusion,
        cfg.scope, fine_speech, threads=args.threads,
        extra_config={"inputs": {k: getattr(cfg, k) for k in ("speech", "face", "fine_speech", "labels", "trials", "model")}},
    )
    report_dict = report.to_dict()
    metrics = None
    if cfg.ground_truth:
        metrics = recovery_metrics(report.final_noisy, read_ground_truth(cfg.ground_truth))
    with staged_outputs(Path(cfg.out_dir), "cleanse", cfg) as out:
        out.path("report.json").write_text(report.to_json(), encoding="utf-8")
        write_manifest(report, out.path("clean_manifest.tsv"))
        write_plot_data(report_dict, out.path("plot_data.csv"), out.path("boundary_line.json"))
        save_model(model, out.path("model.json"))
        if metrics is not None:
            out.path("metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    summary = {"rounds_run": len(report.rounds), "stop_reason": report.stop_reason,
               "n_clean": len(report.final_clean), "n_noisy": len(report.final_noisy)}
    if metrics is not None:
        summary["recovery"] = metrics
    _emit(summary)


def cmd_eval(cfg: PipelineConfig, args) -> None:
    _require(cfg, "trials")
    mode = Mode(cfg.mode)
    need_speech = mode in (Mode.SPEECH, Mode.FUSION)
    need_face = mode in (Mode.FACE, Mode.FUSION)
    if need_speech:
        _require(cfg, "speech")
    if need_face:
        _require(cfg, "face")
    speech = _load_set(cfg.speech, "speech") if need_speech else None
    face = _load_set(cfg.face, "face") if need_face else None
    trials = read_trials(cfg.trials)
    eer, thr, scored = evaluate(trials, speech, face, mode)
    summary = {"mode": mode.value, "eer": eer, "threshold": thr,
               "n_target": scored.n_target, "n_imposter": scored.n_imposter}
    with staged_outputs(Path(cfg.out_dir), "eval", cfg) as out:
        write_scored(scored, out.path(f"scored_{mode.value}.tsv"))
        out.path(f"eval_{mode.value}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("%s EER = %.4f%%", mode.value, 100 * eer)
    _emit(summary)


def cmd_plot_data(cfg: PipelineConfig, args) -> None:
    _require(cfg, "report")
    try:
        report = json.loads(Path(cfg.report).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CleanseError(f"{cfg.report}: not valid JSON ({exc})") from None
    with staged_outputs(Path(cfg.out_dir), "plot-data", cfg) as out:
        write_plot_data(report, out.path("plot_data.csv"), out.path("boundary_line.json"))


COMMANDS = {
    "synth": cmd_synth,
    "score": cmd_score,
    "coarse": cmd_coarse,
    "fit-boundary": cmd_fit_boundary,
    "cleanse": cmd_cleanse,
    "eval": cmd_eval,
    "plot-data": cmd_plot_data,
}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override its values)")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--threads", type=int, default=None,
                        help=f"cap on scoring threads (default: ${THREADS_ENV} or CPU count)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("--speech", help="speech embeddings (AVCE)")
    inputs.add_argument("--face", help="face embeddings (AVCE)")
    inputs.add_argument("--labels", help="labels TSV")
    inputs.add_argument("--trials", help="trial list TSV")
    inputs.add_argument("--self-inclusion", dest="self_inclusion", type=_bool, metavar="BOOL")

    parser = argparse.ArgumentParser(prog="avcleanse", description="Audio-visual noisy-label cleansing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-classes", dest="synth_n_classes", type=int)
    p.add_argument("--samples-per-class", dest="synth_samples_per_class", type=int)
    p.add_argument("--dim-speech", dest="synth_dim_speech", type=int)
    p.add_argument("--dim-face", dest="synth_dim_face", type=int)
    p.add_argument("--concentration", dest="synth_concentration", type=float)
    p.add_argument("--noise-rate", dest="synth_noise_rate", type=float)
    p.add_argument("--modality-consistency", dest="synth_modality_consistency", type=_bool, metavar="BOOL")
    p.add_argument("--trials-per-label", dest="synth_trials_per_label", type=int)

    sub.add_parser("score", parents=[common, inputs], help="intra-class scores of every sample")

    p = sub.add_parser("coarse", parents=[common], help="easy/peculiar split of a score table")
    p.add_argument("--scores", help="score table TSV from 'score'")
    p.add_argument("--keep-fraction", dest="keep_fraction", type=float)

    p = sub.add_parser("fit-boundary", parents=[common, inputs], help="train the 2-D SVM on trials")
    p.add_argument("-C", dest="C", type=float)

    p = sub.add_parser("cleanse", parents=[common, inputs], help="run the full cleansing pipeline")
    p.add_argument("--fine-speech", dest="fine_speech", help="replacement speech embeddings for fine rounds")
    p.add_argument("--model", help="trained boundary JSON (skips training)")
    p.add_argument("--ground-truth", dest="ground_truth", help="ground-truth TSV for recovery metrics")
    p.add_argument("--keep-fraction", dest="keep_fraction", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--scope", choices=[s.value for s in Scope])
    p.add_argument("-C", dest="C", type=float)

    p = sub.add_parser("eval", parents=[common, inputs], help="EER of trial scoring")
    p.add_argument("--mode", choices=[m.value for m in Mode])

    p = sub.add_parser("plot-data", parents=[common], help="scatter CSV and boundary line from a report")
    p.add_argument("--report", help="report.json from 'cleanse'")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=args.log_level,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.threads is None:
            args.threads = default_threads()
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (CleanseError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
