"""Command-line entry point: ``rvqrobust [global flags] <command> [flags]``.

Every command writes ``config.json`` into the output directory. Running
``rvqrobust --config <out>/config.json --out <other> <command>`` repeats
the run and reproduces every output file byte for byte.

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema

from . import experiment as ex
from .analysis import AudioSignal, frame_features
from .codebook import CodebookFormatError
from .dataio import DatasetManifest, ManifestEntry, ManifestError, Role, WavFormatError, load_manifest, read_wav, write_manifest, write_wav
from .quantizer import rvq_decode, rvq_encode_batch, read_tokens, write_tokens
from .schemas import validate
from .training import TrainingDiverged, UpdateScope, load_checkpoint, save_checkpoint

log = logging.getLogger("rvqrobust")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("gen-data", "train", "finetune", "analyze-shift", "eval", "encode", "decode")


class InputError(OSError):
    """A required input file is missing or unreadable."""


# -- argument parsing ----------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", type=Path, default=d, help="JSON experiment config (e.g. a previous config.json)")
    p.add_argument("--seed", type=int, default=d, help="override the config seed")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS if suppress else Path("out"), help="output directory")
    p.add_argument("--threads", type=int, default=d, help="cap BLAS/OpenMP threads")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rvqrobust", description="RVQ noise-robustness toolkit on a desk-scale codec.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    p = command("gen-data", "synthesize clean tones and noise, write WAVs and a manifest")
    p.add_argument("--n-clean", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--n-noise", type=int)

    p = command("train", "baseline nearest-neighbor training")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", type=float)

    p = command("finetune", "progressive top-K fine-tuning from a baseline checkpoint")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--checkpoint", type=Path, help="baseline checkpoint")
    p.add_argument("--steps-per-stage", type=int)
    p.add_argument("--update-scope", choices=[s.value for s in UpdateScope])
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--temperature", type=float)

    p = command("analyze-shift", "codeword-shift histograms for clean vs noisy features")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", type=Path, help="clean (and optionally noise) entries")
    p.add_argument("--noise-manifest", type=Path, help="take noise entries from here instead")
    p.add_argument("--noisy-manifest", type=Path, help="pre-mixed noisy utterances paired with the clean ones by id")
    p.add_argument("--snr", type=float)
    p.add_argument("--k-max", type=int)

    p = command("eval", "SI-SDR on clean and noisy inputs plus perturbation stress")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--compare", type=Path, help="second checkpoint for a paired comparison")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--noise-manifest", type=Path)
    p.add_argument("--split", choices=["train", "test", "all"])

    p = command("encode", "WAV to RVQ tokens")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--input", type=Path)

    p = command("decode", "RVQ tokens to WAV")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--tokens", type=Path)
    return parser


# -- config assembly -------------------------------------------------------------------


def _load_config_file(path: Path) -> dict:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ex.ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        validate("config", obj)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ex.ConfigError(f"{path}: {loc}: {exc.message}") from None
    return obj


def _abs(p: Path | None) -> str | None:
    return None if p is None else str(p.resolve())


def assemble_config(args) -> ex.ExperimentConfig:
    raw = _load_config_file(args.config) if args.config else {}
    raw.pop("command", None)
    cfg = ex.ExperimentConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    paths = dict(cfg.paths)
    for key in ("manifest", "noise_manifest", "noisy_manifest", "checkpoint", "compare", "input", "tokens"):
        val = getattr(args, key, None)
        if val is not None:
            paths[key] = _abs(val)
    cfg.paths = paths
    try:
        if args.command == "gen-data":
            over = {k: getattr(args, k) for k in ("n_clean", "n_test", "n_noise") if getattr(args, k) is not None}
            if over:
                cfg.data = replace(cfg.data, **over)
        elif args.command == "train":
            over = {"steps": args.steps, "learning_rate": args.learning_rate}
            cfg.train = replace(cfg.train, **{k: v for k, v in over.items() if v is not None})
        elif args.command == "finetune":
            if args.steps_per_stage is not None:
                cfg.steps_per_stage = args.steps_per_stage
            over = {"update_scope": args.update_scope, "learning_rate": args.learning_rate}
            cfg.finetune = replace(cfg.finetune, **{k: v for k, v in over.items() if v is not None})
            q = {"k": args.k, "temperature": args.temperature}
            q = {k: v for k, v in q.items() if v is not None}
            if q:
                cfg.finetune = replace(cfg.finetune, quantizer=replace(cfg.finetune.quantizer, **q))
        elif args.command == "analyze-shift":
            over = {"shift_snr_db": args.snr, "k_max": args.k_max}
            cfg.eval = replace(cfg.eval, **{k: v for k, v in over.items() if v is not None})
        elif args.command == "eval" and args.split is not None:
            cfg.eval = replace(cfg.eval, split=args.split)
    except ValueError as exc:
        raise ex.ConfigError(str(exc)) from None
    return cfg


def snapshot(cfg: ex.ExperimentConfig, command: str) -> dict:
    d = cfg.to_dict()
    d["command"] = command
    validate("config", d)
    return d


# -- helpers -----------------------------------------------------------------------------


def _need(cfg: ex.ExperimentConfig, key: str) -> Path:
    val = cfg.paths.get(key)
    if not val:
        raise ex.ConfigError(f"missing required path {key!r} (flag --{key.replace('_', '-')})")
    path = Path(val)
    if not path.exists():
        raise InputError(f"{key} not found: {path}")
    return path


def _manifest(cfg: ex.ExperimentConfig, key: str = "manifest") -> DatasetManifest:
    return load_manifest(_need(cfg, key), seed=cfg.seed)


def _corpus(cfg: ex.ExperimentConfig) -> ex.Corpus:
    corpus = ex.load_corpus(_manifest(cfg))
    if cfg.paths.get("noise_manifest"):
        noise_m = load_manifest(_need(cfg, "noise_manifest"), seed=cfg.seed)
        corpus.noise = [noise_m.load(e) for e in noise_m.select(Role.NOISE)]
    return corpus


def _checkpoint(cfg: ex.ExperimentConfig, key: str = "checkpoint"):
    path = _need(cfg, key)
    try:
        codec, meta = load_checkpoint(path)
    except (ValueError, CodebookFormatError) as exc:
        raise InputError(f"{path}: unreadable checkpoint ({exc})") from None
    fl = meta.get("frame_len", cfg.codec.frame_len)
    if fl != codec.input_dim:
        raise ex.ConfigError(f"checkpoint frame length {codec.input_dim} disagrees with its metadata")
    return codec, meta


def _with_frame_len(cfg: ex.ExperimentConfig, frame_len: int) -> ex.ExperimentConfig:
    if frame_len != cfg.codec.frame_len:
        cfg = replace(cfg, codec=replace(cfg.codec, frame_len=frame_len))
    return cfg


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text, encoding="utf-8")


def _write_json(out: Path, name: str, obj, schema: str | None = None) -> None:
    if schema:
        validate(schema, obj)
    _write(out, name, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _save_run(out: Path, codec, report, cfg_dict: dict, frame_len: int, sample_rate: int) -> None:
    meta = {"config": cfg_dict, "frame_len": frame_len, "sample_rate": sample_rate, "rng_state": report.rng_state}
    save_checkpoint(out / "checkpoint.rvqm", codec, meta)
    _write_json(out, "report.json", report.to_dict(), "report")
    _write(out, "loss.csv", report.loss_csv())


def _phases_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "mean_loss", "final_mse"])
    for ph in report.phases:
        w.writerow([ph["stage"], "" if ph["mean_loss"] is None else repr(ph["mean_loss"]), repr(ph["stage_mse"][-1])])
    return buf.getvalue()


# -- commands ------------------------------------------------------------------------------


def cmd_gen_data(cfg: ex.ExperimentConfig, out: Path, snap: dict) -> None:
    manifest = ex.synth_manifest(cfg.data, cfg.seed)
    wav_dir = out / "wav"
    wav_dir.mkdir(exist_ok=True)
    entries = []
    for e in manifest.entries:
        path = wav_dir / f"{e.id}.wav"
        write_wav(manifest.load(e), path)
        entries.append(ManifestEntry(e.id, e.role, path=path, split=e.split, sample_rate=e.sample_rate))
    written = DatasetManifest(entries, cfg.seed)
    write_manifest(written, out / "manifest.jsonl")
    for line in (out / "manifest.jsonl").read_text(encoding="utf-8").splitlines():
        validate("manifest_entry", json.loads(line))
    log.info("wrote %d clean and %d noise files", len(written.select(Role.CLEAN)), len(written.select(Role.NOISE)))


def cmd_train(cfg: ex.ExperimentConfig, out: Path, snap: dict) -> None:
    corpus = _corpus(cfg)
    try:
        codec, report = ex.run_baseline(cfg, corpus)
    except TrainingDiverged as exc:
        _write_json(out, "report.json", exc.report.to_dict(), "report")
        _write(out, "loss.csv", exc.report.loss_csv())
        raise
    _save_run(out, codec, report, snap, cfg.codec.frame_len, corpus.clean[0][1].sample_rate)
    log.info("baseline stage MSE %s", ", ".join(f"{m:.3g}" for m in report.stage_mse))


def cmd_finetune(cfg: ex.ExperimentConfig, out: Path, snap: dict) -> None:
    codec, meta = _checkpoint(cfg)
    cfg = _with_frame_len(cfg, codec.input_dim)
    corpus = _corpus(cfg)
    try:
        cfg.schedule().validate(codec.rvq.n_stages)
        tuned, report = ex.run_finetune(cfg, corpus, codec)
    except TrainingDiverged as exc:
        _write_json(out, "report.json", exc.report.to_dict(), "report")
        _write(out, "loss.csv", exc.report.loss_csv())
        raise
    except ValueError as exc:
        raise ex.ConfigError(str(exc)) from None
    _save_run(out, tuned, report, snap, codec.input_dim, meta.get("sample_rate", cfg.data.sample_rate))
    _write(out, "phases.csv", _phases_csv(report))
    log.info("phases in order %s", [p["stage"] for p in report.phases])


def cmd_analyze_shift(cfg: ex.ExperimentConfig, out: Path, snap: dict) -> None:
    codec, _ = _checkpoint(cfg)
    corpus = _corpus(cfg)
    snr = cfg.eval.shift_snr_db
    noisy = None
    if cfg.paths.get("noisy_manifest"):
        nm = _manifest(cfg, "noisy_manifest")
        by_id = {e.id: e for e in nm.select(Role.CLEAN)}
        missing = [uid for uid, _ in corpus.clean if uid not in by_id]
        if missing:
            raise ex.ConfigError(f"noisy manifest lacks ids {missing[:5]}")
        noisy = [nm.load(by_id[uid]) for uid, _ in corpus.clean]
        snr = None
    hists = ex.stage_shift_histograms(codec, corpus, codec.input_dim, snr, cfg.eval.k_max, cfg.seed, noisy)
    for h in hists:
        n = h.metadata["stage"]
        _write(out, f"shift_stage{n}.csv", h.to_csv())
        _write_json(out, f"shift_stage{n}.json", h.to_dict(), "histogram")
    _write_json(out, "shift_stages.json", {"snr_db": snr, "stages": [h.to_dict() for h in hists]}, "shift_analysis")
    first = hists[0]
    log.info("stage 1: %.1f%% of %d frames at shift 0", 100 * first.fraction_at(0), first.total)


def cmd_eval(cfg: ex.ExperimentConfig, out: Path, snap: dict) -> None:
    codec, _ = _checkpoint(cfg)
    cfg = _with_frame_len(cfg, codec.input_dim)
    corpus = _corpus(cfg)
    metrics = {"checkpoint": cfg.paths["checkpoint"], **ex.evaluate(codec, corpus, cfg)}
    if cfg.paths.get("compare"):
        other, _ = _checkpoint(cfg, "compare")
        if other.input_dim != codec.input_dim:
            raise ex.ConfigError("compared checkpoints use different frame lengths")
        m2 = ex.evaluate(other, corpus, cfg)
        metrics["compare"] = {"checkpoint": cfg.paths["compare"], **m2, "paired": ex.paired_comparison(metrics, m2)}
    _write_json(out, "metrics.json", metrics, "metrics")
    log.info("mean SI-SDR %s", metrics["mean_si_sdr"])


def cmd_encode(cfg: ex.ExperimentConfig, out: Path, snap: dict) -> None:
    codec, _ = _checkpoint(cfg)
    sig = read_wav(_need(cfg, "input"))
    fl = codec.input_dim
    if len(sig) < fl:
        raise ex.ConfigError(f"input has {len(sig)} samples, fewer than one {fl}-sample frame")
    frames = frame_features(sig, fl, fl)
    indices = rvq_encode_batch(codec.encode(frames), codec.rvq).indices
    write_tokens(out / "tokens.u32", indices, sig.sample_rate / fl)


def cmd_decode(cfg: ex.ExperimentConfig, out: Path, snap: dict) -> None:
    codec, _ = _checkpoint(cfg)
    indices, meta = read_tokens(_need(cfg, "tokens"))
    if indices.shape[1] != codec.rvq.n_stages:
        raise ex.ConfigError(f"tokens have {indices.shape[1]} stages, checkpoint has {codec.rvq.n_stages}")
    for n, cb in enumerate(codec.rvq.stages):
        if indices.size and indices[:, n].max() >= cb.size:
            raise ex.ConfigError(f"token index out of range at stage {n + 1}")
    y = codec.decode(rvq_decode(indices, codec.rvq)).ravel()
    rate = int(round(meta["frame_rate"] * codec.input_dim))
    write_wav(AudioSignal(y, rate), out / "decoded.wav")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "analyze-shift": cmd_analyze_shift,
    "eval": cmd_eval,
    "encode": cmd_encode,
    "decode": cmd_decode,
}


def run(args) -> None:
    cfg = assemble_config(args)
    snap = snapshot(cfg, args.command)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out, "config.json", snap)
    HANDLERS[args.command](cfg, out, snap)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ex.ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                run(args)
        else:
            run(args)
    except (ex.ConfigError, ManifestError, jsonschema.ValidationError) as exc:
        print(f"config error: {getattr(exc, 'message', exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, WavFormatError, CodebookFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
