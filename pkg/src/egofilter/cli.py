"""Command-line entry point: ``egofilter <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from egofilter import datagen
from egofilter.audio import AudioClip, AudioError, read_wav, write_wav
from egofilter.config import ConfigError, RunConfig, load_config_file, resolve, write_snapshot
from egofilter.egonet import ReceptiveFieldError, WeightsFormatError, load_weights, save_weights, train
from egofilter.evaluation import (
    EvalItem,
    agglomerative_cluster,
    evaluate_corpus,
    read_report,
    target_alpha_ratio,
    write_report,
)
from egofilter.pipeline import (
    NoEgoEstimateError,
    TwoLanePipeline,
    run_offline_blocks,
    run_offline_entire,
)

log = logging.getLogger("egofilter")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# Every flag defaults to None so only explicitly given flags override the config file.
_PIPELINE = [("--buffer-seconds", float), ("--keep-seconds", float), ("--frame-len", int),
             ("--hop", int), ("--vad-energy-multiplier", float), ("--vad-frames-required", int),
             ("--block-stride-seconds", float), ("--flush-tail", _bool)]
_NETWORK = [("--channels", int), ("--kernel", int), ("--dilations", _int_list),
            ("--convs-share-weights-across-blocks", _bool), ("--compression-exponent", float)]
_SUBTRACT = [("--floor-beta", float), ("--over-subtraction-alpha", float)]
_TRAIN = [("--lr", float), ("--epochs", int), ("--batch-size", "--batch", int), ("--seed", int),
          ("--crop-frames", int), ("--max-seconds", float), ("--warm-start", _bool)]


def _add(p, specs):
    for spec in specs:
        *names, typ = spec
        p.add_argument(*names, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egofilter", description="Filter a robot's own speech out of its microphone signal.")
    parser.add_argument("--config", default=None, help="YAML or JSON file with RunConfig fields")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic source corpus and manifest")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("mix", help="render mixtures from a manifest")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out-dir", default=None)

    p = sub.add_parser("train", help="train the ego-speech network")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)
    _add(p, _NETWORK + _TRAIN)

    p = sub.add_parser("filter", help="filter one mixture offline")
    p.add_argument("--robot", default=None)
    p.add_argument("--mic", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--mode", choices=["entire", "blocks"], default=None)
    p.add_argument("--out", default=None)
    _add(p, _PIPELINE + _SUBTRACT)

    p = sub.add_parser("stream", help="simulate the two-lane streaming filter")
    p.add_argument("--robot", default=None)
    p.add_argument("--mic", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--chunk-ms", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    _add(p, _PIPELINE + _SUBTRACT)

    p = sub.add_parser("eval", help="score extracted speech against references")
    p.add_argument("--extracted-dir", default=None)
    p.add_argument("--reference-dir", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("cluster", help="Ward clustering of an evaluation report")
    p.add_argument("--report", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", default=None)
    return parser


def _require(cfg: RunConfig, *names):
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_weights_or_fail(path):
    p = Path(path)
    if not p.is_file():
        raise NoEgoEstimateError(f"no ego estimate: weights file {p} not found")
    return load_weights(p)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig):
    _require(cfg, "out_dir")
    specs = datagen.build_corpus(cfg.out_dir, cfg.n, cfg.seed)
    write_snapshot(cfg, cfg.out_dir, "synth")
    log.info("wrote %d source pairs to %s", len(specs), cfg.out_dir)


def cmd_mix(cfg: RunConfig):
    _require(cfg, "manifest", "out_dir")
    manifest = _existing(cfg.manifest, "manifest")
    specs = datagen.read_manifest(manifest)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, spec in enumerate(specs):
        target, robot = datagen.load_sources(spec, manifest.parent)
        mixture, ego, tgt, _ = datagen.mix_with_overlap(spec, target=target, robot=robot)
        write_wav(out / f"mixture_{i}.wav", mixture)
        write_wav(out / f"ego_{i}.wav", ego)
        write_wav(out / f"target_{i}.wav", tgt)
        ar = target_alpha_ratio(target)
        words = "" if spec.words is None else spec.words
        rows.append([f"mixture_{i}.wav", repr(spec.snr_db), repr(spec.rt60_seconds), repr(ar), words])
    _write_csv(out / "index.csv", ["file", "snr_db", "rt60", "ar_target", "words"], rows)
    write_snapshot(cfg, out, "mix")


def cmd_train(cfg: RunConfig):
    _require(cfg, "manifest", "out")
    manifest = _existing(cfg.manifest, "manifest")
    specs = datagen.read_manifest(manifest)
    if not specs:
        raise ValueError("empty dataset: manifest lists no mixtures")
    pairs = [datagen.training_pair(s, manifest.parent) for s in specs]
    weights, curve = train(pairs, cfg.network(), epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed,
                           batch_size=cfg.batch_size, crop_frames=cfg.crop_frames,
                           max_seconds=cfg.max_seconds, warm_start=cfg.warm_start)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(weights, out)
    _write_csv(out.with_suffix(".loss.csv"), ["step", "loss"], [[i, repr(v)] for i, v in enumerate(curve)])
    write_snapshot(cfg, out.parent, "train")


def _filter_inputs(cfg: RunConfig):
    _require(cfg, "robot", "mic", "weights")
    robot = read_wav(_existing(cfg.robot, "robot clip"))
    mic = read_wav(_existing(cfg.mic, "microphone clip"))
    return robot, mic, _load_weights_or_fail(cfg.weights)


def cmd_filter(cfg: RunConfig):
    _require(cfg, "out")
    robot, mic, weights = _filter_inputs(cfg)
    pcfg, sub = cfg.pipeline(), cfg.subtraction()
    if cfg.mode == "entire":
        clip = run_offline_entire(mic, robot, weights, pcfg, sub)
        onset = clip.start
    elif cfg.mode == "blocks":
        clip = run_offline_blocks(mic, robot, weights, pcfg, sub, flush_tail=cfg.flush_tail)
        onset = clip.start - pcfg.lead_samples
    else:
        raise UsageError(f"unknown mode {cfg.mode!r}")
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, clip)
    sidecar = {"start_sample": clip.start, "onset_sample": onset, "mode": cfg.mode,
               "n_samples": len(clip.samples)}
    Path(str(out) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    write_snapshot(cfg, out.parent, "filter")


def cmd_stream(cfg: RunConfig):
    _require(cfg, "out_dir")
    robot, mic, weights = _filter_inputs(cfg)
    if cfg.chunk_ms <= 0:
        raise UsageError("--chunk-ms must be positive")
    pcfg = cfg.pipeline()
    chunk = max(1, int(round(cfg.chunk_ms * mic.sample_rate / 1000)))
    lanes = TwoLanePipeline(weights, pcfg, cfg.subtraction(), flush_tail=cfg.flush_tail)
    lanes.start(robot)
    for i in range(0, len(mic.samples), chunk):
        lanes.feed(mic.samples[i : i + chunk])
    segments = lanes.close()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, seg in enumerate(segments):
        write_wav(out / f"seg_{i:04d}.wav", seg)
    _write_csv(out / "segments.csv", ["index", "start_sample", "n_samples"],
               [[i, s.start, len(s.samples)] for i, s in enumerate(segments)])
    _write_csv(out / "timings.csv", ["stage", "buffer_index", "millis"],
               [[stage, idx, f"{ms:.3f}"] for stage, idx, ms in lanes.timings])
    write_snapshot(cfg, out, "stream")
    if not segments:
        log.warning("no segments emitted (onset not found or stream shorter than one buffer)")


def _read_sidecar(wav: Path) -> int:
    side = Path(str(wav) + ".json")
    if side.is_file():
        return int(json.loads(side.read_text())["start_sample"])
    return 0


def cmd_eval(cfg: RunConfig):
    _require(cfg, "extracted_dir", "reference_dir", "manifest", "out")
    specs = datagen.read_manifest(_existing(cfg.manifest, "manifest"))
    ext_dir = _existing(cfg.extracted_dir, "extracted directory")
    ref_dir = _existing(cfg.reference_dir, "reference directory")
    items, missing = [], {}
    for i, spec in enumerate(specs):
        ext, ref = ext_dir / f"extracted_{i}.wav", ref_dir / f"target_{i}.wav"
        if not ext.is_file() or not ref.is_file():
            missing[f"{i}"] = f"missing {ext.name if not ext.is_file() else ref.name}"
            continue
        clip = read_wav(ext)
        clip = AudioClip(clip.samples, clip.sample_rate, start=_read_sidecar(ext))
        items.append(EvalItem(str(i), clip, read_wav(ref), snr_db=spec.snr_db,
                              words_target=spec.words or 0, gender_code=spec.gender_code))
    if not items:
        raise ValueError("nothing to evaluate: no extracted/reference pairs found")
    report = evaluate_corpus(items)
    report.errors.update(missing)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report.records, out)
    summary = {**report.summary, "n_errors": len(report.errors), "errors": report.errors}
    out.with_suffix(".summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_snapshot(cfg, out.parent, "eval")
    print(json.dumps({k: v for k, v in summary.items() if k != "errors"}, sort_keys=True))


def cmd_cluster(cfg: RunConfig):
    _require(cfg, "report", "out")
    records = read_report(_existing(cfg.report, "report"))
    result = agglomerative_cluster(records, cfg.k)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ["file_id", "cluster"], [[r.file_id, int(l)] for r, l in zip(records, result.labels)])
    cols = ["cluster", "n", "words_target", "snr_db", "ar_target", "si_sdr_db", "lsd_db", "wer_percent"]
    cols = [c for c in cols if any(c in m for m in result.means)]
    _write_csv(out.parent / "cluster_means.csv", cols, [[m.get(c, "") for c in cols] for m in result.means])
    _write_csv(out.parent / "merge_heights.csv", ["cluster_a", "cluster_b", "height", "size"],
               [[a, b, repr(h), s] for a, b, h, s in result.merges])
    write_snapshot(cfg, out.parent, "cluster")


COMMANDS = {
    "synth": cmd_synth, "mix": cmd_mix, "train": cmd_train, "filter": cmd_filter,
    "stream": cmd_stream, "eval": cmd_eval, "cluster": cmd_cluster,
}

DATA_ERRORS = (ValueError, OSError, AudioError, WeightsFormatError, NoEgoEstimateError,
               ReceptiveFieldError, ConfigError)


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        file_values = load_config_file(args.config) if args.config else {}
        cfg = resolve(file_values, flags)
        COMMANDS[args.command](cfg)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"egofilter: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
