"""Command line entry point: ``ultrapos synth|locate|sweep|bench``.

Exit codes: 0 success, 2 configuration error, 3 detection failure.
"""
from __future__ import annotations

import argparse
import inspect
import json
import sys
from pathlib import Path

from .config import _read, load_anchor_map, load_scenario, example_path
from .detector import write_detections_csv
from .errors import ConfigError, DetectionError, InsufficientDataError, NoPeakError
from .harness.experiments import EXPERIMENTS, bench
from .harness.pipeline import locate, receiver_audio
from .harness.scene import detector_config, render
from .locator import write_fixes_csv
from .signals import read_wav, write_wav

EXIT_OK, EXIT_CONFIG, EXIT_DETECTION = 0, 2, 3


def _scenario(args):
    path = args.scenario or example_path()
    scn, seed = load_scenario(path)
    if getattr(args, "snr_db", None) is not None:
        scn.snr_db = args.snr_db
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    return scn, seed


def cmd_synth(args) -> int:
    scn, seed = _scenario(args)
    rec = render(scn, seed)
    write_wav(args.out, [rec.primary, rec.secondary], fmt=args.format)
    if args.truth:
        frames = {str(k): [list(map(float, f)) for f in v] for k, v in rec.truth.frames.items()}
        Path(args.truth).write_text(json.dumps({"seed": seed, "gamma": rec.truth.gamma,
                                                "noise_std_adc": rec.truth.noise_std_adc,
                                                "frames": frames}, indent=2))
    print(f"wrote {args.out}: 2 ch, {len(rec.secondary)} samples at {rec.secondary.rate:g} Hz")
    return EXIT_OK


def cmd_locate(args) -> int:
    scn, _ = _scenario(args)
    anchors = load_anchor_map(args.anchors) if args.anchors else scn.anchor_map()
    cfg = detector_config(scn)
    if cfg is None:
        raise ConfigError("scenario has no [cbeacon]; the detector needs its chirp parameters")
    chans = read_wav(args.wav)
    if chans[0].rate != cfg.adc_rate:
        raise ConfigError(f"WAV rate {chans[0].rate:g} Hz does not match the ADC rate {cfg.adc_rate:g} Hz")
    primary, secondary = chans[0], (chans[1] if len(chans) > 1 else None)
    audio = receiver_audio(primary, secondary, cfg, turbo=args.turbo)
    fixes, dets = [], []
    try:
        res = locate(audio, cfg, anchors, dims=scn.dims, z_fixed=scn.z_fixed, c=scn.c)
    except NoPeakError as e:
        print(f"no beacon found: {e}", file=sys.stderr)
    else:
        dets = res.detections
        if res.fix is not None:
            fixes.append(res.fix)
        else:
            print(f"no fix: {res.note}", file=sys.stderr)
    write_fixes_csv(args.out, fixes)
    if args.detections:
        write_detections_csv(args.detections, dets, cfg)
    for f in fixes:
        x, y, z = f.position
        print(f"fix x={x:.4f} y={y:.4f} z={z:.4f} anchors={len(f.used_ids)} rms={f.residual_rms:.4f}")
    print(f"wrote {args.out}: {len(fixes)} fix(es)")
    return EXIT_OK


def _experiment_kwargs(fn, args) -> dict:
    params = inspect.signature(fn).parameters
    kw = {}
    if args.params:
        extra = _read(args.params)
        unknown = set(extra) - set(params)
        if unknown:
            raise ConfigError(f"{args.params}: unknown parameters {sorted(unknown)} for this experiment")
        kw.update(extra)
    if args.trials is not None:
        kw["trials" if "trials" in params else "frames"] = args.trials
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.snr_db is not None:
        kw["snr_db_1m" if "snr_db_1m" in params else "snr_db"] = args.snr_db
    if getattr(args, "workers", None) and "workers" in params:
        kw["workers"] = args.workers
    return kw


def _emit(rep, out) -> None:
    if out:
        out = Path(out)
        rep.to_csv(out.with_suffix(".csv"))
        rep.to_json(out.with_suffix(".json"))
        print(f"wrote {out.with_suffix('.csv')} and {out.with_suffix('.json')}")
    print(json.dumps(rep.aggregates, indent=2, sort_keys=True))


def cmd_sweep(args) -> int:
    if args.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {args.experiment!r}; choose from {sorted(EXPERIMENTS)}")
    fn = EXPERIMENTS[args.experiment]
    _emit(fn(**_experiment_kwargs(fn, args)), args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    _emit(bench(**_experiment_kwargs(bench, args)), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ultrapos", description="Ultrasonic positioning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a scenario to a 2-channel WAV (primary, secondary)")
    s.add_argument("--scenario", help="scenario TOML (default: bundled example)")
    s.add_argument("--seed", type=int)
    s.add_argument("--snr-db", type=float)
    s.add_argument("--out", required=True, help="output WAV path")
    s.add_argument("--format", choices=["float32", "pcm16"], default="float32")
    s.add_argument("--truth", help="also write ground truth as JSON")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("locate", help="estimate the receiver position from a WAV")
    s.add_argument("wav")
    s.add_argument("--scenario", help="scenario TOML supplying chirp/frame settings (default: bundled example)")
    s.add_argument("--anchors", help="anchor map TOML (default: the scenario's anchors)")
    s.add_argument("--out", required=True, help="output fixes CSV")
    s.add_argument("--detections", help="also write per-beacon detections CSV")
    s.add_argument("--turbo", action="store_true", help="dual-mic enhancement before detection")
    s.set_defaults(func=cmd_locate)

    for name, fn, helptext in (("sweep", cmd_sweep, "run a canned experiment"),
                               ("bench", cmd_bench, "time the pipeline stages")):
        s = sub.add_parser(name, help=helptext)
        if name == "sweep":
            s.add_argument("experiment", help=", ".join(sorted(EXPERIMENTS)))
            s.add_argument("--workers", type=int, default=1)
            s.add_argument("--params", help="TOML file of experiment keyword arguments")
        else:
            s.set_defaults(params=None)
        s.add_argument("--scenario", help=argparse.SUPPRESS)
        s.add_argument("--seed", type=int)
        s.add_argument("--trials", type=int)
        s.add_argument("--snr-db", type=float)
        s.add_argument("--out", help="report path prefix; writes .csv and .json")
        s.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientDataError as e:
        print(f"insufficient data: {e}", file=sys.stderr)
        return EXIT_DETECTION
    except DetectionError as e:
        print(f"detection failed: {e}", file=sys.stderr)
        return EXIT_DETECTION


if __name__ == "__main__":
    sys.exit(main())
