"""``edm2se`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .config import ConfigError, RunConfig
from .ema import SigmaRelRangeError, ema_sweep, no_ema, reconstruct, sweep_csv
from .store import SnapshotStore, load_params, save_params

log = logging.getLogger("edm2se")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _load_run(path) -> RunConfig:
    run = RunConfig() if path is None else RunConfig.load(path)
    return run.with_env_seed()


def _run_dir_config(directory: Path, override) -> RunConfig:
    if override is not None:
        return _load_run(override)
    path = directory / "run_config.json"
    if not path.exists():
        raise ConfigError("--config", f"no run_config.json next to {directory}; pass --config")
    return RunConfig.load(path)


def _stats_for(directory: Path, run: RunConfig):
    from .trainer import load_stats

    path = directory / "stats.json"
    if path.exists():
        return load_stats(path)
    if run.stats is not None:
        return run.stats
    raise ConfigError("stats", f"no stats.json in {directory} and no stats section in the config")


def _total_steps(store: SnapshotStore) -> int:
    return max(r.step for r in store.records)


# commands --------------------------------------------------------------------------------


def cmd_selftest(args) -> int:
    from .selftest import format_table, run_checks

    results = run_checks(schedule_c=args.schedule_c, schedule_k=args.schedule_k)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print("all checks passed")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train

    run = _load_run(args.config)
    res = train(run, args.out, progress_every=args.progress)
    print(f"trained {len(res.history)} steps in {res.seconds:.1f} s; outputs in {res.out_dir}")
    return EXIT_OK


def cmd_ema_reconstruct(args) -> int:
    store = SnapshotStore(args.store)
    if not store.records:
        raise ValueError(f"snapshot store {args.store} is empty")
    out = Path(args.out)
    if args.sigma_rel.lower() == "none":
        save_params(out, no_ema(store))
        print(f"wrote raw final parameters to {out}")
        return EXIT_OK
    traces = None if args.traces is None else tuple(float(g) for g in args.traces.split(","))
    rec = reconstruct(store, float(args.sigma_rel), _total_steps(store), traces=traces)
    save_params(out, rec.params)
    info = {
        "sigma_rel": float(args.sigma_rel),
        "gamma": rec.gamma,
        "profile_error": rec.profile_error,
        "coefficients": [
            {"step": r.step, "trace": r.trace, "coefficient": float(a)} for r, a in zip(rec.records, rec.coefficients)
        ],
    }
    out.with_name(out.name + ".json").write_text(json.dumps(info, indent=2) + "\n")
    print(f"wrote {out} (gamma={rec.gamma:.6g}, profile error {rec.profile_error:.3e})")
    return EXIT_OK


def cmd_ema_sweep(args) -> int:
    from .evaluate import sweep_evaluator

    if args.metric != "si_sdr":
        raise ConfigError("--metric", f"unsupported metric {args.metric!r}; only si_sdr is available")
    store_dir = Path(args.store)
    store = SnapshotStore(store_dir)
    if not store.records:
        raise ValueError(f"snapshot store {store_dir} is empty")
    run = _run_dir_config(store_dir, args.config)
    stats = _stats_for(store_dir, run)
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("--grid", f"expected comma-separated numbers, got {args.grid!r}") from None
    rows = ema_sweep(store, sweep_evaluator(run, stats), grid, _total_steps(store))
    Path(args.out).write_text(sweep_csv(rows))
    for r in rows:
        print(f"sigma_rel={r['sigma_rel']:<8g} si_sdr={r['si_sdr']:8.3f} loss={r['loss']:.4g}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    import dataclasses

    from .evaluate import net_from_params
    from .sampler import enhance_waveform, make_denoiser
    from .signal import read_wav, write_wav

    model = Path(args.model)
    run = _run_dir_config(model.parent, args.config)
    stats = _stats_for(model.parent, run)
    if args.steps is not None and args.steps < 1:
        raise ConfigError("--steps", "must be >= 1")
    cfg = run.sampler_cfg if args.steps is None else dataclasses.replace(run.sampler_cfg, n_steps=args.steps)
    net = net_from_params(run, load_params(model))
    wav, sr = read_wav(args.inp)
    if sr != run.stft.sample_rate:
        raise ValueError(f"{args.inp}: sample rate {sr} Hz, model expects {run.stft.sample_rate} Hz")
    den = make_denoiser(net, run.schedule, stats, run.mode)
    out = enhance_waveform(wav, den, run.stft, cfg, run.schedule, time_multiple=net.cfg.downsample_factor)
    write_wav(args.out, out, sr, fmt=args.format)
    print(f"wrote {args.out} ({out.size} samples)")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .signal import measured_snr, synth_pair, write_wav

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        clean, noisy = synth_pair([args.seed, i], args.snr, n_samples=args.samples, sample_rate=args.sample_rate)
        write_wav(out / f"clean_{i:03d}.wav", clean, args.sample_rate)
        write_wav(out / f"noisy_{i:03d}.wav", noisy, args.sample_rate)
        log.info("item %d: snr %.3f dB", i, measured_snr(clean, noisy))
    print(f"wrote {args.count} clean/noisy pairs to {out}")
    return EXIT_OK


# parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edm2se", description="Bridge diffusion denoising toolkit on synthetic mixtures.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("selftest", help="run the invariant suite and print a pass/fail table")
    s.add_argument("--schedule-c", type=float, default=0.4, help=argparse.SUPPRESS)
    s.add_argument("--schedule-k", type=float, default=2.6, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)

    s = sub.add_parser("train", help="train the toy denoiser")
    s.add_argument("--config", help="run config JSON (defaults if omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--progress", type=int, default=0, help="log every N steps (with -v)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ema-reconstruct", help="reconstruct parameters for an EMA length from snapshots")
    s.add_argument("--store", required=True)
    s.add_argument("--sigma-rel", required=True, help="target sigma_rel, or 'none' for the raw final parameters")
    s.add_argument("--traces", help="comma-separated EMA exponents to use as the basis")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ema_reconstruct)

    s = sub.add_parser("ema-sweep", help="evaluate reconstructions over a sigma_rel grid")
    s.add_argument("--store", required=True)
    s.add_argument("--grid", required=True, help="comma-separated sigma_rel values")
    s.add_argument("--metric", default="si_sdr")
    s.add_argument("--config", help="run config (defaults to the store's run_config.json)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ema_sweep)

    s = sub.add_parser("enhance", help="enhance a WAV file")
    s.add_argument("--model", required=True, help="parameter file (run_config.json and stats.json are read from its directory)")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--config")
    s.add_argument("--format", choices=("float32", "pcm16"), default="float32")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("synth", help="write synthetic clean/noisy WAV pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--snr", type=float, default=5.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples", type=int, default=8000)
    s.add_argument("--sample-rate", type=int, default=8000)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SigmaRelRangeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
