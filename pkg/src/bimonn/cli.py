"""Command-line experiment driver.

Exit codes: 0 success, 2 configuration error, 3 training divergence, 4 I/O or file format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import scipy.fft

from .datasets import IDXFormatError, export_snapshot, make_se
from .experiment import (
    ConfigError,
    ExperimentConfig,
    bench_layer,
    evaluate,
    load_presets,
    parse_config,
    provenance,
    resolve_config,
    train_experiment,
)
from .morphology import write_pgm
from .network import ModelFormatError, binarize_network, describe_certificate, load_certificate, \
    load_model, save_certificate, save_model
from .training import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def thread_count() -> int:
    raw = os.environ.get("BIMONN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"BIMONN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("BIMONN_THREADS must be at least 1")
    return n


def _dump(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    return parse_config(resolve_config(args.config), seed=args.seed)


def _out(args, config: ExperimentConfig | None = None) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path("runs") / (config.name if config else "experiment")


def cmd_gen_data(args) -> int:
    config = _config(args)
    root = _out(args, config) / "data"
    manifest_path = export_snapshot(config.dataset, config.target, root)
    manifest = json.loads(manifest_path.read_text())
    manifest.update(provenance(config))
    _dump(manifest_path, manifest)
    print(f"wrote {len(manifest['images'])} samples to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    out = _out(args, config)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, report = train_experiment(config)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_model(exc.last_good, out / "model.last_good.bimonn")
        _dump(out / "report.json", {**provenance(config), "diverged": str(exc), "step": exc.step})
        raise
    save_model(model, out / "model.bimonn")
    ev = evaluate(model, config, workers=args.threads)
    _dump(out / "report.json", {**report.to_dict(), **provenance(config),
                                "eval_r_dice": ev.r_dice, "eval_b_dice": ev.b_dice})
    print(f"{config.name}: steps={report.steps} eval R-DICE={ev.r_dice:.4f} B-DICE={ev.b_dice:.4f}")
    return EXIT_OK


def _dump_weights(model, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for li, layer in enumerate(model.layers):
        for k in range(layer.out_channels):
            for n in range(layer.in_channels):
                w = layer.bise(k, n).effective_weights()
                write_pgm(root / f"layer{li}_k{k}_n{n}.pgm", w, 0.0, float(w.max()) or 1.0)


def cmd_binarize(args) -> int:
    config = _config(args) if args.config else None
    out = _out(args, config)
    model = load_model(args.model or out / "model.bimonn")
    cert = binarize_network(model)
    save_certificate(cert, out / "certificate")
    _dump_weights(model, out / "weights")
    table = describe_certificate(cert)
    (out / "certificate" / "activation.txt").write_text(table + "\n")
    if config is not None:
        _dump(out / "certificate" / "provenance.json", provenance(config))
    print(table)
    print(f"totally activated: {cert.totally_activated}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _config(args)
    out = _out(args, config)
    model = load_model(args.model or out / "model.bimonn")
    cert_dir = out / "certificate"
    cert = load_certificate(cert_dir) if (cert_dir / "certificate.json").is_file() else None
    if model.in_channels != config.target.in_channels:
        raise ConfigError(f"model expects {model.in_channels} channels, "
                          f"target provides {config.target.in_channels}")
    ev = evaluate(model, config, cert, workers=args.threads)
    _dump(out / "metrics.json", {**ev.to_dict(), **provenance(config)})
    print(f"R-DICE={ev.r_dice:.4f} B-DICE={ev.b_dice:.4f} totally_activated={ev.totally_activated}")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _config(args) if args.config else None
    bench = config.bench if config else {}
    sizes = bench.get("sizes", [512])
    ses = bench.get("ses", [{"shape": "disk", "side": 7}])
    reps = int(bench.get("repetitions", 10))
    try:
        runs = [bench_layer(int(size), make_se(se["shape"], int(se["side"])), reps)
                for size in sizes for se in ses]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bench: {exc}") from exc
    payload = {"runs": runs}
    if config is not None:
        payload.update(provenance(config))
    _dump(_out(args, config) / "bench.json", payload)
    for r in runs:
        print(f"{r['size']}px |S|={r['se']['card']}: float {r['float_mpix_per_s']:.1f} Mpx/s, "
              f"binary {r['binary_mpix_per_s']:.1f} Mpx/s, speedup {r['speedup']:.1f}x, "
              f"identical={r['identical']}")
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in sorted(load_presets()):
        print(name)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "binarize": cmd_binarize,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "presets": cmd_presets,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bimonn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "presets":
            continue
        p.add_argument("--config", help="config JSON path or preset name")
        p.add_argument("--seed", type=int, help="override dataset and training seeds")
        p.add_argument("--out", help="output directory (default runs/<config name>)")
        if name in ("binarize", "eval"):
            p.add_argument("--model", help="model file (default <out>/model.bimonn)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.threads = thread_count()
        with scipy.fft.set_workers(args.threads):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ModelFormatError, IDXFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
