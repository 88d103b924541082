"""``simctl``: command-line entry point for runs, grids, sweeps and codec pretraining."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import experiments as ex
from . import semantic_codec as sc
from .config import ConfigValidationError, RunConfig, load_config
from .data import FormatError

log = logging.getLogger("simctl")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _strs(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    data_dir = args.data_dir or os.environ.get("SIMCTL_DATA_DIR")
    if data_dir:
        overrides["data_dir"] = data_dir
    if getattr(args, "workers", None):
        overrides["workers"] = args.workers
    return cfg.with_(**overrides) if overrides else cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    path = ex.run_experiment(cfg, args.out, name=args.name)
    print(path)
    return 0


def cmd_grid(args) -> int:
    cfg = _config(args)
    cells = ex.run_grid(cfg, crs=_strs(args.crs), snrs=_floats(args.snrs), channels=tuple(_strs(args.channels)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(ex.write_grid(cells, out / "grid.csv"))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows = ex.run_latency_sweep(cfg, client_counts=tuple(_ints(args.clients)), regimes=tuple(_strs(args.regimes)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(ex.write_sweep(rows, out / "sweep.csv"))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    cr = sc.parse_cr(args.cr)
    train, _ = ex.load_data(cfg)
    epochs = args.epochs if args.epochs is not None else cfg.codec.pretrain_epochs
    feats = ex.warmup_features(cfg, train)
    codec = sc.pretrain_codec(feats, cr, args.snr, epochs, cfg.seed, lr=cfg.codec.lr,
                              batch_size=cfg.batch_size, hidden=cfg.codec.hidden, init=cfg.codec.init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = sc.save_codec(codec, out / f"codec_{cr.numerator}_{cr.denominator}_seed{cfg.seed}.bin")
    print(f"{path} loss {codec.loss_history[0]:.6g} -> {codec.loss_history[-1]:.6g} hash {codec.param_hash()[:16]}")
    return 0


def cmd_preset(args) -> int:
    data_dir = args.data_dir or os.environ.get("SIMCTL_DATA_DIR")
    for path in ex.run_preset(args.name, args.out, seed=args.seed, data_dir=data_dir):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simctl", description="SC-USFL split-learning simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="TOML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override run.seed")
        sp.add_argument("--out", default="out", help="output directory (default: out)")
        sp.add_argument("--data-dir", default=None, help="CIFAR-10 binary directory (or $SIMCTL_DATA_DIR)")
        sp.add_argument("--workers", type=int, default=None, help="parallel client threads")

    sp = sub.add_parser("run", help="train one regime and write per-round CSV")
    common(sp, config_required=True)
    sp.add_argument("--name", default=None, help="output file stem (default: regime)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("grid", help="CR x SNR x channel evaluation grid")
    common(sp)
    sp.add_argument("--crs", default="1/3,1/6,1/8,1/12")
    sp.add_argument("--snrs", default="0,5,10,15,20")
    sp.add_argument("--channels", default="awgn,rayleigh")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("sweep", help="per-round latency versus client count")
    common(sp)
    sp.add_argument("--clients", default="1,2,4,8")
    sp.add_argument("--regimes", default="fl,sfl,usfl,scusfl")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("pretrain", help="pretrain and checkpoint one frozen codec")
    common(sp)
    sp.add_argument("--cr", required=True, help="compression ratio, e.g. 1/6")
    sp.add_argument("--snr", type=float, default=10.0, help="training SNR in dB")
    sp.add_argument("--epochs", type=int, default=None)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("preset", help="run a named desk-scale preset")
    sp.add_argument("name", choices=sorted(ex.PRESETS))
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default="out")
    sp.add_argument("--data-dir", default=None)
    sp.set_defaults(func=cmd_preset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigValidationError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"simctl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
