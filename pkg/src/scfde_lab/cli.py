"""Configuration-driven command line front end.

Subcommands: ``gen`` (error-focused dataset), ``train`` (unfolded equalizer),
``eval`` (paired BER sweep), ``complexity`` (multiplication-count table).
Runs are reproducible from (config, seed): repeated invocations produce
byte-identical artifacts. Exit codes: 0 success, 2 configuration error,
3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import harness, training, unfolded
from .channel import ChannelParams, default_n_taps
from .numerics import NotHermitianError, NotPositiveDefiniteError, Rng
from .scfde import SystemSpec
from .training import GenConfig, TrainSchedule, TrainingSet

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "serialize_config",
    "main",
    "cmd_gen",
    "cmd_train",
    "cmd_eval",
    "cmd_complexity",
]

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    system: SystemSpec
    channel: ChannelParams
    seed: int = 0
    threads: int = 1
    gen: GenConfig | None = None
    n_val_channels: int = 200
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    complexity: dict = field(default_factory=dict)


class _Section:
    def __init__(self, parser, name, path):
        self.name = name
        self.path = path
        if not parser.has_section(name):
            raise ConfigError(f"{path}: missing section [{name}]")
        self.sec = parser[name]

    def get(self, key, conv=str, default=None, required=False):
        if key not in self.sec:
            if required:
                raise ConfigError(f"{self.path}: [{self.name}] missing key '{key}'")
            return default
        raw = self.sec[key]
        try:
            if conv is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(
                f"{self.path}: [{self.name}] key '{key}' = {raw!r}: {exc}") from None


def _float_list(raw):
    return tuple(float(tok) for tok in raw.replace(",", " ").split())


def parse_config(path) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    run = _Section(parser, "run", path)
    system = _Section(parser, "system", path)
    spec = SystemSpec(
        mode=system.get("mode", str, required=True).lower(),
        n_data=system.get("n_data", int, required=True),
        n_guard=system.get("n_guard", int, required=True),
        alphabet=system.get("alphabet", str, required=True).lower(),
    )
    chan_sec = _Section(parser, "channel", path)
    tau_rms = chan_sec.get("tau_rms", float, required=True)
    t_s = chan_sec.get("t_s", float, required=True)
    n_taps = chan_sec.get("n_taps", int,
                          default=default_n_taps(tau_rms, t_s, max(spec.n_guard, 1)))
    chan = ChannelParams(tau_rms=tau_rms, t_s=t_s, n_taps=n_taps)

    cfg = RunConfig(system=spec, channel=chan,
                    seed=run.get("seed", int, default=0),
                    threads=run.get("threads", int, default=1))
    if parser.has_section("gen"):
        gen = _Section(parser, "gen", path)
        cfg.gen = GenConfig(
            n_errors_min=gen.get("n_errors_min", int, required=True),
            n_burst=gen.get("n_burst", int, required=True),
            n_check=gen.get("n_check", int, default=10),
            snr_range_db=(gen.get("snr_lo_db", float, required=True),
                          gen.get("snr_hi_db", float, required=True)),
            n_channels=gen.get("n_channels", int, required=True),
            baseline=gen.get("baseline", str, default="lmmse"),
            keep_fraction_floor=gen.get("keep_fraction_floor", float, default=0.1),
            max_redraws=gen.get("max_redraws", int, default=50),
        )
        cfg.n_val_channels = gen.get("n_val_channels", int, default=200)
    if parser.has_section("train"):
        tr = _Section(parser, "train", path)
        cfg.train = {
            "variant": tr.get("variant", str, default="v1"),
            "shared": tr.get("shared", bool, default=False),
            "n_stages": tr.get("n_stages", int, required=True),
            "epochs": tr.get("epochs", int, required=True),
            "batch_size": tr.get("batch_size", int, default=256),
            "learning_rate": tr.get("learning_rate", float, default=6e-4),
            "loss_exponent": tr.get("loss_exponent", int, default=1),
        }
        if cfg.train["variant"] == "v1":
            cfg.train["widths"] = {
                "n_layers_prec": tr.get("n_layers_prec", int, default=3),
                "n_hidden_prec": tr.get("n_hidden_prec", int, default=70),
                "n_layers_prob": tr.get("n_layers_prob", int, default=2),
                "n_hidden_prob": tr.get("n_hidden_prob", int, default=10),
            }
        else:
            cfg.train["widths"] = {
                "n_layers": tr.get("n_layers", int, default=4),
                "n_hidden": tr.get("n_hidden", int, default=200),
            }
    if parser.has_section("eval"):
        ev = _Section(parser, "eval", path)
        cfg.eval = {
            "ebn0_db": ev.get("ebn0_db", _float_list, required=True),
            "n_channels": ev.get("n_channels", int, required=True),
            "blocks_per_burst": ev.get("blocks_per_burst", int, default=1000),
            "roster": tuple(tok.strip() for tok in
                            ev.get("roster", str, default="lmmse").split(",") if tok.strip()),
        }
    if parser.has_section("complexity"):
        cx = _Section(parser, "complexity", path)
        cfg.complexity = {
            "tags": tuple(tok.strip() for tok in
                          cx.get("tags", str, default=",".join(harness.COMPLEXITY_TAGS)
                                 ).split(",") if tok.strip()),
            "v1_stages": cx.get("v1_stages", int, default=7),
            "v1_layers_prec": cx.get("v1_layers_prec", int, default=3),
            "v1_hidden_prec": cx.get("v1_hidden_prec", int, default=70),
            "v1_layers_prob": cx.get("v1_layers_prob", int, default=2),
            "v1_hidden_prob": cx.get("v1_hidden_prob", int, default=10),
            "v2_stages": cx.get("v2_stages", int, default=7),
            "v2_layers": cx.get("v2_layers", int, default=4),
            "v2_hidden": cx.get("v2_hidden", int, default=200),
            "detnet_layers": cx.get("detnet_layers", int, default=15),
            "detnet_hidden": cx.get("detnet_hidden", int, default=200),
            "detnet_aux": cx.get("detnet_aux", int, default=20),
            "kafcnn_layers": cx.get("kafcnn_layers", int, default=12),
            "kafcnn_hidden": cx.get("kafcnn_hidden", int, default=250),
            "oamp_layers": cx.get("oamp_layers", int, default=8),
            "itsic_iters": cx.get("itsic_iters", int, default=3),
        }
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Normalized key = value rendering; parsing it back is equivalent."""
    out = [f"[run]\nseed = {cfg.seed}\nthreads = {cfg.threads}\n"]
    out.append("[system]\n" + "\n".join([
        f"mode = {cfg.system.mode}", f"n_data = {cfg.system.n_data}",
        f"n_guard = {cfg.system.n_guard}", f"alphabet = {cfg.system.alphabet}"]) + "\n")
    out.append("[channel]\n" + "\n".join([
        f"tau_rms = {cfg.channel.tau_rms!r}", f"t_s = {cfg.channel.t_s!r}",
        f"n_taps = {cfg.channel.n_taps}"]) + "\n")
    if cfg.gen is not None:
        g = cfg.gen
        out.append("[gen]\n" + "\n".join([
            f"n_errors_min = {g.n_errors_min}", f"n_burst = {g.n_burst}",
            f"n_check = {g.n_check}", f"snr_lo_db = {g.snr_range_db[0]!r}",
            f"snr_hi_db = {g.snr_range_db[1]!r}", f"n_channels = {g.n_channels}",
            f"baseline = {g.baseline}",
            f"keep_fraction_floor = {g.keep_fraction_floor!r}",
            f"max_redraws = {g.max_redraws}",
            f"n_val_channels = {cfg.n_val_channels}"]) + "\n")
    if cfg.train:
        rows = [f"variant = {cfg.train['variant']}",
                f"shared = {cfg.train['shared']}",
                f"n_stages = {cfg.train['n_stages']}",
                f"epochs = {cfg.train['epochs']}",
                f"batch_size = {cfg.train['batch_size']}",
                f"learning_rate = {cfg.train['learning_rate']!r}",
                f"loss_exponent = {cfg.train['loss_exponent']}"]
        rows += [f"{k} = {v}" for k, v in cfg.train["widths"].items()]
        out.append("[train]\n" + "\n".join(rows) + "\n")
    if cfg.eval:
        out.append("[eval]\n" + "\n".join([
            "ebn0_db = " + ", ".join(repr(v) for v in cfg.eval["ebn0_db"]),
            f"n_channels = {cfg.eval['n_channels']}",
            f"blocks_per_burst = {cfg.eval['blocks_per_burst']}",
            "roster = " + ", ".join(cfg.eval["roster"])]) + "\n")
    if cfg.complexity:
        rows = ["tags = " + ", ".join(cfg.complexity["tags"])]
        rows += [f"{k} = {v}" for k, v in cfg.complexity.items() if k != "tags"]
        out.append("[complexity]\n" + "\n".join(rows) + "\n")
    return "\n".join(out)


def cmd_gen(cfg: RunConfig, out_dir) -> None:
    if cfg.gen is None:
        raise ConfigError("config has no [gen] section")
    os.makedirs(out_dir, exist_ok=True)
    train_set = training.generate_training_set(
        cfg.gen, cfg.system, cfg.channel, Rng(cfg.seed).substream("gen-train"))
    train_set.save(os.path.join(out_dir, "train"))
    val_cfg = GenConfig(
        n_errors_min=cfg.gen.n_errors_min, n_burst=cfg.gen.n_burst,
        n_check=cfg.gen.n_check, snr_range_db=cfg.gen.snr_range_db,
        n_channels=cfg.n_val_channels, baseline=cfg.gen.baseline,
        keep_fraction_floor=cfg.gen.keep_fraction_floor,
        max_redraws=cfg.gen.max_redraws)
    val_set = training.generate_training_set(
        val_cfg, cfg.system, cfg.channel, Rng(cfg.seed).substream("gen-val"))
    val_set.save(os.path.join(out_dir, "val"))
    print(f"wrote {train_set.n_records} train / {val_set.n_records} val records "
          f"to {out_dir}")


def _check_dataset_compat(cfg: RunConfig, ts: TrainingSet, what: str) -> None:
    man = ts.manifest
    pairs = (("mode", cfg.system.mode), ("n_data", cfg.system.n_data),
             ("n_guard", cfg.system.n_guard), ("alphabet", cfg.system.alphabet))
    for key, want in pairs:
        got = man.get(key)
        if got is not None and str(got) != str(want):
            raise ConfigError(
                f"{what} dataset was generated with {key} = {got}, "
                f"config says {want}")


def cmd_train(cfg: RunConfig, dataset_dir, out_path) -> None:
    if not cfg.train:
        raise ConfigError("config has no [train] section")
    train_set = TrainingSet.load(os.path.join(dataset_dir, "train"))
    val_set = TrainingSet.load(os.path.join(dataset_dir, "val"))
    _check_dataset_compat(cfg, train_set, "train")
    _check_dataset_compat(cfg, val_set, "val")
    spec = cfg.system
    model = unfolded.build_unfolded(
        cfg.train["variant"], spec.make_alphabet(), spec.n_data, spec.n_prime,
        cfg.train["n_stages"], Rng(cfg.seed).substream("init"),
        shared=cfg.train["shared"], **cfg.train["widths"])
    model.meta = {"mode": spec.mode, "n_guard": spec.n_guard}
    schedule = TrainSchedule(
        epochs=cfg.train["epochs"], batch_size=cfg.train["batch_size"],
        learning_rate=cfg.train["learning_rate"],
        loss_exponent=cfg.train["loss_exponent"],
        seed=cfg.seed,
    )
    best, history = training.train(model, train_set, val_set, schedule, spec)
    unfolded.save_checkpoint(best, out_path)
    hist_path = str(out_path) + ".history.csv"
    with open(hist_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("epoch,train_loss,val_ber\n")
        for epoch, loss, ber in history:
            fh.write(f"{epoch},{loss:.12g},{ber:.12g}\n")
    print(f"wrote checkpoint {out_path} and history {hist_path}")


def _roster_from_tokens(tokens, checkpoints):
    roster = {}
    for tok in tokens:
        kind, _, arg = tok.partition(":")
        if kind == "itsic":
            roster[f"itsic_q{arg or 1}"] = harness.EqualizerSpec(
                "itsic", n_iter=int(arg or 1))
        elif kind in ("lmmse", "lmmse_diag", "dfe", "map"):
            roster[kind] = harness.EqualizerSpec(kind)
        else:
            raise ConfigError(f"unknown roster entry {tok!r}")
    for path in checkpoints:
        name = os.path.splitext(os.path.basename(path))[0]
        roster[name] = harness.EqualizerSpec("unfolded", checkpoint=str(path))
    return roster


def cmd_eval(cfg: RunConfig, checkpoints, out_path) -> None:
    if not cfg.eval:
        raise ConfigError("config has no [eval] section")
    roster = _roster_from_tokens(cfg.eval["roster"], checkpoints)
    sweep = harness.SweepConfig(
        ebn0_db=tuple(cfg.eval["ebn0_db"]), n_channels=cfg.eval["n_channels"],
        blocks_per_burst=cfg.eval["blocks_per_burst"], seed=cfg.seed)
    report = harness.ber_sweep(sweep, cfg.system, cfg.channel, roster,
                               threads=cfg.threads)
    harness.write_csv(report, out_path)
    harness.write_manifest(str(out_path) + ".manifest.json",
                           serialize_config(cfg), cfg.seed, checkpoints)
    print(f"wrote {out_path} ({report.excluded_blocks} excluded blocks)")


def cmd_complexity(cfg: RunConfig, out_path) -> None:
    cx = cfg.complexity or {
        "tags": harness.COMPLEXITY_TAGS, "v1_stages": 7, "v1_layers_prec": 3,
        "v1_hidden_prec": 70, "v1_layers_prob": 2, "v1_hidden_prob": 10,
        "v2_stages": 7, "v2_layers": 4, "v2_hidden": 200, "detnet_layers": 15,
        "detnet_hidden": 200, "detnet_aux": 20, "kafcnn_layers": 12,
        "kafcnn_hidden": 250, "oamp_layers": 8, "itsic_iters": 3}
    if not cx["tags"]:
        raise ConfigError("empty complexity tag roster")
    spec = cfg.system
    n_levels = spec.make_alphabet().n_levels
    base = dict(n_data=spec.n_data, n_prime=spec.n_prime, n_guard=spec.n_guard,
                n_levels=n_levels)
    per_tag = {
        "SICNNv1": dict(n_iter=cx["v1_stages"], n_layers_prec=cx["v1_layers_prec"],
                        n_hidden_prec=cx["v1_hidden_prec"],
                        n_layers_prob=cx["v1_layers_prob"],
                        n_hidden_prob=cx["v1_hidden_prob"]),
        "SICNNv2": dict(n_iter=cx["v2_stages"], n_layers=cx["v2_layers"],
                        n_hidden=cx["v2_hidden"]),
        "DetNet": dict(n_iter=cx["detnet_layers"], det_hidden=cx["detnet_hidden"],
                       det_aux=cx["detnet_aux"]),
        "KAFCNN": dict(n_layers=cx["kafcnn_layers"], n_hidden=cx["kafcnn_hidden"]),
        "OAMPNet2": dict(n_iter=cx["oamp_layers"]),
        "itSIC": dict(n_iter=cx["itsic_iters"]),
    }
    lines = ["tag,raw,rounded"]
    for tag in cx["tags"]:
        inp = harness.ComplexityInput(tag=tag, **base, **per_tag.get(tag, {}))
        raw, rounded = harness.complexity(inp)
        lines.append(f"{tag},{float(raw):.12g},{rounded}")
    with open(out_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {out_path}")


def main(argv=None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand-position flag from clobbering one given
    # before the subcommand with a None default
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override config seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="override worker count")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="override output path")
    parser = argparse.ArgumentParser(
        prog="scfde-lab", parents=[common],
        description="SC-FDE equalization laboratory: dataset generation, "
                    "training, BER evaluation, complexity accounting.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_gen = sub.add_parser("gen", parents=[common],
                           help="generate an error-focused dataset")
    p_gen.add_argument("config")
    p_train = sub.add_parser("train", parents=[common],
                             help="train an unfolded equalizer")
    p_train.add_argument("config")
    p_train.add_argument("dataset")
    p_eval = sub.add_parser("eval", parents=[common],
                            help="run a paired BER sweep")
    p_eval.add_argument("config")
    p_eval.add_argument("checkpoints", nargs="*")
    p_cx = sub.add_parser("complexity", parents=[common],
                          help="write the multiplication-count table")
    p_cx.add_argument("config")
    args = parser.parse_args(argv)
    for name in ("seed", "threads", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        if args.command == "gen":
            cmd_gen(cfg, args.out or "dataset")
        elif args.command == "train":
            cmd_train(cfg, args.dataset, args.out or "model.ckpt")
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoints, args.out or "ber.csv")
        else:
            cmd_complexity(cfg, args.out or "complexity.csv")
    except (NotPositiveDefiniteError, NotHermitianError,
            training.TrainingDivergedError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
