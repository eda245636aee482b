"""Command-line entry point: ``mrasnn <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import architecture as arch
from . import data as dmod
from . import energy as emod
from . import tensor as tc
from . import training as tmod
from .neurons import NeuronConfig

log = logging.getLogger("mrasnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_SNRS = (30, 25, 20, 15, 10, 5, 0)
DATA_DIR_ENV = "MRASNN_DATA_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a run needs, loadable from a ``key = value`` text file."""

    preset: str = "synthetic"
    timesteps: int = 4
    tau: float = 2.0
    theta: float = 1.0
    a: float = 1.0
    attention_order: str = "ca-sa"
    asn_sites: str = "fusion+blocks"
    conv_bias: bool = True
    standardize: bool = True
    epochs: int = 30
    batch_size: int = 64
    lr0: float = 0.01
    lr_decay: float = 0.1
    lr_step: int = 30
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    seed: int = 0
    train_fraction: float = 0.7
    synth_classes: int = 3
    synth_per_class: int = 200
    data: str = ""
    out: str = ""

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    def set(self, key: str, value) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind in ("bool", bool):
                if isinstance(value, bool):
                    parsed = value
                elif str(value).lower() in ("1", "true", "yes", "on"):
                    parsed = True
                elif str(value).lower() in ("0", "false", "no", "off"):
                    parsed = False
                else:
                    raise ValueError(value)
            elif kind in ("int", int):
                parsed = int(value)
            elif kind in ("float", float):
                parsed = float(value)
            else:
                parsed = str(value)
        except ValueError:
            raise ConfigError(f"invalid value for {key}: {value!r}") from None
        setattr(self, key, parsed)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"

    def network_config(self, num_classes: int | None = None, input_channels: int | None = None) -> arch.NetworkConfig:
        try:
            cfg = arch.build_preset(self.preset, num_classes, self.timesteps)
            cfg.neuron = NeuronConfig(self.tau, self.theta, self.a)
            cfg.attention_order = self.attention_order
            cfg.asn_sites = self.asn_sites
            cfg.conv_bias = self.conv_bias
            cfg.standardize = self.standardize
            if input_channels is not None:
                cfg.input_channels = input_channels
            cfg.validate()
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc).strip("'\"")) from None
        return cfg

    def train_config(self) -> tmod.TrainConfig:
        try:
            return tmod.TrainConfig(
                epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr0, lr_decay=self.lr_decay,
                lr_step=self.lr_step, seed=self.seed, weight_decay=self.weight_decay, grad_clip=self.grad_clip,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _resolve(args, overrides: dict) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = RunConfig.parse(path.read_text())
    for key, value in overrides.items():
        if value is not None:
            cfg.set(key, value)
    return cfg


def _data_path(p: str) -> Path:
    path = Path(p)
    if not path.exists() and not path.is_absolute() and os.environ.get(DATA_DIR_ENV):
        path = Path(os.environ[DATA_DIR_ENV]) / p
    if not path.exists():
        raise dmod.DataError(f"data file not found: {p}")
    return path


def _load_data(p: str) -> dmod.SampleSet:
    path = _data_path(p)
    if path.suffix.lower() == ".csv":
        return dmod.load_csv(path)
    return dmod.load_dataset(path)


def _load_model(p: str) -> arch.MRASNN:
    path = Path(p)
    if not path.exists():
        raise dmod.DataError(f"model file not found: {p}")
    return arch.load_checkpoint(path)


def _check_classes(net: arch.MRASNN, ds: dmod.SampleSet) -> None:
    if ds.num_classes > net.cfg.num_classes or (len(ds) and ds.labels.max() >= net.cfg.num_classes):
        raise ConfigError(
            f"class-count mismatch: model outputs {net.cfg.num_classes} classes, data has {ds.num_classes}"
        )
    if ds.windows.shape[1] != net.cfg.input_channels:
        raise ConfigError(
            f"channel mismatch: model expects {net.cfg.input_channels} input channels, data has {ds.windows.shape[1]}"
        )


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _write_provenance(out_file: Path, text: str) -> None:
    out_file.with_name(out_file.name + ".config.txt").write_text(text)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    rc = _resolve(args, {"seed": args.seed, "preset": args.preset, "timesteps": args.timesteps,
                         "epochs": args.epochs, "data": args.data, "out": args.out})
    if not rc.out:
        raise ConfigError("--out is required")
    out = Path(rc.out)
    if rc.data:
        ds = _load_data(rc.data)
    else:
        ds = dmod.synth_dataset(rc.synth_classes, rc.synth_per_class, 1024, seed=rc.seed)
    net_cfg = rc.network_config(num_classes=ds.num_classes if rc.preset == "synthetic" else None,
                                input_channels=ds.windows.shape[1])
    net_cfg.input_length = ds.windows.shape[2]
    try:
        arch.static_shapes(net_cfg)
    except arch.DimensionError as exc:
        raise ConfigError(str(exc)) from None
    trainset, evalset = dmod.split(ds, rc.train_fraction, rc.seed)
    net = arch.build_network(net_cfg, seed=rc.seed)
    _check_classes(net, ds)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(rc.to_text())
    dmod.save_dataset(trainset, out / "train.vibr")
    dmod.save_dataset(evalset, out / "eval.vibr")
    log_path = out / "history.log"
    log_path.write_text(tmod.HISTORY_HEADER + "\n")

    def on_epoch(rec):
        with open(log_path, "a") as fh:
            fh.write(rec.line() + "\n")
        print(rec.line(), flush=True)

    try:
        result = tmod.train(net, trainset, rc.train_config(), evalset, on_epoch=on_epoch)
    except tmod.NumericalError as exc:
        if exc.last_good:
            (out / "last_good.mras").write_bytes(exc.last_good)
        raise
    (out / "best.mras").write_bytes(result.best_checkpoint)
    (out / "final.mras").write_bytes(result.final_checkpoint)
    print(f"best eval accuracy: {result.best_eval_acc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load_data(args.data)
    accs, reports = [], []
    for model_path in args.model:
        net = _load_model(model_path)
        _check_classes(net, ds)
        rep = tmod.evaluate(net, ds, keep_timestep_logits=bool(args.emit_timestep_logits))
        accs.append(rep.accuracy)
        reports.append(rep)
    if len(accs) > 1:
        mean, std = tmod.aggregate(accs)
        print(f"accuracy: {mean:.4f} ± {std:.4f} (n={len(accs)})")
    else:
        print(f"accuracy: {accs[0]:.4f}")
    rep = reports[0]
    if args.emit_confusion:
        path = Path(args.emit_confusion)
        confusion = sum(r.confusion for r in reports)
        k = confusion.shape[0]
        _write_csv(path, ["true"] + [f"pred{j}" for j in range(k)],
                   [[i] + [int(v) for v in confusion[i]] for i in range(k)])
        _write_provenance(path, f"model = {', '.join(args.model)}\ndata = {args.data}\n")
    if args.emit_timestep_logits:
        path = Path(args.emit_timestep_logits)
        logits = rep.timestep_logits  # [T, N, K]
        T, N, K = logits.shape
        rows = [[n, t, int(ds.labels[n])] + [f"{v:.6f}" for v in logits[t, n]] for n in range(N) for t in range(T)]
        _write_csv(path, ["sample", "timestep", "label"] + [f"logit{j}" for j in range(K)], rows)
        _write_provenance(path, f"model = {args.model[0]}\ndata = {args.data}\n")
    return EXIT_OK


def _parse_list(text: str, kind=float) -> list:
    try:
        return [kind(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"invalid list: {text!r}") from None


def noise_sweep(nets, evalset: dmod.SampleSet, snrs, seeds: int = 3) -> list[tuple[float, float, float]]:
    """Accuracy mean/std over models x noise realisations at each SNR.

    The evaluation set is copied before noise injection and never modified.
    Realisation ``s`` uses the same seed at every SNR, so the points differ
    only in noise scale and not in the draw.
    """
    rows = []
    before = evalset.windows.copy()
    for snr in snrs:
        accs = []
        for net in nets:
            for s in range(seeds):
                noisy = dmod.add_noise_set(evalset, snr, seed=s)
                accs.append(tmod.evaluate(net, noisy).accuracy)
        mean, std = tmod.aggregate(accs)
        rows.append((snr, mean, std))
    assert np.array_equal(before, evalset.windows), "noise sweep modified the clean data"
    return rows


def cmd_noise_sweep(args) -> int:
    ds = _load_data(args.data)
    nets = [_load_model(p) for p in args.model]
    for net in nets:
        _check_classes(net, ds)
    snrs = _parse_list(args.snrs) if args.snrs else list(DEFAULT_SNRS)
    rows = noise_sweep(nets, ds, snrs, args.seeds)
    out = Path(args.out)
    _write_csv(out, ["snr_db", "accuracy", "std"], [[f"{s:g}", _fmt(a), _fmt(sd)] for s, a, sd in rows])
    _write_provenance(out, f"model = {', '.join(args.model)}\ndata = {args.data}\nsnrs = {','.join(f'{s:g}' for s in snrs)}\n"
                           f"seeds = {args.seeds}\n")
    for s, a, sd in rows:
        print(f"{s:>6g} dB  {a:.4f} ± {sd:.4f}")
    return EXIT_OK


def cmd_timestep_sweep(args) -> int:
    spec = args.model_config
    if spec and Path(spec).exists():
        rc = RunConfig.parse(Path(spec).read_text())
    else:
        rc = RunConfig()
        if spec:
            rc.set("preset", spec)
    if args.epochs is not None:
        rc.set("epochs", args.epochs)
    if args.seed is not None:
        rc.set("seed", args.seed)
    ds = _load_data(args.data)
    trainset, evalset = dmod.split(ds, rc.train_fraction, rc.seed)
    rows = []
    for T in _parse_list(args.timesteps, int):
        rc.timesteps = T
        cfg = rc.network_config(num_classes=ds.num_classes if rc.preset == "synthetic" else None,
                                input_channels=ds.windows.shape[1])
        cfg.input_length = ds.windows.shape[2]
        net = arch.build_network(cfg, seed=rc.seed)
        result = tmod.train(net, trainset, rc.train_config(), evalset)
        best = arch.checkpoint_from_bytes(result.best_checkpoint)
        rep = tmod.evaluate(best, evalset)
        en = emod.energy_report(best, evalset)
        tot = en.total
        rows.append([T, _fmt(rep.accuracy), f"{tot.mac:.1f}", f"{tot.ac:.1f}", f"{en.energy:.1f}"])
        print(f"T={T}: accuracy {rep.accuracy:.4f}, energy {en.energy:,.1f} pJ", flush=True)
    out = Path(args.out)
    _write_csv(out, ["timesteps", "accuracy", "mac", "ac", "energy_pj"], rows)
    _write_provenance(out, rc.to_text())
    return EXIT_OK


def cmd_energy(args) -> int:
    net = _load_model(args.model)
    ds = _load_data(args.data)
    _check_classes(net, ds)
    model = emod.EnergyModel(args.e_ac, args.e_mac)
    rep = emod.energy_report(net, ds, model)
    sys.stdout.write(rep.to_text())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rep.to_csv())
        _write_provenance(out, f"model = {args.model}\ndata = {args.data}\ne_ac = {args.e_ac}\ne_mac = {args.e_mac}\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        ds = dmod.synth_dataset(args.classes, args.per_class, args.length, args.seed, args.channels)
    except dmod.DataError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dmod.save_dataset(ds, out)
    _write_provenance(out, f"classes = {args.classes}\nper_class = {args.per_class}\nlength = {args.length}\n"
                           f"channels = {args.channels}\nseed = {args.seed}\n")
    print(f"wrote {len(ds)} windows to {out}")
    return EXIT_OK


def extract_features(net: arch.MRASNN, ds: dmod.SampleSet, layer: str, batch_size: int = 64) -> np.ndarray:
    """Spike rate per channel of ``layer``, averaged over length and timesteps: ``[N, C]``."""
    valid = net.feature_layers()
    if layer not in valid:
        raise ConfigError(f"unknown layer {layer!r}; valid layers: {', '.join(valid)}")
    was = net.training
    net.eval()
    feats = []
    with tc.no_grad():
        for start in range(0, len(ds), batch_size):
            taps: dict = {}
            tmod.forward_mean_logits(net, ds.windows[start : start + batch_size], taps)
            spikes = np.stack(taps[layer])  # [T, b, C, s]
            feats.append(spikes.mean(axis=(0, 3)))
    net.train(was)
    return np.concatenate(feats)


def cmd_export_features(args) -> int:
    net = _load_model(args.model)
    ds = _load_data(args.data)
    _check_classes(net, ds)
    layer = args.layer or net.feature_layers()[-1]
    feats = extract_features(net, ds, layer)
    out = Path(args.out)
    _write_csv(out, [f"f{j}" for j in range(feats.shape[1])] + ["label"],
               [[f"{v:.6f}" for v in row] + [int(lab)] for row, lab in zip(feats, ds.labels)])
    _write_provenance(out, f"model = {args.model}\ndata = {args.data}\nlayer = {layer}\n")
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrasnn", description="Spiking fault-diagnosis network toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--preset")
    t.add_argument("--timesteps", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints")
    e.add_argument("--model", action="append", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--emit-confusion")
    e.add_argument("--emit-timestep-logits")
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("noise-sweep", help="accuracy under additive Gaussian noise")
    n.add_argument("--model", action="append", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--snrs", help="comma-separated dB values (default 30,25,...,0)")
    n.add_argument("--seeds", type=int, default=3, help="noise realisations per model")
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_noise_sweep)

    ts = sub.add_parser("timestep-sweep", help="train and evaluate at several timestep counts")
    ts.add_argument("--model-config", help="run config file or preset name")
    ts.add_argument("--data", required=True)
    ts.add_argument("--timesteps", default="1,2,4,6,8")
    ts.add_argument("--epochs", type=int)
    ts.add_argument("--seed", type=int)
    ts.add_argument("--out", required=True)
    ts.set_defaults(func=cmd_timestep_sweep)

    en = sub.add_parser("energy", help="spike-driven MAC/AC energy report")
    en.add_argument("--model", required=True)
    en.add_argument("--data", required=True)
    en.add_argument("--out")
    en.add_argument("--e-ac", type=float, default=0.9)
    en.add_argument("--e-mac", type=float, default=4.6)
    en.set_defaults(func=cmd_energy)

    sy = sub.add_parser("synth", help="generate a synthetic vibration dataset")
    sy.add_argument("--classes", type=int, default=3)
    sy.add_argument("--per-class", type=int, default=200)
    sy.add_argument("--length", type=int, default=1024)
    sy.add_argument("--channels", type=int, default=1)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)

    fx = sub.add_parser("export-features", help="write pooled spike-rate features as CSV")
    fx.add_argument("--model", required=True)
    fx.add_argument("--data", required=True)
    fx.add_argument("--layer")
    fx.add_argument("--out", required=True)
    fx.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dmod.DataError, arch.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except tmod.NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
