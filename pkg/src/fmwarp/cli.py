"""Command-line pipeline: synth -> pretrain -> transfer -> evaluate -> report.

Configuration is a flat text file of dotted keys (``train.learning_rate =
0.01``); command-line flags override file values. All randomness flows
from one root seed through named substreams, so a full pipeline run with
fixed seeds is byte-identical across invocations, regardless of --jobs.

Exit codes: 0 success, 2 configuration, 3 data (parse/split/alignment),
4 training, 5 search/evaluation, 6 I/O, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from fmwarp import data as datamod
from fmwarp import evaluation, nn, train, transfer
from fmwarp.errors import (
    AlignmentError,
    ConfigError,
    DegenerateMaskError,
    EvaluationError,
    FmwarpError,
    InvalidInputError,
    NumericOverflowError,
    ParseError,
    SearchFailedError,
    SplitError,
    TrainingDivergedError,
    ZeroVarianceError,
)

DEFAULTS = {
    "seed": "0",
    "out": "runs/exp",
    "jobs": "1",
    "realizations": "1",
    "methods": "TimeWarp",
    "data.path": "",
    "data.fill": "",
    "split.rule": "year",
    "split.train_rows": str(datamod.TRAIN_ROWS_ONE_YEAR),
    "split.train_frac": "0.6",
    "arch.hidden_size": "64",
    "arch.dense_sizes": "32,16",
    "train.learning_rate": "0.01",
    "train.batch_length": "72",
    "train.max_epochs": "100",
    "train.patience": "10",
    "train.shuffle": "true",
    "grid.lo": "-5",
    "grid.hi": "5",
    "grid.n_per_axis": "25",
    "source.class": "fm10",
    "synth.n_days": "30",
    "synth.rain_rate": "0.08",
    "synth.cap": "27",
    "filter.threshold": "30",
}

EXIT_CODES = (
    (ConfigError, 2),
    ((ParseError, SplitError, AlignmentError, InvalidInputError, DegenerateMaskError), 3),
    ((TrainingDivergedError, NumericOverflowError), 4),
    ((SearchFailedError, EvaluationError, ZeroVarianceError), 5),
    (OSError, 6),
)


class Config:
    """Flat dotted-key configuration with typed accessors."""

    def __init__(self, values: dict[str, str]):
        self.values = dict(DEFAULTS)
        self.values.update(values)

    @classmethod
    def load(cls, path: str | None, overrides: dict[str, str] | None = None) -> "Config":
        values: dict[str, str] = {}
        if path:
            text = Path(path).read_text()
            for lineno, raw in enumerate(text.splitlines(), start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = str(value)
        return cls(values)

    def get(self, key: str) -> str:
        if key not in self.values:
            raise ConfigError(f"missing config key {key!r}")
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.get(key))
        except ValueError:
            raise ConfigError(f"config key {key!r} must be an integer") from None

    def get_float(self, key: str) -> float:
        try:
            return float(self.get(key))
        except ValueError:
            raise ConfigError(f"config key {key!r} must be a number") from None

    def get_bool(self, key: str) -> bool:
        value = self.get(key).lower()
        if value in ("true", "1", "yes"):
            return True
        if value in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r} must be a boolean")

    def get_optional_float(self, key: str) -> float | None:
        value = self.get(key).strip().lower()
        return None if value in ("", "none") else self.get_float(key)

    def manifest_echo(self) -> dict[str, str]:
        """Config as recorded in manifests; execution-only keys (jobs) are
        dropped so outputs stay byte-identical regardless of parallelism."""
        return {k: v for k, v in self.values.items() if k != "jobs"}

    def train_config(self) -> train.TrainConfig:
        return train.TrainConfig(
            learning_rate=self.get_float("train.learning_rate"),
            batch_length=self.get_int("train.batch_length"),
            max_epochs=self.get_int("train.max_epochs"),
            patience=self.get_int("train.patience"),
            seed=self.get_int("seed"),
            shuffle=self.get_bool("train.shuffle"),
        )

    def grid_spec(self) -> transfer.GridSpec:
        return transfer.GridSpec(
            lo=self.get_float("grid.lo"),
            hi=self.get_float("grid.hi"),
            n_per_axis=self.get_int("grid.n_per_axis"),
        )

    def arch(self) -> tuple[int, tuple[int, ...]]:
        sizes = tuple(
            int(s) for s in self.get("arch.dense_sizes").split(",") if s.strip()
        )
        if len(sizes) != 2:
            raise ConfigError("arch.dense_sizes must list the two hidden dense widths")
        return self.get_int("arch.hidden_size"), sizes


def load_dataset(cfg: Config) -> tuple[datamod.WeatherFrame, list[datamod.FmcSeries]]:
    path = cfg.get("data.path")
    if not path:
        raise ConfigError("data.path is required")
    fill = cfg.get("data.fill") or None
    return datamod.load_csv(path, fill=fill)


def split_dataset(cfg: Config, frame, series) -> datamod.Split:
    rule = cfg.get("split.rule")
    if rule == "year":
        spec = datamod.default_split_spec(frame, train_rows=cfg.get_int("split.train_rows"))
    elif rule == "fraction":
        spec = datamod.fraction_split_spec(frame, train_frac=cfg.get_float("split.train_frac"))
    else:
        raise ConfigError(f"unknown split.rule {rule!r}")
    return datamod.split(frame, series, spec)


def build_series(
    partition: datamod.Partition,
    normalizer: datamod.Normalizer,
    fuel_class: str,
    scaler: datamod.TargetScaler | None = None,
) -> train.SupervisedSeries:
    """Supervised series for one partition: normalized inputs plus
    nearest-hour targets and mask for the requested fuel class, with
    targets in scaled units when a target scaler is given."""
    obs = partition.observations.get(fuel_class)
    if obs is None or len(obs) == 0:
        targets = np.zeros(len(partition.weather))
        mask = np.zeros(len(partition.weather))
    else:
        targets, mask = datamod.nearest_hour_mask(partition.weather.times, obs.times, obs.values)
        if scaler is not None:
            targets = np.where(mask > 0, scaler.scale(targets), 0.0)
    return train.SupervisedSeries(
        inputs=normalizer.transform(partition.weather), targets=targets, mask=mask
    )


def cmd_synth(cfg: Config, out_override: str | None = None) -> Path:
    """Generate a synthetic dataset CSV: weather plus dense hourly targets
    for all four fuel classes, with the sensor cap applied to fm10."""
    out = Path(out_override or cfg.get("data.path") or cfg.get("out"))
    seed = cfg.get_int("seed")
    profile = datamod.SynthProfile(rain_rate=cfg.get_float("synth.rain_rate"))
    frame = datamod.synth_weather(seed, cfg.get_int("synth.n_days"), profile)
    cap = cfg.get_optional_float("synth.cap")
    series = [
        datamod.synth_targets(
            frame,
            tau=datamod.NOMINAL_TAU[cls],
            sensor_cap=cap if cls == "fm10" else None,
            fuel_class=cls,
        )
        for cls in datamod.FUEL_CLASSES
    ]
    out.parent.mkdir(parents=True, exist_ok=True)
    datamod.write_csv(out, frame, series)
    return out


def _pretrain_one(args):
    (k, input_size, hidden, dense_sizes, train_s, val_s, config, vary) = args
    seed_k = config.seed + k
    reals = train.replicate(
        input_size, hidden, dense_sizes, train_s, val_s,
        train.TrainConfig(
            learning_rate=config.learning_rate, batch_length=config.batch_length,
            max_epochs=config.max_epochs, patience=config.patience,
            seed=seed_k, shuffle=config.shuffle,
        ),
        n=1, vary=vary,
    )
    return k, reals[0]


def cmd_pretrain(cfg: Config, out_override: str | None = None, jobs: int | None = None) -> Path:
    """Train per-realization source-task checkpoints plus manifest."""
    out = Path(out_override or cfg.get("out")) / "pretrain"
    out.mkdir(parents=True, exist_ok=True)
    frame, series = load_dataset(cfg)
    parts = split_dataset(cfg, frame, series)
    normalizer = datamod.Normalizer.fit(parts.train.weather)
    source_class = cfg.get("source.class")
    train_obs = parts.train.observations.get(source_class)
    if train_obs is None or len(train_obs) == 0:
        raise ConfigError(f"no {source_class} observations in the training span")
    scaler = datamod.TargetScaler.fit(train_obs.values)
    train_s = build_series(parts.train, normalizer, source_class, scaler)
    val_s = build_series(parts.val, normalizer, source_class, scaler)
    if val_s.mask.sum() == 0:
        raise ConfigError(f"no {source_class} observations in the validation span")
    hidden, dense_sizes = cfg.arch()
    config = cfg.train_config()
    n = cfg.get_int("realizations")
    jobs = jobs if jobs is not None else cfg.get_int("jobs")
    vary = frozenset({"init", "order", "valsplit"})
    tasks = [
        (k, datamod.N_FEATURES, hidden, dense_sizes, train_s, val_s, config, vary)
        for k in range(n)
    ]
    statuses = ["ok"] * n
    results: list[train.Realization | None] = [None] * n
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for k, real in pool.map(_pretrain_worker_safe, tasks):
                results[k] = real
    else:
        for task in tasks:
            k, real = _pretrain_worker_safe(task)
            results[k] = real
    for k, real in enumerate(results):
        if isinstance(real, TrainingDivergedError):
            statuses[k] = "diverged"
            real = real.last_good
            results[k] = real
        extra = {
            "normalizer": normalizer.to_dict(),
            "target_scaler": scaler.to_dict(),
            "source_class": source_class,
            "seed": real.seed,
            "validation_selection": real.validation_selection,
        }
        nn.save_params(real.trained, out / f"ckpt_{k:04d}.json", extra=extra)
        train.write_history_csv(real.history, out / f"history_{k:04d}.csv")
    manifest = {
        "command": "pretrain",
        "source_class": source_class,
        "seeds": [config.seed + k for k in range(n)],
        "statuses": statuses,
        "config": cfg.manifest_echo(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return out


def _pretrain_worker_safe(args):
    k = args[0]
    try:
        return _pretrain_one(args)
    except TrainingDivergedError as exc:
        return k, exc


def _transfer_one(args):
    (k, ckpt_path, method_name, train_s, val_s, config, grid, arch) = args
    method = transfer.TransferMethod.parse(method_name)
    pretrained = None
    if method is not transfer.TransferMethod.NO_TRANSFER:
        pretrained, _ = nn.load_params(ckpt_path)
    result = transfer.run_method(
        method, pretrained, train_s, val_s, config, grid=grid, arch=arch
    )
    surface = None
    if method in (transfer.TransferMethod.TIME_WARP, transfer.TransferMethod.TIME_WARP_FINE_TUNE):
        base = pretrained if pretrained is not None else result.params
        _, surface = transfer.grid_search(base, train_s, grid)
    return k, result, surface


def cmd_transfer(
    cfg: Config,
    method_name: str,
    fuel_class: str,
    out_override: str | None = None,
    jobs: int | None = None,
) -> Path:
    """Adapt every pretrained realization to a target fuel class."""
    if fuel_class not in datamod.FUEL_CLASSES:
        raise ConfigError(f"unknown fuel class {fuel_class!r}")
    method = transfer.TransferMethod.parse(method_name)
    base_out = Path(out_override or cfg.get("out"))
    out = base_out / "transfer" / method.value / fuel_class
    out.mkdir(parents=True, exist_ok=True)
    pretrain_dir = base_out / "pretrain"
    ckpts = sorted(pretrain_dir.glob("ckpt_*.json"))
    if method is not transfer.TransferMethod.NO_TRANSFER and not ckpts:
        raise ConfigError(f"no pretrained checkpoints under {pretrain_dir}")

    frame, series = load_dataset(cfg)
    parts = split_dataset(cfg, frame, series)
    config = cfg.train_config()
    grid = cfg.grid_spec()
    hidden, dense_sizes = cfg.arch()
    n = cfg.get_int("realizations") if method is transfer.TransferMethod.NO_TRANSFER else len(ckpts)
    jobs = jobs if jobs is not None else cfg.get_int("jobs")

    tasks = []
    normalizers = []
    scalers = []
    target_obs = parts.train.observations.get(fuel_class)
    for k in range(n):
        if method is transfer.TransferMethod.NO_TRANSFER:
            normalizer = datamod.Normalizer.fit(parts.train.weather)
            if target_obs is None or len(target_obs) == 0:
                raise ConfigError(f"no {fuel_class} observations in the training span")
            scaler = datamod.TargetScaler.fit(target_obs.values)
            ckpt_path = None
        else:
            _, extra = nn.load_params(ckpts[k])
            normalizer = datamod.Normalizer.from_dict(extra["normalizer"])
            scaler = datamod.TargetScaler.from_dict(extra["target_scaler"])
            ckpt_path = ckpts[k]
        normalizers.append(normalizer)
        scalers.append(scaler)
        train_s = build_series(parts.train, normalizer, fuel_class, scaler)
        val_s = build_series(parts.val, normalizer, fuel_class, scaler)
        if train_s.mask.sum() == 0 or val_s.mask.sum() == 0:
            raise ConfigError(f"no {fuel_class} observations in train or validation span")
        config_k = train.TrainConfig(
            learning_rate=config.learning_rate, batch_length=config.batch_length,
            max_epochs=config.max_epochs, patience=config.patience,
            seed=config.seed + k, shuffle=config.shuffle,
        )
        arch = (datamod.N_FEATURES, hidden, dense_sizes)
        tasks.append((k, ckpt_path, method.value, train_s, val_s, config_k, grid, arch))

    results: list = [None] * n
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for k, result, surface in pool.map(_transfer_one, tasks):
                results[k] = (result, surface)
    else:
        for task in tasks:
            k, result, surface = _transfer_one(task)
            results[k] = (result, surface)

    shift_rows = ["realization,alpha_f,alpha_i"]
    for k, (result, surface) in enumerate(results):
        extra = {"normalizer": normalizers[k].to_dict(),
                 "target_scaler": scalers[k].to_dict(),
                 "method": method.value,
                 "fuel_class": fuel_class}
        if result.shift is not None:
            extra["shift"] = {"alpha_f": result.shift.alpha_f, "alpha_i": result.shift.alpha_i}
            shift_rows.append(f"{k},{repr(result.shift.alpha_f)},{repr(result.shift.alpha_i)}")
        nn.save_params(result.params, out / f"ckpt_{k:04d}.json", extra=extra)
        if surface is not None:
            # surface objective back in percent units for plotting
            surface = surface.copy()
            surface[:, 2] *= scalers[k].std
            transfer.write_surface_csv(surface, out / f"surface_{k:04d}.csv")
    if len(shift_rows) > 1:
        (out / "shifts.csv").write_text("\n".join(shift_rows) + "\n")
    manifest = {
        "command": "transfer",
        "method": method.value,
        "fuel_class": fuel_class,
        "realizations": n,
        "config": cfg.manifest_echo(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return out


def cmd_evaluate(
    cfg: Config,
    method_name: str | None = None,
    fuel_class: str | None = None,
    filter_name: str | None = None,
    out_override: str | None = None,
) -> Path:
    """Evaluate adapted checkpoints on the test partition.

    Hourly predictions run over the full span (recurrent state spun up
    through train and validation), are interpolated to the exact test
    observation times, and scored per (method, class, filter) with the
    <=30% filter applied only to the fine fuel classes.
    """
    base_out = Path(out_override or cfg.get("out"))
    transfer_root = base_out / "transfer"
    if not transfer_root.is_dir():
        raise EvaluationError(f"no transfer outputs under {transfer_root}")
    frame, series = load_dataset(cfg)
    parts = split_dataset(cfg, frame, series)
    threshold = cfg.get_float("filter.threshold")

    method_dirs = sorted(p for p in transfer_root.iterdir() if p.is_dir())
    reports: list[evaluation.EvalReport] = []
    for mdir in method_dirs:
        if method_name and mdir.name.lower() != method_name.lower():
            continue
        for cdir in sorted(p for p in mdir.iterdir() if p.is_dir()):
            cls = cdir.name
            if fuel_class and cls != fuel_class:
                continue
            obs = parts.test.observations.get(cls)
            if obs is None or len(obs) == 0:
                raise EvaluationError(f"no {cls} observations in the test span")
            ckpts = sorted(cdir.glob("ckpt_*.json"))
            if not ckpts:
                raise EvaluationError(f"no checkpoints under {cdir}")
            filters = [evaluation.FILTER_ALL]
            if cls in ("fm1", "fm10"):
                filters.append(evaluation.FILTER_LE30)
            per_filter: dict[str, list[evaluation.MetricSet]] = {f: [] for f in filters}
            for ckpt in ckpts:
                params, extra = nn.load_params(ckpt)
                normalizer = datamod.Normalizer.from_dict(extra["normalizer"])
                scaler = datamod.TargetScaler.from_dict(extra["target_scaler"])
                preds, _ = nn.forward(params, normalizer.transform(frame))
                preds = scaler.unscale(preds)
                test_sel = frame.times > parts.val.weather.times[-1]
                pred_pairs, obs_pairs = datamod.align_for_eval(
                    frame.times[test_sel], preds[test_sel], obs.times, obs.values
                )
                if pred_pairs.size == 0:
                    raise EvaluationError(f"empty test pairing for {cls}")
                for fname in filters:
                    if fname == evaluation.FILTER_LE30:
                        p, m = evaluation.filter_le(pred_pairs, obs_pairs, threshold)
                    else:
                        p, m = pred_pairs, obs_pairs
                    per_filter[fname].append(evaluation.metrics(p, m))
            for fname in filters:
                if filter_name and fname != filter_name:
                    continue
                reports.append(evaluation.aggregate(per_filter[fname], mdir.name, cls, fname))
    if not reports:
        raise EvaluationError("nothing to evaluate (check --method/--class filters)")
    eval_dir = base_out / "evaluate"
    eval_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_report_csv(reports, eval_dir / "report.csv")
    evaluation.write_per_realization_csv(reports, eval_dir / "per_realization.csv")
    (eval_dir / "report.txt").write_text(evaluation.format_report_table(reports) + "\n")
    medians = ["method,class,filter,median_realization"]
    medians += [
        f"{r.method},{r.fuel_class},{r.filter},{r.median_realization}" for r in reports
    ]
    (eval_dir / "medians.csv").write_text("\n".join(medians) + "\n")
    return eval_dir


def cmd_report(cfg: Config, out_override: str | None = None) -> str:
    """Re-aggregate the per-realization table and print the text report."""
    base_out = Path(out_override or cfg.get("out"))
    path = base_out / "evaluate" / "per_realization.csv"
    if not path.exists():
        raise EvaluationError(f"no per-realization table at {path}; run evaluate first")
    groups: dict[tuple[str, str, str], list[evaluation.MetricSet]] = {}
    lines = path.read_text().splitlines()
    for line in lines[1:]:
        method, cls, fname, _, r2, bias, rmse, n = line.split(",")
        groups.setdefault((method, cls, fname), []).append(
            evaluation.MetricSet(r2=float(r2), bias=float(bias), rmse=float(rmse), n=int(n))
        )
    reports = [
        evaluation.aggregate(ms, method, cls, fname)
        for (method, cls, fname), ms in sorted(groups.items())
    ]
    return evaluation.format_report_table(reports)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmwarp",
        description="Time-warping transfer learning pipeline for fuel-moisture RNNs",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "pretrain", "transfer", "evaluate", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat dotted-key config file")
        p.add_argument("--seed", type=int, default=None, help="root seed override")
        p.add_argument("--jobs", type=int, default=None, help="realization-level parallelism")
        p.add_argument("--out", default=None, help="output directory (or file for synth)")
        if name in ("transfer", "evaluate"):
            p.add_argument("--method", default=None, help="transfer method name")
            p.add_argument("--class", dest="fuel_class", default=None, help="target fuel class")
        if name == "evaluate":
            p.add_argument("--filter", dest="filter_name", default=None,
                           choices=[evaluation.FILTER_ALL, evaluation.FILTER_LE30])
    return parser


def run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    cfg = Config.load(args.config, overrides)
    if args.command == "synth":
        path = cmd_synth(cfg, out_override=args.out)
        print(f"wrote {path}")
    elif args.command == "pretrain":
        out = cmd_pretrain(cfg, out_override=args.out, jobs=args.jobs)
        print(f"wrote {out}")
    elif args.command == "transfer":
        if not args.fuel_class:
            raise ConfigError("transfer requires --class")
        methods = [args.method] if args.method else [
            m.strip() for m in cfg.get("methods").split(",") if m.strip()
        ]
        if not methods:
            raise ConfigError("no transfer methods given (--method or the methods config key)")
        for method in methods:
            out = cmd_transfer(cfg, method, args.fuel_class,
                               out_override=args.out, jobs=args.jobs)
            print(f"wrote {out}")
    elif args.command == "evaluate":
        out = cmd_evaluate(cfg, method_name=args.method, fuel_class=args.fuel_class,
                           filter_name=args.filter_name, out_override=args.out)
        print(f"wrote {out}")
    elif args.command == "report":
        print(cmd_report(cfg, out_override=args.out))
    return 0


def main() -> None:
    try:
        sys.exit(run(sys.argv[1:]))
    except FmwarpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for types, code in EXIT_CODES:
            if isinstance(exc, types):
                sys.exit(code)
        sys.exit(1)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(6)


if __name__ == "__main__":
    main()
