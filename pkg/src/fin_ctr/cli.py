"""Command-line entry point: gen-data, prepare, train, eval, ablate, infer.

Every command reads a flat ``key = value`` config (``--config``) with
``--set key=value`` overrides, writes its outputs under
``<run_root>/<command>-<config hash>-<timestamp>/`` and echoes the effective
config there as ``config.txt``; that file alone reproduces the run.

Inputs left unset (``data_dir``, ``prepared_dir``, ``checkpoint``) resolve to
the newest run of the producing command under ``run_root``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio
from . import model as M
from . import numeric as nm
from .encoding import Encoder
from .stkeys import DomainError, geohash_encode, minute_of_timestamp
from .store import BehaviorEvent, Caps, IngestError, LifelongSequence, QueryContext

log = logging.getLogger("fin_ctr")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4

# key -> (type, default). Types: str, int, float, bool, ints (comma list), strs (comma list).
DEFAULTS: dict[str, tuple[str, object]] = {
    # paths
    "run_root": ("str", "runs"),
    "data_dir": ("str", ""),
    "prepared_dir": ("str", ""),
    "checkpoint": ("str", ""),
    "resume": ("str", ""),
    "samples": ("str", ""),
    # dataset
    "dataset": ("str", "synthetic"),
    "reviews": ("str", ""),
    "meta": ("str", ""),
    "precision": ("int", 0),
    "skip_bad": ("bool", False),
    # synthetic generator
    "n_users": ("int", dataio.SyntheticSpec.n_users),
    "n_items": ("int", dataio.SyntheticSpec.n_items),
    "n_categories": ("int", dataio.SyntheticSpec.n_categories),
    "n_cells": ("int", dataio.SyntheticSpec.n_cells),
    "behaviors_per_user": ("int", dataio.SyntheticSpec.behaviors_per_user),
    "requests_per_user": ("int", dataio.SyntheticSpec.requests_per_user),
    "concentration": ("float", dataio.SyntheticSpec.concentration),
    "craving_strength": ("float", dataio.SyntheticSpec.craving_strength),
    "period_preference": ("float", dataio.SyntheticSpec.period_preference),
    "location_preference": ("float", dataio.SyntheticSpec.location_preference),
    # preparation and retrieval
    "periods": ("int", 95),
    "train_fraction": ("float", 0.8),
    "short_window_days": ("int", 30),
    "long_window_days": ("int", 365),
    "cap_geohash": ("int", 200),
    "cap_mealtime": ("int", 200),
    "cap_short": ("int", 20),
    "cap_long": ("int", 100),
    "avg_pool_cap": ("int", 500),
    # model
    "variant": ("str", "full_fin"),
    "d_model": ("int", 16),
    "heads": ("int", 4),
    "mha_len": ("int", 20),
    "align_len": ("int", 16),
    "hidden": ("ints", (200, 80)),
    "activation": ("str", "silu"),
    "per_behavior_weighting": ("bool", False),
    "integrate_avg_pool": ("bool", False),
    # training
    "seed": ("int", 0),
    "lr": ("float", 0.001),
    "beta1": ("float", 0.9),
    "beta2": ("float", 0.999),
    "epsilon": ("float", 1e-8),
    "epochs": ("int", M.AblationBudget.epochs),
    "batch_size": ("int", 128),
    # ablation
    "variants": ("strs", ("avg_pool_long", "sim_style", "sten_style", "fn_only", "full_fin")),
    "seeds": ("ints", (0, 1, 2)),
}

PRODUCERS = {"data_dir": "gen-data", "prepared_dir": "prepare", "checkpoint": "train"}
# inputs each command reads; resolved before the run directory is created so config.txt pins them
INPUTS = {"prepare": ("data_dir",), "train": ("prepared_dir",), "eval": ("prepared_dir", "checkpoint"),
          "ablate": ("prepared_dir",), "infer": ("prepared_dir", "checkpoint")}


class CliError(Exception):
    code = EXIT_CONFIG


class ConfigKeyError(CliError):
    code = EXIT_CONFIG


class MissingArtifact(CliError):
    code = EXIT_DATA


def _parse_value(key: str, raw: str):
    kind, _ = DEFAULTS[key]
    raw = raw.strip()
    try:
        if kind == "str":
            return raw
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigKeyError(f"bad value for {key}: {exc}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(x) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigKeyError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def build_config(config_path: str | None, overrides: list[str]) -> dict:
    cfg = {k: default for k, (_, default) in DEFAULTS.items()}
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise ConfigKeyError(f"config file {p} not found")
        cfg.update(parse_config_text(p.read_text(), str(p)))
    for item in overrides:
        if "=" not in item:
            raise ConfigKeyError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigKeyError(f"unknown config key {key!r}")
        cfg[key] = _parse_value(key, value)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["dataset"] not in ("synthetic",) + tuple(dataio.REVIEW_SCHEMAS):
        raise ConfigKeyError(f"unknown dataset {cfg['dataset']!r}")
    if cfg["variant"] not in M.VARIANTS:
        raise ConfigKeyError(f"unknown variant {cfg['variant']!r}; expected one of {', '.join(M.VARIANTS)}")
    for v in cfg["variants"]:
        if v not in M.VARIANTS:
            raise ConfigKeyError(f"unknown variant {v!r} in variants")
    if not 0.0 < cfg["train_fraction"] < 1.0:
        raise ConfigKeyError("train_fraction must be in (0, 1)")
    for key in ("epochs", "batch_size", "d_model", "heads", "mha_len", "align_len", "periods"):
        if cfg[key] < 1:
            raise ConfigKeyError(f"{key} must be >= 1")
    if cfg["d_model"] % cfg["heads"]:
        raise ConfigKeyError("d_model must be divisible by heads")
    if not cfg["seeds"]:
        raise ConfigKeyError("seeds must list at least one seed")


def config_text(cfg: dict) -> str:
    return "".join(f"{k} = {_format_value(cfg[k])}\n" for k in DEFAULTS)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:10]


def make_run_dir(cfg: dict, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    root = Path(cfg["run_root"])
    base = root / f"{command}-{config_hash(cfg)}-{stamp}"
    run = base
    k = 1
    while run.exists():
        run = Path(f"{base}.{k}")
        k += 1
    run.mkdir(parents=True)
    (run / "config.txt").write_text(config_text(cfg))
    return run


def _latest_run(root: Path, command: str, marker: str) -> Path | None:
    if not root.is_dir():
        return None
    runs = sorted((p for p in root.glob(f"{command}-*") if (p / marker).exists()),
                  key=lambda p: (p.stat().st_mtime, p.name))
    return runs[-1] if runs else None


def resolve_input(cfg: dict, key: str) -> Path:
    """Path for `key`, falling back to the newest run of the producing command."""
    command = PRODUCERS[key]
    marker = {"data_dir": "data/manifest.json", "prepared_dir": "prepared/manifest.json",
              "checkpoint": "model.npz"}[key]
    if cfg[key]:
        p = Path(cfg[key])
        if not p.exists():
            raise MissingArtifact(f"{key} {p} does not exist; produce it with `fin-ctr {command}`")
        return p
    run = _latest_run(Path(cfg["run_root"]), command, marker)
    if run is None:
        raise MissingArtifact(f"no {key} given and no `{command}` run under {cfg['run_root']}; "
                              f"run `fin-ctr {command}` first or set {key}=<path>")
    return run / marker if key == "checkpoint" else run / marker.split("/")[0]


# --------------------------------------------------------------------------
# config -> library objects


def pin_inputs(cfg: dict, command: str) -> dict:
    """Copy of `cfg` with every input of `command` set to a concrete path."""
    out = dict(cfg)
    for key in INPUTS.get(command, ()):
        if key == "data_dir" and cfg["dataset"] != "synthetic":
            continue
        out[key] = str(resolve_input(cfg, key))
    return out


def synthetic_spec(cfg: dict, seed: int | None = None) -> dataio.SyntheticSpec:
    return dataio.SyntheticSpec(
        n_users=cfg["n_users"], n_items=cfg["n_items"], n_categories=cfg["n_categories"],
        n_cells=cfg["n_cells"], behaviors_per_user=cfg["behaviors_per_user"],
        requests_per_user=cfg["requests_per_user"], concentration=cfg["concentration"],
        craving_strength=cfg["craving_strength"], period_preference=cfg["period_preference"],
        location_preference=cfg["location_preference"], seed=cfg["seed"] if seed is None else seed)


def prepare_config(cfg: dict) -> dataio.PrepareConfig:
    return dataio.PrepareConfig(cfg["periods"], cfg["train_fraction"], cfg["seed"],
                                cfg["short_window_days"], cfg["long_window_days"])


def caps(cfg: dict) -> Caps:
    return Caps(cfg["cap_geohash"], cfg["cap_mealtime"], cfg["cap_short"], cfg["cap_long"])


def model_config(cfg: dict, variant: str | None = None) -> M.ModelConfig:
    return M.ModelConfig(variant=variant or cfg["variant"], d_model=cfg["d_model"], heads=cfg["heads"],
                         mha_len=cfg["mha_len"], align_len=cfg["align_len"], hidden=tuple(cfg["hidden"]),
                         activation=cfg["activation"], per_behavior_weighting=cfg["per_behavior_weighting"],
                         integrate_avg_pool=cfg["integrate_avg_pool"])


def adam_config(cfg: dict) -> nm.AdamConfig:
    return nm.AdamConfig(cfg["lr"], cfg["beta1"], cfg["beta2"], cfg["epsilon"])


def _precision(cfg: dict, dataset: str) -> int:
    if cfg["precision"]:
        return cfg["precision"]
    return 5 if dataset == "google_local" else 6


def _encoder(cfg: dict, ds: dataio.PreparedDataset) -> Encoder:
    return Encoder(ds.vocabs, caps(cfg), cfg["avg_pool_cap"])


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict, run: Path) -> dict:
    if cfg["dataset"] != "synthetic":
        raise ConfigKeyError("gen-data only generates the synthetic dataset; review data is ingested by `prepare`")
    manifest = dataio.generate_synthetic_files(synthetic_spec(cfg), run / "data")
    log.info("wrote %d behaviors and %d samples to %s", manifest["behaviors"], manifest["samples"], run / "data")
    return manifest


def cmd_prepare(cfg: dict, run: Path) -> dict:
    if cfg["dataset"] == "synthetic":
        raw = dataio.load_raw_synthetic(resolve_input(cfg, "data_dir"), _precision(cfg, "synthetic"))
    else:
        if not cfg["reviews"]:
            raise MissingArtifact(f"dataset={cfg['dataset']} needs reviews=<path to review TSV>")
        if not Path(cfg["reviews"]).exists():
            raise MissingArtifact(f"review file {cfg['reviews']} not found")
        meta = cfg["meta"] or None
        if meta is not None and not Path(meta).exists():
            raise MissingArtifact(f"metadata file {meta} not found")
        raw = dataio.ingest_reviews(cfg["reviews"], cfg["dataset"], meta, cfg["seed"], cfg["skip_bad"],
                                    _precision(cfg, cfg["dataset"]))
    if not raw.samples:
        raise dataio.DataError("dataset has no samples")
    ds = dataio.prepare(raw, prepare_config(cfg))
    ds.manifest["precision"] = _precision(cfg, cfg["dataset"])
    ds.manifest["dataset"] = cfg["dataset"]
    dataio.save_prepared(ds, run / "prepared")
    log.info("prepared %d train / %d test samples in %s", len(ds.train), len(ds.test), run / "prepared")
    return ds.manifest


def _load_prepared(cfg: dict) -> dataio.PreparedDataset:
    return dataio.load_prepared(resolve_input(cfg, "prepared_dir"))


def cmd_train(cfg: dict, run: Path) -> M.TrainReport:
    ds = _load_prepared(cfg)
    enc = _encoder(cfg, ds)
    train_codes, test_codes = enc.encode(ds.train), enc.encode(ds.test)
    if cfg["resume"]:
        if not Path(cfg["resume"]).exists():
            raise MissingArtifact(f"resume checkpoint {cfg['resume']} not found; produce it with `fin-ctr train`")
        trainer = M.Trainer.resume(cfg["resume"], train_codes)
        model = trainer.model
    else:
        model = M.FinModel(model_config(cfg), ds.vocabs.sizes(), cfg["seed"])
        trainer = M.Trainer(model, train_codes, cfg["batch_size"], cfg["seed"], adam_config(cfg))
    report = M.TrainReport(model.cfg.variant, cfg["seed"], n_params=model.n_params())
    t0 = time.perf_counter()
    try:
        while trainer.epoch < cfg["epochs"]:
            loss = trainer.run_epoch()
            report.epoch_losses.append(loss)
            log.info("epoch %d loss %.6f", trainer.epoch, loss)
            trainer.save(run / "model.npz", {"epochs_done": trainer.epoch})
    except nm.TrainingError as exc:
        report.aborted = str(exc)
        report.steps = model.store.step
        report.save(run)
        raise
    report.steps = model.store.step
    report.test_auc = M.evaluate(model, test_codes)
    report.wall_clock = time.perf_counter() - t0
    trainer.save(run / "model.npz", {"epochs_done": trainer.epoch})
    report.save(run)
    (run / "loss_trace.txt").write_text("".join(f"{float(x)!r}\n" for x in trainer.batch_losses))
    log.info("test AUC %.6f", report.test_auc)
    return report


def per_period_table(codes, samples, scores: np.ndarray) -> list[dict]:
    """Exposure, clicks, mean score and AUC per query meal-time period."""
    by_period: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_period.setdefault(s.query.query_item.period_id, []).append(i)
    rows = []
    for period in sorted(by_period):
        idx = by_period[period]
        labels = [codes[i].label for i in idx]
        sc = scores[idx]
        try:
            a = M.auc(sc, labels)
        except M.MetricError:
            a = float("nan")
        rows.append({"period": period, "exposure": len(idx), "clicks": int(sum(labels)),
                     "mean_score": float(np.mean(sc)), "auc": a})
    return rows


def cmd_eval(cfg: dict, run: Path) -> dict:
    ds = _load_prepared(cfg)
    model, _, meta = M.load_model(resolve_input(cfg, "checkpoint"))
    codes = _encoder(cfg, ds).encode(ds.test)
    scores = M.predict(model, codes)
    result = {"test_auc": M.auc(scores, [c.label for c in codes]), "n": len(codes),
              "variant": model.cfg.variant}
    if ds.oracle_test_scores is not None:
        result["oracle_auc"] = M.auc(ds.oracle_test_scores, [c.label for c in codes])
    (run / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    rows = per_period_table(codes, ds.test, scores)
    with open(run / "per_period.tsv", "w") as fh:
        fh.write("period\texposure\tclicks\tmean_score\tauc\n")
        for r in rows:
            fh.write(f"{r['period']}\t{r['exposure']}\t{r['clicks']}\t{r['mean_score']:.6f}\t{r['auc']:.6f}\n")
    with open(run / "scores.tsv", "w") as fh:
        for s, c, p in zip(ds.test, codes, scores):
            fh.write(f"{s.user_id}\t{s.query.query_item.item_id}\t{s.query.request_time!r}\t{c.label}\t{float(p)!r}\n")
    log.info("test AUC %.6f over %d samples", result["test_auc"], len(codes))
    return result


def run_ablation(cfg: dict, ds: dataio.PreparedDataset, train_codes, test_codes, seeds, variants) -> list[dict]:
    budget = M.AblationBudget(cfg["epochs"], cfg["batch_size"], cfg["lr"])
    rows = []
    for seed in seeds:
        for v in variants:
            rep = M.ablate(model_config(cfg, v), v, ds.vocabs, train_codes, test_codes, seed, budget)
            rows.append({"variant": v, "seed": seed, "auc": rep.test_auc, "n_params": rep.n_params,
                         "seconds": rep.wall_clock})
            log.info("%s seed %d AUC %.6f (%d params, %.1fs)", v, seed, rep.test_auc, rep.n_params, rep.wall_clock)
    return rows


def cmd_ablate(cfg: dict, run: Path) -> list[dict]:
    ds = _load_prepared(cfg)
    enc = _encoder(cfg, ds)
    rows = run_ablation(cfg, ds, enc.encode(ds.train), enc.encode(ds.test), cfg["seeds"], cfg["variants"])
    with open(run / "ablation.tsv", "w") as fh:
        fh.write("variant\tseed\tauc\tn_params\tseconds\n")
        for r in rows:
            fh.write(f"{r['variant']}\t{r['seed']}\t{r['auc']:.6f}\t{r['n_params']}\t{r['seconds']:.1f}\n")
    with open(run / "ablation_mean.tsv", "w") as fh:
        fh.write("variant\tmean_auc\tseeds\n")
        for v in cfg["variants"]:
            aucs = [r["auc"] for r in rows if r["variant"] == v]
            fh.write(f"{v}\t{float(np.mean(aucs)):.6f}\t{len(aucs)}\n")
    return rows


def read_query_file(path: Path, ds: dataio.PreparedDataset, precision: int) -> list[M.Sample]:
    """Queries for `infer`: `user, item, category, lat, lon, timestamp` (a trailing label column is ignored).

    Amazon-style prepared data takes `user, item, category, price, timestamp`.
    Histories come from the prepared event log, restricted to events before
    each request time.
    """
    seqs: dict[str, LifelongSequence] = {}
    for s in ds.train + ds.test:
        seqs.setdefault(s.user_id, s.sequence)
    amazon = ds.manifest.get("temporal_key") == "category"
    width = 5 if amazon else 6
    cat_index = {}
    if amazon:
        for s in ds.train:
            e = s.query.query_item
            cat_index.setdefault(e.category_id, e.period_id)
    cfg_sd = ds.manifest.get("config", {}).get("short_term_window_days", 30)
    cfg_ld = ds.manifest.get("config", {}).get("long_term_window_days", 365)
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < width:
                raise IngestError(f"expected at least {width} tab-separated fields, got {len(parts)}", n)
            try:
                if amazon:
                    user, item, cat, price, ts = parts[:5]
                    t = float(ts)
                    bucket = dataio._price_token(float(price), ds.price_bins)
                    ev = BehaviorEvent(item, cat, bucket, cat_index.get(cat, 0), t)
                else:
                    user, item, cat, lat, lon, ts = parts[:6]
                    t = float(ts)
                    gh = geohash_encode(float(lat), float(lon), precision)
                    period = ds.binner.assign(minute_of_timestamp(t)) if ds.binner else 0
                    ev = BehaviorEvent(item, cat, gh, period, t)
            except (ValueError, DomainError) as exc:
                raise IngestError(str(exc), n) from exc
            seq = seqs.get(user, LifelongSequence(user))
            out.append(M.Sample(user, seq, QueryContext(ev, t, cfg_sd, cfg_ld), 0))
    return out


def cmd_infer(cfg: dict, run: Path) -> Path:
    ds = _load_prepared(cfg)
    if not cfg["samples"]:
        raise MissingArtifact("infer needs samples=<query file>")
    qpath = Path(cfg["samples"])
    if not qpath.exists():
        raise MissingArtifact(f"query file {qpath} not found")
    model, _, _ = M.load_model(resolve_input(cfg, "checkpoint"))
    precision = ds.manifest.get("precision", _precision(cfg, cfg["dataset"]))
    samples = read_query_file(qpath, ds, precision)
    scores = M.predict(model, _encoder(cfg, ds).encode(samples)) if samples else np.zeros(0)
    out = run / "scores.tsv"
    with open(out, "w") as fh:
        for s, p in zip(samples, scores):
            fh.write(f"{s.user_id}\t{s.query.query_item.item_id}\t{s.query.request_time!r}\t{float(p)!r}\n")
    log.info("scored %d queries into %s", len(samples), out)
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "infer": cmd_infer,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fin-ctr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("-q", "--quiet", action="store_true")
    sub.add_parser("show-config", help="print the default config")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "show-config":
        sys.stdout.write(config_text({k: d for k, (_, d) in DEFAULTS.items()}))
        return EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = pin_inputs(build_config(args.config, args.overrides), args.command)
        run = make_run_dir(cfg, args.command)
        log.info("run directory %s", run)
        COMMANDS[args.command](cfg, run)
        print(run)
        return EXIT_OK
    except (CliError, M.ConfigError, ValueError, M.ModelError, nm.TrainingError) as exc:
        print(f"fin-ctr {args.command}: {exc}", file=sys.stderr)
        return exit_code(exc)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, M.ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (M.ModelError, nm.TrainingError)):
        return EXIT_TRAINING
    return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
