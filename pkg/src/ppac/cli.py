"""Command-line pipeline: prepare, train, eval, sweep, analyze.

Every command takes ``--config <file>`` (flat ``key = value`` lines) and
``--out <dir>``; ``--set key=value`` overrides win over the file.  Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from importlib import resources
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import DataError
from .engine import VARIANTS, InferenceConfig, TrainConfig, rank_baseline, rank_users, train, variant_heads
from .evaluate import (
    EvalReport,
    UnsupportedAnalysis,
    count_groups,
    ground_truth,
    group_frequency_recall,
    head_tail_groups,
    pp_gp_overlap,
    pru_ppru,
    ranking_metrics,
    rating_vs_pp_rank,
)
from .models import bundle_from_store, init_bundle
from .numerics import NumericError, SparseAdjacency, load_checkpoint, save_checkpoint
from .popularity import PersonalPopularity, PopularityIndex, build_similar_user_index, compute_gp, load_or_build_index

_logger = logging.getLogger("ppac")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc


@dataclass
class RunConfig:
    dataset: str = ""
    format: str = "tsv"
    test_frac: float = 0.1
    valid_frac: float = 0.1
    split_seed: int = 0
    k: int = 30
    d: int = 64
    model: str = "bprmf"
    layers: int = 3
    share_embeddings: bool = True
    variant: str = "full"
    alpha: float = 0.1
    lam: float = 1e-4
    epochs: int = 400
    batch_size: int = 8192
    lr: float = 0.01
    optimizer: str = "adam"
    seed: int = 0
    patience: int = 20
    eval_every: int = 1
    gamma: float = 256.0
    beta: float = -128.0
    topk: int = 50
    ranker: str = "model"
    group_edges: str = "0,10,50,100,500"
    head_frac: float = 0.1
    run_id: str = ""

    def effective_run_id(self) -> str:
        return self.run_id or f"{self.model}-{self.variant}-s{self.seed}"

    def train_config(self) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, lam=self.lam, epochs=self.epochs, batch_size=self.batch_size,
                           lr=self.lr, seed=self.seed, patience=self.patience, eval_every=self.eval_every,
                           variant=self.variant, optimizer=self.optimizer)

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(gamma=self.gamma, beta=self.beta, k=self.topk)

    def dump(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def make_config(file_values: dict[str, str], overrides: dict[str, str]) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    merged = {**file_values, **overrides}
    unknown = sorted(set(merged) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v, types[k]) for k, v in merged.items()})
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    if cfg.ranker not in ("model", "mostpop", "mostppop"):
        raise ConfigError("ranker must be model, mostpop or mostppop")
    return cfg


def report_schema() -> dict:
    """JSON schema that every evaluation report satisfies."""
    return json.loads(resources.files("ppac").joinpath("report_schema.json").read_text(encoding="utf-8"))


# -- shared helpers -------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _register(out: Path, command: str, files: list[Path], cfg: RunConfig, tag: str | None = None) -> None:
    """Record outputs in ``run_manifest.json`` and write the effective config next to them."""
    cfg_path = out / f"config_{command}_{tag or cfg.effective_run_id()}.txt"
    cfg_path.write_text(cfg.dump(), encoding="utf-8")
    manifest_path = out / "run_manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"artifacts": {}}
    entry = manifest["artifacts"].setdefault(command, {})
    for f in files + [cfg_path]:
        entry[f.name] = _sha(f)
    _write_json(manifest_path, manifest)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (DataError, FileNotFoundError, ValueError, NumericError, UnsupportedAnalysis) as exc:
        raise StageError(name, exc) from exc


def _load_prepared(out: Path, cfg: RunConfig) -> data_mod.InteractionDataset:
    path = out / "splits.tsv"
    if not path.exists():
        raise StageError("load", FileNotFoundError(f"{path} missing; run `prepare` first"))
    return _stage("load", data_mod.read_split_manifest, path)


def _popularity(out: Path | None, ds, k: int) -> PopularityIndex:
    cache = out / f"simindex_k{k}.bin" if out is not None else None
    index = load_or_build_index(ds, k, cache)
    return PopularityIndex(compute_gp(ds), index, PersonalPopularity(index, ds))


def _adjacency(cfg: RunConfig, ds):
    if cfg.model != "lightgcn":
        return None
    u, i = ds.pairs("train")
    return SparseAdjacency.from_pairs(u, i, ds.num_users, ds.num_items)


# -- commands -------------------------------------------------------------------

def cmd_prepare(cfg: RunConfig, out: Path) -> dict:
    if not cfg.dataset:
        raise ConfigError("dataset is required for prepare")
    raw = _stage("load", data_mod.load_dataset, cfg.dataset, cfg.format)
    full = _stage("build", data_mod.build_dataset, raw)
    ds = _stage("split", data_mod.intervened_split, full, cfg.test_frac, cfg.valid_frac, cfg.split_seed)
    gp = _stage("gp", compute_gp, ds)
    cache = out / f"simindex_k{cfg.k}.bin"
    _stage("index", load_or_build_index, ds, cfg.k, cache)
    split_path = out / "splits.tsv"
    data_mod.write_split_manifest(ds, split_path)
    summary = {
        "raw_interactions": len(raw),
        "interactions": int(sum(ds.size(s) for s in data_mod.SPLITS)),
        "num_users": ds.num_users,
        "num_items": ds.num_items,
        "splits": {s: ds.size(s) for s in data_mod.SPLITS},
        "quota": ds.meta["quota"],
        "warnings": ds.meta["warnings"],
        "k": cfg.k,
        "items_with_train_interactions": int((gp > 0).sum()),
        "dataset_hash": ds.content_hash(),
    }
    summary_path = out / "summary.json"
    _write_json(summary_path, summary)
    _register(out, "prepare", [split_path, cache, summary_path], cfg)
    return summary


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    ds = _load_prepared(out, cfg)
    pop = _stage("index", _popularity, out, ds, cfg.k)
    pp_head, gp_head = variant_heads(cfg.variant)
    bundle = init_bundle(cfg.model, ds.num_users, ds.num_items, cfg.d, seed=cfg.seed, pp_head=pp_head,
                         gp_head=gp_head, layers=cfg.layers, adjacency=_adjacency(cfg, ds),
                         share_embeddings=cfg.share_embeddings)
    rid = cfg.effective_run_id()
    log_path = out / f"train_log_{rid}.jsonl"
    result = _stage("train", train, bundle, ds, pop, cfg.train_config(), cfg.inference_config(), log_path)
    ckpt = out / f"checkpoint_{rid}.bin"
    meta = dict(bundle.header_meta(), dataset_hash=ds.content_hash(), variant=cfg.variant, seed=cfg.seed,
                best_epoch=result.best_epoch, k=cfg.k)
    save_checkpoint(ckpt, bundle.store, d=cfg.d, num_users=ds.num_users, num_items=ds.num_items,
                    kind=cfg.model, meta=meta)
    _register(out, "train", [ckpt, log_path], cfg)
    return {"checkpoint": str(ckpt), "log": str(log_path), "best_epoch": result.best_epoch,
            "best_val_recall": result.best_recall}


def _load_bundle(cfg: RunConfig, out: Path, ds, checkpoint: Path | None):
    ckpt = checkpoint or out / f"checkpoint_{cfg.effective_run_id()}.bin"
    if not ckpt.exists():
        raise StageError("checkpoint", FileNotFoundError(f"{ckpt} missing; run `train` first"))
    store, header = load_checkpoint(ckpt)
    if header["meta"].get("dataset_hash") != ds.content_hash():
        raise StageError("checkpoint", DataError(
            f"{ckpt} was trained on dataset {header['meta'].get('dataset_hash', '?')[:12]}, "
            f"but the prepared splits hash to {ds.content_hash()[:12]}; re-run prepare/train"))
    adj = _adjacency(RunConfig(model=header["kind"]), ds)
    return bundle_from_store(store, header, adj), header


def _rank(cfg: RunConfig, ds, pop, bundle, users, threads: int):
    if cfg.ranker != "model":
        return rank_baseline(cfg.ranker, pop, ds, users, cfg.topk)
    has_pp, has_gp = variant_heads(cfg.variant)
    if (has_pp and not bundle.has_pp) or (has_gp and not bundle.has_gp):
        raise StageError("eval", ValueError(f"checkpoint lacks the heads needed by variant {cfg.variant}"))
    return rank_users(bundle, pop, cfg.inference_config(), cfg.variant, ds, users, threads=threads)


def evaluate_run(cfg: RunConfig, ds, pop, bundle, threads: int = 1, header: dict | None = None) -> EvalReport:
    gt = ground_truth(ds, "test")
    users = sorted(gt)
    lists = _rank(cfg, ds, pop, bundle, users, threads)
    m = ranking_metrics(lists, gt, cfg.topk)
    corr = pru_ppru(lists, pop, cfg.topk)
    head, head_names = head_tail_groups(ds, cfg.head_frac)
    edges = [int(x) for x in cfg.group_edges.split(",")]
    by_count, count_names = count_groups(ds, edges)
    meta = {
        "run_id": cfg.effective_run_id(),
        "ranker": cfg.ranker,
        "variant": cfg.variant if cfg.ranker == "model" else None,
        "model": cfg.model if cfg.ranker == "model" else None,
        "gamma": cfg.gamma,
        "beta": cfg.beta,
        "seed": cfg.seed,
        "k_similar": pop.k,
        "dataset_hash": ds.content_hash(),
        "trained_variant": (header or {}).get("meta", {}).get("variant"),
    }
    return EvalReport(
        recall_at_k=m["recall"], ndcg_at_k=m["ndcg"], pru_at_k=corr["pru"], ppru_at_k=corr["ppru"],
        k=cfg.topk, num_users=m["num_users"], pru_excluded=corr["pru_excluded"],
        ppru_excluded=corr["ppru_excluded"],
        groups={
            "head_tail": group_frequency_recall(lists, gt, head, head_names, cfg.topk),
            "interaction_count": group_frequency_recall(lists, gt, by_count, count_names, cfg.topk),
        },
        meta=meta,
    )


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: Path | None = None, threads: int = 1) -> EvalReport:
    ds = _load_prepared(out, cfg)
    pop = _stage("index", _popularity, out, ds, cfg.k)
    bundle = header = None
    if cfg.ranker == "model":
        bundle, header = _load_bundle(cfg, out, ds, checkpoint)
    report = evaluate_run(cfg, ds, pop, bundle, threads, header)
    tag = f"{cfg.effective_run_id()}_{cfg.variant if cfg.ranker == 'model' else cfg.ranker}"
    files = [out / f"report_{tag}.json", out / f"metrics_{tag}.csv"]
    _write_json(files[0], report.to_dict())
    _write_csv(files[1], [{"recall": report.recall_at_k, "ndcg": report.ndcg_at_k, "pru": report.pru_at_k,
                           "ppru": report.ppru_at_k, "k": report.k, "num_users": report.num_users}])
    for name, rows in report.groups.items():
        files.append(out / f"groups_{tag}_{name}.csv")
        _write_csv(files[-1], rows)
    _register(out, "eval", files, cfg, tag)
    return report


def cmd_sweep(cfg: RunConfig, out: Path, parameter: str, values: list[float],
              checkpoint: Path | None = None, threads: int = 1) -> list[dict]:
    if parameter not in ("gamma", "beta", "k"):
        raise ConfigError("sweep parameter must be gamma, beta or k")
    if not values:
        raise ConfigError("sweep needs at least one value")
    ds = _load_prepared(out, cfg)
    bundle = header = None
    if cfg.ranker == "model":
        bundle, header = _load_bundle(cfg, out, ds, checkpoint)
    rows = []
    base_pop = _stage("index", _popularity, out, ds, cfg.k) if parameter != "k" else None
    for v in values:
        if parameter == "k":
            run_cfg = dataclasses.replace(cfg, k=int(v))
            index = _stage("index", build_similar_user_index, ds, int(v))
            pop = PopularityIndex(compute_gp(ds), index, PersonalPopularity(index, ds))
        else:
            run_cfg = dataclasses.replace(cfg, **{parameter: float(v)})
            pop = base_pop
        rep = evaluate_run(run_cfg, ds, pop, bundle, threads, header)
        rows.append({"value": v, "recall": rep.recall_at_k, "ndcg": rep.ndcg_at_k,
                     "pru": rep.pru_at_k, "ppru": rep.ppru_at_k})
    tag = f"{cfg.effective_run_id()}_{parameter}"
    path = out / f"sweep_{tag}.csv"
    _write_csv(path, rows)
    _register(out, "sweep", [path], cfg, tag)
    return rows


def cmd_analyze(cfg: RunConfig, out: Path) -> dict:
    ds = _load_prepared(out, cfg)
    pop = _stage("index", _popularity, out, ds, cfg.k)
    overlap = pp_gp_overlap(pop, ds, cfg.topk)
    files = [out / "overlap.json", out / "overlap_histogram.csv"]
    _write_json(files[0], overlap)
    _write_csv(files[1], overlap["histogram"])
    result = {"overlap": overlap["histogram"]}
    try:
        ratings = rating_vs_pp_rank(pop, ds)
    except UnsupportedAnalysis as exc:
        _logger.warning("skipping rating analysis: %s", exc)
    else:
        files.append(out / "rating_vs_pp.csv")
        _write_csv(files[-1], ratings)
        result["rating_vs_pp"] = ratings
    _register(out, "analyze", files, cfg)
    return result


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppac", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("prepare", "train", "eval", "sweep", "analyze"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="key = value config file")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "sweep"):
            sp.add_argument("--checkpoint", type=Path)
        if name == "sweep":
            sp.add_argument("--param", required=True, choices=("gamma", "beta", "k"))
            sp.add_argument("--values", required=True, help="comma-separated values")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = parse_config(args.config.read_text(encoding="utf-8")) if args.config else {}
        overrides = {}
        for item in args.overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v
        cfg = make_config(file_values, overrides)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "prepare":
            result = cmd_prepare(cfg, args.out)
        elif args.command == "train":
            result = cmd_train(cfg, args.out)
        elif args.command == "eval":
            result = cmd_eval(cfg, args.out, args.checkpoint, args.threads).to_dict()
        elif args.command == "sweep":
            try:
                values = [float(x) for x in args.values.split(",") if x.strip()]
            except ValueError:
                raise ConfigError(f"bad --values {args.values!r}") from None
            result = cmd_sweep(cfg, args.out, args.param, values, args.checkpoint, args.threads)
        else:
            result = cmd_analyze(cfg, args.out)
    except (ConfigError, FileNotFoundError) as exc:
        if isinstance(exc, FileNotFoundError) and not isinstance(exc, ConfigError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        if isinstance(exc.cause, NumericError):
            return EXIT_NUMERIC
        if isinstance(exc.cause, (DataError, FileNotFoundError, UnsupportedAnalysis)):
            return EXIT_DATA
        return EXIT_USAGE if isinstance(exc.cause, ConfigError) else EXIT_DATA
    except NumericError as exc:
        print(f"error [numeric] {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    json.dump(result, sys.stdout, indent=2, sort_keys=True, default=_json_default)
    sys.stdout.write("\n")
    return EXIT_OK


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)


if __name__ == "__main__":
    sys.exit(main())
