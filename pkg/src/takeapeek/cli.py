"""``tap`` command line: data generation, meta-training, evaluation, sweeps.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .engine import AdaptConfig, count_method_trainable, evaluate, prepare
from .episodes import (CLASSES, NUM_FOLDS, FoldSplit, PoolSource, mixed_way_stream, pool_records,
                       read_episode_manifest, replicate_support, sample_episode, write_episode_manifest,
                       write_pool)
from .errors import ConfigError, DataError, TapError
from .lora import count_trainable, trainable_percentage
from .refnet import ModelConfig, build_model, load_checkpoint, meta_train, save_checkpoint

log = logging.getLogger("takeapeek")

REPORT_COLUMNS = ("method", "fold", "ways", "shots", "rank", "iterations", "miou", "miou_std", "delta",
                  "reported", "bg_iou", "trainable_params", "trainable_pct", "seconds_per_episode")
SWEEP_COLUMNS = ("fold", "rank", "t", "miou", "status")
PARAMS_COLUMNS = ("rank", "trainable_params", "trainable_pct", "status")
ONESHOT_COLUMNS = ("fold", "shots", "replicated", "t", "miou", "vanilla_miou")
LOSS_COLUMNS = ("step", "loss", "running_median")


# ----------------------------------------------------------------------------
# shared helpers
# ----------------------------------------------------------------------------

def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"output directory {path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create {path}: {exc}") from exc
    return path


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k, "")) for k in columns})


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def episode_seed(base: int, *parts: int) -> int:
    return int(np.random.SeedSequence([base, *parts]).generate_state(1)[0])


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(variant=cfg["model.variant"], channels=cfg["model.channels"], dim=cfg["model.dim"],
                       blocks=cfg["model.blocks"], patch=cfg["model.patch"],
                       image_size=cfg["data.image_size"], tau=cfg["model.tau"], seed=cfg["model.seed"])


def adapt_config(cfg: RunConfig, method: str, **over) -> AdaptConfig:
    lr = cfg[f"eval.{method}.lr"] if method != "vanilla" else 1e-3
    kw = dict(method=method, iterations=cfg["eval.iterations"], rank=cfg["eval.tap.rank"],
              alpha=cfg["eval.tap.alpha"], learning_rate=lr, select=cfg["eval.select"],
              select_j=cfg["eval.select_j"], gamma=cfg["eval.gamma"], weight_mode=cfg["eval.weight_mode"],
              support_grad=cfg["eval.support_grad"], beta1=cfg["eval.adam.beta1"],
              beta2=cfg["eval.adam.beta2"], eps=cfg["eval.adam.eps"], seed=cfg["eval.seed"])
    kw.update(over)
    return AdaptConfig(**kw)


def open_pool(cfg: RunConfig) -> PoolSource:
    root = cfg.path("data.root") / "samples"
    if not (root / "manifest.jsonl").exists():
        raise DataError(f"no dataset at {cfg.path('data.root')}; run 'tap gen-data' first")
    return PoolSource.open(root)


def eval_manifest_path(cfg: RunConfig, fold: int, n: int, k: int, run: int) -> Path:
    return cfg.path("data.root") / "episodes" / f"fold{fold}" / f"n{n}k{k}-run{run}.jsonl"


def draw_episodes(cfg: RunConfig, source, fold: int, n: int, k: int, run: int, count: int,
                  tag: int = 0):
    split = FoldSplit.for_fold(fold)
    return [sample_episode(split, n, k, episode_seed(cfg["data.seed"], tag, fold, n, k, run, i),
                           cfg["eval.query_presence"], source) for i in range(count)]


def load_fold_model(cfg: RunConfig, fold: int):
    path = cfg.path("meta.dir") / f"fold{fold}"
    if not (path / "manifest.json").exists():
        raise DataError(f"no checkpoint for fold {fold} at {path}; run 'tap meta-train' first")
    model = load_checkpoint(path)
    if model.config.variant != cfg["model.variant"]:
        raise ConfigError(f"checkpoint {path} is a {model.config.variant} model, "
                          f"config asks for {cfg['model.variant']}")
    return model


def _embed(out: Path, cfg: RunConfig) -> None:
    (out / "config.resolved").write_text(cfg.dump())


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, force: bool = False) -> Path:
    root = _prepare_out(cfg.path("data.root"), force)
    records = pool_records(cfg["data.samples_per_class"], cfg["data.samples_per_pair"], cfg["data.seed"])
    write_pool(root / "samples", records, cfg["data.image_size"])
    source = PoolSource.open(root / "samples")
    for fold in cfg["data.folds"]:
        (root / "episodes" / f"fold{fold}").mkdir(parents=True, exist_ok=True)
        for n in cfg["eval.ways"]:
            for k in cfg["eval.shots"]:
                for run in range(cfg["eval.runs"]):
                    eps = draw_episodes(cfg, source, fold, n, k, run, cfg["eval.episodes"])
                    write_episode_manifest(eval_manifest_path(cfg, fold, n, k, run), eps, fold)
    classes = [{"class_id": c.class_id, "shape": c.shape, "fold": c.fold,
                "color": [round(x, 4) for x in c.color]} for c in CLASSES]
    (root / "classes.json").write_text(json.dumps(classes, indent=2))
    _embed(root, cfg)
    print(f"{len(CLASSES)} classes, {NUM_FOLDS} folds, {len(records)} samples in {root}")
    print("fold  novel classes")
    for f in range(NUM_FOLDS):
        names = ", ".join(f"{c}:{CLASSES[c].shape}" for c in FoldSplit.for_fold(f).novel)
        print(f"{f:>4}  {names}")
    return root


def running_median(values: Sequence[float], width: int = 100) -> list[float]:
    arr = np.asarray(values, dtype=np.float64)
    return [float(np.median(arr[max(0, i - width + 1):i + 1])) for i in range(len(arr))]


def cmd_meta_train(cfg: RunConfig, force: bool = False) -> Path:
    source = open_pool(cfg)
    root = cfg.path("meta.dir")
    for fold in cfg["data.folds"]:
        target = root / f"fold{fold}"
        if target.exists() and any(target.iterdir()) and not force:
            raise ConfigError(f"checkpoint {target} exists; pass --force to retrain")
        split = FoldSplit.for_fold(fold)
        seen: set[int] = set()

        def audited(stream):
            for ep in stream:
                for rec in ep.support_records + [ep.query_record]:
                    seen.update(rec.class_ids)
                yield ep

        stream = audited(mixed_way_stream(split, cfg["meta.ways"], cfg["meta.shots"],
                                          cfg["meta.seed"] * NUM_FOLDS + fold, source))
        model = build_model(model_config(cfg))
        t0 = time.perf_counter()
        meta_train(model, stream, cfg["meta.steps"], cfg["meta.lr"])
        leaked = seen & set(split.novel)
        if leaked:
            raise DataError(f"fold {fold}: novel classes {sorted(leaked)} reached meta-training")
        model.meta.update(fold=fold, base_classes=list(split.base), seen_classes=sorted(seen),
                          seconds=round(time.perf_counter() - t0, 3))
        _prepare_out(target, True)
        save_checkpoint(model, target)
        curve = model.meta.get("loss_curve", [])
        med = running_median(curve)
        _write_csv(target / "loss.csv", LOSS_COLUMNS,
                   [{"step": i, "loss": l, "running_median": m} for i, (l, m) in enumerate(zip(curve, med))])
        first = float(np.mean(curve[:100])) if curve else float("nan")
        last = float(np.mean(curve[-100:])) if curve else float("nan")
        print(f"fold {fold}: {cfg['meta.steps']} steps, windowed loss {first:.4f} -> {last:.4f}")
    _embed(root, cfg)
    return root


def _fold_rows(cfg: RunConfig, model, fold: int, n: int, k: int, episodes_by_run, methods):
    rows, traces = [], []
    for method in methods:
        acfg = adapt_config(cfg, method)
        run_scores, bg, secs = [], [], []
        for run, eps in enumerate(episodes_by_run):
            results = evaluate(model, eps, acfg, cfg["eval.workers"])
            run_scores.append(float(np.mean([r.miou for r in results])))
            bg += [r.background_iou for r in results]
            secs += [r.seconds for r in results]
            for r in results:
                traces.append({"fold": fold, "ways": n, "shots": k, "run": run, "miou": r.miou,
                               "background_iou": r.background_iou, **r.trace.to_record()})
        trainable = count_method_trainable(model, acfg)
        rows.append({"method": method, "fold": fold, "ways": n, "shots": k,
                     "rank": acfg.rank if method == "tap" else 0,
                     "iterations": 0 if method == "vanilla" else acfg.iterations,
                     "miou": float(np.mean(run_scores)), "miou_std": float(np.std(run_scores)),
                     "bg_iou": float(np.mean(bg)), "trainable_params": trainable,
                     "trainable_pct": 100.0 * trainable / model.num_parameters(),
                     "seconds_per_episode": float(np.mean(secs)), "run_miou": run_scores})
    base = next(r for r in rows if r["method"] == "vanilla")
    for r in rows:
        r["delta"] = r["miou"] - base["miou"]
        r["reported"] = (f"{100 * r['miou']:.2f}" if r["method"] == "vanilla"
                         else f"{100 * r['delta']:+.2f}")
    return rows, traces


def cmd_eval(cfg: RunConfig, force: bool = False) -> Path:
    out = _prepare_out(cfg.path("out.dir"), force)
    source = open_pool(cfg)
    methods = list(dict.fromkeys(["vanilla"] + cfg["eval.methods"]))
    rows, traces = [], []
    for fold in cfg["data.folds"]:
        model = load_fold_model(cfg, fold)
        for n in cfg["eval.ways"]:
            for k in cfg["eval.shots"]:
                by_run = []
                for run in range(cfg["eval.runs"]):
                    path = eval_manifest_path(cfg, fold, n, k, run)
                    if not path.exists():
                        raise DataError(f"no episode list {path}; re-run 'tap gen-data' with this config")
                    eps = read_episode_manifest(path, source)
                    if len(eps) != cfg["eval.episodes"]:
                        raise DataError(f"{path} holds {len(eps)} episodes, config asks for "
                                        f"{cfg['eval.episodes']}")
                    by_run.append(eps)
                r, t = _fold_rows(cfg, model, fold, n, k, by_run, methods)
                rows += r
                traces += t
                for row in r:
                    print(f"fold {fold} {n}-way {k}-shot {row['method']:>10}: "
                          f"mIoU {100 * row['miou']:.2f} ({row['reported']})")
    _write_csv(out / "report.csv", REPORT_COLUMNS, rows)
    (out / "report.json").write_text(json.dumps({"columns": list(REPORT_COLUMNS), "rows": rows,
                                                 "config": cfg.to_dict(), "config_text": cfg.dump()},
                                                indent=2))
    with (out / "trace.jsonl").open("w") as fh:
        for t in traces:
            fh.write(json.dumps(t) + "\n")
    params = {}
    for row in rows:
        params.setdefault((row["method"], row["rank"]), row)
    _write_csv(out / "params.csv", ("method", "rank", "trainable_params", "trainable_pct"),
               list(params.values()))
    _embed(out, cfg)
    return out


def _svg_chart(path: Path, series: dict[str, list[float]], title: str) -> None:
    """Line chart, one line per series over t = 0..T, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "takeapeek"
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in series.items():
        ax.plot(range(len(values)), [100 * v for v in values], marker="o", label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("query mIoU (%)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_sweep(cfg: RunConfig, force: bool = False) -> Path:
    out = _prepare_out(cfg.path("out.dir"), force)
    source = open_pool(cfg)
    T, n, k = cfg["sweep.iterations"], cfg["sweep.ways"], cfg["sweep.shots"]
    rows, params, traces = [], [], []
    series: dict[str, list[float]] = {}
    for fold in cfg["sweep.folds"]:
        model = load_fold_model(cfg, fold)
        eps = draw_episodes(cfg, source, fold, n, k, 0, cfg["sweep.episodes"], tag=1)
        write_episode_manifest(out / f"episodes-fold{fold}.jsonl", eps, fold)
        for rank in cfg["sweep.ranks"]:
            acfg = adapt_config(cfg, "tap", rank=rank, iterations=T, track_query=True)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    adapters = prepare(model, acfg).adapters
            except ConfigError as exc:
                log.warning("rank %d skipped: %s", rank, exc)
                status = f"skipped: {exc}"
                rows += [{"fold": fold, "rank": rank, "t": t, "miou": "", "status": status}
                         for t in range(T + 1)]
                if fold == cfg["sweep.folds"][0]:
                    params.append({"rank": rank, "trainable_params": "", "trainable_pct": "",
                                   "status": status})
                continue
            if fold == cfg["sweep.folds"][0]:
                params.append({"rank": rank, "trainable_params": count_trainable(adapters),
                               "trainable_pct": trainable_percentage(adapters, model), "status": "ok"})
            results = evaluate(model, eps, acfg, cfg["eval.workers"])
            # reduce each iteration's column exactly like the vanilla list so the
            # t = 0 entry and the vanilla mean round identically
            curve = [float(np.mean([r.trace.query_miou[t] for r in results])) for t in range(T + 1)]
            series.setdefault(f"r={rank}", [0.0] * (T + 1))
            for t in range(T + 1):
                rows.append({"fold": fold, "rank": rank, "t": t, "miou": float(curve[t]), "status": "ok"})
                series[f"r={rank}"][t] += float(curve[t]) / len(cfg["sweep.folds"])
            for r in results:
                traces.append({"fold": fold, **r.trace.to_record()})
            print(f"fold {fold} rank {rank:>3}: " + " ".join(f"{100 * v:.1f}" for v in curve))
    _write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    _write_csv(out / "params.csv", PARAMS_COLUMNS, params)
    _svg_chart(out / "sweep.svg", series, "query mIoU by rank over iterations")
    with (out / "trace.jsonl").open("w") as fh:
        for t in traces:
            fh.write(json.dumps(t) + "\n")
    _embed(out, cfg)
    return out


def cmd_oneshot_study(cfg: RunConfig, force: bool = False) -> Path:
    out = _prepare_out(cfg.path("out.dir"), force)
    source = open_pool(cfg)
    T, n, copies = cfg["oneshot.iterations"], cfg["oneshot.ways"], cfg["oneshot.copies"]
    rows, traces = [], []
    series: dict[str, list[float]] = {}
    for fold in cfg["oneshot.folds"]:
        model = load_fold_model(cfg, fold)
        for k in (1, 2):
            eps = draw_episodes(cfg, source, fold, n, k, 0, cfg["oneshot.episodes"], tag=2)
            vanilla = evaluate(model, eps, adapt_config(cfg, "vanilla"))
            van = float(np.mean([r.miou for r in vanilla]))
            reps = [replicate_support(e, copies) for e in eps] if k == 1 else eps
            acfg = adapt_config(cfg, "tap", iterations=T, track_query=True)
            results = evaluate(model, reps, acfg, cfg["eval.workers"])
            # reduce each iteration's column exactly like the vanilla list so the
            # t = 0 entry and the vanilla mean round identically
            curve = [float(np.mean([r.trace.query_miou[t] for r in results])) for t in range(T + 1)]
            replicated = copies if k == 1 else 1
            for t in range(T + 1):
                rows.append({"fold": fold, "shots": k, "replicated": replicated, "t": t,
                             "miou": float(curve[t]), "vanilla_miou": van})
            name = f"{k}-shot"
            series.setdefault(name, [0.0] * (T + 1))
            for t in range(T + 1):
                series[name][t] += float(curve[t]) / len(cfg["oneshot.folds"])
            for r in results:
                traces.append({"fold": fold, "shots": k, **r.trace.to_record()})
            print(f"fold {fold} {k}-shot (x{replicated}): vanilla {100 * van:.1f} | "
                  + " ".join(f"{100 * v:.1f}" for v in curve))
    _write_csv(out / "oneshot.csv", ONESHOT_COLUMNS, rows)
    _svg_chart(out / "oneshot.svg", series, "query mIoU over iterations")
    with (out / "trace.jsonl").open("w") as fh:
        for t in traces:
            fh.write(json.dumps(t) + "\n")
    _embed(out, cfg)
    return out


COMMANDS = {
    "gen-data": (cmd_gen_data, "data.seed"),
    "meta-train": (cmd_meta_train, "meta.seed"),
    "eval": (cmd_eval, "eval.seed"),
    "sweep": (cmd_sweep, "eval.seed"),
    "oneshot-study": (cmd_oneshot_study, "eval.seed"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tap", description="Test-time LoRA adaptation for few-shot segmentation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--seed", type=int, help="override the command's seed key")
        p.add_argument("--out", help="override out.dir")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    func, seed_key = COMMANDS[args.command]
    try:
        cfg = RunConfig.load(args.config)
        over = {}
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError(f"--seed must be a u64, got {args.seed}")
            over[seed_key] = args.seed
        if args.out is not None:
            over["out.dir"] = str(Path(args.out).resolve())
        cfg = cfg.with_overrides(**over) if over else cfg
        func(cfg, force=args.force)
    except TapError as exc:
        print(f"tap {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
