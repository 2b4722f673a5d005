"""Command-line entry point: ``krada-lab {gen,train,eval,ablate,calibrate}``.

Every configuration key is also a flag (``unknown_prob`` -> ``--unknown-prob``).
Precedence: defaults < ``--config`` file < flags. Exit codes: 0 success,
2 configuration error, 3 data-format error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ExperimentConfig
from .errors import ConfigError, FormatError, NumericalError
from .metrics import MetricReport
from .networks import (
    forward_features,
    classify,
    init_model,
    load_discriminator,
    load_model,
    read_checkpoint,
    save_discriminator,
    save_model,
    write_checkpoint,
)
from .openset import calibrate_delta
from .synthworld import (
    LabeledImage,
    generate_source,
    generate_target,
    palette,
    read_dataset,
    stack,
    write_dataset,
)
from .tensor import softmax_channels
from .trainer import (
    Dataset,
    PseudoLabelStore,
    TrainState,
    evaluate,
    predict,
    train,
)

log = logging.getLogger("krada_lab")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("source", "target_train", "target_test")
TRACE_COLUMNS = ("iteration", "L_seg_S", "L_seg_T", "L_seg_star", "L_adv", "unknown_fraction")
ABLATION_MODES = ("krada", "krada_no_mask", "csdas", "source_only", "source_only_pl")


# ---------------------------------------------------------------------------
# datasets


def cmd_gen(cfg: ExperimentConfig, out: Path) -> dict[str, list[LabeledImage]]:
    data_dir, _, _ = cfg.paths(out)
    spec = cfg.scene()
    sets = {
        "source": generate_source(spec, cfg.n_source),
        "target_train": generate_target(spec, cfg.n_target, "train"),
        "target_test": generate_target(spec, cfg.n_test, "test"),
    }
    data_dir.mkdir(parents=True, exist_ok=True)
    for name, images in sets.items():
        write_dataset(data_dir / name, images, cfg.K)
        n_unknown = sum(im.has_unknown for im in images)
        print(f"{name}: {len(images)} images, {n_unknown} with unknown -> {data_dir / name}")
    cfgmod.write(data_dir / "resolved.cfg", cfg)
    return sets


def _load_split(cfg: ExperimentConfig, out: Path, name: str) -> Dataset:
    data_dir, _, _ = cfg.paths(out)
    if not (data_dir / name / "manifest").is_file():
        log.info("no dataset at %s; generating", data_dir)
        cmd_gen(cfg, out)
    images, labels = stack(read_dataset(data_dir / name, cfg.K))
    return Dataset(images, labels)


# ---------------------------------------------------------------------------
# training


def _save_state(ckpt_dir: Path, state: TrainState) -> None:
    save_model(ckpt_dir / "model.ckpt", state.model)
    if state.config.uses_disc:
        save_discriminator(ckpt_dir / "disc.ckpt", state.disc, state.model.K)
    write_checkpoint(ckpt_dir / "state.ckpt", state.model.K, {
        "t": np.array([state.t], dtype=np.float64),
        "pseudo_unknown": state.store.unknown.astype(np.float64),
        "pseudo_version": state.store.version.astype(np.float64),
    })


def _load_state(ckpt_dir: Path, tcfg, target: Dataset) -> TrainState:
    model = load_model(ckpt_dir / "model.ckpt")
    if (ckpt_dir / "disc.ckpt").is_file():
        disc = load_discriminator(ckpt_dir / "disc.ckpt")
    else:
        _, disc = init_model(model.K, model.in_channels, tcfg.seed)
    K, arrays = read_checkpoint(ckpt_dir / "state.ckpt")
    store = PseudoLabelStore(len(target), K, *target.images.shape[2:])
    if arrays["pseudo_unknown"].shape != store.unknown.shape:
        raise FormatError(f"{ckpt_dir}: saved pseudo-labels do not match the target dataset")
    store.unknown[...] = arrays["pseudo_unknown"] > 0
    store.version[...] = arrays["pseudo_version"].astype(np.int64)
    return TrainState(model, disc, store, tcfg, t=int(arrays["t"][0]))


def _read_trace(path: Path, upto: int) -> list[list[str]]:
    if not path.is_file():
        return []
    with path.open() as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if int(r[0]) <= upto]


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def run_training(cfg: ExperimentConfig, out: Path, ckpt_dir: Path, report_dir: Path,
                 resume: bool = False, stop_after: int | None = None):
    cfg.validate()
    tcfg = cfg.train()
    source = _load_split(cfg, out, "source")
    target = _load_split(cfg, out, "target_train")
    eval_data = _load_split(cfg, out, "target_test") if cfg.eval_every else None
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    report_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write(ckpt_dir / "resolved.cfg", cfg)
    cfgmod.write(report_dir / "resolved.cfg", cfg)

    state = None
    rows: list[list[str]] = []
    if resume and (ckpt_dir / "state.ckpt").is_file():
        state = _load_state(ckpt_dir, tcfg, target)
        rows = _read_trace(report_dir / "trace.csv", state.t)
        log.info("resuming from iteration %d", state.t)

    def flush(st):
        _save_state(ckpt_dir, st)
        _write_csv(report_dir / "trace.csv", TRACE_COLUMNS, rows)

    def on_step(st, b):
        rows.append([str(st.t), repr(b.L_seg_S), repr(b.L_seg_T), repr(b.L_seg_star),
                     repr(b.L_adv), repr(b.unknown_fraction)])
        if cfg.ckpt_every and st.t % cfg.ckpt_every == 0:
            flush(st)

    result = train(tcfg, source, target, cfg.K, eval_data=eval_data, eval_every=cfg.eval_every,
                   state=state, until=stop_after, on_step=on_step)
    flush(result.state)
    if result.snapshots:
        _write_csv(report_dir / "snapshots.csv", ("iteration", "miou", "miou_star", "unknown_iou"),
                   [[it, repr(r.miou), repr(r.miou_star), repr(r.unknown_iou)] for it, r in result.snapshots])
    return result


def cmd_train(cfg, out, resume=False, stop_after=None):
    _, ckpt_dir, report_dir = cfg.paths(out)
    result = run_training(cfg, out, ckpt_dir, report_dir, resume, stop_after)
    print(f"trained {result.state.t} iterations ({cfg.mode}, {cfg.metric}) -> {ckpt_dir}")
    return result


# ---------------------------------------------------------------------------
# evaluation


def render_prediction(pred: np.ndarray, K: int, colors: np.ndarray) -> np.ndarray:
    """RGB uint8 rendering of a label map; unknown pixels are white."""
    table = np.round(np.clip(colors, 0, 1) * 255).astype(np.uint8)
    table[K + 1] = 255
    return table[pred]


def write_report(report: MetricReport, report_dir: Path, stem: str = "metrics") -> None:
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / f"{stem}.csv").write_text(report.to_csv())
    (report_dir / f"{stem}_instance.csv").write_text(report.to_instance_csv())
    (report_dir / f"{stem}.txt").write_text(report.to_table())


def cmd_eval(cfg, out, checkpoint=None, dataset=None, dump=False) -> MetricReport:
    data_dir, ckpt_dir, report_dir = cfg.paths(out)
    model = load_model(Path(checkpoint) if checkpoint else ckpt_dir / "model.ckpt")
    if model.K != cfg.K:
        raise ConfigError(f"checkpoint has K={model.K}, config says K={cfg.K}")
    if dataset:
        data = Dataset(*stack(read_dataset(dataset, cfg.K)))
    else:
        data = _load_split(cfg, out, "target_test")
    report = evaluate(model, data, cfg.tau_img)
    write_report(report, report_dir)
    cfgmod.write(report_dir / "resolved.cfg", cfg)
    print(report.to_table(), end="")
    if dump:
        pred = predict(model, data.images)
        colors = palette(cfg.scene())
        dumps = [LabeledImage(render_prediction(p, model.K, colors).transpose(2, 0, 1) / 255.0,
                              p.astype(np.uint8), "prediction", bool((p == model.K + 1).any()), i, cfg.seed)
                 for i, p in enumerate(pred)]
        write_dataset(report_dir / "predictions", dumps, model.K)
    return report


# ---------------------------------------------------------------------------
# ablation


def ablation_cells(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    cells = []
    for mode in ABLATION_MODES:
        metrics = ("kl", "kolmogorov") if mode in ("krada", "krada_no_mask", "source_only_pl") else ("kl",)
        for metric in metrics:
            cells.append(replace(cfg, mode=mode, metric=metric))
    return cells


def _run_cell(args):
    cell, out = args
    cell_dir = out / "ablate" / f"{cell.mode}-{cell.metric}"
    result = run_training(replace(cell, eval_every=0), out, cell_dir, cell_dir)
    test = _load_split(cell, out, "target_test")
    report = evaluate(result.state.model, test, cell.tau_img)
    write_report(report, cell_dir)
    return report


def cmd_ablate(cfg: ExperimentConfig, out: Path) -> list[tuple[ExperimentConfig, MetricReport]]:
    cfg.validate()
    _load_split(cfg, out, "source")  # generate once, before any parallel reader
    cells = ablation_cells(cfg)
    threads = int(os.environ.get("KRADA_LAB_THREADS", "1") or 1)
    jobs = [(c, out) for c in cells]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(_run_cell, jobs))
    else:
        reports = [_run_cell(j) for j in jobs]

    _, _, report_dir = cfg.paths(out)
    report_dir.mkdir(parents=True, exist_ok=True)
    header = (["mode", "metric", "delta", "alpha", "known_region_mask", "discriminator"]
              + [f"iou_class_{c}" for c in range(1, cfg.K + 1)] + ["iou_unknown", "miou", "miou_star"])
    rows = []
    for c, r in zip(cells, reports):
        t = c.train()
        rows.append([c.mode, c.metric, repr(t.delta), repr(t.effective_alpha), int(t.uses_mask),
                     int(t.uses_disc)] + [repr(v) for v in r.iou] + [repr(r.miou), repr(r.miou_star)])
    _write_csv(report_dir / "ablation.csv", header, rows)
    lines = [f"{'mode':<16}{'metric':<12}{'unk.':>7}{'mIoU':>7}{'mIoU*':>7}"]
    for c, r in zip(cells, reports):
        lines.append(f"{c.mode:<16}{c.metric:<12}{100 * r.unknown_iou:>7.1f}{100 * r.miou:>7.1f}"
                     f"{100 * r.miou_star:>7.1f}")
    table = "\n".join(lines) + "\n"
    (report_dir / "ablation.txt").write_text(table)
    cfgmod.write(report_dir / "resolved.cfg", cfg)
    print(table, end="")
    return list(zip(cells, reports))


# ---------------------------------------------------------------------------
# delta calibration


def target_prob_maps(model, images: np.ndarray, batch: int = 32) -> list[np.ndarray]:
    maps = []
    for i in range(0, len(images), batch):
        p = softmax_channels(classify(model.C_star, forward_features(model, images[i:i + batch]))).data
        maps.extend(p)
    return maps


def cmd_calibrate(cfg: ExperimentConfig, out: Path, checkpoint=None):
    cfg.validate()
    _, ckpt_dir, report_dir = cfg.paths(out)
    ckpt = Path(checkpoint) if checkpoint else ckpt_dir / "model.ckpt"
    model = load_model(ckpt)
    target = _load_split(cfg, out, "target_train")
    test = _load_split(cfg, out, "target_test")
    source = _load_split(cfg, out, "source")
    candidates = calibrate_delta(target_prob_maps(model, target.images), cfg.metric,
                                 cfg.calib_steps, cfg.calib_step_size)
    mode = cfg.mode if cfg.mode in ("krada", "krada_no_mask", "source_only_pl") else "krada"
    disc_path = ckpt.parent / "disc.ckpt"
    results = []
    for delta in candidates:
        m = load_model(ckpt)
        if disc_path.is_file():
            d = load_discriminator(disc_path)
        else:
            _, d = init_model(m.K, m.in_channels, cfg.seed)
        if cfg.calib_iters:
            key = "ko_delta" if cfg.metric == "kolmogorov" else "delta"
            tcfg = cfg.train(mode=mode, iterations=cfg.calib_iters, **{key: delta})
            state = TrainState(m, d, PseudoLabelStore(len(target), m.K, *target.images.shape[2:]), tcfg)
            train(tcfg, source, target, m.K, state=state)
        results.append((delta, evaluate(m, test, cfg.tau_img)))
    best_delta, best = max(results, key=lambda r: r[1].miou)
    report_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(report_dir / "calibration.csv", ("delta", "miou", "miou_star", "unknown_iou", "best"),
               [[repr(dl), repr(r.miou), repr(r.miou_star), repr(r.unknown_iou), int(dl == best_delta)]
                for dl, r in results])
    cfgmod.write(report_dir / "resolved.cfg", cfg)
    print(f"candidates: {', '.join(f'{d:.4f}' for d in candidates)}")
    print(f"best delta = {best_delta!r} (mIoU {best.miou:.4f})")
    return best_delta, results


# ---------------------------------------------------------------------------
# argument handling


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--out", default="krada_out", help="output directory (default: krada_out)")
    group = common.add_argument_group("configuration overrides")
    for f in fields(ExperimentConfig):
        group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar=f.type.upper(), default=None)

    parser = argparse.ArgumentParser(prog="krada-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen", parents=[common], help="write source/target datasets")
    p = sub.add_parser("train", parents=[common], help="train one configuration")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.add_argument("--stop-after", type=int, default=None, help="stop after this iteration")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--dump", action="store_true", help="write predicted label maps and renderings")
    sub.add_parser("ablate", parents=[common], help="run the mode x metric comparison")
    p = sub.add_parser("calibrate", parents=[common], help="scan delta from a checkpoint")
    p.add_argument("--checkpoint")
    return parser


def resolve(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for f in fields(ExperimentConfig):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            overrides[f.name] = cfgmod.coerce(f.name, raw)
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        out = Path(args.out)
        if args.verb == "gen":
            cmd_gen(cfg, out)
        elif args.verb == "train":
            cmd_train(cfg, out, args.resume, args.stop_after)
        elif args.verb == "eval":
            cmd_eval(cfg, out, args.checkpoint, args.dataset, args.dump)
        elif args.verb == "ablate":
            cmd_ablate(cfg, out)
        elif args.verb == "calibrate":
            cmd_calibrate(cfg, out, args.checkpoint)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as e:
        print(f"data format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
