"""Command-line entry point: ``satno2 <subcommand> [--config PATH] ...``.

Exit codes: 0 success, 2 argument/configuration error, 3 data error,
4 numeric error, 5 I/O error, 1 anything else.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import sys

import numpy as np
import torch

from .config import dump_config, load_config
from .dataset import ArchiveWriter, SplitSpec, load_arrays, read_manifest, split_indices
from .errors import ConfigurationError, DataError, SatNO2Error, StorageError
from .estimator import NO2Regressor
from .experiment import multi_seed_run
from .model import build_landcover_model, save_checkpoint
from .synth import LCC_CLASSES, SynthConfig, iter_synth, manifest_entry, synth_landcover
from .training import PretrainConfig, pretrain_lcc

log = logging.getLogger("satno2")

EXIT_OK, EXIT_FAILURE, EXIT_ARGUMENT, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4, 5


def _write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _environment():
    return {"python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__, "machine": platform.machine(),
            "threads": torch.get_num_threads()}


def write_run_manifest(path, cfg, **entries):
    """Key-value text file: resolved settings, seeds, data checksums, environment."""
    lines = [f"seed={cfg.seed}", f"jobs={cfg.jobs}"]
    for section in ("train", "synth", "pretrain", "experiment"):
        for k, v in sorted(getattr(cfg, section).model_dump(mode="json").items()):
            lines.append(f"{section}.{k}={json.dumps(v)}")
    for k, v in entries.items():
        lines.append(f"{k}={v if isinstance(v, str) else json.dumps(v, sort_keys=True)}")
    for k, v in _environment().items():
        lines.append(f"env.{k}={v}")
    _write_text(path, "\n".join(lines) + "\n")


def _archive_checksum(archive):
    return _sha256(os.path.join(archive, "manifest.json"))


def _estimator_params(cfg):
    t = cfg.train
    return {"variant": t.variant, "pretrained": t.pretrained, "head_hidden": t.head_hidden,
            "learning_rate": t.learning_rate, "batch_size": t.batch_size,
            "max_epochs": t.max_epochs, "patience": t.patience, "augment": t.augment,
            "freeze_backbone": t.freeze_backbone}


def _split(cfg, keys):
    spec = SplitSpec(seed=cfg.seed, group_by_station=cfg.train.group_by_station)
    return split_indices(len(keys), spec, [k[0] for k in keys])


def _load_checkpoint_for(cfg, path):
    if not path or not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path!r} not found")
    est = NO2Regressor.load(path)
    if est.variant != cfg.train.variant:
        found = est.model_.head.in_features
        expected = 2048 + (128 if cfg.train.variant == "fusion" else 0)
        raise ConfigurationError(
            f"checkpoint {path} is a {est.variant} model (head input {found}-d) but the config "
            f"asks for {cfg.train.variant} (head input {expected}-d)")
    return est


# ---- subcommands -----------------------------------------------------------

def cmd_ingest(cfg):
    from .pipeline import run_ingest
    archive = cfg.archive_path()
    report = run_ingest(cfg, archive, grid_dir=os.path.join(cfg.output, "grids"))
    _write_text(os.path.join(cfg.output, "ingest_report.json"),
                json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("ingest: %d samples (%d with Sentinel-5P) -> %s", report["samples"],
             report["samples_with_s5p"], archive)
    return report


def cmd_synth(cfg):
    s = cfg.synth
    config = SynthConfig(n_samples=s.n_samples, n_emitters=tuple(s.n_emitters),
                         intensity=tuple(s.intensity), background_noise=s.background_noise,
                         target_noise=s.target_noise, seed=cfg.seed)
    archive = cfg.archive_path()
    with ArchiveWriter(archive, manifest_entry(config)) as writer:
        for sample in iter_synth(config):
            writer.add(sample)
    log.info("synth: %d samples -> %s", s.n_samples, archive)
    return archive


def cmd_pretrain(cfg):
    p = cfg.pretrain
    if p.dataset:
        with np.load(p.dataset) as z:
            x, labels = z["tiles"].astype(np.float32), z["labels"]
        classes = [f"class_{i}" for i in range(np.shape(labels)[-1])] if np.ndim(labels) == 2 else []
    else:
        classes = list(LCC_CLASSES)
        x, labels = synth_landcover(p.n_samples, seed=cfg.seed, classes=classes)
    if np.ndim(labels) != 2:
        raise ConfigurationError("pretraining labels must be a multi-label (n, n_classes) matrix")
    from .dataset import ChannelStandardizer
    scaler = ChannelStandardizer().fit(x)
    model = build_landcover_model(labels.shape[1], seed=cfg.seed)
    model, losses = pretrain_lcc(model, x, labels,
                                 PretrainConfig(p.learning_rate, p.batch_size, p.epochs, seed=cfg.seed),
                                 preprocess=scaler.transform)
    path = os.path.join(cfg.output, "pretrained.pt")
    save_checkpoint(path, model, norm_stats=scaler.stats_.to_dict(),
                    extra={"classes": classes, "losses": losses})
    log.info("pretrain: bce %s -> %s", [round(v, 4) for v in losses], path)
    return path


def cmd_train(cfg):
    archive = cfg.archive_path()
    x, y, keys = load_arrays(archive, cfg.train.variant)
    tr, va, te = _split(cfg, keys)
    est = NO2Regressor(**_estimator_params(cfg), random_state=cfg.seed)
    est.fit(x[tr], y[tr], eval_set=(x[va], y[va]))
    path = os.path.join(cfg.output, "model.pt")
    est.save(path, extra={"archive": os.path.abspath(archive)})
    split = {"train": [list(keys[i]) for i in tr], "validation": [list(keys[i]) for i in va],
             "test": [list(keys[i]) for i in te]}
    _write_text(os.path.join(cfg.output, "split.json"), json.dumps(split, indent=1) + "\n")
    rows = ["epoch\ttrain_loss\tval_loss"] + [
        f"{h['epoch']}\t{h['train_loss']:.6f}\t{h['val_loss']:.6f}" for h in est.history_]
    _write_text(os.path.join(cfg.output, "history.tsv"), "\n".join(rows) + "\n")
    write_run_manifest(os.path.join(cfg.output, "run_manifest.txt"), cfg,
                       archive_sha256=_archive_checksum(archive),
                       n_train=int(len(tr)), n_validation=int(len(va)), n_test=int(len(te)),
                       best_epoch=est.best_epoch_)
    log.info("train: best epoch %s -> %s", est.best_epoch_, path)
    return path


def cmd_evaluate(cfg):
    path = cfg.train.checkpoint or os.path.join(cfg.output, "model.pt")
    est = _load_checkpoint_for(cfg, path)
    archive = cfg.archive_path()
    x, y, keys = load_arrays(archive, cfg.train.variant)
    split_path = os.path.join(os.path.dirname(path), "split.json")
    if os.path.exists(split_path):
        with open(split_path) as fh:
            test_keys = {tuple(k) for k in json.load(fh)["test"]}
        te = np.array([i for i, k in enumerate(keys) if k in test_keys], dtype=int)
    else:
        te = _split(cfg, keys)[2]
    metrics = est.evaluate(x[te], y[te])
    table = "split\tn\tmae\tmse\tr2\n" + \
        f"test\t{len(te)}\t{metrics.mae:.6f}\t{metrics.mse:.6f}\t{metrics.r2:.6f}\n"
    _write_text(os.path.join(cfg.output, "metrics.tsv"), table)
    sys.stdout.write(table)
    return metrics


def cmd_experiment(cfg):
    archive = cfg.archive_path()
    x, y, keys = load_arrays(archive, cfg.train.variant)
    params = _estimator_params(cfg)
    groups = [k[0] for k in keys] if cfg.train.group_by_station else None

    def run(X, Y, seed, params=None, groups=None):
        spec = SplitSpec(seed=seed, group_by_station=cfg.train.group_by_station)
        tr, va, te = split_indices(len(X), spec, groups)
        est = NO2Regressor(**dict(params, random_state=seed))
        est.fit(X[tr], Y[tr], eval_set=(X[va], Y[va]))
        return est, est.evaluate(X[te], Y[te])

    summary = multi_seed_run(x, y, cfg.experiment.n_seeds, cfg.seed, params, groups, run=run)
    table = summary.to_table()
    _write_text(os.path.join(cfg.output, "summary.tsv"), table)
    write_run_manifest(os.path.join(cfg.output, "run_manifest.txt"), cfg,
                       archive_sha256=_archive_checksum(archive),
                       seeds=[r.seed for r in summary.results],
                       failed_seeds=summary.failed_seeds)
    sys.stdout.write(table)
    return summary


def cmd_map(cfg):
    from .mapping import export_map, predict_map
    from .s2 import load_s2_scene, resample_to_10m
    from .s5p import load_grid
    m = cfg.map
    path = m.checkpoint or cfg.train.checkpoint or os.path.join(cfg.output, "model.pt")
    est = _load_checkpoint_for(cfg, path)
    if not m.scene:
        raise ConfigurationError("map.scene is required")
    scene = resample_to_10m(load_s2_scene(m.scene))
    grid = load_grid(m.grid) if m.grid else None
    pmap = predict_map(est, scene, grid, period=m.period, checkpoint_id=_sha256(path)[:16])
    raster = os.path.join(cfg.output, "map.tif")
    image = os.path.join(cfg.output, "map.png")
    export_map(pmap, raster, image, m.stations, m.cmap)
    log.info("map: %s cells (%d masked) -> %s", pmap.values.shape, int(pmap.mask.sum()), raster)
    return raster, image


def cmd_series(cfg):
    from .dataset import load_archive
    from .mapping import predict_series, write_series
    s = cfg.series
    path = s.checkpoint or cfg.train.checkpoint or os.path.join(cfg.output, "model.pt")
    est = _load_checkpoint_for(cfg, path)
    if not s.station_id:
        raise ConfigurationError("series.station_id is required")
    samples, _ = load_archive(cfg.archive_path())
    inputs, periods = {}, set()
    for smp in samples:
        periods.add(smp.period)
        if smp.station_id != s.station_id:
            continue
        if est.variant == "fusion":
            if smp.s5p is None:
                continue
            inputs[smp.period] = np.concatenate([smp.s2.data, smp.s5p.data])
        else:
            inputs[smp.period] = smp.s2.data
    series = predict_series(est, sorted(periods), inputs)
    out = os.path.join(cfg.output, "series.tsv")
    write_series(out, series, s.mae)
    return out


COMMANDS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train,
    "evaluate": cmd_evaluate, "experiment": cmd_experiment, "map": cmd_map, "series": cmd_series,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGUMENT, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--jobs", type=int, help="worker threads (overrides config)")
    common.add_argument("--output", metavar="DIR", help="output directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="satno2", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"ingest": "build a sample archive from raw products and station files",
             "synth": "generate a synthetic sample archive",
             "pretrain": "pretrain the backbone on multi-label land cover",
             "train": "train a regressor on an archive",
             "evaluate": "evaluate a checkpoint on the held-out test split",
             "experiment": "multi-seed train/evaluate with aggregated metrics",
             "map": "predict a NO2 heatmap for a scene",
             "series": "predict a per-period series for one station"}
    for name in COMMANDS:
        sub.add_parser(name, help=helps[name], parents=[common])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, jobs=args.jobs, output=args.output)
        torch.set_num_threads(cfg.jobs)
        os.makedirs(cfg.output, exist_ok=True)
        dump_config(cfg, os.path.join(cfg.output, f"config.{args.command}.yaml"))
        COMMANDS[args.command](cfg)
    except SatNO2Error as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_ARGUMENT
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
