"""Experiment commands: data generation, pilot selection, training, evaluation and reports.

Every artifact lives under ``config.out_dir``::

    data/{train,val,test}.pfds, data/manifest.json
    patterns/{cae,uniform}_np{N}.txt
    selectors/cae_np{N}.pfck
    decoders/{source}_{window}_np{N}.pfck
    pipelines/{source}_{window}_np{N}.pfck
    reports/report.csv
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nn as pfnn
from .channel import SPLITS, ChannelDataset, generate_dataset
from .channelnet import estimate_batch, load_pipeline, save_pipeline, train_end_to_end
from .config import ConfigError, ExperimentConfig
from .estimators import (
    decoder_estimates,
    equally_spaced_pattern,
    fit_statistics,
    mmse_weights,
    train_decoder,
)
from .selection import PilotPattern, load_selector, make_decoder, save_selector, train_selector

log = logging.getLogger(__name__)

PATTERN_SOURCES = ("cae", "uniform")
SNR_WINDOWS = ("full", "low", "high")
REPORT_COLUMNS = ("method", "np", "snr_db", "mse_raw", "mse_norm", "frames")

# method name -> (pattern source, snr window, stage)
LEARNED_METHODS = {
    "cae-channelnet": ("cae", "full", "pipeline"),
    "uniform-channelnet": ("uniform", "full", "pipeline"),
    "uniform-low": ("uniform", "low", "pipeline"),
    "uniform-high": ("uniform", "high", "pipeline"),
    "ls-decoder": ("uniform", "full", "decoder"),
}
SWEEP_METHODS = ("cae-channelnet", "uniform-channelnet", "mmse")


class MissingArtifactError(FileNotFoundError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def data_path(config: ExperimentConfig, split: str) -> Path:
    return config.out / "data" / f"{split}.pfds"


def pattern_path(config: ExperimentConfig, source: str, np_: int) -> Path:
    return config.out / "patterns" / f"{source}_np{np_}.txt"


def selector_path(config: ExperimentConfig, np_: int) -> Path:
    return config.out / "selectors" / f"cae_np{np_}.pfck"


def decoder_path(config: ExperimentConfig, source: str, window: str, np_: int) -> Path:
    return config.out / "decoders" / f"{source}_{window}_np{np_}.pfck"


def pipeline_path(config: ExperimentConfig, source: str, window: str, np_: int) -> Path:
    return config.out / "pipelines" / f"{source}_{window}_np{np_}.pfck"


def report_path(config: ExperimentConfig) -> Path:
    return config.out / "reports" / "report.csv"


def load_split(config: ExperimentConfig, split: str) -> ChannelDataset:
    path = data_path(config, split)
    if not path.exists():
        raise MissingArtifactError(f"dataset {path} not found; run gen-data first")
    return ChannelDataset.load(path)


def cmd_gen_data(config: ExperimentConfig) -> dict:
    """Write train/val/test datasets plus a manifest of their hashes."""
    splits = generate_dataset(config.profile(), config.counts(), config.snr_list, config.seed, config.nf, config.nn)
    files = {}
    for name in SPLITS:
        path = splits[name].save(data_path(config, name))
        files[name] = {"path": path.name, "count": len(splits[name]), "sha256": _sha256(path)}
        log.info("wrote %s (%d records)", path, len(splits[name]))
    manifest = {"config_sha256": config.digest(), "seed": config.seed, "files": files}
    mpath = config.out / "data" / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    manifest["manifest_sha256"] = _sha256(mpath)
    return manifest


def cmd_select(config: ExperimentConfig, np_: int) -> dict:
    """Train the Concrete selector for ``np_`` pilots; write the pattern and selector checkpoint."""
    _check_np(config, np_)
    train = load_split(config, "train")
    result = train_selector(train, np_, config.schedule(), config.decoder_widths, config.selector_train(),
                            seed=config.seed, selector_lr=config.selector_lr)
    ppath = result.pattern.save(pattern_path(config, "cae", np_))
    spath = selector_path(config, np_)
    save_selector(spath, result, {"config_sha256": config.digest()})
    mmp = result.final_mean_max_prob
    log.info("np=%d pattern -> %s; final mean max probability %.4f; %d argmax collisions resolved",
             np_, ppath, mmp, result.collisions)
    return {"pattern": str(ppath), "selector": str(spath), "mean_max_prob": mmp,
            "collisions": result.collisions, "distinct_subcarriers": result.pattern.distinct_subcarriers(),
            "history": result.history}


def window_bounds(config: ExperimentConfig, window: str) -> tuple[float, float]:
    if window == "full":
        return -math.inf, math.inf
    if window == "low":
        return -math.inf, config.snr_window_boundary_db
    if window == "high":
        return config.snr_window_boundary_db, math.inf
    raise ConfigError(f"unknown SNR window {window!r}; expected one of {SNR_WINDOWS}")


def _check_np(config: ExperimentConfig, np_: int):
    if np_ < 2 or np_ % 2 or np_ > config.nf * config.nn:
        raise ConfigError(f"pilot count {np_} must be even and within the grid")


def resolve_pattern(config: ExperimentConfig, source: str, np_: int):
    """Pattern and warm-start decoder (None for the lattice) for a pattern source."""
    if source == "cae":
        ppath, spath = pattern_path(config, "cae", np_), selector_path(config, np_)
        if not ppath.exists() or not spath.exists():
            raise MissingArtifactError(f"no selected pattern for np={np_}; run select --np {np_} first")
        _, decoder, _ = load_selector(spath)
        return PilotPattern.load(ppath), decoder
    if source == "uniform":
        pattern = equally_spaced_pattern(config.nf, config.nn, np_)
        pattern.save(pattern_path(config, "uniform", np_))
        return pattern, None
    raise ConfigError(f"unknown pattern source {source!r}; expected one of {PATTERN_SOURCES}")


def cmd_train(config: ExperimentConfig, np_: int, source: str = "cae", window: str = "full") -> dict:
    """Fit the decoder on the hard pattern, then the whole cascade end to end."""
    _check_np(config, np_)
    lo, hi = window_bounds(config, window)
    pattern, init = resolve_pattern(config, source, np_)
    train = load_split(config, "train").snr_window(lo, hi)
    if len(train) == 0:
        raise ConfigError(f"SNR window {window} keeps no training records")
    log.info("training %s/%s np=%d on %d records", source, window, np_, len(train))
    dec_cfg = config.decoder_train()
    if init is None:
        # the selected-pattern decoder is warm-started from selector training; give the
        # lattice decoder the same total number of epochs so both see equal updates
        dec_cfg = replace(dec_cfg, epochs=dec_cfg.epochs + config.selector_epochs)
    decoder, dec_hist = train_decoder(train, pattern, config.decoder_widths, dec_cfg,
                                      seed=config.seed + 1, init=init)
    dpath = decoder_path(config, source, window, np_)
    meta = {"kind": "decoder", "k": len(pattern), "d": config.nf * config.nn, "nf": config.nf, "nn": config.nn,
            "decoder_widths": list(config.decoder_widths), "pattern": pattern.to_text(),
            "pattern_sha256": pattern.digest(), "config_sha256": config.digest()}
    pfnn.save_checkpoint(dpath, pfnn.float_state(decoder, "decoder."), meta)
    pipeline, hist = train_end_to_end(train, pattern, decoder, config.pipeline_spec(), config.e2e_train(),
                                      seed=config.seed + 2)
    ppath = pipeline_path(config, source, window, np_)
    save_pipeline(ppath, pipeline, {"source": source, "snr_window": window, "train_records": len(train),
                                    "snr_bounds": [lo if math.isfinite(lo) else None,
                                                   hi if math.isfinite(hi) else None],
                                    "config_sha256": config.digest()})
    log.info("wrote %s (final train mse %.5f)", ppath, hist[-1]["mse"])
    return {"pipeline": str(ppath), "decoder": str(dpath), "train_records": len(train),
            "decoder_history": dec_hist, "history": hist}


def load_decoder(path: Path):
    tensors, meta = pfnn.load_checkpoint(path)
    if meta.get("kind") != "decoder":
        raise pfnn.CheckpointError(f"{path}: not a decoder checkpoint")
    dec = make_decoder(meta["k"], meta["d"], meta["decoder_widths"])
    pfnn.load_float_state(dec, tensors, "decoder.")
    dec.eval()
    return dec, PilotPattern.from_text(meta["pattern"])


@dataclass(frozen=True)
class ReportRow:
    method: str
    np: int
    snr_db: float
    mse_raw: float
    mse_norm: float
    frames: int

    def __post_init__(self):
        if self.frames < 1 or self.mse_raw < 0 or self.mse_norm < 0:
            raise ValueError(f"invalid report row {self}")


def frame_errors(est: np.ndarray, ideal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame raw MSE and per-frame power."""
    err = np.mean(np.abs(est - ideal) ** 2, axis=(1, 2))
    power = np.mean(np.abs(ideal) ** 2, axis=(1, 2))
    return err, power


def rows_by_snr(method: str, np_: int, est: np.ndarray, test: ChannelDataset) -> list[ReportRow]:
    ideal = test.ideal.astype(np.complex128)
    err, power = frame_errors(est, ideal)
    rows = []
    for snr in test.snr_list:
        mask = test.snr_db == np.float32(snr)
        if not mask.any():
            continue
        raw = float(err[mask].mean())
        rows.append(ReportRow(method, np_, float(snr), raw, raw / float(power[mask].mean()), int(mask.sum())))
    return rows


def mmse_batch(test: ChannelDataset, pattern: PilotPattern, stats) -> np.ndarray:
    """Ideal LMMSE per frame with the frame's true noise variance.

    Frames are split into contiguous chunks over ``PILOTFORGE_THREADS`` workers;
    each frame is written to its own slot, so the result does not depend on scheduling.
    """
    out = np.empty(test.ideal.shape, dtype=np.complex128)
    ideal = test.ideal.astype(np.complex128)
    nvs = np.mean(np.abs(ideal) ** 2, axis=(1, 2)) * 10.0 ** (-test.snr_db.astype(np.float64) / 10.0)
    weights = {}
    for nv in nvs:
        if nv not in weights:
            weights[nv] = mmse_weights(stats, float(nv))
    flat = test.noisy.reshape(len(test), -1)[:, pattern.flat].astype(np.complex128)

    def work(lo, hi):
        for i in range(lo, hi):
            out[i] = (weights[nvs[i]] @ flat[i]).reshape(pattern.nf, pattern.nn)

    workers = pfnn.worker_count()
    bounds = np.linspace(0, len(test), workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for f in [pool.submit(work, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]:
            f.result()
    return out


def required_methods(config: ExperimentConfig, np_: int) -> list[str]:
    if np_ in config.np_list:
        return [*LEARNED_METHODS, "mmse", "mmse-uniform"]
    return list(SWEEP_METHODS)


def evaluate_np(config: ExperimentConfig, np_: int, test: ChannelDataset, train: ChannelDataset,
                methods=None) -> list[ReportRow]:
    rows = []
    methods = methods or required_methods(config, np_)
    for method in methods:
        if method in ("mmse", "mmse-uniform"):
            source = "cae" if method == "mmse" else "uniform"
            if source == "cae":
                ppath = pattern_path(config, "cae", np_)
                if not ppath.exists():
                    raise MissingArtifactError(f"{method}: pattern {ppath} not found")
                pattern = PilotPattern.load(ppath)
            else:
                pattern = equally_spaced_pattern(config.nf, config.nn, np_)
            stats = fit_statistics(train, pattern)
            est = mmse_batch(test, pattern, stats)
        else:
            source, window, stage = LEARNED_METHODS[method]
            if stage == "pipeline":
                path = pipeline_path(config, source, window, np_)
                if not path.exists():
                    raise MissingArtifactError(f"{method}: checkpoint {path} not found")
                pipeline, _ = load_pipeline(path)
                est, _ = estimate_batch(pipeline, test.noisy)
            else:
                path = decoder_path(config, source, window, np_)
                if not path.exists():
                    raise MissingArtifactError(f"{method}: checkpoint {path} not found")
                decoder, pattern = load_decoder(path)
                est = decoder_estimates(test, pattern, decoder)
        rows += rows_by_snr(method, np_, est, test)
    return rows


def cmd_eval(config: ExperimentConfig) -> Path:
    """Evaluate every method over the test split; writes reports/report.csv."""
    test = load_split(config, "test")
    train = load_split(config, "train")
    rows = []
    for np_ in sorted(set(config.np_list) | set(config.np_sweep)):
        rows += evaluate_np(config, np_, test, train)
    path = report_path(config)
    write_report(path, rows)
    log.info("wrote %s (%d rows)", path, len(rows))
    return path


def write_report(path: Path, rows: list[ReportRow]):
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.method, r.np, f"{r.snr_db:g}", f"{r.mse_raw:.8e}", f"{r.mse_norm:.8e}", r.frames])
    path.write_text(buf.getvalue())


class ReportFormatError(ValueError):
    pass


def read_report(path: str | Path) -> list[ReportRow]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != REPORT_COLUMNS:
                raise ReportFormatError(f"{path}: header must be {','.join(REPORT_COLUMNS)}")
            rows = []
            for lineno, rec in enumerate(reader, 2):
                if len(rec) != len(REPORT_COLUMNS):
                    raise ReportFormatError(f"{path}:{lineno}: expected {len(REPORT_COLUMNS)} fields")
                try:
                    rows.append(ReportRow(rec[0], int(rec[1]), float(rec[2]), float(rec[3]), float(rec[4]),
                                          int(rec[5])))
                except ValueError as e:
                    raise ReportFormatError(f"{path}:{lineno}: {e}") from e
    except OSError as e:
        raise MissingArtifactError(f"cannot read report {path}: {e}") from e
    return rows


def cmd_report(csv_path: str | Path, out_dir: str | Path, sweep_snr_db: float = 15.0,
               patterns: list[str | Path] = ()) -> list[Path]:
    """Per-figure data files: MSE vs SNR per (np, method), MSE vs np at ``sweep_snr_db``, pattern renders."""
    rows = read_report(csv_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    by_np_method = defaultdict(list)
    for r in rows:
        by_np_method[(r.np, r.method)].append(r)
    for (np_, method), rs in sorted(by_np_method.items()):
        path = out / f"mse_vs_snr_np{np_}_{method}.dat"
        lines = [f"# method={method} np={np_}", "# snr_db mse_raw mse_norm frames"]
        lines += [f"{r.snr_db:g} {r.mse_raw:.8e} {r.mse_norm:.8e} {r.frames}" for r in sorted(rs, key=lambda r: r.snr_db)]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    by_method = defaultdict(list)
    for r in rows:
        if r.snr_db == sweep_snr_db:
            by_method[r.method].append(r)
    for method, rs in sorted(by_method.items()):
        if len({r.np for r in rs}) < 2:
            continue
        path = out / f"mse_vs_np_snr{sweep_snr_db:g}_{method}.dat"
        lines = [f"# method={method} snr_db={sweep_snr_db:g}", "# np mse_raw mse_norm frames"]
        lines += [f"{r.np} {r.mse_raw:.8e} {r.mse_norm:.8e} {r.frames}" for r in sorted(rs, key=lambda r: r.np)]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    for p in patterns:
        pattern = PilotPattern.load(p)
        path = out / f"render_{Path(p).stem}.txt"
        path.write_text(f"# {Path(p).name}: {pattern.nf}x{pattern.nn}, {pattern.k} pilots "
                        f"(rows = subcarriers, columns = time slots)\n" + pattern.render())
        written.append(path)
    return written
