"""Protocol grid runner: {simclr, mae} x label ratios x {with, without
pretraining} x seeds, with resumable on-disk records, report tables, curve
files and pretraining timings.

Layout under the output directory::

    pretrain/<model>/<seed>/encoder.npz      encoder checkpoint
    pretrain/<model>/<seed>/loss.csv         epoch,loss
    pretrain/<model>/<seed>/pretrain.json    timing + loss history
    runs/<model>/<ratio>/<flag>/<seed>/record.json
    report.csv, curves/, curves_summary.csv, timing.txt
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import data as D
from . import nn
from .contrastive import ContrastiveConfig, PretrainResult, pretrain_contrastive
from .errors import ConfigError, TsSSLError
from .evaluate import METRIC_NAMES, FinetuneConfig, MetricsReport, aggregate_seeds, evaluate, finetune
from .generative import MaeConfig, pretrain_generative

log = logging.getLogger(__name__)

MODELS = ("simclr", "mae")
FLAGS = {True: "with", False: "without"}
REPORT_COLUMNS = ["Model", "Ratio", "Pretrain", "Accuracy", "Precision", "Recall", "F1", "AUROC", "AUPRC"]
MODEL_LABELS = {"simclr": "SimCLR", "mae": "MAE"}


# --- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" | "csv"
    synthetic: D.SynthConfig = field(default_factory=D.SynthConfig)
    csv_path: Optional[str] = None
    channels: int = 3
    length: int = 200
    n_classes: Optional[int] = None
    split: D.SplitSpec = field(default_factory=D.SplitSpec)
    split_seed: int = 0
    normalize: bool = True
    balance: bool = True

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            raise ConfigError("data.csv_path is required when data.source is 'csv'")


@dataclass(frozen=True)
class SimclrSettings:
    temperature: float = 0.5
    jitter_sigma: float = 1.0
    use_projection_head: bool = True
    projection_dim: int = 64
    anchors: str = "all"


@dataclass(frozen=True)
class MaeSettings:
    mask_ratio: float = 0.75
    decoder_blocks: int = 1
    loss_scope: str = "masked_only"
    mask_token_std: float = 0.02


@dataclass(frozen=True)
class FinetuneSettings:
    epochs: int = 30
    low_ratio_epochs: int = 100
    low_ratio_threshold: float = 0.01
    batch_size: int = 128
    lr: float = 1e-3
    train_encoder: bool = True

    def epochs_for(self, ratio: float) -> int:
        return self.low_ratio_epochs if ratio <= self.low_ratio_threshold + 1e-12 else self.epochs


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    models: tuple = MODELS
    label_ratios: tuple = (0.01, 0.1, 0.3, 0.5, 1.0)
    pretrain: str = "both"  # "on" | "off" | "both"
    seeds: tuple = (41, 42, 43, 44, 45)
    pretrain_epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    arch: nn.ArchConfig = field(default_factory=nn.ArchConfig)
    simclr: SimclrSettings = field(default_factory=SimclrSettings)
    mae: MaeSettings = field(default_factory=MaeSettings)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "label_ratios", tuple(float(r) for r in self.label_ratios))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.models or any(m not in MODELS for m in self.models):
            raise ConfigError(f"models must be a non-empty subset of {MODELS}")
        if not self.label_ratios or any(not 0.0 < r <= 1.0 for r in self.label_ratios):
            raise ConfigError("label_ratios must be non-empty and each in (0, 1]")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.pretrain not in ("on", "off", "both"):
            raise ConfigError("pretrain must be 'on', 'off' or 'both'")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")
        # nested model configs validate themselves
        self.contrastive_config()
        self.mae_config()
        self.finetune_config(self.label_ratios[0])

    @property
    def flags(self) -> tuple:
        return {"on": (True,), "off": (False,), "both": (True, False)}[self.pretrain]

    def contrastive_config(self) -> ContrastiveConfig:
        return ContrastiveConfig(epochs=self.pretrain_epochs, batch_size=self.batch_size, lr=self.lr,
                                 arch=self.arch, **asdict(self.simclr))

    def mae_config(self) -> MaeConfig:
        return MaeConfig(epochs=self.pretrain_epochs, batch_size=self.batch_size, lr=self.lr,
                         arch=self.arch, **asdict(self.mae))

    def finetune_config(self, ratio: float) -> FinetuneConfig:
        ft = self.finetune
        return FinetuneConfig(epochs=ft.epochs_for(ratio), batch_size=ft.batch_size, lr=ft.lr,
                              train_encoder=ft.train_encoder, label_ratio=ratio)

    def cells(self) -> list:
        return [(m, r, f, s) for m in self.models for r in self.label_ratios for f in self.flags for s in self.seeds]

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in raw.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def desk_config(**overrides) -> ExperimentConfig:
    """Small synthetic setting used by the acceptance suite.

    360 pretraining samples (6 classes x 60), model width 64, 30 pretraining
    epochs, batch 64, label ratios 0.01 and 0.1.
    """
    base = ExperimentConfig(
        data=DataConfig(synthetic=D.SynthConfig(n_per_class=104, noise_std=0.5, seed=0)),
        label_ratios=(0.01, 0.1),
        pretrain_epochs=30,
        batch_size=64,
        finetune=FinetuneSettings(batch_size=64),
    )
    return replace(base, **overrides)


# --- data ------------------------------------------------------------------

@dataclass(frozen=True)
class PreparedData:
    pretrain: D.Dataset  # normalised, balanced
    valid: D.Dataset
    test: D.Dataset
    stats: Optional[D.NormalizationStats]


def prepare_data(cfg: DataConfig) -> PreparedData:
    """Load, split, z-score with pretraining-split statistics, balance pretraining split."""
    if cfg.source == "synthetic":
        s = cfg.synthetic
        full = D.synth_generate(s.n_per_class, s.n_classes, s.c, s.d, s.noise_std, s.seed, s.base_freq, s.phase_jitter)
    else:
        full = D.load_csv(cfg.csv_path, D.CsvSchema(cfg.channels, cfg.length, "label", cfg.n_classes))
    pre, valid, test = D.stratified_split(full, cfg.split, cfg.split_seed)
    stats = None
    if cfg.normalize:
        stats = D.compute_stats(pre)
        pre, valid, test = (D.zscore_normalize(x, stats) for x in (pre, valid, test))
    if cfg.balance:
        pre = D.balance_upsample(pre, cfg.split_seed)
    return PreparedData(pre, valid, test, stats)


# --- records ---------------------------------------------------------------

def ratio_key(ratio: float) -> str:
    return f"{ratio:g}"


@dataclass
class RunRecord:
    model: str
    ratio: float
    pretrain: bool
    seed: int
    metrics: Optional[MetricsReport] = None
    pretrain_seconds: Optional[float] = None
    pretrain_epochs: int = 0
    finetune_seconds: Optional[float] = None
    f1_curve: list = field(default_factory=list)
    loss_curve: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    status: str = "ok"
    error: Optional[str] = None

    @property
    def key(self) -> tuple:
        return (self.model, self.ratio, self.pretrain, self.seed)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = None if self.metrics is None else self.metrics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        if d.get("metrics") is not None:
            d["metrics"] = MetricsReport.from_dict(d["metrics"])
        return cls(**d)


def record_path(out: Path, model: str, ratio: float, pretrain: bool, seed: int) -> Path:
    return out / "runs" / model / ratio_key(ratio) / FLAGS[pretrain] / str(seed) / "record.json"


def pretrain_dir(out: Path, model: str, seed: int) -> Path:
    return out / "pretrain" / model / str(seed)


def load_records(out: Union[str, Path]) -> list:
    out = Path(out)
    records = []
    for p in sorted((out / "runs").glob("*/*/*/*/record.json")):
        records.append(RunRecord.from_dict(json.loads(p.read_text(encoding="utf-8"))))
    return records


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")
    tmp.replace(path)


def write_curve_csv(path: Union[str, Path], values: Sequence[float], column: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", column])
        for i, v in enumerate(values):
            w.writerow([i, repr(float(v))])
    return path


# --- running ---------------------------------------------------------------

def run_pretraining(model: str, data: D.Dataset, config: ExperimentConfig, seed: int) -> PretrainResult:
    if model == "simclr":
        return pretrain_contrastive(data, config.contrastive_config(), seed)
    return pretrain_generative(data, config.mae_config(), seed)


def ensure_pretrained(out: Path, model: str, seed: int, config: ExperimentConfig, data: PreparedData) -> tuple:
    """Load the (model, seed) encoder from disk, training and saving it first if absent."""
    d = pretrain_dir(out, model, seed)
    meta_path = d / "pretrain.json"
    if meta_path.exists() and (d / "encoder.npz").exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        return nn.ParameterSet.load(d / "encoder.npz"), meta
    log.info("pretraining %s seed %d", model, seed)
    res = run_pretraining(model, data.pretrain, config, seed)
    res.encoder.save(d / "encoder.npz")
    write_curve_csv(d / "loss.csv", res.loss_history, "loss")
    meta = {"model": model, "seed": seed, "seconds": res.seconds, "epochs": len(res.loss_history),
            "best_epoch": res.best_epoch, "loss_history": res.loss_history}
    _write_json(meta_path, meta)
    return res.encoder, meta


def run_cell(out: Path, cell: tuple, config: ExperimentConfig, data: PreparedData) -> RunRecord:
    """Fine-tune and test one grid cell; errors are captured in the record."""
    model, ratio, flag, seed = cell
    rec = RunRecord(model, ratio, flag, seed)
    try:
        arch = config.arch
        if flag:
            encoder, meta = ensure_pretrained(out, model, seed, config, data)
            rec.pretrain_seconds, rec.pretrain_epochs = meta["seconds"], meta["epochs"]
        else:
            encoder = nn.init_params(arch.encoder(data.pretrain.n_channels), seed)
        labeled = D.label_ratio_subset(data.pretrain, ratio, seed)
        ft = finetune(encoder, labeled, data.valid, config.finetune_config(ratio), seed, arch)
        rec.metrics = evaluate(ft.encoder, ft.classifier, data.test, arch)
        rec.finetune_seconds = ft.seconds
        rec.f1_curve, rec.loss_curve, rec.best_epoch = ft.f1_history, ft.loss_history, ft.best_epoch
    except TsSSLError as exc:
        log.warning("cell %s failed: %s", cell, exc)
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
    _write_json(record_path(out, *cell), rec.to_dict())
    return rec


def _pretrain_job(args):
    out, model, seed, config = args
    ensure_pretrained(Path(out), model, seed, config, prepare_data(config.data))
    return model, seed


def _cell_job(args):
    out, cell, config = args
    return run_cell(Path(out), cell, config, prepare_data(config.data))


def run_experiment(config: ExperimentConfig, out: Union[str, Path], workers: int = 1) -> list:
    """Run every pending grid cell and return all records in grid order.

    Cells with a successful ``record.json`` on disk are skipped; one
    pretraining run per (model, seed) is shared by every "with" cell.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    done = {}
    for cell in config.cells():
        p = record_path(out, *cell)
        if p.exists():
            rec = RunRecord.from_dict(json.loads(p.read_text(encoding="utf-8")))
            if rec.ok:
                done[cell] = rec
    pending = [c for c in config.cells() if c not in done]
    if pending:
        need = sorted({(m, s) for m, _, f, s in pending if f}, key=lambda ms: (config.models.index(ms[0]), ms[1]))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_pretrain_job, [(str(out), m, s, config) for m, s in need]))
                for rec in pool.map(_cell_job, [(str(out), c, config) for c in pending]):
                    done[rec.key] = rec
        else:
            data = prepare_data(config.data)
            for m, s in need:
                try:
                    ensure_pretrained(out, m, s, config, data)
                except TsSSLError as exc:  # the affected cells record the failure
                    log.warning("pretraining %s seed %d failed: %s", m, s, exc)
            for cell in pending:
                done[cell] = run_cell(out, cell, config, data)
    return [done[c] for c in config.cells()]


# --- outputs ---------------------------------------------------------------

def _group_order(records: Sequence[RunRecord]) -> list:
    models = [m for m in MODELS if any(r.model == m for r in records)]
    models += sorted({r.model for r in records} - set(models))
    groups = []
    for m in models:
        for ratio in sorted({r.ratio for r in records if r.model == m}):
            for flag in (True, False):
                if any(r.model == m and r.ratio == ratio and r.pretrain == flag for r in records):
                    groups.append((m, ratio, flag))
    return groups


def aggregate_records(records: Sequence[RunRecord]) -> list:
    """``[(model, ratio, flag, MetricsReport)]`` over successful records, with before without."""
    ok = [r for r in records if r.ok and r.metrics is not None]
    rows = []
    for m, ratio, flag in _group_order(ok):
        reps = [r.metrics for r in sorted(ok, key=lambda r: r.seed)
                if (r.model, r.ratio, r.pretrain) == (m, ratio, flag)]
        rows.append((m, ratio, flag, aggregate_seeds(reps)))
    return rows


def fmt_mean_std(mean: float, std: float) -> str:
    return f"{mean!r}±{std!r}"


def emit_report(records: Sequence[RunRecord], path: Union[str, Path]) -> Path:
    """Results table CSV: one row per (model, ratio, pretrain flag), ``mean±std`` cells."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for m, ratio, flag, rep in aggregate_records(records):
            cells = [fmt_mean_std(getattr(rep, k), rep.std[k]) for k in METRIC_NAMES]
            w.writerow([MODEL_LABELS.get(m, m), ratio_key(ratio), "w" if flag else "w/o"] + cells)
    return path


def read_report(path: Union[str, Path]) -> list:
    """Rows of a report CSV with ``mean±std`` cells split into float pairs."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            parsed = dict(row)
            for col in REPORT_COLUMNS[3:]:
                mean, std = row[col].split("±")
                parsed[col] = (float(mean), float(std))
            rows.append(parsed)
    return rows


def emit_curves(records: Sequence[RunRecord], out_dir: Union[str, Path]) -> Path:
    """Per-run ``epoch,f1`` validation curves plus ``curves_summary.csv``.

    The summary's ``mean_f1`` is the mean test F1 over seeds, identical to the
    report's F1 mean.
    """
    out_dir = Path(out_dir)
    for r in records:
        if r.ok:
            name = f"{r.model}_r{ratio_key(r.ratio)}_{FLAGS[r.pretrain]}_s{r.seed}.csv"
            write_curve_csv(out_dir / "curves" / name, r.f1_curve, "f1")
    summary = out_dir / "curves_summary.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "model", "pretrain", "mean_f1"])
        for m, ratio, flag, rep in aggregate_records(records):
            w.writerow([ratio_key(ratio), m, FLAGS[flag], repr(rep.f1)])
    return summary


@dataclass
class TimingSummary:
    seconds: dict  # model -> mean pretraining wall-clock over seeds
    seconds_per_epoch: dict
    mae_over_simclr: Optional[float]
    missing: list

    @property
    def mae_faster_fraction(self) -> Optional[float]:
        return None if self.mae_over_simclr is None else 1.0 - self.mae_over_simclr

    def text(self) -> str:
        lines = []
        for m in MODELS:
            if m in self.seconds:
                lines.append(f"{MODEL_LABELS[m]} pretraining: {self.seconds[m]:.3f} s "
                             f"({self.seconds_per_epoch[m]:.4f} s/epoch)")
            else:
                lines.append(f"{MODEL_LABELS[m]} pretraining: not run")
        if self.mae_over_simclr is not None:
            lines.append(f"MAE/SimCLR time ratio: {self.mae_over_simclr:.4f} "
                         f"(MAE {100 * self.mae_faster_fraction:.1f}% faster)")
        return "\n".join(lines) + "\n"


def compare_pretraining_seconds(mae_seconds: float, simclr_seconds: float) -> float:
    """Fraction of SimCLR's pretraining time saved by MAE."""
    return 1.0 - mae_seconds / simclr_seconds


def time_pretraining(records: Sequence[RunRecord]) -> TimingSummary:
    per_model: dict = {}
    for r in records:
        if r.pretrain and r.pretrain_seconds is not None:
            per_model.setdefault(r.model, {})[r.seed] = (r.pretrain_seconds, r.pretrain_epochs)
    seconds, per_epoch = {}, {}
    for m, runs in per_model.items():
        secs = [s for s, _ in runs.values()]
        seconds[m] = float(np.mean(secs))
        per_epoch[m] = float(np.mean([s / e for s, e in runs.values() if e])) if any(e for _, e in runs.values()) else math.nan
    missing = [m for m in MODELS if m not in seconds]
    ratio = seconds["mae"] / seconds["simclr"] if not missing else None
    return TimingSummary(seconds, per_epoch, ratio, missing)


def write_outputs(records: Sequence[RunRecord], out: Union[str, Path]) -> dict:
    out = Path(out)
    paths = {"report": emit_report(records, out / "report.csv"), "curves": emit_curves(records, out)}
    timing = time_pretraining(records)
    (out / "timing.txt").write_text(timing.text(), encoding="utf-8")
    paths["timing"] = out / "timing.txt"
    return paths
