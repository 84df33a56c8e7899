"""Multi-trial augmentation experiments with resumable, deterministic reports.

An experiment spec (YAML) looks like::

    name: low-data-nlos
    seed: 0
    env: {n_ap: 6, n_rx: 2, los_enabled: false, n_subcarriers: 64, noise_variance: 1.0e-8, seed: 1}
    n_points: 1100            # random UE positions sampled from env
    noise: true
    # dataset: path/to/file.csia   (instead of env/n_points)
    split: {scheme: random, sizes: [500, 100, 500]}   # or fractions: [...]
                                                      # or scheme: spatial-center / spatial-side
    original_size: 100
    methods: [corr, pdp1, pdp2, pdp3, pdp4]
    factors: [0, 31]
    trials: 5
    augment: {p_star: 1.0, delta_star: null, cell_spacing: 1.0, snr_db: 15.0}
    mlp: {hidden_layers: 3, hidden_width: 128, dropout_p: 0.2, feature_extractor_depth: 2}
    train: {epochs: 50, learning_rate: 1.0e-4, weight_decay: 1.0e-5, batch_size: 32}

Trial ``t`` derives all its randomness from ``RngStream(seed, (t,))``. The
factor-0 baseline is trained once per trial and reported as method
``none``. Completed cells are appended to ``cells.jsonl`` so an interrupted
run picks up where it stopped; ``report.csv`` is rewritten sorted at the end.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import dataset as dio
from .augment import ALL_METHODS, ORIGIN_OF, augment_dataset
from .core import RngStream
from .learner import (
    MlpConfig,
    TrainConfig,
    augment_selected,
    evaluate_rmse,
    feature_dim,
    rank_difficulty,
    train,
    transfer,
)
from .synth import EnvConfig, build_environment, make_dataset

log = logging.getLogger(__name__)

BASELINE = "none"
REPORT_FIELDS = ["method", "factor", "trial", "rmse_m", "n_train", "status"]


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    seed: int = 0
    env: dict | None = None
    n_points: int = 1000
    noise: bool = True
    dataset: str | None = None
    split: dict = field(default_factory=lambda: {"scheme": "random", "fractions": [0.8, 0.1, 0.1]})
    original_size: int | None = None
    methods: list = field(default_factory=lambda: list(ALL_METHODS[:-1]))
    factors: list = field(default_factory=lambda: [0, 3, 7, 15, 31])
    trials: int = 5
    augment: dict = field(default_factory=dict)
    mlp: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        problems = []
        if self.trials < 1:
            problems.append("trials must be >= 1")
        if 0 not in self.factors:
            problems.append("factors must include 0 (the no-augmentation baseline)")
        if any(int(f) != f or f < 0 for f in self.factors):
            problems.append("factors must be non-negative integers")
        for m in self.methods:
            if m not in ALL_METHODS:
                problems.append(f"unknown method {m!r}")
        if self.env is None and self.dataset is None:
            problems.append("spec needs either env or dataset")
        if self.original_size is not None and self.original_size < 1:
            problems.append("original_size must be >= 1")
        if problems:
            raise SpecError("; ".join(problems))
        self.factors = sorted({int(f) for f in self.factors})

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> ExperimentSpec:
        d = yaml.safe_load(Path(path).read_text()) or {}
        spec = cls.from_dict(d)
        if spec.dataset and not Path(spec.dataset).is_absolute():
            spec.dataset = str((Path(path).parent / spec.dataset).resolve())
        return spec

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def mlp_config(self, input_dim: int) -> MlpConfig:
        return MlpConfig(input_dim, **self.mlp)

    def env_config(self) -> EnvConfig:
        return EnvConfig.from_dict(self.env)


# ---------------------------------------------------------------------------
# Data preparation


def load_source(spec: ExperimentSpec) -> dio.Dataset:
    if spec.dataset:
        return dio.load(spec.dataset)
    env = build_environment(spec.env_config())
    return make_dataset(env, ("random", spec.n_points), spec.noise, RngStream(spec.seed, (1_000_000,)))


def make_split(spec: ExperimentSpec, data: dio.Dataset) -> dio.SplitManifest:
    s = dict(spec.split)
    scheme = s.pop("scheme", "random")
    if scheme == "random":
        if "sizes" in s:
            sizes = [int(v) for v in s.pop("sizes")]
            if sum(sizes) > len(data):
                raise SpecError(f"split sizes {sizes} exceed dataset size {len(data)}")
            fractions = [v / len(data) for v in sizes]
        else:
            fractions = s.pop("fractions", [0.8, 0.1, 0.1])
        return dio.split_random(len(data), fractions, s.pop("seed", spec.seed))
    if scheme in ("spatial-center", "spatial-side"):
        return dio.split_spatial(
            data,
            "center" if scheme == "spatial-center" else "side",
            fraction=s.pop("fraction", 1.0 / 3.0),
            side=s.pop("side", "low"),
            val_fraction=s.pop("val_fraction", 0.1),
            seed=s.pop("seed", spec.seed),
        )
    raise SpecError(f"unknown split scheme {scheme!r}")


@dataclass
class PreparedData:
    data: dio.Dataset
    manifest: dio.SplitManifest

    @property
    def val(self) -> dio.Dataset:
        return self.data.subset(self.manifest.val)

    @property
    def test(self) -> dio.Dataset:
        return self.data.subset(self.manifest.test)

    def measured_train(self, trial_stream: RngStream, original_size: int | None) -> dio.Dataset:
        """Seeded subset of the train split; sizes within a trial are nested prefixes."""
        pool = self.manifest.train
        perm = trial_stream.derive(0).generator().permutation(pool.size)
        k = pool.size if original_size is None else original_size
        if k > pool.size:
            raise SpecError(f"original_size {k} exceeds the train split ({pool.size})")
        return self.data.subset(np.sort(pool[perm[:k]]))


def prepare(spec: ExperimentSpec) -> PreparedData:
    data = load_source(spec)
    manifest = make_split(spec, data)
    manifest.check_bounds(len(data))
    return PreparedData(data, manifest)


def _aug_params(spec: ExperimentSpec) -> dict:
    a = dict(spec.augment)
    out = {}
    for key in ("p_star", "delta_star", "cell_spacing", "snr_db"):
        if a.get(key) is not None:
            out[key] = a[key]
    return out


def run_cell(spec: ExperimentSpec, prep: PreparedData, method: str, factor: int, trial: int) -> dict:
    """Augment, train and evaluate one ``(method, factor, trial)`` cell."""
    ts = RngStream(spec.seed, (trial,))
    measured = prep.measured_train(ts, spec.original_size)
    if factor == 0:
        train_set = measured
    else:
        train_set = augment_dataset(
            measured, method, factor, ts.derive(1, int(ORIGIN_OF[method]), factor), **_aug_params(spec)
        )
    meta = measured.meta
    mlp = spec.mlp_config(feature_dim(meta.n_subcarriers, meta.n_ap, meta.n_rx))
    model, _ = train(train_set, prep.val, mlp, spec.train_config(ts.derive(2).seed_int()))
    return {
        "method": method,
        "factor": factor,
        "trial": trial,
        "rmse_m": evaluate_rmse(model, prep.test),
        "n_train": len(train_set),
        "status": "ok",
    }


# ---------------------------------------------------------------------------
# Reports


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class Report:
    rows: list
    spec: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def sorted_rows(self) -> list:
        return sorted(self.rows, key=lambda r: (r["method"], int(r["factor"]), int(r["trial"])))

    def aggregate(self) -> list:
        """Per (method, factor): mean, min, max, std of RMSE over trials.

        Every method's factor-0 entry references the shared baseline rows.
        """
        groups: dict = {}
        ok = [r for r in self.rows if r["status"] == "ok"]
        base = [r for r in ok if r["method"] == BASELINE]
        methods = sorted({r["method"] for r in ok if r["method"] != BASELINE})
        for r in ok:
            if r["method"] != BASELINE:
                groups.setdefault((r["method"], int(r["factor"])), []).append(r)
        if base:
            for m in [BASELINE] + methods:
                groups[(m, 0)] = base
        out = []
        for (m, f), rs in sorted(groups.items()):
            vals = np.array([float(r["rmse_m"]) for r in sorted(rs, key=lambda r: int(r["trial"]))])
            out.append(
                {
                    "method": m,
                    "factor": f,
                    "n_trials": int(vals.size),
                    "mean_rmse_m": math.fsum(vals) / vals.size,
                    "min_rmse_m": float(np.min(vals)),
                    "max_rmse_m": float(np.max(vals)),
                    "std_rmse_m": float(np.std(vals)),
                    "per_trial": [float(v) for v in vals],
                }
            )
        return out

    def mean(self, method: str, factor: int) -> float:
        for a in self.aggregate():
            if a["method"] == method and a["factor"] == factor:
                return a["mean_rmse_m"]
        raise KeyError((method, factor))

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.sorted_rows():
            row = dict(r)
            row["rmse_m"] = _fmt(row["rmse_m"])
            w.writerow({k: row[k] for k in REPORT_FIELDS})
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.csv_text())
        summary = {"spec": self.spec, "results": self.aggregate(), "runtime": self.meta}
        (out / "summary.yaml").write_text(yaml.safe_dump(summary, sort_keys=False))


class _Progress:
    """Append-only JSON-lines log of finished cells, guarded for concurrent writers."""

    def __init__(self, path: Path, digest: str):
        self.path = path
        self.digest = digest
        self.lock = threading.Lock()

    def load(self) -> dict:
        done = {}
        if not self.path.exists():
            return done
        for line in self.path.read_text().splitlines():
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                # partial last line from an interrupted write
                continue
            if rec.get("spec") != self.digest:
                continue
            row = rec["row"]
            done[(row["method"], int(row["factor"]), int(row["trial"]))] = row
        return done

    def append(self, row: dict) -> None:
        line = json.dumps({"spec": self.digest, "row": row}) + "\n"
        with self.lock:
            with open(self.path, "a") as f:
                f.write(line)
                f.flush()


def experiment_cells(spec: ExperimentSpec) -> list:
    cells = []
    for t in range(spec.trials):
        cells.append((BASELINE, 0, t))
        for m in spec.methods:
            for f in spec.factors:
                if f:
                    cells.append((m, f, t))
    return cells


def run_experiment(spec: ExperimentSpec, out_dir, threads: int = 1, resume: bool = True, max_cells: int | None = None) -> Report:
    """Run every cell not already recorded in ``out_dir/cells.jsonl`` and write the report.

    ``max_cells`` stops after that many new cells (used to exercise resume).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    progress = _Progress(out / "cells.jsonl", spec.digest())
    done = progress.load() if resume else {}
    if not resume and progress.path.exists():
        progress.path.unlink()
    todo = [c for c in experiment_cells(spec) if c not in done]
    if max_cells is not None:
        todo = todo[:max_cells]
    prep = prepare(spec) if todo else None

    def job(cell):
        m, f, t = cell
        try:
            row = run_cell(spec, prep, m, f, t)
        except Exception as exc:  # recorded per cell; other cells continue
            log.exception("cell %s failed", cell)
            row = {"method": m, "factor": f, "trial": t, "rmse_m": math.nan, "n_train": 0, "status": f"error: {exc}"}
        progress.append(row)
        return row

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            new_rows = list(pool.map(job, todo))
    else:
        new_rows = [job(c) for c in todo]
    for r in new_rows:
        done[(r["method"], int(r["factor"]), int(r["trial"]))] = r
    report = Report(
        list(done.values()),
        spec.to_dict(),
        {
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "elapsed_s": round(time.time() - started, 3),
            "threads": threads,
            "cells_run": len(new_rows),
            "cells_total": len(experiment_cells(spec)),
        },
    )
    report.write(out)
    return report


# ---------------------------------------------------------------------------
# Hard / easy sample selection


def run_hard_easy(
    spec: ExperimentSpec,
    rhos=(0.5, 0.25),
    method: str = "pdp2",
    out_dir=None,
) -> Report:
    """Compare augmenting only the hardest vs only the easiest samples.

    Per trial a model is trained on the measured subset to obtain average
    per-sample losses. For each ``rho`` the top ``ceil(N * rho)`` samples
    (hard) or the same number of lowest-loss samples (easy) each receive
    ``round(1 / rho)`` augmented copies. Rows use methods ``hard-<rho>`` and
    ``easy-<rho>`` with factor ``round(1 / rho)``.
    """
    prep = prepare(spec)
    rows = []
    for t in range(spec.trials):
        ts = RngStream(spec.seed, (t,))
        measured = prep.measured_train(ts, spec.original_size)
        meta = measured.meta
        mlp = spec.mlp_config(feature_dim(meta.n_subcarriers, meta.n_ap, meta.n_rx))
        tcfg = spec.train_config(ts.derive(2).seed_int())
        _, trace = train(measured, prep.val, mlp, tcfg)
        for rho in rhos:
            hard, easy = rank_difficulty(trace, rho)
            k = hard.size
            for arm, idx in (("hard", hard), ("easy", easy[:k])):
                d = augment_selected(
                    measured, idx, method, rho, ts.derive(3, int(ORIGIN_OF[method])), **_aug_params(spec)
                )
                model, _ = train(d, prep.val, mlp, tcfg)
                rows.append(
                    {
                        "method": f"{arm}-{rho:g}",
                        "factor": int(round(1 / rho)),
                        "trial": t,
                        "rmse_m": evaluate_rmse(model, prep.test),
                        "n_train": len(d),
                        "status": "ok",
                    }
                )
    report = Report(rows, spec.to_dict(), {"scenario": "hard-easy", "method": method, "rhos": list(rhos)})
    if out_dir is not None:
        report.write(out_dir)
    return report


# ---------------------------------------------------------------------------
# Transfer learning


def run_transfer(
    source_spec: ExperimentSpec,
    target_spec: ExperimentSpec,
    mode: str = "full",
    factors=(0, 31),
    method: str = "pdp2",
    out_dir=None,
    source_model=None,
) -> Report:
    """Source-only, target-only and transferred models evaluated on the target test split.

    Rows: ``source-only`` (factor 0), ``target-only`` and ``transfer-<mode>``
    for every target augmentation factor.
    """
    src = prepare(source_spec)
    tgt = prepare(target_spec)
    if src.data.meta.shape != tgt.data.meta.shape:
        raise ValueError("source and target datasets have different dimensions")
    meta = tgt.data.meta
    rows = []
    for t in range(target_spec.trials):
        ts = RngStream(target_spec.seed, (t,))
        mlp = target_spec.mlp_config(feature_dim(meta.n_subcarriers, meta.n_ap, meta.n_rx))
        tcfg = target_spec.train_config(ts.derive(2).seed_int())
        if source_model is None:
            s_ts = RngStream(source_spec.seed, (t,))
            s_train = src.measured_train(s_ts, source_spec.original_size)
            s_model, _ = train(s_train, src.val, mlp, source_spec.train_config(s_ts.derive(2).seed_int()))
        else:
            s_model = source_model
        measured = tgt.measured_train(ts, target_spec.original_size)
        rows.append(_row("source-only", 0, t, evaluate_rmse(s_model, tgt.test), 0))
        for f in factors:
            d = measured
            if f:
                d = augment_dataset(measured, method, f, ts.derive(1, int(ORIGIN_OF[method]), f), **_aug_params(target_spec))
            scratch, _ = train(d, tgt.val, mlp, tcfg)
            rows.append(_row("target-only", f, t, evaluate_rmse(scratch, tgt.test), len(d)))
            tuned, _ = transfer(s_model, d, tgt.val, mode, tcfg)
            rows.append(_row(f"transfer-{mode}", f, t, evaluate_rmse(tuned, tgt.test), len(d)))
    report = Report(rows, {"source": source_spec.to_dict(), "target": target_spec.to_dict()}, {"scenario": "transfer", "mode": mode, "method": method})
    if out_dir is not None:
        report.write(out_dir)
    return report


def _row(method, factor, trial, value, n_train):
    return {"method": method, "factor": int(factor), "trial": int(trial), "rmse_m": float(value), "n_train": int(n_train), "status": "ok"}
