"""Config-driven experiment pipeline: generate -> train -> evaluate -> attack -> report.

Each stage reads the YAML config plus the previous stage's artifacts from the
output directory, writes its own artifacts, and records a run manifest
(config hash, seeds, paths, wall-clock). Metric CSVs are byte-reproducible
for a fixed config and build; the report stage only renders what evaluate
and attack already computed.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__, adversarial, dataset, ensemble, nncore, siggen, uqmetrics
from .adversarial import AttackConfig
from .ensemble import CIConfig, EnsembleModel
from .errors import ConfigError, MissingArtifactError
from .nncore import ModelParams, TrainConfig
from .seeding import derive_seed
from .uqmetrics import ECEConfig, MetricsReport, ScoredBatch

SCHEMA_VERSION = 1
SYSTEMS = ("standalone", "equal_ensemble", "weighted_ensemble")

# seed namespace tags (root seed -> per-component seeds)
_TAG_DATASET = 101
_TAG_SPLIT = 102
_TAG_STANDALONE_INIT = 103
_TAG_STANDALONE_SHUFFLE = 104
_TAG_EQUAL_MASTER = 105
_TAG_WEIGHTED_MASTER = 106


@dataclass
class ExperimentConfig:
    seed: int
    schemes: list[str]
    snr_grid_db: list[float]
    frames_per_cell: int
    frame_length: int
    fading: str
    test_fraction: float
    architecture: str
    precision: str
    epochs: int
    batch_size: int
    learning_rate: float
    ensemble_size: int
    systems: list[str]
    alpha: float
    ece_bins: int
    surrogate_member: int
    fixed_pnr_db: float
    attack_snr_db: float
    pnr_grid_db: list[float]
    save_perturbed: bool
    workers: int
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def ci_config(self) -> CIConfig:
        return CIConfig(alpha=self.alpha)

    @property
    def ece_config(self) -> ECEConfig:
        return ECEConfig(bin_count=self.ece_bins)

    def train_config(self, shuffle_seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            shuffle_seed=shuffle_seed,
        )

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True).encode("utf-8")
        ).hexdigest()


def _get(raw: dict, section: str, key: str, default, kind):
    value = raw.get(section, {}).get(key, default)
    if value is None:
        raise ConfigError(f"missing config key {section}.{key}")
    try:
        if kind is list:
            return list(value)
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {section}.{key}: {value!r}") from exc


_KNOWN_TOP = {
    "schema_version",
    "seed",
    "dataset",
    "split",
    "model",
    "train",
    "ensemble",
    "systems",
    "ci",
    "ece",
    "attack",
    "workers",
}


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - _KNOWN_TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}"
        )
    if "seed" not in raw:
        raise ConfigError("missing config key: seed")

    systems = raw.get("systems") or []
    if not systems or any(s not in SYSTEMS for s in systems):
        raise ConfigError(f"systems must be a nonempty subset of {SYSTEMS}")

    cfg = ExperimentConfig(
        seed=int(raw["seed"]),
        schemes=_get(raw, "dataset", "schemes", list(siggen.DEFAULT_SCHEME_NAMES), list),
        snr_grid_db=[float(v) for v in _get(raw, "dataset", "snr_grid_db", None, list)],
        frames_per_cell=_get(raw, "dataset", "frames_per_cell", None, int),
        frame_length=_get(raw, "dataset", "frame_length", 128, int),
        fading=_get(raw, "dataset", "fading", "identity", str),
        test_fraction=_get(raw, "split", "test_fraction", 0.2, float),
        architecture=_get(raw, "model", "architecture", "desk", str),
        precision=_get(raw, "model", "precision", "f32", str),
        epochs=_get(raw, "train", "epochs", 15, int),
        batch_size=_get(raw, "train", "batch_size", 64, int),
        learning_rate=_get(raw, "train", "learning_rate", 0.01, float),
        ensemble_size=_get(raw, "ensemble", "size", 5, int),
        systems=list(systems),
        alpha=_get(raw, "ci", "alpha", 0.05, float),
        ece_bins=_get(raw, "ece", "bin_count", 15, int),
        surrogate_member=_get(raw, "attack", "surrogate_member", 0, int),
        fixed_pnr_db=float(
            raw.get("attack", {}).get("fixed_pnr_over_snr", {}).get("pnr_db", 5.0)
        ),
        attack_snr_db=float(
            raw.get("attack", {}).get("fixed_snr_over_pnr", {}).get("snr_db", 10.0)
        ),
        pnr_grid_db=[
            float(v)
            for v in raw.get("attack", {})
            .get("fixed_snr_over_pnr", {})
            .get("pnr_grid_db", [-10.0, -5.0, 0.0, 5.0, 10.0])
        ],
        save_perturbed=bool(raw.get("attack", {}).get("save_perturbed", False)),
        workers=int(raw.get("workers", 1)),
        raw=raw,
    )

    for name in cfg.schemes:
        siggen.make_scheme(name)  # raises on unknown names
    if cfg.architecture not in ("desk", "paper"):
        raise ConfigError(f"model.architecture must be desk or paper")
    if cfg.precision not in ("f32", "f64"):
        raise ConfigError("model.precision must be f32 or f64")
    if not 0.0 < cfg.test_fraction < 1.0:
        raise ConfigError("split.test_fraction must be in (0, 1)")
    if cfg.ensemble_size < 1:
        raise ConfigError("ensemble.size must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    try:
        cfg.train_config(0)
        cfg.ci_config
        cfg.ece_config
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_config(raw)


def _architecture(cfg: ExperimentConfig):
    builder = {
        "desk": nncore.desk_architecture,
        "paper": nncore.paper_architecture,
    }[cfg.architecture]
    return builder(cfg.frame_length, len(cfg.schemes))


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_manifest(
    out: Path,
    stage: str,
    cfg: ExperimentConfig,
    seeds: dict,
    inputs: list[str],
    outputs: list[str],
    wall_seconds: float,
) -> Path:
    mdir = out / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": stage,
        "config_sha256": cfg.config_hash(),
        "seeds": seeds,
        "inputs": inputs,
        "outputs": outputs,
        "started_utc": _utc_now(),
        "wall_seconds": wall_seconds,
        "library_version": __version__,
        "schema_version": SCHEMA_VERSION,
    }
    path = mdir / f"{stage}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} not found: {path} (run earlier stages first)")
    return path


def generate(cfg: ExperimentConfig, out: str | Path) -> dict:
    """Synthesize the dataset, split it, and write all three .sigset files."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ds_seed = derive_seed(cfg.seed, _TAG_DATASET)
    split_seed = derive_seed(cfg.seed, _TAG_SPLIT)
    ds = siggen.generate_frames(
        [siggen.make_scheme(n) for n in cfg.schemes],
        cfg.snr_grid_db,
        cfg.frames_per_cell,
        cfg.frame_length,
        ds_seed,
        fading=cfg.fading,
    )
    parts = dataset.split(ds, cfg.test_fraction, split_seed)
    dataset.save(ds, out / "dataset.sigset")
    dataset.save(parts.train, out / "train.sigset")
    dataset.save(parts.test, out / "test.sigset")
    outputs = ["dataset.sigset", "train.sigset", "test.sigset"]
    write_manifest(
        out,
        "generate",
        cfg,
        {"root": cfg.seed, "dataset": ds_seed, "split": split_seed},
        [],
        outputs,
        time.perf_counter() - t0,
    )
    return {"frames": len(ds), "train": len(parts.train), "test": len(parts.test)}


def train(cfg: ExperimentConfig, out: str | Path) -> dict:
    """Train every selected system on the train split."""
    out = Path(out)
    train_set = dataset.load(_require(out / "train.sigset", "train split"))
    specs = _architecture(cfg)
    models_dir = out / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    seeds: dict = {"root": cfg.seed}
    outputs: list[str] = []
    timings: dict = {}

    if "standalone" in cfg.systems:
        t1 = time.perf_counter()
        init_seed = derive_seed(cfg.seed, _TAG_STANDALONE_INIT)
        shuffle_seed = derive_seed(cfg.seed, _TAG_STANDALONE_SHUFFLE)
        params = nncore.init_params(specs, init_seed, cfg.precision)
        model, _ = nncore.train(params, train_set, cfg.train_config(shuffle_seed))
        nncore.save_model(model, models_dir / "standalone.weights")
        seeds["standalone"] = {"init": init_seed, "shuffle": shuffle_seed}
        outputs.append("models/standalone.weights")
        timings["standalone"] = time.perf_counter() - t1

    if "equal_ensemble" in cfg.systems:
        t1 = time.perf_counter()
        master = derive_seed(cfg.seed, _TAG_EQUAL_MASTER)
        ens = ensemble.train_ensemble(
            train_set,
            cfg.ensemble_size,
            cfg.train_config(0),
            master,
            specs=specs,
            precision=cfg.precision,
            workers=cfg.workers,
        )
        ensemble.save_ensemble(ens, models_dir / "equal_ensemble")
        seeds["equal_ensemble"] = {"master": master}
        outputs.append("models/equal_ensemble/ensemble.json")
        timings["equal_ensemble"] = time.perf_counter() - t1

    if "weighted_ensemble" in cfg.systems:
        t1 = time.perf_counter()
        master = derive_seed(cfg.seed, _TAG_WEIGHTED_MASTER)
        ens = ensemble.train_weighted_ensemble(
            train_set,
            cfg.ensemble_size,
            cfg.train_config(0),
            master,
            specs=specs,
            precision=cfg.precision,
            workers=cfg.workers,
        )
        ensemble.save_ensemble(ens, models_dir / "weighted_ensemble")
        seeds["weighted_ensemble"] = {"master": master}
        outputs.append("models/weighted_ensemble/ensemble.json")
        timings["weighted_ensemble"] = time.perf_counter() - t1

    write_manifest(
        out, "train", cfg, seeds, ["train.sigset"], outputs, time.perf_counter() - t0
    )
    return timings


def load_system(cfg: ExperimentConfig, out: Path, system: str):
    """A trained system: ModelParams for the standalone CNN, EnsembleModel
    for the ensembles."""
    models_dir = out / "models"
    if system == "standalone":
        return nncore.load_model(
            _require(models_dir / "standalone.weights", "standalone model")
        )
    return ensemble.load_ensemble(
        _require(models_dir / system / "ensemble.json", f"{system} manifest")
    )


def _score_system(system, test_set) -> ScoredBatch:
    X = test_set.samples
    if isinstance(system, ModelParams):
        pred = ensemble.predict_single_batch(system, X)
    else:
        pred = ensemble.predict_batch(system, X)
    return ScoredBatch.from_batch(pred, test_set.scheme_indices, test_set.snrs_db)


def evaluate(cfg: ExperimentConfig, out: str | Path) -> dict:
    """Clean per-SNR MetricsReports for every trained system."""
    out = Path(out)
    test_set = dataset.load(_require(out / "test.sigset", "test split"))
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows: list[tuple[str, float, MetricsReport]] = []
    for system_name in cfg.systems:
        system = load_system(cfg, out, system_name)
        batch = _score_system(system, test_set)
        for snr, sub in batch.per_snr():
            rows.append(
                (system_name, snr, uqmetrics.report(sub, cfg.ci_config, cfg.ece_config))
            )
    uqmetrics.write_reports_csv(rows, eval_dir / "metrics_clean.csv")
    uqmetrics.write_reports_json(rows, eval_dir / "metrics_clean.json")
    write_manifest(
        out,
        "evaluate",
        cfg,
        {"root": cfg.seed},
        ["test.sigset", "models"],
        ["eval/metrics_clean.csv", "eval/metrics_clean.json"],
        time.perf_counter() - t0,
    )
    return {"rows": len(rows)}


def _split_rows_csv(path: Path, key_name: str, rows) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["system", key_name, *MetricsReport.SCALAR_COLUMNS])
        for system, key, rep in rows:
            writer.writerow(
                [system, repr(float(key))]
                + [v if isinstance(v, int) else repr(float(v)) for v in rep.scalar_row()]
            )


def attack(cfg: ExperimentConfig, out: str | Path) -> dict:
    """Both adversarial sweeps: constant PNR across the SNR grid, and a PNR
    sweep at one fixed SNR."""
    out = Path(out)
    test_set = dataset.load(_require(out / "test.sigset", "test split"))
    attack_dir = out / "attack"
    attack_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    systems = {name: load_system(cfg, out, name) for name in cfg.systems}

    # sweep 1: constant target PNR over the whole SNR grid
    pnr_rows = []
    sweep1_info: dict = {}
    for name, system in systems.items():
        atk = AttackConfig(target_pnr_db=cfg.fixed_pnr_db, surrogate=cfg.surrogate_member)
        result = adversarial.evaluate_under_attack(
            system, test_set, atk, cfg.ci_config, cfg.ece_config
        )
        for snr in sorted(result.per_snr):
            pnr_rows.append((name, snr, result.per_snr[snr]))
        sweep1_info[name] = {
            "surrogate": result.surrogate,
            "labels": result.labels_used,
            "epsilons": {repr(k): v for k, v in sorted(result.epsilons.items())},
            "realized_pnr_db": {
                repr(k): v for k, v in sorted(result.realized_pnr_db.items())
            },
        }
    _split_rows_csv(attack_dir / "metrics_attack_fixed_pnr.csv", "snr_db", pnr_rows)
    uqmetrics.write_reports_json(pnr_rows, attack_dir / "metrics_attack_fixed_pnr.json")

    # sweep 2: PNR sweep at one SNR
    snr_slice_idx = np.flatnonzero(test_set.snrs_db == cfg.attack_snr_db)
    if snr_slice_idx.size == 0:
        raise ConfigError(
            f"attack.fixed_snr_over_pnr.snr_db={cfg.attack_snr_db} not in the SNR grid"
        )
    snr_slice = test_set.subset(snr_slice_idx)
    sweep_rows = []
    sweep2_info: dict = {}
    for name, system in systems.items():
        per_pnr = {}
        for pnr in cfg.pnr_grid_db:
            atk = AttackConfig(target_pnr_db=pnr, surrogate=cfg.surrogate_member)
            result = adversarial.evaluate_under_attack(
                system, snr_slice, atk, cfg.ci_config, cfg.ece_config
            )
            rep = result.per_snr[cfg.attack_snr_db]
            sweep_rows.append((name, pnr, rep))
            per_pnr[repr(float(pnr))] = {
                "epsilon": result.epsilons[cfg.attack_snr_db],
                "realized_pnr_db": result.realized_pnr_db[cfg.attack_snr_db],
            }
        sweep2_info[name] = per_pnr
    _split_rows_csv(attack_dir / "metrics_attack_fixed_snr.csv", "pnr_db", sweep_rows)
    uqmetrics.write_reports_json(
        sweep_rows, attack_dir / "metrics_attack_fixed_snr.json", key_name="pnr_db"
    )

    info = {
        "fixed_pnr_over_snr": sweep1_info,
        "fixed_snr_over_pnr": sweep2_info,
        "labels": "true",
    }
    (attack_dir / "attack_info.json").write_text(
        json.dumps(info, indent=2) + "\n", encoding="utf-8"
    )

    outputs = [
        "attack/metrics_attack_fixed_pnr.csv",
        "attack/metrics_attack_fixed_pnr.json",
        "attack/metrics_attack_fixed_snr.csv",
        "attack/metrics_attack_fixed_snr.json",
        "attack/attack_info.json",
    ]
    if cfg.save_perturbed:
        for name, system in systems.items():
            surrogate = adversarial.resolve_surrogate(
                system, AttackConfig(epsilon=0.0, surrogate=cfg.surrogate_member)
            )
            for snr, sub in test_set.per_snr():
                eps = adversarial.epsilon_for_pnr(
                    cfg.fixed_pnr_db, snr, sub.samples.astype(np.float64)
                )
                perturbed = adversarial.perturbed_dataset(
                    surrogate, sub, eps, {"target_pnr_db": cfg.fixed_pnr_db}
                )
                fname = f"perturbed_{name}_snr{snr:+.0f}.sigset"
                dataset.save(perturbed, attack_dir / fname)
                outputs.append(f"attack/{fname}")

    write_manifest(
        out,
        "attack",
        cfg,
        {"root": cfg.seed},
        ["test.sigset", "models"],
        outputs,
        time.perf_counter() - t0,
    )
    return {"rows": len(pnr_rows) + len(sweep_rows)}


def report(cfg: ExperimentConfig, out: str | Path) -> dict:
    """Render SVG figures from the evaluate/attack artifacts (no recompute)."""
    from . import plots

    out = Path(out)
    eval_json = _require(out / "eval" / "metrics_clean.json", "clean metrics")
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    clean_rows = json.loads(eval_json.read_text(encoding="utf-8"))
    outputs = plots.render_clean_reports(clean_rows, report_dir)

    atk_pnr = out / "attack" / "metrics_attack_fixed_pnr.json"
    atk_snr = out / "attack" / "metrics_attack_fixed_snr.json"
    if atk_pnr.exists():
        attacked = json.loads(atk_pnr.read_text(encoding="utf-8"))
        outputs += plots.render_attack_over_snr(clean_rows, attacked, report_dir)
    if atk_snr.exists():
        sweep = json.loads(atk_snr.read_text(encoding="utf-8"))
        outputs += plots.render_attack_over_pnr(clean_rows, sweep, cfg.attack_snr_db, report_dir)

    write_manifest(
        out,
        "report",
        cfg,
        {"root": cfg.seed},
        ["eval/metrics_clean.json"],
        [str(Path("report") / Path(p).name) for p in outputs],
        time.perf_counter() - t0,
    )
    return {"figures": len(outputs)}
