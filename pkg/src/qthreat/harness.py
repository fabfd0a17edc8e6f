"""Experiment configuration, staged pipelines, the run matrix, and
streaming evaluation.

A bundle directory is the unit of persistence. Each stage writes its
artifacts plus a ``stage.json`` carrying a content key (hash of stage
name, the config slice it depends on, and the upstream stage keys), so
reruns skip finished work and any upstream change invalidates everything
downstream. The manifest embeds the full config, per-file hashes, and
the test metrics; it is written with status "incomplete" first and
flipped to "complete" only after evaluation succeeds.
"""
from __future__ import annotations

import concurrent.futures
import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import RNG_KIND, __version__, datapipe, featuremap, metrics, persist, qsvm, vqc
from .encoder import (
    EncoderConfig,
    EncoderModel,
    TrainSchedule,
    forward,
    fit_scaler,
    load_encoder,
    save_encoder,
    train_encoder,
)
from .featuremap import AngleVector, FeatureMapSpec
from .qsim import NoiseSpec
from .stopwords import STOPWORDS_VERSION

DATASETS = ("nslkdd", "lingspam")
MODELS = ("qsvm", "vqc", "classical-baseline")
BACKENDS = ("exact", "shots")
REFERENCE_LIMIT = 64
STREAM_BATCH = 32

# evaluation stages in dependency order; run_experiment can stop early
STAGE_ORDER = ("preprocess", "encoder", "gram", "model", "evaluate")


class PipelineError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage!r}: {message}")


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class Seeds:
    """Every random decision in a run draws from one of these."""

    data: int = 0
    encoder: int = 0
    sampling: int = 0

    def __post_init__(self):
        for name in ("data", "encoder", "sampling"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ValueError(f"seed {name!r} must be a nonnegative integer")

    def as_dict(self) -> dict:
        return {"data": self.data, "encoder": self.encoder, "sampling": self.sampling}

    @classmethod
    def from_dict(cls, d: dict) -> "Seeds":
        extra = set(d) - {"data", "encoder", "sampling"}
        if extra:
            raise ValueError(f"unknown seed keys: {sorted(extra)}")
        return cls(**d)

    def shifted(self, offset: int) -> "Seeds":
        return Seeds(self.data + offset, self.encoder + offset, self.sampling + offset)


_ID_OK = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-")


@dataclass(frozen=True)
class ExperimentConfig:
    """One cell of the experiment matrix, fully self-contained.

    The config is embedded verbatim into the manifest; everything the run
    needs (paths, seeds, hyperparameters, noise settings) lives here so a
    bundle can be reproduced from its manifest alone.
    """

    experiment_id: str
    dataset: str
    model: str
    train_path: str = ""
    test_path: str = ""
    corpus_path: str = ""
    qubits: int = 4
    reps: int = 2
    reupload: int = 2
    entanglement: str = "full"
    second_order_coeff: str = "pi_minus"
    backend: str = "exact"
    shots: int = 1024
    depol_1q: float = 0.0
    depol_2q: float = 0.0
    readout_01: float = 0.0
    readout_10: float = 0.0
    mitigate: bool = False
    fine_tune: bool = False
    max_train: int = 4000
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    ngram_max: int = 1
    hidden_sizes: Tuple[int, ...] = (256, 64)
    embed_dim: int = 12
    dropout: float = 0.15
    epochs: int = 25
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    patience: int = 8
    c_grid: Tuple[float, ...] = (0.1, 1.0, 10.0, 100.0)
    cv_folds: int = 5
    beta: float = 2.0
    seeds: Seeds = field(default_factory=Seeds)

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "c_grid", tuple(float(c) for c in self.c_grid))
        if isinstance(self.seeds, dict):
            object.__setattr__(self, "seeds", Seeds.from_dict(self.seeds))
        if not self.experiment_id or set(self.experiment_id) - _ID_OK:
            raise ValueError("experiment_id must be nonempty [A-Za-z0-9._-]")
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.dataset == "nslkdd" and not (self.train_path and self.test_path):
            raise ValueError("nslkdd needs train_path and test_path")
        if self.dataset == "lingspam" and not self.corpus_path:
            raise ValueError("lingspam needs corpus_path")
        if not 2 <= self.qubits <= 6:
            raise ValueError("qubits must be in [2, 6]")
        if self.qubits > self.embed_dim:
            raise ValueError(
                f"qubits {self.qubits} exceeds embed_dim {self.embed_dim}"
            )
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if not 1 <= self.reupload <= vqc.MAX_LAYERS:
            raise ValueError(f"reupload must be in [1, {vqc.MAX_LAYERS}]")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        for name in ("depol_1q", "depol_2q", "readout_01", "readout_10"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("val_fraction", "test_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.max_train < 1:
            raise ValueError("max_train must be >= 1")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        d["c_grid"] = list(self.c_grid)
        d["seeds"] = self.seeds.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        kwargs = dict(d)
        if "seeds" in kwargs and isinstance(kwargs["seeds"], dict):
            kwargs["seeds"] = Seeds.from_dict(kwargs["seeds"])
        return cls(**kwargs)

    def config_sha(self) -> str:
        return persist.sha256_bytes(persist.canonical_json(self.as_dict()).encode())

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.depol_1q, self.depol_2q, self.readout_01, self.readout_10)

    def has_noise(self) -> bool:
        return any(
            v > 0 for v in (self.depol_1q, self.depol_2q, self.readout_01, self.readout_10)
        )

    def feature_spec(self) -> FeatureMapSpec:
        return FeatureMapSpec(
            self.qubits, self.reps, self.entanglement, self.second_order_coeff
        )

    def vqc_spec(self) -> vqc.VqcSpec:
        return vqc.VqcSpec(self.qubits, self.reupload, self.second_order_coeff)

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(
            input_dim=input_dim,
            hidden_sizes=self.hidden_sizes,
            embed_dim=self.embed_dim,
            dropout=self.dropout,
            seed=self.seeds.encoder,
        )

    def schedule(self, class_weights: Tuple[float, float]) -> TrainSchedule:
        return TrainSchedule(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            patience=self.patience,
            class_weights=class_weights,
        )

    def execution(self) -> vqc.Execution:
        if self.backend == "exact":
            return vqc.Execution(mode="exact")
        return vqc.Execution(
            mode="shots",
            shots=self.shots,
            noise=self.noise() if self.has_noise() else None,
            mitigate=self.mitigate,
            seed=self.seeds.sampling,
        )


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(persist.load_json(path))


# ---------------------------------------------------------------- stages


def _stage_path(root: Path, name: str) -> Path:
    return root / name


def _stage_fresh(d: Path, key: str) -> bool:
    marker = d / "stage.json"
    if not marker.exists():
        return False
    try:
        return persist.load_json(marker).get("key") == key
    except (OSError, ValueError):
        return False


def _mark_stage(d: Path, key: str):
    persist.save_json(persist.ensure_dir(d) / "stage.json", {"key": key})


def _source_hashes(config: ExperimentConfig) -> List[str]:
    """Content hashes of the raw inputs, so a changed source file
    invalidates the preprocess stage even at an unchanged path."""
    if config.dataset == "nslkdd":
        return [persist.sha256_file(config.train_path), persist.sha256_file(config.test_path)]
    root = Path(config.corpus_path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} is not a directory")
    entries = []
    for p in sorted(root.rglob("*")):
        if p.is_file():
            entries.append([p.relative_to(root).as_posix(), persist.sha256_file(p)])
    return [persist.sha256_bytes(persist.canonical_json(entries).encode())]


def _stratified_limit(y: np.ndarray, limit: int, seed: int) -> np.ndarray:
    """Indices of a stratified subsample of exactly `limit` rows (sorted)."""
    y = np.asarray(y, dtype=int)
    if y.size <= limit:
        return np.arange(y.size)
    counts = {str(c): int((y == c).sum()) for c in np.unique(y)}
    alloc = datapipe.apportion(counts, limit)
    picked = []
    for name, take in sorted(alloc.items()):
        pos = np.flatnonzero(y == int(name))
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(name)]))
        picked.append(np.sort(rng.permutation(pos)[:take]))
    return np.sort(np.concatenate(picked))


def _stage_preprocess(config: ExperimentConfig, root: Path):
    slice_ = {
        "dataset": config.dataset,
        "train_path": config.train_path,
        "test_path": config.test_path,
        "corpus_path": config.corpus_path,
        "val_fraction": config.val_fraction,
        "test_fraction": config.test_fraction,
        "ngram_max": config.ngram_max,
        "max_train": config.max_train,
        "seed": config.seeds.data,
    }
    key = persist.stage_key("preprocess", slice_, _source_hashes(config))
    d = _stage_path(root, "preprocess")
    if _stage_fresh(d, key):
        return datapipe.load_split(d), key
    if config.dataset == "nslkdd":
        split = datapipe.load_nslkdd(
            config.train_path,
            config.test_path,
            val_fraction=config.val_fraction,
            seed=config.seeds.data,
        )
    else:
        split = datapipe.load_lingspam(
            config.corpus_path,
            test_fraction=config.test_fraction,
            val_fraction=config.val_fraction,
            seed=config.seeds.data,
            ngram_max=config.ngram_max,
        )
    n = split.x_train.shape[0]
    if n > config.max_train:
        # transformer statistics stay fitted on the full pre-carve train set;
        # only the rows the models see are capped
        idx = _stratified_limit(split.y_train, config.max_train, config.seeds.data)
        split = dataclasses.replace(
            split,
            x_train=split.x_train[idx],
            y_train=split.y_train[idx],
            class_weights=datapipe.class_weights(split.y_train[idx]),
            meta={**split.meta, "max_train": config.max_train, "train_rows_full": n},
        )
    datapipe.save_split(split, d)
    _mark_stage(d, key)
    return split, key


def _stage_encoder(config: ExperimentConfig, root: Path, split, pre_key: str):
    slice_ = {
        "hidden_sizes": list(config.hidden_sizes),
        "embed_dim": config.embed_dim,
        "dropout": config.dropout,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "weight_decay": config.weight_decay,
        "patience": config.patience,
        "seed": config.seeds.encoder,
    }
    key = persist.stage_key("encoder", slice_, [pre_key])
    d = _stage_path(root, "encoder")
    if _stage_fresh(d, key):
        model, scaler = load_encoder(d)
        return model, scaler, key
    enc_cfg = config.encoder_config(split.x_train.shape[1])
    sched = config.schedule(split.class_weights)
    model, history = train_encoder(
        enc_cfg, sched, (split.x_train, split.y_train), (split.x_val, split.y_val)
    )
    _, train_embed = forward(model, split.x_train, training=False)
    scaler = fit_scaler(train_embed)
    save_encoder(model, d, scaler, extra={"history": history})
    _mark_stage(d, key)
    return model, scaler, key


def _angles(config: ExperimentConfig, enc_model, scaler, x: np.ndarray) -> np.ndarray:
    return vqc.angles_from_features(x, enc_model, scaler, config.qubits)


def _stage_gram(config: ExperimentConfig, root: Path, split, enc_model, scaler, enc_key: str):
    fspec = config.feature_spec()
    key = persist.stage_key("gram", fspec.as_dict(), [enc_key])
    d = _stage_path(root, "gram")
    if _stage_fresh(d, key):
        return featuremap.load_gram_bundle(d), key
    rows = {
        name: _angles(config, enc_model, scaler, x)
        for name, x in (("train", split.x_train), ("val", split.x_val), ("test", split.x_test))
    }

    def vectors(name):
        return [AngleVector(r) for r in rows[name]]

    bundle = featuremap.build_gram(
        vectors("train"),
        fspec,
        val_angles=vectors("val"),
        test_angles=vectors("test"),
        max_train=config.max_train,
    )
    bundle = featuremap.center_gram(bundle)
    featuremap.save_gram_bundle(bundle, d, fspec)
    _mark_stage(d, key)
    return bundle, key


def _stage_svm(config: ExperimentConfig, root: Path, split, bundle, gram_key: str):
    slice_ = {
        "c_grid": list(config.c_grid),
        "cv_folds": config.cv_folds,
        "beta": config.beta,
        "seed": config.seeds.data,
        "class_weights": list(split.class_weights),
    }
    key = persist.stage_key("svm", slice_, [gram_key])
    d = _stage_path(root, "svm")
    if _stage_fresh(d, key):
        return qsvm.load_svm(d / "svm.json"), key
    plan = qsvm.CvPlan(
        folds=config.cv_folds, c_grid=config.c_grid, beta=config.beta, seed=config.seeds.data
    )
    best_c, cv_table = qsvm.select_c(bundle.train_gram, split.y_train, plan)
    model = qsvm.solve_dual(
        bundle.train_gram, split.y_train, best_c, class_weights=split.class_weights
    )
    model = qsvm.with_alignment(model, bundle.val_block, split.y_val)
    val_scores = qsvm.decision_scores(model, bundle.val_block)
    threshold = qsvm.tune_threshold(val_scores, split.y_val, config.beta)
    model = replace(model, threshold=threshold)
    qsvm.save_svm(model, d / "svm.json", cv_table=cv_table, extra={"best_c": best_c})
    _mark_stage(d, key)
    return model, key


def _stage_vqc(config: ExperimentConfig, root: Path, split, enc_model, scaler, enc_key: str):
    slice_ = {
        "qubits": config.qubits,
        "reupload": config.reupload,
        "second_order_coeff": config.second_order_coeff,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "weight_decay": config.weight_decay,
        "patience": config.patience,
        "fine_tune": config.fine_tune,
        "beta": config.beta,
        "seed": config.seeds.encoder,
    }
    key = persist.stage_key("vqc", slice_, [enc_key])
    d = _stage_path(root, "vqc")
    if _stage_fresh(d, key):
        model = vqc.load_vqc(d)
        header = persist.load_json(d / "vqc.json")
        threshold = float(header["extra"]["threshold"])
        enc_used = load_encoder(d / "encoder")[0] if config.fine_tune else enc_model
        return model, enc_used, threshold, key
    spec = config.vqc_spec()
    sched = config.schedule(split.class_weights)
    result = vqc.train_vqc(
        spec,
        sched,
        (split.x_train, split.y_train),
        (split.x_val, split.y_val),
        seed=config.seeds.encoder,
        encoder_model=enc_model,
        scaler=scaler,
        fine_tune=config.fine_tune,
    )
    enc_used = result.encoder if result.encoder is not None else enc_model
    val_logits = vqc.decision_logits(
        _angles(config, enc_used, scaler, split.x_val), result.model
    )
    threshold = qsvm.tune_threshold(val_logits, split.y_val, config.beta)
    vqc.save_vqc(
        result.model,
        d,
        extra={
            "threshold": threshold,
            "fine_tune": config.fine_tune,
            "best_epoch": result.history["best_epoch"],
            "best_val_loss": result.history["best_val_loss"],
        },
    )
    if config.fine_tune:
        save_encoder(enc_used, d / "encoder", scaler)
    _mark_stage(d, key)
    return result.model, enc_used, threshold, key


def _classifier_margin(enc_model: EncoderModel, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(enc_model, x, training=False)
    return logits[:, 1] - logits[:, 0]


def _stage_baseline(config: ExperimentConfig, root: Path, split, enc_model, enc_key: str):
    key = persist.stage_key("baseline", {"beta": config.beta}, [enc_key])
    d = _stage_path(root, "baseline")
    if _stage_fresh(d, key):
        return float(persist.load_json(d / "baseline.json")["threshold"]), key
    val_scores = _classifier_margin(enc_model, split.x_val)
    threshold = qsvm.tune_threshold(val_scores, split.y_val, config.beta)
    persist.save_json(
        d / "baseline.json",
        {"threshold": threshold, "beta": config.beta, "score": "classifier_logit_margin"},
    )
    _mark_stage(d, key)
    return threshold, key


# ------------------------------------------------------------ run pipeline


def _bundle_files(root: Path) -> List[str]:
    names = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            names.append(p.relative_to(root).as_posix())
    return names


def _conventions(config: ExperimentConfig) -> dict:
    return {
        "second_order_coeff": config.second_order_coeff,
        "entanglement": config.entanglement,
        "angle_scale": "pi_times_scaled_embedding",
        "positive_class": 1,
        "qubit_order": "lsb_first",
    }


def run_experiment(config: ExperimentConfig, workdir, through: Optional[str] = None) -> dict:
    """Run the pipeline for one config, resuming finished stages.

    `through` stops after an early stage ("preprocess", "encoder", "gram")
    leaving the manifest incomplete; the default runs to test evaluation
    and writes a complete manifest. A complete manifest whose config
    matches is returned as-is without recomputing anything.
    """
    if through is not None and through not in STAGE_ORDER:
        raise ValueError(f"unknown stage {through!r}")
    root = persist.ensure_dir(workdir)
    mpath = root / "manifest.json"
    if through is None and mpath.exists():
        existing = persist.load_json(mpath)
        if existing.get("status") == "complete" and existing.get("config") == config.as_dict():
            return existing

    persist.save_json(root / "config.json", config.as_dict())
    manifest: dict = {
        "config": config.as_dict(),
        "config_sha256": config.config_sha(),
        "status": "incomplete",
        "stages": {},
    }
    persist.save_json(mpath, manifest)
    stages: Dict[str, str] = {}

    def run_stage(name, fn, *args):
        try:
            return fn(config, root, *args)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, str(exc)) from exc

    try:
        split, stages["preprocess"] = run_stage("preprocess", _stage_preprocess)
        if through == "preprocess":
            return _finish(manifest, mpath, root, stages, complete=False)

        enc_model, scaler, stages["encoder"] = run_stage(
            "encoder", _stage_encoder, split, stages["preprocess"]
        )
        if through == "encoder":
            return _finish(manifest, mpath, root, stages, complete=False)

        bundle = None
        if config.model == "qsvm":
            bundle, stages["gram"] = run_stage(
                "gram", _stage_gram, split, enc_model, scaler, stages["encoder"]
            )
        if through == "gram":
            return _finish(manifest, mpath, root, stages, complete=False)

        extras: dict = {}
        if config.model == "qsvm":
            svm, stages["svm"] = run_stage(
                "svm", _stage_svm, split, bundle, stages["gram"]
            )
            threshold = svm.threshold

            def evaluate():
                scores = qsvm.decision_scores(svm, bundle.test_block)
                return metrics.report(split.y_test, scores, threshold, config.beta)

        elif config.model == "vqc":
            vqc_model, enc_used, threshold, stages["vqc"] = run_stage(
                "vqc", _stage_vqc, split, enc_model, scaler, stages["encoder"]
            )

            def evaluate():
                ang = _angles(config, enc_used, scaler, split.x_test)
                logits = vqc.decision_logits(ang, vqc_model)
                extras["consistency"] = {
                    "exact_vs_analytic_max_abs": _vqc_consistency(ang, vqc_model)
                }
                if config.backend == "shots":
                    extras["shot_eval"] = _vqc_shot_eval(
                        config, ang, vqc_model, split.y_test, threshold
                    )
                return metrics.report(split.y_test, logits, threshold, config.beta)

        else:
            threshold, stages["baseline"] = run_stage(
                "baseline", _stage_baseline, split, enc_model, stages["encoder"]
            )

            def evaluate():
                scores = _classifier_margin(enc_model, split.x_test)
                return metrics.report(split.y_test, scores, threshold, config.beta)

        try:
            rep = evaluate()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError("evaluate", str(exc)) from exc
    except PipelineError as err:
        manifest["stages"] = stages
        manifest["error"] = {"stage": err.stage, "message": str(err)}
        persist.save_json(mpath, manifest)
        raise

    manifest.update(
        {
            "versions": {
                "package": __version__,
                "rng": RNG_KIND,
                "stopwords": STOPWORDS_VERSION,
            },
            "conventions": _conventions(config),
            "threshold": float(threshold),
            "metrics": rep.as_dict(),
            **extras,
        }
    )
    return _finish(manifest, mpath, root, stages, complete=True)


def _finish(manifest, mpath, root, stages, complete: bool) -> dict:
    manifest["stages"] = stages
    manifest["status"] = "complete" if complete else "incomplete"
    manifest["files"] = persist.relative_file_map(root, _bundle_files(root))
    persist.save_json(mpath, manifest)
    return manifest


def _vqc_consistency(angle_rows: np.ndarray, model: vqc.VqcModel, cap: int = 16) -> float:
    """Max gap between the per-sample circuit path and the vectorized
    batch path on a prefix of rows; the two must agree to 1e-9."""
    rows = angle_rows[:cap]
    batch = vqc.decision_logits(rows, model)
    single = np.array(
        [vqc.forward_logit(AngleVector(r), model) for r in rows]
    )
    gap = float(np.max(np.abs(batch - single))) if rows.shape[0] else 0.0
    if gap > 1e-9:
        raise ValueError(f"exact evaluators disagree by {gap:.3e}")
    return gap


def _vqc_shot_eval(config, angle_rows, model, y, threshold) -> dict:
    noise = config.noise() if config.has_noise() else None
    out = {}
    for tag, mitigate in (("raw", False), ("mitigated", True)):
        ex = vqc.Execution(
            mode="shots",
            shots=config.shots,
            noise=noise,
            mitigate=mitigate,
            seed=config.seeds.sampling,
        )
        logits = vqc.decision_logits(angle_rows, model, ex)
        out[tag] = metrics.report(y, logits, threshold, config.beta).as_dict()
    return out


# ---------------------------------------------------------------- bundles


@dataclass(frozen=True)
class ArtifactBundle:
    root: Path
    manifest: dict

    @property
    def config(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(self.manifest["config"])

    @property
    def complete(self) -> bool:
        return self.manifest.get("status") == "complete"


def load_bundle(workdir, verify: bool = True) -> ArtifactBundle:
    """Open a bundle, checking every recorded file hash by default."""
    root = Path(workdir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest under {root}")
    manifest = persist.load_json(mpath)
    if verify:
        for name, sha in manifest.get("files", {}).items():
            actual = persist.sha256_file(root / name)
            if actual != sha:
                raise ValueError(f"bundle file {name} fails its hash check")
    return ArtifactBundle(root=root, manifest=manifest)


def evaluate_bundle(
    workdir,
    backend: Optional[str] = None,
    shots: Optional[int] = None,
    noise: Optional[NoiseSpec] = None,
    mitigate: Optional[bool] = None,
    sampling_seed: Optional[int] = None,
    reference_limit: int = REFERENCE_LIMIT,
) -> dict:
    """Re-evaluate a complete bundle's test split.

    With no overrides this reproduces the manifest metrics bit-exactly.
    Overrides switch the quantum evaluation to shot/noise mode; the stored
    validation threshold is applied unchanged.
    """
    bundle = load_bundle(workdir)
    if not bundle.complete:
        raise ValueError("bundle is incomplete; rerun the pipeline first")
    config = bundle.config
    root = bundle.root
    split = datapipe.load_split(root / "preprocess")
    threshold = float(bundle.manifest["threshold"])
    backend = backend or "exact"
    if backend not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}")
    ex_shots = shots if shots is not None else config.shots
    ex_seed = sampling_seed if sampling_seed is not None else config.seeds.sampling
    ex_mitigate = config.mitigate if mitigate is None else mitigate

    if config.model == "classical-baseline":
        if backend != "exact":
            raise ValueError("the classical baseline has no shot backend")
        enc_model, _ = load_encoder(root / "encoder")
        scores = _classifier_margin(enc_model, split.x_test)
    elif config.model == "qsvm":
        if backend == "exact":
            gram = featuremap.load_gram_bundle(root / "gram")
            svm = qsvm.load_svm(root / "svm" / "svm.json")
            scores = qsvm.decision_scores(svm, gram.test_block)
        else:
            ex = vqc.Execution("shots", ex_shots, noise, ex_mitigate, ex_seed)
            streamed = evaluate_streaming(
                workdir,
                subset=np.arange(split.y_test.size),
                execution=ex,
                reference_limit=reference_limit,
            )
            return {
                "metrics": streamed["report"].as_dict(),
                "threshold": threshold,
                "backend": backend,
            }
    else:
        enc_dir = root / "vqc" / "encoder" if config.fine_tune else root / "encoder"
        enc_used = load_encoder(enc_dir)[0]
        scaler = load_encoder(root / "encoder")[1]
        model = vqc.load_vqc(root / "vqc")
        ang = _angles(config, enc_used, scaler, split.x_test)
        if backend == "exact":
            scores = vqc.decision_logits(ang, model)
        else:
            ex = vqc.Execution("shots", ex_shots, noise, ex_mitigate, ex_seed)
            scores = vqc.decision_logits(ang, model, ex)
    rep = metrics.report(split.y_test, scores, threshold, config.beta)
    return {"metrics": rep.as_dict(), "threshold": threshold, "backend": backend}


# -------------------------------------------------------------- streaming


def _reference_indices(svm: qsvm.SvmModel, y_train: np.ndarray, limit: int, seed: int):
    """Support vectors, stratified-subsampled by label when over the cap."""
    support = np.asarray(svm.support, dtype=int)
    if support.size <= limit:
        return support
    labels = np.asarray(y_train, dtype=int)[support]
    counts = {str(c): int((labels == c).sum()) for c in np.unique(labels)}
    alloc = datapipe.apportion(counts, limit)
    picked = []
    for name, take in sorted(alloc.items()):
        pos = np.flatnonzero(labels == int(name))
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(name)]))
        picked.append(pos[np.sort(rng.permutation(pos.size)[:take])])
    return support[np.sort(np.concatenate(picked))]


def _pair_seed(base: int, sample: int, ref: int) -> int:
    return int(np.random.SeedSequence([base, sample, ref]).generate_state(1)[0])


def evaluate_streaming(
    workdir,
    subset: Optional[np.ndarray] = None,
    subset_size: int = 100,
    execution: Optional[vqc.Execution] = None,
    audit_path=None,
    reference_limit: int = REFERENCE_LIMIT,
) -> dict:
    """Score test rows one at a time, emitting one audit line per sample.

    QSVM rows are scored against a reference set of support vectors
    (stratified-subsampled to `reference_limit` when necessary) using the
    identity sum_i coef_i * (k(x, i) - mu_i) + b, which matches the batch
    decision because the dual coefficients sum to zero. Kernel circuit
    evaluations run in groups of STREAM_BATCH samples.
    """
    bundle = load_bundle(workdir)
    if not bundle.complete:
        raise ValueError("bundle is incomplete; rerun the pipeline first")
    config = bundle.config
    root = bundle.root
    split = datapipe.load_split(root / "preprocess")
    n_test = split.y_test.size
    if subset is None:
        subset = datapipe.select_eval_subset(split, subset_size, seed=config.seeds.sampling)
    subset = np.asarray(subset, dtype=int).reshape(-1)
    if subset.size == 0:
        raise ValueError("subset is empty")
    if subset.min() < 0 or subset.max() >= n_test:
        raise ValueError("subset index out of range for the test split")
    execution = execution or vqc.Execution(mode="exact")
    threshold = float(bundle.manifest["threshold"])

    enc_model, scaler = load_encoder(root / "encoder")
    if config.model == "qsvm":
        svm = qsvm.load_svm(root / "svm" / "svm.json")
        gram = featuremap.load_gram_bundle(root / "gram")
        if reference_limit < 1 or reference_limit > gram.n_train:
            raise ValueError("reference set larger than the stored Gram")
        fspec = config.feature_spec()
        train_angles = _angles(config, enc_model, scaler, split.x_train)
        refs = _reference_indices(svm, split.y_train, reference_limit, config.seeds.sampling)
        ref_pos = {int(t): i for i, t in enumerate(svm.support)}
        coef = svm.coef[[ref_pos[int(t)] for t in refs]]
        mu = gram.centering_row_means[refs]
        ref_states = featuremap.feature_statevectors(train_angles[refs], fspec)
        score_source = "qsvm"
    elif config.model == "vqc":
        enc_dir = root / "vqc" / "encoder" if config.fine_tune else root / "encoder"
        enc_model = load_encoder(enc_dir)[0]
        model = vqc.load_vqc(root / "vqc")
        refs = np.array([], dtype=int)
        score_source = "vqc"
    else:
        raise ValueError("streaming evaluation needs a quantum model bundle")

    test_angles = _angles(config, enc_model, scaler, split.x_test[subset])
    path = Path(audit_path) if audit_path is not None else root / "stream_audit.csv"
    scores = np.empty(subset.size)
    with open(path, "w", encoding="utf-8") as sink:
        stream = metrics.StreamingConfusion(sink=sink)
        for start in range(0, subset.size, STREAM_BATCH):
            stop = min(start + STREAM_BATCH, subset.size)
            chunk = test_angles[start:stop]
            if score_source == "qsvm":
                if execution.mode == "exact":
                    states = featuremap.feature_statevectors(chunk, fspec)
                    kernels = np.clip(featuremap.gram_from_states(states, ref_states), 0.0, 1.0)
                else:
                    kernels = np.empty((chunk.shape[0], refs.size))
                    for i, row in enumerate(chunk):
                        a = AngleVector(row)
                        for j, t in enumerate(refs):
                            kernels[i, j] = featuremap.fidelity_kernel_shots(
                                a,
                                AngleVector(train_angles[t]),
                                fspec,
                                execution.shots,
                                noise=execution.noise,
                                mitigate=execution.mitigate,
                                seed=_pair_seed(execution.seed, start + i, j),
                            )
                chunk_scores = svm.sign * ((kernels - mu[None, :]) @ coef + svm.bias)
            else:
                if execution.mode == "exact":
                    chunk_scores = vqc.decision_logits(chunk, model)
                else:
                    ex = replace(execution, seed=_pair_seed(execution.seed, start, 0))
                    chunk_scores = vqc.decision_logits(chunk, model, ex)
            for i, s in enumerate(chunk_scores):
                idx = subset[start + i]
                scores[start + i] = s
                stream.update(int(split.y_test[idx]), int(s >= threshold))
    rep = metrics.report(split.y_test[subset], scores, threshold, config.beta)
    return {
        "report": rep,
        "lines": stream.lines,
        "confusion": stream.counts,
        "indices": subset,
        "scores": scores,
        "reference_size": int(refs.size),
        "audit_path": str(path),
        "threshold": threshold,
    }


# ------------------------------------------------------------------ matrix


_ROW_CONFIG_FIELDS = (
    "dataset",
    "model",
    "qubits",
    "reps",
    "reupload",
    "backend",
    "shots",
    "depol_1q",
    "depol_2q",
    "mitigate",
)
_METRIC_FIELDS = ("accuracy", "macro_f1", "auroc", "auprc")


def run_matrix(
    configs: Sequence[ExperimentConfig], workdir, repeats: int = 1, workers: int = 1
) -> dict:
    """Run every (config, repeat) cell, collecting failures instead of
    aborting. Repeat r shifts all three seeds by r. Emits matrix.json and
    an aligned matrix.txt under workdir."""
    configs = list(configs)
    if not configs:
        raise ValueError("need at least one config")
    ids = [c.experiment_id for c in configs]
    if len(set(ids)) != len(ids):
        raise ValueError("experiment ids must be unique")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    root = persist.ensure_dir(workdir)

    cells = [(c, r) for c in configs for r in range(repeats)]

    def run_cell(cell):
        config, r = cell
        cell_config = replace(config, seeds=config.seeds.shifted(r))
        cell_dir = root / config.experiment_id / f"seed{r}"
        row = {"id": config.experiment_id, "repeat": r}
        row.update({k: getattr(config, k) for k in _ROW_CONFIG_FIELDS})
        try:
            manifest = run_experiment(cell_config, cell_dir)
        except PipelineError as err:
            row["error"] = {"stage": err.stage, "message": str(err)}
            return row
        m = manifest["metrics"]
        row.update({k: m[k] for k in _METRIC_FIELDS})
        row["threshold"] = manifest["threshold"]
        return row

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(cell) for cell in cells]

    means = []
    for config in configs:
        ok = [r for r in rows if r["id"] == config.experiment_id and "error" not in r]
        if not ok:
            continue
        mean_row = {"id": config.experiment_id, "repeat": "mean", "n": len(ok)}
        mean_row.update({k: getattr(config, k) for k in _ROW_CONFIG_FIELDS})
        for k in _METRIC_FIELDS:
            mean_row[k] = float(np.mean([r[k] for r in ok]))
        means.append(mean_row)

    table = format_matrix(rows, means)
    persist.save_json(root / "matrix.json", {"rows": rows, "means": means})
    with open(root / "matrix.txt", "w", encoding="utf-8") as f:
        f.write(table + "\n")
    return {"rows": rows, "means": means, "table": table}


def format_matrix(rows: List[dict], means: List[dict]) -> str:
    """Aligned text table: per-seed rows, then mean rows."""
    idw = max([len("ID")] + [len(str(r["id"])) for r in rows + means])
    header = f"{'ID':<{idw}}  {'SEED':>4}  {'ACC':>8}  {'F1_MACRO':>8}  {'AUROC':>8}  {'AUPRC':>8}"
    lines = [header, "-" * len(header)]

    def fmt(row):
        seed = str(row["repeat"])
        if "error" in row:
            return f"{row['id']:<{idw}}  {seed:>4}  error in stage {row['error']['stage']}"
        return (
            f"{row['id']:<{idw}}  {seed:>4}  {row['accuracy']:>8.4f}  "
            f"{row['macro_f1']:>8.4f}  {row['auroc']:>8.4f}  {row['auprc']:>8.4f}"
        )

    lines.extend(fmt(r) for r in rows)
    if means:
        lines.append("-" * len(header))
        lines.extend(fmt(r) for r in means)
    return "\n".join(lines)


def matrix_csv(matrix: dict) -> str:
    """Plot-ready CSV of per-seed rows: one line per cell with the config
    knobs (shots, noise, mitigation) alongside the four metrics."""
    cols = ["id", "repeat", *_ROW_CONFIG_FIELDS, *_METRIC_FIELDS]
    lines = [",".join(cols)]
    for row in matrix["rows"]:
        if "error" in row:
            continue
        lines.append(",".join(str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
