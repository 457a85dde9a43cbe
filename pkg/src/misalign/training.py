"""Training, evaluation, and ablation drivers for the misalignment model.

Feature extraction is the expensive step, so per-dataset features are
cached in an npz keyed by a hash of the extraction config; ablation
variants reuse one multiscale cache (a single-scale variant is a column
slice of it). The optimizer is plain Adam over the flat parameter vector
with squared-error loss, best-validation-RMSE checkpoint selection, and
early stopping. All randomness derives from the config seed, so training
twice with one seed is bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .features import ScaleConfig, extract_pair_features, features_matrix
from .model import (
    ModelParams,
    forward,
    init_params,
    loss_gradient,
    neighbor_indices,
)
from .synthdata import DatasetManifest, load_manifest, load_pair


class TrainingDivergedError(RuntimeError):
    """Loss or a validation metric stopped being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    n_anchors: int = 32  # per cloud; a pair contributes twice this many tokens
    scale_config: ScaleConfig = field(default_factory=ScaleConfig)
    tau: float = 0.6
    attention_mode: str = "tempered"
    patience: int = 50
    k_neighbors: int = 16

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.n_anchors, self.patience, self.k_neighbors) <= 0:
            raise ValueError("epochs, batch_size, n_anchors, patience, k_neighbors must be positive")
        if self.learning_rate < 0 or self.epsilon <= 0:
            raise ValueError("learning_rate must be >= 0 and epsilon > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment decays must be in [0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        d = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "n_anchors": self.n_anchors,
            "scale_config": self.scale_config.to_dict(),
            "tau": self.tau,
            "attention_mode": self.attention_mode,
            "patience": self.patience,
            "k_neighbors": self.k_neighbors,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["scale_config"] = ScaleConfig.from_dict(d["scale_config"])
        return cls(**d)


@dataclass
class FeatureBundle:
    """Cached per-pair feature tokens for a whole dataset."""

    features: np.ndarray  # (n_pairs, tokens, dim)
    positions: np.ndarray  # (n_pairs, tokens, 3)
    labels: np.ndarray  # (n_pairs,)
    pair_ids: np.ndarray  # (n_pairs,) str
    splits: np.ndarray  # (n_pairs,) str

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mask = self.splits == name
        return self.features[mask], self.positions[mask], self.labels[mask]


def _extraction_key(cfg: ScaleConfig, n_anchors: int, manifest: DatasetManifest) -> str:
    # labels change whenever generation settings do, so folding them in
    # invalidates the cache if the dataset is rebuilt in place
    payload = {
        "scale_config": cfg.to_dict(),
        "n_anchors": n_anchors,
        "version": 1,
        "dataset": [(r.pair_id, r.pair_seed, r.label) for r in manifest.records],
    }
    return json.dumps(payload, sort_keys=True)


def dataset_features(
    root,
    manifest: DatasetManifest | None = None,
    cfg: ScaleConfig | None = None,
    n_anchors: int = 32,
    cache: bool = True,
) -> FeatureBundle:
    """Extracts (or loads cached) anchor features for every pair in a dataset.

    Each pair's subsampling seed is its stored pair seed, so the cache is
    valid for any training seed. The npz lives next to the manifest, named
    by a hash of the extraction config.
    """
    root = os.fspath(root)
    manifest = manifest if manifest is not None else load_manifest(root)
    cfg = cfg if cfg is not None else ScaleConfig()
    key = _extraction_key(cfg, n_anchors, manifest)
    digest = hashlib.sha256(key.encode()).hexdigest()[:12]
    cache_path = os.path.join(root, f"features_{digest}.npz")
    if cache and os.path.exists(cache_path):
        with np.load(cache_path, allow_pickle=False) as data:
            if str(data["key"]) == key:
                return FeatureBundle(
                    features=data["features"],
                    positions=data["positions"],
                    labels=data["labels"],
                    pair_ids=data["pair_ids"],
                    splits=data["splits"],
                )
    feats, poss, labels, ids, splits = [], [], [], [], []
    for record in manifest.records:
        pair = load_pair(root, record)
        anchors = extract_pair_features(pair, n_anchors, cfg, seed=record.pair_seed)
        F, P = features_matrix(anchors)
        feats.append(F)
        poss.append(P)
        labels.append(pair.label)
        ids.append(record.pair_id)
        splits.append(record.split)
    bundle = FeatureBundle(
        features=np.stack(feats),
        positions=np.stack(poss),
        labels=np.array(labels),
        pair_ids=np.array(ids),
        splits=np.array(splits),
    )
    if cache:
        tmp = cache_path + ".tmp"
        with open(tmp, "wb") as fh:
            np.savez_compressed(
                fh,
                key=np.array(key),
                features=bundle.features,
                positions=bundle.positions,
                labels=bundle.labels,
                pair_ids=bundle.pair_ids,
                splits=bundle.splits,
            )
        os.replace(tmp, cache_path)
    return bundle


def standardization(train_features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and deviation over all training tokens, floored."""
    flat = train_features.reshape(-1, train_features.shape[-1])
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-8)
    return mean, std


@dataclass
class TrainResult:
    params: ModelParams
    feature_mean: np.ndarray
    feature_std: np.ndarray
    history: list[dict]
    best_epoch: int
    best_val_rmse: float


def _predict_many(params, mean, std, F, P, neighbors=None) -> np.ndarray:
    preds = np.empty(F.shape[0])
    for i in range(F.shape[0]):
        nbr = neighbors[i] if neighbors is not None else None
        preds[i] = forward((F[i] - mean) / std, P[i], params, neighbors=nbr)
    return preds


def train_on_bundle(bundle: FeatureBundle, cfg: TrainConfig) -> TrainResult:
    """Adam over squared error; returns the best-validation parameters."""
    F_tr, P_tr, y_tr = bundle.split("train")
    F_va, P_va, y_va = bundle.split("val")
    n_train = F_tr.shape[0]
    if n_train == 0:
        raise ValueError("empty train split")
    mean, std = standardization(F_tr)
    F_tr = (F_tr - mean) / std
    params = init_params(
        cfg.seed,
        n_scales=cfg.scale_config.n_scales,
        tau=cfg.tau,
        attention_mode=cfg.attention_mode,
        k_neighbors=cfg.k_neighbors,
        pos_scale=cfg.scale_config.radii[0],
    )
    nbr_tr = [neighbor_indices(P_tr[i], cfg.k_neighbors) for i in range(n_train)]
    nbr_va = [neighbor_indices(P_va[i], cfg.k_neighbors) for i in range(F_va.shape[0])]
    flat = params.flatten()
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    step = 0
    best_rmse = math.inf
    best_flat = flat.copy()
    best_epoch = 0
    since_best = 0
    history: list[dict] = []
    rng = np.random.default_rng(np.random.SeedSequence((int(cfg.seed), 29)))
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grad = np.zeros_like(flat)
            batch_loss = 0.0
            for i in batch:
                li, gi = loss_gradient(F_tr[i], P_tr[i], y_tr[i], params, neighbors=nbr_tr[i])
                grad += gi
                batch_loss += li
            grad /= batch.shape[0]
            batch_loss /= batch.shape[0]
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}, step {step}"
                )
            step += 1
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
            m_hat = m / (1.0 - cfg.beta1**step)
            v_hat = v / (1.0 - cfg.beta2**step)
            flat = flat - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
            params = params.with_flat(flat)
            epoch_loss += batch_loss * batch.shape[0]
        # selection metric: validation RMSE, or training RMSE if no val split
        if F_va.shape[0] > 0:
            preds = _predict_many(params, mean, std, F_va, P_va, nbr_va)
            sel_rmse = float(np.sqrt(np.mean((preds - y_va) ** 2)))
        else:
            sel_rmse = math.sqrt(epoch_loss / n_train)
        if not np.isfinite(sel_rmse):
            raise TrainingDivergedError(f"validation RMSE non-finite at epoch {epoch}")
        history.append(
            {"epoch": epoch, "train_loss": epoch_loss / n_train, "val_rmse": sel_rmse}
        )
        if sel_rmse < best_rmse - 1e-12:
            best_rmse = sel_rmse
            best_flat = flat.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    return TrainResult(
        params=params.with_flat(best_flat),
        feature_mean=mean,
        feature_std=std,
        history=history,
        best_epoch=best_epoch,
        best_val_rmse=best_rmse,
    )


def train(root, cfg: TrainConfig) -> TrainResult:
    """Extracts (or loads) features for the dataset under `root`, then trains."""
    bundle = dataset_features(
        root, cfg=cfg.scale_config, n_anchors=cfg.n_anchors
    )
    return train_on_bundle(bundle, cfg)


NO_VARIANCE = float("nan")


def metrics(labels: np.ndarray, predictions: np.ndarray) -> tuple[float, float, float]:
    """(rmse, mae, r_squared); R^2 is NaN when the labels have no variance."""
    labels = np.asarray(labels, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if labels.shape != predictions.shape or labels.ndim != 1 or labels.shape[0] == 0:
        raise ValueError("labels and predictions must be equal-length 1-d arrays")
    err = predictions - labels
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    ss_res = float(np.sum(err**2))
    ss_tot = float(np.sum((labels - labels.mean()) ** 2))
    r2 = NO_VARIANCE if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return rmse, mae, r2


@dataclass
class EvalReport:
    rmse: float
    mae: float
    r_squared: float  # NaN when label variance is zero
    n_samples: int
    rows: list[tuple[float, float]]  # (label, prediction)

    def __post_init__(self):
        if self.rmse < self.mae - 1e-12 or self.mae < 0:
            raise ValueError("rmse >= mae >= 0 must hold")
        if not math.isnan(self.r_squared) and self.r_squared > 1.0 + 1e-12:
            raise ValueError("r_squared cannot exceed 1")

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mae": self.mae,
            "r_squared": None if math.isnan(self.r_squared) else self.r_squared,
            "n_samples": self.n_samples,
            "rows": [list(r) for r in self.rows],
        }


def report_from_predictions(labels: np.ndarray, predictions: np.ndarray) -> EvalReport:
    rmse, mae, r2 = metrics(labels, predictions)
    return EvalReport(
        rmse=rmse,
        mae=mae,
        r_squared=r2,
        n_samples=int(labels.shape[0]),
        rows=list(zip(labels.tolist(), np.asarray(predictions).tolist())),
    )


def evaluate_bundle(
    bundle: FeatureBundle,
    params: ModelParams,
    feature_mean: np.ndarray,
    feature_std: np.ndarray,
    split: str = "test",
) -> EvalReport:
    F, P, y = bundle.split(split)
    if F.shape[0] == 0:
        raise ValueError(f"split {split!r} is empty")
    preds = _predict_many(params, feature_mean, feature_std, F, P)
    return report_from_predictions(y, preds)


def evaluate(root, checkpoint: dict, split: str = "test") -> EvalReport:
    """Evaluates a loaded checkpoint on one split of a stored dataset."""
    bundle = dataset_features(
        root, cfg=checkpoint["scale_config"], n_anchors=checkpoint["n_anchors"]
    )
    return evaluate_bundle(
        bundle, checkpoint["params"], checkpoint["feature_mean"],
        checkpoint["feature_std"], split,
    )


def constant_baseline_rmse(train_labels: np.ndarray, eval_labels: np.ndarray) -> float:
    """RMSE of always predicting the training-label mean."""
    mean = float(np.mean(train_labels))
    return float(np.sqrt(np.mean((np.asarray(eval_labels) - mean) ** 2)))


SINGLE_SCALE_COLUMNS = {
    s: list(range(5 * s, 5 * s + 5)) for s in range(3)
}


def single_scale_bundle(bundle: FeatureBundle, scale_index: int, n_scales: int) -> FeatureBundle:
    """Slices one scale's block (plus globals) out of a multiscale bundle."""
    if not 0 <= scale_index < n_scales:
        raise ValueError("scale_index out of range")
    cols = list(range(5 * scale_index, 5 * scale_index + 5)) + [
        5 * n_scales, 5 * n_scales + 1, 5 * n_scales + 2
    ]
    return FeatureBundle(
        features=bundle.features[:, :, cols],
        positions=bundle.positions,
        labels=bundle.labels,
        pair_ids=bundle.pair_ids,
        splits=bundle.splits,
    )


def ablation_variants(cfg: TrainConfig) -> list[tuple[str, TrainConfig, int | None]]:
    """(variant name, config, scale index or None) for the radius ablation."""
    variants: list[tuple[str, TrainConfig, int | None]] = []
    for s, radius in enumerate(cfg.scale_config.radii):
        single = replace(
            cfg,
            scale_config=replace(cfg.scale_config, radii=(radius,)),
            attention_mode="tempered",
        )
        variants.append((f"single_{radius:g}", single, s))
    variants.append(("concat", replace(cfg, attention_mode="uniform"), None))
    variants.append(("attention", replace(cfg, attention_mode="tempered"), None))
    return variants


def ablate_radius(
    datasets: dict[str, str],
    cfg: TrainConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
) -> list[dict]:
    """Trains every variant on every dataset; one row per (dataset, variant).

    All variants share one multiscale feature extraction per dataset; the
    single-scale variants train on a column slice of it.
    """
    rows = []
    for name, root in datasets.items():
        base = dataset_features(root, cfg=cfg.scale_config, n_anchors=cfg.n_anchors)
        for variant, vcfg, scale_index in ablation_variants(cfg):
            bundle = (
                base
                if scale_index is None
                else single_scale_bundle(base, scale_index, cfg.scale_config.n_scales)
            )
            seed_rmses = []
            n_params = None
            for seed in seeds:
                result = train_on_bundle(bundle, replace(vcfg, seed=seed))
                report = evaluate_bundle(
                    bundle, result.params, result.feature_mean, result.feature_std, "test"
                )
                seed_rmses.append(report.rmse)
                n_params = result.params.n_parameters
            rows.append(
                {
                    "dataset": name,
                    "variant": variant,
                    "n_params": n_params,
                    "rmse_mean": float(np.mean(seed_rmses)),
                    "rmse_per_seed": seed_rmses,
                }
            )
    return rows


def ablate_temperature(
    root,
    cfg: TrainConfig,
    taus: tuple[float, ...] = (1.0, 0.8, 0.6, 0.4),
) -> list[dict]:
    """Trains the attention model at each temperature; reports test RMSE."""
    bundle = dataset_features(root, cfg=cfg.scale_config, n_anchors=cfg.n_anchors)
    rows = []
    for tau in taus:
        result = train_on_bundle(bundle, replace(cfg, tau=tau, attention_mode="tempered"))
        report = evaluate_bundle(
            bundle, result.params, result.feature_mean, result.feature_std, "test"
        )
        rows.append({"tau": tau, "rmse": report.rmse, "best_val_rmse": result.best_val_rmse})
    return rows


def write_csv(path, header: list[str], rows: list[list]) -> None:
    """Minimal CSV writer: numeric cells via repr-ish %.12g, atomic rename."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [
                f"{c:.12g}" if isinstance(c, float) else str(c) for c in row
            ]
            fh.write(",".join(cells) + "\n")
    os.replace(tmp, path)
