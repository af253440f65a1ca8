"""Quantitative evaluation: image metrics, latent probes, and the report.

The probe protocol is deliberately rigid.  Disease probes train on the
train-split AD/CN subjects and evaluate on the test-split AD/CN subjects;
domain probes see CN subjects only, in both splits.  Each subject contributes
exactly one (seeded) image.  An optional :class:`RecordAudit` collects every
record an evaluation touches so the protocol itself can be asserted on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.signal import correlate
from torch import nn

from .core import (
    ContractError,
    Dataset,
    Diagnosis,
    EmptyInputError,
    Image,
    Split,
    SubjectRecord,
    filter_records,
    one_per_subject,
)
from .harmonizers import model_reconstruction
from .nets import ModelBundle, encode_images

FeatureSource = "ModelBundle | Callable[[list[SubjectRecord]], np.ndarray]"


def _values(x) -> np.ndarray:
    arr = x.values if isinstance(x, Image) else np.asarray(x)
    return arr.astype(np.float64)


def rmse(x, x_prime) -> float:
    """Root mean squared error over all elements."""
    a, b = _values(x), _values(x_prime)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise EmptyInputError("rmse of empty arrays")
    diff = a - b
    return float(np.sqrt(np.mean(diff * diff)))


def _gaussian_kernel(window: int, sigma: float, ndim: int) -> np.ndarray:
    half = (window - 1) / 2.0
    coords = np.arange(window, dtype=np.float64) - half
    one = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    kernel = one
    for _ in range(ndim - 1):
        kernel = np.multiply.outer(kernel, one)
    return kernel / kernel.sum()


def ssim(
    x,
    x_prime,
    *,
    data_range: float | None = None,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean local structural similarity with a Gaussian window.

    Local means/variances/covariance are Gaussian-weighted (default 11-tap,
    sigma 1.5) and the map is averaged over the valid interior only, so every
    window lies fully inside the image.  ``data_range`` is the dynamic range
    L; when omitted it is inferred from the joint min/max of both images.
    Works for (C, H, W) and (C, D, H, W); channels are averaged.
    """
    a, b = _values(x), _values(x_prime)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim not in (3, 4):
        raise ContractError(f"ssim expects (C, H, W) or (C, D, H, W), got {a.shape}")
    if window < 3 or window % 2 == 0:
        raise ContractError(f"window must be odd and >= 3, got {window}")
    spatial = a.shape[1:]
    if min(spatial) < window:
        raise ContractError(f"image spatial dims {spatial} smaller than window {window}")
    if data_range is None:
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        data_range = float(hi - lo) if hi > lo else 1.0
    if data_range <= 0:
        raise ContractError(f"data_range must be > 0, got {data_range}")

    kernel = _gaussian_kernel(window, sigma, a.ndim - 1)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def local_mean(img: np.ndarray) -> np.ndarray:
        return correlate(img, kernel, mode="valid", method="direct")

    scores = []
    for ch in range(a.shape[0]):
        xa, xb = a[ch], b[ch]
        mu_a = local_mean(xa)
        mu_b = local_mean(xb)
        var_a = local_mean(xa * xa) - mu_a * mu_a
        var_b = local_mean(xb * xb) - mu_b * mu_b
        cov = local_mean(xa * xb) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def macro_f1(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support scores 0."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise ContractError(f"predictions {preds.shape} and labels {labs.shape} must be equal 1-d")
    if preds.size == 0:
        raise EmptyInputError("macro_f1 of empty inputs")
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    for name, arr in (("predictions", preds), ("labels", labs)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ContractError(f"{name} outside [0, {num_classes})")
    f1s = []
    for c in range(num_classes):
        tp = int(np.sum((preds == c) & (labs == c)))
        fp = int(np.sum((preds == c) & (labs != c)))
        fn = int(np.sum((preds != c) & (labs == c)))
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(f1s))


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 128
    epochs: int = 200
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.epochs < 1 or self.lr <= 0:
            raise ContractError("probe config values must be positive")


@dataclass
class Probe:
    """A trained feature classifier with its standardization statistics."""

    model: nn.Module
    mean: np.ndarray
    std: np.ndarray
    num_classes: int

    def predict(self, features: np.ndarray) -> np.ndarray:
        feats = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        with torch.no_grad():
            logits = self.model(torch.from_numpy(feats.astype(np.float32)))
        return logits.argmax(dim=1).numpy()


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    config: ProbeConfig,
    num_classes: int | None = None,
) -> Probe:
    """Train a three-layer MLP probe (full batch, Adam, cross-entropy).

    Features are standardized with their own statistics so probes behave the
    same across models whose latent scales differ.
    """
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels)
    if feats.ndim != 2 or labs.shape != (feats.shape[0],):
        raise ContractError(f"features {feats.shape} and labels {labs.shape} mismatch")
    classes = np.unique(labs)
    if classes.size < 2:
        raise ContractError("probe training needs >= 2 classes in the labels")
    k = int(num_classes if num_classes is not None else labs.max() + 1)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    z = ((feats - mean) / std).astype(np.float32)

    torch.manual_seed(config.seed)
    model = nn.Sequential(
        nn.Linear(feats.shape[1], config.hidden),
        nn.ReLU(),
        nn.Linear(config.hidden, k),
    )
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    loss_fn = nn.CrossEntropyLoss()
    xt = torch.from_numpy(z)
    yt = torch.from_numpy(labs.astype(np.int64))
    for _ in range(config.epochs):
        opt.zero_grad(set_to_none=True)
        loss = loss_fn(model(xt), yt)
        loss.backward()
        opt.step()
    model.eval()
    return Probe(model=model, mean=mean, std=std, num_classes=k)


@dataclass
class RecordAudit:
    """Collects every record an evaluation touches, keyed by role."""

    touched: list[tuple[str, SubjectRecord]] = field(default_factory=list)

    def note(self, role: str, records: Sequence[SubjectRecord]) -> None:
        self.touched.extend((role, r) for r in records)

    def records(self, role: str | None = None) -> list[SubjectRecord]:
        return [r for ro, r in self.touched if role is None or ro == role]


def _featurize(source, dataset: Dataset, records: list[SubjectRecord]) -> np.ndarray:
    if isinstance(source, ModelBundle):
        images = [dataset.load_image(r) for r in records]
        return encode_images(source, images)
    if callable(source):
        return np.asarray(source(records), dtype=np.float64)
    raise ContractError(f"feature source must be a ModelBundle or callable, got {type(source)}")


def _probe_f1(
    source,
    dataset: Dataset,
    seed: int,
    *,
    diagnoses,
    label_of,
    num_classes: int,
    hidden: int,
    probe: ProbeConfig | None,
    audit: RecordAudit | None,
    what: str,
) -> float:
    pools = {}
    for split, role in ((Split.TRAIN, "probe-train"), (Split.TEST, "probe-eval")):
        recs = filter_records(dataset, split, diagnoses=diagnoses)
        recs = one_per_subject(recs, seed)
        if not recs:
            raise EmptyInputError(f"{what} evaluation has no {split.value} records")
        labels = np.array([label_of(r) for r in recs])
        if np.unique(labels).size < num_classes:
            raise ContractError(
                f"{what} evaluation needs all {num_classes} classes in the "
                f"{split.value} split, found {np.unique(labels).size}"
            )
        if audit is not None:
            audit.note(role, recs)
        pools[split] = (recs, labels)
    cfg = probe or ProbeConfig(hidden=hidden, seed=seed)
    train_recs, train_labels = pools[Split.TRAIN]
    test_recs, test_labels = pools[Split.TEST]
    trained = train_probe(_featurize(source, dataset, train_recs), train_labels, cfg,
                          num_classes=num_classes)
    preds = trained.predict(_featurize(source, dataset, test_recs))
    return macro_f1(preds, test_labels, num_classes)


def evaluate_disease(
    source,
    dataset: Dataset,
    seed: int,
    probe: ProbeConfig | None = None,
    audit: RecordAudit | None = None,
) -> float:
    """Macro-F1 of an AD-vs-CN probe on the source's features (CN=0, AD=1)."""
    return _probe_f1(
        source, dataset, seed,
        diagnoses=(Diagnosis.CN, Diagnosis.AD),
        label_of=lambda r: 1 if r.diagnosis == Diagnosis.AD else 0,
        num_classes=2, hidden=128, probe=probe, audit=audit, what="disease",
    )


def evaluate_domain(
    source,
    dataset: Dataset,
    seed: int,
    probe: ProbeConfig | None = None,
    audit: RecordAudit | None = None,
) -> float:
    """Macro-F1 of a domain probe on CN subjects only; low is good for z_u."""
    return _probe_f1(
        source, dataset, seed,
        diagnoses=(Diagnosis.CN,),
        label_of=lambda r: r.domain,
        num_classes=dataset.num_domains, hidden=32, probe=probe, audit=audit, what="domain",
    )


def reconstruction_metrics(
    bundle: ModelBundle,
    dataset: Dataset,
    seed: int,
    data_range: float = 1.0,
    audit: RecordAudit | None = None,
) -> tuple[float, float]:
    """Mean (rmse, ssim) over one seeded test image per subject."""
    records = one_per_subject(dataset.split_records(Split.TEST), seed)
    if not records:
        raise EmptyInputError("test split has no records")
    if audit is not None:
        audit.note("reconstruction", records)
    rmses, ssims = [], []
    for rec in records:
        x = dataset.load_image(rec)
        x_prime = model_reconstruction(bundle, x)
        rmses.append(rmse(x, x_prime))
        ssims.append(ssim(x, x_prime, data_range=data_range))
    return float(np.mean(rmses)), float(np.mean(ssims))


# latent availability / z_d availability / pseudo-linear interpretability
MODEL_FLAGS: dict[str, tuple[bool, bool, bool]] = {
    "cae": (True, False, False),
    "noise": (True, False, False),
    "combat": (False, False, False),
    "ada": (True, False, False),
    "se-ada": (True, True, False),
    "pl-se-ada": (True, True, True),
}

CSV_HEADER = (
    "model,rmse,ssim,disease_f1,domain_f1,"
    "latent_available,z_d_available,interpretable,alpha,seed,dataset_hash"
)


@dataclass(frozen=True)
class MetricsReport:
    """One comparison-table row plus run metadata.

    ``rmse``/``ssim`` are None for feature-space models with no image
    reconstruction; they render as ``n/a``.
    """

    model: str
    rmse: float | None
    ssim: float | None
    disease_f1: float
    domain_f1: float
    latent_available: bool
    z_d_available: bool
    interpretable: bool
    alpha: float | None
    seed: int
    dataset_hash: str

    def __post_init__(self) -> None:
        if self.model not in MODEL_FLAGS:
            raise ContractError(f"unknown model name {self.model!r}")
        if self.rmse is not None and self.rmse < 0:
            raise ContractError(f"rmse must be >= 0, got {self.rmse}")
        if self.ssim is not None and not -1.0 <= self.ssim <= 1.0:
            raise ContractError(f"ssim must lie in [-1, 1], got {self.ssim}")
        for name in ("disease_f1", "domain_f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "rmse": self.rmse,
            "ssim": self.ssim,
            "disease_f1": self.disease_f1,
            "domain_f1": self.domain_f1,
            "latent_available": self.latent_available,
            "z_d_available": self.z_d_available,
            "interpretable": self.interpretable,
            "alpha": self.alpha,
            "seed": self.seed,
            "dataset_hash": self.dataset_hash,
        }

    def csv_row(self) -> str:
        def num(v):
            return "n/a" if v is None else f"{v:.6f}"

        def flag(v):
            return "yes" if v else "no"

        alpha = "n/a" if self.alpha is None else f"{self.alpha:g}"
        return (
            f"{self.model},{num(self.rmse)},{num(self.ssim)},"
            f"{self.disease_f1:.6f},{self.domain_f1:.6f},"
            f"{flag(self.latent_available)},{flag(self.z_d_available)},"
            f"{flag(self.interpretable)},{alpha},{self.seed},{self.dataset_hash}"
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: Path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))


def write_reports_csv(reports: Sequence[MetricsReport], path: Path) -> None:
    lines = [CSV_HEADER] + [r.csv_row() for r in reports]
    Path(path).write_text("\n".join(lines) + "\n")


def build_report(
    model_name: str,
    dataset: Dataset,
    seed: int,
    *,
    bundle: ModelBundle | None = None,
    features: Callable | None = None,
    alpha: float | None = None,
    data_range: float = 1.0,
    audit: RecordAudit | None = None,
) -> MetricsReport:
    """Run the full evaluation battery for one model.

    Pass ``bundle`` for models that reconstruct images (rmse/ssim + probes on
    z_u) or ``features`` for feature-space baselines (probes only; rmse and
    ssim become n/a).
    """
    if (bundle is None) == (features is None):
        raise ContractError("pass exactly one of bundle or features")
    source = bundle if bundle is not None else features
    if bundle is not None:
        rm, ss = reconstruction_metrics(bundle, dataset, seed, data_range, audit)
        alpha = bundle.alpha if alpha is None else alpha
    else:
        rm, ss = None, None
    disease = evaluate_disease(source, dataset, seed, audit=audit)
    domain = evaluate_domain(source, dataset, seed, audit=audit)
    flags = MODEL_FLAGS[model_name]
    return MetricsReport(
        model=model_name,
        rmse=rm,
        ssim=ss,
        disease_f1=disease,
        domain_f1=domain,
        latent_available=flags[0],
        z_d_available=flags[1],
        interpretable=flags[2],
        alpha=alpha,
        seed=seed,
        dataset_hash=dataset.content_hash(),
    )
