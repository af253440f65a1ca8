"""Qualitative outputs backed by machine-readable sidecars.

Every figure writes a JSON (and, for scatters, CSV) sidecar holding the raw
numbers the figure renders, so qualitative claims ("the style component is a
smooth haze", "style codes cluster by domain") can be asserted numerically in
tests instead of eyeballed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy.ndimage import laplace
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score

from .core import ConfigError, ContractError, Dataset, Image, SubjectRecord
from .harmonizers import reconstruct_pl_se_ada
from .nets import ModelBundle

BACKENDS = ("principal-components", "neighbor-embedding")

DEFAULT_ALPHAS = (0.05, 0.1, 0.2, 0.5, 1.0, 1.5)

STRETCH_PERCENTILES = (2.0, 98.0)


@dataclass(frozen=True)
class ProjectionResult:
    coords: np.ndarray
    backend: str
    seed: int
    domains: tuple[int, ...] = ()
    diagnoses: tuple[str, ...] = ()
    subject_ids: tuple[str, ...] = ()
    params: dict = field(default_factory=dict)


def _pca_2d(features: np.ndarray) -> np.ndarray:
    centered = features - features.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    # deterministic sign: largest-magnitude loading of each component is positive
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def project_2d(
    features: np.ndarray,
    backend: str = "principal-components",
    params: dict | None = None,
    seed: int = 0,
    records: Sequence[SubjectRecord] | None = None,
) -> ProjectionResult:
    """Project feature vectors to 2-d with the chosen backend.

    ``principal-components`` is implemented here (SVD with a deterministic
    sign convention); ``neighbor-embedding`` delegates to scikit-learn's TSNE
    with a fixed random state.  Optional ``records`` attach per-point
    metadata for scatter plots.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ContractError(f"features must be (N, d), got shape {feats.shape}")
    n, d = feats.shape
    if n < 10:
        raise ContractError(f"need >= 10 points to project, got {n}")
    if d < 2:
        raise ContractError(f"need >= 2 feature dims, got {d}")
    if records is not None and len(records) != n:
        raise ContractError(f"{len(records)} records for {n} points")
    params = dict(params or {})

    if backend == "principal-components":
        coords = _pca_2d(feats)
    elif backend == "neighbor-embedding":
        perplexity = float(params.pop("perplexity", min(30.0, (n - 1) / 3.0)))
        method = params.pop("method", "exact" if n < 2000 else "barnes_hut")
        tsne = TSNE(
            n_components=2,
            random_state=seed,
            init="pca",
            perplexity=perplexity,
            method=method,
            **params,
        )
        coords = tsne.fit_transform(feats).astype(np.float64)
        params = {"perplexity": perplexity, "method": method}
    else:
        raise ConfigError(f"unknown backend {backend!r}; available: {', '.join(BACKENDS)}")

    meta = dict(domains=(), diagnoses=(), subject_ids=())
    if records is not None:
        meta = dict(
            domains=tuple(r.domain for r in records),
            diagnoses=tuple(r.diagnosis.value for r in records),
            subject_ids=tuple(r.subject_id for r in records),
        )
    return ProjectionResult(coords=coords, backend=backend, seed=seed, params=params, **meta)


def percentile_stretch(values: np.ndarray, lo: float = 2.0, hi: float = 98.0) -> np.ndarray:
    """Rescale to [0, 1] between the lo/hi percentiles (for display only)."""
    p_lo, p_hi = np.percentile(values, [lo, hi])
    if p_hi <= p_lo:
        return np.zeros_like(values)
    return np.clip((values - p_lo) / (p_hi - p_lo), 0.0, 1.0)


def edge_energy(image: Image) -> float:
    """Variance of the Laplacian-filtered first channel; structure proxy."""
    return float(np.var(laplace(image.values[0].astype(np.float64))))


def _panel(ax, values: np.ndarray, title: str) -> None:
    ax.imshow(values, cmap="gray", vmin=0.0, vmax=1.0)
    ax.set_title(title, fontsize=8)
    ax.axis("off")


def emit_reconstruction_grid(
    bundle: ModelBundle,
    images: Sequence[Image],
    alpha: float,
    out_path: Path,
) -> dict:
    """Input / anatomy part / stretched style part / recombination, one row per image.

    Only pseudo-linear bundles decompose; anything else is an error.  The
    sidecar stores raw per-panel statistics (the style panel is
    percentile-stretched for display, stats are computed on raw values).
    """
    if bundle.variant != "pl-se-ada":
        raise ContractError(
            f"bundle variant {bundle.variant!r} has no image-space decomposition"
        )
    if not images:
        raise ContractError("no images to render")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    fig, axes = plt.subplots(len(images), 4, figsize=(8, 2 * len(images)), squeeze=False)
    for i, image in enumerate(images):
        dec = reconstruct_pl_se_ada(bundle, image, alpha)
        x_d_raw = dec.x_d.values[0]
        _panel(axes[i][0], image.values[0], "input")
        _panel(axes[i][1], dec.x_u.values[0], "anatomy part")
        _panel(axes[i][2], percentile_stretch(x_d_raw, *STRETCH_PERCENTILES), "style part (stretched)")
        _panel(axes[i][3], dec.x_prime.values[0], f"recombined (a={alpha:g})")
        gap = float(
            np.max(
                np.abs(
                    dec.x_prime.values.astype(np.float64)
                    - (dec.x_u.values.astype(np.float64) + alpha * dec.x_d.values.astype(np.float64))
                )
            )
        )
        rows.append(
            {
                "input_mean": float(image.values.mean()),
                "x_u_mean": float(dec.x_u.values.mean()),
                "x_d_mean": float(dec.x_d.values.mean()),
                "x_prime_mean": float(dec.x_prime.values.mean()),
                "edge_energy_x_u": edge_energy(dec.x_u),
                "edge_energy_x_d": edge_energy(dec.x_d),
                "recombination_gap": gap,
            }
        )
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    sidecar = {
        "alpha": alpha,
        "stretch_percentiles": list(STRETCH_PERCENTILES),
        "rows": rows,
    }
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")
    return sidecar


def emit_alpha_strip(
    bundle: ModelBundle,
    image: Image,
    alphas: Sequence[float],
    out_path: Path,
) -> dict:
    """One row of recombinations x_u + a * x_d across ascending mixing weights."""
    if bundle.variant != "pl-se-ada":
        raise ContractError(f"bundle variant {bundle.variant!r} has no image-space decomposition")
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ContractError("alphas must be nonempty")
    if any(a < 0 for a in alphas) or any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ContractError(f"alphas must be nonnegative and ascending, got {alphas}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dec = reconstruct_pl_se_ada(bundle, image, alphas[0])
    x_u = dec.x_u.values.astype(np.float64)
    x_d = dec.x_d.values.astype(np.float64)
    fig, axes = plt.subplots(1, len(alphas), figsize=(2 * len(alphas), 2.2), squeeze=False)
    panels = []
    for j, a in enumerate(alphas):
        mixed = x_u + a * x_d
        _panel(axes[0][j], mixed[0], f"a={a:g}")
        panels.append(
            {
                "alpha": a,
                "mean_intensity": float(mixed.mean()),
                "mean_abs_style_term": float(np.mean(np.abs(a * x_d))),
            }
        )
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    sidecar = {"alphas": alphas, "panels": panels}
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")
    return sidecar


def _silhouette(coords: np.ndarray, labels: Sequence) -> float | None:
    labels = np.asarray(labels)
    if labels.size != coords.shape[0] or np.unique(labels).size < 2:
        return None
    return float(silhouette_score(coords, labels))


def emit_scatter(projection: ProjectionResult, color_by: str, out_path: Path) -> dict:
    """Scatter a projection colored by domain or diagnosis; PNG + CSV + JSON.

    The CSV stores coordinates at full precision so re-rendering from it
    reproduces the figure exactly.
    """
    if color_by not in ("domain", "diagnosis"):
        raise ContractError(f"color_by must be 'domain' or 'diagnosis', got {color_by!r}")
    groups = projection.domains if color_by == "domain" else projection.diagnoses
    if not groups:
        raise ContractError(f"projection carries no {color_by} metadata")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    coords = projection.coords
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for value in sorted(set(groups)):
        mask = np.array([g == value for g in groups])
        ax.scatter(coords[mask, 0], coords[mask, 1], s=12, label=f"{color_by} {value}")
    ax.legend(fontsize=7)
    ax.set_title(f"{projection.backend} ({color_by})", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)

    csv_path = out_path.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "domain", "diagnosis", "subject_id"])
        for i in range(coords.shape[0]):
            writer.writerow(
                [
                    f"{coords[i, 0]:.17g}",
                    f"{coords[i, 1]:.17g}",
                    projection.domains[i] if projection.domains else "",
                    projection.diagnoses[i] if projection.diagnoses else "",
                    projection.subject_ids[i] if projection.subject_ids else "",
                ]
            )
    sidecar = {
        "backend": projection.backend,
        "seed": projection.seed,
        "n_points": int(coords.shape[0]),
        "color_by": color_by,
        "silhouette_domain": _silhouette(coords, projection.domains)
        if projection.domains
        else None,
        "silhouette_diagnosis": _silhouette(coords, projection.diagnoses)
        if projection.diagnoses
        else None,
    }
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")
    return sidecar


def load_projection_csv(path: Path) -> ProjectionResult:
    """Round-trip a scatter CSV back into a ProjectionResult."""
    rows = list(csv.DictReader(Path(path).open()))
    if not rows:
        raise ContractError(f"projection csv {path} is empty")
    coords = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    return ProjectionResult(
        coords=coords,
        backend="csv-roundtrip",
        seed=0,
        domains=tuple(int(r["domain"]) for r in rows) if rows[0]["domain"] != "" else (),
        diagnoses=tuple(r["diagnosis"] for r in rows) if rows[0]["diagnosis"] != "" else (),
        subject_ids=tuple(r["subject_id"] for r in rows) if rows[0]["subject_id"] != "" else (),
    )
