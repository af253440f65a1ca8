"""Shared domain types, the dataset manifest format, and record-selection rules.

Everything downstream builds on the types here: an :class:`Image` is a
real-valued raster, a :class:`SubjectRecord` ties one image file to a subject,
acquisition domain, diagnosis and split, and a :class:`Dataset` enforces the
protocol-level invariants (subject-disjoint splits, every domain present in
every split).  The on-disk format is deliberately primitive: one
``manifest.json`` plus headerless little-endian float32 image files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_NAME = "manifest.json"


class StyleSepError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(StyleSepError):
    """Invalid configuration value or combination."""


class ContractError(StyleSepError):
    """An operation was called with arguments that violate its contract."""


class EmptyInputError(ContractError):
    """An operation that needs a nonempty input got an empty one."""


class ArtifactError(StyleSepError):
    """A required on-disk artifact is missing or malformed."""


class TrainingAbort(StyleSepError):
    """Training hit a non-finite loss; the message carries stage/step context."""


class Diagnosis(str, Enum):
    CN = "CN"
    MCI = "MCI"
    AD = "AD"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class Image:
    """A (C, H, W) or (C, D, H, W) raster of finite floats.

    The pixel array is made read-only at construction; treat images as values.
    ``spacing`` is an optional physical voxel size, unused by the synthetic
    pipeline but carried through for externally sourced data.
    """

    values: np.ndarray
    spacing: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.ndim not in (3, 4):
            raise ContractError(
                f"image must have shape (C, H, W) or (C, D, H, W), got {arr.shape}"
            )
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ContractError("image values must be finite")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        if self.spacing is not None:
            spacing = tuple(float(s) for s in self.spacing)
            if len(spacing) != arr.ndim - 1:
                raise ContractError(
                    f"spacing has {len(spacing)} entries for a {arr.ndim - 1}-d image"
                )
            object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class SubjectRecord:
    """One image of one subject.

    ``image_ref`` is either a path relative to the dataset directory (string)
    or an in-memory :class:`Image` for datasets that never touch disk.
    """

    subject_id: str
    domain: int
    diagnosis: Diagnosis
    split: Split
    image_ref: str | Image

    def __post_init__(self) -> None:
        if not self.subject_id:
            raise ContractError("subject_id must be nonempty")
        if self.domain < 0:
            raise ContractError(f"domain label must be >= 0, got {self.domain}")


@dataclass(frozen=True)
class LatentCode:
    """Latent vectors for one image: invariant part, raw style, expanded style."""

    z_u: np.ndarray
    z_d_prime: np.ndarray
    z_d: np.ndarray

    def __post_init__(self) -> None:
        for name in ("z_u", "z_d_prime", "z_d"):
            vec = np.asarray(getattr(self, name), dtype=np.float64)
            if vec.ndim != 1:
                raise ContractError(f"{name} must be a 1-d vector, got shape {vec.shape}")
            if not np.all(np.isfinite(vec)):
                raise ContractError(f"{name} contains non-finite values")
            vec.setflags(write=False)
            object.__setattr__(self, name, vec)
        if self.z_d.shape != self.z_u.shape:
            raise ContractError(
                f"expanded style code has dim {self.z_d.shape[0]}, "
                f"expected {self.z_u.shape[0]} to match z_u"
            )


# Relative tolerance for the additive-decomposition identity below.
DECEQ_RTOL = 1e-5


@dataclass(frozen=True)
class Decomposition:
    """Additive image-space split of a reconstruction.

    Invariant: ``x_prime == x_u + alpha * x_d`` up to float tolerance, checked
    at construction so a Decomposition cannot exist in an inconsistent state.
    """

    x_u: Image
    x_d: Image
    x_prime: Image
    alpha: float

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if not (self.x_u.shape == self.x_d.shape == self.x_prime.shape):
            raise ContractError(
                "decomposition parts disagree on shape: "
                f"{self.x_u.shape} / {self.x_d.shape} / {self.x_prime.shape}"
            )
        combined = self.x_u.values.astype(np.float64) + self.alpha * self.x_d.values.astype(
            np.float64
        )
        gap = float(np.max(np.abs(self.x_prime.values.astype(np.float64) - combined)))
        scale = max(float(np.max(np.abs(self.x_prime.values))), 1.0)
        if gap > DECEQ_RTOL * scale:
            raise ContractError(
                f"decomposition identity violated: max |x' - (x_u + a*x_d)| = {gap:.3e}"
            )

    @classmethod
    def compose(cls, x_u: Image, x_d: Image, alpha: float) -> "Decomposition":
        """Build the consistent decomposition ``x_u + alpha * x_d``."""
        combined = x_u.values + np.asarray(alpha, dtype=x_u.values.dtype) * x_d.values
        return cls(x_u=x_u, x_d=x_d, x_prime=Image(combined), alpha=float(alpha))


def _default_domain_names(num_domains: int) -> tuple[str, ...]:
    return tuple(f"domain{k}" for k in range(num_domains))


@dataclass
class Dataset:
    """An ordered collection of subject records plus dataset-level metadata.

    Construction validates the full protocol: at least two domains, every
    domain present in both splits, no subject appearing in more than one
    split, and inline images matching the declared shape.
    """

    records: tuple[SubjectRecord, ...]
    num_domains: int
    image_shape: tuple[int, ...]
    generator_seed: int
    provenance: str = "synthetic"
    domain_names: tuple[str, ...] = ()
    base_dir: Path | None = None

    def __post_init__(self) -> None:
        self.records = tuple(self.records)
        self.image_shape = tuple(int(s) for s in self.image_shape)
        if self.num_domains < 2:
            raise ConfigError(f"num_domains must be >= 2, got {self.num_domains}")
        if self.provenance not in ("synthetic", "external"):
            raise ConfigError(f"unknown provenance {self.provenance!r}")
        if not self.domain_names:
            self.domain_names = _default_domain_names(self.num_domains)
        self.domain_names = tuple(str(n) for n in self.domain_names)
        if len(self.domain_names) != self.num_domains:
            raise ConfigError(
                f"{len(self.domain_names)} domain names for {self.num_domains} domains"
            )
        if self.base_dir is not None:
            self.base_dir = Path(self.base_dir)

        split_of: dict[str, Split] = {}
        seen_domains: dict[Split, set[int]] = {Split.TRAIN: set(), Split.TEST: set()}
        for rec in self.records:
            if rec.domain >= self.num_domains:
                raise ContractError(
                    f"record {rec.subject_id} has domain {rec.domain}, "
                    f"dataset declares {self.num_domains}"
                )
            prev = split_of.setdefault(rec.subject_id, rec.split)
            if prev != rec.split:
                raise ContractError(
                    f"subject {rec.subject_id} appears in both splits; "
                    "splits must be subject-disjoint"
                )
            seen_domains[rec.split].add(rec.domain)
            if isinstance(rec.image_ref, Image) and rec.image_ref.shape != self.image_shape:
                raise ContractError(
                    f"record {rec.subject_id} image shape {rec.image_ref.shape} "
                    f"!= dataset shape {self.image_shape}"
                )
        expected = set(range(self.num_domains))
        for split in (Split.TRAIN, Split.TEST):
            if seen_domains[split] != expected:
                missing = sorted(expected - seen_domains[split])
                raise ContractError(
                    f"split {split.value!r} is missing domain labels {missing}"
                )

    def split_records(self, split: Split) -> list[SubjectRecord]:
        return [r for r in self.records if r.split == split]

    def load_image(self, record: SubjectRecord) -> Image:
        if isinstance(record.image_ref, Image):
            return record.image_ref
        if self.base_dir is None:
            raise ArtifactError(
                f"record {record.subject_id} references file {record.image_ref!r} "
                "but the dataset has no base directory"
            )
        return Image(read_raw_image(self.base_dir / record.image_ref, self.image_shape))

    def content_hash(self) -> str:
        """Stable hex digest over metadata, record listing, and pixel data."""
        h = hashlib.sha256()
        h.update(
            json.dumps(
                {
                    "num_domains": self.num_domains,
                    "image_shape": list(self.image_shape),
                    "domain_names": list(self.domain_names),
                    "generator_seed": self.generator_seed,
                },
                sort_keys=True,
            ).encode()
        )
        for rec in self.records:
            h.update(
                f"{rec.subject_id}|{rec.domain}|{rec.diagnosis.value}|{rec.split.value}".encode()
            )
            h.update(self.load_image(rec).values.astype("<f4").tobytes())
        return h.hexdigest()[:16]


def write_raw_image(path: Path, values: np.ndarray) -> None:
    """Write a raster as headerless little-endian float32, row-major."""
    Path(path).write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_raw_image(path: Path, shape: Sequence[int]) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"image file not found: {path}")
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ArtifactError(
            f"{path} holds {data.size} float32 values, shape {tuple(shape)} needs {expected}"
        )
    return data.reshape(tuple(shape)).astype(np.float32)


def save_dataset(dataset: Dataset, out_dir: Path) -> Dataset:
    """Materialize a dataset to ``out_dir`` and return the file-backed version.

    Layout: ``manifest.json`` plus one raw float32 file per record under
    ``images/``.  Records keep their order; file names are derived from the
    subject id and a per-subject counter, so re-running the generator with the
    same spec reproduces the directory bit for bit.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    counters: dict[str, int] = {}
    new_records = []
    manifest_records = []
    for rec in dataset.records:
        k = counters.get(rec.subject_id, 0)
        counters[rec.subject_id] = k + 1
        rel = f"images/{rec.subject_id}_{k:02d}.f32"
        image = dataset.load_image(rec)
        write_raw_image(out_dir / rel, image.values)
        new_records.append(
            SubjectRecord(rec.subject_id, rec.domain, rec.diagnosis, rec.split, rel)
        )
        manifest_records.append(
            {
                "subject_id": rec.subject_id,
                "domain": rec.domain,
                "diagnosis": rec.diagnosis.value,
                "split": rec.split.value,
                "image_file": rel,
            }
        )
    manifest = {
        "num_domains": dataset.num_domains,
        "image_shape": list(dataset.image_shape),
        "domain_names": list(dataset.domain_names),
        "generator_seed": dataset.generator_seed,
        "records": manifest_records,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1) + "\n")
    return Dataset(
        records=tuple(new_records),
        num_domains=dataset.num_domains,
        image_shape=dataset.image_shape,
        generator_seed=dataset.generator_seed,
        provenance=dataset.provenance,
        domain_names=dataset.domain_names,
        base_dir=out_dir,
    )


def load_manifest(dataset_dir: Path, provenance: str = "synthetic") -> Dataset:
    """Load a dataset directory written by :func:`save_dataset`."""
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ArtifactError(f"no {MANIFEST_NAME} in {dataset_dir}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"malformed manifest {manifest_path}: {exc}") from exc
    required = {"num_domains", "image_shape", "domain_names", "generator_seed", "records"}
    missing = required - manifest.keys()
    if missing:
        raise ArtifactError(f"manifest {manifest_path} is missing keys {sorted(missing)}")
    records = tuple(
        SubjectRecord(
            subject_id=r["subject_id"],
            domain=int(r["domain"]),
            diagnosis=Diagnosis(r["diagnosis"]),
            split=Split(r["split"]),
            image_ref=r["image_file"],
        )
        for r in manifest["records"]
    )
    return Dataset(
        records=records,
        num_domains=int(manifest["num_domains"]),
        image_shape=tuple(manifest["image_shape"]),
        generator_seed=int(manifest["generator_seed"]),
        provenance=provenance,
        domain_names=tuple(manifest["domain_names"]),
        base_dir=dataset_dir,
    )


def one_per_subject(records: Iterable[SubjectRecord], seed: int) -> list[SubjectRecord]:
    """Pick one record per distinct subject, seeded, order-stable.

    Subjects are visited in order of first appearance and one of each
    subject's records is chosen with an RNG derived only from ``seed``, so the
    same (records, seed) pair always yields the same subset.  Applying the
    selection to its own output is the identity.
    """
    groups: dict[str, list[SubjectRecord]] = {}
    for rec in records:
        groups.setdefault(rec.subject_id, []).append(rec)
    rng = np.random.default_rng(seed)
    return [grp[int(rng.integers(len(grp)))] for grp in groups.values()]


def select_one_per_subject(dataset: Dataset, split: Split, seed: int) -> list[SubjectRecord]:
    """One seeded record per subject within ``split``."""
    pool = dataset.split_records(split)
    if not pool:
        raise EmptyInputError(f"split {split.value!r} has no records")
    return one_per_subject(pool, seed)


def filter_records(
    dataset: Dataset,
    split: Split,
    diagnoses: Iterable[Diagnosis] | None = None,
    domains: Iterable[int] | None = None,
) -> list[SubjectRecord]:
    """Order-preserving subset of a split; ``None`` means no constraint."""
    diag_set = None if diagnoses is None else set(diagnoses)
    dom_set = None if domains is None else set(domains)
    out = []
    for rec in dataset.records:
        if rec.split != split:
            continue
        if diag_set is not None and rec.diagnosis not in diag_set:
            continue
        if dom_set is not None and rec.domain not in dom_set:
            continue
        out.append(rec)
    return out
