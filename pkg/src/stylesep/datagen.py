"""Synthetic multi-domain phantom dataset.

Disease is encoded geometrically (a central ventricle that grows with
atrophy), acquisition domain is encoded purely in intensity (gain, low-order
polynomial bias field, gamma curve, noise).  The two factors are therefore
orthogonal by construction, which is what makes the downstream probes
meaningful: anything a domain probe reads off an anatomy code is leakage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .core import (
    ConfigError,
    Dataset,
    Diagnosis,
    Image,
    Split,
    SubjectRecord,
    save_dataset,
)

# Per-diagnosis atrophy ranges; disjoint so a ventricle-area oracle works.
ATROPHY_RANGES: dict[Diagnosis, tuple[float, float]] = {
    Diagnosis.CN: (0.0, 0.15),
    Diagnosis.MCI: (0.2, 0.45),
    Diagnosis.AD: (0.5, 0.9),
}

# Thresholds used by the pixel-space oracles (tests) and the structure
# preservation check: tissue is bright, ventricle/background are dark.
TISSUE_THRESHOLD = 0.25
VENTRICLE_THRESHOLD = 0.30

MIN_SIDE = 32


@dataclass(frozen=True)
class PhantomParams:
    """Geometry of one subject's phantom.

    All lengths are in normalized coordinates where the image spans [-1, 1].
    ``atrophy`` in [0, 1] drives ventricle size; everything else is
    subject-level shape variation.
    """

    atrophy: float = 0.0
    brain_radius: float = 0.68
    fold_frequency: float = 9.0
    fold_phase: float = 0.0
    jitter_center: tuple[float, float] = (0.0, 0.0)
    jitter_axis: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.atrophy <= 1.0:
            raise ConfigError(f"atrophy must lie in [0, 1], got {self.atrophy}")
        if not 0.2 <= self.brain_radius <= 0.95:
            raise ConfigError(f"brain_radius {self.brain_radius} out of range [0.2, 0.95]")


@dataclass(frozen=True)
class DomainEffect:
    """Structure-free intensity transform for one acquisition domain.

    Applied as ``clip(gamma_curve(gain * image + bias_field) + noise)`` where
    the bias field is a low-order 2-d polynomial over normalized coordinates
    with coefficients ``(1, x, y, x^2, y^2, x*y)``.
    """

    intensity_gain: float = 1.0
    bias_coeffs: tuple[float, float, float, float, float, float] = (0, 0, 0, 0, 0, 0)
    gamma: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.intensity_gain <= 0:
            raise ConfigError(f"intensity_gain must be > 0, got {self.intensity_gain}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if len(self.bias_coeffs) != 6:
            raise ConfigError("bias_coeffs needs 6 entries: 1, x, y, x^2, y^2, x*y")


# Shipped presets: both domains differ only through their smooth additive
# bias fields (equal gain, gamma, and noise floor).  A purely additive,
# low-order difference keeps the thresholded anatomy intact and admits a
# structure-free style image; multiplicative gain or gamma differences would
# imprint tissue edges onto the domain residual.  The small constant offset
# in domain 0 keeps background noise away from the clip at zero so neither
# domain carries a clipping signature.
DOMAIN_PRESETS: tuple[DomainEffect, ...] = (
    DomainEffect(
        intensity_gain=1.0,
        bias_coeffs=(0.04, 0.01, 0.005, 0.0, 0.0, 0.0),
        gamma=1.0,
        noise_sigma=0.015,
    ),
    DomainEffect(
        intensity_gain=1.0,
        bias_coeffs=(0.12, -0.015, 0.02, 0.03, 0.025, 0.0),
        gamma=1.0,
        noise_sigma=0.015,
    ),
)


def _grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.linspace(-1.0, 1.0, height, dtype=np.float64)
    xs = np.linspace(-1.0, 1.0, width, dtype=np.float64)
    return np.meshgrid(ys, xs, indexing="ij")


def generate_phantom(params: PhantomParams, shape: tuple[int, int, int] = (1, 64, 64)) -> Image:
    """Render one phantom; a pure function of (params, shape).

    The image contains an elliptical brain with a sinusoidal fold texture
    near the rim and a central dark ventricle whose area grows strictly with
    ``params.atrophy``.  Values lie in [0, 1], dtype float32.
    """
    if len(shape) != 3 or shape[0] != 1:
        raise ConfigError(f"phantom generator renders (1, H, W) images, got {shape}")
    _, height, width = shape
    if height < MIN_SIDE or width < MIN_SIDE:
        raise ConfigError(f"phantom sides must be >= {MIN_SIDE}, got {height}x{width}")

    yy, xx = _grid(height, width)
    cy, cx = params.jitter_center
    ry = params.brain_radius * (1.0 + params.jitter_axis)
    rx = params.brain_radius * (1.0 - params.jitter_axis)
    u = (yy - cy) / ry
    v = (xx - cx) / rx
    r = np.sqrt(u * u + v * v)
    theta = np.arctan2(u, v)

    brain = expit((1.0 - r) / 0.01)
    # Folds live in an annulus; the center stays clean for the ventricle.
    envelope = np.clip((r - 0.35) / 0.45, 0.0, 1.0) * expit((0.98 - r) / 0.05)
    folds = np.cos(params.fold_frequency * theta + params.fold_phase)
    tissue = 0.55 + 0.16 * folds * envelope

    vent_radius = 0.24 + 0.42 * params.atrophy
    ventricle = expit((vent_radius - r) / 0.01)
    intensity = brain * (tissue * (1.0 - ventricle) + 0.07 * ventricle)

    values = np.clip(intensity, 0.0, 1.0).astype(np.float32)
    return Image(values[np.newaxis, :, :])


def bias_field(effect: DomainEffect, height: int, width: int) -> np.ndarray:
    """Evaluate the low-order polynomial bias field on the pixel grid (float32)."""
    yy, xx = _grid(height, width)
    c0, c1, c2, c3, c4, c5 = effect.bias_coeffs
    fld = c0 + c1 * xx + c2 * yy + c3 * xx * xx + c4 * yy * yy + c5 * xx * yy
    return fld.astype(np.float32)


def apply_domain_effect(image: Image, effect: DomainEffect, seed: int) -> Image:
    """Apply a domain's intensity transform; geometry is untouched.

    With identity parameters (gain 1, zero bias, gamma 1, sigma 0) the output
    equals the input bit for bit, which pins down that domain effects carry no
    hidden structure.
    """
    values = image.values
    if values.ndim != 3:
        raise ConfigError("domain effects are defined for (C, H, W) images")
    _, height, width = values.shape
    gain = np.float32(effect.intensity_gain)
    t = values * gain + bias_field(effect, height, width)[np.newaxis, :, :]
    t = np.clip(t, np.float32(0.0), np.float32(1.0))
    if effect.gamma != 1.0:
        t = np.power(t, np.float32(effect.gamma))
    if effect.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, effect.noise_sigma, size=t.shape).astype(np.float32)
        t = t + noise
    t = np.clip(t, np.float32(0.0), np.float32(1.0))
    return Image(t)


def sample_phantom_params(diagnosis: Diagnosis, rng: np.random.Generator) -> PhantomParams:
    """Draw one subject's phantom geometry for a diagnosis."""
    lo, hi = ATROPHY_RANGES[diagnosis]
    return PhantomParams(
        atrophy=float(rng.uniform(lo, hi)),
        brain_radius=float(rng.uniform(0.64, 0.72)),
        fold_frequency=float(rng.uniform(7.0, 11.0)),
        fold_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        jitter_center=(float(rng.uniform(-0.04, 0.04)), float(rng.uniform(-0.04, 0.04))),
        jitter_axis=float(rng.uniform(-0.06, 0.06)),
    )


@dataclass(frozen=True)
class DataSpec:
    """Everything needed to regenerate a dataset bit for bit."""

    schema_version: int = 1
    num_domains: int = 2
    image_shape: tuple[int, int, int] = (1, 64, 64)
    train_subjects_per_cell: int = 40
    test_subjects_per_cell: int = 10
    images_per_subject: int = 2
    seed: int = 1234
    domain_names: tuple[str, ...] = ()
    domain_effects: tuple[DomainEffect, ...] = ()

    def __post_init__(self) -> None:
        if self.schema_version != 1:
            raise ConfigError(f"unsupported data spec schema_version {self.schema_version}")
        if self.num_domains < 2:
            raise ConfigError(f"num_domains must be >= 2, got {self.num_domains}")
        if self.train_subjects_per_cell < 1 or self.test_subjects_per_cell < 1:
            raise ConfigError("every (domain, diagnosis, split) cell needs >= 1 subject")
        if self.images_per_subject < 1:
            raise ConfigError("images_per_subject must be >= 1")
        effects = self.domain_effects or DOMAIN_PRESETS[: self.num_domains]
        if len(effects) != self.num_domains:
            raise ConfigError(
                f"{len(effects)} domain effects for {self.num_domains} domains; "
                "pass one DomainEffect per domain"
            )
        object.__setattr__(self, "domain_effects", tuple(effects))
        names = self.domain_names or tuple(f"domain{k}" for k in range(self.num_domains))
        if len(names) != self.num_domains:
            raise ConfigError(f"{len(names)} domain names for {self.num_domains} domains")
        object.__setattr__(self, "domain_names", tuple(names))
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))


def generate_dataset(spec: DataSpec, out_dir: Path | None = None) -> Dataset:
    """Generate the full synthetic dataset; write it to ``out_dir`` if given.

    Each subject's randomness comes from a child seed derived from
    (spec.seed, subject_index) only, so generation order never matters and
    re-running the same spec reproduces every file bit for bit.
    """
    records: list[SubjectRecord] = []
    subject_index = 0
    splits = (
        (Split.TRAIN, spec.train_subjects_per_cell),
        (Split.TEST, spec.test_subjects_per_cell),
    )
    for split, per_cell in splits:
        for domain in range(spec.num_domains):
            for diagnosis in (Diagnosis.CN, Diagnosis.MCI, Diagnosis.AD):
                for _ in range(per_cell):
                    rng = np.random.default_rng(
                        np.random.SeedSequence((spec.seed, subject_index))
                    )
                    params = sample_phantom_params(diagnosis, rng)
                    phantom = generate_phantom(params, spec.image_shape)
                    subject_id = f"sub-{subject_index:04d}"
                    for _img in range(spec.images_per_subject):
                        image_seed = int(rng.integers(0, 2**31 - 1))
                        image = apply_domain_effect(
                            phantom, spec.domain_effects[domain], image_seed
                        )
                        records.append(
                            SubjectRecord(subject_id, domain, diagnosis, split, image)
                        )
                    subject_index += 1
    dataset = Dataset(
        records=tuple(records),
        num_domains=spec.num_domains,
        image_shape=spec.image_shape,
        generator_seed=spec.seed,
        provenance="synthetic",
        domain_names=spec.domain_names,
    )
    if out_dir is not None:
        return save_dataset(dataset, out_dir)
    return dataset


def ventricle_pixels(image: Image) -> int:
    """Count dark pixels enclosed by bright tissue; the disease feature.

    Filling the holes of the tissue mask and counting the dark pixels inside
    makes the measurement insensitive to background shifts from domain
    effects: a brightened background never sits inside the tissue ring.
    """
    vals = image.values[0]
    enclosed = ndimage.binary_fill_holes(vals > TISSUE_THRESHOLD)
    return int(np.sum(enclosed & (vals < VENTRICLE_THRESHOLD)))


def tissue_mask(image: Image) -> np.ndarray:
    """Boolean bright-tissue mask used by the structure preservation check."""
    return image.values[0] > TISSUE_THRESHOLD
