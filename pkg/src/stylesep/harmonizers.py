"""Harmonization models: losses, reconstruction rules, and trainers.

All trainable models share one three-stage alternating scheme per round:

  stage 1  update encoders/affine/decoder on reconstruction (+ style) loss
  stage 2  freeze those, update the domain predictor on cross-entropy
  stage 3  freeze the predictor, update only the anatomy encoder on the
           confusion loss (cross-entropy against a uniform target)

The four variants differ only in the reconstruction call site: the plain
autoencoder decodes z_u, the adversarial autoencoder adds stages 2-3, the
style-encoder variant decodes the latent sum z_u + z_d, and the pseudo-linear
variant sums two decodings in image space, x' = f_D(z_u) + alpha * f_D(z_d).

Feature-space baselines (Gaussian noise augmentation, location/scale
harmonization of latent features) live here too.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    ConfigError,
    ContractError,
    Dataset,
    Decomposition,
    Image,
    LatentCode,
    Split,
    TrainingAbort,
)
from .nets import ModelBundle, NetworkConfig, batch_from_images, build_bundle

STAGE_RECONSTRUCT = 1
STAGE_PREDICT = 2
STAGE_CONFUSE = 3

VARIANTS = ("cae", "ada", "se-ada", "pl-se-ada")

# reconstruction call sites
_MODE_DIRECT = "direct"          # f_D(z_u)
_MODE_LATENT_SUM = "latent-sum"  # f_D(z_u + z_d)
_MODE_IMAGE_SUM = "image-sum"    # f_D(z_u) + alpha * f_D(z_d)


def recon_loss(x: torch.Tensor, x_prime: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if x.shape != x_prime.shape:
        raise ContractError(f"reconstruction shape {tuple(x_prime.shape)} != input {tuple(x.shape)}")
    diff = x_prime - x
    return (diff * diff).mean()


def domain_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy against integer domain labels."""
    if logits.dim() != 2:
        raise ContractError(f"logits must be (N, K), got {tuple(logits.shape)}")
    if labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise ContractError(
            f"labels shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}"
        )
    k = logits.shape[1]
    if labels.numel() and (labels.min().item() < 0 or labels.max().item() >= k):
        raise ContractError(f"domain labels must lie in [0, {k}), got range "
                            f"[{labels.min().item()}, {labels.max().item()}]")
    return F.cross_entropy(logits, labels)


def confusion_loss(logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between softmax(logits) and the uniform distribution.

    Equals -(1/K) * sum_k log softmax(logits)_k averaged over the batch; its
    global minimum is ln K, attained exactly when the softmax is uniform.
    """
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    if logits.dim() != 2:
        raise ContractError(f"logits must be (N, K) or (K,), got {tuple(logits.shape)}")
    logp = F.log_softmax(logits, dim=-1)
    return (-logp.mean(dim=-1)).mean()


def style_supervision_loss(z_d_prime: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Treat raw style codes as domain logits and supervise with cross-entropy.

    Requires the style dimension to equal the number of domains; callers with
    d_s != K should attach a separate classification head instead.
    """
    if z_d_prime.dim() != 2:
        raise ContractError(f"style codes must be (N, d_s), got {tuple(z_d_prime.shape)}")
    k = int(labels.max().item()) + 1 if labels.numel() else 0
    if z_d_prime.shape[1] < k:
        raise ConfigError(
            f"style dim {z_d_prime.shape[1]} < {k} domains; z_d' can only double as "
            "domain logits when d_s == num_domains (otherwise attach a classifier head)"
        )
    return domain_loss(z_d_prime, labels)


def _single_batch(bundle: ModelBundle, image: Image) -> torch.Tensor:
    return batch_from_images([image])


def reconstruct_se_ada(bundle: ModelBundle, image: Image) -> tuple[Image, LatentCode]:
    """Latent-sum reconstruction x' = f_D(z_u + z_d); returns codes for probing."""
    with torch.no_grad():
        xb = _single_batch(bundle, image)
        z_u = bundle.encode(xb)
        z_dp = bundle.style_encode(xb)
        z_d = bundle.expand(z_dp)
        x_prime = bundle.decode(z_u + z_d)
    code = LatentCode(
        z_u=z_u[0].numpy(), z_d_prime=z_dp[0].numpy(), z_d=z_d[0].numpy()
    )
    return Image(x_prime[0].numpy()), code


def reconstruct_pl_se_ada(bundle: ModelBundle, image: Image, alpha: float) -> Decomposition:
    """Image-space pseudo-linear reconstruction x' = f_D(z_u) + alpha * f_D(z_d)."""
    if alpha < 0:
        raise ContractError(f"alpha must be >= 0, got {alpha}")
    with torch.no_grad():
        xb = _single_batch(bundle, image)
        z_u = bundle.encode(xb)
        z_d = bundle.expand(bundle.style_encode(xb))
        x_u = bundle.decode(z_u)
        x_d = bundle.decode(z_d)
    return Decomposition.compose(Image(x_u[0].numpy()), Image(x_d[0].numpy()), alpha)


def model_reconstruction(bundle: ModelBundle, image: Image, alpha: float | None = None) -> Image:
    """Reconstruct one image under the bundle's own rule (by variant)."""
    if bundle.variant in ("cae", "ada"):
        with torch.no_grad():
            xb = _single_batch(bundle, image)
            x_prime = bundle.decode(bundle.encode(xb))
        return Image(x_prime[0].numpy())
    if bundle.variant == "se-ada":
        return reconstruct_se_ada(bundle, image)[0]
    if bundle.variant == "pl-se-ada":
        a = alpha if alpha is not None else bundle.alpha
        if a is None:
            raise ContractError("pseudo-linear bundle has no alpha; pass one explicitly")
        return reconstruct_pl_se_ada(bundle, image, a).x_prime
    raise ContractError(f"bundle variant {bundle.variant!r} has no reconstruction rule")


@dataclass(frozen=True)
class StageSchedule:
    """Stage epochs per alternation round plus the stage-3 warm-up delay."""

    steps_stage1: int = 1
    steps_stage2: int = 1
    steps_stage3: int = 1
    warmup_rounds: int = 3

    def __post_init__(self) -> None:
        if self.steps_stage1 < 1:
            raise ConfigError("steps_stage1 must be >= 1; training always reconstructs")
        if self.steps_stage2 < 0 or self.steps_stage3 < 0:
            raise ConfigError("stage step counts must be >= 0")
        if self.warmup_rounds < 0:
            raise ConfigError("warmup_rounds must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of the alternating trainer; ``epochs`` counts alternation rounds.

    ``grad_clip`` caps the total gradient norm of the active components at
    every optimizer step (None disables it).  The adversarial game between
    the content encoder and the domain predictor can otherwise escalate late
    in training, taking the reconstruction down with it.
    """

    alpha: float = 0.2
    lr: float | Mapping[str, float] = 1e-3
    batch_size: int = 32
    epochs: int = 12
    schedule: StageSchedule = field(default_factory=StageSchedule)
    noise_sigma: float = 0.1
    seed: int = 0
    w_recon: float = 1.0
    w_style: float = 0.1
    w_conf: float = 1.0
    grad_clip: float | None = 5.0
    verify_stage_isolation: bool = False

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if min(self.w_recon, self.w_style, self.w_conf) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive or None, got {self.grad_clip}")

    def lr_for(self, component: str) -> float:
        if isinstance(self.lr, Mapping):
            unknown = set(self.lr) - {"f_E", "f_SE", "affine", "f_D", "g_D"}
            if unknown:
                raise ConfigError(f"unknown components in lr mapping: {sorted(unknown)}")
            return float(self.lr.get(component, 1e-3))
        return float(self.lr)


@dataclass
class TrainLog:
    """Append-only record of one training run.

    ``steps`` holds one dict per optimizer step (monotone ``step`` index,
    stage, losses, gradient norm); ``rounds`` holds per-round parameter
    hashes so freeze behavior can be audited after the fact.
    """

    variant: str
    recon_mode: str
    seed: int
    steps: list[dict] = field(default_factory=list)
    rounds: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append_step(self, entry: dict) -> None:
        expected = self.steps[-1]["step"] + 1 if self.steps else 0
        if entry["step"] != expected:
            raise ContractError(f"non-monotone step index {entry['step']}, expected {expected}")
        self.steps.append(entry)

    def stage_losses(self, stage: int) -> list[float]:
        return [s["loss"] for s in self.steps if s["stage"] == stage]

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            header = {
                "kind": "meta",
                "variant": self.variant,
                "recon_mode": self.recon_mode,
                "seed": self.seed,
                **self.meta,
            }
            fh.write(json.dumps(header) + "\n")
            for entry in self.steps:
                fh.write(json.dumps({"kind": "step", **entry}) + "\n")
            for entry in self.rounds:
                fh.write(json.dumps({"kind": "round", **entry}) + "\n")

    @classmethod
    def load(cls, path: Path) -> "TrainLog":
        steps, rounds, meta = [], [], {}
        with Path(path).open() as fh:
            for line in fh:
                entry = json.loads(line)
                kind = entry.pop("kind")
                if kind == "meta":
                    meta = entry
                elif kind == "step":
                    steps.append(entry)
                elif kind == "round":
                    rounds.append(entry)
        log = cls(
            variant=meta.pop("variant"),
            recon_mode=meta.pop("recon_mode"),
            seed=meta.pop("seed"),
        )
        log.meta = meta
        log.steps = steps
        log.rounds = rounds
        return log


def _load_train_tensors(dataset: Dataset) -> tuple[torch.Tensor, torch.Tensor]:
    records = dataset.split_records(Split.TRAIN)
    images = [dataset.load_image(r) for r in records]
    labels = torch.tensor([r.domain for r in records], dtype=torch.long)
    return batch_from_images(images), labels


def _hash_component(bundle: ModelBundle, name: str) -> str:
    return hashlib.sha1(bundle.component_bytes(name)).hexdigest()[:12]


class _Engine:
    """Shared alternating trainer; variants select stages and call site."""

    # components updated in stage 1, per reconstruction mode
    _STAGE1 = {
        _MODE_DIRECT: ("f_E", "f_D"),
        _MODE_LATENT_SUM: ("f_E", "f_SE", "affine", "f_D"),
        _MODE_IMAGE_SUM: ("f_E", "f_SE", "affine", "f_D"),
    }

    def __init__(
        self,
        dataset: Dataset,
        net_config: NetworkConfig,
        cfg: TrainConfig,
        *,
        variant: str,
        recon_mode: str,
        adversarial: bool,
        style: bool,
    ):
        if net_config.num_domains != dataset.num_domains:
            raise ConfigError(
                f"network expects {net_config.num_domains} domains, "
                f"dataset has {dataset.num_domains}"
            )
        if tuple(net_config.image_shape) != tuple(dataset.image_shape):
            raise ConfigError(
                f"network image_shape {net_config.image_shape} != dataset {dataset.image_shape}"
            )
        if style and net_config.d_s != net_config.num_domains:
            raise ConfigError(
                f"style supervision uses z_d' as domain logits; need d_s == num_domains "
                f"({net_config.d_s} != {net_config.num_domains})"
            )
        self.dataset = dataset
        self.cfg = cfg
        self.variant = variant
        self.recon_mode = recon_mode
        self.adversarial = adversarial
        self.style = style
        self.x, self.y = _load_train_tensors(dataset)
        if int(torch.unique(self.y).numel()) < 2 and adversarial:
            raise ConfigError("adversarial training needs >= 2 domains in the train split")
        self.bundle = build_bundle(net_config, cfg.seed)
        # One optimizer per stage, with per-component learning-rate groups.
        # Sharing Adam moments between the reconstruction and confusion
        # updates of f_E lets the (large) stage-1 gradients inflate the
        # second-moment estimate and starve the stage-3 steps, so the
        # adversarial pressure never bites; separate moments fix that.
        self.opts = {STAGE_RECONSTRUCT: self._stage_optimizer(self._STAGE1[recon_mode])}
        if adversarial:
            self.opts[STAGE_PREDICT] = self._stage_optimizer(("g_D",))
            self.opts[STAGE_CONFUSE] = self._stage_optimizer(("f_E",))
        self.rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5EED)))
        self.log = TrainLog(variant=variant, recon_mode=recon_mode, seed=cfg.seed)
        self.step = 0
        self.isolation_checks = 0
        # Adversary input conditioning, refreshed once per round (stage 2).
        self.z_mu = torch.zeros(net_config.d_u)
        self.z_sigma = torch.ones(net_config.d_u)

    def _stage_optimizer(self, names: tuple[str, ...]) -> torch.optim.Adam:
        groups = [
            {
                "params": list(self.bundle.components()[name].parameters()),
                "lr": self.cfg.lr_for(name),
            }
            for name in names
        ]
        return torch.optim.Adam(groups)

    def _batches(self):
        n = self.x.shape[0]
        order = self.rng.permutation(n)
        for start in range(0, n, self.cfg.batch_size):
            idx = torch.from_numpy(order[start : start + self.cfg.batch_size].copy())
            yield self.x[idx], self.y[idx]

    def _refresh_adversary_stats(self) -> None:
        # The domain predictor sees standardized codes.  Anatomy directions
        # carry far more variance than the domain offset, and a minibatch
        # classifier on raw codes never finds the signal that a probe with
        # standardized features finds; the statistics are per-feature over
        # the train split and enter the graph as constants.
        with torch.no_grad():
            chunks = [
                self.bundle.encode(self.x[i : i + 256])
                for i in range(0, self.x.shape[0], 256)
            ]
            z = torch.cat(chunks)
            self.z_mu = z.mean(dim=0)
            sigma = z.std(dim=0, unbiased=False)
            # Floor each feature's scale at a fraction of the overall spread.
            # A near-dead dimension would otherwise standardize the confusion
            # stage's own small code motion into enormous inputs, saturate
            # the predictor, and turn the confusion gradient into a pressure
            # to collapse the code rather than to mix the domains.
            floor = 0.05 * float(sigma.pow(2).mean().sqrt()) + 1e-6
            self.z_sigma = sigma.clamp_min(floor)

    def _domain_logits(self, z_u: torch.Tensor) -> torch.Tensor:
        return self.bundle.predict_domain((z_u - self.z_mu) / self.z_sigma)

    def _forward_recon(self, xb: torch.Tensor):
        b = self.bundle
        z_u = b.encode(xb)
        if self.recon_mode == _MODE_DIRECT:
            return b.decode(z_u), None
        z_dp = b.style_encode(xb)
        z_d = b.expand(z_dp)
        if self.recon_mode == _MODE_LATENT_SUM:
            return b.decode(z_u + z_d), z_dp
        x_u = b.decode(z_u)
        x_d = b.decode(z_d)
        return x_u + self.cfg.alpha * x_d, z_dp

    def _apply_step(self, loss: torch.Tensor, active: tuple[str, ...], stage: int,
                    round_idx: int, epoch: int, extra: dict) -> None:
        cfg = self.cfg
        if not torch.isfinite(loss):
            raise TrainingAbort(
                f"non-finite loss at step {self.step} (round {round_idx}, stage {stage})"
            )
        frozen = None
        if cfg.verify_stage_isolation:
            frozen = {
                name: self.bundle.component_bytes(name)
                for name in self.bundle.components()
                if name not in active
            }
        for module in self.bundle.components().values():
            module.zero_grad(set_to_none=True)
        loss.backward()
        grad_sq = 0.0
        for name in active:
            for p in self.bundle.components()[name].parameters():
                if p.grad is not None:
                    grad_sq += float((p.grad * p.grad).sum())
        if cfg.grad_clip is not None:
            active_params = [p for name in active
                             for p in self.bundle.components()[name].parameters()]
            torch.nn.utils.clip_grad_norm_(active_params, cfg.grad_clip)
        self.opts[stage].step()
        if frozen is not None:
            for name, before in frozen.items():
                if self.bundle.component_bytes(name) != before:
                    raise TrainingAbort(
                        f"stage isolation violated: {name} changed during stage {stage}"
                    )
            self.isolation_checks += 1
        entry = {
            "step": self.step,
            "round": round_idx,
            "stage": stage,
            "epoch": epoch,
            "loss": float(loss.detach()),
            "grad_norm": math.sqrt(grad_sq),
            **extra,
        }
        self.log.append_step(entry)
        self.step += 1

    def run(self) -> tuple[ModelBundle, TrainLog]:
        cfg = self.cfg
        sched = cfg.schedule
        stage1_active = self._STAGE1[self.recon_mode]
        for round_idx in range(cfg.epochs):
            for epoch in range(sched.steps_stage1):
                for xb, yb in self._batches():
                    x_prime, z_dp = self._forward_recon(xb)
                    l_recon = recon_loss(xb, x_prime)
                    extra = {"recon": float(l_recon.detach())}
                    total = cfg.w_recon * l_recon
                    if self.style:
                        l_style = style_supervision_loss(z_dp, yb)
                        total = total + cfg.w_style * l_style
                        extra["style"] = float(l_style.detach())
                    self._apply_step(total, stage1_active, STAGE_RECONSTRUCT,
                                     round_idx, epoch, extra)
            if self.adversarial:
                if sched.steps_stage2 or sched.steps_stage3:
                    self._refresh_adversary_stats()
                for epoch in range(sched.steps_stage2):
                    for xb, yb in self._batches():
                        with torch.no_grad():
                            z_u = self.bundle.encode(xb)
                        l_dom = domain_loss(self._domain_logits(z_u), yb)
                        self._apply_step(l_dom, ("g_D",), STAGE_PREDICT,
                                         round_idx, epoch, {"domain": float(l_dom.detach())})
                if round_idx >= sched.warmup_rounds:
                    for epoch in range(sched.steps_stage3):
                        for xb, _yb in self._batches():
                            logits = self._domain_logits(self.bundle.encode(xb))
                            l_conf = cfg.w_conf * confusion_loss(logits)
                            self._apply_step(l_conf, ("f_E",), STAGE_CONFUSE,
                                             round_idx, epoch, {"confusion": float(l_conf.detach())})
            self.log.rounds.append(
                {
                    "round": round_idx,
                    "param_hashes": {
                        name: _hash_component(self.bundle, name)
                        for name in self.bundle.components()
                    },
                }
            )
        self.bundle.variant = self.variant
        self.bundle.alpha = cfg.alpha if self.variant == "pl-se-ada" else None
        self.log.meta["isolation_checks"] = self.isolation_checks
        self.log.meta["alpha"] = self.bundle.alpha
        return self.bundle, self.log


def train_cae(dataset: Dataset, net_config: NetworkConfig, cfg: TrainConfig):
    """Plain convolutional autoencoder; stages 2-3 never run."""
    return _Engine(
        dataset, net_config, cfg,
        variant="cae", recon_mode=_MODE_DIRECT, adversarial=False, style=False,
    ).run()


def train_ada(dataset: Dataset, net_config: NetworkConfig, cfg: TrainConfig):
    """Adversarial domain adaptation without a style path."""
    return _Engine(
        dataset, net_config, cfg,
        variant="ada", recon_mode=_MODE_DIRECT, adversarial=True, style=False,
    ).run()


def train_se_ada(dataset: Dataset, net_config: NetworkConfig, cfg: TrainConfig):
    """Style-encoder variant; reconstruction decodes the latent sum z_u + z_d."""
    return _Engine(
        dataset, net_config, cfg,
        variant="se-ada", recon_mode=_MODE_LATENT_SUM, adversarial=True, style=True,
    ).run()


def train_pl_se_ada(dataset: Dataset, net_config: NetworkConfig, cfg: TrainConfig):
    """Pseudo-linear variant; reconstruction sums two decodings in image space."""
    return _Engine(
        dataset, net_config, cfg,
        variant="pl-se-ada", recon_mode=_MODE_IMAGE_SUM, adversarial=True, style=True,
    ).run()


def noise_augment(features: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. Gaussian noise to feature vectors; sigma 0 is the identity."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    features = np.asarray(features, dtype=np.float64)
    if sigma == 0:
        return features.copy()
    rng = np.random.default_rng(seed)
    return features + rng.normal(0.0, sigma, size=features.shape)


@dataclass(frozen=True)
class CombatModel:
    """Fitted location/scale harmonization parameters.

    Per feature: grand mean and pooled within-site std; per (site, feature):
    shrunken additive offset gamma_star and variance scale delta2_star on the
    standardized scale.
    """

    sites: tuple[int, ...]
    feature_mean: np.ndarray
    pooled_std: np.ndarray
    gamma_star: np.ndarray
    delta2_star: np.ndarray


def combat_fit(
    features: np.ndarray,
    site: np.ndarray,
    *,
    empirical_bayes: bool = True,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> CombatModel:
    """Fit parametric empirical-Bayes location/scale site correction.

    Site effects are estimated on standardized features and shrunk toward
    their across-feature prior moments by iterating the parametric
    posterior-mean updates to a fixed point.  Every site needs >= 2 samples;
    a single-site fit degenerates to (numerically) the identity correction.
    """
    y = np.asarray(features, dtype=np.float64)
    site = np.asarray(site)
    if y.ndim != 2:
        raise ContractError(f"features must be (N, d), got shape {y.shape}")
    if site.shape != (y.shape[0],):
        raise ContractError("site labels must be one integer per sample")
    sites = tuple(int(s) for s in np.unique(site))
    counts = {s: int(np.sum(site == s)) for s in sites}
    singletons = [s for s, n in counts.items() if n < 2]
    if singletons:
        raise ConfigError(f"every site needs >= 2 samples; singleton sites: {singletons}")

    n_total, d = y.shape
    site_means = np.stack([y[site == s].mean(axis=0) for s in sites])
    weights = np.array([counts[s] / n_total for s in sites])
    grand_mean = weights @ site_means
    centered = y - site_means[[sites.index(int(s)) for s in site]]
    pooled_var = np.mean(centered * centered, axis=0)
    pooled_std = np.sqrt(np.maximum(pooled_var, 1e-24))

    z = (y - grand_mean) / pooled_std
    gamma_hat = np.stack([z[site == s].mean(axis=0) for s in sites])
    delta2_hat = np.stack([z[site == s].var(axis=0) for s in sites])

    gamma_star = gamma_hat.copy()
    delta2_star = delta2_hat.copy()
    if empirical_bayes and d >= 2:
        for i, s in enumerate(sites):
            n_i = counts[s]
            zi = z[site == s]
            g_bar = gamma_hat[i].mean()
            tau2 = gamma_hat[i].var()
            v_bar = delta2_hat[i].mean()
            s2 = delta2_hat[i].var()
            if tau2 <= 0 or s2 <= 0:
                continue
            lam = (v_bar**2 + 2 * s2) / s2
            theta = (v_bar**3 + v_bar * s2) / s2
            g = gamma_hat[i].copy()
            d2 = delta2_hat[i].copy()
            for _ in range(max_iter):
                g_new = (n_i * tau2 * gamma_hat[i] + d2 * g_bar) / (n_i * tau2 + d2)
                resid = zi - g_new
                d2_new = (theta + 0.5 * np.sum(resid * resid, axis=0)) / (
                    n_i / 2 + lam - 1
                )
                change = max(np.max(np.abs(g_new - g)), np.max(np.abs(d2_new - d2)))
                g, d2 = g_new, d2_new
                if change < tol:
                    break
            gamma_star[i] = g
            delta2_star[i] = d2
    delta2_star = np.maximum(delta2_star, 1e-12)
    return CombatModel(
        sites=sites,
        feature_mean=grand_mean,
        pooled_std=pooled_std,
        gamma_star=gamma_star,
        delta2_star=delta2_star,
    )


def combat_apply(model: CombatModel, features: np.ndarray, site: np.ndarray) -> np.ndarray:
    """Remove fitted site effects from (possibly new) samples of known sites."""
    y = np.asarray(features, dtype=np.float64)
    site = np.asarray(site)
    if y.ndim != 2 or y.shape[1] != model.feature_mean.shape[0]:
        raise ContractError(
            f"features shape {y.shape} does not match fitted dimension "
            f"{model.feature_mean.shape[0]}"
        )
    if site.shape != (y.shape[0],):
        raise ContractError("site labels must be one integer per sample")
    unknown = sorted(set(int(s) for s in np.unique(site)) - set(model.sites))
    if unknown:
        raise ContractError(f"sites {unknown} were not present at fit time")
    idx = np.array([model.sites.index(int(s)) for s in site])
    z = (y - model.feature_mean) / model.pooled_std
    z_adj = (z - model.gamma_star[idx]) / np.sqrt(model.delta2_star[idx])
    return z_adj * model.pooled_std + model.feature_mean
