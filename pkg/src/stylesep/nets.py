"""Differentiable components and their plumbing.

Four trainable pieces: an anatomy encoder ``f_E`` (image -> z_u), a style
encoder ``f_SE`` (image -> low-dim z_d'), an affine expansion lifting z_d' to
the anatomy code's dimension, a shared decoder ``f_D`` (latent -> image), and
a small MLP domain predictor ``g_D`` (z_u -> domain logits).  The decoder
upsamples with nearest-neighbor resizing followed by convolutions instead of
transposed convolutions; that keeps decoded style components free of
checkerboard artifacts, which the qualitative checks rely on.

Also here: finite-difference gradient verification and the checkpoint format
(a zip of one config JSON plus one raw float32 file per parameter).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .core import ArtifactError, ConfigError, ContractError, Image

CHECKPOINT_SCHEMA_VERSION = 1

_ACTIVATIONS = ("leaky_relu", "relu", "tanh")


def _make_activation(name: str) -> nn.Module:
    if name == "leaky_relu":
        return nn.LeakyReLU(0.1)
    if name == "relu":
        return nn.ReLU()
    if name == "tanh":
        return nn.Tanh()
    raise ConfigError(f"unknown activation {name!r}; choose from {_ACTIVATIONS}")


@dataclass(frozen=True)
class NetworkConfig:
    """Shapes and sizes of all components.

    ``encoder_channels`` gives the output channels of each conv layer;
    ``encoder_strides`` defaults to stride 2 everywhere.  The decoder mirrors
    the encoder unless ``decoder_channels`` overrides the intermediate widths.
    ``d_s`` is the raw style dimension; when style supervision treats z_d' as
    domain logits it must equal ``num_domains``.
    """

    d_u: int = 175
    d_s: int = 2
    num_domains: int = 2
    image_shape: tuple[int, ...] = (1, 64, 64)
    encoder_channels: tuple[int, ...] = (8, 16, 32, 64, 64)
    encoder_strides: tuple[int, ...] | None = None
    decoder_channels: tuple[int, ...] | None = None
    predictor_hidden: int = 32
    activation: str = "leaky_relu"

    def __post_init__(self) -> None:
        if self.d_u < 1 or self.d_s < 1:
            raise ConfigError(f"latent dims must be positive, got d_u={self.d_u} d_s={self.d_s}")
        if self.num_domains < 2:
            raise ConfigError(f"num_domains must be >= 2, got {self.num_domains}")
        if self.predictor_hidden < 1:
            raise ConfigError("predictor_hidden must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if len(self.image_shape) not in (3, 4):
            raise ConfigError(f"image_shape must be (C, H, W) or (C, D, H, W), got {self.image_shape}")
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if not self.encoder_channels or any(c < 1 for c in self.encoder_channels):
            raise ConfigError("encoder_channels must be a nonempty tuple of positive ints")
        strides = self.encoder_strides or tuple(2 for _ in self.encoder_channels)
        strides = tuple(int(s) for s in strides)
        if len(strides) != len(self.encoder_channels):
            raise ConfigError("encoder_strides must match encoder_channels in length")
        if any(s not in (1, 2) for s in strides):
            raise ConfigError("encoder strides must be 1 or 2")
        object.__setattr__(self, "encoder_strides", strides)
        sizes = self.spatial_plan()
        if any(dim < 1 for dim in sizes[-1]):
            raise ConfigError(
                f"encoder downsamples {self.image_shape[1:]} below 1 voxel: plan {sizes}"
            )
        if self.decoder_channels is not None:
            dec = tuple(int(c) for c in self.decoder_channels)
            if len(dec) != len(self.encoder_channels) - 1:
                raise ConfigError(
                    f"decoder_channels needs {len(self.encoder_channels) - 1} entries "
                    f"(intermediate widths), got {len(dec)}"
                )
            object.__setattr__(self, "decoder_channels", dec)

    @property
    def spatial_ndim(self) -> int:
        return len(self.image_shape) - 1

    def spatial_plan(self) -> list[tuple[int, ...]]:
        """Spatial size before each conv layer and after the last one."""
        sizes = [tuple(self.image_shape[1:])]
        for stride in self.encoder_strides:
            sizes.append(tuple((dim - 1) // stride + 1 for dim in sizes[-1]))
        return sizes

    def flat_dim(self) -> int:
        return self.encoder_channels[-1] * int(np.prod(self.spatial_plan()[-1]))

    def mirror_channels(self) -> tuple[int, ...]:
        if self.decoder_channels is not None:
            return self.decoder_channels
        return tuple(reversed(self.encoder_channels[:-1]))

    @classmethod
    def paper_profile(cls) -> "NetworkConfig":
        """Deep 14-layer 3-d profile; provided for full-scale volumes, untested at that scale."""
        return cls(
            d_u=175,
            d_s=2,
            image_shape=(1, 80, 112, 80),
            encoder_channels=(8, 8, 16, 16, 32, 32, 64, 64, 96, 96, 128, 128, 128, 128),
            encoder_strides=(2, 1, 2, 1, 2, 1, 2, 1, 2, 1, 1, 1, 1, 1),
        )


def _conv_nd(ndim: int):
    return {2: nn.Conv2d, 3: nn.Conv3d}[ndim]


class ConvEncoder(nn.Module):
    """Strided conv stack followed by a linear head onto ``out_dim``.

    No activation on the latent head: codes live in an unconstrained space.
    """

    def __init__(self, config: NetworkConfig, out_dim: int):
        super().__init__()
        conv = _conv_nd(config.spatial_ndim)
        layers: list[nn.Module] = []
        in_ch = config.image_shape[0]
        for ch, stride in zip(config.encoder_channels, config.encoder_strides):
            layers.append(conv(in_ch, ch, kernel_size=3, stride=stride, padding=1))
            layers.append(_make_activation(config.activation))
            in_ch = ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(config.flat_dim(), out_dim)
        self._expected_shape = config.image_shape

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != len(self._expected_shape) + 1 or tuple(x.shape[1:]) != self._expected_shape:
            raise ContractError(
                f"encoder expects batches of shape (N, {', '.join(map(str, self._expected_shape))}), "
                f"got {tuple(x.shape)}"
            )
        h = self.features(x)
        return self.head(h.flatten(1))


class ConvDecoder(nn.Module):
    """Linear lift, then upsample-to-size + conv blocks back to image shape.

    The upsample targets are read off the encoder's spatial plan, so decoder
    output shape equals ``config.image_shape`` for any valid config.  The
    final conv has no activation.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        conv = _conv_nd(config.spatial_ndim)
        sizes = config.spatial_plan()
        self._start_shape = (config.encoder_channels[-1],) + sizes[-1]
        self.head = nn.Linear(config.d_u, config.flat_dim())
        mode = "nearest"
        blocks: list[nn.Module] = []
        widths = config.mirror_channels() + (config.image_shape[0],)
        in_ch = config.encoder_channels[-1]
        n_layers = len(config.encoder_channels)
        for i, out_ch in enumerate(widths):
            target = sizes[n_layers - 1 - i]
            blocks.append(nn.Upsample(size=target, mode=mode))
            blocks.append(conv(in_ch, out_ch, kernel_size=3, stride=1, padding=1))
            if i < len(widths) - 1:
                blocks.append(_make_activation(config.activation))
            in_ch = out_ch
        self.blocks = nn.Sequential(*blocks)
        self._d_u = config.d_u

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self._d_u:
            raise ContractError(f"decoder expects (N, {self._d_u}) codes, got {tuple(z.shape)}")
        h = self.head(z).reshape(z.shape[0], *self._start_shape)
        return self.blocks(h)


class DomainPredictor(nn.Module):
    """Three-layer MLP: d_u -> hidden -> num_domains logits."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(config.d_u, config.predictor_hidden),
            _make_activation(config.activation),
            nn.Linear(config.predictor_hidden, config.num_domains),
        )
        self._d_u = config.d_u

    def forward(self, z_u: torch.Tensor) -> torch.Tensor:
        if z_u.dim() != 2 or z_u.shape[1] != self._d_u:
            raise ContractError(
                f"domain predictor expects (N, {self._d_u}) codes, got {tuple(z_u.shape)}"
            )
        return self.net(z_u)


def affine_expand(weight: torch.Tensor, bias: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Exact affine lift ``W z + b`` of style codes, batched or single."""
    if weight.dim() != 2:
        raise ContractError(f"weight must be 2-d, got shape {tuple(weight.shape)}")
    d_u, d_s = weight.shape
    if bias.shape != (d_u,):
        raise ContractError(f"bias shape {tuple(bias.shape)} does not match weight rows {d_u}")
    if z.shape[-1] != d_s:
        raise ContractError(f"style code dim {z.shape[-1]} does not match weight cols {d_s}")
    return z @ weight.T + bias


COMPONENT_NAMES = ("f_E", "f_SE", "affine", "f_D", "g_D")


@dataclass
class ModelBundle:
    """All components of one model plus the config that built them.

    ``variant`` records which training procedure produced the bundle
    ("untrained" before any training); ``alpha`` is the trained mixing weight
    for pseudo-linear bundles and None otherwise.  There is exactly one
    decoder: every reconstruction rule reuses ``f_D``.
    """

    f_E: ConvEncoder
    f_SE: ConvEncoder
    affine: nn.Linear
    f_D: ConvDecoder
    g_D: DomainPredictor
    config: NetworkConfig
    variant: str = "untrained"
    alpha: float | None = None
    schema_version: int = CHECKPOINT_SCHEMA_VERSION

    def components(self) -> dict[str, nn.Module]:
        return {
            "f_E": self.f_E,
            "f_SE": self.f_SE,
            "affine": self.affine,
            "f_D": self.f_D,
            "g_D": self.g_D,
        }

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.f_E(x)

    def style_encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.f_SE(x)

    def expand(self, z_d_prime: torch.Tensor) -> torch.Tensor:
        if z_d_prime.shape[-1] != self.config.d_s:
            raise ContractError(
                f"style code dim {z_d_prime.shape[-1]} != configured d_s {self.config.d_s}"
            )
        return self.affine(z_d_prime)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.f_D(z)

    def predict_domain(self, z_u: torch.Tensor) -> torch.Tensor:
        return self.g_D(z_u)

    def parameter_count(self) -> dict[str, int]:
        return {
            name: sum(p.numel() for p in module.parameters())
            for name, module in self.components().items()
        }

    def component_bytes(self, name: str) -> bytes:
        """Concatenated raw parameter bytes; used for bitwise freeze checks."""
        module = self.components()[name]
        return b"".join(
            p.detach().cpu().numpy().tobytes() for p in module.parameters()
        )


def build_bundle(config: NetworkConfig, seed: int) -> ModelBundle:
    """Construct all components with seeded fan-in-scaled uniform init."""
    torch.manual_seed(seed)
    f_e = ConvEncoder(config, config.d_u)
    f_se = ConvEncoder(config, config.d_s)
    affine = nn.Linear(config.d_s, config.d_u)
    f_d = ConvDecoder(config)
    g_d = DomainPredictor(config)
    return ModelBundle(f_E=f_e, f_SE=f_se, affine=affine, f_D=f_d, g_D=g_d, config=config)


def batch_from_images(images: Sequence[Image]) -> torch.Tensor:
    if not images:
        raise ContractError("empty image batch")
    stacked = np.stack([img.values for img in images]).astype(np.float32)
    return torch.from_numpy(stacked)


def encode_images(bundle: ModelBundle, images: Sequence[Image], batch_size: int = 64) -> np.ndarray:
    """z_u features for a list of images, batched, gradient-free."""
    return _run_batched(bundle.encode, images, batch_size)


def style_encode_images(
    bundle: ModelBundle, images: Sequence[Image], batch_size: int = 64
) -> np.ndarray:
    """Raw style codes z_d' for a list of images."""
    return _run_batched(bundle.style_encode, images, batch_size)


def _run_batched(fn, images: Sequence[Image], batch_size: int) -> np.ndarray:
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            xb = batch_from_images(images[start : start + batch_size])
            chunks.append(fn(xb).numpy())
    return np.concatenate(chunks, axis=0)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    n_checked: int
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    *,
    step: float = 1e-5,
    mode: str = "central",
    samples_per_param: int = 8,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd gradients of ``fn`` against finite differences.

    ``fn`` must be a closure over the float64 leaf tensors in ``params`` and
    return a scalar.  For each parameter a seeded sample of entries is
    perturbed; the relative error is |analytic - fd| / (|analytic| + |fd| + eps).
    Non-finite gradients are reported in ``failures`` with their parameter path.
    """
    if mode not in ("central", "forward"):
        raise ConfigError(f"unknown finite-difference mode {mode!r}")
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ContractError(f"grad_check requires float64 parameters, {name} is {p.dtype}")
        if not p.requires_grad:
            raise ContractError(f"parameter {name} does not require grad")

    loss = fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    analytic = {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }

    rng = np.random.default_rng(seed)
    eps = 1e-12
    max_rel = 0.0
    worst = ""
    n_checked = 0
    failures: list[str] = []
    for name, p in params.items():
        flat = p.detach().reshape(-1)
        n = flat.numel()
        idx = rng.choice(n, size=min(samples_per_param, n), replace=False)
        for i in idx:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
            up = fn().item()
            if mode == "central":
                with torch.no_grad():
                    flat[i] = orig - step
                down = fn().item()
                fd = (up - down) / (2.0 * step)
            else:
                fd = (up - loss.item()) / step
            with torch.no_grad():
                flat[i] = orig
            a = analytic[name].reshape(-1)[i].item()
            path = f"{name}[{i}]"
            if not (np.isfinite(a) and np.isfinite(fd)):
                failures.append(path)
                continue
            rel = abs(a - fd) / (abs(a) + abs(fd) + eps)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = path
    return GradCheckResult(max_rel_error=max_rel, worst=worst, n_checked=n_checked, failures=failures)


def grad_check_module(
    module: nn.Module,
    inputs: tuple[torch.Tensor, ...],
    loss: Callable[[torch.Tensor], torch.Tensor],
    **kwargs,
) -> GradCheckResult:
    """Gradient-check a module's parameters under ``loss(module(*inputs))``."""
    params = dict(module.named_parameters())
    return grad_check(lambda: loss(module(*inputs)), params, **kwargs)


def _param_entries(bundle: ModelBundle) -> list[tuple[str, torch.Tensor]]:
    out = []
    for comp_name, module in bundle.components().items():
        for p_name, p in module.named_parameters():
            out.append((f"{comp_name}.{p_name}", p))
    return out


def save_checkpoint(bundle: ModelBundle, path: Path) -> None:
    """Write the bundle as a zip: config.json + one raw float32 file per parameter."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = _param_entries(bundle)
    config_doc = {
        "schema_version": bundle.schema_version,
        "variant": bundle.variant,
        "alpha": bundle.alpha,
        "network": asdict(bundle.config),
    }
    params_doc = {name: list(p.shape) for name, p in entries}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", json.dumps(config_doc, indent=1))
        zf.writestr("params.json", json.dumps(params_doc, indent=1))
        for name, p in entries:
            data = p.detach().cpu().numpy().astype("<f4").tobytes()
            zf.writestr(f"params/{name}.f32", data)


def load_checkpoint(path: Path) -> ModelBundle:
    """Rebuild a bundle from a checkpoint; any mismatch fails loudly."""
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        try:
            config_doc = json.loads(zf.read("config.json"))
            params_doc = json.loads(zf.read("params.json"))
        except KeyError as exc:
            raise ArtifactError(f"checkpoint {path} is missing {exc}") from exc
        if config_doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise ArtifactError(
                f"checkpoint schema_version {config_doc.get('schema_version')} "
                f"!= supported {CHECKPOINT_SCHEMA_VERSION}"
            )
        net = config_doc["network"]
        for key in ("image_shape", "encoder_channels", "encoder_strides"):
            if net.get(key) is not None:
                net[key] = tuple(net[key])
        if net.get("decoder_channels") is not None:
            net["decoder_channels"] = tuple(net["decoder_channels"])
        config = NetworkConfig(**net)
        bundle = build_bundle(config, seed=0)
        bundle.variant = config_doc.get("variant", "untrained")
        bundle.alpha = config_doc.get("alpha")
        expected = {name: tuple(p.shape) for name, p in _param_entries(bundle)}
        stored = {name: tuple(shape) for name, shape in params_doc.items()}
        if stored != expected:
            raise ArtifactError(
                f"checkpoint {path} parameter inventory does not match its config: "
                f"stored {len(stored)} arrays, expected {len(expected)}"
            )
        with torch.no_grad():
            for name, p in _param_entries(bundle):
                raw = zf.read(f"params/{name}.f32")
                arr = np.frombuffer(raw, dtype="<f4")
                if arr.size != p.numel():
                    raise ArtifactError(
                        f"checkpoint array {name} holds {arr.size} values, expected {p.numel()}"
                    )
                p.copy_(torch.from_numpy(arr.reshape(tuple(p.shape)).copy()))
    return bundle
