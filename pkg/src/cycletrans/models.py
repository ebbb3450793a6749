"""Generator / discriminator networks and the four-network translation model.

Naming: ``gen_x_to_y`` maps domain X (source, e.g. T1) to domain Y (target,
e.g. T2); ``disc_x`` scores real X against ``gen_y_to_x(y)``.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn

CHECKPOINT_FORMAT = "cycletrans-ckpt-v1"

DIRECTIONS = ("x_to_y", "y_to_x")


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


class CheckpointError(RuntimeError):
    pass


@dataclass
class GeneratorSpec:
    input_channels: int = 1
    base_width: int = 64
    n_residual_blocks: int = 15
    image_size: int = 144
    n_downsampling: int = 2
    output_range: tuple[float, float] = (-1.0, 1.0)
    # "normal": N(0, 0.02) conv weights. "identity": zeroed head plus input skip (tests only).
    init: str = "normal"

    def __post_init__(self):
        self.output_range = tuple(float(v) for v in self.output_range)
        if self.n_residual_blocks < 1:
            raise ConfigError("n_residual_blocks must be >= 1")
        if self.input_channels < 1 or self.base_width < 1:
            raise ConfigError("input_channels and base_width must be >= 1")
        factor = 2 ** self.n_downsampling
        if self.image_size % factor:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by downsampling factor {factor}"
            )
        if self.image_size // factor < 2:
            raise ConfigError(f"image_size {self.image_size} too small for {self.n_downsampling} downsamplings")
        lo, hi = self.output_range
        if not lo < hi:
            raise ConfigError(f"empty output_range {self.output_range}")
        if self.init not in ("normal", "identity"):
            raise ConfigError(f"unknown generator init {self.init!r}")


@dataclass
class DiscriminatorSpec:
    input_channels: int = 1
    base_width: int = 64
    n_layers: int = 3
    output_mode: str = "patch"
    image_size: int = 144
    # "constant": final conv zeroed so every output is exactly 0.5 (tests only).
    init: str = "normal"

    def __post_init__(self):
        if self.output_mode not in ("patch", "scalar"):
            raise ConfigError(f"unknown output_mode {self.output_mode!r}")
        if self.init not in ("normal", "constant"):
            raise ConfigError(f"unknown discriminator init {self.init!r}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        side = patch_grid_size(self.image_size, self.n_layers)
        if side < 1:
            raise ConfigError(
                f"n_layers={self.n_layers} reduces a {self.image_size}px input below 1 pixel"
            )


def _conv_out(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def patch_grid_size(image_size: int, n_layers: int) -> int:
    """Side length of the discriminator's per-patch output grid."""
    size = image_size
    for _ in range(n_layers):
        size = _conv_out(size, 4, 2, 1)
        if size < 1:
            return size
    size = _conv_out(size, 4, 1, 1)
    if size < 1:
        return size
    return _conv_out(size, 4, 1, 1)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """7x7 stem, strided downsampling, residual bottleneck, transposed-conv upsampling."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        c, w = spec.input_channels, spec.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(c, w, 7),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        ]
        width = w
        for _ in range(spec.n_downsampling):
            layers += [
                nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(width * 2),
                nn.ReLU(inplace=True),
            ]
            width *= 2
        layers += [ResidualBlock(width) for _ in range(spec.n_residual_blocks)]
        for _ in range(spec.n_downsampling):
            layers += [
                nn.ConvTranspose2d(width, width // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(width // 2),
                nn.ReLU(inplace=True),
            ]
            width //= 2
        self.body = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(width, c, 7))
        self.register_buffer("skip_gain", torch.tensor(0.0))
        init_weights(self)
        if spec.init == "identity":
            nn.init.zeros_(self.head[1].weight)
            nn.init.zeros_(self.head[1].bias)
            self.skip_gain.fill_(1.0)

    def forward(self, x):
        check_image_batch(x, self.spec.input_channels, self.spec.image_size)
        h = self.head(self.body(x)) + self.skip_gain * x
        lo, hi = self.spec.output_range
        if (lo, hi) == (-1.0, 1.0):
            return torch.tanh(h)
        return lo + (hi - lo) * (torch.tanh(h) + 1) / 2


class PatchDiscriminator(nn.Module):
    """Strided 4x4 conv classifier; sigmoid probabilities per patch (or averaged logit)."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers: list[nn.Module] = [
            nn.Conv2d(spec.input_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        width = w
        for n in range(1, spec.n_layers):
            nxt = w * min(2**n, 8)
            layers += [
                nn.Conv2d(width, nxt, 4, stride=2, padding=1),
                nn.InstanceNorm2d(nxt),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            width = nxt
        nxt = w * min(2**spec.n_layers, 8)
        layers += [
            nn.Conv2d(width, nxt, 4, stride=1, padding=1),
            nn.InstanceNorm2d(nxt),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(nxt, 1, 4, stride=1, padding=1),
        ]
        self.net = nn.Sequential(*layers)
        init_weights(self)
        if spec.init == "constant":
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def logits(self, x):
        check_image_batch(x, self.spec.input_channels, self.spec.image_size)
        out = self.net(x)
        if self.spec.output_mode == "scalar":
            out = out.mean(dim=(1, 2, 3))
        return out

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def check_image_batch(x: torch.Tensor, channels: int, size: int) -> None:
    if x.dim() != 4 or x.shape[1] != channels or x.shape[2] != size or x.shape[3] != size:
        raise ValueError(
            f"expected image batch of shape (N, {channels}, {size}, {size}), got {tuple(x.shape)}"
        )


def build_generator(spec: GeneratorSpec) -> ResnetGenerator:
    return ResnetGenerator(spec)


def build_discriminator(spec: DiscriminatorSpec) -> PatchDiscriminator:
    return PatchDiscriminator(spec)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class TranslationModel(nn.Module):
    """Two generators and two discriminators with disjoint parameters."""

    def __init__(self, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec):
        super().__init__()
        if gen_spec.image_size != disc_spec.image_size:
            raise ConfigError("generator and discriminator image_size differ")
        if gen_spec.input_channels != disc_spec.input_channels:
            raise ConfigError("generator and discriminator input_channels differ")
        self.gen_spec = gen_spec
        self.disc_spec = disc_spec
        self.gen_x_to_y = build_generator(gen_spec)
        self.gen_y_to_x = build_generator(gen_spec)
        self.disc_x = build_discriminator(disc_spec)
        self.disc_y = build_discriminator(disc_spec)

    def generator(self, direction: str) -> ResnetGenerator:
        if direction == "x_to_y":
            return self.gen_x_to_y
        if direction == "y_to_x":
            return self.gen_y_to_x
        raise ValueError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")

    def generator_parameters(self):
        return list(self.gen_x_to_y.parameters()) + list(self.gen_y_to_x.parameters())

    def discriminator_parameters(self):
        return list(self.disc_x.parameters()) + list(self.disc_y.parameters())


def make_model(gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec, seed: int = 0,
               dtype: torch.dtype = torch.float32) -> TranslationModel:
    """Seeded construction: same seed, same initial parameters."""
    gen = torch.Generator().manual_seed(seed)
    state = torch.random.get_rng_state()
    torch.manual_seed(int(torch.randint(0, 2**62, (1,), generator=gen)))
    try:
        model = TranslationModel(gen_spec, disc_spec)
    finally:
        torch.random.set_rng_state(state)
    return model.to(dtype)


@torch.no_grad()
def translate(model: TranslationModel, image: torch.Tensor, direction: str) -> torch.Tensor:
    """Inference-mode translation of a (N, C, H, W) batch."""
    gen = model.generator(direction)
    was_training = gen.training
    gen.eval()
    try:
        return gen(image)
    finally:
        gen.train(was_training)


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every named tensor of the state dict, in order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, model: TranslationModel, train_config: dict | None = None,
                    state: dict[str, Any] | None = None) -> Path:
    """Write the four parameter sets, both specs, the train config and optional resume state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "generator_spec": dataclasses.asdict(model.gen_spec),
        "discriminator_spec": dataclasses.asdict(model.disc_spec),
        "train_config": train_config or {},
        "gen_x_to_y": model.gen_x_to_y.state_dict(),
        "gen_y_to_x": model.gen_y_to_x.state_dict(),
        "disc_x": model.disc_x.state_dict(),
        "disc_y": model.disc_y.state_dict(),
        "state": state or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_gen: GeneratorSpec | None = None,
                    expected_disc: DiscriminatorSpec | None = None) -> tuple[TranslationModel, dict]:
    """Rebuild the model from a checkpoint; returns (model, payload)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    tag = payload.get("format") if isinstance(payload, dict) else None
    if tag != CHECKPOINT_FORMAT:
        raise CheckpointError(f"checkpoint format {tag!r} != {CHECKPOINT_FORMAT!r}")
    gen_spec = GeneratorSpec(**payload["generator_spec"])
    disc_spec = DiscriminatorSpec(**payload["discriminator_spec"])
    if expected_gen is not None and expected_gen != gen_spec:
        raise CheckpointError(f"generator spec mismatch: checkpoint {gen_spec}, expected {expected_gen}")
    if expected_disc is not None and expected_disc != disc_spec:
        raise CheckpointError(f"discriminator spec mismatch: checkpoint {disc_spec}, expected {expected_disc}")
    model = TranslationModel(gen_spec, disc_spec)
    model.to(next(iter(payload["gen_x_to_y"].values())).dtype)
    for name in ("gen_x_to_y", "gen_y_to_x", "disc_x", "disc_y"):
        getattr(model, name).load_state_dict(payload[name])
    return model, payload


def numpy_translator(model: TranslationModel, batch_size: int = 16):
    """Adapter: ``fn(images[N, H, W], direction) -> ndarray`` running inference in chunks."""
    import numpy as np

    dtype = next(model.parameters()).dtype

    def fn(images, direction):
        images = np.asarray(images, dtype=np.float64)
        out = []
        for i in range(0, len(images), batch_size):
            t = torch.from_numpy(images[i: i + batch_size]).to(dtype).unsqueeze(1)
            out.append(translate(model, t, direction).squeeze(1).double().numpy())
        return np.concatenate(out, axis=0)

    return fn
