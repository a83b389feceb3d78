"""Generator backbones, the latent-tapping discriminator, and batch-norm strategies."""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONES = ("naive", "skip", "dense_skip")
LEAK = 0.2


class ModelConfigError(ValueError):
    pass


class ForwardError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    backbone: str = "naive"
    in_channels: int = 1
    latent_channels: int = 100
    base_width: int = 64
    depth: int = 4
    auxiliary_bn: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ModelConfigError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.latent_channels < 1 or self.base_width < 1 or self.in_channels < 1:
            raise ModelConfigError("channel counts must be positive")
        if self.depth < 1 or (self.backbone == "naive" and self.depth != 4):
            raise ModelConfigError("naive backbone has fixed depth 4; other backbones need depth >= 1")

    def check_size(self, size: int) -> None:
        if size % (2 ** self.depth):
            raise ModelConfigError(f"input size {size} is not divisible by 2^{self.depth}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BNStrategy:
    auxiliary_for_pseudo: bool = False
    freeze_for_true_anomaly: bool = False

    NAMES = {
        "shared": (False, False),
        "advprop": (True, False),
        "freeze": (False, True),
        "advprop+freeze": (True, True),
    }

    @classmethod
    def from_name(cls, name: str) -> "BNStrategy":
        try:
            return cls(*cls.NAMES[name])
        except KeyError:
            raise ModelConfigError(f"unknown bn strategy {name!r}; choose from {sorted(cls.NAMES)}") from None

    @property
    def name(self) -> str:
        return {v: k for k, v in self.NAMES.items()}[(self.auxiliary_for_pseudo, self.freeze_for_true_anomaly)]


class DiscriminatorOutput(NamedTuple):
    y: torch.Tensor
    z: torch.Tensor


# Batch norm ################################################################################


class DualBatchNorm2d(nn.Module):
    """BatchNorm with a main and an auxiliary branch, each with its own
    statistics and affine parameters. ``use_aux`` selects the branch."""

    def __init__(self, num_features: int):
        super().__init__()
        self.main = nn.BatchNorm2d(num_features)
        self.aux = nn.BatchNorm2d(num_features)
        self.use_aux = False

    def forward(self, x):
        return self.aux(x) if self.use_aux else self.main(x)


def _bn(channels: int, dual: bool) -> nn.Module:
    return DualBatchNorm2d(channels) if dual else nn.BatchNorm2d(channels)


def _dual_layers(module: nn.Module) -> list[DualBatchNorm2d]:
    return [m for m in module.modules() if isinstance(m, DualBatchNorm2d)]


def _bn_layers(module: nn.Module) -> list[nn.modules.batchnorm._BatchNorm]:
    return [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


@contextlib.contextmanager
def auxiliary_branch(module: nn.Module, enabled: bool = True) -> Iterator[None]:
    layers = _dual_layers(module)
    previous = [m.use_aux for m in layers]
    for m in layers:
        m.use_aux = enabled
    try:
        yield
    finally:
        for m, p in zip(layers, previous):
            m.use_aux = p


@contextlib.contextmanager
def frozen_batchnorm(module: nn.Module, enabled: bool = True) -> Iterator[None]:
    """Run every batch norm in inference mode: running statistics are used, never updated."""
    layers = _bn_layers(module) if enabled else []
    previous = [m.training for m in layers]
    for m in layers:
        m.eval()
    try:
        yield
    finally:
        for m, p in zip(layers, previous):
            m.train(p)


def bn_state(module: nn.Module) -> dict[str, torch.Tensor]:
    """Snapshot of every batch-norm buffer, keyed by state-dict name."""
    return {k: v.detach().clone() for k, v in module.state_dict().items() if k.rsplit(".", 1)[-1] in
            ("running_mean", "running_var", "num_batches_tracked")}


# Generators ################################################################################


class NaiveGenerator(nn.Module):
    """Four stride-2 convolutions down to a latent map, four transposed convolutions back."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        c, w, lat, dual = spec.in_channels, spec.base_width, spec.latent_channels, spec.auxiliary_bn
        self.encoder = nn.Sequential(
            nn.Conv2d(c, w, 4, 2, 1, bias=False),
            nn.LeakyReLU(LEAK, inplace=True),
            nn.Conv2d(w, 2 * w, 4, 2, 1, bias=False),
            _bn(2 * w, dual),
            nn.LeakyReLU(LEAK, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1, bias=False),
            _bn(4 * w, dual),
            nn.LeakyReLU(LEAK, inplace=True),
            nn.Conv2d(4 * w, lat, 4, 2, 1, bias=False),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(lat, 4 * w, 4, 2, 1, bias=False),
            _bn(4 * w, dual),
            nn.ReLU(True),
            nn.ConvTranspose2d(4 * w, 2 * w, 4, 2, 1, bias=False),
            _bn(2 * w, dual),
            nn.ReLU(True),
            nn.ConvTranspose2d(2 * w, w, 4, 2, 1, bias=False),
            _bn(w, dual),
            nn.ReLU(True),
            nn.ConvTranspose2d(w, c, 4, 2, 1, bias=False),
            nn.Tanh(),
        )

    def encode(self, x):
        return self.encoder(x)

    def forward(self, x):
        return self.decoder(self.encoder(x))


def _down(cin: int, cout: int, dual: bool) -> nn.Sequential:
    return nn.Sequential(nn.LeakyReLU(LEAK), nn.Conv2d(cin, cout, 4, 2, 1, bias=False), _bn(cout, dual))


def _up(cin: int, cout: int, dual: bool) -> nn.Sequential:
    return nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False), _bn(cout, dual))


def _fuse(cin: int, cout: int, dual: bool) -> nn.Sequential:
    return nn.Sequential(nn.ReLU(), nn.Conv2d(cin, cout, 3, 1, 1, bias=False), _bn(cout, dual))


class _Encoder(nn.Module):
    def __init__(self, spec: GeneratorSpec, widths: list[int]):
        super().__init__()
        self.stem = nn.Conv2d(spec.in_channels, widths[0], 4, 2, 1, bias=False)
        self.downs = nn.ModuleList(_down(widths[i - 1], widths[i], spec.auxiliary_bn) for i in range(1, len(widths)))

    def forward(self, x) -> list[torch.Tensor]:
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        return feats


def _widths(spec: GeneratorSpec) -> list[int]:
    return [spec.base_width * min(2 ** i, 8) for i in range(spec.depth)]


class SkipGenerator(nn.Module):
    """Encoder-decoder with plain skip connections at every resolution."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        widths = _widths(spec)
        dual = spec.auxiliary_bn
        self.encoder = _Encoder(spec, widths)
        self.ups = nn.ModuleList()
        cin = widths[-1]
        for i in range(spec.depth - 2, -1, -1):
            self.ups.append(_up(cin, widths[i], dual))
            cin = 2 * widths[i]
        self.head = nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(cin, spec.in_channels, 4, 2, 1), nn.Tanh())

    def forward(self, x):
        feats = self.encoder(x)
        h = feats[-1]
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            h = torch.cat([up(h), skip], dim=1)
        return self.head(h)


class DenseSkipGenerator(nn.Module):
    """Nested encoder-decoder: node (i, j) fuses every earlier node at level i
    with the upsampled node (i + 1, j - 1)."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        widths = _widths(spec)
        dual = spec.auxiliary_bn
        self.depth = spec.depth
        self.encoder = _Encoder(spec, widths)
        self.ups = nn.ModuleDict()
        self.fuses = nn.ModuleDict()
        for j in range(1, spec.depth):
            for i in range(spec.depth - j):
                self.ups[f"{i}_{j}"] = _up(widths[i + 1], widths[i], dual)
                self.fuses[f"{i}_{j}"] = _fuse((j + 1) * widths[i], widths[i], dual)
        self.head = nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(widths[0], spec.in_channels, 4, 2, 1), nn.Tanh())

    def forward(self, x):
        nodes = {(i, 0): f for i, f in enumerate(self.encoder(x))}
        for j in range(1, self.depth):
            for i in range(self.depth - j):
                key = f"{i}_{j}"
                inputs = [nodes[(i, k)] for k in range(j)] + [self.ups[key](nodes[(i + 1, j - 1)])]
                nodes[(i, j)] = self.fuses[key](torch.cat(inputs, dim=1))
        return self.head(nodes[(0, self.depth - 1)])


_GENERATORS = {"naive": NaiveGenerator, "skip": SkipGenerator, "dense_skip": DenseSkipGenerator}


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.BatchNorm2d):
        nn.init.normal_(m.weight, 1.0, 0.02)
        nn.init.zeros_(m.bias)


def build_generator(spec: GeneratorSpec, image_size: int | None = None) -> nn.Module:
    if image_size is not None:
        spec.check_size(image_size)
    g = _GENERATORS[spec.backbone](spec)
    g.apply(_init_weights)
    g.spec = spec
    return g


class Discriminator(nn.Module):
    def __init__(self, in_channels: int = 1, width: int = 64):
        super().__init__()
        if width < 1 or in_channels < 1:
            raise ModelConfigError("discriminator width and in_channels must be positive")
        self.in_channels = in_channels
        self.width = width
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 4, 2, 1, bias=False),
            nn.LeakyReLU(LEAK, inplace=True),
            nn.Conv2d(width, 2 * width, 4, 2, 1, bias=False),
            nn.BatchNorm2d(2 * width),
            nn.LeakyReLU(LEAK, inplace=True),
        )
        self.classifier = nn.Conv2d(2 * width, 1, 3, 1, 1)

    @property
    def latent_dim(self) -> int:
        return 2 * self.width

    def forward(self, x) -> DiscriminatorOutput:
        f = self.features(x)
        z = f.mean(dim=(2, 3))
        logit = self.classifier(f).mean(dim=(1, 2, 3))
        return DiscriminatorOutput(torch.sigmoid(logit), z)


def build_discriminator(in_channels: int = 1, width: int = 64) -> Discriminator:
    d = Discriminator(in_channels, width)
    d.apply(_init_weights)
    return d


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# Strategy-aware forward passes #############################################################


def _check_input(x: torch.Tensor, channels: int, size: int | None = None) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ForwardError(f"expected an (N, {channels}, H, W) batch, got {tuple(x.shape)}")
    if x.shape[2] != x.shape[3]:
        raise ForwardError(f"expected square images, got {tuple(x.shape[2:])}")


def forward_generator(
    g: nn.Module,
    x: torch.Tensor,
    pass_kind: str = "real",
    strategy: BNStrategy = BNStrategy(),
    is_true_anomaly: bool = False,
) -> torch.Tensor:
    """Reconstruct ``x``. Pseudo passes use the auxiliary BN branch when the
    strategy asks for it; true-anomaly passes run BN frozen when configured."""
    spec: GeneratorSpec = g.spec
    _check_input(x, spec.in_channels)
    if x.shape[2] % (2 ** spec.depth):
        raise ForwardError(f"input size {x.shape[2]} is not divisible by 2^{spec.depth}")
    if pass_kind not in ("real", "pseudo"):
        raise ValueError(f"pass_kind must be 'real' or 'pseudo', got {pass_kind!r}")
    use_aux = pass_kind == "pseudo" and strategy.auxiliary_for_pseudo
    if use_aux and not spec.auxiliary_bn:
        raise ModelConfigError("strategy requests auxiliary BN but the generator was built without it")
    with auxiliary_branch(g, use_aux), frozen_batchnorm(g, strategy.freeze_for_true_anomaly and is_true_anomaly):
        return g(x)


def forward_discriminator(
    d: Discriminator,
    x: torch.Tensor,
    is_true_anomaly: bool = False,
    strategy: BNStrategy = BNStrategy(),
) -> DiscriminatorOutput:
    _check_input(x, d.in_channels)
    with frozen_batchnorm(d, strategy.freeze_for_true_anomaly and is_true_anomaly):
        return d(x)
