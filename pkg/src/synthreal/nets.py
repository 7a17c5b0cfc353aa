"""Generator, autoencoder discriminator and embedding networks, plus weight sets.

All networks consume NCHW float tensors with values in [0, 1].  The
functional helpers (``generator_forward``, ``autoencode``, ``embed``) take an
``ImageBatch`` and a ``WeightSet`` and rebuild the network on each call, which
keeps them pure; the training loop works with the modules directly.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .toymm import GENERATED, ImageBatch

GENERATOR = "generator"
INVERSE_GENERATOR = "inverse_generator"
AUTOENCODER = "autoencoder_discriminator"
EMBEDDER = "embedder"
KINDS = (GENERATOR, INVERSE_GENERATOR, AUTOENCODER, EMBEDDER)

WEIGHTS_FORMAT_VERSION = "1"
_SKIP_EPS = 1e-3


class StructuralError(ValueError):
    """Input shape or weights do not match the network spec."""


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    input_size: int
    channels: int = 3
    base_channels: int = 16
    num_residual_blocks: int = 3
    use_skip: bool = True
    dropout_keep: float = 0.9
    bottleneck: int = 8
    levels: int = 2
    embedding_dim: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructuralError(f"unknown network kind {self.kind!r}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise StructuralError("dropout_keep must lie in (0, 1]")


def _squash(x: torch.Tensor) -> torch.Tensor:
    return _SKIP_EPS + (1.0 - 2.0 * _SKIP_EPS) * x


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Generator(nn.Module):
    """Shallow residual encoder/decoder.

    One stride-2 encoder level, ``num_residual_blocks`` residual blocks at half
    resolution, then a nearest-upsampling decoder.  With ``use_skip`` the
    full-resolution encoder features are added back in the decoder and the
    output is ``sigmoid(h + logit(x))``, so zero decoder weights give back the
    (slightly squashed) input.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        c, nf = spec.channels, spec.base_channels
        self.enc0 = nn.Conv2d(c, nf, 3, padding=1)
        self.enc1 = nn.Conv2d(nf, 2 * nf, 3, stride=2, padding=1)
        self.blocks = nn.ModuleList(ResidualBlock(2 * nf) for _ in range(spec.num_residual_blocks))
        self.dec1 = nn.Conv2d(2 * nf, nf, 3, padding=1)
        self.out = nn.Conv2d(nf, c, 3, padding=1)

    def _dropout(self, h, generator):
        keep = self.spec.dropout_keep
        if not self.training or self.spec.kind != GENERATOR or keep >= 1.0:
            return h
        mask = torch.rand(h.shape, generator=generator, dtype=h.dtype) < keep
        return h * mask / keep

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if x.shape[1] != self.spec.channels or x.shape[-1] % 2:
            raise StructuralError(f"generator expects {self.spec.channels} channels and an even size, "
                                  f"got {tuple(x.shape)}")
        e0 = F.relu(self.enc0(x))
        h = F.relu(self.enc1(e0))
        for block in self.blocks:
            h = self._dropout(block(h), generator)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.dec1(h))
        if self.spec.use_skip:
            h = h + e0
        h = self.out(h)
        if self.spec.use_skip:
            return torch.sigmoid(h + torch.logit(_squash(x)))
        return torch.sigmoid(h)


class AutoencoderDiscriminator(nn.Module):
    """Convolutional autoencoder: ``levels`` stride-2 convs, a dense bottleneck, mirrored decoder."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        c, nd, L = spec.channels, spec.base_channels, spec.levels
        if spec.input_size % (2 ** L):
            raise StructuralError(f"input size {spec.input_size} not divisible by 2**{L}")
        self.low = spec.input_size // 2 ** L
        self.enc_in = nn.Conv2d(c, nd, 3, padding=1)
        self.enc = nn.ModuleList(nn.Conv2d(nd * (i + 1), nd * (i + 2), 3, stride=2, padding=1)
                                 for i in range(L))
        flat = nd * (L + 1) * self.low ** 2
        self.to_code = nn.Linear(flat, spec.bottleneck)
        self.from_code = nn.Linear(spec.bottleneck, nd * self.low ** 2)
        self.dec = nn.ModuleList(nn.Conv2d(nd, nd, 3, padding=1) for _ in range(L))
        self.dec_out = nn.Conv2d(nd, c, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.spec
        if x.shape[1:] != (s.channels, s.input_size, s.input_size):
            raise StructuralError(f"autoencoder expects (N, {s.channels}, {s.input_size}, {s.input_size}), "
                                  f"got {tuple(x.shape)}")
        h = F.elu(self.enc_in(x))
        for conv in self.enc:
            h = F.elu(conv(h))
        code = self.to_code(h.flatten(1))
        h = self.from_code(code).view(-1, s.base_channels, self.low, self.low)
        for conv in self.dec:
            h = F.elu(conv(h))
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.dec_out(h))


class Embedder(nn.Module):
    """Small conv net mapping an image to a unit-length embedding."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        c, ne = spec.channels, spec.base_channels
        self.convs = nn.ModuleList([
            nn.Conv2d(c, ne, 3, padding=1),
            nn.Conv2d(ne, 2 * ne, 3, stride=2, padding=1),
            nn.Conv2d(2 * ne, 2 * ne, 3, padding=1),
            nn.Conv2d(2 * ne, 2 * ne, 3, stride=2, padding=1),
            nn.Conv2d(2 * ne, 4 * ne, 3, stride=2, padding=1),
        ])
        self.fc = nn.Linear(4 * ne, spec.embedding_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        s = self.spec
        if x.shape[1:] != (s.channels, s.input_size, s.input_size):
            raise StructuralError(f"embedder expects (N, {s.channels}, {s.input_size}, {s.input_size}), "
                                  f"got {tuple(x.shape)}")
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
        return self.fc(h.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.features(x), dim=1, eps=1e-12)


def build_network(spec: NetworkSpec) -> nn.Module:
    if spec.kind in (GENERATOR, INVERSE_GENERATOR):
        return Generator(spec)
    if spec.kind == AUTOENCODER:
        return AutoencoderDiscriminator(spec)
    return Embedder(spec)


def center_crop(x: torch.Tensor, size: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    if size > h or size > w:
        raise StructuralError(f"cannot crop {h}x{w} to {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return x[..., top:top + size, left:left + size]


# ---------------------------------------------------------------------------
# weight sets


@dataclass(frozen=True)
class WeightSet:
    """Named float arrays for one network, in layer order, plus the spec they belong to."""

    spec: NetworkSpec
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: str = WEIGHTS_FORMAT_VERSION

    def __post_init__(self):
        for name, a in self.arrays.items():
            if not np.all(np.isfinite(a)):
                raise ValueError(f"weight {name!r} contains non-finite values")

    @classmethod
    def from_module(cls, module: nn.Module) -> "WeightSet":
        arrays = OrderedDict((k, v.detach().cpu().numpy().copy()) for k, v in module.state_dict().items())
        return cls(module.spec, arrays)

    def to_module(self) -> nn.Module:
        net = build_network(self.spec)
        expected = net.state_dict()
        if list(expected) != list(self.arrays):
            raise StructuralError("weight names do not match the network spec")
        for k, v in expected.items():
            if tuple(v.shape) != self.arrays[k].shape:
                raise StructuralError(f"weight {k!r}: shape {self.arrays[k].shape} != {tuple(v.shape)}")
        net.load_state_dict(OrderedDict((k, torch.from_numpy(np.array(v))) for k, v in self.arrays.items()))
        return net

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def equals(self, other: "WeightSet") -> bool:
        return (self.spec == other.spec and list(self.arrays) == list(other.arrays)
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))


def init_weights(spec: NetworkSpec, seed: int) -> WeightSet:
    torch.manual_seed(seed)
    return WeightSet.from_module(build_network(spec))


def save_weights(w: WeightSet, path: str | Path, **manifest) -> None:
    """Write ``<path>.npz`` (named arrays) and ``<path>.json`` (spec, version and extra fields)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path.with_suffix(".npz"), **w.arrays)
    meta = {"version": w.version, "spec": asdict(w.spec), "names": list(w.arrays), **manifest}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_weights(path: str | Path) -> WeightSet:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("version") != WEIGHTS_FORMAT_VERSION:
        raise StructuralError(f"incompatible weights version {meta.get('version')!r}")
    with np.load(path.with_suffix(".npz")) as z:
        arrays = OrderedDict((k, z[k]) for k in meta["names"])
    return WeightSet(NetworkSpec(**meta["spec"]), arrays, meta["version"])


# ---------------------------------------------------------------------------
# functional forward passes


def _check_kind(w: WeightSet, *kinds):
    if w.spec.kind not in kinds:
        raise StructuralError(f"expected a {'/'.join(kinds)} weight set, got {w.spec.kind}")


def _check_batch(x: ImageBatch, spec: NetworkSpec):
    _, h, _, c = x.pixels.shape
    if c != spec.channels:
        raise StructuralError(f"batch has {c} channels, network expects {spec.channels}")
    return h


def generator_forward(x: ImageBatch, w: WeightSet, mode: str = "eval", seed: int = 0) -> ImageBatch:
    """Translate a batch; ``train`` mode applies seeded dropout after every residual block."""
    _check_kind(w, GENERATOR, INVERSE_GENERATOR)
    _check_batch(x, w.spec)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    net = w.to_module().train(mode == "train")
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        out = net(x.to_tensor(), generator=g)
    return ImageBatch.from_tensor(out, GENERATED, x.labels)


def autoencode(x: ImageBatch, w: WeightSet) -> ImageBatch:
    _check_kind(w, AUTOENCODER)
    _check_batch(x, w.spec)
    net = w.to_module().eval()
    with torch.no_grad():
        out = net(x.to_tensor())
    return ImageBatch.from_tensor(out, x.domain_tag, x.labels)


def embed(x: ImageBatch, w: WeightSet) -> np.ndarray:
    """Unit-length embedding per image; the batch must already be at the embedder input size."""
    _check_kind(w, EMBEDDER)
    _check_batch(x, w.spec)
    net = w.to_module().eval()
    with torch.no_grad():
        return net(x.to_tensor()).numpy()
