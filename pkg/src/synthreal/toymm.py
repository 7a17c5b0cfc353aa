"""Procedural face-like renderer, hidden realism transform and dataset assembly.

The renderer is a toy parametric model: identity coefficients linearly blend a
fixed basis of part geometries (head outline, eyes, brows, nose, mouth, hair
line, skin tone), expression bends the mouth and opens the eyes, pose rotates
and shears the face, and lighting multiplies a directional shading ramp.

``realism_transform`` defines the "real" domain: a deterministic function of
the rendered image that tone-maps it, adds an identity-keyed texture, paints a
background and blurs slightly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .config import DataConfig, TrainConfig

DATASET_FORMAT_VERSION = 1
_RAW_MAGIC = b"SRAW"

SYNTHETIC, GENERATED, REAL = "synthetic", "generated", "real"
DOMAINS = (SYNTHETIC, GENERATED, REAL)

# geometry slot -> (mean, spread); spread is the std. dev. for a unit coefficient
_GEOMETRY = {
    "head_a": (0.60, 0.06),
    "head_b": (0.80, 0.05),
    "eye_dx": (0.28, 0.04),
    "eye_y": (-0.16, 0.04),
    "eye_r": (0.10, 0.018),
    "brow_gap": (0.09, 0.02),
    "nose_len": (0.26, 0.05),
    "nose_w": (0.08, 0.018),
    "mouth_y": (0.40, 0.04),
    "mouth_w": (0.22, 0.04),
    "hair_y": (-0.50, 0.08),
    "skin_r": (0.78, 0.08),
    "skin_g": (0.60, 0.07),
    "skin_b": (0.48, 0.07),
}
_GEOMETRY_BOUNDS = {
    "head_a": (0.45, 0.75), "head_b": (0.65, 0.92), "eye_dx": (0.18, 0.38),
    "eye_y": (-0.28, -0.05), "eye_r": (0.06, 0.15), "brow_gap": (0.04, 0.15),
    "nose_len": (0.14, 0.38), "nose_w": (0.04, 0.13), "mouth_y": (0.30, 0.55),
    "mouth_w": (0.12, 0.32), "hair_y": (-0.72, -0.30), "skin_r": (0.5, 0.95),
    "skin_g": (0.38, 0.80), "skin_b": (0.28, 0.70),
}
_BASIS_SEED = 20180319

HAIR = np.array([0.24, 0.17, 0.12])
EYE_WHITE = np.array([0.93, 0.93, 0.90])
PUPIL = np.array([0.10, 0.08, 0.08])
BROW = np.array([0.20, 0.14, 0.10])
LIP = np.array([0.66, 0.26, 0.30])


@dataclass(frozen=True)
class MorphParams:
    identity_coeffs: tuple[float, ...]
    expression_coeffs: tuple[float, ...]
    pose: tuple[float, float]  # (horizontal shear in [-1, 1], in-plane rotation in radians)
    lighting: tuple[float, float]  # (direction angle in radians, strength in [0, 1])
    identity_label: int

    def to_dict(self) -> dict:
        return {
            "identity_coeffs": list(self.identity_coeffs),
            "expression_coeffs": list(self.expression_coeffs),
            "pose": list(self.pose),
            "lighting": list(self.lighting),
            "identity_label": self.identity_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MorphParams":
        return cls(
            identity_coeffs=tuple(float(v) for v in d["identity_coeffs"]),
            expression_coeffs=tuple(float(v) for v in d["expression_coeffs"]),
            pose=(float(d["pose"][0]), float(d["pose"][1])),
            lighting=(float(d["lighting"][0]), float(d["lighting"][1])),
            identity_label=int(d["identity_label"]),
        )

    def replace(self, **changes) -> "MorphParams":
        d = {
            "identity_coeffs": self.identity_coeffs,
            "expression_coeffs": self.expression_coeffs,
            "pose": self.pose,
            "lighting": self.lighting,
            "identity_label": self.identity_label,
        }
        d.update(changes)
        return MorphParams(**d)


@dataclass
class ImageBatch:
    """Images in NHWC layout with values in [0, 1]."""

    pixels: np.ndarray
    domain_tag: str
    labels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be rank 4 (N, H, W, C), got shape {self.pixels.shape}")
        n, h, w, c = self.pixels.shape
        if h != w:
            raise ValueError(f"images must be square, got {h}x{w}")
        if c not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {c}")
        if self.domain_tag not in DOMAINS:
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")
        if len(self.labels) != n:
            raise ValueError(f"{len(self.labels)} labels for a batch of {n}")
        if n and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def to_tensor(self) -> torch.Tensor:
        """NCHW float tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(0, 3, 1, 2)))

    @classmethod
    def from_tensor(cls, t: torch.Tensor, domain_tag: str, labels) -> "ImageBatch":
        return cls(t.detach().cpu().numpy().transpose(0, 2, 3, 1), domain_tag, labels)


@dataclass
class Split:
    """One dataset split: input images, identity labels, optional parameters and targets.

    ``targets`` holds the real image paired with each input (paired split) or
    the oracle realistic image (held-out split).
    """

    images: np.ndarray
    labels: np.ndarray
    params: list[MorphParams] | None = None
    targets: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def identities(self) -> set[int]:
        return set(int(v) for v in np.unique(self.labels))


@dataclass
class DatasetBundle:
    unpaired_synthetic: Split
    unpaired_real: Split
    paired: Split
    heldout: Split
    pretrain: Split
    meta: dict = field(default_factory=dict)

    SPLITS = ("unpaired_synthetic", "unpaired_real", "paired", "heldout", "pretrain")

    def splits(self) -> Iterable[tuple[str, Split]]:
        for name in self.SPLITS:
            yield name, getattr(self, name)


# ---------------------------------------------------------------------------
# parameter sampling


def sample_params(seed: int, num_ids: int, per_id: int, *, d_id: int = 8, d_ex: int = 2,
                  id_start: int = 0) -> list[MorphParams]:
    """Sample ``num_ids * per_id`` parameter sets, identity-major order.

    Identity coefficients are drawn once per identity from a unit Gaussian;
    expression, pose and lighting are drawn per image.
    """
    if num_ids < 1 or per_id < 1:
        raise ValueError(f"num_ids and per_id must be positive, got {num_ids}, {per_id}")
    rng = np.random.default_rng(seed)
    ident = rng.standard_normal((num_ids, d_id))
    n = num_ids * per_id
    expr = rng.standard_normal((n, d_ex))
    shear = np.clip(rng.normal(0.0, 0.35, n), -1.0, 1.0)
    rot = rng.normal(0.0, 0.12, n)
    light_dir = rng.normal(0.0, 1.2, n)
    light_str = np.clip(rng.normal(0.35, 0.2, n), 0.0, 1.0)
    out = []
    for i in range(num_ids):
        coeffs = tuple(float(v) for v in ident[i])
        for k in range(per_id):
            j = i * per_id + k
            out.append(MorphParams(
                identity_coeffs=coeffs,
                expression_coeffs=tuple(float(v) for v in expr[j]),
                pose=(float(shear[j]), float(rot[j])),
                lighting=(float(light_dir[j]), float(light_str[j])),
                identity_label=id_start + i,
            ))
    return out


def _basis(d_id: int) -> np.ndarray:
    rng = np.random.default_rng(_BASIS_SEED + d_id)
    b = rng.standard_normal((len(_GEOMETRY), d_id))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    return b


def face_geometry(identity_coeffs) -> dict[str, float]:
    """Part geometry for an identity: mean shape plus a linear blend of the basis."""
    c = np.asarray(identity_coeffs, dtype=np.float64)
    blend = _basis(len(c)) @ c
    geo = {}
    for (name, (mean, spread)), delta in zip(_GEOMETRY.items(), blend):
        lo, hi = _GEOMETRY_BOUNDS[name]
        geo[name] = float(np.clip(mean + spread * delta, lo, hi))
    return geo


# ---------------------------------------------------------------------------
# rendering


def _coverage(sdf: np.ndarray, px: float) -> np.ndarray:
    # anti-aliased inside mask from a signed distance (negative inside)
    return np.clip(0.5 - sdf / px, 0.0, 1.0)


def _ellipse_sdf(u, v, cx, cy, rx, ry):
    return (np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2) - 1.0) * min(rx, ry)


def render_synthetic(params: MorphParams, size: int, channels: int = 3) -> np.ndarray:
    """Render one (size, size, channels) image with values in [0, 1]."""
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    g = face_geometry(params.identity_coeffs)
    ex = np.tanh(np.asarray(params.expression_coeffs, dtype=np.float64))
    smile = 0.10 * ex[0] if len(ex) > 0 else 0.0
    openness = 0.7 + 0.3 * ex[1] if len(ex) > 1 else 0.7
    shear, rot = params.pose
    light_dir, strength = params.lighting

    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v_img, u_img = np.meshgrid(coords, coords, indexing="ij")
    # inverse pose: undo the rotation, then the horizontal shear
    cr, sr = math.cos(rot), math.sin(rot)
    u_r = cr * u_img + sr * v_img
    v = -sr * u_img + cr * v_img
    u = u_r - 0.3 * shear * v
    au = np.abs(u)
    px = 2.0 / size

    canvas = np.zeros((size, size, 3))

    def paint(alpha, color):
        nonlocal canvas
        canvas = canvas * (1.0 - alpha[..., None]) + alpha[..., None] * color

    head = _coverage(_ellipse_sdf(u, v, 0.0, 0.05, g["head_a"], g["head_b"]), px)
    skin = np.array([g["skin_r"], g["skin_g"], g["skin_b"]])
    paint(head, skin)
    hair = head * _coverage(v - g["hair_y"], px)
    paint(hair, HAIR)

    eye_ry = g["eye_r"] * 0.65 * openness
    eye = _coverage(_ellipse_sdf(au, v, g["eye_dx"], g["eye_y"], g["eye_r"], eye_ry), px)
    paint(eye, EYE_WHITE)
    pupil_r = min(g["eye_r"] * 0.45, eye_ry)
    paint(eye * _coverage(_ellipse_sdf(au, v, g["eye_dx"], g["eye_y"], pupil_r, pupil_r), px), PUPIL)

    brow_y = g["eye_y"] - eye_ry - g["brow_gap"]
    brow_sdf = np.maximum(np.abs(v - brow_y) - 0.025, np.abs(au - g["eye_dx"]) - g["eye_r"] * 1.2)
    paint(_coverage(brow_sdf, px), BROW)

    nose_top = g["eye_y"] + 0.06
    t = np.clip((v - nose_top) / g["nose_len"], 0.0, 1.0)
    nose_sdf = np.maximum(au - g["nose_w"] * (0.3 + 0.7 * t),
                          np.maximum(nose_top - v, v - (nose_top + g["nose_len"])))
    paint(0.6 * _coverage(nose_sdf, px), skin * 0.72)

    curve = g["mouth_y"] + smile * (1.0 - (u / g["mouth_w"]) ** 2)
    lip_half = 0.03 + 0.02 * max(0.0, -ex[1] if len(ex) > 1 else 0.0)
    mouth_sdf = np.maximum(np.abs(v - curve) - lip_half, au - g["mouth_w"])
    paint(_coverage(mouth_sdf, px), LIP)

    # directional shading ramp, 0 on the lit side and 1 on the far side
    p = u_img * math.cos(light_dir) + v_img * math.sin(light_dir)
    ramp = np.clip(0.5 - 0.35 * p, 0.0, 1.0)
    canvas = canvas * (1.0 - 0.6 * strength * ramp)[..., None]

    if channels == 1:
        canvas = canvas @ np.array([0.299, 0.587, 0.114])[:, None]
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def render_many(params: list[MorphParams], size: int, channels: int = 3) -> np.ndarray:
    if not params:
        return np.zeros((0, size, size, channels), np.float32)
    return np.stack([render_synthetic(p, size, channels) for p in params])


# ---------------------------------------------------------------------------
# realism transform


def _hash_seed(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(np.asarray(part, dtype=np.float64).tobytes())
    return int.from_bytes(h.digest(), "little")


_TONE_GAMMA = np.array([0.70, 0.80, 0.95])
_BACKGROUND = np.array([0.40, 0.46, 0.56])


def realism_transform(image: np.ndarray, params: MorphParams) -> np.ndarray:
    """Map a rendered image to the realistic domain.

    Deterministic per (image, params): the texture is keyed by the identity
    label and the background jitter by the label plus nuisance parameters.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != image.shape[1] or image.shape[2] not in (1, 3):
        raise ValueError(f"expected a (size, size, 1|3) image, got shape {image.shape}")
    size, _, channels = image.shape
    gamma = _TONE_GAMMA if channels == 3 else np.array([0.82])
    bg_color = _BACKGROUND if channels == 3 else np.array([0.47])

    # (a) tone curve
    toned = 0.05 + 0.88 * image ** gamma

    # (b) identity-keyed low-frequency texture on the face
    id_rng = np.random.default_rng(_hash_seed(params.identity_label))
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    vv, uu = np.meshgrid(coords, coords, indexing="ij")
    tex = np.zeros((size, size))
    for _ in range(3):
        fu, fv = id_rng.uniform(1.5, 4.0, 2)
        phase = id_rng.uniform(0, 2 * np.pi)
        tex += np.sin(fu * np.pi * uu + fv * np.pi * vv + phase)
    tex *= 0.025 / 3.0
    presence = image.max(axis=2)
    face = np.clip(presence / 0.04, 0.0, 1.0)
    toned = toned + (tex * face)[..., None]

    # (c) background composite with per-image jitter
    nuis = _hash_seed(params.identity_label, params.expression_coeffs, params.pose, params.lighting)
    img_rng = np.random.default_rng(nuis)
    bg = bg_color + img_rng.normal(0.0, 0.02, channels)
    out = toned * face[..., None] + bg * (1.0 - face)[..., None]

    # (d) mild blur
    kernel = np.array([0.25, 0.5, 0.25])
    out = ndimage.correlate1d(out, kernel, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def realism_many(images: np.ndarray, params: list[MorphParams]) -> np.ndarray:
    if len(images) != len(params):
        raise ValueError("one parameter set per image is required")
    if len(images) == 0:
        return np.zeros_like(images)
    return np.stack([realism_transform(im, p) for im, p in zip(images, params)])


# ---------------------------------------------------------------------------
# datasets


def id_ranges(dc: DataConfig) -> dict[str, range]:
    """Identity label range of each split; raises on overlap."""
    from .config import ConfigError

    counts = {
        "unpaired_synthetic": dc.synth_ids,
        "unpaired_real": dc.real_ids,
        "paired": dc.paired,
        "heldout": dc.heldout_ids,
        "pretrain": dc.pretrain_ids,
    }
    starts = {
        "unpaired_synthetic": dc.synth_id_start,
        "unpaired_real": dc.real_id_start,
        "paired": dc.paired_id_start,
        "heldout": dc.heldout_id_start,
        "pretrain": dc.pretrain_id_start,
    }
    ranges: dict[str, range] = {}
    cursor = 0
    for name, n in counts.items():
        start = starts[name] if starts[name] is not None else cursor
        ranges[name] = range(start, start + n)
        cursor = max(cursor, start + n)
    names = list(ranges)
    clashes = []
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            ra, rb = ranges[a], ranges[b]
            if ra.start < rb.stop and rb.start < ra.stop:
                clashes.append(f"{a}/{b}")
    if clashes:
        raise ConfigError("overlapping identity ranges: " + ", ".join(clashes),
                          [f"data.{n}" for n in clashes])
    return ranges


def _split_seed(seed: int, name: str) -> int:
    return _hash_seed(seed, DatasetBundle.SPLITS.index(name)) % (2 ** 63)


def build_datasets(config: TrainConfig) -> DatasetBundle:
    dc = config.data
    ranges = id_ranges(dc)
    size, ch = dc.image_size, dc.channels

    def params_for(name, num_ids, per_id):
        return sample_params(_split_seed(config.seed, name), num_ids, per_id,
                             d_id=dc.d_id, d_ex=dc.d_ex, id_start=ranges[name].start)

    ps = params_for("unpaired_synthetic", dc.synth_ids, dc.synth_per_id)
    synth = Split(render_many(ps, size, ch), np.array([p.identity_label for p in ps]), ps)

    pr = params_for("unpaired_real", dc.real_ids, dc.real_per_id)
    real = Split(realism_many(render_many(pr, size, ch), pr), np.array([p.identity_label for p in pr]))

    pp = params_for("paired", dc.paired, 1)
    p_syn = render_many(pp, size, ch)
    paired = Split(p_syn, np.array([p.identity_label for p in pp]), pp, realism_many(p_syn, pp))

    ph = params_for("heldout", dc.heldout_ids, dc.heldout_per_id)
    h_syn = render_many(ph, size, ch)
    heldout = Split(h_syn, np.array([p.identity_label for p in ph]), ph, realism_many(h_syn, ph))

    pt = params_for("pretrain", dc.pretrain_ids, dc.pretrain_per_id)
    pretrain = Split(realism_many(render_many(pt, size, ch), pt), np.array([p.identity_label for p in pt]))

    meta = {
        "version": DATASET_FORMAT_VERSION,
        "seed": config.seed,
        "image_size": size,
        "channels": ch,
        "d_id": dc.d_id,
        "d_ex": dc.d_ex,
        "id_ranges": {k: [r.start, r.stop] for k, r in ranges.items()},
    }
    return DatasetBundle(synth, real, paired, heldout, pretrain, meta)


# ---------------------------------------------------------------------------
# augmentation


def default_crop(size: int, ratio: float = 96 / 108) -> int:
    return int(round(size * ratio))


def augment_tensor(x: torch.Tensor, generator: torch.Generator, crop: int,
                   max_rotation: float = 10.0, flip_prob: float = 0.5,
                   flip: torch.Tensor | bool | None = None) -> torch.Tensor:
    """Random crop + rotation + horizontal flip of an NCHW batch; differentiable in ``x``."""
    n, _, h, w = x.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than input {h}x{w}")
    ox = torch.randint(0, w - crop + 1, (n,), generator=generator).to(x.dtype)
    oy = torch.randint(0, h - crop + 1, (n,), generator=generator).to(x.dtype)
    theta = (torch.rand(n, generator=generator, dtype=torch.float64) * 2 - 1) * math.radians(max_rotation)
    draw = torch.rand(n, generator=generator) < flip_prob
    if flip is None:
        flip = draw
    elif isinstance(flip, bool):
        flip = torch.full((n,), flip)

    j = torch.arange(crop, dtype=x.dtype) + 0.5
    qy, qx = torch.meshgrid(j, j, indexing="ij")
    half = crop / 2.0
    cos = torch.cos(theta).to(x.dtype)[:, None, None]
    sin = torch.sin(theta).to(x.dtype)[:, None, None]
    dx, dy = qx[None] - half, qy[None] - half
    px = ox[:, None, None] + half + cos * dx - sin * dy
    py = oy[:, None, None] + half + sin * dx + cos * dy
    grid = torch.stack([2 * px / w - 1, 2 * py / h - 1], dim=-1)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return torch.where(flip[:, None, None, None], out.flip(-1), out)


def augment(image: np.ndarray, seed: int, crop_ratio: float = 96 / 108,
            max_rotation: float = 10.0, flip: bool | None = None) -> np.ndarray:
    """Augment one HWC image: random crop to ``crop_ratio``, rotation, horizontal flip."""
    image = np.asarray(image, dtype=np.float32)
    size = image.shape[0]
    crop = default_crop(size, crop_ratio)
    if crop > size:
        raise ValueError(f"crop {crop} larger than input {size}")
    g = torch.Generator().manual_seed(int(seed))
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    out = augment_tensor(x, g, crop, max_rotation=max_rotation, flip=flip)
    return out[0].numpy().transpose(1, 2, 0).clip(0.0, 1.0)


# ---------------------------------------------------------------------------
# persistence


def write_raw(path: Path, array: np.ndarray) -> None:
    """Write a float32 little-endian row-major array preceded by a shape header.

    Header: magic ``SRAW``, uint32 rank, then one uint32 per dimension.
    """
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_RAW_MAGIC)
        f.write(np.array([a.ndim, *a.shape], dtype="<u4").tobytes())
        f.write(a.tobytes())


def read_raw(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _RAW_MAGIC:
        raise ValueError(f"{path}: not a raw array file")
    ndim = int(np.frombuffer(data, "<u4", 1, 4)[0])
    shape = tuple(int(v) for v in np.frombuffer(data, "<u4", ndim, 8))
    offset = 8 + 4 * ndim
    expected = int(np.prod(shape)) * 4
    if len(data) - offset != expected:
        raise ValueError(f"{path}: payload size {len(data) - offset} != {expected}")
    return np.frombuffer(data, "<f4", offset=offset).reshape(shape).astype(np.float32)


def save_bundle(bundle: DatasetBundle, directory: str | Path) -> Path:
    """Persist a bundle as ``manifest.json`` plus one raw file per image array."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = dict(bundle.meta)
    manifest["layout"] = ("raw files: b'SRAW', uint32 rank, uint32 dims..., "
                          "float32 little-endian row-major payload; images are (N, H, W, C)")
    manifest["splits"] = {}
    for name, split in bundle.splits():
        entry = {"count": len(split), "labels": [int(v) for v in split.labels],
                 "images": f"{name}.images.raw", "shape": list(split.images.shape)}
        write_raw(d / entry["images"], split.images)
        if split.targets is not None:
            entry["targets"] = f"{name}.targets.raw"
            write_raw(d / entry["targets"], split.targets)
        if split.params is not None:
            entry["params"] = [p.to_dict() for p in split.params]
        manifest["splits"][name] = entry
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_bundle(directory: str | Path) -> DatasetBundle:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')!r}")
    splits = {}
    for name in DatasetBundle.SPLITS:
        e = manifest["splits"][name]
        params = [MorphParams.from_dict(p) for p in e["params"]] if "params" in e else None
        targets = read_raw(d / e["targets"]) if "targets" in e else None
        splits[name] = Split(read_raw(d / e["images"]), np.array(e["labels"], dtype=np.int64),
                             params, targets)
    meta = {k: v for k, v in manifest.items() if k not in ("splits", "layout")}
    return DatasetBundle(meta=meta, **splits)
