"""Verification metrics, oracle fidelity, ablations, the augmentation experiment and image grids."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .config import ConfigError, TrainConfig, fingerprint
from .nets import WeightSet, build_network
from .toymm import DatasetBundle, MorphParams, Split, augment_tensor, render_many
from .trainer import TrainState, _seed, embed_images, embedder_spec, train, translate

log = logging.getLogger(__name__)

ABLATION_VARIANTS = {
    "Ours": {},
    "Ours without L_C": {"lambda_C": 0.0},
    "Ours without L_DP": {"lambda_DP": 0.0},
    "Ours without L_cyc": {"lambda_cyc": 0.0},
}


class DataError(ValueError):
    pass


def _module(w) -> nn.Module:
    return w.to_module() if isinstance(w, WeightSet) else w


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class VerificationPair:
    index_a: int
    index_b: int
    is_same_identity: bool


def build_verification_pairs(labels, n_pos: int = 1000, n_neg: int = 1000,
                             seed: int = 0) -> list[VerificationPair]:
    """Sample distinct same-identity and different-identity index pairs.

    Pairs are unordered (``index_a < index_b``) and never repeated.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or (counts >= 2).sum() < 2:
        raise DataError("need at least two identities with two or more images each")
    rng = np.random.default_rng(seed)

    pos_all = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        a, b = np.triu_indices(len(idx), k=1)
        pos_all.append(np.stack([idx[a], idx[b]], axis=1))
    pos_all = np.concatenate(pos_all)
    if len(pos_all) < n_pos:
        raise DataError(f"only {len(pos_all)} positive pairs available, {n_pos} requested")
    pos = pos_all[rng.choice(len(pos_all), n_pos, replace=False)]

    n = len(labels)
    max_neg = (n * (n - 1) - (counts * (counts - 1)).sum()) // 2
    if max_neg < n_neg:
        raise DataError(f"only {max_neg} negative pairs available, {n_neg} requested")
    neg: dict[tuple[int, int], None] = {}
    while len(neg) < n_neg:
        a, b = rng.integers(0, n, size=2)
        if labels[a] == labels[b]:
            continue
        neg.setdefault((int(min(a, b)), int(max(a, b))), None)

    pairs = [VerificationPair(int(a), int(b), True) for a, b in pos]
    pairs += [VerificationPair(a, b, False) for a, b in neg]
    return pairs


def pair_distances(embeddings: np.ndarray, pairs: list[VerificationPair]) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([p.index_a for p in pairs])
    b = np.array([p.index_b for p in pairs])
    d = np.linalg.norm(embeddings[a].astype(np.float64) - embeddings[b], axis=1)
    return d, np.array([p.is_same_identity for p in pairs])


def compute_eer(distances, labels) -> tuple[float, float]:
    """Equal error rate and best accuracy of the rule "same identity iff distance <= t".

    Thresholds are every midpoint between consecutive distinct distances plus
    one below and one above the range.  The EER is read off where the
    false-accept and false-reject curves cross, interpolating linearly
    between adjacent thresholds.
    """
    d = np.asarray(distances, dtype=np.float64)
    same = np.asarray(labels, dtype=bool)
    if d.shape != same.shape or d.ndim != 1:
        raise DataError("distances and labels must be vectors of equal length")
    n_pos, n_neg = int(same.sum()), int((~same).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("need at least one positive and one negative pair")

    u = np.unique(d)
    thresholds = np.concatenate([[u[0] - 1.0], (u[1:] + u[:-1]) / 2, [u[-1] + 1.0]])
    order = np.sort(d[same]), np.sort(d[~same])
    accepted_pos = np.searchsorted(order[0], thresholds, side="right")
    accepted_neg = np.searchsorted(order[1], thresholds, side="right")
    far = accepted_neg / n_neg
    frr = 1.0 - accepted_pos / n_pos
    acc = (accepted_pos + (n_neg - accepted_neg)) / (n_pos + n_neg)

    diff = far - frr  # non-decreasing, starts at -1 and ends at +1
    i = int(np.searchsorted(diff, 0.0, side="left"))
    if diff[i] == 0.0:
        eer = far[i]
    else:
        w = -diff[i - 1] / (diff[i] - diff[i - 1])
        eer = far[i - 1] + w * (far[i] - far[i - 1])
    return float(eer), float(acc.max())


@dataclass
class DistanceHistogram:
    edges: np.ndarray
    pos_counts: np.ndarray
    neg_counts: np.ndarray

    def to_csv(self) -> str:
        rows = ["bin_left,bin_right,pos_count,neg_count"]
        for i in range(len(self.pos_counts)):
            rows.append(f"{self.edges[i]:.6f},{self.edges[i + 1]:.6f},{self.pos_counts[i]},{self.neg_counts[i]}")
        return "\n".join(rows) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


def histogram_of(distances, labels, bins: int = 20, value_range=(0.0, 2.0)) -> DistanceHistogram:
    if bins < 1:
        raise ValueError("bins must be positive")
    d = np.clip(np.asarray(distances, dtype=np.float64), *value_range)
    same = np.asarray(labels, dtype=bool)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    pos, _ = np.histogram(d[same], bins=edges)
    neg, _ = np.histogram(d[~same], bins=edges)
    return DistanceHistogram(edges, pos, neg)


def distance_histogram(images: np.ndarray, pairs: list[VerificationPair], embedder,
                       bins: int = 20) -> DistanceHistogram:
    """Binned embedding distances of positive and negative pairs over [0, 2]."""
    if not pairs:
        raise DataError("no pairs")
    if bins < 1:
        raise ValueError("bins must be positive")
    emb = embed_images(_module(embedder), images)
    return histogram_of(*pair_distances(emb, pairs), bins=bins)


def verify(images: np.ndarray, labels, embedder, n_pos: int = 1000, n_neg: int = 1000,
           seed: int = 0, bins: int = 20) -> tuple[float, float, DistanceHistogram]:
    """EER, best accuracy and distance histogram of ``images`` in the embedder."""
    pairs = build_verification_pairs(labels, n_pos, n_neg, seed)
    d, same = pair_distances(embed_images(_module(embedder), images), pairs)
    eer, acc = compute_eer(d, same)
    return eer, acc, histogram_of(d, same, bins)


# ---------------------------------------------------------------------------
# fidelity and reports


def oracle_fidelity(generator, heldout: Split, batch: int = 256) -> float:
    """Mean over held-out inputs of the mean absolute deviation from the oracle image."""
    if heldout.targets is None:
        raise DataError("held-out split has no oracle images")
    out = translate(_module(generator), heldout.images, batch)
    per_image = np.abs(out.astype(np.float64) - heldout.targets).reshape(len(out), -1).mean(axis=1)
    return float(per_image.mean())


@dataclass
class EvalReport:
    accuracy: float
    one_minus_eer: float
    fidelity: float
    histogram: DistanceHistogram | None = None
    config_fingerprint: str = ""

    def __post_init__(self):
        for name in ("accuracy", "one_minus_eer"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def eer(self) -> float:
        return 1.0 - self.one_minus_eer

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "one_minus_eer": self.one_minus_eer,
                "fidelity": self.fidelity, "config_fingerprint": self.config_fingerprint}


def evaluate(state: TrainState, bundle: DatasetBundle, use_ema: bool = True, n_pos: int = 1000,
             n_neg: int = 1000, seed: int = 0) -> EvalReport:
    """Verification on generated held-out images in the frozen embedder, plus oracle fidelity."""
    G = state.generator(use_ema)
    held = bundle.heldout
    eer, acc, hist = verify(translate(G, held.images), held.labels, state.embedder, n_pos, n_neg, seed)
    return EvalReport(acc, 1.0 - eer, oracle_fidelity(G, held), hist, fingerprint(state.config))


def data_fingerprint(bundle: DatasetBundle) -> str:
    h = hashlib.sha256()
    for name, split in bundle.splits():
        h.update(name.encode())
        h.update(np.ascontiguousarray(split.images).tobytes())
        h.update(np.asarray(split.labels).tobytes())
        if split.targets is not None:
            h.update(np.ascontiguousarray(split.targets).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    name: str
    report: EvalReport | None
    data_fingerprint: str
    config_fingerprint: str
    error: str | None = None


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    return replace(base, loss=replace(base.loss, **ABLATION_VARIANTS[name]))


def run_ablation(base: TrainConfig, bundle: DatasetBundle, embedder: WeightSet,
                 variants=tuple(ABLATION_VARIANTS), n_pos: int = 1000, n_neg: int = 1000,
                 ) -> list[AblationRow]:
    """Train each variant from the same seeds and data and evaluate it.

    A variant whose training fails is reported with its error; the others still run.
    """
    data_fp = data_fingerprint(bundle)
    rows = []
    for name in variants:
        cfg = variant_config(base, name)
        try:
            state, _ = train(cfg, bundle, embedder)
            report = evaluate(state, bundle, n_pos=n_pos, n_neg=n_neg, seed=cfg.seed)
            rows.append(AblationRow(name, report, data_fp, fingerprint(cfg)))
        except (FloatingPointError, RuntimeError, ValueError) as e:
            log.warning("variant %r failed: %s", name, e)
            rows.append(AblationRow(name, None, data_fp, fingerprint(cfg), f"{type(e).__name__}: {e}"))
    return rows


def format_table(rows: list[AblationRow]) -> str:
    lines = [f"{'variant':<22} {'1-EER':>7} {'acc':>7} {'fidelity':>9}"]
    for r in rows:
        if r.report is None:
            lines.append(f"{r.name:<22} failed: {r.error}")
        else:
            lines.append(f"{r.name:<22} {r.report.one_minus_eer:7.4f} {r.report.accuracy:7.4f} "
                         f"{r.report.fidelity:9.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# augmentation experiment


@dataclass
class AugmentConfig:
    iters: int = 600
    batch_size: int = 64
    lr: float = 2e-3
    generated_grad_scale: float = 0.5
    n_pos: int = 1000
    n_neg: int = 1000


@dataclass
class AugmentCell:
    fraction: float
    augmented: bool
    accuracy: float
    eer: float


def subsample_per_identity(labels, fraction: float, seed: int) -> np.ndarray:
    """Indices keeping ``fraction`` of each identity's images (at least one)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}", ["fractions"])
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = max(1, int(round(fraction * len(idx))))
        keep.append(np.sort(rng.choice(idx, k, replace=False)))
    return np.concatenate(keep)


def _nchw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


def train_classifier(config: TrainConfig, real: tuple[np.ndarray, np.ndarray],
                     generated: tuple[np.ndarray, np.ndarray] | None, aug: AugmentConfig,
                     seed: int) -> nn.Module:
    """Embedder trained with a cosine-softmax head on real identities.

    With ``generated`` a second head classifies generated identities; its loss
    gradient is scaled by ``aug.generated_grad_scale`` before reaching the trunk.
    """
    spec = embedder_spec(config)
    torch.manual_seed(_seed(seed, 400))
    net = build_network(spec)
    heads = []

    def make_head(labels):
        classes = np.unique(labels)
        head = nn.Parameter(torch.randn(len(classes), spec.embedding_dim) * 0.1)
        heads.append(head)
        return torch.from_numpy(np.searchsorted(classes, labels)), head

    real_x, (real_y, real_head) = _nchw(real[0]), make_head(real[1])
    if generated is not None:
        gen_x, (gen_y, gen_head) = _nchw(generated[0]), make_head(generated[1])
    opt = torch.optim.Adam(list(net.parameters()) + heads, lr=aug.lr)
    g = torch.Generator().manual_seed(_seed(seed, 401))
    rng = np.random.default_rng(_seed(seed, 402))
    net.train()
    for it in range(aug.iters):
        for pg in opt.param_groups:
            pg["lr"] = aug.lr * 0.5 * (1 + math.cos(math.pi * it / aug.iters))
        idx = rng.choice(len(real_x), min(aug.batch_size, len(real_x)), replace=False)
        emb = net(augment_tensor(real_x[idx], g, spec.input_size))
        loss = F.cross_entropy(16.0 * emb @ F.normalize(real_head, dim=1).T, real_y[idx])
        if generated is not None:
            jdx = rng.choice(len(gen_x), min(aug.batch_size, len(gen_x)), replace=False)
            emb_g = net(augment_tensor(gen_x[jdx], g, spec.input_size))
            loss = loss + aug.generated_grad_scale * F.cross_entropy(
                16.0 * emb_g @ F.normalize(gen_head, dim=1).T, gen_y[jdx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net.eval()


def augmentation_experiment(fractions, generated: tuple[np.ndarray, np.ndarray],
                            real_train: tuple[np.ndarray, np.ndarray],
                            test: tuple[np.ndarray, np.ndarray], config: TrainConfig,
                            aug: AugmentConfig | None = None, seed: int = 0) -> list[AugmentCell]:
    """Classifiers on a fraction of the real training set, with and without generated images.

    Every cell is scored by pairwise verification on the ``test`` identities.
    """
    aug = aug or AugmentConfig()
    fractions = list(fractions)
    if not fractions or len(generated[0]) == 0 or len(real_train[0]) == 0:
        raise ConfigError("augmentation experiment has an empty cell", ["fractions"])
    pairs = build_verification_pairs(test[1], aug.n_pos, aug.n_neg, seed)
    cells = []
    for frac in fractions:
        idx = subsample_per_identity(real_train[1], frac, _seed(seed, 410))
        subset = (real_train[0][idx], real_train[1][idx])
        for augmented in (False, True):
            net = train_classifier(config, subset, generated if augmented else None, aug, seed)
            d, same = pair_distances(embed_images(net, test[0]), pairs)
            eer, acc = compute_eer(d, same)
            cells.append(AugmentCell(float(frac), augmented, acc, eer))
            log.info("fraction %.2f augmented %s: acc %.4f eer %.4f", frac, augmented, acc, eer)
    return cells


# ---------------------------------------------------------------------------
# image grids


def tile(images: np.ndarray, rows: int, cols: int) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or rows * cols != len(images):
        raise ValueError(f"cannot tile {images.shape[0] if images.ndim == 4 else images.shape} "
                         f"images as {rows}x{cols}")
    n, h, w, c = images.shape
    return images.reshape(rows, cols, h, w, c).transpose(0, 2, 1, 3, 4).reshape(rows * h, cols * w, c)


def emit_grid(images: np.ndarray, rows: int, cols: int, path: str | Path) -> np.ndarray:
    """Tile NHWC images in [0, 1] row-major and save them as a PNG; returns the uint8 grid."""
    grid = np.round(np.clip(tile(images, rows, cols), 0, 1) * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid[..., 0] if grid.shape[-1] == 1 else grid).save(path)
    return grid


def interpolate_params(a: MorphParams, b: MorphParams, t: float) -> MorphParams:
    ia, ib = np.asarray(a.identity_coeffs), np.asarray(b.identity_coeffs)
    return a.replace(identity_coeffs=tuple(float(v) for v in ia + t * (ib - ia)))


def _generate(generator, params: list[MorphParams], size: int, channels: int) -> np.ndarray:
    renders = render_many(params, size, channels)
    return translate(_module(generator), renders) if generator is not None else renders


def emit_interpolation_grid(id_a: MorphParams, id_b: MorphParams, steps: int, pose_range,
                            generator, path: str | Path, size: int = 32,
                            channels: int = 3) -> tuple[np.ndarray, list[MorphParams]]:
    """Identity blended along columns, horizontal pose varied along rows, rendered through G."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    poses = list(pose_range)
    params = []
    for shear in poses:
        for i in range(steps):
            p = interpolate_params(id_a, id_b, i / (steps - 1))
            params.append(p.replace(pose=(float(shear), p.pose[1])))
    return emit_grid(_generate(generator, params, size, channels), len(poses), steps, path), params


def emit_illumination_strip(params: MorphParams, strengths, generator, path: str | Path,
                            size: int = 32, channels: int = 3) -> np.ndarray:
    ps = [params.replace(lighting=(params.lighting[0], float(s))) for s in strengths]
    return emit_grid(_generate(generator, ps, size, channels), 1, len(ps), path)
