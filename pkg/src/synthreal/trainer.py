"""Joint training of G, G', D_R and D_S with a frozen pretrained embedder.

Each step evaluates every objective from the same pre-step weights and then
updates the three parameter groups simultaneously:

* G   minimises  L_G  + lam_cyc*L_cyc + lam_C*L_C + lam_id*L_id
* G'  minimises  L_G' + lam_cyc*L_cyc + lam_DP*L_DP
* D_R, D_S minimise L_DR + L_DS

Gradients are taken only with respect to each group's own parameters.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .config import ConfigError, TrainConfig, from_dict, to_dict
from .nets import (AUTOENCODER, EMBEDDER, GENERATOR, INVERSE_GENERATOR, Embedder, NetworkSpec,
                   WeightSet, build_network, center_crop)
from .toymm import DatasetBundle, Split, augment_tensor, build_datasets, default_crop

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "synthreal-ckpt-1"
NETS = ("G", "G_inv", "D_R", "D_S")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


class CheckpointError(RuntimeError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# specs and schedules


def network_specs(config: TrainConfig) -> dict[str, NetworkSpec]:
    d, n = config.data, config.nets
    common = dict(input_size=d.image_size, channels=d.channels)
    return {
        "G": NetworkSpec(GENERATOR, base_channels=n.base_channels, use_skip=n.use_skip,
                         num_residual_blocks=n.num_residual_blocks, dropout_keep=n.dropout_keep, **common),
        "G_inv": NetworkSpec(INVERSE_GENERATOR, base_channels=n.base_channels, use_skip=n.inverse_use_skip,
                             num_residual_blocks=n.num_residual_blocks, dropout_keep=n.dropout_keep, **common),
        "D_R": NetworkSpec(AUTOENCODER, base_channels=n.disc_channels, bottleneck=n.bottleneck, **common),
        "D_S": NetworkSpec(AUTOENCODER, base_channels=n.disc_channels, bottleneck=n.bottleneck, **common),
    }


def embedder_spec(config: TrainConfig) -> NetworkSpec:
    return NetworkSpec(EMBEDDER, input_size=default_crop(config.data.image_size),
                       channels=config.data.channels, base_channels=config.nets.embed_channels,
                       embedding_dim=config.nets.embedding_dim)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Base rate halved once for every milestone already reached."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    passed = sum(1 for m in config.milestones() if iteration >= m)
    return config.base_lr * 2.0 ** (-passed)


def ema_update(ema: WeightSet, current: WeightSet, decay: float) -> WeightSet:
    if list(ema.arrays) != list(current.arrays):
        raise ValueError("weight sets have different layouts")
    out = OrderedDict()
    for k, a in ema.arrays.items():
        b = current.arrays[k]
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch for {k!r}")
        out[k] = decay * a + (1.0 - decay) * b
    return WeightSet(ema.spec, out, ema.version)


@torch.no_grad()
def _ema_modules(ema: nn.Module, current: nn.Module, decay: float) -> None:
    for pe, pc in zip(ema.parameters(), current.parameters()):
        pe.copy_(decay * pe + (1.0 - decay) * pc)


def _seed(*parts: int) -> int:
    h = hashlib.blake2b(np.asarray(parts, dtype=np.int64).tobytes(), digest_size=8)
    return int.from_bytes(h.digest(), "little") % (2 ** 62)


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    config: TrainConfig
    nets: dict[str, nn.Module]
    ema: dict[str, nn.Module]
    embedder: Embedder
    optimizers: dict[str, torch.optim.Adam]
    equilibrium: L.EquilibriumState
    centroids: L.CentroidStore
    iteration: int = 0
    last_record: dict | None = None

    def clone(self) -> "TrainState":
        return copy.deepcopy(self)

    def weights(self, name: str, use_ema: bool = False) -> WeightSet:
        return WeightSet.from_module((self.ema if use_ema else self.nets)[name])

    def embedder_weights(self) -> WeightSet:
        return WeightSet.from_module(self.embedder)

    def generator(self, use_ema: bool = True) -> nn.Module:
        return (self.ema if use_ema else self.nets)["G"]


def _freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def _make_optimizers(nets, config: TrainConfig) -> dict[str, torch.optim.Adam]:
    kw = dict(lr=config.base_lr, betas=tuple(config.adam_betas), eps=config.adam_eps)
    return {
        "G": torch.optim.Adam(nets["G"].parameters(), **kw),
        "G_inv": torch.optim.Adam(nets["G_inv"].parameters(), **kw),
        "D": torch.optim.Adam(list(nets["D_R"].parameters()) + list(nets["D_S"].parameters()), **kw),
    }


def init_state(config: TrainConfig, embedder: WeightSet) -> TrainState:
    specs = network_specs(config)
    nets = {}
    for i, name in enumerate(NETS):
        torch.manual_seed(_seed(config.seed, 100 + i))
        nets[name] = build_network(specs[name])
    ema = {name: _freeze(copy.deepcopy(nets[name])) for name in ("G", "G_inv")}
    emb = _freeze(embedder.to_module())
    return TrainState(
        config=config,
        nets=nets,
        ema=ema,
        embedder=emb,
        optimizers=_make_optimizers(nets, config),
        equilibrium=L.EquilibriumState(rate=config.equilibrium.rate, gamma=config.equilibrium.gamma),
        centroids=L.CentroidStore(config.nets.embedding_dim, config.identity.beta,
                                  config.identity.interpret_beta_as_retention),
    )


# ---------------------------------------------------------------------------
# batches


@dataclass
class TrainData:
    """Dataset splits converted once to NCHW tensors."""

    synth: torch.Tensor
    synth_labels: np.ndarray
    real: torch.Tensor
    paired_s: torch.Tensor
    paired_r: torch.Tensor

    @classmethod
    def from_bundle(cls, bundle: DatasetBundle) -> "TrainData":
        def t(a):
            return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))

        return cls(t(bundle.unpaired_synthetic.images), bundle.unpaired_synthetic.labels,
                   t(bundle.unpaired_real.images), t(bundle.paired.images), t(bundle.paired.targets))


def sample_batches(data: TrainData, config: TrainConfig, iteration: int) -> dict:
    rng = np.random.default_rng(_seed(config.seed, 1, iteration))
    b = config.batch_size
    i_x = rng.choice(len(data.synth), b, replace=False)
    i_y = rng.choice(len(data.real), b, replace=False)
    i_p = rng.choice(len(data.paired_s), b, replace=len(data.paired_s) < b)
    return {
        "x": data.synth[i_x],
        "labels": data.synth_labels[i_x],
        "y": data.real[i_y],
        "s": data.paired_s[i_p],
        "r": data.paired_r[i_p],
    }


# ---------------------------------------------------------------------------
# one step


def compute_losses(state: TrainState, batches: dict, generator: torch.Generator) -> dict:
    """Every loss term of one step, from the current weights, as graph-attached tensors."""
    cfg = state.config
    G, G_inv, D_R, D_S = (state.nets[n] for n in NETS)
    x, y, s, r = batches["x"], batches["y"], batches["s"], batches["r"]
    labels = batches["labels"]
    eq = state.equilibrium

    G.train()
    gx = G(x, generator=generator)
    cyc_x = G_inv(gx)
    out = {"gx": gx}
    out["L_G"] = L.began_gen_loss(gx, D_R(gx))
    out["L_Ginv"] = L.began_gen_loss(cyc_x, D_S(cyc_x))
    out["L_cyc"] = L.cycle_loss(x, cyc_x)
    inv_r = G_inv(r)
    out["pair"] = L.reconstruction_error(s, inv_r)
    out["L_DP"] = L.pair_disc_loss(s, inv_r, out["L_cyc"], eq.k_DP)
    out["L_id"] = L.identity_pixel_loss(x, gx)
    out["real_R"] = L.reconstruction_error(y, D_R(y))
    out["real_S"] = L.reconstruction_error(x, D_S(x))
    out["L_DR"] = L.began_disc_loss(out["real_R"], out["L_G"], eq.k_DR)
    out["L_DS"] = L.began_disc_loss(out["real_S"], out["L_Ginv"], eq.k_DS)

    crops = augment_tensor(gx, generator, state.embedder.spec.input_size)
    emb = state.embedder(crops)
    out["emb"] = emb
    ident = cfg.identity
    if len(state.centroids.labels()) >= 2:
        out["L_C"], out["sigma2"] = L.identity_set_loss(
            emb, labels, state.centroids, ident.eta, sign=ident.eq7_sign, sigma_floor=ident.sigma_floor,
            stop_gradient=ident.sigma_stop_gradient, return_sigma=True)
        out["L_C_active"] = True
    else:
        out["L_C"] = emb.sum() * 0.0
        out["sigma2"] = torch.tensor(0.0)
        out["L_C_active"] = False
    return out


def objectives(terms: dict, config: TrainConfig, detach_adversarial: bool = False) -> dict:
    lw = config.loss
    lg, lginv = terms["L_G"], terms["L_Ginv"]
    if detach_adversarial:
        lg, lginv = lg.detach(), lginv.detach()
    lam_id = lw.lambda_id if config.identity.use_identity_pixel_loss else 0.0
    return {
        "G": lg + lw.lambda_cyc * terms["L_cyc"] + lw.lambda_C * terms["L_C"] + lam_id * terms["L_id"],
        "G_inv": lginv + lw.lambda_cyc * terms["L_cyc"] + lw.lambda_DP * terms["L_DP"],
        "D": terms["L_DR"] + terms["L_DS"],
    }


_LOGGED = ("L_G", "L_Ginv", "L_cyc", "L_DP", "pair", "L_C", "L_id", "real_R", "real_S", "L_DR", "L_DS")


def _params(state: TrainState, group: str) -> list[nn.Parameter]:
    if group == "D":
        return list(state.nets["D_R"].parameters()) + list(state.nets["D_S"].parameters())
    return list(state.nets[group].parameters())


def train_step(state: TrainState, batches: dict, detach_adversarial: bool = False) -> TrainState:
    """Advance ``state`` by one simultaneous update (in place) and return it.

    The step's metrics record is left in ``state.last_record``.
    """
    cfg = state.config
    it = state.iteration
    g = torch.Generator().manual_seed(_seed(cfg.seed, 2, it))
    terms = compute_losses(state, batches, g)
    objs = objectives(terms, cfg, detach_adversarial)

    eq = state.equilibrium
    record = {"iteration": it, "lr": lr_at(it, cfg)}
    for name in _LOGGED:
        record[name] = float(terms[name].detach())
    for name, v in objs.items():
        record[f"obj_{name}"] = float(v.detach())
    record.update(k_DR=eq.k_DR, k_DS=eq.k_DS, k_DP=eq.k_DP, sigma2=float(terms["sigma2"]),
                  L_C_active=terms["L_C_active"])
    bad = [k for k, v in record.items() if isinstance(v, float) and not math.isfinite(v)]
    if bad:
        raise TrainingDiverged(f"non-finite values at iteration {it}: {bad}", record)

    grads = {}
    for group, obj in objs.items():
        params = _params(state, group)
        gs = torch.autograd.grad(obj, params, retain_graph=True, allow_unused=True)
        grads[group] = [torch.zeros_like(p) if gr is None else gr for p, gr in zip(params, gs)]
    lr = record["lr"]
    for group, opt in state.optimizers.items():
        for p, gr in zip(_params(state, group), grads[group]):
            p.grad = gr
        for pg in opt.param_groups:
            pg["lr"] = lr
        opt.step()
        opt.zero_grad(set_to_none=True)

    state.equilibrium = L.EquilibriumState(
        k_DR=L.update_k(eq.k_DR, record["real_R"], record["L_G"], eq.rate, eq.gamma),
        k_DS=L.update_k(eq.k_DS, record["real_S"], record["L_Ginv"], eq.rate, eq.gamma),
        k_DP=L.update_k(eq.k_DP, record["pair"], record["L_cyc"], eq.rate, eq.gamma),
        rate=eq.rate, gamma=eq.gamma)
    state.centroids = L.update_centroids(state.centroids, terms["emb"].detach(), batches["labels"])
    for name in ("G", "G_inv"):
        _ema_modules(state.ema[name], state.nets[name], cfg.ema_decay)
    state.iteration = it + 1
    state.last_record = record
    return state


# ---------------------------------------------------------------------------
# metrics log


class MetricsLog:
    """Append-only list of per-iteration records, optionally mirrored to a JSONL file."""

    def __init__(self, path: str | Path | None = None, resume_from: int | None = None):
        """Start a fresh log, or with ``resume_from`` keep the file's records before that iteration."""
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path and resume_from is not None and self.path.exists():
            self.records = [r for r in self.read(self.path) if r["iteration"] < resume_from]
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("".join(json.dumps(r) + "\n" for r in self.records))

    def append(self, record: dict) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("iteration indices must increase")
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# checkpoints


def _state_arrays(state: TrainState) -> "OrderedDict[str, np.ndarray]":
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, net in state.nets.items():
        for k, v in net.state_dict().items():
            arrays[f"net/{name}/{k}"] = v.numpy()
    for name, net in state.ema.items():
        for k, v in net.state_dict().items():
            arrays[f"ema/{name}/{k}"] = v.numpy()
    for k, v in state.embedder.state_dict().items():
        arrays[f"embedder/{k}"] = v.numpy()
    for group, opt in state.optimizers.items():
        for idx, st in opt.state_dict()["state"].items():
            for k, v in st.items():
                arrays[f"opt/{group}/{idx}/{k}"] = torch.as_tensor(v).numpy()
    for label in state.centroids.labels():
        arrays[f"centroid/{label}"] = state.centroids.centroids[label].numpy()
    return arrays


def checkpoint_save(state: TrainState, path: str | Path) -> Path:
    """Write ``arrays.npz`` and ``manifest.json`` (with the archive's sha256) into ``path``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **_state_arrays(state))
    payload = buf.getvalue()
    (d / "arrays.npz").write_bytes(payload)
    eq = state.equilibrium
    manifest = {
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "seed": state.config.seed,
        "config": to_dict(state.config),
        "equilibrium": {"k_DR": eq.k_DR, "k_DS": eq.k_DS, "k_DP": eq.k_DP, "rate": eq.rate, "gamma": eq.gamma},
        "centroid_labels": state.centroids.labels(),
        "embedder_spec": vars(state.embedder.spec).copy(),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def checkpoint_load(path: str | Path) -> TrainState:
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{d}: unreadable manifest: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(
            f"{d}: checkpoint version {manifest.get('version')!r}, expected {CHECKPOINT_VERSION!r}")
    try:
        payload = (d / "arrays.npz").read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"{d}: missing arrays: {exc}") from exc
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise CorruptCheckpoint(f"{d}: arrays.npz does not match its recorded checksum")
    with np.load(io.BytesIO(payload)) as z:
        arrays = {k: z[k] for k in z.files}

    config = from_dict(manifest["config"])
    emb_spec = NetworkSpec(**manifest["embedder_spec"])
    emb_arrays = OrderedDict((k[len("embedder/"):], v) for k, v in arrays.items() if k.startswith("embedder/"))
    state = init_state(config, WeightSet(emb_spec, emb_arrays))

    def load_module(net, prefix):
        sd = OrderedDict((k, torch.from_numpy(arrays[f"{prefix}/{k}"].copy())) for k in net.state_dict())
        net.load_state_dict(sd)

    for name, net in state.nets.items():
        load_module(net, f"net/{name}")
    for name, net in state.ema.items():
        load_module(net, f"ema/{name}")
    for group, opt in state.optimizers.items():
        sd = opt.state_dict()
        per_param: dict[int, dict] = {}
        prefix = f"opt/{group}/"
        for k, v in arrays.items():
            if k.startswith(prefix):
                idx, field_name = k[len(prefix):].split("/")
                per_param.setdefault(int(idx), {})[field_name] = torch.from_numpy(v.copy())
        sd["state"] = per_param
        opt.load_state_dict(sd)
    e = manifest["equilibrium"]
    state.equilibrium = L.EquilibriumState(**e)
    state.centroids.centroids = {int(lbl): torch.from_numpy(arrays[f"centroid/{lbl}"].copy())
                                 for lbl in manifest["centroid_labels"]}
    state.iteration = int(manifest["iteration"])
    return state


def states_equal(a: TrainState, b: TrainState) -> bool:
    if a.iteration != b.iteration or a.equilibrium != b.equilibrium:
        return False
    if not a.centroids.equals(b.centroids):
        return False
    aa, bb = _state_arrays(a), _state_arrays(b)
    return list(aa) == list(bb) and all(np.array_equal(aa[k], bb[k]) for k in aa)


# ---------------------------------------------------------------------------
# embedder pretraining


def pretrain_embedder(pretrain: Split, config: TrainConfig, exclude_ids=()) -> WeightSet:
    """Train the embedder with a cosine-softmax head over ``pretrain`` identities.

    The head is discarded; the returned weights are what training freezes.
    """
    overlap = pretrain.identities() & set(int(v) for v in exclude_ids)
    if overlap:
        raise ConfigError(f"pretraining identities overlap training/evaluation ids: {sorted(overlap)[:5]}...",
                          ["data.pretrain_id_start"])
    pc = config.pretrain
    spec = embedder_spec(config)
    torch.manual_seed(_seed(config.seed, 300))
    net = build_network(spec)
    classes = np.unique(pretrain.labels)
    target = torch.from_numpy(np.searchsorted(classes, pretrain.labels))
    head = nn.Parameter(torch.randn(len(classes), spec.embedding_dim) * 0.1)
    images = torch.from_numpy(np.ascontiguousarray(pretrain.images.transpose(0, 3, 1, 2)))
    opt = torch.optim.Adam(list(net.parameters()) + [head], lr=pc.lr, weight_decay=pc.weight_decay)
    g = torch.Generator().manual_seed(_seed(config.seed, 301))
    rng = np.random.default_rng(_seed(config.seed, 302))
    net.train()
    for it in range(pc.iters):
        for pg in opt.param_groups:
            pg["lr"] = pc.lr * 0.5 * (1 + math.cos(math.pi * it / pc.iters))
        idx = rng.choice(len(images), min(pc.batch_size, len(images)), replace=False)
        crops = augment_tensor(images[idx], g, spec.input_size)
        emb = net(crops)
        logits = 16.0 * emb @ F.normalize(head, dim=1).T
        loss = F.cross_entropy(logits, target[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % 500 == 0:
            log.info("pretrain %d loss %.4f", it, loss.item())
    return WeightSet.from_module(net.eval())


def embed_images(embedder: nn.Module, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Center-crop NHWC images to the embedder input size and embed them."""
    size = embedder.spec.input_size
    out = []
    embedder.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch].transpose(0, 3, 1, 2)))
            out.append(embedder(center_crop(x, size)).numpy())
    return np.concatenate(out) if out else np.zeros((0, embedder.spec.embedding_dim), np.float32)


def translate(generator: nn.Module, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Run a generator in eval mode over NHWC images."""
    generator.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch].transpose(0, 3, 1, 2)))
            out.append(generator(x).numpy().transpose(0, 2, 3, 1))
    return np.concatenate(out) if out else images.copy()


def nearest_centroid_accuracy(embeddings: np.ndarray, labels: np.ndarray, per_id_gallery: int = 1,
                              seed: int = 0) -> float:
    """Leave-one-out nearest-centroid identification accuracy.

    Each query is compared against class centroids computed without it.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    sums = np.stack([embeddings[labels == c].sum(0) for c in classes])
    counts = np.array([(labels == c).sum() for c in classes])
    correct = 0
    for e, l in zip(embeddings, labels):
        ci = np.searchsorted(classes, l)
        cents = sums.copy()
        n = counts.astype(np.float64).copy()
        cents[ci] -= e
        n[ci] -= 1
        if n[ci] == 0:
            continue
        cents = cents / n[:, None]
        correct += int(np.argmin(((cents - e) ** 2).sum(1)) == ci)
    return correct / len(labels)


# ---------------------------------------------------------------------------
# full run


def all_training_ids(bundle: DatasetBundle) -> set[int]:
    ids: set[int] = set()
    for name, split in bundle.splits():
        if name != "pretrain":
            ids |= split.identities()
    return ids


def train(config: TrainConfig, bundle: DatasetBundle | None = None, embedder: WeightSet | None = None,
          out_dir: str | Path | None = None, state: TrainState | None = None,
          steps: int | None = None, metrics: MetricsLog | None = None,
          grid_fn=None) -> tuple[TrainState, MetricsLog]:
    """Run (or resume) training until ``config.total_iters`` or for ``steps`` iterations."""
    if bundle is None:
        bundle = build_datasets(config)
    if state is None:
        if embedder is None:
            embedder = pretrain_embedder(bundle.pretrain, config, all_training_ids(bundle))
        state = init_state(config, embedder)
    out = Path(out_dir) if out_dir else None
    if metrics is None:
        metrics = MetricsLog(out / "metrics.jsonl" if out else None)
    data = TrainData.from_bundle(bundle)
    end = config.total_iters if steps is None else state.iteration + steps
    while state.iteration < end:
        batches = sample_batches(data, config, state.iteration)
        train_step(state, batches)
        metrics.append(state.last_record)
        it = state.iteration
        if config.log_every and it % config.log_every == 0:
            r = state.last_record
            log.info("iter %d L_G %.4f L_cyc %.4f L_DP %.4f L_C %.3f k_DR %.4f",
                     it, r["L_G"], r["L_cyc"], r["L_DP"], r["L_C"], r["k_DR"])
        if out and config.checkpoint_every and it % config.checkpoint_every == 0:
            checkpoint_save(state, out / "checkpoints" / f"iter_{it:07d}")
        if out and grid_fn and config.grid_every and it % config.grid_every == 0:
            grid_fn(state, out / "grids" / f"iter_{it:07d}.png")
    return state, metrics
