"""Batch construction, Adam, fine-tuning parameter partitions, and the
training loop.

A batch of k pairs contributes 2k images; both images of a pair share its
pair_id as the class label, which is what makes every matched pair a
positive and everything else a candidate negative.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import objective as obj
from . import tensor as T
from .data import DatasetSplit, PairedSample
from .encoder import Model, embed_batch, embed_dataset, save_checkpoint
from .tensor import Tensor

POLICIES = ("original", "linear", "partial", "lora_r4", "lora_r8", "lora_r16",
            "full", "proposed")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ParameterPartition:
    policy_name: str
    trainable: frozenset[str]
    frozen: frozenset[str]


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_pairs: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss_kind: str = "circle"     # "circle" | "triplet"
    sampling: str = "mined"       # "mined" | "standard"
    miner: obj.MinerConfig = field(default_factory=obj.MinerConfig)
    circle: obj.CircleLossParams = field(default_factory=obj.CircleLossParams)
    triplet_margin: float = 0.3
    checkpoint_every: int = 0     # epochs between snapshots; 0 = final only
    augment: bool = True          # seeded orientation/shift jitter per batch

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_pairs < 2:
            raise ValueError("batch_pairs must be >= 2 so a batch admits negatives")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.loss_kind not in ("circle", "triplet"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.sampling not in ("mined", "standard"):
            raise ValueError(f"unknown sampling {self.sampling!r}")
        self.miner.validate()
        self.circle.validate()


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_top1: float


# ---------------------------------------------------------------------------
# parameter partitions


def _head_names(model: Model) -> set[str]:
    # the model's trailing linear maps: per-channel heads plus the fusion gate
    return {n for n in model.params
            if ".head." in n or n.startswith("gate.")}


def _block_index(name: str) -> int | None:
    for part in name.split("."):
        if part.startswith("block") and part[5:].isdigit():
            return int(part[5:])
    return None


def _partial_names(model: Model) -> set[str]:
    # second half of each channel's block stack plus the trailing norm
    cfg = model.config
    depth = {"local": cfg.n_blocks_local, "global": cfg.n_blocks_global}
    out = set()
    for name in model.params:
        channel = name.split(".", 1)[0]
        k = _block_index(name)
        if channel in depth and k is not None and k >= depth[channel] // 2:
            out.add(name)
        if ".final." in name:
            out.add(name)
    return out


def make_partition(model: Model, policy_name: str) -> ParameterPartition:
    """Split parameter names into trainable and frozen per a named policy."""
    if policy_name not in POLICIES:
        raise ValueError(f"unknown policy {policy_name!r}; choose from {POLICIES}")
    all_names = set(model.params)
    lora_names = {n for n in all_names if n.endswith((".lora_A", ".lora_B"))}

    if policy_name == "original":
        trainable: set[str] = set()
    elif policy_name == "linear":
        trainable = _head_names(model)
    elif policy_name == "partial":
        trainable = _partial_names(model) - lora_names | _head_names(model)
    elif policy_name.startswith("lora_r"):
        rank = int(policy_name[len("lora_r"):])
        if model.lora_rank != rank:
            raise ValueError(
                f"policy {policy_name} needs a model with LoRA rank {rank}, "
                f"got rank {model.lora_rank}"
            )
        trainable = lora_names | _head_names(model)
    else:  # full, proposed
        trainable = set(all_names)
    return ParameterPartition(
        policy_name=policy_name,
        trainable=frozenset(trainable),
        frozen=frozenset(all_names - trainable),
    )


# ---------------------------------------------------------------------------
# batches


def build_batch(train_pairs: list[PairedSample], batch_pairs: int,
                rng: np.random.Generator) -> tuple[list[np.ndarray], list[int]]:
    """Sample batch_pairs pairs without replacement; each contributes both
    modalities under its pair_id label."""
    if batch_pairs > len(train_pairs):
        raise ValueError(f"batch_pairs={batch_pairs} exceeds {len(train_pairs)} train pairs")
    chosen = rng.choice(len(train_pairs), size=batch_pairs, replace=False)
    images: list[np.ndarray] = []
    labels: list[int] = []
    for idx in chosen:
        s = train_pairs[int(idx)]
        images.extend((s.image_a, s.image_b))
        labels.extend((s.pair_id, s.pair_id))
    return images, labels


def _epoch_batches(n: int, batch_pairs: int, rng: np.random.Generator):
    """Shuffled epoch scheme covering every pair; the final short chunk is
    padded backward so batches always hold batch_pairs distinct pairs."""
    perm = rng.permutation(n)
    starts = list(range(0, n - batch_pairs + 1, batch_pairs))
    if n % batch_pairs != 0:
        starts.append(n - batch_pairs)
    for s in starts:
        yield perm[s : s + batch_pairs]


def _shift2d(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = img[ys_src, xs_src]
    return out


def _augment_pair(a: np.ndarray, b: np.ndarray,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One orientation + shift applied to both modalities of a pair, so the
    matching relation survives while absolute pixel placement does not."""
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    dy, dx = (int(v) for v in rng.integers(-6, 7, size=2))
    out = []
    for img in (a, b):
        if k:
            img = np.rot90(img, k)
        if flip:
            img = img[:, ::-1]
        out.append(_shift2d(np.ascontiguousarray(img), dy, dx))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              trainable: frozenset[str] | None = None) -> None:
    """One bias-corrected adaptive-moment update, in place.

    Only names in ``trainable`` (or all grad keys when None) move; anything
    else is untouched, not merely updated by zero.
    """
    state.t += 1
    t = state.t
    for name, g in grads.items():
        if trainable is not None and name not in trainable:
            continue
        p = params[name]
        if g.shape != p.data.shape:
            raise T.ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape} ({name})")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# loss construction on the tape


def _gather_pairs(s_flat: Tensor, pairs: list[tuple[int, int]], n: int) -> Tensor:
    idx = np.array([i * n + j for i, j in pairs], dtype=np.int64)
    return T.gather(s_flat, idx)


def _batch_loss(model: Model, images: list[np.ndarray], labels: list[int],
                config: TrainConfig) -> Tensor | None:
    """Embed the batch, mine pairs, and build the configured loss in-graph.

    Returns None when the batch yields nothing to optimize (no positives
    or no negatives under the current sampling rule).
    """
    e_mat = embed_batch(model, images)
    n = len(images)

    if config.sampling == "mined":
        mined = obj.mine_hard_negatives(e_mat.data, labels, config.miner)
    else:
        mined = obj.standard_pairs(labels)
    if not mined.positives or not mined.negatives:
        return None

    s_mat = T.matmul(e_mat, T.transpose2d(e_mat))
    s_flat = T.reshape(s_mat, (n * n,))

    if config.loss_kind == "circle":
        s_p = _gather_pairs(s_flat, mined.positives, n)
        s_n = _gather_pairs(s_flat, mined.negatives, n)
        return obj.circle_loss(s_p, s_n, config.circle)

    # triplet: anchor each positive pair member against its mined negatives
    neg_by_anchor: dict[int, list[int]] = {}
    for i, j in mined.negatives:
        neg_by_anchor.setdefault(i, []).append(j)
        neg_by_anchor.setdefault(j, []).append(i)
    ap_pairs: list[tuple[int, int]] = []
    an_pairs: list[tuple[int, int]] = []
    for i, j in mined.positives:
        for anchor, positive in ((i, j), (j, i)):
            for k in neg_by_anchor.get(anchor, ()):
                ap_pairs.append((anchor, positive))
                an_pairs.append((anchor, k))
    if not ap_pairs:
        return None
    one = T.constant(1.0)
    d_ap = T.add(T.scale(_gather_pairs(s_flat, ap_pairs, n), -1.0), one)
    d_an = T.add(T.scale(_gather_pairs(s_flat, an_pairs, n), -1.0), one)
    return obj.triplet_loss(d_ap, d_an, config.triplet_margin)


def validation_top1(model: Model, pairs: list[PairedSample]) -> float:
    """Top-1 accuracy retrieving each pair's modality-B match from its A image."""
    if not pairs:
        return math.nan
    emb_a, emb_b = embed_dataset(model, pairs)
    sims = emb_a @ emb_b.T
    return float((sims.argmax(axis=1) == np.arange(len(pairs))).mean())


def train(model: Model, split: DatasetSplit, config: TrainConfig,
          partition: ParameterPartition,
          out_dir: str | Path | None = None) -> tuple[Model, list[EpochStats]]:
    """Train in place; returns (model, per-epoch history).

    Deterministic in (seed, config, dataset). With no trainable parameters
    the loop still runs (so histories stay comparable) but skips all
    gradient work.
    """
    config.validate()
    if set(partition.trainable) | set(partition.frozen) != set(model.params):
        raise ValueError("partition does not cover the model's parameter names")
    if config.epochs > 0 and config.batch_pairs > len(split.train):
        raise ValueError("batch_pairs exceeds the training split")

    rng = np.random.default_rng(np.random.SeedSequence([config.seed & (2**63 - 1), 0x7274]))
    state = AdamState()
    history: list[EpochStats] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    trainable = sorted(partition.trainable)
    for epoch in range(config.epochs):
        losses: list[float] = []
        for batch_idx in _epoch_batches(len(split.train), config.batch_pairs, rng):
            images, labels = [], []
            for idx in batch_idx:
                s = split.train[int(idx)]
                img_a, img_b = s.image_a, s.image_b
                if config.augment:
                    img_a, img_b = _augment_pair(img_a, img_b, rng)
                images.extend((img_a, img_b))
                labels.extend((s.pair_id, s.pair_id))
            if not trainable:
                with T.Tape():
                    loss = _batch_loss(model, images, labels, config)
                losses.append(float(loss.data) if loss is not None else 0.0)
                continue
            tape = T.Tape()
            with tape:
                for name in trainable:
                    tape.watch(model.params[name])
                loss = _batch_loss(model, images, labels, config)
                if loss is None:
                    losses.append(0.0)
                    continue
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}: {loss_val}"
                    )
                losses.append(loss_val)
                node_of = {model.params[n].node_id: n for n in trainable}
                grads = T.backprop(tape, loss, wanted=set(node_of))
            adam_step(model.params,
                      {node_of[nid]: g.data for nid, g in grads.items()},
                      state, config.learning_rate, config.beta1, config.beta2,
                      config.eps, partition.trainable)
        stats = EpochStats(
            epoch=epoch,
            loss=float(np.mean(losses)) if losses else 0.0,
            val_top1=validation_top1(model, split.validation),
        )
        history.append(stats)
        if (out_path is not None and config.checkpoint_every > 0
                and (epoch + 1) % config.checkpoint_every == 0):
            save_checkpoint(model, out_path / f"epoch_{epoch + 1:04d}.ckpt")

    if out_path is not None:
        save_checkpoint(model, out_path / "model.ckpt")
        history_to_csv(history, out_path / "history.csv")
    return model, history


def history_to_csv(history: list[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "val_top1"])
        for h in history:
            w.writerow([h.epoch, repr(h.loss), repr(h.val_top1)])
