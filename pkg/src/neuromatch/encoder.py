"""Dual-channel attention encoder.

A local channel crops the image center and attends over its patches
(soma morphology); a global channel attends over the full patch grid
after a per-token sigmoid spatial gate (fiber context). A learned gate
fuses the two channel features into one unit-norm embedding.

All forward math routes through :mod:`neuromatch.tensor`, so the same
code path serves inference (no tape), training, and Grad-CAM.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHANNELS = ("both", "local", "global")

# attention linears that accept LoRA factors
_ATTN_LINEARS = ("query", "key", "value", "output")

_MLP_RATIO = 2  # hidden width of the per-block MLP, in units of token_dim

_POS_INIT_STD = 0.1  # positional encodings start small but visible


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 150
    patch_size: int = 15
    token_dim: int = 64
    n_blocks_local: int = 4
    n_blocks_global: int = 4
    n_heads: int = 4
    embed_dim: int = 64
    local_crop: int = 60
    channels: str = "both"  # "both" | "local" | "global"

    def validate(self) -> None:
        if self.channels not in CHANNELS:
            raise ConfigError(f"channels must be one of {CHANNELS}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.local_crop % self.patch_size != 0:
            raise ConfigError("local_crop must be divisible by patch_size")
        if not 0 < self.local_crop <= self.image_size:
            raise ConfigError("local_crop must be in (0, image_size]")
        if self.token_dim % self.n_heads != 0:
            raise ConfigError("token_dim must be divisible by n_heads")
        if self.uses_local and self.n_blocks_local < 1:
            raise ConfigError("local channel needs at least one block")
        if self.uses_global and self.n_blocks_global < 1:
            raise ConfigError("global channel needs at least one block")

    @property
    def uses_local(self) -> bool:
        return self.channels in ("both", "local")

    @property
    def uses_global(self) -> bool:
        return self.channels in ("both", "global")


@dataclass
class Model:
    """Named parameter tensors plus the config that shaped them.

    Parameter names are dotted ("global.block3.attn.query.weight") and are
    the contract that fine-tuning policies match against. When LoRA is
    injected, base weights stay in place and factors appear under
    ``<linear>.lora_A`` / ``<linear>.lora_B``.
    """

    config: EncoderConfig
    params: dict[str, Tensor]
    lora_rank: int = 0
    lora_alpha: float = 0.0

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


# ---------------------------------------------------------------------------
# parameter table


def _channel_spec(cfg: EncoderConfig, name: str, n_blocks: int, n_tokens: int):
    d = cfg.token_dim
    p2 = cfg.patch_size * cfg.patch_size
    hidden = _MLP_RATIO * d
    yield f"{name}.patch.weight", (p2, d)
    yield f"{name}.patch.bias", (1, d)
    yield f"{name}.pos", (n_tokens, d)
    if name == "global":
        yield "global.spatial.weight", (d, 1)
        yield "global.spatial.bias", (1, 1)
    for k in range(n_blocks):
        pre = f"{name}.block{k}"
        yield f"{pre}.ln1.gain", (1, d)
        yield f"{pre}.ln1.bias", (1, d)
        for lin in _ATTN_LINEARS:
            yield f"{pre}.attn.{lin}.weight", (d, d)
            yield f"{pre}.attn.{lin}.bias", (1, d)
        yield f"{pre}.ln2.gain", (1, d)
        yield f"{pre}.ln2.bias", (1, d)
        yield f"{pre}.mlp.fc1.weight", (d, hidden)
        yield f"{pre}.mlp.fc1.bias", (1, hidden)
        yield f"{pre}.mlp.fc2.weight", (hidden, d)
        yield f"{pre}.mlp.fc2.bias", (1, d)
    yield f"{name}.final.gain", (1, d)
    yield f"{name}.final.bias", (1, d)
    yield f"{name}.head.weight", (d, cfg.embed_dim)
    yield f"{name}.head.bias", (1, cfg.embed_dim)


def param_shapes(cfg: EncoderConfig, lora_rank: int = 0) -> dict[str, tuple[int, ...]]:
    """The full (name -> shape) table for a config, in creation order."""
    cfg.validate()
    out: dict[str, tuple[int, ...]] = {}
    if cfg.uses_local:
        n_tok = (cfg.local_crop // cfg.patch_size) ** 2
        out.update(_channel_spec(cfg, "local", cfg.n_blocks_local, n_tok))
    if cfg.uses_global:
        n_tok = (cfg.image_size // cfg.patch_size) ** 2
        out.update(_channel_spec(cfg, "global", cfg.n_blocks_global, n_tok))
    if cfg.channels == "both":
        out["gate.weight"] = (2 * cfg.embed_dim, cfg.embed_dim)
        out["gate.bias"] = (1, cfg.embed_dim)
    if lora_rank > 0:
        for name in list(out):
            if name.endswith(".weight") and ".attn." in name:
                base = name[: -len(".weight")]
                out[f"{base}.lora_A"] = (out[name][0], lora_rank)
                out[f"{base}.lora_B"] = (lora_rank, out[name][1])
    return out


def init_model(cfg: EncoderConfig, seed: int = 0) -> Model:
    """Fresh random init; deterministic in (config, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), 0x6E6D]))
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".gain",)):
            arr = np.ones(shape)
        elif name.endswith(".bias") or name.endswith(".pos"):
            arr = np.zeros(shape) if name.endswith(".bias") else rng.normal(0.0, _POS_INIT_STD, shape)
        else:
            fan_in = shape[0]
            arr = rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
        params[name] = Tensor(arr)
    return Model(config=cfg, params=params)


def inject_lora(model: Model, rank: int, alpha: float = 16.0, seed: int = 0) -> Model:
    """Add rank-``rank`` factor pairs to every attention linear.

    A starts small-random, B starts zero, so the injected model's outputs
    equal the base model's exactly until B moves. Base weights stay
    unmodified; freezing them is the partition policy's job.
    """
    if model.lora_rank:
        raise ConfigError("model already has LoRA factors")
    if rank < 1:
        raise ConfigError("LoRA rank must be >= 1")
    if rank >= model.config.token_dim:
        raise ConfigError(
            f"LoRA rank {rank} too large for linear dimension {model.config.token_dim}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), 0x10FA]))
    params = dict(model.params)
    for name, shape in param_shapes(model.config, lora_rank=rank).items():
        if name.endswith(".lora_A"):
            params[name] = Tensor(rng.normal(0.0, 0.01, shape))
        elif name.endswith(".lora_B"):
            params[name] = Tensor(np.zeros(shape))
    return Model(config=model.config, params=params, lora_rank=rank, lora_alpha=float(alpha))


# ---------------------------------------------------------------------------
# forward pieces


@lru_cache(maxsize=8)
def _patch_index(side: int, patch: int) -> np.ndarray:
    g = side // patch
    flat = np.arange(side * side).reshape(side, side)
    return np.ascontiguousarray(
        flat.reshape(g, patch, g, patch).transpose(0, 2, 1, 3).reshape(g * g, patch * patch)
    )


def _standardize(img: np.ndarray) -> np.ndarray:
    """Per-input zero-mean unit-variance normalization (fixed eps 1e-6).

    Applied to each channel's own input window, so the local channel
    stays a pure function of its crop.
    """
    return (img - img.mean()) / max(float(img.std()), 1e-6)


@lru_cache(maxsize=32)
def _mean_pool_row(n: int) -> np.ndarray:
    return np.full((1, n), 1.0 / n)


def patchify(image: Tensor, patch_size: int, weight: Tensor, bias: Tensor,
             pos: Tensor) -> Tensor:
    """Non-overlapping patches, linearly projected, plus positional encoding."""
    side = image.shape[0]
    if image.data.ndim != 2 or image.shape[1] != side:
        raise T.ShapeError(f"patchify expects a square image, got {image.shape}")
    if side % patch_size != 0:
        raise T.ShapeError(f"image side {side} not divisible by patch size {patch_size}")
    idx = _patch_index(side, patch_size)
    patches = T.gather(T.reshape(image, (side * side,)), idx)
    return T.add(T.add(T.matmul(patches, weight), bias), pos)


def _linear(x: Tensor, model: Model, name: str) -> Tensor:
    p = model.params
    y = T.add(T.matmul(x, p[f"{name}.weight"]), p[f"{name}.bias"])
    a_name = f"{name}.lora_A"
    if model.lora_rank and a_name in p:
        delta = T.matmul(T.matmul(x, p[a_name]), p[f"{name}.lora_B"])
        y = T.add(y, T.scale(delta, model.lora_alpha / model.lora_rank))
    return y


def attention_block(tokens: Tensor, model: Model, prefix: str) -> Tensor:
    """Pre-norm multi-head self-attention + MLP, both with residuals."""
    cfg = model.config
    p = model.params
    d = cfg.token_dim
    dh = d // cfg.n_heads
    n = tokens.shape[0]

    h = T.layer_norm(tokens, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"])
    q = _linear(h, model, f"{prefix}.attn.query")
    k = _linear(h, model, f"{prefix}.attn.key")
    v = _linear(h, model, f"{prefix}.attn.value")

    heads = []
    for i in range(cfg.n_heads):
        c0, c1 = i * dh, (i + 1) * dh
        qh = T.slice_(q, (0, n, c0, c1))
        kh = T.slice_(k, (0, n, c0, c1))
        vh = T.slice_(v, (0, n, c0, c1))
        att = T.softmax_rows(T.scale(T.matmul(qh, T.transpose2d(kh)), 1.0 / math.sqrt(dh)))
        heads.append(T.matmul(att, vh))
    o = _linear(T.concat_last_dim(heads), model, f"{prefix}.attn.output")
    tokens = T.add(tokens, o)

    h2 = T.layer_norm(tokens, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"])
    m = _linear(T.gelu(_linear(h2, model, f"{prefix}.mlp.fc1")), model, f"{prefix}.mlp.fc2")
    return T.add(tokens, m)


def _pool_and_project(tokens: Tensor, model: Model, channel: str) -> Tensor:
    p = model.params
    tokens = T.layer_norm(tokens, p[f"{channel}.final.gain"], p[f"{channel}.final.bias"])
    pooled = T.matmul(T.constant(_mean_pool_row(tokens.shape[0])), tokens)
    return _linear(pooled, model, f"{channel}.head")


def local_channel(image: Tensor, model: Model, trace: dict | None = None) -> Tensor:
    """Center-crop, standardize, patchify, attend; (1, embed_dim) feature."""
    cfg = model.config
    p = model.params
    off = (cfg.image_size - cfg.local_crop) // 2
    crop = T.constant(
        _standardize(image.data[off : off + cfg.local_crop, off : off + cfg.local_crop])
    )
    tokens = patchify(crop, cfg.patch_size, p["local.patch.weight"], p["local.patch.bias"],
                      p["local.pos"])
    for k in range(cfg.n_blocks_local):
        tokens = attention_block(tokens, model, f"local.block{k}")
    if trace is not None:
        trace["local"] = tokens
    return _pool_and_project(tokens, model, "local")


def global_channel(image: Tensor, model: Model, trace: dict | None = None) -> Tensor:
    """Full-grid patchify behind a per-token sigmoid gate, then attend."""
    cfg = model.config
    p = model.params
    x = T.constant(_standardize(image.data))
    tokens = patchify(x, cfg.patch_size, p["global.patch.weight"],
                      p["global.patch.bias"], p["global.pos"])
    gate = T.sigmoid(T.add(T.matmul(tokens, p["global.spatial.weight"]),
                           p["global.spatial.bias"]))
    tokens = T.mul(tokens, gate)
    for k in range(cfg.n_blocks_global):
        tokens = attention_block(tokens, model, f"global.block{k}")
    if trace is not None:
        trace["global"] = tokens
    return _pool_and_project(tokens, model, "global")


def gate_fuse(f_local: Tensor, f_global: Tensor, model: Model) -> Tensor:
    """Elementwise convex combination weighted by a learned sigmoid gate."""
    p = model.params
    z = T.concat_last_dim([f_local, f_global])
    g = T.sigmoid(T.add(T.matmul(z, p["gate.weight"]), p["gate.bias"]))
    one_minus_g = T.add(T.constant(np.ones(g.shape)), T.scale(g, -1.0))
    fused = T.add(T.mul(g, f_local), T.mul(one_minus_g, f_global))
    try:
        return T.l2_normalize_rows(fused)
    except T.DomainError:
        raise T.DomainError("gate fusion produced a zero vector; cannot normalize") from None


def embed(model: Model, image: Tensor, trace: dict | None = None) -> Tensor:
    """Unit-norm (1, embed_dim) embedding of one image."""
    cfg = model.config
    if image.shape != (cfg.image_size, cfg.image_size):
        raise T.ShapeError(
            f"expected a {cfg.image_size}x{cfg.image_size} image, got {image.shape}"
        )
    if cfg.channels == "local":
        return T.l2_normalize_rows(local_channel(image, model, trace))
    if cfg.channels == "global":
        return T.l2_normalize_rows(global_channel(image, model, trace))
    f_l = local_channel(image, model, trace)
    f_g = global_channel(image, model, trace)
    return gate_fuse(f_l, f_g, model)


def embed_array(model: Model, image: np.ndarray) -> np.ndarray:
    """Inference helper: plain ndarray in, unit-norm (embed_dim,) vector out.

    Call outside any active tape.
    """
    return embed(model, Tensor(image)).data[0].copy()


# ---------------------------------------------------------------------------
# batched forward: same math as the per-image path, but all images of a
# batch flow through each linear/norm stage as one stacked row matrix and
# through attention as one (batch*heads) stack. Keeps the tape small.


@lru_cache(maxsize=8)
def _batch_patch_index(n_images: int, side: int, patch: int) -> np.ndarray:
    idx = _patch_index(side, patch)
    per_image = [idx + b * side * side for b in range(n_images)]
    return np.ascontiguousarray(np.concatenate(per_image, axis=0))


@lru_cache(maxsize=8)
def _tile_index(n_images: int, rows: int, cols: int) -> np.ndarray:
    one = np.arange(rows * cols)
    return np.ascontiguousarray(np.concatenate([one] * n_images))


@lru_cache(maxsize=16)
def _pool_rows(n_images: int, tokens: int) -> np.ndarray:
    return np.full((n_images, 1, tokens), 1.0 / tokens)


def _tile_param(p: Tensor, n_images: int) -> Tensor:
    rows, cols = p.shape
    flat = T.reshape(p, (rows * cols,))
    return T.reshape(T.gather(flat, _tile_index(n_images, rows, cols)),
                     (n_images * rows, cols))


def _patchify_batch(flat_images: Tensor, n_images: int, side: int, model: Model,
                    channel: str) -> Tensor:
    p = model.params
    idx = _batch_patch_index(n_images, side, model.config.patch_size)
    patches = T.gather(flat_images, idx)
    tokens = T.add(T.matmul(patches, p[f"{channel}.patch.weight"]), p[f"{channel}.patch.bias"])
    return T.add(tokens, _tile_param(p[f"{channel}.pos"], n_images))


def _attention_block_batch(tokens: Tensor, n_images: int, model: Model, prefix: str) -> Tensor:
    cfg = model.config
    p = model.params
    d, h = cfg.token_dim, cfg.n_heads
    dh = d // h
    n_tok = tokens.shape[0] // n_images

    x = T.layer_norm(tokens, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"])
    q = _linear(x, model, f"{prefix}.attn.query")
    k = _linear(x, model, f"{prefix}.attn.key")
    v = _linear(x, model, f"{prefix}.attn.value")

    def to_heads(t: Tensor) -> Tensor:
        t = T.reshape(t, (n_images, n_tok, h, dh))
        t = T.permute_axes(t, (0, 2, 1, 3))
        return T.reshape(t, (n_images * h, n_tok, dh))

    qh, kh, vh = to_heads(q), to_heads(k), to_heads(v)
    # scaling q is cheaper than scaling the n_tok x n_tok score stack
    att = T.softmax_rows(T.bmm(T.scale(qh, 1.0 / math.sqrt(dh)),
                               T.permute_axes(kh, (0, 2, 1))))
    o = T.bmm(att, vh)
    o = T.reshape(T.permute_axes(T.reshape(o, (n_images, h, n_tok, dh)), (0, 2, 1, 3)),
                  (n_images * n_tok, d))
    tokens = T.add(tokens, _linear(o, model, f"{prefix}.attn.output"))

    x2 = T.layer_norm(tokens, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"])
    m = _linear(T.gelu(_linear(x2, model, f"{prefix}.mlp.fc1")), model, f"{prefix}.mlp.fc2")
    return T.add(tokens, m)


def _pool_batch(tokens: Tensor, n_images: int, model: Model, channel: str) -> Tensor:
    p = model.params
    tokens = T.layer_norm(tokens, p[f"{channel}.final.gain"], p[f"{channel}.final.bias"])
    n_tok = tokens.shape[0] // n_images
    stacked = T.reshape(tokens, (n_images, n_tok, tokens.shape[1]))
    pooled = T.bmm(T.constant(_pool_rows(n_images, n_tok)), stacked)
    return _linear(T.reshape(pooled, (n_images, tokens.shape[1])), model, f"{channel}.head")


def _channel_batch(images: list[np.ndarray], n_images: int, model: Model,
                   channel: str) -> Tensor:
    cfg = model.config
    if channel == "local":
        off = (cfg.image_size - cfg.local_crop) // 2
        side = cfg.local_crop
        flat = T.constant(np.concatenate(
            [_standardize(img[off : off + side, off : off + side]).ravel() for img in images]
        ))
    else:
        side = cfg.image_size
        flat = T.constant(np.concatenate([_standardize(img).ravel() for img in images]))
    tokens = _patchify_batch(flat, n_images, side, model, channel)
    if channel == "global":
        p = model.params
        gate = T.sigmoid(T.add(T.matmul(tokens, p["global.spatial.weight"]),
                               p["global.spatial.bias"]))
        tokens = T.mul(tokens, gate)
    depth = cfg.n_blocks_local if channel == "local" else cfg.n_blocks_global
    for k in range(depth):
        tokens = _attention_block_batch(tokens, n_images, model, f"{channel}.block{k}")
    return _pool_batch(tokens, n_images, model, channel)


def embed_batch(model: Model, images: list[np.ndarray]) -> Tensor:
    """Unit-norm (len(images), embed_dim) embeddings in one graph pass."""
    cfg = model.config
    n = len(images)
    if n == 0:
        raise T.ShapeError("embed_batch needs at least one image")
    images = [np.asarray(img, dtype=np.float64) for img in images]
    for img in images:
        if img.shape != (cfg.image_size, cfg.image_size):
            raise T.ShapeError(
                f"expected {cfg.image_size}x{cfg.image_size} images, got {img.shape}"
            )
    if cfg.channels == "local":
        return T.l2_normalize_rows(_channel_batch(images, n, model, "local"))
    if cfg.channels == "global":
        return T.l2_normalize_rows(_channel_batch(images, n, model, "global"))
    f_l = _channel_batch(images, n, model, "local")
    f_g = _channel_batch(images, n, model, "global")
    p = model.params
    z = T.concat_last_dim([f_l, f_g])
    g = T.sigmoid(T.add(T.matmul(z, p["gate.weight"]), p["gate.bias"]))
    one_minus_g = T.add(T.constant(np.ones(g.shape)), T.scale(g, -1.0))
    fused = T.add(T.mul(g, f_l), T.mul(one_minus_g, f_g))
    try:
        return T.l2_normalize_rows(fused)
    except T.DomainError:
        raise T.DomainError("gate fusion produced a zero vector; cannot normalize") from None


def embed_dataset(model: Model, samples) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings for both modalities of a sample list: (A matrix, B matrix)."""
    if not samples:
        return np.zeros((0, model.config.embed_dim)), np.zeros((0, model.config.embed_dim))
    emb_a = embed_batch(model, [s.image_a for s in samples]).data.copy()
    emb_b = embed_batch(model, [s.image_b for s in samples]).data.copy()
    return emb_a, emb_b


# ---------------------------------------------------------------------------
# checkpoint I/O: one-line JSON header, then raw little-endian float32 data


def save_checkpoint(model: Model, path: str | Path) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, t in model.params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "format_version": 1,
        "config": asdict(model.config),
        "lora_rank": model.lora_rank,
        "lora_alpha": model.lora_alpha,
        "params": entries,
    }
    payload = json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n" + b"".join(blobs)
    Path(path).write_bytes(payload)


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad header: {e}") from None
    if header.get("format_version") != 1:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    try:
        cfg = EncoderConfig(**header["config"])
    except TypeError as e:
        raise CheckpointError(f"{path}: bad config: {e}") from None
    lora_rank = int(header.get("lora_rank", 0))
    expected = param_shapes(cfg, lora_rank=lora_rank)
    names = [e["name"] for e in header["params"]]
    if set(names) != set(expected):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise CheckpointError(f"{path}: parameter table mismatch (missing {missing[:3]}, "
                              f"extra {extra[:3]})")
    data = raw[nl + 1 :]
    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if shape != expected[name]:
            raise CheckpointError(
                f"{path}: {name} has shape {shape}, config implies {expected[name]}"
            )
        count = int(np.prod(shape, dtype=np.int64))
        buf = data[off : off + 4 * count]
        if len(buf) != 4 * count:
            raise CheckpointError(f"{path}: truncated data for {name}")
        params[name] = Tensor(np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape))
    # restore creation order so training iteration order is reproducible
    ordered = {name: params[name] for name in expected}
    return Model(config=cfg, params=ordered, lora_rank=lora_rank,
                 lora_alpha=float(header.get("lora_alpha", 0.0)))
