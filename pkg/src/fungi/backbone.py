"""Compact transformer encoder with attachable projection heads.

The encoder follows the usual pre-norm layout: patch embedding + learned
positional embeddings, `depth` blocks of multi-head attention and a GELU MLP,
a final layer norm, and CLS or mean pooling. Per-sample gradients of a single
designated hidden linear layer are harvested by running an objective inside a
gradient tape; all other parameters stay untracked, so the tape only sees the
subgraph downstream of that layer.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

LAYER_KINDS = ("attn_proj", "mlp_fc1", "mlp_fc2", "qkv")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 16
    depth: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    pooling: str = "cls"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.pooling not in ("cls", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def mlp_dim(self):
        return int(round(self.dim * self.mlp_ratio))


@dataclass
class BlockParams:
    ln1_g: ad.Tensor
    ln1_b: ad.Tensor
    qkv_w: ad.Tensor
    qkv_b: ad.Tensor
    proj_w: ad.Tensor
    proj_b: ad.Tensor
    ln2_g: ad.Tensor
    ln2_b: ad.Tensor
    fc1_w: ad.Tensor
    fc1_b: ad.Tensor
    fc2_w: ad.Tensor
    fc2_b: ad.Tensor


@dataclass
class EncoderParams:
    config: EncoderConfig
    patch_w: ad.Tensor
    patch_b: ad.Tensor
    cls_token: ad.Tensor
    pos: ad.Tensor
    blocks: list[BlockParams] = field(default_factory=list)
    norm_g: ad.Tensor = None
    norm_b: ad.Tensor = None

    def named_tensors(self):
        yield "patch_w", self.patch_w
        yield "patch_b", self.patch_b
        yield "cls_token", self.cls_token
        yield "pos", self.pos
        for i, blk in enumerate(self.blocks):
            for name in BlockParams.__dataclass_fields__:
                yield f"block{i}.{name}", getattr(blk, name)
        yield "norm_g", self.norm_g
        yield "norm_b", self.norm_b

    def checksum(self):
        crc = 0
        for _, t in self.named_tensors():
            crc = zlib.crc32(np.ascontiguousarray(t.data).tobytes(), crc)
        return crc

    def astype(self, dtype):
        """Copy of the parameter set at another precision."""
        def cast(t):
            return ad.Tensor(t.data.astype(dtype))

        blocks = [
            BlockParams(**{k: cast(getattr(b, k)) for k in BlockParams.__dataclass_fields__})
            for b in self.blocks
        ]
        return EncoderParams(
            config=self.config,
            patch_w=cast(self.patch_w),
            patch_b=cast(self.patch_b),
            cls_token=cast(self.cls_token),
            pos=cast(self.pos),
            blocks=blocks,
            norm_g=cast(self.norm_g),
            norm_b=cast(self.norm_b),
        )

    @property
    def dtype(self):
        return self.patch_w.dtype


@dataclass(frozen=True)
class GradientSource:
    """Coordinate of the hidden linear layer whose gradient is harvested."""

    block_index: int
    layer_kind: str = "attn_proj"

    def validate(self, config):
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.layer_kind!r}")
        if not 0 <= self.block_index < config.depth:
            raise ValueError(f"block index {self.block_index} out of range for depth {config.depth}")

    def resolve(self, params):
        self.validate(params.config)
        block = params.blocks[self.block_index]
        prefix = {"attn_proj": "proj", "mlp_fc1": "fc1", "mlp_fc2": "fc2", "qkv": "qkv"}[self.layer_kind]
        return getattr(block, prefix + "_w"), getattr(block, prefix + "_b")


def default_gradient_source(config):
    """Attention output projection of the last block."""
    return GradientSource(block_index=config.depth - 1, layer_kind="attn_proj")


def init_encoder(config, seed, dtype=np.float32):
    """Deterministic random initialization of all encoder weights."""
    rng = np.random.default_rng(seed)
    d = config.dim
    patch_in = 3 * config.patch_size * config.patch_size
    tokens = config.num_patches + 1

    def lin(out_dim, in_dim):
        w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim))
        return ad.Tensor(w.astype(dtype)), ad.Tensor(np.zeros(out_dim, dtype=dtype))

    def embed(*shape):
        return ad.Tensor((0.02 * rng.normal(size=shape)).astype(dtype))

    patch_w, patch_b = lin(d, patch_in)
    cls_token = embed(1, d)
    pos = embed(tokens, d)
    blocks = []
    for _ in range(config.depth):
        qkv_w, qkv_b = lin(3 * d, d)
        proj_w, proj_b = lin(d, d)
        fc1_w, fc1_b = lin(config.mlp_dim, d)
        fc2_w, fc2_b = lin(d, config.mlp_dim)
        blocks.append(
            BlockParams(
                ln1_g=ad.Tensor(np.ones(d, dtype=dtype)),
                ln1_b=ad.Tensor(np.zeros(d, dtype=dtype)),
                qkv_w=qkv_w,
                qkv_b=qkv_b,
                proj_w=proj_w,
                proj_b=proj_b,
                ln2_g=ad.Tensor(np.ones(d, dtype=dtype)),
                ln2_b=ad.Tensor(np.zeros(d, dtype=dtype)),
                fc1_w=fc1_w,
                fc1_b=fc1_b,
                fc2_w=fc2_w,
                fc2_b=fc2_b,
            )
        )
    return EncoderParams(
        config=config,
        patch_w=patch_w,
        patch_b=patch_b,
        cls_token=cls_token,
        pos=pos,
        blocks=blocks,
        norm_g=ad.Tensor(np.ones(d, dtype=dtype)),
        norm_b=ad.Tensor(np.zeros(d, dtype=dtype)),
    )


def save_params(params, path):
    """Persist encoder weights (one section per tensor) plus the config."""
    from . import store

    cfg = params.config
    sections = {
        "encoder_config": store.encode_text(
            f"image_size={cfg.image_size} patch_size={cfg.patch_size} depth={cfg.depth} "
            f"dim={cfg.dim} heads={cfg.heads} mlp_ratio={cfg.mlp_ratio} pooling={cfg.pooling}"
        )
    }
    for name, tensor in params.named_tensors():
        sections[f"weights::{name}"] = tensor.data
    store.write_sections(path, sections)


def load_params(path):
    from . import store

    sections = store.read_sections(path)
    meta = dict(
        item.split("=") for item in store.decode_text(sections["encoder_config"]).split()
    )
    config = EncoderConfig(
        image_size=int(meta["image_size"]),
        patch_size=int(meta["patch_size"]),
        depth=int(meta["depth"]),
        dim=int(meta["dim"]),
        heads=int(meta["heads"]),
        mlp_ratio=float(meta["mlp_ratio"]),
        pooling=meta["pooling"],
    )
    weights = {
        name[len("weights::") :]: ad.Tensor(arr)
        for name, arr in sections.items()
        if name.startswith("weights::")
    }
    blocks = []
    for i in range(config.depth):
        blocks.append(
            BlockParams(
                **{k: weights[f"block{i}.{k}"] for k in BlockParams.__dataclass_fields__}
            )
        )
    return EncoderParams(
        config=config,
        patch_w=weights["patch_w"],
        patch_b=weights["patch_b"],
        cls_token=weights["cls_token"],
        pos=weights["pos"],
        blocks=blocks,
        norm_g=weights["norm_g"],
        norm_b=weights["norm_b"],
    )


def parameter_count(config):
    """Closed-form number of scalar weights in an encoder."""
    d = config.dim
    patch_in = 3 * config.patch_size**2
    tokens = config.num_patches + 1
    per_block = (3 * d * d + 3 * d) + (d * d + d) + 4 * d + (config.mlp_dim * d + config.mlp_dim) + (d * config.mlp_dim + d)
    return (d * patch_in + d) + d + tokens * d + config.depth * per_block + 2 * d


def patchify(image, patch_size):
    """(3, H, W) image -> (num_patches, 3 * patch^2) rows, row-major grid order."""
    c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError("image size not divisible by patch size")
    gh, gw = h // patch_size, w // patch_size
    out = image.reshape(c, gh, patch_size, gw, patch_size)
    out = out.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch_size * patch_size)
    return np.ascontiguousarray(out)


@dataclass
class EncodeResult:
    embedding: ad.Tensor
    patch_tokens: ad.Tensor


def encode(params, image):
    """Forward pass: image (3, S, S) -> pooled embedding and patch tokens."""
    cfg = params.config
    image = np.asarray(image)
    if image.shape != (3, cfg.image_size, cfg.image_size):
        raise ValueError(f"expected image of shape (3, {cfg.image_size}, {cfg.image_size}), got {image.shape}")
    patches = ad.Tensor(patchify(image, cfg.patch_size).astype(params.dtype))

    x = ad.linear(patches, params.patch_w, params.patch_b)
    x = ad.concat([params.cls_token, x], axis=0)
    x = ad.add(x, params.pos)
    d = cfg.dim
    for blk in params.blocks:
        h = ad.layer_norm(x, blk.ln1_g, blk.ln1_b)
        qkv = ad.linear(h, blk.qkv_w, blk.qkv_b)
        q = ad.narrow(qkv, 1, 0, d)
        k = ad.narrow(qkv, 1, d, d)
        v = ad.narrow(qkv, 1, 2 * d, d)
        attn = ad.scaled_dot_product_attention(q, k, v, cfg.heads)
        x = ad.add(x, ad.linear(attn, blk.proj_w, blk.proj_b))
        h2 = ad.layer_norm(x, blk.ln2_g, blk.ln2_b)
        m = ad.linear(ad.gelu(ad.linear(h2, blk.fc1_w, blk.fc1_b)), blk.fc2_w, blk.fc2_b)
        x = ad.add(x, m)
    x = ad.layer_norm(x, params.norm_g, params.norm_b)
    patch_tokens = ad.narrow(x, 0, 1, cfg.num_patches)
    if cfg.pooling == "cls":
        embedding = ad.reshape(ad.narrow(x, 0, 0, 1), (d,))
    else:
        embedding = ad.mean(patch_tokens, axis=0)
    return EncodeResult(embedding=embedding, patch_tokens=patch_tokens)


@dataclass
class Head:
    """Frozen random linear projection applied on top of the encoder."""

    weight: ad.Tensor
    bias: ad.Tensor
    normalize_input: bool
    seed: int

    @property
    def proj_dim(self):
        return self.weight.shape[0]

    def apply(self, x):
        if self.normalize_input:
            x = ad.l2_normalize(x, axis=-1)
        return ad.linear(x, self.weight, self.bias)

    def apply_array(self, x):
        """Numpy-only forward for untracked inputs."""
        x = np.asarray(x)
        if self.normalize_input:
            x = x / np.linalg.norm(x, axis=-1, keepdims=True)
        return x @ self.weight.data.T + self.bias.data


def attach_head(dim, proj_dim, seed, normalize_input=True, dtype=np.float32):
    if proj_dim < 1:
        raise ValueError("proj_dim must be at least 1")
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(proj_dim, dim)).astype(dtype)
    return Head(
        weight=ad.Tensor(w),
        bias=ad.Tensor(np.zeros(proj_dim, dtype=dtype)),
        normalize_input=normalize_input,
        seed=seed,
    )


def _with_tracked_source(params, source):
    """Shallow copy of params with the source layer tensors marked for grads."""
    w, b = source.resolve(params)
    w2 = ad.Tensor(w.data, requires_grad=True)
    b2 = ad.Tensor(b.data, requires_grad=True)
    blocks = list(params.blocks)
    prefix = {"attn_proj": "proj", "mlp_fc1": "fc1", "mlp_fc2": "fc2", "qkv": "qkv"}[source.layer_kind]
    blocks[source.block_index] = replace(
        blocks[source.block_index], **{prefix + "_w": w2, prefix + "_b": b2}
    )
    return replace(params, blocks=blocks), w2, b2


def replace_source_layer(params, source, w_data, b_data):
    """Copy of params with the designated layer's weights substituted."""
    w, b = source.resolve(params)
    if np.shape(w_data) != w.shape or np.shape(b_data) != b.shape:
        raise ValueError("replacement layer shapes do not match")
    blocks = list(params.blocks)
    prefix = {"attn_proj": "proj", "mlp_fc1": "fc1", "mlp_fc2": "fc2", "qkv": "qkv"}[source.layer_kind]
    blocks[source.block_index] = replace(
        blocks[source.block_index],
        **{prefix + "_w": ad.Tensor(w_data), prefix + "_b": ad.Tensor(b_data)},
    )
    return replace(params, blocks=blocks)


def loss_gradient(params, source, objective_eval):
    """Gradient of a scalar objective w.r.t. the designated layer only.

    `objective_eval` receives a parameter set and must build its loss from
    `encode()` outputs of that instance. Returns (dW, db) numpy arrays; the
    shared parameters are asserted unchanged.
    """
    before = params.checksum()
    tracked, w, b = _with_tracked_source(params, source)
    with ad.GradTape() as tape:
        loss = objective_eval(tracked)
    grads = tape.backward(loss)
    dw = grads.get(w)
    db = grads.get(b)
    if dw is None:
        dw = np.zeros(w.shape, dtype=w.dtype)
    if db is None:
        db = np.zeros(b.shape, dtype=b.dtype)
    if params.checksum() != before:
        raise RuntimeError("encoder parameters mutated during gradient extraction")
    return dw, db


def collapse_output_paths(params):
    """Copy of params whose pooled embedding is input-independent.

    Zeroes the attention value projection (the V block of the fused qkv
    weight) and the MLP output weight in every block. The CLS stream then
    receives only constant bias contributions, so the pooled embedding is
    the same for every input, while attention patterns and the qkv layer's
    gradient still depend on the input tokens.
    """
    d = params.config.dim
    blocks = []
    for blk in params.blocks:
        qkv_w = blk.qkv_w.data.copy()
        qkv_w[2 * d :, :] = 0.0
        qkv_b = blk.qkv_b.data.copy()
        qkv_b[2 * d :] = 0.0
        blocks.append(
            replace(
                blk,
                qkv_w=ad.Tensor(qkv_w),
                qkv_b=ad.Tensor(qkv_b),
                fc2_w=ad.Tensor(np.zeros_like(blk.fc2_w.data)),
            )
        )
    return replace(params, blocks=blocks)
