"""Miniature Vision Transformer: patch embedding, pre-norm encoder, linear head."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autograd import RngState, Tensor, concat, gelu, softmax
from .nn import LayerNorm, Linear, Module, parameter


@dataclass
class ViTConfig:
    layers: int = 4
    heads: int = 4
    embed_dim: int = 32
    ffn_hidden: int = 64
    image_size: int = 16
    patch_size: int = 4
    num_classes: int = 10
    channels: int = 1

    def __post_init__(self):
        for name in ("layers", "heads", "embed_dim", "ffn_hidden", "image_size", "patch_size", "num_classes", "channels"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"ViTConfig.{name} must be a positive int, got {value!r}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderLayer(Module):
    """One pre-norm encoder layer.

    Q/K/V projections are stored fused as [d, heads * head_dim]; head ``i``
    owns columns ``i*head_dim:(i+1)*head_dim``. After pruning, ``n_heads``
    and ``hidden`` shrink and ``has_mhsa``/``has_ffn`` may become False.
    """

    def __init__(self, config: ViTConfig, index: int, rng: RngState | None):
        d, dh = config.embed_dim, config.head_dim
        self.index = index
        self.head_dim = dh
        self.n_heads = config.heads
        self.hidden = config.ffn_hidden
        self.has_mhsa = True
        self.has_ffn = True
        self.head_ids = list(range(config.heads))
        self.channel_ids = list(range(config.ffn_hidden))
        self.ln1 = LayerNorm(d)
        self.wq = Linear(d, config.heads * dh, rng)
        self.wk = Linear(d, config.heads * dh, rng)
        self.wv = Linear(d, config.heads * dh, rng)
        self.wo = Linear(config.heads * dh, d, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, config.ffn_hidden, rng)
        self.fc2 = Linear(config.ffn_hidden, d, rng)


def patchify(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    b, ch, h, w = images.shape
    if ch != config.channels or h != config.image_size or w != config.image_size:
        raise ValueError(
            f"expected images of shape [B,{config.channels},{config.image_size},{config.image_size}], got {images.shape}"
        )
    p = config.patch_size
    g = h // p
    x = images.reshape(b, ch, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, ch * p * p)


def patch_embed(images, model: "VisionTransformer") -> Tensor:
    """Project non-overlapping patches, prepend the class token, add positions."""
    patches = Tensor(patchify(images, model.config).astype(model.patch.weight.dtype))
    b = patches.shape[0]
    tokens = model.patch(patches)
    cls = model.cls_token + Tensor(np.zeros((b, 1, model.config.embed_dim), dtype=tokens.dtype))
    return concat([cls, tokens], axis=1) + model.pos_embed


def _bias_only(z: Tensor, bias: Tensor) -> Tensor:
    return Tensor(np.zeros(z.shape, dtype=z.dtype)) + bias


def mhsa(z: Tensor, layer: EncoderLayer, head_keep: Tensor | None = None) -> Tensor:
    """Multi-head self-attention; ``head_keep`` scales each head's output."""
    b, t, _ = z.shape
    h, dh = layer.n_heads, layer.head_dim
    if h == 0:
        return _bias_only(z, layer.wo.bias)
    q = layer.wq(z).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    k = layer.wk(z).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    v = layer.wv(z).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    att = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
    heads = att @ v
    if head_keep is not None:
        heads = heads * head_keep.reshape(1, h, 1, 1)
    return layer.wo(heads.transpose(0, 2, 1, 3).reshape(b, t, h * dh))


def ffn(z: Tensor, layer: EncoderLayer, channel_keep: Tensor | None = None) -> Tensor:
    """Two linear layers with GeLU; ``channel_keep`` scales hidden channels."""
    if layer.hidden == 0:
        return _bias_only(z, layer.fc2.bias)
    hidden = gelu(layer.fc1(z))
    if channel_keep is not None:
        hidden = hidden * channel_keep
    return layer.fc2(hidden)


def encoder_block(z: Tensor, layer: EncoderLayer) -> Tensor:
    if layer.has_mhsa:
        z = mhsa(layer.ln1(z), layer) + z
    if layer.has_ffn:
        z = ffn(layer.ln2(z), layer) + z
    return z


def classify(z: Tensor, model: "VisionTransformer") -> Tensor:
    """Logits from the class token (index 0) only."""
    cls = z[:, 0, :]
    return model.head(model.norm(cls))


class VisionTransformer(Module):
    def __init__(self, config: ViTConfig, rng: RngState | None = None):
        if rng is None:
            rng = RngState(0)
        self.config = config
        d = config.embed_dim
        self.patch = Linear(config.patch_dim, d, rng)
        self.cls_token = parameter(np.zeros((1, 1, d)))
        self.pos_embed = parameter(rng.normal((1, config.tokens, d), scale=0.02))
        self.layers = [EncoderLayer(config, i, rng) for i in range(config.layers)]
        self.norm = LayerNorm(d)
        self.head = Linear(d, config.num_classes, rng)

    def embed(self, images) -> Tensor:
        return patch_embed(images, self)

    def __call__(self, images) -> Tensor:
        z = self.embed(images)
        for layer in self.layers:
            z = encoder_block(z, layer)
        return classify(z, self)

    def clone(self) -> "VisionTransformer":
        return copy.deepcopy(self)

    @property
    def layer_indices(self) -> list[int]:
        return [layer.index for layer in self.layers]
