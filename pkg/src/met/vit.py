"""Frozen ViT backbone: patch embedding, pre-LN encoder layers, final LN."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

LN_EPS = 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class ViTConfig:
    height: int = 224
    width: int = 224
    patch_size: int = 16
    dim: int = 768
    layers: int = 12
    heads: int = 12
    num_classes: int = 1000
    mlp_ratio: int = 4
    channels: int = 3

    def __post_init__(self):
        m = self.patch_size
        if m <= 0 or self.height % m or self.width % m:
            raise ConfigError(
                f"patch size {m} must divide image dims {self.height}x{self.width}")
        if self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide dim {self.dim}")
        if self.layers < 1:
            raise ConfigError("need at least one encoder layer")

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)


@dataclass
class LayerWeights:
    ln1_g: Parameter
    ln1_b: Parameter
    wq: Parameter
    wk: Parameter
    wv: Parameter
    watt: Parameter
    ln2_g: Parameter
    ln2_b: Parameter
    wup: Parameter
    wdown: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.watt,
                self.ln2_g, self.ln2_b, self.wup, self.wdown]


@dataclass
class BackboneWeights:
    proj: Parameter
    pos: Parameter
    cls: Parameter
    layers: list[LayerWeights]
    norm_g: Parameter
    norm_b: Parameter

    def parameters(self) -> list[Parameter]:
        out = [self.proj, self.pos, self.cls]
        for lw in self.layers:
            out.extend(lw.parameters())
        out.extend([self.norm_g, self.norm_b])
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    @classmethod
    def from_state(cls, cfg: ViTConfig, state: dict[str, np.ndarray]) -> "BackboneWeights":
        shapes = backbone_shapes(cfg)
        missing = sorted(set(shapes) - set(state))
        if missing:
            raise ConfigError(f"backbone state missing tensors: {missing}")

        def p(name):
            arr = np.asarray(state[name], dtype=T.DTYPE)
            if arr.shape != shapes[name]:
                raise ConfigError(f"{name}: shape {arr.shape} != expected {shapes[name]}")
            return T.parameter(name, arr, trainable=False)

        layers = []
        for k in range(1, cfg.layers + 1):
            pre = f"backbone.layer.{k}."
            layers.append(LayerWeights(*(p(pre + f) for f in _LAYER_FIELDS)))
        return cls(p("backbone.proj"), p("backbone.pos"), p("backbone.cls"), layers,
                   p("backbone.norm.g"), p("backbone.norm.b"))


_LAYER_FIELDS = ("ln1.g", "ln1.b", "wq", "wk", "wv", "watt", "ln2.g", "ln2.b", "wup", "wdown")


def backbone_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, n, hid = cfg.dim, cfg.num_patches, cfg.mlp_ratio * cfg.dim
    shapes = {
        "backbone.proj": (cfg.patch_dim, d),
        "backbone.pos": (n + 1, d),
        "backbone.cls": (1, d),
    }
    for k in range(1, cfg.layers + 1):
        pre = f"backbone.layer.{k}."
        shapes.update({
            pre + "ln1.g": (d,), pre + "ln1.b": (d,),
            pre + "wq": (d, d), pre + "wk": (d, d), pre + "wv": (d, d), pre + "watt": (d, d),
            pre + "ln2.g": (d,), pre + "ln2.b": (d,),
            pre + "wup": (d, hid), pre + "wdown": (hid, d),
        })
    shapes["backbone.norm.g"] = (d,)
    shapes["backbone.norm.b"] = (d,)
    return shapes


def init_backbone(cfg: ViTConfig, seed: int) -> BackboneWeights:
    """Seeded stand-in for pre-trained weights (fan-in scaled Gaussians)."""
    rng = np.random.default_rng(seed)
    state = {}
    for name, shape in backbone_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            state[name] = np.ones(shape)
        elif leaf == "b":
            state[name] = np.zeros(shape)
        elif leaf in ("cls", "pos"):
            state[name] = rng.normal(0.0, 0.5, shape)
        else:
            state[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
    return BackboneWeights.from_state(cfg, state)


def extract_patches(images: np.ndarray, m: int) -> np.ndarray:
    """N x C x H x W -> N x n x (C*m*m), patches in raster order, channel-major inside."""
    n_, c, h, w = images.shape
    x = images.reshape(n_, c, h // m, m, w // m, m)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n_, (h // m) * (w // m), c * m * m)


def patch_embed(images: np.ndarray, weights: BackboneWeights, cfg: ViTConfig) -> Tensor:
    images = np.asarray(images, dtype=T.DTYPE)
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.height, cfg.width):
        raise ConfigError(f"image batch shape {images.shape} does not match config")
    patches = Tensor(extract_patches(images, cfg.patch_size))
    tokens = T.matmul(patches, weights.proj.tensor)
    cls = T.reshape(weights.cls.tensor, (1, 1, cfg.dim)) * np.ones((images.shape[0], 1, 1))
    return T.concat([cls, tokens], axis=1) + weights.pos.tensor


def attention(x: Tensor, lw: LayerWeights, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention on already-normalised tokens (no residual)."""
    n_, t, d = x.shape
    dh = d // heads

    def split(w):
        y = T.matmul(x, w.tensor)
        return T.transpose(T.reshape(y, (n_, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(lw.wq), split(lw.wk), split(lw.wv)
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    att = T.softmax_rows(scores)
    ctx = T.matmul(att, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n_, t, d))
    return T.matmul(ctx, lw.watt.tensor)


def mha(tokens: Tensor, lw: LayerWeights, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """MHA(LN(x)) + x."""
    h = T.layer_norm(tokens, lw.ln1_g.tensor, lw.ln1_b.tensor, LN_EPS)
    return attention(h, lw, heads, mask) + tokens


def ffn(tokens: Tensor, lw: LayerWeights) -> Tensor:
    """GELU(LN(x) W_up) W_down + x."""
    h = T.layer_norm(tokens, lw.ln2_g.tensor, lw.ln2_b.tensor, LN_EPS)
    return T.matmul(T.gelu(T.matmul(h, lw.wup.tensor)), lw.wdown.tensor) + tokens


def final_norm(x: Tensor, weights: BackboneWeights) -> Tensor:
    return T.layer_norm(x, weights.norm_g.tensor, weights.norm_b.tensor, LN_EPS)


@dataclass
class LinearHead:
    weight: Parameter
    bias: Parameter

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight.tensor) + self.bias.tensor

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def zero_head(name: str, dim: int, num_classes: int, trainable: bool = True) -> LinearHead:
    return LinearHead(T.parameter(f"{name}.weight", np.zeros((dim, num_classes)), trainable),
                      T.parameter(f"{name}.bias", np.zeros(num_classes), trainable))


def vit_forward_baseline(images: np.ndarray, weights: BackboneWeights, cfg: ViTConfig,
                         head: LinearHead) -> Tensor:
    """Plain single-token ViT: Head(LN(c_L))."""
    x = patch_embed(images, weights, cfg)
    for lw in weights.layers:
        x = ffn(mha(x, lw, cfg.heads), lw)
    cls = T.getitem(x, (slice(None), 0))
    return head(final_norm(cls, weights))


@dataclass
class ImageBatch:
    images: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return int(self.images.shape[0])
