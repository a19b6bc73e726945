"""The CageViT classifier: configs, parameters, forward pass and training step."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionParams, GateParams, GridLayout, apply as attend
from .errors import ContractError, DimensionError, NumericalError, TrainingError
from .params import load_state, named_tensors
from .pipeline import FusionParams, assemble, embed, multi_head_fusion, patchify, split_tokens
from .salience import SalienceBundle, TokenPartition, minor_count, patch_scores, select_and_rearrange, weighted_salience
from .serialization import load_params, save_params
from .tensor import Tensor

CONFIG_FILE = "config.txt"


@dataclass(frozen=True)
class VariantConfig:
    L: int
    d: int
    D: int
    p: int
    N_h: int
    N_f: int
    K: int
    rho: float
    n_classes: int = 1000
    rows: int = 16
    cols: int = 16
    ph: int = 14
    pw: int = 14
    C: int = 3
    attention: str = "GatedLinearSRA"
    R: int = 1
    fusion_hidden: int = 0  # 0 means d
    gate_hidden: int = 0  # 0 means d

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("L", "d", "D", "p", "N_h", "N_f", "K", "n_classes", "rows", "cols", "ph", "pw", "C", "R"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ContractError(f"config field {name} must be a positive integer, got {value!r}")
        for name in ("fusion_hidden", "gate_hidden"):
            if getattr(self, name) < 0:
                raise ContractError(f"config field {name} must be >= 0, got {getattr(self, name)}")
        if self.d % self.N_h:
            raise ContractError(f"config field d={self.d} is not divisible by N_h={self.N_h}")
        if not 0.0 <= self.rho <= 1.0:
            raise ContractError(f"config field rho must lie in [0, 1], got {self.rho}")
        if self.attention in ("LinearSRA", "GatedLinearSRA") and (self.rows < self.p or self.cols < self.p):
            raise ContractError(f"config field p={self.p} exceeds the {self.rows}x{self.cols} token grid")
        if self.attention == "SRA" and (self.rows % self.R or self.cols % self.R):
            raise ContractError(f"config field R={self.R} does not divide the {self.rows}x{self.cols} grid")
        # constructing the attention config checks the kind name
        self.attention_config()

    @property
    def n_tokens(self) -> int:
        return self.rows * self.cols

    @property
    def n_minor(self) -> int:
        return minor_count(self.n_tokens, self.rho)

    @property
    def n_major(self) -> int:
        return self.n_tokens - self.n_minor

    @property
    def patch_dim(self) -> int:
        return self.ph * self.pw * self.C

    @property
    def image_shape(self) -> tuple:
        return (self.rows * self.ph, self.cols * self.pw, self.C)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            kind=self.attention, n_heads=self.N_h, d=self.d, h=self.rows, w=self.cols,
            R=self.R, p=self.p, gate_hidden=self.gate_hidden or None, n_fusion=self.N_f,
        )

    def replace(self, **changes) -> "VariantConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, base: "VariantConfig | None" = None) -> "VariantConfig":
        """Parse ``key=value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {} if base is None else dataclasses.asdict(base)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (part.strip() for part in line.partition("="))
            if not sep or key not in types:
                raise ContractError(f"config line {lineno}: unknown or malformed entry {raw.strip()!r}")
            kind = types[key]
            try:
                values[key] = float(value) if kind == "float" else value if kind == "str" else int(value)
            except ValueError:
                raise ContractError(f"config line {lineno}: bad value for {key}: {value!r}") from None
        missing = [k for k, f in ((f.name, f) for f in dataclasses.fields(cls))
                   if k not in values and f.default is dataclasses.MISSING]
        if missing:
            raise ContractError(f"config is missing required fields {missing}")
        return cls(**values)

    @classmethod
    def load(cls, path) -> "VariantConfig":
        return cls.from_text(Path(path).read_text())


VARIANTS = {
    "CageViT-T": VariantConfig(L=8, d=768, D=1024, p=7, N_h=8, N_f=4, K=9, rho=0.2),
    "CageViT-S": VariantConfig(L=8, d=768, D=1024, p=7, N_h=12, N_f=8, K=9, rho=0.2),
    "CageViT-B": VariantConfig(L=12, d=768, D=2048, p=7, N_h=12, N_f=8, K=9, rho=0.2),
    "CageViT-L": VariantConfig(L=16, d=1024, D=2048, p=7, N_h=16, N_f=8, K=9, rho=0.2),
}

TINY = VariantConfig(L=2, d=32, D=64, p=2, N_h=2, N_f=2, K=1, rho=0.5, n_classes=2, rows=4, cols=4, ph=4, pw=4, C=1)


# ----------------------------------------------------------------------------
# parameters


@dataclass(eq=False)
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    gate: GateParams | None
    ln2_g: Tensor
    ln2_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


@dataclass(eq=False)
class ModelParams:
    embed: Tensor
    fusion: FusionParams
    layers: list
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor
    config: VariantConfig = field(default=None)

    def named(self) -> dict:
        return named_tensors(self)


def build(config: VariantConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Initialise parameters: weights ~ N(0, 0.02) truncated at 2 std, biases 0, gains 1."""
    config.validate()
    rng = np.random.default_rng(seed)
    d, D = config.d, config.D
    acfg = config.attention_config()

    def w(shape):
        return T.trunc_normal(rng, shape, 0.02, dtype)

    def zeros(n):
        return T.param_zeros((n,), dtype)

    embed_w = w((config.patch_dim, d))
    fusion = FusionParams.init(rng, config.n_tokens, config.n_minor, d, config.N_f, config.fusion_hidden or d, dtype)
    layers = []
    for _ in range(config.L):
        layers.append(LayerParams(
            ln1_g=T.param_ones((d,), dtype), ln1_b=zeros(d),
            attn=AttentionParams.init(rng, acfg, dtype),
            gate=GateParams.init(rng, acfg, dtype) if config.attention == "GatedLinearSRA" else None,
            ln2_g=T.param_ones((d,), dtype), ln2_b=zeros(d),
            ffn_w1=w((d, D)), ffn_b1=zeros(D), ffn_w2=w((D, d)), ffn_b2=zeros(d),
        ))
    return ModelParams(
        embed=embed_w, fusion=fusion, layers=layers,
        head_w1=w((d, D)), head_b1=zeros(D), head_w2=w((D, config.n_classes)), head_b2=zeros(config.n_classes),
        config=config,
    )


def param_breakdown(config: VariantConfig) -> dict:
    """Exact parameter counts per component, from shapes alone."""
    d, D, N_f = config.d, config.D, config.N_f
    fh = config.fusion_hidden or d
    gh = config.gate_hidden or d
    p2d = config.p * config.p * d
    per_head = (config.n_minor * d * fh if config.n_minor else 0) + fh + fh * d + d
    attn = 4 * (d * d + d)
    if config.attention == "SRA":
        attn += config.R * config.R * d * d + 2 * d
    gate = N_f * d * gh + gh + gh * p2d + p2d if config.attention == "GatedLinearSRA" else 0
    return {
        "embed": config.patch_dim * d,
        "fusion": N_f * per_head,
        "positional": config.n_tokens * d,
        "fusion_embedding": N_f * d,
        "attention": config.L * attn,
        "gate": config.L * gate,
        "norms": config.L * 4 * d,
        "ffn": config.L * (d * D + D + D * d + d),
        "head": d * D + D + D * config.n_classes + config.n_classes,
    }


def count_params(config: VariantConfig) -> int:
    return sum(param_breakdown(config).values())


# ----------------------------------------------------------------------------
# forward


def partition_for(config: VariantConfig, bundle: SalienceBundle) -> TokenPartition:
    """Salience -> patch scores -> major/minor split, using the top-K maps."""
    H, W, _ = config.image_shape
    if bundle.hw != (H, W):
        raise DimensionError(f"stage=salience: bundle maps are {bundle.hw}, image is {H}x{W}")
    s = weighted_salience(bundle.top_k(min(config.K, bundle.k)))
    scores = patch_scores(s, (config.rows, config.cols), (config.ph, config.pw))
    return select_and_rearrange(scores, config.rho)


def encoder_layer(x: Tensor, layer: LayerParams, acfg: AttentionConfig, layout: GridLayout) -> Tensor:
    """Pre-norm block: ``x + Attn(LN(x))`` then ``x + FFN(LN(x))``."""
    x = x + attend(acfg, T.layer_norm(x, layer.ln1_g, layer.ln1_b), layer.attn, layer.gate, layout)
    h = T.gelu(T.matmul(T.layer_norm(x, layer.ln2_g, layer.ln2_b), layer.ffn_w1) + layer.ffn_b1)
    return x + (T.matmul(h, layer.ffn_w2) + layer.ffn_b2)


def forward_batch(params: ModelParams, images, partitions) -> Tensor:
    """Logits ``(B, n_classes)`` for ``(B, H, W, C)`` images and one partition each."""
    cfg = params.config
    if not isinstance(images, Tensor):
        images = Tensor._wrap(np.asarray(images, dtype=params.embed.dtype))
    if images.ndim != 4 or images.shape[1:] != cfg.image_shape:
        raise DimensionError(f"stage=patchify: images {images.shape} do not match (B, {cfg.image_shape})")
    B = images.shape[0]
    if len(partitions) != B:
        raise DimensionError(f"stage=partition: {len(partitions)} partitions for {B} images")
    major_idx = np.stack([p.major for p in partitions]).reshape(B, -1)
    minor_idx = np.stack([p.minor for p in partitions]).reshape(B, -1)
    if major_idx.shape[1] != cfg.n_major:
        raise DimensionError(f"stage=partition: {major_idx.shape[1]} major tokens, config expects {cfg.n_major}")
    emb = embed(patchify(images, cfg.ph, cfg.pw), params.embed)
    major, minor = split_tokens(emb, (major_idx, minor_idx))
    fused = multi_head_fusion(minor, params.fusion)
    if fused.ndim == 2:
        fused = T.zeros((B, cfg.N_f, cfg.d), dtype=params.embed.dtype) + fused
    seq = assemble(major, fused, (major_idx, minor_idx), params.fusion)
    layout = GridLayout(cfg.rows, cfg.cols, major_idx, cfg.N_f)
    acfg = cfg.attention_config()
    x = seq.tokens
    for layer in params.layers:
        x = encoder_layer(x, layer, acfg, layout)
    pooled = T.mean(x, axis=1)
    h = T.gelu(T.matmul(pooled, params.head_w1) + params.head_b1)
    return T.matmul(h, params.head_w2) + params.head_b2


def forward(params: ModelParams, image, bundle: SalienceBundle) -> Tensor:
    """Logits ``(n_classes,)`` for one ``(H, W, C)`` image and its salience bundle."""
    cfg = params.config
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.shape != cfg.image_shape:
        raise DimensionError(f"stage=patchify: image {arr.shape} does not match {cfg.image_shape}")
    part = partition_for(cfg, bundle)
    logits = forward_batch(params, arr[None], [part])
    return T.reshape(logits, (cfg.n_classes,))


# ----------------------------------------------------------------------------
# training


class AdamW:
    """Adam with decoupled weight decay on matrices; no schedule."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params.named().values() if isinstance(params, ModelParams) else params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if p.ndim >= 2:
                update = update + self.wd * p.data
            p.data = p.data - lr * update


def train_step(params: ModelParams, batch, labels, lr: float, optimizer: AdamW) -> float:
    """One optimizer step on ``batch = (images, partitions)``; returns the loss before the update."""
    images, partitions = batch
    partitions = [p if isinstance(p, TokenPartition) else partition_for(params.config, p) for p in partitions]
    for p in optimizer.params:
        p.grad = None
    try:
        loss = T.cross_entropy(forward_batch(params, images, partitions), labels)
    except NumericalError as exc:
        raise TrainingError(f"non-finite loss: {exc}") from exc
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    T.backward(loss)
    optimizer.step(lr)
    return value


def predict(params: ModelParams, images, partitions, batch_size: int = 128) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(partitions), batch_size):
            logits = forward_batch(params, images[i : i + batch_size], partitions[i : i + batch_size])
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, params: ModelParams, overwrite: bool = False) -> None:
    directory = Path(directory)
    if (directory / CONFIG_FILE).exists() and not overwrite:
        raise FileExistsError(f"checkpoint already exists at {directory}; pass overwrite=True")
    save_params(directory, params.named(), overwrite=overwrite)
    (directory / CONFIG_FILE).write_text(params.config.to_text())


def load_checkpoint(directory) -> ModelParams:
    directory = Path(directory)
    config = VariantConfig.load(directory / CONFIG_FILE)
    state = load_params(directory)
    dtypes = {t.dtype for t in state.values()}
    params = build(config, seed=0, dtype=dtypes.pop() if len(dtypes) == 1 else np.float64)
    load_state(params, state)
    return params
