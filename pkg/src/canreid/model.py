"""Collaborative attention network: backbone, branch heads, embedding, classifiers."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import blob
from .nn import Conv2d, concat_pool
from .tensor import (
    Parameter,
    Tensor,
    _as_tensor,
    concat,
    l2_normalize,
    matmul,
    reduce,
    relu,
    reshape,
    slice,
    stack,
    take,
    transpose,
)

CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stem_stride: int = 2
    widths: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (1, 2, 2, 1)
    input_h: int = 96
    input_w: int = 32

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        if not self.widths or len(self.widths) != len(self.strides):
            raise ValueError("widths and strides must be non-empty and of equal length")
        if self.strides[-1] != 1:
            raise ValueError("the final stage must keep stride 1")
        if min(self.widths) < 1 or min(self.strides) < 1 or self.stem_channels < 1 or self.stem_stride < 1:
            raise ValueError("widths, strides and stem settings must be positive")
        s = self.cumulative_stride
        if self.input_h % s or self.input_w % s:
            raise ValueError(f"cumulative stride {s} must divide input {self.input_h}x{self.input_w}")

    @property
    def cumulative_stride(self) -> int:
        return self.stem_stride * int(np.prod(self.strides))

    @property
    def output_hw(self) -> tuple[int, int]:
        s = self.cumulative_stride
        return self.input_h // s, self.input_w // s

    @property
    def channels(self) -> int:
        return self.widths[-1]


@dataclass
class BranchSpec:
    part_counts: tuple[int, ...] = (1, 3, 5, 7)

    def __post_init__(self):
        self.part_counts = tuple(int(n) for n in self.part_counts)
        if not self.part_counts:
            raise ValueError("at least one branch is required")
        if min(self.part_counts) < 1:
            raise ValueError("part counts must be >= 1")
        if len(set(self.part_counts)) != len(self.part_counts):
            raise ValueError("duplicate part counts")

    def stream_layout(self, collaborative: bool = True) -> list[tuple[str, int, bool]]:
        """(name, branch index, is_local) in canonical stream order."""
        out = []
        for b, n in enumerate(self.part_counts):
            out.append((f"b{b}_p{n}.global", b, False))
            n_local = 0 if n == 1 else (n - 1 if collaborative else n)
            out.extend((f"b{b}_p{n}.local{k}", b, True) for k in range(n_local))
        return out


class ResidualBlock:
    """relu(conv3x3(relu(conv3x3(x))) + shortcut(x)), no normalisation layers."""

    def __init__(self, name, in_ch, out_ch, stride, rng, dtype):
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, out_ch, 3, stride, 1, rng, dtype=dtype)
        self.conv2 = Conv2d(f"{name}.conv2", out_ch, out_ch, 3, 1, 1, rng, dtype=dtype, gain=1.0)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(f"{name}.proj", in_ch, out_ch, 1, stride, 0, rng, dtype=dtype, gain=3.0)

    def __call__(self, x):
        h = self.conv2(relu(self.conv1(x)))
        return relu(h + (self.shortcut(x) if self.shortcut is not None else x))

    def parameters(self):
        ps = self.conv1.parameters() + self.conv2.parameters()
        return ps + (self.shortcut.parameters() if self.shortcut is not None else [])


@dataclass
class ModelOutput:
    features: Tensor  # [S, B, d] embedded streams
    logits: Tensor  # [S, B, K] cosine logits
    stream_names: list[str]
    is_local: list[bool]

    def streams(self) -> list[Tensor]:
        return [take(self.features, s) for s in range(self.features.shape[0])]


@dataclass
class FeatureSet:
    names: list[str]
    branch: list[int]
    is_local: list[bool]
    features: list[Tensor] = field(default_factory=list)

    @property
    def num_global(self) -> int:
        return sum(not x for x in self.is_local)

    @property
    def num_local(self) -> int:
        return sum(self.is_local)


class CanModel:
    """Full parameter set; build through :func:`build_model`."""

    def __init__(self, backbone: BackboneConfig, branches: BranchSpec, embed_dim: int,
                 num_classes: int, seed: int = 0, cosine_scale: float = 16.0,
                 collaborative_attention: bool = True, dtype: str = "float64"):
        if embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if cosine_scale <= 0:
            raise ValueError("cosine_scale must be positive")
        out_h, _ = backbone.output_hw
        if max(branches.part_counts) > out_h:
            raise ValueError(f"part count {max(branches.part_counts)} exceeds pooled height {out_h}")
        self.backbone = backbone
        self.branches = branches
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        self.seed = seed
        self.cosine_scale = float(cosine_scale)
        self.collaborative_attention = collaborative_attention
        self.dtype = np.dtype(dtype)

        rng = np.random.default_rng(seed)
        dt = self.dtype
        s = backbone.stem_stride
        k, p = (3, 1) if s <= 2 else (2 * s + 1, s)
        self.stem = Conv2d("stem", 3, backbone.stem_channels, k, s, p, rng, dtype=dt)
        widths = (backbone.stem_channels,) + backbone.widths
        self.shared_stages = [
            ResidualBlock(f"stage{i}", widths[i], widths[i + 1], backbone.strides[i], rng, dt)
            for i in range(len(backbone.widths) - 1)
        ]
        last = len(backbone.widths) - 1
        self.final_stages = [
            ResidualBlock(f"branch{b}.stage{last}", widths[last], widths[last + 1],
                          backbone.strides[last], rng, dt)
            for b in range(len(branches.part_counts))
        ]
        pooled = 2 * backbone.channels
        bound = np.sqrt(3.0 / pooled)
        self.embed_weight = Parameter(rng.uniform(-bound, bound, (embed_dim, pooled)).astype(dt),
                                      name="embed.weight")
        layout = branches.stream_layout(collaborative_attention)
        self.stream_names = [name for name, _, _ in layout]
        self.stream_branch = [b for _, b, _ in layout]
        self.stream_is_local = [loc for _, _, loc in layout]
        hb = np.sqrt(3.0 / embed_dim)
        self.heads = [Parameter(rng.uniform(-hb, hb, (num_classes, embed_dim)).astype(dt),
                                name=f"head.{name}.weight") for name in self.stream_names]
        self.centers = np.zeros((len(self.stream_names), num_classes, embed_dim), dtype=dt)

    @property
    def num_streams(self) -> int:
        return len(self.stream_names)

    @property
    def descriptor_dim(self) -> int:
        return self.num_streams * self.embed_dim

    def parameters(self) -> list[Parameter]:
        ps = self.stem.parameters()
        for blk in self.shared_stages + self.final_stages:
            ps += blk.parameters()
        return ps + [self.embed_weight] + self.heads

    def named_parameters(self) -> dict[str, Parameter]:
        named = {p.name: p for p in self.parameters()}
        if len(named) != len(self.parameters()):
            raise RuntimeError("parameter names are not unique")
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def feature_set(self) -> FeatureSet:
        return FeatureSet(list(self.stream_names), list(self.stream_branch), list(self.stream_is_local))

    def __call__(self, images) -> ModelOutput:
        return forward(self, images)


def build_model(backbone: BackboneConfig, branches: BranchSpec, embed_dim: int,
                num_classes: int, seed: int = 0, **kwargs) -> CanModel:
    return CanModel(backbone, branches, embed_dim, num_classes, seed, **kwargs)


def backbone_forward(model: CanModel, images) -> list[Tensor]:
    """Shared stem and stages once, then each branch's own final stage."""
    x = _as_tensor(images)
    cfg = model.backbone
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.input_h, cfg.input_w):
        raise ValueError(f"expected images [B,3,{cfg.input_h},{cfg.input_w}], got {x.shape}")
    if x.dtype != model.dtype:
        x = Tensor(x.data.astype(model.dtype))
    h = relu(model.stem(x))
    for blk in model.shared_stages:
        h = blk(h)
    return [blk(h) for blk in model.final_stages]


def branch_pool(fmap, n: int) -> tuple[Tensor, Tensor | None]:
    """Global 1x1 block and n x 1 local map, each max||avg pooled to 2C channels.

    Works on [C,H,W] or [B,C,H,W]. For n == 1 the local map is the global block.
    """
    fmap = _as_tensor(fmap)
    if n < 1 or n > fmap.shape[-2]:
        raise ValueError(f"cannot slice height {fmap.shape[-2]} into {n} parts")
    g = concat_pool(fmap, 1, 1)
    if n == 1:
        return g, g
    return g, concat_pool(fmap, n, 1)


def collaborative_attention(local) -> list[Tensor]:
    """Adjacent-slice blocks: max over the concatenation of slices k and k+1."""
    local = _as_tensor(local)
    h_axis = local.ndim - 2
    n = local.shape[h_axis]
    if n < 2:
        raise ValueError("collaborative attention needs at least 2 slices")
    blocks = []
    for k in range(n - 1):
        pair = concat([slice(local, h_axis, k, 1), slice(local, h_axis, k + 1, 1)], axis=h_axis)
        pooled = reduce(pair, h_axis, "max")
        blocks.append(reshape(pooled, pooled.shape[:h_axis] + (1,) + pooled.shape[h_axis:]))
    return blocks


def plain_parts(local) -> list[Tensor]:
    """Raw n x 1 slices, the part-based head without collaborative attention."""
    local = _as_tensor(local)
    h_axis = local.ndim - 2
    return [slice(local, h_axis, k, 1) for k in range(local.shape[h_axis])]


def embed_stacked(streams: list, weight) -> Tensor:
    """Project each [..., 2C, 1, 1] stream by the shared weight; returns [S, ..., d]."""
    weight = _as_tensor(weight)
    flat = []
    for s in streams:
        s = _as_tensor(s)
        flat.append(reshape(s, s.shape[:-3] + (s.shape[-3],)) if s.ndim >= 3 else s)
    dim = flat[0].shape[-1]
    if dim != weight.shape[1]:
        raise ValueError(f"stream dim {dim} does not match embedding input {weight.shape[1]}")
    stacked = stack(flat, axis=0)
    lead = stacked.shape[:-1]
    proj = matmul(reshape(stacked, (-1, dim)), transpose(weight))
    return reshape(proj, lead + (weight.shape[0],))


def embed(streams: list, weight) -> list[Tensor]:
    e = embed_stacked(streams, weight)
    return [take(e, s) for s in range(e.shape[0])]


def classify(feature, head, scale: float) -> Tensor:
    """Scaled cosine logits: scale * <f/|f|, w_j/|w_j|> per class row j."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    feature, head = _as_tensor(feature), _as_tensor(head)
    if feature.shape[-1] != head.shape[-1]:
        raise ValueError(f"feature dim {feature.shape[-1]} != head dim {head.shape[-1]}")
    f = l2_normalize(feature, axis=-1)
    w = l2_normalize(head, axis=-1)
    if f.ndim == 1:
        return matmul(reshape(f, (1, -1)), transpose(w)).reshape(-1) * scale
    perm = tuple(range(w.ndim - 2)) + (w.ndim - 1, w.ndim - 2)
    return matmul(f, transpose(w, perm)) * scale


def forward(model: CanModel, images) -> ModelOutput:
    maps = backbone_forward(model, images)
    streams = []
    for fmap, n in zip(maps, model.branches.part_counts):
        g, local = branch_pool(fmap, n)
        streams.append(g)
        if n > 1:
            streams.extend(collaborative_attention(local) if model.collaborative_attention
                           else plain_parts(local))
    feats = embed_stacked(streams, model.embed_weight)
    logits = classify(feats, stack(model.heads, axis=0), model.cosine_scale)
    return ModelOutput(feats, logits, list(model.stream_names), list(model.stream_is_local))


def inference_descriptor(model: CanModel, images, batch_size: int = 64) -> np.ndarray:
    """All embedded streams concatenated in stream order, then L2-normalised.

    Accepts one image [3,H,W] (returns [S*d]) or a batch [B,3,H,W] (returns [B, S*d]).
    """
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    out = []
    for i in range(0, len(arr), batch_size):
        feats = forward(model, Tensor(arr[i:i + batch_size])).features.data  # [S,B,d]
        flat = np.transpose(feats, (1, 0, 2)).reshape(feats.shape[1], -1)
        out.append(l2_normalize(Tensor(flat), axis=-1).data)
    desc = np.concatenate(out, axis=0)
    return desc[0] if single else desc


# checkpoints -------------------------------------------------------------------


def model_meta(model: CanModel) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "backbone": asdict(model.backbone),
        "branches": list(model.branches.part_counts),
        "embed_dim": model.embed_dim,
        "num_classes": model.num_classes,
        "seed": model.seed,
        "cosine_scale": model.cosine_scale,
        "collaborative_attention": model.collaborative_attention,
        "dtype": model.dtype.name,
        "stream_order": list(model.stream_names),
        "parameters": [p.name for p in model.parameters()],
    }


def save_checkpoint(model: CanModel, directory: str | os.PathLike, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = model_meta(model)
    if extra:
        meta["extra"] = extra
    for p in model.parameters():
        blob.write_blob(d / f"{p.name}.cant", p.data)
    blob.write_blob(d / "centers.cant", model.centers)
    (d / "meta.json").write_text(json.dumps(meta, indent=2))
    return d


class CheckpointError(ValueError):
    pass


def load_checkpoint(directory: str | os.PathLike) -> CanModel:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise CheckpointError(f"no meta.json in {d}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format {meta.get('format_version')} != {CHECKPOINT_VERSION}")
    bb = meta["backbone"]
    model = build_model(
        BackboneConfig(**{**bb, "widths": tuple(bb["widths"]), "strides": tuple(bb["strides"])}),
        BranchSpec(tuple(meta["branches"])), meta["embed_dim"], meta["num_classes"], meta["seed"],
        cosine_scale=meta["cosine_scale"], collaborative_attention=meta["collaborative_attention"],
        dtype=meta["dtype"])
    if model.stream_names != meta["stream_order"]:
        raise CheckpointError("stream order in checkpoint does not match this code")
    if [p.name for p in model.parameters()] != meta["parameters"]:
        raise CheckpointError("parameter set in checkpoint does not match this code")
    for p in model.parameters():
        p.assign(blob.read_blob(d / f"{p.name}.cant"))
    centers = blob.read_blob(d / "centers.cant")
    if centers.shape != model.centers.shape:
        raise CheckpointError("center bank shape mismatch")
    model.centers = centers.astype(model.dtype)
    return model
