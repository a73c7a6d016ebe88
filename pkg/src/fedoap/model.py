"""Encoder-decoder segmentation network with a cross-attention bottleneck.

The network is a U-Net: double-conv blocks (3x3 conv, instance norm,
relu, twice) down a maxpool pyramid, then two parallel 3x3 conv stages
that produce query and key/value feature maps, multi-head attention
over the flattened bottleneck tokens, and a mirrored decoder with skip
concatenation.  A residual spatial adapter sits before the final 1x1
projection to a single logit channel.

Parameters are partitioned for federation: the attention query
projection and the adapter are personal (never averaged), everything
else is shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import (
    DimMismatch,
    EmptyKV,
    InvalidConfig,
    NameSetMismatch,
    PartitionViolation,
    ShapeMismatch,
)
from .rng import Rng, derive_seed

TAG_SHARED = "shared"
TAG_QUERY = "personal_query"
TAG_ADAPTER = "personal_adapter"
ALL_TAGS = (TAG_SHARED, TAG_QUERY, TAG_ADAPTER)
PERSONAL_TAGS = (TAG_QUERY, TAG_ADAPTER)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    attention_heads: int = 4
    use_dca: bool = True
    use_adapter: bool = True

    @property
    def bottleneck_dim(self) -> int:
        return self.base_channels * 2 ** self.depth * 2

    @property
    def token_grid(self) -> int:
        return self.image_size // 2 ** self.depth

    @property
    def final_channels(self) -> int:
        return self.base_channels * 2

    def validate(self) -> None:
        if min(self.image_size, self.in_channels, self.base_channels,
               self.depth, self.attention_heads) < 1:
            raise InvalidConfig("all model dimensions must be positive")
        if self.image_size % 2 ** self.depth:
            raise InvalidConfig(
                f"image_size {self.image_size} not divisible by 2^depth = {2 ** self.depth}")
        if self.bottleneck_dim % self.attention_heads:
            raise InvalidConfig(
                f"bottleneck_dim {self.bottleneck_dim} not divisible by "
                f"{self.attention_heads} heads")


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple
    tag: str


def _double_conv_entries(prefix: str, cin: int, cout: int, tag: str) -> list[LayoutEntry]:
    return [
        LayoutEntry(f"{prefix}.conv1.w", (cout, cin, 3, 3), tag),
        LayoutEntry(f"{prefix}.conv1.b", (cout,), tag),
        LayoutEntry(f"{prefix}.norm1.g", (cout,), tag),
        LayoutEntry(f"{prefix}.norm1.b", (cout,), tag),
        LayoutEntry(f"{prefix}.conv2.w", (cout, cout, 3, 3), tag),
        LayoutEntry(f"{prefix}.conv2.b", (cout,), tag),
        LayoutEntry(f"{prefix}.norm2.g", (cout,), tag),
        LayoutEntry(f"{prefix}.norm2.b", (cout,), tag),
    ]


def parameter_layout(config: ModelConfig) -> list[LayoutEntry]:
    """Every parameter's name, shape, and partition tag, in lexicographic order."""
    config.validate()
    base = config.base_channels
    d = config.bottleneck_dim
    entries: list[LayoutEntry] = []

    entries += _double_conv_entries("enc.inc", config.in_channels, base, TAG_SHARED)
    ch = base
    for i in range(1, config.depth + 1):
        entries += _double_conv_entries(f"enc.down{i}", ch, ch * 2, TAG_SHARED)
        ch *= 2

    # bottleneck conv stages: key/value branch always present, query
    # branch and attention only when the cross-attention module is on
    entries += [
        LayoutEntry("bott.kv.conv.w", (d, ch, 3, 3), TAG_SHARED),
        LayoutEntry("bott.kv.conv.b", (d,), TAG_SHARED),
        LayoutEntry("bott.kv.norm.g", (d,), TAG_SHARED),
        LayoutEntry("bott.kv.norm.b", (d,), TAG_SHARED),
    ]
    if config.use_dca:
        entries += [
            LayoutEntry("bott.query.conv.w", (d, ch, 3, 3), TAG_SHARED),
            LayoutEntry("bott.query.conv.b", (d,), TAG_SHARED),
            LayoutEntry("bott.query.norm.g", (d,), TAG_SHARED),
            LayoutEntry("bott.query.norm.b", (d,), TAG_SHARED),
            LayoutEntry("attn.q.w", (d, d), TAG_QUERY),
            LayoutEntry("attn.q.b", (d,), TAG_QUERY),
            LayoutEntry("attn.k.w", (d, d), TAG_SHARED),
            LayoutEntry("attn.k.b", (d,), TAG_SHARED),
            LayoutEntry("attn.v.w", (d, d), TAG_SHARED),
            LayoutEntry("attn.v.b", (d,), TAG_SHARED),
            LayoutEntry("attn.norm.g", (d,), TAG_SHARED),
            LayoutEntry("attn.norm.b", (d,), TAG_SHARED),
        ]

    skip = ch // 2  # widest encoder skip
    ch = d
    for i in range(1, config.depth + 1):
        entries += [
            LayoutEntry(f"dec.up{i}.convt.w", (ch, ch, 2, 2), TAG_SHARED),
            LayoutEntry(f"dec.up{i}.convt.b", (ch,), TAG_SHARED),
        ]
        entries += _double_conv_entries(f"dec.up{i}", ch + skip, ch // 2, TAG_SHARED)
        ch //= 2
        skip //= 2

    f = config.final_channels
    assert ch == f
    if config.use_adapter:
        entries += [
            LayoutEntry("adapter.conv1.w", (f, f, 3, 3), TAG_ADAPTER),
            LayoutEntry("adapter.conv1.b", (f,), TAG_ADAPTER),
            LayoutEntry("adapter.conv2.w", (f, f, 3, 3), TAG_ADAPTER),
            LayoutEntry("adapter.conv2.b", (f,), TAG_ADAPTER),
        ]
    entries += [
        LayoutEntry("outc.w", (1, f, 1, 1), TAG_SHARED),
        LayoutEntry("outc.b", (1,), TAG_SHARED),
    ]
    return sorted(entries, key=lambda e: e.name)


class ParameterStore:
    """Named float64 parameter arrays with partition tags.

    Iteration order is lexicographic by name so every consumer
    (optimizer, serializer, aggregator) sees the same sequence.
    """

    def __init__(self, entries: Mapping[str, np.ndarray], tags: Mapping[str, str]):
        if set(entries) != set(tags):
            raise NameSetMismatch("parameter names and tag names differ")
        for name, tag in tags.items():
            if tag not in ALL_TAGS:
                raise PartitionViolation(f"unknown tag {tag!r} for {name!r}")
        self._entries = {name: np.asarray(entries[name], dtype=np.float64)
                         for name in sorted(entries)}
        self._tags = {name: tags[name] for name in self._entries}

    def names(self) -> list[str]:
        return list(self._entries)

    def tag(self, name: str) -> str:
        return self._tags[name]

    def arrays(self) -> dict[str, np.ndarray]:
        """The live arrays, lexicographically ordered (mutated by training)."""
        return self._entries

    def shapes(self) -> dict[str, tuple]:
        return {name: arr.shape for name, arr in self._entries.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names_by_tag(self, *tags: str) -> list[str]:
        return [n for n in self._entries if self._tags[n] in tags]

    def scalar_count(self, *tags: str) -> int:
        names = self.names_by_tag(*tags) if tags else self.names()
        return sum(self._entries[n].size for n in names)

    def copy(self) -> "ParameterStore":
        return ParameterStore({n: a.copy() for n, a in self._entries.items()},
                              dict(self._tags))

    def equals(self, other: "ParameterStore") -> bool:
        return (self.names() == other.names()
                and self._tags == other._tags
                and all(np.array_equal(self._entries[n], other._entries[n])
                        for n in self._entries))


def init_model(config: ModelConfig, seed: int) -> ParameterStore:
    """Seeded Kaiming-uniform initialization; biases zero, norm gains one.

    Each parameter draws from its own sub-stream keyed by name, so the
    values do not depend on layout iteration order.
    """
    layout = parameter_layout(config)
    entries: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}
    for entry in layout:
        tags[entry.name] = entry.tag
        leaf = entry.name.rsplit(".", 1)[-1]
        if leaf == "w" and len(entry.shape) >= 2:
            if len(entry.shape) == 4 and ".convt." in entry.name:
                fan_in = entry.shape[0] * entry.shape[2] * entry.shape[3]
            elif len(entry.shape) == 4:
                fan_in = entry.shape[1] * entry.shape[2] * entry.shape[3]
            else:
                fan_in = entry.shape[0]
            bound = float(np.sqrt(6.0 / fan_in))
            rng = Rng(derive_seed(seed, entry.name))
            size = int(np.prod(entry.shape))
            entries[entry.name] = rng.uniform_range_array(size, -bound, bound) \
                .reshape(entry.shape)
        elif leaf == "g":
            entries[entry.name] = np.ones(entry.shape, dtype=np.float64)
        else:
            entries[entry.name] = np.zeros(entry.shape, dtype=np.float64)
    return ParameterStore(entries, tags)


def split_params(params: ParameterStore) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Partition into (shared, personal) name->array dicts, names preserved."""
    shared = {n: params[n] for n in params.names_by_tag(TAG_SHARED)}
    personal = {n: params[n] for n in params.names_by_tag(*PERSONAL_TAGS)}
    return shared, personal


def merge_params(template: ParameterStore, shared: Mapping[str, np.ndarray],
                 personal: Mapping[str, np.ndarray]) -> ParameterStore:
    """Rebuild a store from split halves; the template supplies the tags."""
    want_shared = set(template.names_by_tag(TAG_SHARED))
    want_personal = set(template.names_by_tag(*PERSONAL_TAGS))
    if set(shared) != want_shared or set(personal) != want_personal:
        raise NameSetMismatch("split halves do not cover the template's names")
    entries = {**{n: np.array(a, dtype=np.float64) for n, a in shared.items()},
               **{n: np.array(a, dtype=np.float64) for n, a in personal.items()}}
    return ParameterStore(entries, {n: template.tag(n) for n in entries})


@dataclass
class KVTokens:
    """Key/value token matrices published by one client for one round."""

    keys: Tensor
    values: Tensor
    client_id: int
    round: int

    def __post_init__(self):
        if self.keys.shape != self.values.shape or len(self.keys.shape) != 2:
            raise DimMismatch(
                f"keys {self.keys.shape} and values {self.values.shape} must be "
                f"equal 2-D shapes")

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def detached(self) -> "KVTokens":
        return KVTokens(self.keys.detach(), self.values.detach(),
                        self.client_id, self.round)


def _constants(params: ParameterStore) -> dict[str, Tensor]:
    return {name: Tensor(params[name]) for name in params.names()}


def attach_params(tape: Tape, params: ParameterStore) -> dict[str, Tensor]:
    """Watch every parameter as a differentiable leaf, in name order."""
    return {name: tape.leaf(params[name]) for name in params.names()}


def _double_conv(p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    x = ad.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], stride=1, pad=1)
    x = ad.relu(ad.instance_norm(x, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"]))
    x = ad.conv2d(x, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], stride=1, pad=1)
    return ad.relu(ad.instance_norm(x, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"]))


def _bottleneck_stage(p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    x = ad.conv2d(x, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], stride=1, pad=1)
    return ad.relu(ad.instance_norm(x, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"]))


def _to_tokens(feature_map: Tensor) -> Tensor:
    """[B, D, h, w] -> [B*h*w, D], row-major over (batch, row, column)."""
    b, d, h, w = feature_map.shape
    return ad.reshape(ad.permute(feature_map, (0, 2, 3, 1)), (b * h * w, d))


def _from_tokens(tokens: Tensor, b: int, h: int, w: int) -> Tensor:
    d = tokens.shape[1]
    return ad.permute(ad.reshape(tokens, (b, h, w, d)), (0, 3, 1, 2))


def _project(p: Mapping[str, Tensor], prefix: str, tokens: Tensor) -> Tensor:
    return ad.add(ad.matmul(tokens, p[f"{prefix}.w"]), p[f"{prefix}.b"])


def dca_attention(q: Tensor, local_kv: KVTokens, foreign_kv: Sequence[KVTokens],
                  heads: int) -> Tensor:
    """Multi-head attention over local tokens plus detached foreign tokens.

    Keys/values are the local live tokens followed by each foreign
    client's published tokens in the caller-supplied (client_id) order;
    per head the output is softmax(q k^T / sqrt(d/heads)) v, heads
    concatenated.  Gradients flow into q and local_kv only; foreign
    tokens are re-detached defensively.  (The network group-normalizes
    this output; that step lives in the forward pass so this op reduces
    to textbook self-attention when foreign_kv is empty.)
    """
    if len(q.shape) != 2:
        raise DimMismatch(f"queries must be [n_q, d], got {q.shape}")
    d = q.shape[1]
    if d % heads:
        raise DimMismatch(f"token dim {d} not divisible by {heads} heads")
    if local_kv.n_tokens == 0:
        raise EmptyKV("local key/value set is empty")
    for f in foreign_kv:
        if f.dim != d:
            raise DimMismatch(f"foreign token dim {f.dim} != {d}")
        if f.n_tokens == 0:
            raise EmptyKV(f"foreign client {f.client_id} published no tokens")
    if local_kv.dim != d:
        raise DimMismatch(f"local token dim {local_kv.dim} != {d}")

    key_parts = [local_kv.keys]
    value_parts = [local_kv.values]
    for f in foreign_kv:
        key_parts.append(f.keys.detach() if f.keys.requires_grad else f.keys)
        value_parts.append(f.values.detach() if f.values.requires_grad else f.values)
    all_k = ad.concat(key_parts, axis=0) if len(key_parts) > 1 else key_parts[0]
    all_v = ad.concat(value_parts, axis=0) if len(value_parts) > 1 else value_parts[0]

    dh = d // heads
    head_outputs = []
    for h in range(heads):
        qh = ad.slice_axis(q, 1, h * dh, (h + 1) * dh)
        kh = ad.slice_axis(all_k, 1, h * dh, (h + 1) * dh)
        vh = ad.slice_axis(all_v, 1, h * dh, (h + 1) * dh)
        logits = ad.scale(ad.matmul(qh, ad.permute(kh, (1, 0))), 1.0 / np.sqrt(dh))
        head_outputs.append(ad.matmul(ad.softmax(logits), vh))
    return ad.concat(head_outputs, axis=1) if heads > 1 else head_outputs[0]


def _run(p: Mapping[str, Tensor], batch: Tensor, foreign_kv: Sequence[KVTokens],
         config: ModelConfig) -> Tensor:
    b, c, h, w = batch.shape
    if c != config.in_channels or h != config.image_size or w != config.image_size:
        raise ShapeMismatch(
            f"batch {batch.shape} does not match config "
            f"[{config.in_channels}, {config.image_size}, {config.image_size}]")

    skips = []
    x = _double_conv(p, "enc.inc", batch)
    for i in range(1, config.depth + 1):
        skips.append(x)
        x = _double_conv(p, f"enc.down{i}", ad.maxpool2d(x))

    kv_map = _bottleneck_stage(p, "bott.kv", x)
    if config.use_dca:
        grid = config.token_grid
        q_map = _bottleneck_stage(p, "bott.query", x)
        q = _project(p, "attn.q", _to_tokens(q_map))
        kv_tokens = _to_tokens(kv_map)
        local = KVTokens(_project(p, "attn.k", kv_tokens),
                         _project(p, "attn.v", kv_tokens),
                         client_id=-1, round=-1)
        attended = dca_attention(q, local, foreign_kv, config.attention_heads)
        # one group per attention head, per token
        as_map = ad.reshape(attended, (attended.shape[0], config.bottleneck_dim, 1, 1))
        normed = ad.group_norm(as_map, p["attn.norm.g"], p["attn.norm.b"],
                               groups=config.attention_heads)
        x = _from_tokens(ad.reshape(normed, attended.shape), b, grid, grid)
    else:
        x = kv_map

    for i in range(1, config.depth + 1):
        x = ad.conv_transpose2d(x, p[f"dec.up{i}.convt.w"], p[f"dec.up{i}.convt.b"])
        x = ad.concat([x, skips[-i]], axis=1)
        x = _double_conv(p, f"dec.up{i}", x)

    if config.use_adapter:
        inner = ad.relu(ad.conv2d(x, p["adapter.conv1.w"], p["adapter.conv1.b"],
                                  stride=1, pad=1))
        inner = ad.conv2d(inner, p["adapter.conv2.w"], p["adapter.conv2.b"],
                          stride=1, pad=1)
        x = ad.add(x, inner)

    return ad.conv2d(x, p["outc.w"], p["outc.b"], stride=1, pad=0)


def forward(params: ParameterStore, batch, foreign_kv: Sequence[KVTokens],
            config: ModelConfig) -> Tensor:
    """Evaluation forward pass: logits [B, 1, H, W], no gradient tracking."""
    batch_t = batch if isinstance(batch, Tensor) else Tensor(batch)
    return _run(_constants(params), batch_t, foreign_kv, config)


def forward_trainable(tape: Tape, params: ParameterStore, batch,
                      foreign_kv: Sequence[KVTokens],
                      config: ModelConfig) -> tuple[Tensor, dict[str, Tensor]]:
    """Forward pass with every parameter watched on the tape."""
    leaves = attach_params(tape, params)
    batch_t = batch if isinstance(batch, Tensor) else Tensor(batch)
    return _run(leaves, batch_t, foreign_kv, config), leaves


def compute_local_kv(params: ParameterStore, anchor_batch, config: ModelConfig,
                     client_id: int = 0, round_index: int = 0) -> KVTokens:
    """Publishable key/value tokens from the encoder + key/value branch.

    Flattens all anchor samples' bottleneck positions into
    n_tokens = A * (image_size / 2^depth)^2 detached tokens.
    """
    if not config.use_dca:
        raise InvalidConfig("key/value publication requires the attention module")
    batch_t = anchor_batch if isinstance(anchor_batch, Tensor) else Tensor(anchor_batch)
    if len(batch_t.shape) != 4:
        raise ShapeMismatch(f"anchor batch must be 4-D, got {batch_t.shape}")
    p = _constants(params)
    x = _double_conv(p, "enc.inc", batch_t)
    for i in range(1, config.depth + 1):
        x = _double_conv(p, f"enc.down{i}", ad.maxpool2d(x))
    tokens = _to_tokens(_bottleneck_stage(p, "bott.kv", x))
    keys = _project(p, "attn.k", tokens)
    values = _project(p, "attn.v", tokens)
    return KVTokens(keys.detach(), values.detach(), client_id, round_index)
