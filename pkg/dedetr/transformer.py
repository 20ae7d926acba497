"""
dedetr - Detection transformer.

Encoder over the coarsest pyramid level, a decoder whose first layer attends
densely to the encoded memory and whose later layers attend per query to
RoIAlign samples taken around the boxes of the previous layer, and per-layer
class / box heads with iterative box refinement.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ShapeError
from .models import Box, BoxFormat
from .sampling import (
    FeatureMap,
    FeaturePyramid,
    SparseKV,
    build_multiscale_kv,
    flatten_embed,
    grid_points,
    sine_pos_embed,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

MASK_FILL = -1e9
QUERY_POS_RANGE = 0.1


class ParamFactory:
    """Hands out seeded parameter tensors; construction order fixes every draw."""

    def __init__(self, seed: int):
        self.seed = seed
        self._count = 0

    def _next_seed(self) -> int:
        self._count += 1
        return int(np.random.SeedSequence([self.seed, self._count]).generate_state(1)[0])

    def uniform(self, dims: Sequence[int], bound: float) -> Tensor:
        return T.uniform(dims, -bound, bound, seed=self._next_seed(), requires_grad=True)

    def zeros(self, dims: Sequence[int]) -> Tensor:
        return T.zeros(dims, requires_grad=True)

    def ones(self, dims: Sequence[int]) -> Tensor:
        return T.constant(dims, 1.0, requires_grad=True)


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        """Copy arrays into matching parameters; names and shapes must agree exactly."""
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ShapeError(
                f"parameter names differ (missing: {missing[:3]}, unexpected: {extra[:3]})"
            )
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ShapeError(f"parameter '{name}' expects {p.dims}, got {value.shape}")
            p.data = value.copy()


class Linear(Module):
    """x @ weight + bias, weight [in, out], Xavier-uniform initialised."""

    def __init__(self, in_dim: int, out_dim: int, factory: ParamFactory):
        self.weight = factory.uniform((in_dim, out_dim), math.sqrt(6.0 / (in_dim + out_dim)))
        self.bias = factory.zeros((out_dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, factory: ParamFactory):
        self.gamma = factory.ones((dim,))
        self.beta = factory.zeros((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x) * self.gamma + self.beta


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, factory: ParamFactory):
        self.fc1 = Linear(dim, hidden, factory)
        self.fc2 = Linear(hidden, dim, factory)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


def _add_pos(x: Tensor, pos: Optional[Tensor]) -> Tensor:
    return x if pos is None else x + pos


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention over num_heads heads.

    Positional embeddings are added to queries and keys before projection,
    never to values. Inputs are [B, n, D] or unbatched [n, D].
    """

    def __init__(self, dim: int, num_heads: int, factory: ParamFactory):
        if dim % num_heads:
            raise ShapeError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.q_proj = Linear(dim, dim, factory)
        self.k_proj = Linear(dim, dim, factory)
        self.v_proj = Linear(dim, dim, factory)
        self.out_proj = Linear(dim, dim, factory)
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.dims
        heads = T.reshape(x, (b, n, self.num_heads, self.dim // self.num_heads))
        return T.transpose(heads, (0, 2, 1, 3))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 q_pos: Optional[Tensor] = None, k_pos: Optional[Tensor] = None,
                 mask: Optional[np.ndarray] = None) -> Tensor:
        """
        Args:
            q: Queries [B, Nq, D]
            k: Keys [B, Nk, D]
            v: Values [B, Nk, D]
            q_pos: Added to q, broadcast over leading axes
            k_pos: Added to k, broadcast over leading axes
            mask: Boolean [Nq, Nk] or [B, Nq, Nk]; False blocks attention

        Returns:
            [B, Nq, D] (or [Nq, D] for unbatched input)
        """
        for name, x in (("q", q), ("k", k), ("v", v)):
            if x.dims[-1] != self.dim:
                raise ShapeError(f"attention {name} has width {x.dims[-1]}, expected {self.dim}")
        unbatched = len(q.dims) == 2
        if unbatched:
            q, k, v = (T.reshape(x, (1,) + x.dims) for x in (q, k, v))
        if k.dims[:2] != v.dims[:2] or q.dims[0] != k.dims[0]:
            raise ShapeError(f"attention extents disagree: q {q.dims}, k {k.dims}, v {v.dims}")

        qh = self._split(self.q_proj(_add_pos(q, q_pos)))
        kh = self._split(self.k_proj(_add_pos(k, k_pos)))
        vh = self._split(self.v_proj(v))
        scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2)))
        scores = T.scale(scores, 1.0 / math.sqrt(self.dim // self.num_heads))
        if mask is not None:
            scores = scores + Tensor(self._additive_mask(mask, scores.dims))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data

        merged = T.transpose(T.matmul(weights, vh), (0, 2, 1, 3))
        b, nq = q.dims[0], q.dims[1]
        out = self.out_proj(T.reshape(merged, (b, nq, self.dim)))
        return T.reshape(out, (nq, self.dim)) if unbatched else out

    @staticmethod
    def _additive_mask(mask: np.ndarray, score_dims: tuple) -> np.ndarray:
        allowed = np.asarray(mask, dtype=bool)
        if allowed.ndim == 3:
            allowed = allowed[:, None, :, :]
        try:
            allowed = np.broadcast_to(allowed, score_dims)
        except ValueError as exc:
            raise ShapeError(f"mask {np.shape(mask)} does not fit scores {score_dims}") from exc
        return np.where(allowed, 0.0, MASK_FILL)


class EncoderLayer(Module):
    """Post-norm self-attention + feed-forward block."""

    def __init__(self, config: ModelConfig, factory: ParamFactory):
        self.self_attn = MultiHeadAttention(config.hidden_dim, config.num_heads, factory)
        self.norm1 = LayerNorm(config.hidden_dim, factory)
        self.ffn = FeedForward(config.hidden_dim, config.ffn_dim, factory)
        self.norm2 = LayerNorm(config.hidden_dim, factory)

    def __call__(self, z: Tensor, pos: Tensor) -> Tensor:
        z = self.norm1(z + self.self_attn(z, z, z, pos, pos))
        return self.norm2(z + self.ffn(z))


class DecoderLayer(Module):
    """Self-attention over queries, cross-attention, feed-forward; residual + norm around each."""

    def __init__(self, config: ModelConfig, factory: ParamFactory):
        dim, heads = config.hidden_dim, config.num_heads
        self.self_attn = MultiHeadAttention(dim, heads, factory)
        self.norm1 = LayerNorm(dim, factory)
        self.cross_attn = MultiHeadAttention(dim, heads, factory)
        self.norm2 = LayerNorm(dim, factory)
        self.ffn = FeedForward(dim, config.ffn_dim, factory)
        self.norm3 = LayerNorm(dim, factory)

    def _self_block(self, content: Tensor, query_pos: Tensor) -> Tensor:
        return self.norm1(content + self.self_attn(content, content, content, query_pos, query_pos))

    def forward_dense(self, content: Tensor, query_pos: Tensor, memory: Tensor,
                      memory_pos: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """Every query attends to all S positions of the encoded memory (optionally masked)."""
        x = self._self_block(content, query_pos)
        x = self.norm2(x + self.cross_attn(x, memory, memory, query_pos, memory_pos, mask))
        return self.norm3(x + self.ffn(x))

    def forward_sparse(self, content: Tensor, query_pos: Tensor, kv: SparseKV) -> Tensor:
        """Queries form a batch of N, each attending only to its own sampled sequence."""
        n, dim = content.dims
        if kv.num_queries != n:
            raise ShapeError(f"sparse kv holds {kv.num_queries} queries, decoder has {n}")
        x = self._self_block(content, query_pos)
        ctx = self.cross_attn(T.reshape(x, (n, 1, dim)), kv.keys_values, kv.keys_values,
                              T.reshape(query_pos, (n, 1, dim)), kv.pos)
        x = self.norm2(x + T.reshape(ctx, (n, dim)))
        return self.norm3(x + self.ffn(x))


class PredictionHeads(Module):
    """Class logits over C+1 (index C = no object) and four box deltas."""

    def __init__(self, config: ModelConfig, factory: ParamFactory):
        dim = config.hidden_dim
        self.class_head = Linear(dim, config.num_classes + 1, factory)
        self.box_hidden = Linear(dim, dim, factory)
        self.box_out = Linear(dim, 4, factory)

    def __call__(self, content: Tensor) -> tuple:
        return self.class_head(content), self.box_out(T.relu(self.box_hidden(content)))


@dataclass
class QueryState:
    """Decoder state between layers; reference_boxes are cxcywh-normalised [N, 4]."""
    content: Tensor
    query_pos: Tensor
    reference_boxes: Tensor

    def __post_init__(self):
        n = self.content.dims[0]
        if self.query_pos.dims != self.content.dims or self.reference_boxes.dims != (n, 4):
            raise ShapeError(
                f"query state extents disagree: content {self.content.dims}, "
                f"pos {self.query_pos.dims}, refs {self.reference_boxes.dims}"
            )
        refs = self.reference_boxes.data
        if np.any(refs < 0.0) or np.any(refs > 1.0):
            raise ShapeError("reference boxes must be cxcywh-normalised")


@dataclass
class LayerOutput:
    """Per-layer predictions; class_probs rows sum to one, boxes are cxcywh [N, 4]."""
    class_logits: Tensor
    class_probs: Tensor
    boxes: Tensor

    @property
    def num_queries(self) -> int:
        return self.boxes.dims[0]

    def box_list(self) -> list:
        clipped = np.clip(self.boxes.data, 1e-9, 1.0)
        return [Box(tuple(row), BoxFormat.CXCYWH) for row in clipped]


def initial_reference_grid(num_queries: int) -> np.ndarray:
    """Boxes tiling the unit square on a ceil(sqrt(N)) grid, row-major -> [N, 4]."""
    g = math.ceil(math.sqrt(num_queries))
    idx = np.arange(num_queries)
    cx = (idx % g + 0.5) / g
    cy = (idx // g + 0.5) / g
    size = np.full(num_queries, 1.0 / g)
    return np.stack([cx, cy, size, size], axis=1)


class DetectionTransformer(Module):
    """
    Encoder-decoder detector over a feature pyramid.

    Args:
        config: Model shape and toggles
        seed: Parameter initialisation seed
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        factory = ParamFactory(seed)
        dim, n = config.hidden_dim, config.num_queries
        self.input_proj = [Linear(config.in_channels, dim, factory)
                           for _ in range(config.num_levels)]
        self.encoder = [EncoderLayer(config, factory) for _ in range(config.enc_layers)]
        self.decoder = [DecoderLayer(config, factory) for _ in range(config.dec_layers)]
        self.heads = [PredictionHeads(config, factory) for _ in range(config.dec_layers)]
        self.query_pos = factory.uniform((n, dim), QUERY_POS_RANGE)
        with T.no_grad():
            logits = T.inverse_sigmoid(Tensor(initial_reference_grid(n)))
        self.reference_logits = Tensor(logits.data, requires_grad=True)
        self.query_content = factory.zeros((n, dim))
        logger.debug("model built: %d parameters, seed %d", self.num_parameters(), seed)

    # -- encoder ------------------------------------------------------------

    def embed_pyramid(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        """Project every level to D channels and encode the coarsest one."""
        levels = pyramid.levels
        if len(levels) != len(self.input_proj):
            raise ShapeError(
                f"pyramid has {len(levels)} levels, model expects {len(self.input_proj)}"
            )
        embedded = []
        for i, fmap in enumerate(levels):
            if fmap.channels != self.config.in_channels:
                raise ShapeError(
                    f"level {i} has {fmap.channels} channels, model expects "
                    f"{self.config.in_channels}"
                )
            flat = flatten_embed(fmap, self.input_proj[i])
            embedded.append(FeatureMap(
                T.reshape(flat, (fmap.height, fmap.width, self.config.hidden_dim)), fmap.stride))
        top = embedded[-1]
        pos_top = sine_pos_embed(grid_points(top.height, top.width), self.config.hidden_dim)
        flat_top = T.reshape(top.values, (top.height * top.width, self.config.hidden_dim))
        encoded = self.encoder_forward(flat_top, pos_top)
        return FeaturePyramid(embedded, pyramid.image_size, encoded_top=encoded, pos_top=pos_top)

    def encoder_forward(self, z: Tensor, pos: Tensor) -> Tensor:
        """[S, D] -> [S, D]; identity when enc_layers is 0."""
        for layer in self.encoder:
            z = layer(z, pos)
        return z

    # -- decoder ------------------------------------------------------------

    def initial_state(self) -> QueryState:
        return QueryState(self.query_content, self.query_pos, T.sigmoid(self.reference_logits))

    def dense_decoder_layer(self, index: int, state: QueryState, memory: Tensor,
                            memory_pos: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return self.decoder[index].forward_dense(state.content, state.query_pos, memory,
                                                 memory_pos, mask)

    def sparse_decoder_layer(self, index: int, state: QueryState, kv: SparseKV) -> Tensor:
        return self.decoder[index].forward_sparse(state.content, state.query_pos, kv)

    def heads_forward(self, index: int, content: Tensor,
                      reference_logits: Tensor) -> LayerOutput:
        """
        Class and box predictions of decoder layer `index`.

        Args:
            index: Decoder layer (selects its own heads)
            content: [N, D]
            reference_logits: inverse_sigmoid of the reference boxes [N, 4]

        Returns:
            LayerOutput with boxes refined from the references when box_refine is on
        """
        logits, delta = self.heads[index](content)
        if self.config.box_refine:
            boxes = T.sigmoid(reference_logits + delta)
        else:
            boxes = T.sigmoid(delta)
        return LayerOutput(logits, T.softmax(logits, axis=-1), boxes)

    def forward(self, pyramid: FeaturePyramid,
                frozen_boxes: Optional[Sequence[np.ndarray]] = None) -> list:
        """
        Run the full decoder stack.

        Args:
            pyramid: Raw pyramid with in_channels channels per level
            frozen_boxes: Optional per-layer [N, 4] boxes (layers 2..L_d) replacing
                the previous layer's detached boxes for sampling and refinement

        Returns:
            One LayerOutput per decoder layer
        """
        cfg = self.config
        embedded = self.embed_pyramid(pyramid)
        memory, memory_pos = embedded.encoded_top, embedded.pos_top
        levels = cfg.sampled_levels(embedded.num_levels)
        state = self.initial_state()
        ref_logits = self.reference_logits
        outputs = []
        for index in range(cfg.dec_layers):
            if index == 0 or not cfg.sparse_sampling:
                content = self.dense_decoder_layer(index, state, memory, memory_pos)
            else:
                kv = build_multiscale_kv(embedded, state.reference_boxes.data,
                                         cfg.roi_resolution, levels)
                content = self.sparse_decoder_layer(index, state, kv)
            out = self.heads_forward(index, content, ref_logits)
            outputs.append(out)

            if index + 1 < cfg.dec_layers:
                if frozen_boxes is not None:
                    prev = np.asarray(frozen_boxes[index], dtype=np.float64)
                else:
                    prev = out.boxes.data
                refs = Tensor(prev)
                # gradient stops at the boxes handed to the next layer
                with T.no_grad():
                    ref_logits = T.inverse_sigmoid(refs)
                state = QueryState(content, state.query_pos, refs)
        return outputs

    __call__ = forward

    def sampling_boxes(self, pyramid: FeaturePyramid) -> list:
        """Detached boxes each layer hands to the next (input for frozen_boxes)."""
        with T.no_grad():
            outputs = self.forward(pyramid)
        return [out.boxes.data.copy() for out in outputs[:-1]]


def multi_head_attention(attn: MultiHeadAttention, q: Tensor, k: Tensor, v: Tensor,
                         q_pos: Optional[Tensor] = None, k_pos: Optional[Tensor] = None,
                         mask: Optional[np.ndarray] = None) -> Tensor:
    return attn(q, k, v, q_pos, k_pos, mask)


def model_forward(model: DetectionTransformer, pyramid: FeaturePyramid,
                  frozen_boxes: Optional[Sequence[np.ndarray]] = None) -> list:
    return model.forward(pyramid, frozen_boxes)
