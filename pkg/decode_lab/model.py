"""Encoder-decoder transformer over visit histories, with a binary risk head.

Blocks are pre-layer-norm with a final layer norm per stack. Attention
projections carry no bias; feed-forward layers do. The token embedding is
shared by encoder and decoder and tied to the output projection.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from decode_lab import autodiff as ad
from decode_lab.autodiff import Tensor
from decode_lab.corpus import BOS, PAD, TokenSequence, Vocabulary
from decode_lab.errors import UsageError
from decode_lab.noising import NoisedExample
from decode_lab.schemas import AttentionRecord, ModelConfig

logger = logging.getLogger("decode_lab.model")

Parameters = Dict[str, Tensor]

ATTENTION_PROJECTIONS = ("query", "key", "value", "output")


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    d, ff = config.d_model, config.d_ff
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["embed.token"] = (config.vocab_size, d)
    shapes["embed.position"] = (config.max_seq_len, d)
    shapes["embed.visit"] = (config.max_seq_len, d)

    def norm(prefix: str):
        shapes[f"{prefix}.gamma"] = (d,)
        shapes[f"{prefix}.beta"] = (d,)

    def attention(prefix: str):
        for projection in ATTENTION_PROJECTIONS:
            shapes[f"{prefix}.{projection}"] = (d, d)

    def feed_forward(prefix: str):
        shapes[f"{prefix}.w1"] = (d, ff)
        shapes[f"{prefix}.b1"] = (ff,)
        shapes[f"{prefix}.w2"] = (ff, d)
        shapes[f"{prefix}.b2"] = (d,)

    for layer in range(config.n_encoder_layers):
        prefix = f"encoder.{layer}"
        norm(f"{prefix}.ln1")
        attention(f"{prefix}.self_attn")
        norm(f"{prefix}.ln2")
        feed_forward(f"{prefix}.ffn")
    norm("encoder.final_ln")
    for layer in range(config.n_decoder_layers):
        prefix = f"decoder.{layer}"
        norm(f"{prefix}.ln1")
        attention(f"{prefix}.self_attn")
        norm(f"{prefix}.ln2")
        attention(f"{prefix}.cross_attn")
        norm(f"{prefix}.ln3")
        feed_forward(f"{prefix}.ffn")
    norm("decoder.final_ln")
    shapes["risk_head.weight"] = (d, 1)
    shapes["risk_head.bias"] = (1,)
    return shapes


def init_parameters(config: ModelConfig, seed: int = 0) -> Parameters:
    rng = np.random.default_rng(seed)
    params: Parameters = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.startswith("embed."):
            data = rng.normal(0.0, 0.05, size=shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -np.inf), k=1)


@dataclass
class EncoderOutput:
    """`states` covers every input position (trailing [PAD] rows are zero);
    `memory` holds only the computed rows and is what cross-attention reads."""

    states: Tensor
    memory: Tensor
    key_mask: np.ndarray
    labels: List[str]


class DecodeModel:
    def __init__(self, config: ModelConfig, params: Optional[Parameters] = None, vocab: Optional[Vocabulary] = None):
        self.config = config
        self.params = params if params is not None else init_parameters(config)
        self.vocab = vocab
        expected = parameter_shapes(config)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                found = self.params[name].shape if name in self.params else None
                raise UsageError(f"parameter {name}: expected shape {shape}, found {found}")

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def _labels(self, token_ids: Sequence[int]) -> List[str]:
        if self.vocab is not None and len(self.vocab) == self.config.vocab_size:
            return self.vocab.decode(token_ids)
        return [str(int(t)) for t in token_ids]

    # --- Building blocks ---

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"])

    def _split_heads(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        h = self.config.n_heads
        return ad.transpose(ad.reshape(x, (n, h, self.config.d_model // h)), (1, 0, 2))

    def _attention(
        self,
        prefix: str,
        queries: Tensor,
        keys: Tensor,
        mask: np.ndarray,
        capture: Optional[List[Tuple[str, int, np.ndarray]]] = None,
        side: str = "",
        layer: int = 0,
    ) -> Tensor:
        config = self.config
        n, m = queries.shape[0], keys.shape[0]
        q = self._split_heads(ad.matmul(queries, self.params[f"{prefix}.query"]))
        k = self._split_heads(ad.matmul(keys, self.params[f"{prefix}.key"]))
        v = self._split_heads(ad.matmul(keys, self.params[f"{prefix}.value"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(config.d_model // config.n_heads))
        scores = ad.add(scores, ad.constant(np.broadcast_to(mask, (config.n_heads, n, m))))
        weights = ad.softmax(scores)
        if capture is not None:
            capture.append((side, layer, weights.data.copy()))
        context = ad.reshape(ad.transpose(ad.matmul(weights, v), (1, 0, 2)), (n, config.d_model))
        return ad.matmul(context, self.params[f"{prefix}.output"])

    def _feed_forward(self, x: Tensor, prefix: str) -> Tensor:
        hidden = ad.relu(ad.add(ad.matmul(x, self.params[f"{prefix}.w1"]), self.params[f"{prefix}.b1"]))
        return ad.add(ad.matmul(hidden, self.params[f"{prefix}.w2"]), self.params[f"{prefix}.b2"])

    def _residual(self, x: Tensor, update: Tensor, train: bool, rng) -> Tensor:
        return ad.add(x, ad.dropout(update, self.config.dropout_prob, rng, train))

    # --- Encoder ---

    def encode(
        self,
        tokens: TokenSequence,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        capture: Optional[list] = None,
    ) -> EncoderOutput:
        config = self.config
        if len(tokens) > config.max_seq_len:
            raise UsageError(f"sequence of length {len(tokens)} exceeds max_seq_len {config.max_seq_len}")
        ids = np.asarray(tokens.token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
            raise UsageError(f"token id outside vocabulary of size {config.vocab_size}")
        real = np.nonzero(ids != PAD)[0]
        if real.size == 0:
            raise UsageError("cannot encode a sequence made only of [PAD]")
        n = int(real[-1]) + 1
        ids = ids[:n]
        visits = np.asarray(tokens.visit_index[:n], dtype=np.int64)

        x = ad.add(
            ad.add(ad.embedding_lookup(self.params["embed.token"], ids),
                   ad.embedding_lookup(self.params["embed.position"], np.arange(n))),
            ad.embedding_lookup(self.params["embed.visit"], visits),
        )
        x = ad.dropout(x, config.dropout_prob, rng, train)
        # interior [PAD] positions are never attended to
        key_mask = np.where(ids == PAD, -np.inf, 0.0)
        self_mask = np.broadcast_to(key_mask, (n, n))
        for layer in range(config.n_encoder_layers):
            prefix = f"encoder.{layer}"
            normed = self._norm(x, f"{prefix}.ln1")
            x = self._residual(x, self._attention(f"{prefix}.self_attn", normed, normed, self_mask, capture, "encoder-self", layer), train, rng)
            x = self._residual(x, self._feed_forward(self._norm(x, f"{prefix}.ln2"), f"{prefix}.ffn"), train, rng)
        memory = self._norm(x, "encoder.final_ln")

        states = memory
        if n < len(tokens):
            states = ad.concat([memory, ad.constant(np.zeros((len(tokens) - n, config.d_model)))], axis=0)
        return EncoderOutput(states, memory, key_mask, self._labels(ids))

    # --- Decoder ---

    def _as_encoder_output(self, encoded: Union[EncoderOutput, Tensor]) -> EncoderOutput:
        if isinstance(encoded, EncoderOutput):
            return encoded
        n = encoded.shape[0]
        return EncoderOutput(encoded, encoded, np.zeros(n), [str(i) for i in range(n)])

    def decode_hidden(
        self,
        prefix_ids: Sequence[int],
        encoded: Union[EncoderOutput, Tensor],
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        capture: Optional[list] = None,
    ) -> Tensor:
        config = self.config
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        if prefix_ids.size == 0 or prefix_ids[0] != BOS:
            raise UsageError("decoder prefix must begin with [BOS]")
        if prefix_ids.size > config.max_seq_len:
            raise UsageError(f"decoder prefix of length {prefix_ids.size} exceeds max_seq_len {config.max_seq_len}")
        if prefix_ids.max() >= config.vocab_size:
            raise UsageError(f"token id outside vocabulary of size {config.vocab_size}")
        encoded = self._as_encoder_output(encoded)
        p = prefix_ids.size
        x = ad.add(
            ad.embedding_lookup(self.params["embed.token"], prefix_ids),
            ad.embedding_lookup(self.params["embed.position"], np.arange(p)),
        )
        x = ad.dropout(x, config.dropout_prob, rng, train)
        self_mask = causal_mask(p)
        cross_mask = np.broadcast_to(encoded.key_mask, (p, encoded.memory.shape[0]))
        for layer in range(config.n_decoder_layers):
            prefix = f"decoder.{layer}"
            normed = self._norm(x, f"{prefix}.ln1")
            x = self._residual(x, self._attention(f"{prefix}.self_attn", normed, normed, self_mask, capture, "decoder-self", layer), train, rng)
            normed = self._norm(x, f"{prefix}.ln2")
            x = self._residual(x, self._attention(f"{prefix}.cross_attn", normed, encoded.memory, cross_mask, capture, "cross", layer), train, rng)
            x = self._residual(x, self._feed_forward(self._norm(x, f"{prefix}.ln3"), f"{prefix}.ffn"), train, rng)
        return self._norm(x, "decoder.final_ln")

    def project(self, hidden: Tensor) -> Tensor:
        """Tied output projection: hidden · Eᵀ."""
        return ad.matmul(hidden, ad.transpose(self.params["embed.token"]))

    def decode_logits(
        self,
        prefix_ids: Sequence[int],
        encoded: Union[EncoderOutput, Tensor],
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        return self.project(self.decode_hidden(prefix_ids, encoded, train, rng))

    # --- Objectives ---

    def seq2seq_loss(self, example: NoisedExample, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        target = list(example.target)
        if not target:
            raise UsageError("seq2seq_loss needs a nonempty target")
        encoded = self.encode(example.corrupted, train, rng)
        logits = self.decode_logits([BOS] + target[:-1], encoded, train, rng)
        return ad.cross_entropy(logits, target, ignore_id=PAD)

    def encoder_only_mlm_loss(
        self,
        tokens: TokenSequence,
        masked_positions: Sequence[int],
        original_ids: Sequence[int],
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        if not masked_positions:
            raise UsageError("encoder_only_mlm_loss needs at least one masked position")
        if len(masked_positions) != len(original_ids):
            raise UsageError("masked_positions and original_ids differ in length")
        encoded = self.encode(tokens, train, rng)
        rows = ad.concat([ad.slice_(encoded.states, p, p + 1) for p in masked_positions], axis=0)
        return ad.cross_entropy(self.project(rows), original_ids, ignore_id=PAD)

    def risk_logit(self, history: TokenSequence, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """One decoder step from [BOS]; its final hidden state feeds the linear risk head."""
        hidden = self.decode_hidden([BOS], self.encode(history, train, rng), train, rng)
        return ad.add(ad.matmul(hidden, self.params["risk_head.weight"]), self.params["risk_head.bias"])

    def binary_loss(self, history: TokenSequence, label: int, train: bool = False, rng=None) -> Tensor:
        return ad.binary_cross_entropy_with_logits(self.risk_logit(history, train, rng), [float(label)])

    def risk_score(self, history: TokenSequence) -> float:
        with ad.no_grad():
            logit = self.risk_logit(history).item()
        return float(np.clip(ad.sigmoid(logit), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)))

    # --- Attention capture ---

    def capture_attention(self, history: TokenSequence, target_prefix: Sequence[int]) -> List[AttentionRecord]:
        captured: List[Tuple[str, int, np.ndarray]] = []
        with ad.no_grad():
            encoded = self.encode(history, capture=captured)
            self.decode_hidden(target_prefix, encoded, capture=captured)
        encoder_labels = encoded.labels
        prefix_labels = self._labels(target_prefix)
        records = []
        for side, layer, weights in captured:
            query_labels = encoder_labels if side == "encoder-self" else prefix_labels
            key_labels = prefix_labels if side == "decoder-self" else encoder_labels
            for head in range(weights.shape[0]):
                records.append(
                    AttentionRecord(
                        side=side,
                        layer=layer,
                        head=head,
                        weights=weights[head].tolist(),
                        query_labels=query_labels,
                        key_labels=key_labels,
                    )
                )
        return records
