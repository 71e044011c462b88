"""Sentence and bag encoders: embeddings, PCNN, selective attention."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numcore as nc

log = logging.getLogger(__name__)


@dataclass
class EmbeddingTables:
    word_table: nc.Tensor
    pos1_table: nc.Tensor
    pos2_table: nc.Tensor

    def tensors(self):
        return [self.word_table, self.pos1_table, self.pos2_table]


@dataclass
class PcnnParams:
    filters: nc.Tensor  # (kernel, d_in, feature_maps)
    bias: nc.Tensor

    def tensors(self):
        return [self.filters, self.bias]


def embed_sentence(inst, tables: EmbeddingTables) -> nc.Tensor:
    return nc.concat([nc.lookup(tables.word_table, inst.token_ids),
                      nc.lookup(tables.pos1_table, inst.pos1_ids),
                      nc.lookup(tables.pos2_table, inst.pos2_ids)], axis=1)


def pcnn_encode(embedded: nc.Tensor, params: PcnnParams, head_pos, tail_pos) -> nc.Tensor:
    T = embedded.shape[0]
    if not (0 <= head_pos < T and 0 <= tail_pos < T):
        raise IndexError(f"entity positions ({head_pos}, {tail_pos}) outside sentence of length {T}")
    fmap = nc.conv1d_same(embedded, params.filters, params.bias)
    pooled = nc.piecewise_max_pool(fmap, min(head_pos, tail_pos), max(head_pos, tail_pos))
    return nc.tanh_act(pooled)


def encode_sentence(inst, tables, pcnn):
    return pcnn_encode(embed_sentence(inst, tables), pcnn, inst.head_pos, inst.tail_pos)


def bag_attention(sentence_reps, query: nc.Tensor):
    """Weights alpha_j = softmax_j(s_j . query); returns (sum_j alpha_j s_j, alpha)."""
    if isinstance(sentence_reps, nc.Tensor):
        S = sentence_reps
    elif len(sentence_reps):
        S = nc.stack(list(sentence_reps))
    else:
        S = None
    if S is None or S.shape[0] == 0:
        raise ValueError("bag_attention: empty bag")
    d = S.shape[1]
    if query.shape != (d,):
        raise nc.DimensionError(f"attention query {query.shape} does not match sentences of size {d}")
    scores = nc.reshape(nc.matmul(S, nc.reshape(query, (d, 1))), (S.shape[0],))
    alpha = nc.softmax_row(scores)
    bag = nc.reshape(nc.matmul(nc.reshape(alpha, (1, S.shape[0])), S), (d,))
    return bag, alpha.values.copy()


def load_word_vectors(path, vocab, table: nc.Tensor):
    """Overwrite rows of ``table`` for tokens found in a text vector file.

    Lines look like ``token v1 ... vD``; tokens missing from the file keep
    their random initialisation.  Returns the number of rows replaced.
    """
    dim = table.shape[1]
    hits = 0
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                if n == 1 and len(parts) == 2:
                    continue  # word2vec-style "count dim" header
                raise ValueError(f"{path}:{n}: expected {dim} values, got {len(parts) - 1}")
            idx = vocab.stoi.get(parts[0])
            if idx is not None:
                table.values[idx] = np.asarray(parts[1:], dtype=table.values.dtype)
                hits += 1
    log.info("loaded %d pretrained vectors from %s", hits, path)
    return hits
