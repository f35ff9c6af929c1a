"""Attention computations over the visual feature grid and the topic set.

All functions build nodes on an existing Graph and return node ids. Feature
matrices keep regions/topics as columns: V is (feature_dim x regions), the
topic embedding matrix is (embed_dim x topics). Attention weights are
simplex vectors over columns; summaries are convex column combinations.
"""

from collections import namedtuple

import numpy as np

AttentionResult = namedtuple("AttentionResult", ["weights", "summary"])


def project_features(graph, pw, raw):
    """Project stored features into the decoder's visual space, per column."""
    return graph.add_broadcast_col(graph.matmul(pw("proj_W"), raw), pw("proj_b"))


def _grid_attention(graph, feat_W, hid_W, bias, vec, grid, state):
    """Shared form: scores_j = vec . tanh(feat_W @ grid[:,j] + hid_W @ state + b)."""
    cols = graph.matmul(feat_W, grid)
    shift = graph.add(graph.matmul(hid_W, state), bias)
    scores = graph.matmul(vec, graph.tanh(graph.add_broadcast_col(cols, shift)))
    weights = graph.softmax(scores)
    summary = graph.matmul(grid, weights)
    return AttentionResult(weights, summary)


def input_attention(graph, pw, V, h_prev):
    """Visual attention conditioned on the previous hidden state."""
    return _grid_attention(graph, pw("in_att_feat"), pw("in_att_hid"),
                           pw("in_att_b"), pw("in_att_v"), V, h_prev)


def output_attention(graph, pw, V, h_t):
    """Visual attention conditioned on the current hidden state."""
    return _grid_attention(graph, pw("out_att_feat"), pw("out_att_hid"),
                           pw("out_att_b"), pw("out_att_v"), V, h_t)


def uniform_attention(graph, grid, n_cols):
    """Degenerate attention for disabled branches: equal weights, column mean."""
    weights = graph.constant(np.full(n_cols, 1.0 / n_cols))
    return AttentionResult(weights, graph.matmul(grid, weights))


def visual_transform(graph, pw, z_out):
    """Map the attended visual output into the embedding space."""
    return graph.tanh(graph.add(graph.matmul(pw("vis_out_W"), z_out), pw("vis_out_b")))


def topic_attention(graph, pw, T, h_t):
    """Topic attention conditioned on the hidden state."""
    return _grid_attention(graph, pw("top_att_emb"), pw("top_att_hid"),
                           pw("top_att_b"), pw("top_att_v"), T, h_t)


def legacy_topic_attention(graph, pw, T, y_prev_emb):
    """Older formulation: weights from the previous word embedding only."""
    proj = graph.add(graph.matmul(pw("legacy_U"), y_prev_emb), pw("legacy_b"))
    weights = graph.softmax(graph.matmul(proj, T))
    return AttentionResult(weights, graph.matmul(T, weights))


def context_fuse(graph, pw, q_t, h_t):
    """Combine attended topic and hidden state into the contextual vector."""
    return graph.tanh(graph.add(
        graph.add(graph.matmul(pw("ctx_topic_W"), q_t), graph.matmul(pw("ctx_hid_W"), h_t)),
        pw("ctx_b"),
    ))


def topic_matrix(graph, pw, topic_ids):
    """Embed topic ids as columns; gradients flow into the shared table."""
    table = pw("embedding")
    cols = [graph.row_lookup(table, int(t)) for t in topic_ids]
    return graph.stack_cols(*cols)
