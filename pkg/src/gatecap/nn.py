"""Parameter containers and learned building blocks: affine maps, embedding
lookup, the LSTM cell, deterministic initialization, and the checkpoint format.

Weight tying: the importance-scoring path reuses the topic attention's
hidden-state map and projection vector. Both live once in ``ModelParams``
(canonical names ``top_att_hid`` / ``top_att_v``); the aliases
``score_hid_W`` / ``score_v`` resolve to the same Tensor, so gradients sum
and the optimizer updates the shared storage exactly once.
"""

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor

CHECKPOINT_MAGIC = b"SIMNET01"

# aliases for tied storage: alias name -> canonical name
TIED = {"score_hid_W": "top_att_hid", "score_v": "top_att_v"}


@dataclass
class HyperParams:
    """Model dimensions. Attention widths default to the region/topic counts."""

    raw_dim: int = 64          # stored feature dimension before projection
    feature_dim: int = 32      # projected visual feature dimension
    embed_dim: int = 16        # word/topic embedding dimension
    hidden_dim: int = 32       # LSTM state dimension
    regions: int = 9           # visual feature vectors per image
    topics: int = 5            # topic words per image
    vocab_size: int = 0
    att_visual: int = 0        # visual attention width; 0 -> regions
    att_topic: int = 0         # topic attention width; 0 -> topics
    max_len: int = 20
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    unk_id: int = 3

    def __post_init__(self):
        if self.att_visual <= 0:
            self.att_visual = self.regions
        if self.att_topic <= 0:
            self.att_topic = self.topics
        for name in ("raw_dim", "feature_dim", "embed_dim", "hidden_dim",
                     "regions", "topics", "att_visual", "att_topic", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"HyperParams.{name} must be positive")

    @classmethod
    def paper(cls, vocab_size, max_len=20):
        """Published-scale shapes: 2048-dim raw features on a 7x7 grid."""
        return cls(raw_dim=2048, feature_dim=512, embed_dim=256, hidden_dim=512,
                   regions=49, topics=5, vocab_size=vocab_size, max_len=max_len)

    @classmethod
    def desk(cls, vocab_size, max_len=20):
        """Small shapes for fast CPU experiments on the synthetic corpus."""
        return cls(raw_dim=64, feature_dim=32, embed_dim=16, hidden_dim=32,
                   regions=9, topics=5, vocab_size=vocab_size, max_len=max_len)


def param_shapes(hp):
    """Canonical parameter inventory (tied tensors appear once)."""
    g, e, d = hp.feature_dim, hp.embed_dim, hp.hidden_dim
    av, at, v = hp.att_visual, hp.att_topic, hp.vocab_size
    return {
        "proj_W": (g, hp.raw_dim), "proj_b": (g,),
        "in_att_feat": (av, g), "in_att_hid": (av, d), "in_att_b": (av,), "in_att_v": (av,),
        "out_att_feat": (av, g), "out_att_hid": (av, d), "out_att_b": (av,), "out_att_v": (av,),
        "lstm_Wx": (4 * d, g + e), "lstm_Wh": (4 * d, d), "lstm_b": (4 * d,),
        "vis_out_W": (e, g), "vis_out_b": (e,),
        "legacy_U": (e, e), "legacy_b": (e,),
        "top_att_emb": (at, e), "top_att_hid": (at, d), "top_att_b": (at,), "top_att_v": (at,),
        "ctx_topic_W": (e, e), "ctx_hid_W": (e, d), "ctx_b": (e,),
        "score_ctx_W": (at, e), "score_ctx_b": (at,),
        "score_vis_W": (at, e), "score_vis_b": (at,),
        "vocab_W": (v, e), "vocab_b": (v,),
        "embedding": (v, e),
    }


class ModelParams:
    """All learned tensors, keyed by canonical name; tied aliases resolve."""

    def __init__(self, hyper, tensors):
        self.hyper = hyper
        self.tensors = tensors

    @staticmethod
    def resolve(name):
        return TIED.get(name, name)

    def __getitem__(self, name):
        return self.tensors[self.resolve(name)]

    def __contains__(self, name):
        return self.resolve(name) in self.tensors

    def named(self):
        """Canonical name -> Tensor, each stored tensor exactly once."""
        return dict(self.tensors)

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self):
        out = {}
        for name, t in self.tensors.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            out[name] = c
        return ModelParams(self.hyper, out)


def init_params(hyper, seed):
    """Glorot-uniform matrices, zero biases, forget-gate bias 1. Deterministic."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name in sorted(param_shapes(hyper)):
        shape = param_shapes(hyper)[name]
        if name.endswith("_b") or name == "lstm_b":
            data = np.zeros(shape)
        elif len(shape) == 1:
            bound = np.sqrt(6.0 / (shape[0] + 1))
            data = rng.uniform(-bound, bound, size=shape)
        else:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    d = hyper.hidden_dim
    tensors["lstm_b"].data[d:2 * d] = 1.0  # forget gate opens early training
    return ModelParams(hyper, tensors)


class ParamNodes:
    """Per-graph cache mapping parameter names to leaf node ids."""

    def __init__(self, graph, params):
        self.graph = graph
        self.params = params
        self._ids = {}

    def __call__(self, name):
        key = ModelParams.resolve(name)
        nid = self._ids.get(key)
        if nid is None:
            nid = self.graph.leaf(self.params[key])
            self._ids[key] = nid
        return nid


def affine(graph, W, x, b):
    """W.x + b for node ids; the vector form of every learned linear map."""
    return graph.add(graph.matmul(W, x), b)


def embed(graph, table, token_id):
    """Row ``token_id`` of the embedding table; gradient reaches only that row."""
    return graph.row_lookup(table, int(token_id))


def lstm_step(graph, x, h_prev, c_prev, pw):
    """One LSTM step. Gate blocks are stacked (input, forget, output, candidate).

    Returns (h, c) node ids.
    """
    d = pw.params.hyper.hidden_dim
    gates = graph.add(
        graph.add(graph.matmul(pw("lstm_Wx"), x), graph.matmul(pw("lstm_Wh"), h_prev)),
        pw("lstm_b"),
    )
    i = graph.sigmoid(graph.slice_rows(gates, 0, d))
    f = graph.sigmoid(graph.slice_rows(gates, d, 2 * d))
    o = graph.sigmoid(graph.slice_rows(gates, 2 * d, 3 * d))
    cand = graph.tanh(graph.slice_rows(gates, 3 * d, 4 * d))
    c = graph.add(graph.elementwise_mul(f, c_prev), graph.elementwise_mul(i, cand))
    h = graph.elementwise_mul(o, graph.tanh(c))
    return h, c


# ---------------------------------------------------------------------------
# checkpoint format: magic, length-prefixed JSON header (hyperparams + extra
# run metadata), then each canonical tensor as
# (u32 name length, name bytes, u32 rank, u32 dims..., little-endian f64 data).


def save_checkpoint(path, params, extra=None):
    header = {"hyper": asdict(params.hyper), "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        names = sorted(params.tensors)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = params.tensors[name].data
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f8").tobytes(order="C"))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Returns (ModelParams, extra metadata dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    ofs = 8

    def take(n, what):
        nonlocal ofs
        if ofs + n > len(raw):
            raise CheckpointError(f"{path}: truncated reading {what} at byte {ofs}")
        piece = raw[ofs:ofs + n]
        ofs += n
        return piece

    (hlen,) = struct.unpack("<I", take(4, "header length"))
    header = json.loads(take(hlen, "header"))
    hyper = HyperParams(**header["hyper"])
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * size, f"tensor {name}"), dtype="<f8").reshape(dims)
        tensors[name] = Tensor(data.copy(), requires_grad=True)
    params = ModelParams(hyper, tensors)
    expected = set(param_shapes(hyper))
    if set(tensors) != expected:
        missing = expected - set(tensors)
        raise CheckpointError(f"{path}: tensor set mismatch (missing {sorted(missing)})")
    for name, shape in param_shapes(hyper).items():
        if tensors[name].data.shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tensors[name].data.shape}, expected {shape}")
    return params, header["extra"]
