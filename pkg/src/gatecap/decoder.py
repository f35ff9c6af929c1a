"""The merging decoder: importance scoring, the merging gate, vocabulary
projection, the full decode step, sequence loss, and generation.

Each timestep chains: input attention -> LSTM -> output attention -> visual
transform -> topic attention -> context fusion -> merging gate -> vocabulary
softmax. Ablation variants disable branches statically; a disabled visual
attention degrades to uniform weights, a disabled merging gate pins gamma.

The gate value is computed as sigmoid(S(context) - S(visual)) and the merged
vector as visual + gamma * (context - visual), which is the same convex
combination written in a form that is coordinate-wise between its endpoints
under IEEE rounding.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import attention as att
from .autodiff import Graph
from .nn import ParamNodes, embed, lstm_step


@dataclass(frozen=True)
class DecoderConfig:
    """Static wiring of one decoder variant.

    gate:        "scored" uses the learned importance scores; "fixed" pins
                 gamma at ``fixed_gamma`` (0 = visual only, 1 = topic only).
    gate_inputs: "context_visual" merges the fused context with the
                 transformed visual output; "topic_hidden" merges the attended
                 topic with the hidden state projected by the context map.
    topic_mode:  "hidden" attends topics from the LSTM state; "legacy" from
                 the previous word embedding.
    visual_input: "attended" feeds the attended (or uniform) visual summary to
                 the LSTM; "zeroed" feeds a zero vector (phase-1 training).
    """

    input_attention: bool = True
    output_attention: bool = True
    topic_attention: bool = True
    gate: str = "scored"
    fixed_gamma: float = 0.5
    gate_inputs: str = "context_visual"
    topic_mode: str = "hidden"
    visual_input: str = "attended"

    def __post_init__(self):
        if self.gate not in ("scored", "fixed"):
            raise ValueError(f"gate must be 'scored' or 'fixed', got {self.gate!r}")
        if self.gate_inputs not in ("context_visual", "topic_hidden"):
            raise ValueError(f"bad gate_inputs {self.gate_inputs!r}")
        if self.topic_mode not in ("hidden", "legacy"):
            raise ValueError(f"bad topic_mode {self.topic_mode!r}")
        if self.visual_input not in ("attended", "zeroed"):
            raise ValueError(f"bad visual_input {self.visual_input!r}")
        if not self.topic_attention and not (self.gate == "fixed" and self.fixed_gamma == 0.0):
            raise ValueError("without topic attention the gate must be fixed at 0")

    @property
    def needs_visual_side(self):
        return self.gate == "scored" or self.fixed_gamma < 1.0

    @property
    def needs_grid(self):
        visual_summary = self.needs_visual_side and self.gate_inputs == "context_visual"
        return self.visual_input == "attended" or visual_summary


# variant ids mirror the incremental-analysis rows
VARIANTS = {
    "baseline": DecoderConfig(input_attention=False, output_attention=False,
                              topic_attention=False, gate="fixed", fixed_gamma=0.0),
    "input": DecoderConfig(input_attention=True, output_attention=False,
                           topic_attention=False, gate="fixed", fixed_gamma=0.0),
    "output": DecoderConfig(input_attention=False, output_attention=True,
                            topic_attention=False, gate="fixed", fixed_gamma=0.0),
    "input_output": DecoderConfig(input_attention=True, output_attention=True,
                                  topic_attention=False, gate="fixed", fixed_gamma=0.0),
    "topic": DecoderConfig(input_attention=False, output_attention=False,
                           topic_attention=True, gate="fixed", fixed_gamma=1.0),
    "topic_mgate": DecoderConfig(input_attention=False, output_attention=False,
                                 topic_attention=True, gate="scored",
                                 gate_inputs="topic_hidden"),
    "topic_legacy": DecoderConfig(input_attention=False, output_attention=False,
                                  topic_attention=True, gate="fixed", fixed_gamma=1.0,
                                  topic_mode="legacy"),
    "input_output_topic": DecoderConfig(input_attention=True, output_attention=True,
                                        topic_attention=True, gate="fixed", fixed_gamma=0.5),
    "full": DecoderConfig(),
}

TABLE_VARIANTS = ["baseline", "input", "output", "input_output",
                  "topic", "topic_mgate", "input_output_topic", "full"]


def variant(name):
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; known: {', '.join(sorted(VARIANTS))}")


def phase1_config(config):
    """Phase-1 training wiring: topic path only, visual branches off."""
    return replace(config, input_attention=False, output_attention=False,
                   gate="fixed", fixed_gamma=1.0, visual_input="zeroed")


def used_param_names(config, include_projection=True):
    """Parameters a variant can touch; everything else stays frozen."""
    names = {"lstm_Wx", "lstm_Wh", "lstm_b", "embedding", "vocab_W", "vocab_b"}
    if config.needs_grid and include_projection:
        names |= {"proj_W", "proj_b"}
    if config.input_attention:
        names |= {"in_att_feat", "in_att_hid", "in_att_b", "in_att_v"}
    if config.output_attention:
        names |= {"out_att_feat", "out_att_hid", "out_att_b", "out_att_v"}
    if config.needs_visual_side and config.gate_inputs == "context_visual":
        names |= {"vis_out_W", "vis_out_b"}
    if config.topic_attention:
        if config.topic_mode == "legacy":
            names |= {"legacy_U", "legacy_b"}
        else:
            names |= {"top_att_emb", "top_att_hid", "top_att_b", "top_att_v"}
        if config.gate_inputs == "context_visual":
            names |= {"ctx_topic_W", "ctx_hid_W", "ctx_b"}
        else:
            names |= {"ctx_hid_W"}
    if config.gate == "scored":
        names |= {"score_ctx_W", "score_ctx_b", "score_vis_W", "score_vis_b",
                  "top_att_hid", "top_att_v"}  # tied storage
    return names


@dataclass
class DecodeState:
    h: int          # node id of the hidden state
    c: int          # node id of the cell state
    y_prev: int     # previous token id
    t: int = 0


@dataclass
class StepTrace:
    """Per-timestep inspection payload."""

    alpha: np.ndarray
    alpha_tilde: np.ndarray
    beta: np.ndarray
    gamma: float
    token: int
    logprob: float


def importance_score(graph, pw, h_t, x, weight_name, bias_name):
    """Score a candidate vector against the hidden state on the tied direction."""
    pre = graph.add(
        graph.add(graph.matmul(pw("score_hid_W"), h_t), graph.matmul(pw(weight_name), x)),
        pw(bias_name),
    )
    return graph.dot(graph.tanh(pre), pw("score_v"))


def merge_gate(graph, pw, s_t, r_t, h_t):
    """Blend contextual and visual vectors by their relative importance.

    Returns (gamma node, merged vector node).
    """
    score_s = importance_score(graph, pw, h_t, s_t, "score_ctx_W", "score_ctx_b")
    score_r = importance_score(graph, pw, h_t, r_t, "score_vis_W", "score_vis_b")
    diff = graph.add(score_s, graph.scale(score_r, graph.constant(-1.0)))
    gamma = graph.sigmoid(diff)
    span = graph.add(s_t, graph.scale(r_t, graph.constant(-1.0)))
    merged = graph.add(r_t, graph.scale(span, gamma))
    return gamma, merged


def vocab_project(graph, pw, c_t):
    """Distribution over the vocabulary from the merged context."""
    return graph.softmax(graph.add(graph.matmul(pw("vocab_W"), c_t), pw("vocab_b")))


def prepare_grids(graph, pw, raw, topic_ids, config):
    """Project features / embed topics once per graph. Either may be None."""
    V = None
    if config.needs_grid:
        V = att.project_features(graph, pw, graph.constant(np.asarray(raw, dtype=np.float64)))
    T = None
    if config.topic_attention:
        T = att.topic_matrix(graph, pw, topic_ids)
    return V, T


def decode_step(graph, pw, state, V, T, config):
    """One full decoder step. Returns (new state, p node, StepTrace).

    The trace records the weights actually used: uniform vectors for disabled
    attention branches and the pinned gamma for fixed gates.
    """
    hp = pw.params.hyper
    k = graph.value(V).shape[1] if V is not None else hp.regions
    y_emb = embed(graph, pw("embedding"), state.y_prev)

    if config.visual_input == "zeroed":
        z = graph.constant(np.zeros(hp.feature_dim))
        alpha = np.full(k, 1.0 / k)
    elif config.input_attention:
        res = att.input_attention(graph, pw, V, state.h)
        z, alpha = res.summary, graph.value(res.weights).copy()
    else:
        res = att.uniform_attention(graph, V, k)
        z, alpha = res.summary, graph.value(res.weights).copy()

    h, c = lstm_step(graph, graph.concat(z, y_emb), state.h, state.c, pw)

    r = None
    if config.needs_visual_side and config.gate_inputs == "context_visual":
        if config.output_attention:
            res = att.output_attention(graph, pw, V, h)
        else:
            res = att.uniform_attention(graph, V, k)
        alpha_tilde = graph.value(res.weights).copy()
        r = att.visual_transform(graph, pw, res.summary)
    else:
        alpha_tilde = np.full(k, 1.0 / k)

    s = None
    if config.topic_attention:
        if config.topic_mode == "legacy":
            tres = att.legacy_topic_attention(graph, pw, T, y_emb)
        else:
            tres = att.topic_attention(graph, pw, T, h)
        beta = graph.value(tres.weights).copy()
        if config.gate_inputs == "topic_hidden":
            s = tres.summary
            r = graph.matmul(pw("ctx_hid_W"), h)
        else:
            s = att.context_fuse(graph, pw, tres.summary, h)
    else:
        beta = np.full(hp.topics, 1.0 / hp.topics)

    if config.gate == "scored":
        gamma_node, merged = merge_gate(graph, pw, s, r, h)
        gamma = float(graph.value(gamma_node))
    else:
        gamma = config.fixed_gamma
        if gamma == 0.0:
            merged = r
        elif gamma == 1.0:
            merged = s
        else:
            span = graph.add(s, graph.scale(r, graph.constant(-1.0)))
            merged = graph.add(r, graph.scale(span, graph.constant(gamma)))

    p = vocab_project(graph, pw, merged)
    new_state = DecodeState(h=h, c=c, y_prev=state.y_prev, t=state.t + 1)
    trace = StepTrace(alpha=alpha, alpha_tilde=alpha_tilde, beta=beta,
                      gamma=gamma, token=-1, logprob=0.0)
    return new_state, p, trace


def initial_state(graph, pw):
    hp = pw.params.hyper
    d = hp.hidden_dim
    return DecodeState(h=graph.constant(np.zeros(d)), c=graph.constant(np.zeros(d)),
                       y_prev=hp.bos_id, t=0)


def sequence_loss_nodes(graph, pw, raw, topic_ids, caption_ids, config):
    """Teacher-forced mean cross entropy over the caption plus end token.

    Returns the loss node id.
    """
    hp = pw.params.hyper
    if len(caption_ids) == 0:
        raise ValueError("sequence_loss: caption must be non-empty")
    V, T = prepare_grids(graph, pw, raw, topic_ids, config)
    targets = list(caption_ids) + [hp.eos_id]
    state = initial_state(graph, pw)
    total = None
    for gold in targets:
        state, p, _ = decode_step(graph, pw, state, V, T, config)
        onehot = np.zeros(hp.vocab_size)
        onehot[gold] = 1.0
        term = graph.log(graph.dot(p, graph.constant(onehot)))
        total = term if total is None else graph.add(total, term)
        state.y_prev = gold  # teacher forcing
    return graph.scale(total, graph.constant(-1.0 / len(targets)))


def sequence_loss(raw, topic_ids, caption_ids, params, config):
    """Convenience wrapper returning the loss as a float."""
    graph = Graph()
    pw = ParamNodes(graph, params)
    loss = sequence_loss_nodes(graph, pw, raw, topic_ids, caption_ids, config)
    return float(graph.value(loss))


@dataclass
class GenerationResult:
    tokens: list        # emitted ids, end token excluded
    traces: list        # StepTrace per emitted step, end token included
    logprob: float


def _finish(tokens, traces, logprob, eos_id):
    if tokens and tokens[-1] == eos_id:
        return GenerationResult(tokens[:-1], traces, logprob)
    return GenerationResult(tokens, traces, logprob)


def greedy_search(step_fn, max_len, eos_id):
    """step_fn(prev_tokens) -> (log-prob vector, trace). Argmax ties pick the
    lowest token id."""
    tokens, traces, total = [], [], 0.0
    for _ in range(max_len):
        logp, trace = step_fn(tokens)
        tok = int(np.argmax(logp))
        trace.token = tok
        trace.logprob = float(logp[tok])
        tokens.append(tok)
        traces.append(trace)
        total += float(logp[tok])
        if tok == eos_id:
            break
    return _finish(tokens, traces, total, eos_id)


def beam_search(step_fn, max_len, eos_id, beam_width):
    """Keep the best partial sequences by total log-probability.

    Ties break toward the lexicographically smallest token sequence. Finished
    hypotheses leave the beam; the best finished one wins, else the best
    unfinished at max_len.
    """
    beams = [([], [], 0.0)]  # (tokens, traces, logprob)
    finished = []
    for _ in range(max_len):
        candidates = []
        for tokens, traces, total in beams:
            logp, trace = step_fn(tokens)
            order = np.argsort(-logp, kind="stable")[:beam_width]
            for tok in order:
                tok = int(tok)
                t2 = StepTrace(trace.alpha, trace.alpha_tilde, trace.beta,
                               trace.gamma, tok, float(logp[tok]))
                candidates.append((tokens + [tok], traces + [t2], total + float(logp[tok])))
        candidates.sort(key=lambda c: (-c[2], tuple(c[0])))
        beams = []
        for tokens, traces, total in candidates:
            if tokens[-1] == eos_id:
                finished.append((tokens, traces, total))
            else:
                beams.append((tokens, traces, total))
            if len(beams) == beam_width:
                break
        if not beams or len(finished) >= beam_width:
            break
    pool = finished if finished else beams
    pool.sort(key=lambda c: (-c[2], tuple(c[0])))
    tokens, traces, total = pool[0]
    return _finish(tokens, traces, total, eos_id)


def generate(raw, topic_ids, params, config, mode="greedy", beam_width=3, max_len=None):
    """Decode a caption for one image. Builds one growing graph per call."""
    hp = params.hyper
    if max_len is None:
        max_len = hp.max_len
    if max_len < 1 or beam_width < 1:
        raise ValueError("generate: max_len and beam_width must be >= 1")

    graph = Graph()
    pw = ParamNodes(graph, params)
    V, T = prepare_grids(graph, pw, raw, topic_ids, config)
    init = initial_state(graph, pw)
    # hidden state after expanding a prefix; shared by all its extensions
    after = {}

    def step_fn(prev_tokens):
        key = tuple(prev_tokens)
        if key:
            h, c = after[key[:-1]]
            state = DecodeState(h=h, c=c, y_prev=key[-1], t=len(key))
        else:
            state = DecodeState(h=init.h, c=init.c, y_prev=hp.bos_id, t=0)
        new_state, p, trace = decode_step(graph, pw, state, V, T, config)
        after[key] = (new_state.h, new_state.c)
        with np.errstate(divide="ignore"):  # saturated entries log to -inf
            logp = np.log(graph.value(p))
        return logp, trace

    if mode == "greedy":
        return greedy_search(step_fn, max_len, hp.eos_id)
    if mode == "beam":
        return beam_search(step_fn, max_len, hp.eos_id, beam_width)
    raise ValueError(f"unknown decode mode {mode!r}")
