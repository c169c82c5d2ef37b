"""Toy instruction-following navigator and the gated rollout loop.

The model has three parts:

    f_text   Î = Linear(X + MHA(X, X)),  X = token embeddings + sinusoidal positions
    f_cross  Ĝ = x + MHA(x, Î),  x = node input (landmark embedding, appearance,
             observation flag, current-node marker, turn direction from the heading)
    f_act    bilinear scores of the candidate rows against the attended context,
             the current node encoding and the goal summary Î[-1]; stop is scored
             as the current row plus a learned marker

α_t is the head-averaged cross-attention of explored nodes over tokens.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ContractViolation, DimensionError, InputError, StateError, TrainingError
from .lang import FUNCTION_WORDS, Corpus, Episode, Vocab, embed_instruction, turn_direction
from .nn import tensor as T
from .world import (NAVIGABLE, VISITED, AgentState, NavGraph, World, initial_graph,
                    observe_and_expand, oracle_next_move, path_length, shortest_path)

log = logging.getLogger(__name__)

STOP = -1
DIRECTIONS = ("none", "walk", "straight", "left", "right", "around")


@dataclass(frozen=True)
class NavConfig:
    model_dim: int = 32
    num_heads: int = 4
    epochs: int = 12
    batch_size: int = 8
    lr: float = 3e-3
    weight_decay: float = 0.01
    max_steps: int = 15
    seed: int = 0
    init_scale: float = 0.01
    use_features: bool = False
    pe_scale: float = 0.25
    success_radius: float = 0.0   # 0: the agent must stop exactly on the goal node


def positional_encoding(L: int, d: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / d))
    pe = np.zeros((L, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


class NavigatorModel:
    def __init__(self, vocab: Vocab, feature_dim: int, cfg: NavConfig = NavConfig(), store=None):
        if vocab.dim != cfg.model_dim:
            raise InputError(f"vocab dim {vocab.dim} != navigator model_dim {cfg.model_dim}")
        self.vocab = vocab
        self.cfg = cfg
        self.mha = nn.MHAConfig(cfg.num_heads, cfg.model_dim)
        self.feature_dim = feature_dim
        if store is None:
            store = self._init(np.random.default_rng(cfg.seed))
        self.store = store

    def _init(self, rng):
        d, s = self.cfg.model_dim, self.cfg.init_scale
        st = nn.ParamStore()
        nn.init_mha(st, "text.mha", self.mha, rng)
        st.add("text.W", np.eye(d) + nn.glorot(rng, (d, d)) * 0.1)
        st.add("text.b", np.zeros(d))
        st.add("node.feat", nn.glorot(rng, (d, self.feature_dim)))
        st.add("node.flag", rng.normal(scale=0.1, size=(3, d)))
        st.add("node.cur", rng.normal(scale=0.1, size=d))
        st.add("node.dir", rng.normal(scale=0.1, size=(len(DIRECTIONS), d)))
        nn.init_mha(st, "cross.mha", self.mha, rng)
        for p in ("A", "B", "C"):
            st.add(f"act.{p}", rng.normal(scale=s, size=(d, d)))
        st.add("act.w", rng.normal(scale=s, size=d))
        st.add("act.marker", rng.normal(scale=s, size=d))
        st.add("act.stop_bias", np.zeros(1))
        return st

    def fingerprint(self) -> str:
        return self.store.fingerprint()

    def meta(self) -> dict:
        c = self.cfg
        return {"kind": "navigator", "config": asdict(c), "feature_dim": self.feature_dim,
                "vocab_dim": self.vocab.dim, "vocab_seed": self.vocab.seed,
                "n_landmarks": len(self.vocab) - len(FUNCTION_WORDS)}


# -- forward pieces -------------------------------------------------------------

def _text_input(I: np.ndarray, scale: float) -> np.ndarray:
    return I + scale * positional_encoding(*I.shape[-2:])


def encode_text(I, model: NavigatorModel, key_mask=None, trainable=False) -> T.Tensor:
    """Î for an (L, d) or padded (B, L, d) embedding matrix."""
    I = np.asarray(I, dtype=np.float64)
    if I.shape[-1] != model.cfg.model_dim:
        raise DimensionError(f"instruction width {I.shape[-1]} != model_dim {model.cfg.model_dim}")
    if I.shape[-2] < 1:
        raise InputError("instruction must have at least one token")
    X = _text_input(I, model.cfg.pe_scale)
    st = model.store
    att, _ = nn.multihead_attention(X, X, st, model.mha, "text.mha", key_mask, trainable)
    return nn.linear_forward(T.add(X, att), st.var("text.W", trainable), st.var("text.b", trainable))


@dataclass
class NodeBatch:
    """Per-row raw node attributes; arrays share leading shape (..., R)."""

    lm: np.ndarray       # (..., R, d) landmark embeddings
    feat: np.ndarray     # (..., R, F)
    flag: np.ndarray     # (..., R, 3) one-hot
    cur: np.ndarray      # (..., R, 1)
    dirs: np.ndarray     # (..., R, 6) one-hot


def node_attributes(model: NavigatorModel, world: World, graph: NavGraph, state: AgentState, nodes) -> NodeBatch:
    nodes = np.asarray(nodes, dtype=np.int64)
    cur = state.current_node
    prev = state.path[-2] if len(state.path) >= 2 else None
    cand = set(graph.candidates(cur))
    dirs = np.zeros((len(nodes), len(DIRECTIONS)))
    for r, v in enumerate(nodes):
        name = turn_direction(world, prev, cur, int(v)) if int(v) in cand else "none"
        dirs[r, DIRECTIONS.index(name)] = 1.0
    lm_tok = [model.vocab.landmark_id(l) for l in world.landmarks[nodes]]
    return NodeBatch(
        lm=model.vocab.embeddings[lm_tok],
        feat=world.features[nodes],
        flag=np.eye(3)[graph.flags[nodes]],
        cur=(nodes == cur).astype(np.float64)[:, None],
        dirs=dirs,
    )


def node_inputs(model: NavigatorModel, nb: NodeBatch, trainable=False) -> T.Tensor:
    st = model.store
    x = T.as_tensor(nb.lm)
    if model.cfg.use_features:
        x = T.add(x, T.matmul(nb.feat, T.transpose(st.var("node.feat", trainable))))
    x = T.add(x, T.matmul(nb.flag, st.var("node.flag", trainable)))
    x = T.add(x, T.mul(nb.cur, st.var("node.cur", trainable)))
    return T.add(x, T.matmul(nb.dirs, st.var("node.dir", trainable)))


def cross_attend_rows(model, x, Ihat, key_mask=None, trainable=False):
    """(Ĝ rows, attended context, α) for node inputs ``x`` against Î."""
    c, alpha = nn.multihead_attention(x, Ihat, model.store, model.mha, "cross.mha", key_mask, trainable)
    return T.add(x, c), c, alpha


def _act_logits(model, G, c, x, goal, trainable=False):
    """Scores for options laid out as rows 1.. of (G, c, x) plus a trailing stop option.

    Row 0 of each input is the current node.  ``goal`` is (..., 1, d).
    """
    st = model.store
    A, B, C = (st.var(f"act.{p}", trainable) for p in ("A", "B", "C"))
    w, marker = st.var("act.w", trainable), st.var("act.marker", trainable)
    stop_bias = st.var("act.stop_bias", trainable)
    n = G.shape[-2]
    cur_G = T.getitem(G, (Ellipsis, slice(0, 1), slice(None)))
    cur_c = T.getitem(c, (Ellipsis, slice(0, 1), slice(None)))
    cur_x = T.getitem(x, (Ellipsis, slice(0, 1), slice(None)))
    rest = (Ellipsis, slice(1, n), slice(None))
    opt_G = T.concat([T.getitem(G, rest), T.add(cur_G, marker)], axis=-2)
    opt_c = T.concat([T.getitem(c, rest), cur_c], axis=-2)
    opt_x = T.concat([T.getitem(x, rest), T.add(cur_x, marker)], axis=-2)
    s = T.tsum(T.mul(T.matmul(opt_c, A), opt_x), axis=-1)
    s = T.add(s, T.tsum(T.mul(T.matmul(cur_G, B), opt_G), axis=-1))
    s = T.add(s, T.tsum(T.mul(T.matmul(goal, C), opt_G), axis=-1))
    s = T.add(s, T.tsum(T.mul(opt_G, w), axis=-1))
    stop_col = np.zeros(n)
    stop_col[-1] = 1.0
    return T.add(s, T.mul(stop_bias, stop_col))


# -- inference API ----------------------------------------------------------------

@dataclass
class NavigatorOutput:
    Ihat: np.ndarray
    nodes: np.ndarray          # explored node ids, row order of G_hat / alpha
    G_hat: np.ndarray
    alpha: np.ndarray
    options: list              # candidate ids then STOP
    beta: np.ndarray
    n_hat: int

    def row_of(self, node: int) -> int:
        idx = np.searchsorted(self.nodes, node)
        if idx >= len(self.nodes) or self.nodes[idx] != node:
            raise ContractViolation(f"node {node} is not in the explored graph")
        return int(idx)


def cross_attend(Ihat, world: World, graph: NavGraph, state: AgentState, model: NavigatorModel):
    """Ĝ_t and α_t for every explored node (sorted ids)."""
    nodes = graph.explored
    if len(nodes) == 0:
        raise StateError("cross_attend on an empty explored graph")
    with nn.no_grad():
        x = node_inputs(model, node_attributes(model, world, graph, state, nodes))
        G, c, alpha = cross_attend_rows(model, x, T.as_tensor(Ihat))
    return nodes, G.data, c.data, x.data, alpha


def predict_action(Ihat, nodes, G, c, x, graph: NavGraph, state: AgentState, model: NavigatorModel):
    """β over sorted navigable neighbours then stop; N̂ = argmax, ties to the smallest id."""
    cands = graph.candidates(state.current_node)
    rows = [int(np.searchsorted(nodes, state.current_node))] + [int(np.searchsorted(nodes, v)) for v in cands]
    with nn.no_grad():
        logits = _act_logits(model, T.Tensor(G[rows]), T.Tensor(c[rows]), T.Tensor(x[rows]),
                             T.Tensor(np.asarray(Ihat)[-1:]))
    z = logits.data - logits.data.max()
    beta = np.exp(z) / np.exp(z).sum()
    options = list(cands) + [STOP]
    return beta, options, options[int(np.argmax(beta))]


def navigator_step(model: NavigatorModel, world: World, graph: NavGraph, state: AgentState,
                   Ihat: np.ndarray) -> NavigatorOutput:
    nodes, G, c, x, alpha = cross_attend(Ihat, world, graph, state, model)
    beta, options, n_hat = predict_action(Ihat, nodes, G, c, x, graph, state, model)
    return NavigatorOutput(Ihat, nodes, G, alpha, options, beta, n_hat)


def instruction_encoding(model: NavigatorModel, tokens) -> np.ndarray:
    with nn.no_grad():
        return encode_text(embed_instruction(tokens, model.vocab), model).data


# -- teacher-forced training ------------------------------------------------------

@dataclass
class StepBatch:
    """Teacher-forced steps for a list of episodes, stacked for one forward pass."""

    tokens: list                  # per-episode token lists
    ep_index: np.ndarray          # (S,) episode of each step
    nodes: NodeBatch              # (S, R, ...) rows: current, candidates (padded)
    option_mask: np.ndarray       # (S, R) candidates then stop
    target: np.ndarray            # (S,) option index of the ground-truth move
    gp_index: np.ndarray          # (S,) GP index of the current node
    node_ids: np.ndarray          # (S, R) ids, -1 for padding


def teacher_forced_steps(model, world: World, ep: Episode, width: int):
    """Walk GP, yielding (state, graph, rows, target option index) at every node incl. the final stop."""
    state = AgentState.start(ep.gp[0])
    graph = initial_graph(world, ep.gp[0])
    out = []
    for k, u in enumerate(ep.gp):
        cands = graph.candidates(u)
        if len(cands) + 1 > width:
            raise InputError(f"{len(cands)} candidates exceed padding width {width - 1}")
        if k + 1 < len(ep.gp):
            nxt = ep.gp[k + 1]
            if nxt not in cands:
                raise ContractViolation(f"GP move {u}->{nxt} is not navigable")
            tgt = cands.index(nxt)
        else:
            tgt = width - 1           # stop column
        out.append((state, graph, [u] + cands, tgt, k))
        if k + 1 < len(ep.gp):
            state = state.move(ep.gp[k + 1])
            graph = observe_and_expand(graph, state)
    return out


def walk_gp(model: NavigatorModel, world: World, ep: Episode, tokens=None):
    """Navigator outputs at every GP node under teacher forcing: [(k, state, graph, out)]."""
    Ihat = instruction_encoding(model, ep.i_orig if tokens is None else tokens)
    state = AgentState.start(ep.gp[0])
    graph = initial_graph(world, ep.gp[0])
    res = []
    for k in range(len(ep.gp)):
        res.append((k, state, graph, navigator_step(model, world, graph, state, Ihat)))
        if k + 1 < len(ep.gp):
            state = state.move(ep.gp[k + 1])
            graph = observe_and_expand(graph, state)
    return res


def build_step_batch(model, corpus_worlds, episodes, width: int, use_short=False) -> StepBatch:
    d, F = model.cfg.model_dim, model.feature_dim
    rows = []
    toks = []
    for e_i, ep in enumerate(episodes):
        world = corpus_worlds[ep.world_id]
        toks.append(list(ep.i_short if use_short else ep.i_orig))
        for state, graph, ids, tgt, k in teacher_forced_steps(model, world, ep, width):
            rows.append((e_i, world, graph, state, ids, tgt, k))
    S = len(rows)
    lm = np.zeros((S, width, d))
    feat = np.zeros((S, width, F))
    flag = np.zeros((S, width, 3))
    cur = np.zeros((S, width, 1))
    dirs = np.zeros((S, width, len(DIRECTIONS)))
    mask = np.zeros((S, width), dtype=bool)
    node_ids = np.full((S, width), -1)
    ep_index, target, gp_index = np.zeros(S, int), np.zeros(S, int), np.zeros(S, int)
    for s, (e_i, world, graph, state, ids, tgt, k) in enumerate(rows):
        nb = node_attributes(model, world, graph, state, ids)
        n = len(ids)
        lm[s, :n], feat[s, :n], flag[s, :n], cur[s, :n], dirs[s, :n] = nb.lm, nb.feat, nb.flag, nb.cur, nb.dirs
        mask[s, :n - 1] = True
        mask[s, -1] = True
        node_ids[s, :n] = ids
        ep_index[s], target[s], gp_index[s] = e_i, tgt, k
    return StepBatch(toks, ep_index, NodeBatch(lm, feat, flag, cur, dirs), mask, target, gp_index, node_ids)


def _pad_instructions(model, token_lists):
    L = max(len(t) for t in token_lists)
    I = np.zeros((len(token_lists), L, model.cfg.model_dim))
    mask = np.zeros((len(token_lists), L), dtype=bool)
    for b, t in enumerate(token_lists):
        I[b, :len(t)] = embed_instruction(t, model.vocab)
        mask[b, :len(t)] = True
    return I, mask


def batch_logits(model, sb: StepBatch, trainable=True):
    """Option logits (S, R) for a StepBatch (rows 1.. are candidates, last column stop)."""
    I, kmask = _pad_instructions(model, sb.tokens)
    Ihat = encode_text(I, model, kmask, trainable)
    lengths = kmask.sum(1)
    kv = T.getitem(Ihat, sb.ep_index)
    goal = T.getitem(Ihat, (sb.ep_index, lengths[sb.ep_index] - 1))
    goal = T.reshape(goal, (len(sb.ep_index), 1, model.cfg.model_dim))
    x = node_inputs(model, sb.nodes, trainable)
    G, c, _ = cross_attend_rows(model, x, kv, kmask[sb.ep_index], trainable)
    return _act_logits(model, G, c, x, goal, trainable)


def _subset(sb: StepBatch, ep_ids) -> StepBatch:
    ep_ids = list(ep_ids)
    remap = {e: i for i, e in enumerate(ep_ids)}
    sel = np.flatnonzero(np.isin(sb.ep_index, ep_ids))
    nb = sb.nodes
    return StepBatch([sb.tokens[e] for e in ep_ids], np.array([remap[e] for e in sb.ep_index[sel]]),
                     NodeBatch(nb.lm[sel], nb.feat[sel], nb.flag[sel], nb.cur[sel], nb.dirs[sel]),
                     sb.option_mask[sel], sb.target[sel], sb.gp_index[sel], sb.node_ids[sel])


def teacher_forced_accuracy(model, sb: StepBatch) -> float:
    with nn.no_grad():
        z = batch_logits(model, sb, trainable=False).data
    z = np.where(sb.option_mask, z, -np.inf)
    return float((z.argmax(1) == sb.target).mean())


def padding_width(corpus: Corpus) -> int:
    return max(w.max_degree() for w in corpus.worlds.values()) + 1


def train_navigator(corpus: Corpus, cfg: NavConfig = NavConfig(), episodes=None,
                    history: list | None = None) -> NavigatorModel:
    """Teacher-forced imitation on fine-grained instructions."""
    episodes = list(corpus.splits["train"] if episodes is None else episodes)
    if not episodes:
        raise InputError("navigator training corpus is empty")
    feat_dim = next(iter(corpus.worlds.values())).features.shape[1]
    model = NavigatorModel(corpus.vocab, feat_dim, cfg)
    width = padding_width(corpus)
    sb = build_step_batch(model, corpus.worlds, episodes, width)
    rng = np.random.default_rng(cfg.seed + 1)
    last_good = model.store.copy()
    n_iter = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(episodes))
        for i in range(0, len(order), cfg.batch_size):
            mb = _subset(sb, sorted(order[i:i + cfg.batch_size]))
            logits = batch_logits(model, mb)
            loss = nn.masked_cross_entropy(logits, mb.target, mb.option_mask)
            if not np.isfinite(loss.data):
                raise TrainingError(f"navigator loss non-finite at iteration {n_iter}", last_good)
            T.backward(loss)
            nn.adamw_step(model.store, cfg.lr, cfg.weight_decay)
            if not model.store.all_finite():
                raise TrainingError(f"navigator parameters non-finite at iteration {n_iter}", last_good)
            if history is not None:
                history.append(float(loss.data))
            n_iter += 1
        last_good = model.store.copy()
        log.info("navigator epoch %d loss %.4f", epoch, float(loss.data))
    return model


# -- gated rollout ------------------------------------------------------------------

@dataclass
class StepContext:
    """Everything a gate may look at when deciding one step."""

    model: NavigatorModel
    world: World
    episode: Episode
    graph: NavGraph
    state: AgentState
    out: NavigatorOutput
    max_degree: int


class Gate:
    name = "gate"

    def uncertain(self, ctx: StepContext) -> bool:  # pragma: no cover - interface
        raise NotImplementedError


class NeverAsk(Gate):
    name = "never"

    def uncertain(self, ctx):
        return False


class AlwaysAsk(Gate):
    name = "always"

    def uncertain(self, ctx):
        return True


class OracleGate(Gate):
    """Asks exactly when the proposed move is wrong, so the agent never leaves GP."""

    name = "oracle"

    def uncertain(self, ctx):
        cur = ctx.state.current_node
        gt = STOP if cur == ctx.episode.goal else oracle_next_move(ctx.world, cur, ctx.episode.goal)
        return ctx.out.n_hat != gt


@dataclass
class StepRecord:
    t: int
    node: int
    options: list
    beta: list
    alpha_pooled: list
    n_hat: int
    gt_move: int
    uncertain: bool
    label_gp: int
    label_ip: int | None
    move: int
    intervention: bool


@dataclass
class Trajectory:
    episode_id: str
    style: str
    start: int
    goal: int
    path: list
    steps: list = field(default_factory=list)
    stopped: bool = False
    success: bool = False
    truncated: bool = False
    path_length: float = 0.0
    shortest_length: float = 0.0
    ne: float = 0.0

    @property
    def interventions(self) -> int:
        return sum(s.intervention for s in self.steps)


def alpha_profile(alpha: np.ndarray, bins: int = 16) -> np.ndarray:
    """Resample an attention row (or row mean) over tokens onto ``bins`` relative-position bins."""
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim == 2:
        a = a.mean(axis=0)
    L = len(a)
    edges = np.linspace(0.0, L, bins + 1)
    cum = np.concatenate([[0.0], np.cumsum(a)])
    return np.interp(edges[1:], np.arange(L + 1), cum) - np.interp(edges[:-1], np.arange(L + 1), cum)


def gp_label_index(ep: Episode, state: AgentState):
    """GP index whose sub-instruction governs the next move, or None when off the ground-truth path."""
    k = len(state.path) - 1
    if tuple(state.path) != tuple(ep.gp[:k + 1]):
        return None
    return min(k + 1, len(ep.gp) - 1)


def rollout(model: NavigatorModel, world: World, ep: Episode, gate: Gate | None = None,
            max_steps: int | None = None, label_ip=None, on_step=None) -> Trajectory:
    """Run the navigator; an uncertain gate decision hands the move to the shortest-path oracle.

    ``on_step(ctx, record)`` is called after every decision (sample collection hook).
    """
    gate = gate or NeverAsk()
    max_steps = model.cfg.max_steps if max_steps is None else max_steps
    if max_steps < 1:
        raise InputError("max_steps must be >= 1")
    Ihat = instruction_encoding(model, ep.instruction)
    state = AgentState.start(ep.start)
    graph = initial_graph(world, ep.start)
    traj = Trajectory(ep.episode_id, ep.style, ep.start, ep.goal, [ep.start])
    maxdeg = world.max_degree()
    for t in range(max_steps):
        out = navigator_step(model, world, graph, state, Ihat)
        cur = state.current_node
        gt = STOP if cur == ep.goal else oracle_next_move(world, cur, ep.goal)
        ctx = StepContext(model, world, ep, graph, state, out, maxdeg)
        unc = bool(gate.uncertain(ctx))
        li = None
        if label_ip is not None:
            k = gp_label_index(ep, state)
            li = None if k is None else label_ip(ep, k)
        move = gt if unc else out.n_hat
        traj.steps.append(StepRecord(
            t, cur, list(out.options), out.beta.tolist(), alpha_profile(out.alpha).tolist(),
            out.n_hat, gt, unc, int(out.n_hat != gt), li, move, unc and gt != STOP))
        if on_step is not None:
            on_step(ctx, traj.steps[-1])
        if move == STOP:
            traj.stopped = True
            break
        state = state.move(move)
        graph = observe_and_expand(graph, state)
        traj.path.append(move)
    else:
        traj.truncated = True
    final = traj.path[-1]
    traj.ne = world.distance(final, ep.goal)
    traj.success = traj.stopped and (final == ep.goal or traj.ne <= model.cfg.success_radius)
    traj.path_length = path_length(world, traj.path)
    traj.shortest_length = path_length(world, shortest_path(world, ep.start, ep.goal))
    return traj
