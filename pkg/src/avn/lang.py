"""Templated instructions, sub-instruction alignment and coarsened variants.

An episode walks the shortest path between a start/goal pair.  The moves of
the path are grouped into consecutive chunks (sub-instructions); every chunk
describes its moves as a turn direction plus the landmark of the node entered,
and the last chunk names the goal landmark.  Dropping chunks gives the short,
vaguer instruction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import GenerationError, GraphLookupError, InputError, VocabularyError
from .world import World, WorldConfig, generate_world, shortest_path

LANDMARKS = (
    "kitchen", "sofa", "lamp", "stairs", "piano", "fireplace", "bathroom", "bedroom",
    "table", "rug", "mirror", "plant", "window", "door", "hallway", "closet", "desk",
    "shelf", "painting", "clock", "chair", "bench", "sink", "oven", "fridge", "bed",
    "tv", "statue", "vase", "curtain", "arch", "balcony", "pillar", "counter",
    "bookcase", "dresser", "toilet", "shower", "laundry", "garage", "porch",
    "fountain", "railing", "cabinet",
)
FUNCTION_WORDS = (
    "walk", "turn", "left", "right", "go", "straight", "around", "and", "past", "the",
    "then", "stop", "at", "continue", "towards", "room",
)
DROP_POLICIES = ("tail", "random_k", "salient")
EPISODE_SCHEMA = "avn-episode"
EPISODE_VERSION = 1


class Vocab:
    """Dense token ids with a frozen unit-norm embedding table."""

    def __init__(self, dim: int = 32, seed: int = 0, n_landmarks: int = len(LANDMARKS)):
        if n_landmarks > len(LANDMARKS):
            raise VocabularyError(f"only {len(LANDMARKS)} landmark names available, asked for {n_landmarks}")
        self.symbols = list(FUNCTION_WORDS) + list(LANDMARKS[:n_landmarks])
        self.index = {s: i for i, s in enumerate(self.symbols)}
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        emb = rng.normal(size=(len(self.symbols), dim))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        emb.setflags(write=False)
        self.embeddings = emb

    def __len__(self):
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        try:
            return self.index[symbol]
        except KeyError:
            raise VocabularyError(f"unknown token {symbol!r}") from None

    def landmark_id(self, landmark: int) -> int:
        return len(FUNCTION_WORDS) + int(landmark)

    def is_landmark(self, tok: int) -> bool:
        return len(FUNCTION_WORDS) <= tok < len(self.symbols)

    def encode(self, words) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, tokens) -> list[str]:
        out = []
        for t in tokens:
            if not (0 <= int(t) < len(self.symbols)):
                raise VocabularyError(f"token id {t} outside vocabulary of {len(self.symbols)}")
            out.append(self.symbols[int(t)])
        return out


def embed_instruction(tokens, vocab: Vocab) -> np.ndarray:
    """L x dim matrix whose row i is the embedding of token i."""
    tokens = list(tokens)
    if not tokens:
        raise InputError("cannot embed an empty instruction")
    for t in tokens:
        if not (isinstance(t, (int, np.integer)) and 0 <= t < len(vocab)):
            raise VocabularyError(f"token id {t!r} outside vocabulary of {len(vocab)}")
    return vocab.embeddings[np.asarray(tokens, dtype=np.int64)].copy()


@dataclass(frozen=True)
class SubInstruction:
    tokens: tuple[int, ...]
    covers: tuple[int, int]  # inclusive GP index range


@dataclass(frozen=True)
class LangConfig:
    min_hops: int = 4
    max_hops: int = 8
    min_chunks: int = 3
    max_moves_per_chunk: int = 2
    start_attempts: int = 200


@dataclass(frozen=True)
class Episode:
    episode_id: str
    world_id: str
    start: int
    goal: int
    gp: tuple[int, ...]
    si: tuple[SubInstruction, ...]
    rel_si: tuple[int, ...]
    i_orig: tuple[int, ...]
    i_short: tuple[int, ...]
    dropped: frozenset = field(default_factory=frozenset)
    style: str = "orig"
    policy: str = "tail"
    seed: int = 0

    @property
    def instruction(self) -> tuple[int, ...]:
        return self.i_orig if self.style == "orig" else self.i_short

    @property
    def active_dropped(self) -> frozenset:
        """Sub-instructions missing from the instruction the agent is given."""
        return self.dropped if self.style == "short" else frozenset()

    def with_style(self, style: str) -> "Episode":
        if style not in ("orig", "short"):
            raise InputError(f"unknown style {style!r}")
        return replace(self, style=style)

    def si_span(self, k: int) -> tuple[int, int]:
        """Half-open token span of SI[k] inside I_orig."""
        start = sum(len(s.tokens) for s in self.si[:k])
        return start, start + len(self.si[k].tokens)

    def relevance(self, gp_index: int) -> np.ndarray:
        """Binary length-|I_orig| vector marking the tokens of rel_si_lookup(gp_index)."""
        k = self.rel_si[_gp_check(self, gp_index)]
        lo, hi = self.si_span(k)
        r = np.zeros(len(self.i_orig))
        r[lo:hi] = 1.0
        return r

    def to_dict(self) -> dict:
        return {
            "schema": EPISODE_SCHEMA, "version": EPISODE_VERSION,
            "episode_id": self.episode_id, "world_id": self.world_id,
            "start": self.start, "goal": self.goal, "gp": list(self.gp),
            "si": [{"tokens": list(s.tokens), "covers": list(s.covers)} for s in self.si],
            "rel_si": list(self.rel_si), "i_orig": list(self.i_orig), "i_short": list(self.i_short),
            "dropped": sorted(self.dropped), "style": self.style, "policy": self.policy,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        if d.get("schema") != EPISODE_SCHEMA or d.get("version") != EPISODE_VERSION:
            raise InputError(f"unsupported episode schema {d.get('schema')!r} v{d.get('version')!r}")
        return cls(
            episode_id=d["episode_id"], world_id=d["world_id"], start=d["start"], goal=d["goal"],
            gp=tuple(d["gp"]),
            si=tuple(SubInstruction(tuple(s["tokens"]), tuple(s["covers"])) for s in d["si"]),
            rel_si=tuple(d["rel_si"]), i_orig=tuple(d["i_orig"]), i_short=tuple(d["i_short"]),
            dropped=frozenset(d["dropped"]), style=d["style"], policy=d["policy"], seed=d["seed"],
        )


def _gp_check(ep: Episode, gp_index: int) -> int:
    if not (isinstance(gp_index, (int, np.integer)) and 0 <= gp_index < len(ep.gp)):
        raise GraphLookupError(f"gp_index {gp_index!r} outside path of {len(ep.gp)} nodes")
    return int(gp_index)


def rel_si_lookup(ep: Episode, gp_index: int) -> SubInstruction:
    return ep.si[ep.rel_si[_gp_check(ep, gp_index)]]


# -- grammar ----------------------------------------------------------------

def turn_direction(world: World, prev: int | None, cur: int, nxt: int) -> str:
    """Heading change at ``cur``: straight, left, right or around."""
    if prev is None:
        return "walk"
    a = world.positions[cur] - world.positions[prev]
    b = world.positions[nxt] - world.positions[cur]
    ang = math.degrees(math.atan2(a[0] * b[1] - a[1] * b[0], a @ b))
    if abs(ang) < 45.0:
        return "straight"
    if abs(ang) > 135.0:
        return "around"
    return "left" if ang > 0 else "right"


_DIRECTION_WORDS = {
    "walk": ["walk"], "straight": ["go", "straight"], "left": ["turn", "left"],
    "right": ["turn", "right"], "around": ["turn", "around"],
}


def _move_words(world, gp, j, vocab):
    """Words for the move entering gp[j] (j >= 1)."""
    prev = gp[j - 2] if j >= 2 else None
    d = turn_direction(world, prev, gp[j - 1], gp[j])
    return _DIRECTION_WORDS[d], vocab.symbols[vocab.landmark_id(world.landmarks[gp[j]])]


def _chunk_moves(rng, n_moves, cfg: LangConfig) -> list[list[int]]:
    """Partition moves 1..n_moves into consecutive groups of 1..max per group, >= min_chunks groups."""
    if n_moves < cfg.min_chunks:
        raise GenerationError(f"{n_moves} moves cannot form {cfg.min_chunks} chunks")
    while True:
        sizes, left = [], n_moves
        while left:
            s = int(rng.integers(1, min(cfg.max_moves_per_chunk, left) + 1))
            sizes.append(s)
            left -= s
        if len(sizes) >= cfg.min_chunks:
            break
    chunks, j = [], 1
    for s in sizes:
        chunks.append(list(range(j, j + s)))
        j += s
    return chunks


def build_sub_instructions(world: World, gp, chunks, vocab: Vocab) -> list[SubInstruction]:
    si = []
    for c, moves in enumerate(chunks):
        words = [] if c == 0 else ["then"]
        for pos, j in enumerate(moves):
            dwords, lm = _move_words(world, gp, j, vocab)
            if pos:
                words.append("and")
            last = c == len(chunks) - 1 and pos == len(moves) - 1
            if last:
                words += dwords + ["and", "stop", "at", "the", lm]
            else:
                words += dwords + ["past", "the", lm]
        lo = 0 if c == 0 else moves[0]
        si.append(SubInstruction(tuple(vocab.encode(words)), (lo, moves[-1])))
    return si


def _pick_pair(world: World, rng, cfg: LangConfig):
    for _ in range(cfg.start_attempts):
        s = int(rng.integers(world.n_nodes))
        hops = {}
        for g in range(world.n_nodes):
            if g != s:
                h = len(shortest_path(world, s, g)) - 1
                if cfg.min_hops <= h <= cfg.max_hops:
                    hops[g] = h
        if hops:
            goals = sorted(hops)
            return s, goals[int(rng.integers(len(goals)))]
    raise GenerationError(f"no start/goal pair with {cfg.min_hops}..{cfg.max_hops} hops in world {world.world_id}")


def generate_episode(world: World, seed: int, vocab: Vocab, cfg: LangConfig = LangConfig(),
                     drop_policy: str = "tail", episode_id: str = "") -> Episode:
    """Orig-style episode with its coarse variant precomputed by ``drop_policy``."""
    rng = np.random.default_rng(seed)
    start, goal = _pick_pair(world, rng, cfg)
    gp = shortest_path(world, start, goal)
    chunks = _chunk_moves(rng, len(gp) - 1, cfg)
    si = build_sub_instructions(world, gp, chunks, vocab)
    rel = [0] * len(gp)
    for k, s in enumerate(si):
        for j in range(s.covers[0], s.covers[1] + 1):
            rel[j] = k
    i_orig = tuple(t for s in si for t in s.tokens)
    ep = Episode(episode_id or f"{world.world_id}-e{seed}", world.world_id, start, goal, tuple(gp),
                 tuple(si), tuple(rel), i_orig, i_orig, frozenset(), "orig", drop_policy, seed)
    short = make_short(ep, drop_policy, seed, world=world)
    return replace(short, style="orig")


def make_short(ep: Episode, drop_policy: str = "tail", seed: int = 0, k: int | None = None,
               world: World | None = None) -> Episode:
    """Coarsen by dropping non-goal sub-instructions.

    tail      keep S_1 and the goal chunk (only the goal chunk when |SI| = 2)
    random_k  drop ``k`` random non-goal chunks (default |SI| - 2, at least 1)
    salient   keep the goal chunk and the non-goal chunk whose landmarks are
              rarest in the world (needs ``world``)
    """
    m = len(ep.si)
    if m < 2:
        raise InputError(f"cannot coarsen an instruction with {m} sub-instruction(s)")
    goal_k = m - 1
    if drop_policy == "tail":
        keep = {0, goal_k} if m > 2 else {goal_k}
    elif drop_policy == "random_k":
        k = max(1, m - 2) if k is None else k
        if not 1 <= k <= m - 1:
            raise InputError(f"random_k needs 1 <= k <= {m - 1}, got {k}")
        rng = np.random.default_rng(seed)
        drop = set(rng.choice(goal_k, size=k, replace=False).tolist())
        keep = set(range(m)) - drop
    elif drop_policy == "salient":
        if world is None:
            raise InputError("salient policy needs the world for landmark counts")
        counts = np.bincount(world.landmarks, minlength=world.cfg.n_landmarks)
        lm_of = {t: t - len(FUNCTION_WORDS) for s in ep.si for t in s.tokens if t >= len(FUNCTION_WORDS)}

        def rarity(kk):
            lms = [lm_of[t] for t in ep.si[kk].tokens if t in lm_of]
            return (min(counts[l] for l in lms), kk)

        keep = {goal_k, min(range(goal_k), key=rarity)}
    else:
        raise InputError(f"unknown drop policy {drop_policy!r}; expected one of {DROP_POLICIES}")
    dropped = frozenset(range(m)) - frozenset(keep)
    i_short = tuple(t for kk, s in enumerate(ep.si) if kk in keep for t in s.tokens)
    return replace(ep, i_short=i_short, dropped=dropped, style="short", policy=drop_policy)


# -- corpus -----------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    n_train_worlds: int = 60
    n_unseen_worlds: int = 8
    train_episodes: int = 1200
    val_seen_episodes: int = 240
    val_unseen_episodes: int = 200
    short_fraction: float = 0.5
    drop_policy: str = "tail"
    embed_dim: int = 32


@dataclass
class Corpus:
    worlds: dict[str, World]
    splits: dict[str, list[Episode]]
    vocab: Vocab

    def world(self, ep: Episode) -> World:
        try:
            return self.worlds[ep.world_id]
        except KeyError:
            raise GraphLookupError(f"episode {ep.episode_id} references unknown world {ep.world_id}") from None


def _episodes(worlds, n, rng, vocab, lang_cfg, policy, short_fraction, tag):
    eps = []
    ids = sorted(worlds)
    for i in range(n):
        w = worlds[ids[i % len(ids)]]
        ep = generate_episode(w, int(rng.integers(2**31)), vocab, lang_cfg, policy, f"{tag}-{i}")
        eps.append(ep)
    if short_fraction > 0:
        # exact 50/50 style mix; which episodes get the short form is seeded
        n_short = int(round(short_fraction * n))
        for i in rng.permutation(n)[:n_short]:
            eps[i] = eps[i].with_style("short")
    return eps


def build_corpus(seed: int, cfg: CorpusConfig = CorpusConfig(), world_cfg: WorldConfig = WorldConfig(),
                 lang_cfg: LangConfig = LangConfig()) -> Corpus:
    """train / val_seen on one world pool, val_unseen on fresh worlds."""
    rng = np.random.default_rng(seed)
    vocab = Vocab(cfg.embed_dim, seed=seed, n_landmarks=world_cfg.n_landmarks)
    seeds = rng.integers(2**31, size=cfg.n_train_worlds + cfg.n_unseen_worlds)
    train_w = {f"s{seed}-w{i}": generate_world(int(seeds[i]), world_cfg, f"s{seed}-w{i}")
               for i in range(cfg.n_train_worlds)}
    unseen_w = {f"s{seed}-u{i}": generate_world(int(seeds[cfg.n_train_worlds + i]), world_cfg, f"s{seed}-u{i}")
                for i in range(cfg.n_unseen_worlds)}
    splits = {
        "train": _episodes(train_w, cfg.train_episodes, rng, vocab, lang_cfg, cfg.drop_policy, 0.0, "train"),
        "val_seen": _episodes(train_w, cfg.val_seen_episodes, rng, vocab, lang_cfg, cfg.drop_policy,
                              cfg.short_fraction, "seen"),
        "val_unseen": _episodes(unseen_w, cfg.val_unseen_episodes, rng, vocab, lang_cfg, cfg.drop_policy,
                                cfg.short_fraction, "unseen"),
    }
    return Corpus({**train_w, **unseen_w}, splits, vocab)


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_corpus(corpus: Corpus, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"worlds": out / "worlds.jsonl"}
    write_jsonl(paths["worlds"], [corpus.worlds[k].to_dict() for k in sorted(corpus.worlds)])
    for name, eps in corpus.splits.items():
        paths[name] = out / f"{name}.jsonl"
        write_jsonl(paths[name], [e.to_dict() for e in eps])
    meta = {"vocab_dim": corpus.vocab.dim, "vocab_seed": corpus.vocab.seed,
            "n_landmarks": len(corpus.vocab) - len(FUNCTION_WORDS)}
    (out / "vocab.json").write_text(json.dumps(meta, sort_keys=True))
    return paths


def load_corpus(in_dir) -> Corpus:
    d = Path(in_dir)
    missing = [p.name for p in [d / "worlds.jsonl", d / "vocab.json"] if not p.exists()]
    if missing:
        from .errors import ConfigError
        raise ConfigError(f"corpus directory {d} is missing {', '.join(missing)}")
    meta = json.loads((d / "vocab.json").read_text())
    vocab = Vocab(meta["vocab_dim"], meta["vocab_seed"], meta["n_landmarks"])
    worlds = {}
    for blob in read_jsonl(d / "worlds.jsonl"):
        w = World.from_dict(blob)
        worlds[w.world_id] = w
    splits = {}
    for name in ("train", "val_seen", "val_unseen"):
        p = d / f"{name}.jsonl"
        if p.exists():
            splits[name] = [Episode.from_dict(b) for b in read_jsonl(p)]
    return Corpus(worlds, splits, vocab)
