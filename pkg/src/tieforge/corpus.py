"""Bag-structured distant-supervision corpora.

Corpus files are JSON lines, one sentence per line::

    {"head": "h1", "tail": "t1", "tokens": [...], "head_pos": 0,
     "tail_pos": 4, "relations": ["rel01", "rel02"]}

Lines sharing a (head, tail) pair form one bag whose labels are the union of
the line-level relation lists.  Relation index 0 is always NA.
"""
from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NA = 0
NA_NAME = "NA"
UNK, PAD = 0, 1
D_MAX = 30
MAX_LEN = 120


class CorpusError(ValueError):
    pass


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SentenceInstance:
    token_ids: tuple
    head_pos: int
    tail_pos: int
    pos1_ids: tuple
    pos2_ids: tuple


@dataclass(frozen=True)
class Bag:
    bag_id: str
    head: str
    tail: str
    sentences: tuple
    labels: frozenset

    def __post_init__(self):
        if not self.sentences:
            raise CorpusError(f"bag {self.bag_id}: no sentences")
        if not self.labels:
            raise CorpusError(f"bag {self.bag_id}: empty label set (use NA)")


class Vocabulary:
    def __init__(self, tokens=()):
        self.itos = ["<unk>", "<pad>"]
        self.stoi = {"<unk>": UNK, "<pad>": PAD}
        for t in tokens:
            self.add(t)

    def add(self, token):
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def get(self, token):
        return self.stoi.get(token, UNK)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos


class RelationMap:
    """Bidirectional relation name/index map with NA pinned at 0."""

    def __init__(self, names):
        names = list(names)
        if not names or names[0] != NA_NAME:
            raise CorpusError("relation map must start with NA at index 0")
        if len(set(names)) != len(names):
            raise CorpusError("duplicate relation names")
        self.names = names
        self.index = {n: i for i, n in enumerate(names)}

    def __len__(self):
        return len(self.names)

    def __eq__(self, other):
        return isinstance(other, RelationMap) and self.names == other.names

    @classmethod
    def load(cls, path):
        pairs = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                name, idx = line.split("\t")
                pairs.append((int(idx), name))
            except ValueError:
                raise CorpusError(f"{path}:{n}: expected 'name<TAB>index'") from None
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise CorpusError(f"{path}: relation indices must be 0..k-1")
        return cls([name for _, name in pairs])

    def save(self, path):
        Path(path).write_text("".join(f"{n}\t{i}\n" for i, n in enumerate(self.names)), encoding="utf-8")


def encode_positions(token_count, head_pos, tail_pos, d_max=D_MAX):
    i = np.arange(token_count)
    pos1 = np.clip(i - head_pos, -d_max, d_max) + d_max
    pos2 = np.clip(i - tail_pos, -d_max, d_max) + d_max
    return tuple(pos1.tolist()), tuple(pos2.tolist())


def _truncate(tokens, head_pos, tail_pos, max_len, where):
    if len(tokens) <= max_len:
        return tokens, head_pos, tail_pos
    lo, hi = min(head_pos, tail_pos), max(head_pos, tail_pos)
    if hi - lo + 1 > max_len:
        raise CorpusError(f"{where}: entities {hi - lo} tokens apart, cannot fit in {max_len}")
    # centre the window on the entity span
    start = max(0, min(lo - (max_len - (hi - lo + 1)) // 2, len(tokens) - max_len))
    return tokens[start:start + max_len], head_pos - start, tail_pos - start


def make_instance(token_ids, head_pos, tail_pos, d_max=D_MAX):
    p1, p2 = encode_positions(len(token_ids), head_pos, tail_pos, d_max)
    return SentenceInstance(tuple(token_ids), head_pos, tail_pos, p1, p2)


def bag_key(head, tail):
    return f"{head}\t{tail}"


def load_corpus(path, relations: RelationMap, vocab: Vocabulary | None = None,
                d_max=D_MAX, max_len=MAX_LEN):
    """Read a corpus file into bags.

    With ``vocab=None`` a fresh vocabulary is built (training mode); otherwise
    ``vocab`` is reused and unseen tokens map to UNK (test mode).
    """
    build = vocab is None
    if build:
        vocab = Vocabulary()
    groups: OrderedDict = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                head, tail = str(rec["head"]), str(rec["tail"])
                tokens = [str(t) for t in rec["tokens"]]
                hp, tp = int(rec["head_pos"]), int(rec["tail_pos"])
                rels = list(rec["relations"])
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{n}: malformed record ({exc})") from None
            bid = bag_key(head, tail)
            for pos, ent in ((hp, head), (tp, tail)):
                if not 0 <= pos < len(tokens) or tokens[pos] != ent:
                    raise CorpusError(f"{path}:{n}: bag {bid}: entity {ent!r} not found at position {pos}")
            tokens, hp, tp = _truncate(tokens, hp, tp, max_len, f"{path}:{n}: bag {bid}")
            ids = [vocab.add(t) if build else vocab.get(t) for t in tokens]
            labels = set()
            for r in rels:
                if r not in relations.index:
                    raise CorpusError(f"{path}:{n}: unknown relation {r!r}")
                labels.add(relations.index[r])
            g = groups.setdefault(bid, (head, tail, [], set()))
            g[2].append(make_instance(ids, hp, tp, d_max))
            g[3].update(labels)
    bags = [Bag(bid, h, t, tuple(sents), frozenset(labels or {NA}))
            for bid, (h, t, sents, labels) in groups.items()]
    log.info("loaded %d bags from %s", len(bags), path)
    return bags, vocab


def write_corpus(path, bags, vocab: Vocabulary, relations: RelationMap):
    with open(path, "w", encoding="utf-8") as fh:
        for bag in bags:
            rels = [relations.names[r] for r in sorted(bag.labels)]
            for s in bag.sentences:
                rec = {"head": bag.head, "tail": bag.tail,
                       "tokens": [vocab.itos[i] for i in s.token_ids],
                       "head_pos": s.head_pos, "tail_pos": s.tail_pos, "relations": rels}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def expand_training_units(bags):
    """One (bag, gold relation) unit per label, labels ascending."""
    return [(bag, r) for bag in bags for r in sorted(bag.labels)]


# ---------------------------------------------------------------- synthetic corpora

def _default_rules():
    # three clusters: 1-5 person-like, 6-8 business-like, 9-11 location-like
    implications = [(1, 2, 1.0), (1, 3, 0.6), (4, 2, 0.8), (5, 4, 1.0),
                    (6, 7, 1.0), (8, 7, 0.7), (9, 10, 1.0), (11, 10, 0.5)]
    exclusions = [(1, 6), (2, 7), (3, 8), (4, 9), (5, 10), (2, 11),
                  (6, 9), (7, 10), (8, 11), (3, 9)]
    return implications, exclusions


@dataclass
class SynthSpec:
    num_relations: int = 12
    num_bags: int = 2000
    vocab_size: int = 40
    # head and tail names are drawn from pools of this size; pairs stay unique
    num_entities: int = 100
    implications: list = field(default_factory=lambda: _default_rules()[0])
    exclusions: list = field(default_factory=lambda: _default_rules()[1])
    triggers_per_relation: int = 1
    na_fraction: float = 0.3
    seed: int = 7
    test_fraction: float = 0.2
    max_sentences: int = 4
    min_len: int = 5
    max_len: int = 10
    # chance that a sentence carries a trigger of one of its bag's labels
    express_prob: float = 0.9
    # given a trigger, chance it belongs to an implied label instead of the seed
    express_implied: float = 0.2

    def relation_names(self):
        return [NA_NAME] + [f"rel{i:02d}" for i in range(1, self.num_relations)]

    def trigger_tokens(self, r):
        return [f"trig{r:02d}_{m}" for m in range(self.triggers_per_relation)]

    def validate(self):
        k = self.num_relations
        if k < 2:
            raise SpecError("need at least NA plus one relation")
        if self.num_bags < 2 or self.vocab_size < 1 or self.triggers_per_relation < 1:
            raise SpecError("num_bags, vocab_size and triggers_per_relation must be positive")
        if not 0.0 <= self.na_fraction <= 1.0 or not 0.0 < self.test_fraction < 1.0:
            raise SpecError("na_fraction must lie in [0,1] and test_fraction in (0,1)")
        if not (0.0 <= self.express_prob <= 1.0 and 0.0 <= self.express_implied <= 1.0):
            raise SpecError("express_prob and express_implied must lie in [0,1]")
        if self.num_entities < 1 or self.num_entities ** 2 < self.num_bags:
            raise SpecError("entity pools too small for the requested number of unique pairs")
        if not 2 <= self.min_len <= self.max_len or self.max_sentences < 1:
            raise SpecError("bad sentence length / bag size bounds")
        for i, j, p in self.implications:
            if not (0 < i < k and 0 < j < k) or i == j:
                raise SpecError(f"implication {i}->{j} references invalid relations")
            if not 0.0 <= p <= 1.0:
                raise SpecError(f"implication {i}->{j} has probability {p} outside [0,1]")
        excl = set()
        for i, j in self.exclusions:
            if not (0 < i < k and 0 < j < k) or i == j:
                raise SpecError(f"exclusion ({i},{j}) references invalid relations")
            excl.add(frozenset((i, j)))
        for r in range(1, k):
            reach = self.closure(r)
            for pair in excl:
                if pair <= reach:
                    a, b = sorted(pair)
                    raise SpecError(f"relation {r} can imply both {a} and {b}, which are excluded")

    def closure(self, r):
        reach, todo = {r}, [r]
        while todo:
            cur = todo.pop()
            for i, j, p in self.implications:
                if i == cur and p > 0 and j not in reach:
                    reach.add(j)
                    todo.append(j)
        return reach


@dataclass
class GroundTruthTies:
    implications: list
    exclusions: list

    def save(self, path, names):
        lines = [f"IMPLIES\t{names[i]}\t{names[j]}\t{p!r}" for i, j, p in self.implications]
        lines += [f"EXCLUDES\t{names[i]}\t{names[j]}" for i, j in self.exclusions]
        Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")

    @classmethod
    def load(cls, path, relations: RelationMap):
        imp, exc = [], []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            try:
                if parts[0] == "IMPLIES" and len(parts) == 4:
                    imp.append((relations.index[parts[1]], relations.index[parts[2]], float(parts[3])))
                elif parts[0] == "EXCLUDES" and len(parts) == 3:
                    exc.append((relations.index[parts[1]], relations.index[parts[2]]))
                else:
                    raise ValueError(line)
            except (KeyError, ValueError):
                raise CorpusError(f"{path}:{n}: malformed ties line") from None
        return cls(imp, exc)


def _sample_labels(spec, rng):
    """Returns (label set, seed relation); the seed is NA for NA bags."""
    if rng.random() < spec.na_fraction:
        return {NA}, NA
    seed = int(rng.integers(1, spec.num_relations))
    labels = {seed}
    todo = [seed]
    while todo:
        cur = todo.pop(0)
        for i, j, p in spec.implications:
            if i == cur and j not in labels and rng.random() < p:
                labels.add(j)
                todo.append(j)
    return labels, seed


def generate_synthetic(spec: SynthSpec):
    """Planted-ties corpus: returns (train bags, test bags, vocab, relations, ties).

    Non-NA bags draw a seed relation uniformly and then fire implication rules
    breadth-first.  Every sentence mentions the bag's head and tail; with
    probability ``express_prob`` it also carries a trigger token, otherwise it
    is pure noise.  The trigger names the seed relation, or with probability
    ``express_implied`` one of the implied labels.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    relations = RelationMap(spec.relation_names())
    vocab = Vocabulary()
    noise = [vocab.add(f"w{i:04d}") for i in range(spec.vocab_size)]
    trig = {r: [vocab.add(t) for t in spec.trigger_tokens(r)] for r in range(1, spec.num_relations)}

    heads = [f"h{i:04d}" for i in range(spec.num_entities)]
    tails = [f"t{i:04d}" for i in range(spec.num_entities)]
    for name in heads + tails:
        vocab.add(name)
    pair_ids = rng.choice(spec.num_entities ** 2, size=spec.num_bags, replace=False)

    bags = []
    for pid in pair_ids:
        labels, root = _sample_labels(spec, rng)
        head, tail = heads[pid // spec.num_entities], tails[pid % spec.num_entities]
        hid, tid = vocab.stoi[head], vocab.stoi[tail]
        implied = sorted(labels - {NA, root})
        sents = []
        for _ in range(int(rng.integers(1, spec.max_sentences + 1))):
            T = int(rng.integers(spec.min_len, spec.max_len + 1))
            ids = [noise[x] for x in rng.integers(0, len(noise), size=T)]
            hp, tp = (int(x) for x in rng.choice(T, size=2, replace=False))
            ids[hp], ids[tp] = hid, tid
            if root != NA and rng.random() < spec.express_prob:
                r = root
                if implied and rng.random() < spec.express_implied:
                    r = implied[int(rng.integers(len(implied)))]
                free = [i for i in range(T) if i not in (hp, tp)]
                ids[free[int(rng.integers(len(free)))]] = trig[r][int(rng.integers(len(trig[r])))]
            sents.append(make_instance(ids, hp, tp))
        bags.append(Bag(bag_key(head, tail), head, tail, tuple(sents), frozenset(labels)))

    order = rng.permutation(len(bags))
    n_test = max(1, int(round(spec.test_fraction * len(bags))))
    test = [bags[i] for i in sorted(order[:n_test])]
    train = [bags[i] for i in sorted(order[n_test:])]
    ties = GroundTruthTies([tuple(x) for x in spec.implications], [tuple(x) for x in spec.exclusions])
    return train, test, vocab, relations, ties
